//! Table and plot emission.
//!
//! CSV writers for the study and hypernetwork results, strict schema
//! validators for everything written, and a hand-rolled SVG overlay of
//! layerwise ranges against step size. All writers build deterministic
//! strings; file placement belongs to the caller.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::quant::BitConfig;
use crate::study::{StudyReport, StudyRun};
use crate::train::{EvalReport, LayerwiseRecord};

/// Accuracy table columns, in order.
pub const STUDY_COLUMNS: [&str; 6] = [
    "Network Architecture",
    "FP32 Accuracy",
    "QUINT8 Accuracy",
    "QMSE",
    "QCE",
    "Percent Accuracy Decrease",
];

/// Run-log columns: every grid cell with its status flag.
pub const STUDY_LOG_COLUMNS: [&str; 8] = [
    "Network Architecture",
    "Status",
    "Final Loss",
    "Steps",
    "FP32 Accuracy",
    "QUINT8 Accuracy",
    "QMSE",
    "QCE",
];

/// Per-network hypernetwork evaluation columns.
pub const GHN_ROW_COLUMNS: [&str; 8] = [
    "Split",
    "Network Architecture",
    "Bit Setting",
    "Top1",
    "Top5",
    "QMSE",
    "QCE",
    "Percent Accuracy Decrease",
];

/// Layerwise analysis columns.
pub const LAYERWISE_COLUMNS: [&str; 9] = [
    "Layer",
    "Node",
    "Op",
    "Weight Min",
    "Weight Max",
    "Weight Step",
    "Act Min",
    "Act Max",
    "Act Step",
];

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_line(fields: &[String]) -> String {
    fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",")
}

fn pct(x: f64) -> f64 {
    x * 100.0
}

/// "W8/A8" style label used in table rows.
pub fn bit_setting_label(bits: Option<BitConfig>) -> String {
    match bits {
        None => "Float32".to_string(),
        Some(b) => format!("W{}/A{}", b.weight_bits, b.act_bits),
    }
}

/// Accuracy table over the tabulated study runs, scored at the study's
/// first bit setting. Accuracies are percentages.
pub fn study_table_csv(report: &StudyReport) -> String {
    let mut out = STUDY_COLUMNS.join(",");
    out.push('\n');
    for run in report.table_rows() {
        let row = run.row.as_ref().expect("tabulated runs carry a row");
        let q = &row.quant[0];
        let fields = [
            row.name.clone(),
            format!("{:.3}", pct(row.fp32_top1)),
            format!("{:.3}", pct(q.top1)),
            format!("{:.6e}", q.qmse),
            format!("{:.6}", q.qce),
            format!("{:.3}", q.pct_decrease),
        ];
        out.push_str(&csv_line(&fields));
        out.push('\n');
    }
    out
}

fn run_status(run: &StudyRun) -> String {
    if let Some(d) = run.history.diverged {
        return format!("diverged@{}", d.step);
    }
    if let Some(msg) = &run.failure {
        return format!("failed: {msg}");
    }
    "ok".to_string()
}

/// Every grid cell with its status; flagged runs keep empty metric
/// fields.
pub fn study_log_csv(report: &StudyReport) -> String {
    let mut out = STUDY_LOG_COLUMNS.join(",");
    out.push('\n');
    for run in &report.runs {
        let (fp32, quint8, qmse, qce) = match &run.row {
            Some(row) => {
                let q = &row.quant[0];
                (
                    format!("{:.3}", pct(row.fp32_top1)),
                    format!("{:.3}", pct(q.top1)),
                    format!("{:.6e}", q.qmse),
                    format!("{:.6}", q.qce),
                )
            }
            None => Default::default(),
        };
        let fields = [
            run.name(),
            run_status(run),
            run.history.losses.last().map(|l| format!("{l:.6}")).unwrap_or_default(),
            run.history.losses.len().to_string(),
            fp32,
            quint8,
            qmse,
            qce,
        ];
        out.push_str(&csv_line(&fields));
        out.push('\n');
    }
    out
}

/// Aggregate table: one row per bit setting (float first), one column
/// per split, each cell "mean±sem; max" in percent.
pub fn ghn_table_csv(report: &EvalReport) -> String {
    let splits: Vec<&str> = report.splits.iter().map(|s| s.split.as_str()).collect();
    let mut settings: Vec<Option<BitConfig>> = Vec::new();
    for cell in &report.aggregates {
        if !settings.contains(&cell.bits) {
            settings.push(cell.bits);
        }
    }
    let mut out = String::from("Bit Setting");
    for s in &splits {
        let _ = write!(out, ",{}", csv_field(s));
    }
    out.push('\n');
    for bits in settings {
        let mut fields = vec![bit_setting_label(bits)];
        for split in &splits {
            let cell = report
                .aggregates
                .iter()
                .find(|c| c.split == *split && c.bits == bits);
            fields.push(match cell {
                Some(c) if c.n > 0 => {
                    format!("{:.1}±{:.1}; {:.1}", pct(c.mean), pct(c.sem), pct(c.max))
                }
                _ => "-".to_string(),
            });
        }
        out.push_str(&csv_line(&fields));
        out.push('\n');
    }
    out
}

/// Per-network dump behind the aggregate table, float rows included.
pub fn ghn_rows_csv(report: &EvalReport) -> String {
    let mut out = GHN_ROW_COLUMNS.join(",");
    out.push('\n');
    for split in &report.splits {
        for row in &split.rows {
            let float_fields = [
                split.split.clone(),
                row.name.clone(),
                bit_setting_label(None),
                format!("{:.3}", pct(row.fp32_top1)),
                format!("{:.3}", pct(row.fp32_top5)),
                String::new(),
                String::new(),
                String::new(),
            ];
            out.push_str(&csv_line(&float_fields));
            out.push('\n');
            for q in &row.quant {
                let fields = [
                    split.split.clone(),
                    row.name.clone(),
                    bit_setting_label(Some(q.bits)),
                    format!("{:.3}", pct(q.top1)),
                    format!("{:.3}", pct(q.top5)),
                    format!("{:.6e}", q.qmse),
                    format!("{:.6}", q.qce),
                    format!("{:.3}", q.pct_decrease),
                ];
                out.push_str(&csv_line(&fields));
                out.push('\n');
            }
        }
    }
    out
}

/// Layerwise ranges and steps; activation fields stay empty where the
/// layer does not read a quantization site.
pub fn layerwise_csv(records: &[LayerwiseRecord]) -> String {
    let mut out = LAYERWISE_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let (amin, amax, astep) = match r.act {
            Some(a) => {
                (format!("{:.6}", a.min), format!("{:.6}", a.max), format!("{:.6e}", a.step))
            }
            None => Default::default(),
        };
        let fields = [
            r.layer.to_string(),
            r.node.to_string(),
            r.op.clone(),
            format!("{:.6}", r.weight_min),
            format!("{:.6}", r.weight_max),
            format!("{:.6e}", r.weight_step),
            amin,
            amax,
            astep,
        ];
        out.push_str(&csv_line(&fields));
        out.push('\n');
    }
    out
}

// Split a CSV line on unquoted commas; quoted fields may hold commas and
// doubled quotes.
fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted && chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            '"' => quoted = !quoted,
            ',' if !quoted => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

/// Which values a validated column accepts.
#[derive(Clone, Copy)]
enum Field {
    Text,
    Number,
    /// Number or empty (flagged rows).
    OptionalNumber,
    /// Integer count.
    Count,
    /// "mean±sem; max" cell or "-".
    AggregateCell,
}

fn check_field(kind: Field, value: &str, line: usize, col: &str) -> Result<()> {
    let bad = |what: &str| {
        Err(Error::data(format!("line {line}, column '{col}': {what} (got '{value}')")))
    };
    match kind {
        Field::Text => {
            if value.is_empty() {
                return bad("empty text field");
            }
        }
        Field::Number => {
            if value.parse::<f64>().map_or(true, |v| v.is_nan()) {
                return bad("expected a number");
            }
        }
        Field::OptionalNumber => {
            if !value.is_empty() && value.parse::<f64>().map_or(true, |v| v.is_nan()) {
                return bad("expected a number or empty");
            }
        }
        Field::Count => {
            if value.parse::<u64>().is_err() {
                return bad("expected a count");
            }
        }
        Field::AggregateCell => {
            if value == "-" {
                return Ok(());
            }
            let ok = value
                .split_once('±')
                .and_then(|(mean, rest)| {
                    let (sem, max) = rest.split_once("; ")?;
                    Some(
                        mean.parse::<f64>().is_ok()
                            && sem.parse::<f64>().is_ok()
                            && max.parse::<f64>().is_ok(),
                    )
                })
                .unwrap_or(false);
            if !ok {
                return bad("expected 'mean±sem; max'");
            }
        }
    }
    Ok(())
}

fn check_csv(csv: &str, columns: &[&str], kinds: &[Field]) -> Result<()> {
    let mut lines = csv.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::data("empty CSV"))?;
    let got = split_csv_line(header);
    if got != columns {
        return Err(Error::data(format!("header {got:?}, want {columns:?}")));
    }
    for (i, line) in lines {
        let fields = split_csv_line(line);
        if fields.len() != columns.len() {
            return Err(Error::data(format!(
                "line {}: {} fields, want {}",
                i + 1,
                fields.len(),
                columns.len()
            )));
        }
        for ((kind, value), col) in kinds.iter().zip(&fields).zip(columns) {
            check_field(*kind, value, i + 1, col)?;
        }
    }
    Ok(())
}

/// Strict schema check for [`study_table_csv`] output.
pub fn check_study_table(csv: &str) -> Result<()> {
    use Field::*;
    check_csv(csv, &STUDY_COLUMNS, &[Text, Number, Number, Number, Number, Number])
}

/// Strict schema check for [`study_log_csv`] output.
pub fn check_study_log(csv: &str) -> Result<()> {
    use Field::*;
    check_csv(
        csv,
        &STUDY_LOG_COLUMNS,
        &[Text, Text, OptionalNumber, Count, OptionalNumber, OptionalNumber, OptionalNumber, OptionalNumber],
    )
}

/// Strict schema check for [`ghn_rows_csv`] output.
pub fn check_ghn_rows(csv: &str) -> Result<()> {
    use Field::*;
    check_csv(
        csv,
        &GHN_ROW_COLUMNS,
        &[Text, Text, Text, Number, Number, OptionalNumber, OptionalNumber, OptionalNumber],
    )
}

/// Strict schema check for [`ghn_table_csv`] output: the split columns
/// are positional, so only the corner label is fixed.
pub fn check_ghn_table(csv: &str) -> Result<()> {
    let mut lines = csv.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::data("empty CSV"))?;
    let cols = split_csv_line(header);
    if cols.first().map(String::as_str) != Some("Bit Setting") || cols.len() < 2 {
        return Err(Error::data(format!("aggregate header {cols:?}")));
    }
    for (i, line) in lines {
        let fields = split_csv_line(line);
        if fields.len() != cols.len() {
            return Err(Error::data(format!(
                "line {}: {} fields, want {}",
                i + 1,
                fields.len(),
                cols.len()
            )));
        }
        check_field(Field::Text, &fields[0], i + 1, "Bit Setting")?;
        for (value, col) in fields[1..].iter().zip(&cols[1..]) {
            check_field(Field::AggregateCell, value, i + 1, col)?;
        }
    }
    Ok(())
}

/// Strict schema check for [`layerwise_csv`] output.
pub fn check_layerwise(csv: &str) -> Result<()> {
    use Field::*;
    check_csv(
        csv,
        &LAYERWISE_COLUMNS,
        &[Count, Count, Text, Number, Number, Number, OptionalNumber, OptionalNumber, OptionalNumber],
    )
}

const SVG_W: f64 = 720.0;
const SVG_H: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 64.0;
const MARGIN_T: f64 = 48.0;
const MARGIN_B: f64 = 52.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    dashed: bool,
    /// (layer, value) pairs, already filtered to present points.
    points: Vec<(usize, f64)>,
}

fn scale(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

fn polyline(s: &Series<'_>, n: usize, lo: f64, hi: f64) -> String {
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let x = |layer: usize| {
        if n <= 1 {
            MARGIN_L + plot_w / 2.0
        } else {
            MARGIN_L + plot_w * layer as f64 / (n - 1) as f64
        }
    };
    let y = |v: f64| MARGIN_T + plot_h * (1.0 - (v - lo) / (hi - lo));
    let pts: Vec<String> =
        s.points.iter().map(|&(l, v)| format!("{:.2},{:.2}", x(l), y(v))).collect();
    let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
    format!(
        "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"{} points=\"{}\"/>\n",
        s.color,
        dash,
        pts.join(" ")
    )
}

/// Overlay of layerwise weight and activation ranges (left axis) against
/// the weight quantization step (right axis), in layer order.
pub fn layerwise_svg(records: &[LayerwiseRecord], title: &str) -> String {
    let n = records.len();
    let mut left = vec![
        Series {
            label: "weight min",
            color: "#1f77b4",
            dashed: false,
            points: records.iter().map(|r| (r.layer, r.weight_min)).collect(),
        },
        Series {
            label: "weight max",
            color: "#d62728",
            dashed: false,
            points: records.iter().map(|r| (r.layer, r.weight_max)).collect(),
        },
    ];
    let act_min: Vec<(usize, f64)> =
        records.iter().filter_map(|r| r.act.map(|a| (r.layer, a.min))).collect();
    let act_max: Vec<(usize, f64)> =
        records.iter().filter_map(|r| r.act.map(|a| (r.layer, a.max))).collect();
    if !act_min.is_empty() {
        left.push(Series { label: "act min", color: "#2ca02c", dashed: true, points: act_min });
        left.push(Series { label: "act max", color: "#9467bd", dashed: true, points: act_max });
    }
    let step = Series {
        label: "weight step",
        color: "#ff7f0e",
        dashed: false,
        points: records.iter().map(|r| (r.layer, r.weight_step)).collect(),
    };

    let all_left: Vec<f64> = left.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let (llo, lhi) = scale(
        all_left.iter().cloned().fold(f64::INFINITY, f64::min),
        all_left.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (slo, shi) = scale(0.0, step.points.iter().map(|p| p.1).fold(0.0, f64::max));

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_W} {SVG_H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = write!(
        svg,
        "<text x=\"{:.0}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        SVG_W / 2.0,
        xml_escape(title)
    );
    // Axes.
    let x0 = MARGIN_L;
    let x1 = SVG_W - MARGIN_R;
    let y0 = MARGIN_T;
    let y1 = SVG_H - MARGIN_B;
    let _ = write!(
        svg,
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{:.0}\" height=\"{:.0}\" fill=\"none\" stroke=\"#888\"/>\n",
        x1 - x0,
        y1 - y0
    );
    for f in [0.0, 0.5, 1.0] {
        let y = y0 + (y1 - y0) * (1.0 - f);
        let lv = llo + f * (lhi - llo);
        let sv = slo + f * (shi - slo);
        let _ = write!(
            svg,
            "<text x=\"{:.0}\" y=\"{y:.0}\" text-anchor=\"end\">{lv:.3}</text>\n",
            x0 - 6.0
        );
        let _ = write!(
            svg,
            "<text x=\"{:.0}\" y=\"{y:.0}\" text-anchor=\"start\">{sv:.2e}</text>\n",
            x1 + 6.0
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{:.0}\" y=\"{:.0}\" text-anchor=\"middle\">layer</text>\n",
        (x0 + x1) / 2.0,
        SVG_H - 14.0
    );

    for s in &left {
        svg.push_str(&polyline(s, n, llo, lhi));
    }
    svg.push_str(&polyline(&step, n, slo, shi));

    let mut lx = x0;
    for s in left.iter().chain(std::iter::once(&step)) {
        let _ = write!(
            svg,
            "<line x1=\"{lx:.0}\" y1=\"{:.0}\" x2=\"{:.0}\" y2=\"{:.0}\" stroke=\"{}\" stroke-width=\"3\"/>\
             <text x=\"{:.0}\" y=\"{:.0}\">{}</text>\n",
            y0 - 10.0,
            lx + 16.0,
            y0 - 10.0,
            s.color,
            lx + 20.0,
            y0 - 6.0,
            s.label
        );
        lx += 118.0;
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
