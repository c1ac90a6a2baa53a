//! Command implementations. Each writes its artifacts plus a
//! `run_manifest.json` carrying the fully resolved config, so any run can
//! be reproduced from its output directory alone.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use quantlab::data::{load_cifar10, synthetic, Dataset};
use quantlab::error::{Error, Result};
use quantlab::ghn::GhnModel;
use quantlab::graph::{load_graphs, ArchGraph, OpKind, SplitTag};
use quantlab::quant::BitConfig;
use quantlab::report;
use quantlab::study::{run_study, StudyReport, StudyRun};
use quantlab::train::{evaluate_ghn, ghn_finetune_fp32, ghn_qat, EvalReport, TrainHistory};

use crate::config::{AppConfig, DataSource, TrainMode};

/// Flag-level inputs, after defaulting.
pub struct Flags {
    pub out: PathBuf,
    pub threads: usize,
    pub plots: bool,
    pub seed: Option<u64>,
    pub bits: Option<BitConfig>,
    pub mode: Option<String>,
}

/// How a command finished; flags map to exit code 2.
pub enum Outcome {
    Clean,
    Flagged(String),
}

const MANIFEST_SCHEMA: u32 = 1;
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Serialize)]
struct RunManifest<'a> {
    schema: u32,
    command: &'a str,
    out_dir: String,
    threads: usize,
    plots: bool,
    /// Which image source actually loaded, where one was needed.
    data_source: Option<&'a str>,
    /// Canonical training mode, for ghn-train.
    mode: Option<String>,
    /// Fully resolved configuration after file, overrides, and flags.
    config: &'a AppConfig,
    outputs: Vec<String>,
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_manifest(
    out: &Path,
    command: &str,
    flags: &Flags,
    cfg: &AppConfig,
    data_source: Option<&str>,
    mode: Option<String>,
    outputs: Vec<String>,
) -> Result<()> {
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA,
        command,
        out_dir: out.display().to_string(),
        threads: flags.threads,
        plots: flags.plots,
        data_source,
        mode,
        config: cfg,
        outputs,
    };
    write_json(&out.join(RUN_MANIFEST), &manifest)
}

/// Load images per config. Auto mode falls back to the synthetic task
/// when the CIFAR-10 binaries are absent, loudly.
pub fn resolve_data(cfg: &AppConfig) -> Result<(Dataset<f64>, &'static str)> {
    match cfg.data.source {
        DataSource::Cifar10 => Ok((load_cifar10(&cfg.data.cifar_dir)?, "cifar10")),
        DataSource::Synthetic => Ok((synthetic(&cfg.data.synthetic)?, "synthetic")),
        DataSource::Auto => {
            if cfg.data.cifar_dir.join("data_batch_1.bin").exists() {
                Ok((load_cifar10(&cfg.data.cifar_dir)?, "cifar10"))
            } else {
                eprintln!(
                    "==========================================================\n\
                     NOTICE: no CIFAR-10 binaries under '{}'.\n\
                     Falling back to the bundled SYNTHETIC image task.\n\
                     Results are desk-scale stand-ins, not CIFAR-10 numbers.\n\
                     Point data.cifar_dir at cifar-10-batches-bin to use it.\n\
                     ==========================================================",
                    cfg.data.cifar_dir.display()
                );
                Ok((synthetic(&cfg.data.synthetic)?, "synthetic"))
            }
        }
    }
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn status_line(run: &StudyRun) -> String {
    let status = if let Some(d) = run.history.diverged {
        format!("DIVERGED at step {}", d.step)
    } else if let Some(msg) = &run.failure {
        format!("FAILED: {msg}")
    } else if let Some(row) = &run.row {
        format!(
            "fp32 top1 {:.1}%, {} top1 {:.1}%",
            row.fp32_top1 * 100.0,
            row.quant[0].bits,
            row.quant[0].top1 * 100.0
        )
    } else {
        "no row".to_string()
    };
    format!("[{}] {}", run.name(), status)
}

fn emit_study_artifacts(
    out: &Path,
    report: &StudyReport,
    plots: bool,
) -> Result<Vec<String>> {
    let mut outputs = Vec::new();
    let table = report::study_table_csv(report);
    report::check_study_table(&table)?;
    std::fs::write(out.join("study_table.csv"), &table)?;
    outputs.push("study_table.csv".to_string());

    let log = report::study_log_csv(report);
    report::check_study_log(&log)?;
    std::fs::write(out.join("study_log.csv"), &log)?;
    outputs.push("study_log.csv".to_string());

    let lw_dir = out.join("layerwise");
    std::fs::create_dir_all(&lw_dir)?;
    for run in &report.runs {
        let Some(records) = &run.layerwise else { continue };
        let stem = run.name().replace('/', "_");
        let csv = report::layerwise_csv(records);
        report::check_layerwise(&csv)?;
        std::fs::write(lw_dir.join(format!("{stem}.csv")), &csv)?;
        outputs.push(format!("layerwise/{stem}.csv"));
        if plots {
            let svg = report::layerwise_svg(records, &run.name());
            std::fs::write(lw_dir.join(format!("{stem}.svg")), &svg)?;
            outputs.push(format!("layerwise/{stem}.svg"));
        }
    }
    Ok(outputs)
}

pub fn cmd_init_study(mut cfg: AppConfig, flags: &Flags) -> Result<Outcome> {
    if let Some(seed) = flags.seed {
        cfg.study.seed = seed;
    }
    if let Some(bits) = flags.bits {
        cfg.study.bits = vec![bits];
    }
    let out = flags.out.clone();
    ensure_out(&out)?;
    let (data, source) = resolve_data(&cfg)?;
    eprintln!(
        "study: {} variants x {} inits on '{}' ({} train / {} test images)",
        cfg.study.variants.len(),
        cfg.study.inits.len(),
        data.name,
        data.train.len(),
        data.test.len()
    );
    let report = run_study(&data, &cfg.study, |run| eprintln!("{}", status_line(run)))?;

    let mut outputs = emit_study_artifacts(&out, &report, flags.plots)?;
    write_json(&out.join("study_report.json"), &report)?;
    outputs.push("study_report.json".to_string());
    write_manifest(&out, "init-study", flags, &cfg, Some(source), None, outputs)?;

    print!("{}", report::study_table_csv(&report));
    let flagged = report.flagged();
    if flagged.is_empty() {
        Ok(Outcome::Clean)
    } else {
        let names: Vec<String> = flagged.iter().map(|r| r.name()).collect();
        Ok(Outcome::Flagged(names.join(", ")))
    }
}

pub fn cmd_gen_graphs(mut cfg: AppConfig, flags: &Flags) -> Result<Outcome> {
    if let Some(seed) = flags.seed {
        cfg.graphs.seed = seed;
    }
    // Downstream commands find the dataset through graphs.dir; keep the
    // manifest consistent with where the files actually went.
    cfg.graphs.dir = flags.out.clone();
    let out = flags.out.clone();
    ensure_out(&out)?;
    let specs = cfg.graphs.specs();
    if specs.is_empty() {
        return Err(Error::config("graph dataset has no splits"));
    }
    let manifest = quantlab::graph::generate_dataset(&specs, &out)?;
    let mut outputs = vec!["manifest.json".to_string()];
    for stats in &manifest.splits {
        eprintln!(
            "{}: {} graphs, params {}..{} (mean {:.0}), {} bins",
            stats.split,
            stats.count,
            stats.min_params,
            stats.max_params,
            stats.mean_params,
            stats.param_histogram.len()
        );
        outputs.push(stats.file.clone());
    }
    write_manifest(&out, "gen-graphs", flags, &cfg, None, None, outputs)?;
    Ok(Outcome::Clean)
}

// Head width is the class count a graph classifies into; training on a
// mismatched image task would silently score garbage.
fn check_classes(graphs: &[ArchGraph], classes: usize, what: &str) -> Result<()> {
    for g in graphs {
        let head = g
            .nodes
            .iter()
            .find(|n| n.kind == OpKind::Head)
            .ok_or_else(|| Error::graph(format!("{what} graph {} has no head", g.index)))?;
        if head.channels != classes {
            return Err(Error::config(format!(
                "{what} graphs classify {} classes but the image task has {classes}; \
                 regenerate with graphs.num_classes={classes}",
                head.channels
            )));
        }
    }
    Ok(())
}

fn resolve_mode(cfg: &AppConfig, flags: &Flags) -> Result<TrainMode> {
    let mut mode = crate::config::parse_mode(flags.mode.as_deref().unwrap_or(&cfg.ghn.mode))?;
    if let Some(bits) = flags.bits {
        mode = match mode {
            TrainMode::Fp32 => {
                return Err(Error::config("--bits needs a qat mode; fp32 trains unquantized"))
            }
            TrainMode::Qat(_) => TrainMode::Qat(bits),
            TrainMode::QatNoise(_) => {
                if bits.weight_bits > 2 || bits.act_bits > 2 {
                    return Err(Error::config(
                        "the noise relaxation is for bitwidths of at most 2",
                    ));
                }
                TrainMode::QatNoise(bits)
            }
        };
    }
    Ok(mode)
}

pub fn cmd_ghn_train(mut cfg: AppConfig, flags: &Flags) -> Result<Outcome> {
    if let Some(seed) = flags.seed {
        cfg.ghn.schedule.seed = seed;
    }
    let mode = resolve_mode(&cfg, flags)?;
    cfg.ghn.mode = mode.label();
    let out = flags.out.clone();
    ensure_out(&out)?;

    let train_path = cfg.graphs.dir.join("train.jsonl");
    let graphs = load_graphs(&train_path)?;
    if graphs.is_empty() {
        return Err(Error::data(format!("{} holds no graphs", train_path.display())));
    }
    let (data, source) = resolve_data(&cfg)?;
    check_classes(&graphs, data.num_classes, "train")?;

    let mut model = match &cfg.ghn.init_checkpoint {
        Some(path) => {
            eprintln!("warm start from {}", path.display());
            GhnModel::<f64>::load(path)?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.ghn.schedule.seed);
            GhnModel::new(cfg.ghn.model.clone(), &mut rng)?
        }
    };
    eprintln!(
        "ghn-train: mode {}, {} graphs, {} epochs, meta batch {}",
        mode.label(),
        graphs.len(),
        cfg.ghn.schedule.epochs,
        cfg.ghn.schedule.meta_batch
    );
    let history = match mode {
        TrainMode::Fp32 => ghn_finetune_fp32(&mut model, &graphs, &data, &cfg.ghn.schedule)?,
        TrainMode::Qat(bits) | TrainMode::QatNoise(bits) => {
            ghn_qat(&mut model, &graphs, &data, &cfg.ghn.schedule, bits)?
        }
    };

    model.save(&out.join("ghn.json"))?;
    write_json(&out.join("history.json"), &history)?;
    // Later eval runs reuse this manifest as their config; point them at
    // the checkpoint just written.
    cfg.ghn.checkpoint = out.join("ghn.json");
    let outputs = vec!["ghn.json".to_string(), "history.json".to_string()];
    write_manifest(&out, "ghn-train", flags, &cfg, Some(source), Some(mode.label()), outputs)?;

    let last = history.losses.last().copied().unwrap_or(f64::NAN);
    eprintln!("{} steps, final loss {:.4}", history.losses.len(), last);
    match history.diverged {
        Some(d) => Ok(Outcome::Flagged(format!("training diverged at step {}", d.step))),
        None => Ok(Outcome::Clean),
    }
}

fn emit_eval_artifacts(out: &Path, report: &EvalReport) -> Result<Vec<String>> {
    let table = report::ghn_table_csv(report);
    report::check_ghn_table(&table)?;
    std::fs::write(out.join("ghn_table.csv"), &table)?;
    let rows = report::ghn_rows_csv(report);
    report::check_ghn_rows(&rows)?;
    std::fs::write(out.join("ghn_rows.csv"), &rows)?;
    Ok(vec!["ghn_table.csv".to_string(), "ghn_rows.csv".to_string()])
}

pub fn cmd_ghn_eval(mut cfg: AppConfig, flags: &Flags) -> Result<Outcome> {
    if let Some(seed) = flags.seed {
        cfg.ghn.eval.seed = seed;
    }
    if let Some(bits) = flags.bits {
        cfg.ghn.eval.bits = vec![bits];
    }
    let out = flags.out.clone();
    ensure_out(&out)?;

    let model = GhnModel::<f64>::load(&cfg.ghn.checkpoint)?;
    let (data, source) = resolve_data(&cfg)?;
    let mut splits = Vec::new();
    for stem in &cfg.ghn.eval_splits {
        let tag = SplitTag::parse(stem)?;
        let path = cfg.graphs.dir.join(format!("{}.jsonl", tag.file_stem()));
        let graphs = load_graphs(&path)?;
        check_classes(&graphs, data.num_classes, tag.name())?;
        eprintln!("{}: {} graphs", tag.name(), graphs.len());
        splits.push((tag.name().to_string(), graphs));
    }
    let report = evaluate_ghn(&model, &splits, &data, &cfg.ghn.eval)?;

    let mut outputs = emit_eval_artifacts(&out, &report)?;
    write_json(&out.join("eval_report.json"), &report)?;
    outputs.push("eval_report.json".to_string());
    write_manifest(&out, "ghn-eval", flags, &cfg, Some(source), None, outputs)?;

    print!("{}", report::ghn_table_csv(&report));
    Ok(Outcome::Clean)
}

/// Re-emit tables and plots from the JSON artifacts in a run directory.
pub fn cmd_report(cfg: AppConfig, flags: &Flags) -> Result<Outcome> {
    let out = flags.out.clone();
    let mut outputs = Vec::new();

    let study_path = out.join("study_report.json");
    if study_path.exists() {
        let report: StudyReport = serde_json::from_str(&std::fs::read_to_string(&study_path)?)?;
        outputs.extend(emit_study_artifacts(&out, &report, flags.plots)?);
        eprintln!(
            "study_report.json: {} runs, {} tabulated",
            report.runs.len(),
            report.table_rows().len()
        );
    }
    let eval_path = out.join("eval_report.json");
    if eval_path.exists() {
        let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&eval_path)?)?;
        outputs.extend(emit_eval_artifacts(&out, &report)?);
        eprintln!("eval_report.json: {} splits", report.splits.len());
    }
    let history_path = out.join("history.json");
    if history_path.exists() {
        let history: TrainHistory =
            serde_json::from_str(&std::fs::read_to_string(&history_path)?)?;
        let mut csv = String::from("Step,Loss\n");
        for (i, loss) in history.losses.iter().enumerate() {
            csv.push_str(&format!("{i},{loss:.6}\n"));
        }
        std::fs::write(out.join("loss.csv"), &csv)?;
        outputs.push("loss.csv".to_string());
    }

    if outputs.is_empty() {
        return Err(Error::config(format!(
            "no study_report.json, eval_report.json, or history.json under '{}'",
            out.display()
        )));
    }
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA,
        command: "report",
        out_dir: out.display().to_string(),
        threads: flags.threads,
        plots: flags.plots,
        data_source: None,
        mode: None,
        config: &cfg,
        outputs,
    };
    write_json(&out.join("report_manifest.json"), &manifest)?;
    Ok(Outcome::Clean)
}
