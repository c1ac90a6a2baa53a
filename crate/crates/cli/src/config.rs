//! Resolved run configuration.
//!
//! Defaults are code; a JSON config file deep-merges over them and
//! `key.path=value` overrides patch the merged tree before it
//! deserializes. The fully resolved config lands in every run manifest,
//! so a run is reproducible from its manifest alone.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use quantlab::data::SyntheticSpec;
use quantlab::error::{Error, Result};
use quantlab::ghn::GhnConfig;
use quantlab::graph::{SamplerConfig, SplitTag};
use quantlab::quant::BitConfig;
use quantlab::study::StudyConfig;
use quantlab::train::{GhnEvalConfig, TrainSchedule};

/// Where images come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// CIFAR-10 when the binary batches are present, synthetic otherwise.
    Auto,
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding data_batch_1.bin .. test_batch.bin.
    pub cifar_dir: PathBuf,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Auto,
            cifar_dir: PathBuf::from("cifar-10-batches-bin"),
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphsConfig {
    /// Dataset directory written by gen-graphs and read by ghn-train/eval.
    pub dir: PathBuf,
    pub train_count: usize,
    /// Per held-out split.
    pub test_count: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Drop batch norm from the train split and keep only the BN-free
    /// held-out split.
    pub bn_free_only: bool,
    /// Expert escape hatch: explicit (sampler, count) pairs replacing the
    /// canonical five-split layout entirely.
    pub splits: Option<Vec<(SamplerConfig, usize)>>,
}

impl Default for GraphsConfig {
    fn default() -> Self {
        GraphsConfig {
            dir: PathBuf::from("runs/graphs"),
            train_count: 1000,
            test_count: 100,
            num_classes: 3,
            seed: 0,
            bn_free_only: false,
            splits: None,
        }
    }
}

impl GraphsConfig {
    /// The (sampler, count) pairs this config stands for.
    pub fn specs(&self) -> Vec<(SamplerConfig, usize)> {
        if let Some(splits) = &self.splits {
            return splits.clone();
        }
        let mut specs = Vec::new();
        for (i, tag) in SplitTag::ALL.iter().enumerate() {
            if self.bn_free_only && !matches!(tag, SplitTag::Train | SplitTag::BNFree) {
                continue;
            }
            let mut cfg = SamplerConfig::for_split(*tag, self.seed.wrapping_add(i as u64));
            cfg.num_classes = self.num_classes;
            if self.bn_free_only {
                cfg.bn_prob = 0.0;
            }
            let count = if *tag == SplitTag::Train { self.train_count } else { self.test_count };
            specs.push((cfg, count));
        }
        specs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GhnSection {
    pub model: GhnConfig,
    pub schedule: TrainSchedule,
    /// fp32 | qat:W/A | qat-noise:W/A (noise requires bits <= 2).
    pub mode: String,
    /// Checkpoint written by ghn-train and read by ghn-eval.
    pub checkpoint: PathBuf,
    /// Optional warm start for ghn-train.
    pub init_checkpoint: Option<PathBuf>,
    pub eval: GhnEvalConfig,
    /// Held-out split file stems evaluated by ghn-eval.
    pub eval_splits: Vec<String>,
}

impl Default for GhnSection {
    fn default() -> Self {
        GhnSection {
            model: GhnConfig::default(),
            schedule: TrainSchedule::ghn_default(),
            mode: "fp32".to_string(),
            checkpoint: PathBuf::from("runs/ghn-train/ghn.json"),
            init_checkpoint: None,
            eval: GhnEvalConfig::default(),
            eval_splits: vec![
                "test_id".to_string(),
                "deep".to_string(),
                "wide".to_string(),
                "bn_free".to_string(),
            ],
        }
    }
}

/// Everything a command reads, fully resolved.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub data: DataConfig,
    pub study: StudyConfig,
    pub graphs: GraphsConfig,
    pub ghn: GhnSection,
}

// Objects merge key by key; anything else is replaced wholesale.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Patch one `key.path=value` override into the config tree. Values parse
/// as JSON first (numbers, bools, arrays, quoted strings) and fall back
/// to plain strings.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{spec}' is not key.path=value")))?;
    if path.is_empty() {
        return Err(Error::config(format!("override '{spec}' has an empty key")));
    }
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if i == 0 && !matches!(*seg, "data" | "study" | "graphs" | "ghn") {
            return Err(Error::config(format!(
                "override '{path}' must start with data, study, graphs, or ghn"
            )));
        }
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::config(format!("override '{path}': '{seg}' is not addressable"))
        })?;
        node = obj.entry(seg.to_string()).or_insert(serde_json::Value::Null);
        if i + 1 < segments.len() && node.is_null() {
            *node = serde_json::Value::Object(Default::default());
        }
    }
    *node = value;
    Ok(())
}

/// Defaults, overlaid by the optional JSON file, patched by overrides.
pub fn resolve(file: Option<&std::path::Path>, overrides: &[String]) -> Result<AppConfig> {
    let mut tree = serde_json::to_value(AppConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
        let patch: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(Error::config(format!("config {} is not a JSON object", path.display())));
        }
        merge(&mut tree, patch);
    }
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    serde_json::from_value(tree).map_err(|e| Error::config(format!("config: {e}")))
}

/// What ghn-train optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    Fp32,
    Qat(BitConfig),
    /// Quantization error as additive uniform noise; the low-bit regime.
    QatNoise(BitConfig),
}

impl TrainMode {
    /// Canonical form for manifests and file names.
    pub fn label(&self) -> String {
        match self {
            TrainMode::Fp32 => "fp32".to_string(),
            TrainMode::Qat(b) => format!("qat:{}/{}", b.weight_bits, b.act_bits),
            TrainMode::QatNoise(b) => format!("qat-noise:{}/{}", b.weight_bits, b.act_bits),
        }
    }

}

/// "4/8", "W4A8", case-insensitive.
pub fn parse_bits(s: &str) -> Result<BitConfig> {
    if let Some((w, a)) = s.split_once('/') {
        return BitConfig::parse(&format!("W{}A{}", w.trim(), a.trim()));
    }
    BitConfig::parse(s)
}

/// "fp32", "qat:W/A", or "qat-noise:W/A".
pub fn parse_mode(s: &str) -> Result<TrainMode> {
    if s.eq_ignore_ascii_case("fp32") {
        return Ok(TrainMode::Fp32);
    }
    if let Some(rest) = s.strip_prefix("qat-noise:") {
        let bits = parse_bits(rest)?;
        if bits.weight_bits > 2 || bits.act_bits > 2 {
            return Err(Error::config(format!(
                "mode '{s}': the noise relaxation is for bitwidths of at most 2"
            )));
        }
        return Ok(TrainMode::QatNoise(bits));
    }
    if let Some(rest) = s.strip_prefix("qat:") {
        return Ok(TrainMode::Qat(parse_bits(rest)?));
    }
    Err(Error::config(format!("mode '{s}' is not fp32, qat:W/A, or qat-noise:W/A")))
}
