//! The random-initializer robustness study.
//!
//! Every macroarchitecture variant is crossed with every initializer:
//! train, calibrate on a training sample, then score the test split in
//! float and simulated-quantized form. Runs that trip the divergence
//! guard, or whose evaluation hits non-finite activations, keep their
//! flag and loss history but contribute no table row.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::quant::{BitConfig, ObserverConfig};
use crate::tensor::Real;
use crate::train::{
    calibrate_activations, evaluate, layerwise_report, train_cnn, EvalRow, LayerwiseRecord,
    TrainHistory, TrainSchedule,
};
use crate::zoo::{build_network, BlockVariant};

/// Full study grid and per-run protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub variants: Vec<BlockVariant>,
    pub inits: Vec<Initializer>,
    pub sched: TrainSchedule,
    /// Bit settings scored per run; the first also drives the layerwise
    /// report.
    pub bits: Vec<BitConfig>,
    /// Training samples drawn for activation calibration.
    pub calib_samples: usize,
    pub eval_batch: usize,
    pub observer: ObserverConfig,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            variants: BlockVariant::ALL.to_vec(),
            inits: Initializer::ALL.to_vec(),
            sched: TrainSchedule::cnn_default(),
            bits: vec![BitConfig::new(8, 8)],
            calib_samples: 1024,
            eval_batch: 256,
            observer: ObserverConfig::default(),
            seed: 0,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.inits.is_empty() {
            return Err(Error::config("study grid is empty"));
        }
        if self.bits.is_empty() {
            return Err(Error::config("study needs at least one bit setting"));
        }
        if self.calib_samples == 0 {
            return Err(Error::config("calibration sample count must be positive"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("evaluation batch size must be positive"));
        }
        self.sched.validate()
    }

    /// Stable per-cell seed so any grid cell can be reproduced alone.
    pub fn run_seed(&self, variant_i: usize, init_i: usize) -> u64 {
        let cell = (variant_i * self.inits.len() + init_i) as u64;
        self.seed.wrapping_add(cell.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

/// One grid cell's outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyRun {
    pub variant: BlockVariant,
    pub init: Initializer,
    pub seed: u64,
    pub history: TrainHistory,
    /// Evaluation failure after a clean training run, e.g. non-finite
    /// activations on the test split.
    pub failure: Option<String>,
    pub row: Option<EvalRow>,
    pub layerwise: Option<Vec<LayerwiseRecord>>,
}

impl StudyRun {
    pub fn name(&self) -> String {
        format!("{}/{}", self.variant.name(), self.init.name())
    }

    /// True when the run belongs in the accuracy tables.
    pub fn tabulated(&self) -> bool {
        self.history.diverged.is_none() && self.failure.is_none() && self.row.is_some()
    }
}

/// All grid cells in variant-major order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub runs: Vec<StudyRun>,
}

impl StudyReport {
    /// Rows for the accuracy tables; flagged runs are omitted the way the
    /// study omits runs lost to exploding or vanishing gradients.
    pub fn table_rows(&self) -> Vec<&StudyRun> {
        self.runs.iter().filter(|r| r.tabulated()).collect()
    }

    pub fn flagged(&self) -> Vec<&StudyRun> {
        self.runs.iter().filter(|r| !r.tabulated()).collect()
    }
}

/// Run the full grid sequentially. Tensor ops parallelize internally, so
/// the grid order stays deterministic while cores stay busy.
///
/// `progress` is called after each run with the finished record.
pub fn run_study<T: Real>(
    data: &Dataset<T>,
    cfg: &StudyConfig,
    mut progress: impl FnMut(&StudyRun),
) -> Result<StudyReport> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::data("study needs non-empty train and test splits"));
    }
    let mut runs = Vec::with_capacity(cfg.variants.len() * cfg.inits.len());
    for (vi, &variant) in cfg.variants.iter().enumerate() {
        for (ii, &init) in cfg.inits.iter().enumerate() {
            let run = run_cell(data, cfg, variant, init, cfg.run_seed(vi, ii))?;
            progress(&run);
            runs.push(run);
        }
    }
    Ok(StudyReport { runs })
}

fn run_cell<T: Real>(
    data: &Dataset<T>,
    cfg: &StudyConfig,
    variant: BlockVariant,
    init: Initializer,
    seed: u64,
) -> Result<StudyRun> {
    let mut sched = cfg.sched.clone();
    sched.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = build_network::<T>(variant, data.num_classes);
    net.initialize(init, &mut rng)?;
    let history = train_cnn(&mut net, data, &sched)?;
    let mut run = StudyRun {
        variant,
        init,
        seed,
        history,
        failure: None,
        row: None,
        layerwise: None,
    };
    if run.history.diverged.is_some() {
        return Ok(run);
    }

    let calib_n = cfg.calib_samples.min(data.train.len());
    let calib_idx = rand::seq::index::sample(&mut rng, data.train.len(), calib_n).into_vec();
    let (cx, _) = data.train.batch(&calib_idx)?;
    let scored = calibrate_activations(&net, &cx, Some(&net.bn_stats), &cfg.observer, cfg.eval_batch)
        .and_then(|(calib, stats)| {
            let eval_idx: Vec<usize> = (0..data.test.len()).collect();
            let row = evaluate(
                &net,
                &data.test,
                &eval_idx,
                &stats,
                &calib,
                &cfg.bits,
                cfg.eval_batch,
                &run.name(),
            )?;
            let layerwise = layerwise_report(&net, &calib, cfg.bits[0])?;
            Ok((row, layerwise))
        });
    match scored {
        Ok((row, layerwise)) => {
            run.row = Some(row);
            run.layerwise = Some(layerwise);
        }
        // A net can finish training finite yet overflow on unseen data;
        // that is a flagged outcome, not a study-stopping error.
        Err(Error::Data(msg)) => run.failure = Some(msg),
        Err(e) => return Err(e),
    }
    Ok(run)
}
