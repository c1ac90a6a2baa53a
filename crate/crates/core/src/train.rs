//! Training loops, calibration, and evaluation.
//!
//! Three regimes share the schedule and divergence machinery: plain CNN
//! training for the initializer study, float finetuning of the
//! hypernetwork on task loss, and quantization-aware hypernetwork
//! finetuning. Evaluation always pairs a float pass with simulated
//! quantization passes so the robustness metrics compare like with like.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageSet};
use crate::error::{Error, Result};
use crate::ghn::{predict_vars, targets_for, GhnModel, ParamTarget};
use crate::graph::{
    add_virtual_edges, build_instance, instantiate, ArchGraph, NetworkInstance, VirtualEdgeSet,
};
use crate::parallel;
use crate::quant::{
    bn_fold, BitConfig, BnStats, EmaMinMax, NoiseQuantConfig, ObserverConfig, QuantParams,
    RangeObserver,
};
use crate::tensor::optim::{Adam, Sgd};
use crate::tensor::tape::Tape;
use crate::tensor::{Real, Tensor};
use crate::zoo::{quant_sites, BnSource, NetOp, Network, QatCtx, QuantCtx, BN_EPS};

/// Decay of the running activation ranges kept during QAT.
pub const ACT_EMA_DECAY: f64 = 0.9;

/// Consecutive bad steps before a run is declared diverged.
const DIVERGENCE_PATIENCE: usize = 3;

/// Optimizer selection with hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimKind {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, weight_decay: f64 },
}

impl OptimKind {
    pub fn base_lr(&self) -> f64 {
        match *self {
            OptimKind::Sgd { lr, .. } | OptimKind::Adam { lr, .. } => lr,
        }
    }
}

/// One run's hyperparameters.
///
/// Milestones are fractions of the total step count, strictly increasing
/// within (0, 1); at each the learning rate multiplies by `lr_factor`.
/// The divergence guard flags a run once the loss spends
/// [`DIVERGENCE_PATIENCE`] consecutive steps non-finite or above
/// `divergence_factor` times the first step's loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimKind,
    pub milestones: Vec<f64>,
    pub lr_factor: f64,
    /// Graphs per hypernetwork step; plain CNN training ignores it.
    pub meta_batch: usize,
    pub divergence_factor: f64,
    pub seed: u64,
}

impl TrainSchedule {
    /// Desk-scale defaults for training one fixed CNN.
    pub fn cnn_default() -> Self {
        TrainSchedule {
            epochs: 30,
            batch_size: 128,
            optim: OptimKind::Sgd { lr: 0.01, momentum: 0.9 },
            milestones: vec![0.375, 0.6, 0.85],
            lr_factor: 0.1,
            meta_batch: 1,
            divergence_factor: 10.0,
            seed: 0,
        }
    }

    /// Desk-scale defaults for hypernetwork finetuning.
    pub fn ghn_default() -> Self {
        TrainSchedule {
            epochs: 50,
            batch_size: 32,
            optim: OptimKind::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, weight_decay: 1e-5 },
            milestones: vec![0.75],
            lr_factor: 0.1,
            meta_batch: 4,
            divergence_factor: 10.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("schedule needs at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.meta_batch == 0 {
            return Err(Error::config("meta batch must be positive"));
        }
        if !(self.optim.base_lr() > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.lr_factor > 0.0) {
            return Err(Error::config("lr factor must be positive"));
        }
        if self.divergence_factor <= 1.0 {
            return Err(Error::config("divergence factor must exceed 1"));
        }
        for (i, &m) in self.milestones.iter().enumerate() {
            if !(0.0 < m && m < 1.0) {
                return Err(Error::config(format!("milestone {m} outside (0, 1)")));
            }
            if i > 0 && m <= self.milestones[i - 1] {
                return Err(Error::config("milestones must be strictly increasing"));
            }
        }
        Ok(())
    }

    /// Learning rate at a global step of a run with `total_steps` steps.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&f| step >= milestone_step(f, total_steps))
            .count();
        self.optim.base_lr() * self.lr_factor.powi(passed as i32)
    }
}

fn milestone_step(frac: f64, total_steps: usize) -> usize {
    (frac * total_steps as f64).floor() as usize
}

/// Step and loss at which a run tripped the divergence guard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub step: usize,
    pub loss: f64,
}

/// Per-step record of a training run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// One task loss per optimizer step, including the steps that tripped
    /// the divergence guard.
    pub losses: Vec<f64>,
    /// (step, lr) at the start and after each milestone drop.
    pub lr_changes: Vec<(usize, f64)>,
    pub diverged: Option<DivergenceInfo>,
}

impl TrainHistory {
    /// Moving average of the loss curve; empty when the run is shorter
    /// than the window.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        if window == 0 || self.losses.len() < window {
            return Vec::new();
        }
        self.losses
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect()
    }
}

struct DivergenceGuard {
    factor: f64,
    initial: Option<f64>,
    streak: usize,
}

impl DivergenceGuard {
    fn new(factor: f64) -> Self {
        DivergenceGuard { factor, initial: None, streak: 0 }
    }

    /// Returns divergence info when the bad streak reaches the patience.
    fn observe(&mut self, step: usize, loss: f64) -> Option<DivergenceInfo> {
        let initial = *self.initial.get_or_insert(loss);
        // The floor keeps a near-zero first loss from flagging ordinary
        // fluctuations later in the run.
        let bad = !loss.is_finite()
            || (initial.is_finite() && loss > self.factor * initial.abs().max(1e-6));
        if bad {
            self.streak += 1;
            if self.streak >= DIVERGENCE_PATIENCE {
                return Some(DivergenceInfo { step, loss });
            }
        } else {
            self.streak = 0;
        }
        None
    }
}

enum Optim<T: Real> {
    Sgd(Sgd<T>),
    Adam(Adam<T>),
}

impl<T: Real> Optim<T> {
    fn build(kind: &OptimKind) -> Self {
        match *kind {
            OptimKind::Sgd { lr, momentum } => {
                Optim::Sgd(Sgd::new(T::from_f64(lr), T::from_f64(momentum)))
            }
            OptimKind::Adam { lr, beta1, beta2, weight_decay } => Optim::Adam(Adam::new(
                T::from_f64(lr),
                T::from_f64(beta1),
                T::from_f64(beta2),
                T::from_f64(weight_decay),
            )),
        }
    }

    fn set_lr(&mut self, lr: f64) {
        match self {
            Optim::Sgd(o) => o.set_lr(T::from_f64(lr)),
            Optim::Adam(o) => o.set_lr(T::from_f64(lr)),
        }
    }

    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        match self {
            Optim::Sgd(o) => o.step(params, grads),
            Optim::Adam(o) => o.step(params, grads),
        }
    }
}

/// Shared per-step bookkeeping: learning rate changes, loss recording,
/// and the divergence guard.
struct RunState<T: Real> {
    opt: Optim<T>,
    guard: DivergenceGuard,
    history: TrainHistory,
    step: usize,
    lr_last: f64,
}

impl<T: Real> RunState<T> {
    fn new(sched: &TrainSchedule) -> Self {
        RunState {
            opt: Optim::build(&sched.optim),
            guard: DivergenceGuard::new(sched.divergence_factor),
            history: TrainHistory::default(),
            step: 0,
            lr_last: f64::NAN,
        }
    }

    fn begin_step(&mut self, sched: &TrainSchedule, total_steps: usize) {
        let lr = sched.lr_at(self.step, total_steps);
        if lr != self.lr_last {
            self.opt.set_lr(lr);
            self.history.lr_changes.push((self.step, lr));
            self.lr_last = lr;
        }
    }

    /// Records the loss; true means the run just diverged and must stop.
    fn record(&mut self, loss: f64) -> bool {
        self.history.losses.push(loss);
        if let Some(info) = self.guard.observe(self.step, loss) {
            self.history.diverged = Some(info);
            return true;
        }
        false
    }

    fn apply(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        self.opt.step(params, grads)?;
        self.step += 1;
        Ok(())
    }
}

/// Gradients for every parameter Var, with zeros where the loss did not
/// reach a parameter.
fn grads_or_zeros<T: Real>(
    grads: &crate::tensor::tape::Gradients<T>,
    vars: &[crate::tensor::tape::Var],
    params: &[Tensor<T>],
) -> Vec<Tensor<T>> {
    vars.iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

/// Train a fixed network on the dataset's training split.
///
/// Divergence is not an error: the run stops early with the flag set so
/// a study can record the failure and move on.
pub fn train_cnn<T: Real>(
    net: &mut Network<T>,
    data: &Dataset<T>,
    sched: &TrainSchedule,
) -> Result<TrainHistory> {
    sched.validate()?;
    let n = data.train.len();
    if n == 0 {
        return Err(Error::data("training split is empty"));
    }
    let total_steps = sched.epochs * n.div_ceil(sched.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut state = RunState::<T>::new(sched);
    let mut indices: Vec<usize> = (0..n).collect();

    'epochs: for _ in 0..sched.epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(sched.batch_size) {
            state.begin_step(sched, total_steps);
            let (x, labels) = data.train.batch(chunk)?;
            let tape = Tape::new();
            let fwd = net.forward_tape(&tape, &x, None, &mut rng)?;
            let loss_var = tape.softmax_cross_entropy(fwd.output, &labels)?;
            let loss = tape.value_clone(loss_var).item().to_f64();
            if state.record(loss) {
                break 'epochs;
            }
            let grads = tape.backward(loss_var)?;
            let gvec = grads_or_zeros(&grads, &fwd.param_vars, &net.params);
            state.apply(&mut net.params, &gvec)?;
            net.update_bn_stats(&fwd.batch_stats);
        }
    }
    Ok(state.history)
}

/// Activation ranges at each quantization site, in [`quant_sites`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ranges: Vec<(f64, f64)>,
}

impl Calibration {
    /// Quantization parameters for every site at one activation width.
    pub fn act_params(&self, act_bits: u8) -> Result<Vec<QuantParams>> {
        self.ranges
            .iter()
            .map(|&(lo, hi)| QuantParams::from_range(lo, hi, act_bits))
            .collect()
    }
}

/// Run float forward passes over `images` and record the value range at
/// every quantization site.
///
/// `bn` picks the statistics source: trained running statistics for
/// study networks, or `None` to compute them from the data itself. In
/// the latter case the returned statistics come from the final batch, so
/// callers should pass a single batch.
pub fn calibrate_activations<T: Real>(
    net: &Network<T>,
    images: &Tensor<T>,
    bn: Option<&[BnStats]>,
    observer: &ObserverConfig,
    batch: usize,
) -> Result<(Calibration, Vec<BnStats>)> {
    if batch == 0 {
        return Err(Error::config("calibration batch size must be positive"));
    }
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::data("calibration needs at least one image"));
    }
    let sites = quant_sites(net);
    let mut observers: Vec<RangeObserver> =
        (0..sites.len()).map(|_| RangeObserver::new(observer.clone())).collect();
    let mut stats_out = bn.map(<[BnStats]>::to_vec).unwrap_or_default();
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let x = slice_rows(images, start, len)?;
        let src = match bn {
            Some(s) => BnSource::Given(s),
            None => BnSource::Batch,
        };
        let (_, st) = net.forward_eval(&x, src, None, |site, t| observers[site].observe(t))?;
        if bn.is_none() {
            stats_out = st;
        }
        start += len;
    }
    let ranges = observers.iter().map(RangeObserver::range).collect::<Result<Vec<_>>>()?;
    Ok((Calibration { ranges }, stats_out))
}

fn slice_rows<T: Real>(images: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("image tensor rank {}, want 4", shape.len())));
    }
    let row = shape[1] * shape[2] * shape[3];
    let data = images.data()[start * row..(start + len) * row].to_vec();
    let mut s = shape.to_vec();
    s[0] = len;
    Tensor::new(&s, data)
}

/// Fraction of rows whose label sits among the k largest logits. Ties
/// break toward the lower class index so results do not depend on sort
/// order.
pub fn top_k_accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(format!(
            "logits {:?} against {} labels",
            shape,
            labels.len()
        )));
    }
    let classes = shape[1];
    if k == 0 || k > classes {
        return Err(Error::config(format!("top-{k} of {classes} classes")));
    }
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::data(format!("label {label} outside {classes} classes")));
        }
        let row = &logits.data()[r * classes..(r + 1) * classes];
        let lv = row[label];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > lv || (v == lv && j < label))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Mean squared error and cross entropy between float and quantized
/// logits, averaged over rows.
///
/// Cross entropy compares the softmax distributions, so identical logits
/// give the float softmax's entropy rather than zero.
pub fn quant_metrics<T: Real>(
    float_logits: &Tensor<T>,
    quant_logits: &Tensor<T>,
) -> Result<(f64, f64)> {
    if float_logits.shape() != quant_logits.shape() || float_logits.shape().len() != 2 {
        return Err(Error::shape(format!(
            "logit shapes {:?} vs {:?}",
            float_logits.shape(),
            quant_logits.shape()
        )));
    }
    let (n, c) = (float_logits.shape()[0], float_logits.shape()[1]);
    let mut mse = 0.0;
    let mut ce = 0.0;
    for r in 0..n {
        let f: Vec<f64> =
            float_logits.data()[r * c..(r + 1) * c].iter().map(|&v| v.to_f64()).collect();
        let q: Vec<f64> =
            quant_logits.data()[r * c..(r + 1) * c].iter().map(|&v| v.to_f64()).collect();
        mse += f.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / c as f64;
        let lf = log_softmax(&f);
        let lq = log_softmax(&q);
        ce -= lf.iter().zip(&lq).map(|(a, b)| a.exp() * b).sum::<f64>();
    }
    let denom = n.max(1) as f64;
    Ok((mse / denom, ce / denom))
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    x.iter().map(|v| v - lse).collect()
}

/// Relative accuracy drop in percent; zero when the baseline is zero.
pub fn percent_decrease(fp32: f64, quant: f64) -> f64 {
    if fp32 == 0.0 {
        0.0
    } else {
        (fp32 - quant) / fp32 * 100.0
    }
}

/// Mean, standard error (n-1 denominator), and max. A singleton has no
/// spread, so its sem is zero.
pub fn mean_sem_max(xs: &[f64]) -> (f64, f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sem = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, sem, max)
}

/// Metrics of one simulated-quantization pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantRow {
    pub bits: BitConfig,
    pub top1: f64,
    pub top5: f64,
    pub qmse: f64,
    pub qce: f64,
    pub pct_decrease: f64,
}

/// Float baseline plus quantized metrics for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub fp32_top1: f64,
    pub fp32_top5: f64,
    pub quant: Vec<QuantRow>,
}

/// Evaluate a network on the given sample indices: one float pass plus
/// one simulated-quantization pass per bit setting.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Real>(
    net: &Network<T>,
    set: &ImageSet<T>,
    indices: &[usize],
    bn_stats: &[BnStats],
    calib: &Calibration,
    bits: &[BitConfig],
    batch: usize,
    name: &str,
) -> Result<EvalRow> {
    if indices.is_empty() {
        return Err(Error::data("evaluation needs at least one sample"));
    }
    if batch == 0 {
        return Err(Error::config("evaluation batch size must be positive"));
    }
    let sites = quant_sites(net);
    if calib.ranges.len() != sites.len() {
        return Err(Error::shape(format!(
            "calibration covers {} sites, network has {}",
            calib.ranges.len(),
            sites.len()
        )));
    }
    let k5 = 5.min(net.num_classes);
    let per_bits: Vec<Vec<QuantParams>> =
        bits.iter().map(|b| calib.act_params(b.act_bits)).collect::<Result<_>>()?;
    let mut f_top1 = 0.0;
    let mut f_top5 = 0.0;
    // Per bit setting: weighted sums of top1, top5, qmse, qce.
    let mut q_acc = vec![[0.0f64; 4]; bits.len()];
    for chunk in indices.chunks(batch) {
        let (x, labels) = set.batch(chunk)?;
        let w = chunk.len() as f64;
        let (flog, _) = net.forward_eval(&x, BnSource::Given(bn_stats), None, |_, _| {})?;
        f_top1 += w * top_k_accuracy(&flog, &labels, 1)?;
        f_top5 += w * top_k_accuracy(&flog, &labels, k5)?;
        for (bi, b) in bits.iter().enumerate() {
            let ctx = QuantCtx { bits: *b, act_params: &per_bits[bi] };
            let (qlog, _) =
                net.forward_eval(&x, BnSource::Given(bn_stats), Some(&ctx), |_, _| {})?;
            let (mse, ce) = quant_metrics(&flog, &qlog)?;
            q_acc[bi][0] += w * top_k_accuracy(&qlog, &labels, 1)?;
            q_acc[bi][1] += w * top_k_accuracy(&qlog, &labels, k5)?;
            q_acc[bi][2] += w * mse;
            q_acc[bi][3] += w * ce;
        }
    }
    let total = indices.len() as f64;
    let fp32_top1 = f_top1 / total;
    let quant = bits
        .iter()
        .zip(&q_acc)
        .map(|(b, acc)| {
            let top1 = acc[0] / total;
            QuantRow {
                bits: *b,
                top1,
                top5: acc[1] / total,
                qmse: acc[2] / total,
                qce: acc[3] / total,
                pct_decrease: percent_decrease(fp32_top1, top1),
            }
        })
        .collect();
    Ok(EvalRow { name: name.to_string(), fp32_top1, fp32_top5: f_top5 / total, quant })
}

/// Input activation summary for a layer whose consumed tensor is a
/// quantization site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActSummary {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

/// Inference-time weight range of one conv or dense layer (batch norm
/// folded where an inference runtime would fold it) with the implied
/// quantization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseRecord {
    pub layer: usize,
    pub node: usize,
    pub op: String,
    pub weight_min: f64,
    pub weight_max: f64,
    pub weight_step: f64,
    pub act: Option<ActSummary>,
}

/// Per-layer folded weight ranges, input activation ranges, and step
/// sizes at one bit setting.
pub fn layerwise_report<T: Real>(
    net: &Network<T>,
    calib: &Calibration,
    bits: BitConfig,
) -> Result<Vec<LayerwiseRecord>> {
    let sites = quant_sites(net);
    if calib.ranges.len() != sites.len() {
        return Err(Error::shape(format!(
            "calibration covers {} sites, network has {}",
            calib.ranges.len(),
            sites.len()
        )));
    }
    let site_of: HashMap<usize, usize> = sites.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let folds: HashMap<usize, usize> = net.fold_pairs().into_iter().collect();
    let mut out: Vec<LayerwiseRecord> = Vec::new();
    for (id, node) in net.nodes.iter().enumerate() {
        let (w, op) = match &node.op {
            NetOp::Conv { weight, bias, .. } => {
                let w = match folds.get(&id) {
                    Some(&bn) => folded_weight(net, *weight, *bias, bn)?,
                    None => net.params[*weight].clone(),
                };
                (w, "conv")
            }
            NetOp::Dense { weight, .. } => (net.params[*weight].clone(), "dense"),
            _ => continue,
        };
        let (weight_min, weight_max) = (w.min().to_f64(), w.max().to_f64());
        let wq = QuantParams::from_range(weight_min, weight_max, bits.weight_bits)?;
        let act = node
            .inputs
            .first()
            .and_then(|src| site_of.get(src))
            .map(|&si| {
                let (min, max) = calib.ranges[si];
                QuantParams::from_range(min, max, bits.act_bits)
                    .map(|q| ActSummary { min, max, step: q.scale })
            })
            .transpose()?;
        out.push(LayerwiseRecord {
            layer: out.len(),
            node: id,
            op: op.to_string(),
            weight_min,
            weight_max,
            weight_step: wq.scale,
            act,
        });
    }
    Ok(out)
}

fn folded_weight<T: Real>(
    net: &Network<T>,
    weight: usize,
    bias: Option<usize>,
    bn_node: usize,
) -> Result<Tensor<T>> {
    let NetOp::BatchNorm { gamma, beta, stats } = &net.nodes[bn_node].op else {
        return Err(Error::graph(format!("fold target {bn_node} is not a batch norm")));
    };
    let st = &net.bn_stats[*stats];
    let c = st.mean.len();
    let mean = Tensor::from_f64_slice(&[c], &st.mean)?;
    let var = Tensor::from_f64_slice(&[c], &st.var)?;
    let (w_fold, _) = bn_fold(
        &net.params[weight],
        bias.map(|b| &net.params[b]),
        &net.params[*gamma],
        &net.params[*beta],
        &mean,
        &var,
        T::from_f64(BN_EPS),
    )?;
    Ok(w_fold)
}

/// Finetune hypernetwork weights on float task loss over a graph set.
pub fn ghn_finetune_fp32<T: Real>(
    model: &mut GhnModel<T>,
    graphs: &[ArchGraph],
    data: &Dataset<T>,
    sched: &TrainSchedule,
) -> Result<TrainHistory> {
    ghn_train(model, graphs, data, sched, None)
}

/// Quantization-aware finetuning: every forward pass runs through the
/// fake quantizer at `bits`, with noise relaxation at the widths where
/// hard rounding starves gradients.
pub fn ghn_qat<T: Real>(
    model: &mut GhnModel<T>,
    graphs: &[ArchGraph],
    data: &Dataset<T>,
    sched: &TrainSchedule,
    bits: BitConfig,
) -> Result<TrainHistory> {
    ghn_train(model, graphs, data, sched, Some(bits))
}

struct GraphMember<T: Real> {
    inst: NetworkInstance<T>,
    targets: Vec<ParamTarget>,
    virt: VirtualEdgeSet,
    /// Running activation ranges, persistent across QAT steps.
    ranges: Vec<EmaMinMax>,
}

fn ghn_train<T: Real>(
    model: &mut GhnModel<T>,
    graphs: &[ArchGraph],
    data: &Dataset<T>,
    sched: &TrainSchedule,
    bits: Option<BitConfig>,
) -> Result<TrainHistory> {
    sched.validate()?;
    if graphs.is_empty() {
        return Err(Error::config("hypernetwork training needs at least one graph"));
    }
    let n_img = data.train.len();
    if n_img == 0 {
        return Err(Error::data("training split is empty"));
    }
    let mut members: Vec<GraphMember<T>> = graphs
        .iter()
        .map(|g| {
            let inst = build_instance::<T>(g)?;
            let targets = targets_for(&inst);
            let virt = add_virtual_edges(g, model.cfg.s_max);
            let ranges = vec![EmaMinMax::new(ACT_EMA_DECAY); quant_sites(&inst.net).len()];
            Ok(GraphMember { inst, targets, virt, ranges })
        })
        .collect::<Result<_>>()?;

    let total_steps = sched.epochs * graphs.len().div_ceil(sched.meta_batch);
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut state = RunState::<T>::new(sched);
    let mut order: Vec<usize> = (0..graphs.len()).collect();

    'epochs: for _ in 0..sched.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(sched.meta_batch) {
            state.begin_step(sched, total_steps);
            let img_idx: Vec<usize> =
                (0..sched.batch_size).map(|_| rng.gen_range(0..n_img)).collect();
            let (x, labels) = data.train.batch(&img_idx)?;
            let tape = Tape::new();
            let weights = model.leaf_vars(&tape);
            let mut losses = Vec::with_capacity(chunk.len());
            for &gi in chunk {
                let member = &mut members[gi];
                let vars = predict_vars(
                    &model.cfg,
                    &tape,
                    &weights,
                    &graphs[gi],
                    &member.virt,
                    &member.targets,
                )?;
                let fwd = match bits {
                    Some(b) => {
                        let mut qat = QatCtx {
                            bits: b,
                            noise: NoiseQuantConfig::for_bits(b),
                            act_ranges: &mut member.ranges,
                        };
                        member.inst.net.forward_tape_with(&tape, vars, &x, Some(&mut qat), &mut rng)?
                    }
                    None => member.inst.net.forward_tape_with(&tape, vars, &x, None, &mut rng)?,
                };
                losses.push(tape.softmax_cross_entropy(fwd.output, &labels)?);
            }
            // Fixed-order reduction keeps meta-batch gradients deterministic.
            let total = tape.scale(tape.add_n(&losses)?, T::from_f64(1.0 / chunk.len() as f64));
            let loss = tape.value_clone(total).item().to_f64();
            if state.record(loss) {
                break 'epochs;
            }
            let grads = tape.backward(total)?;
            let gvec = grads_or_zeros(&grads, &weights, &model.params);
            state.apply(&mut model.params, &gvec)?;
        }
    }
    Ok(state.history)
}

/// Protocol knobs for zero-shot evaluation of predicted parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GhnEvalConfig {
    pub bits: Vec<BitConfig>,
    /// Test samples per network for batch norm statistics and activation
    /// ranges.
    pub calib_samples: usize,
    /// Test samples scored per network; zero means the whole split.
    pub eval_samples: usize,
    pub batch: usize,
    pub seed: u64,
    pub observer: ObserverConfig,
}

impl Default for GhnEvalConfig {
    fn default() -> Self {
        GhnEvalConfig {
            bits: vec![
                BitConfig::new(8, 8),
                BitConfig::new(4, 8),
                BitConfig::new(4, 4),
                BitConfig::new(2, 2),
            ],
            calib_samples: 64,
            eval_samples: 0,
            batch: 64,
            seed: 0,
            observer: ObserverConfig::default(),
        }
    }
}

/// Rows for every network of one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitEval {
    pub split: String,
    pub rows: Vec<EvalRow>,
}

/// One table cell: top-1 summary over a split's networks at one bit
/// setting, `None` meaning the float baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateCell {
    pub split: String,
    pub bits: Option<BitConfig>,
    pub n: usize,
    pub mean: f64,
    pub sem: f64,
    pub max: f64,
}

/// Per-split rows plus table-ready aggregate cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub splits: Vec<SplitEval>,
    pub aggregates: Vec<AggregateCell>,
}

/// Float cell plus one cell per bit setting, recomputable from the rows.
pub fn aggregate_split(split: &str, rows: &[EvalRow], bits: &[BitConfig]) -> Vec<AggregateCell> {
    let mut cells = Vec::with_capacity(bits.len() + 1);
    let tops: Vec<f64> = rows.iter().map(|r| r.fp32_top1).collect();
    let (mean, sem, max) = mean_sem_max(&tops);
    cells.push(AggregateCell { split: split.to_string(), bits: None, n: tops.len(), mean, sem, max });
    for (bi, b) in bits.iter().enumerate() {
        let tops: Vec<f64> =
            rows.iter().filter_map(|r| r.quant.get(bi).map(|q| q.top1)).collect();
        let (mean, sem, max) = mean_sem_max(&tops);
        cells.push(AggregateCell {
            split: split.to_string(),
            bits: Some(*b),
            n: tops.len(),
            mean,
            sem,
            max,
        });
    }
    cells
}

/// Zero-shot evaluation of predicted parameters across architecture
/// splits.
///
/// Each network gets its batch norm statistics and activation ranges
/// from one calibration batch drawn from the test split, then scores a
/// shared evaluation subset at every bit setting. Networks are
/// independent, so the split maps in parallel.
pub fn evaluate_ghn<T: Real>(
    model: &GhnModel<T>,
    splits: &[(String, Vec<ArchGraph>)],
    data: &Dataset<T>,
    cfg: &GhnEvalConfig,
) -> Result<EvalReport> {
    let n_test = data.test.len();
    if cfg.calib_samples == 0 || cfg.calib_samples > n_test {
        return Err(Error::config(format!(
            "calibration wants {} of {} test samples",
            cfg.calib_samples, n_test
        )));
    }
    if cfg.batch == 0 {
        return Err(Error::config("evaluation batch size must be positive"));
    }
    let eval_n = if cfg.eval_samples == 0 { n_test } else { cfg.eval_samples.min(n_test) };
    let eval_idx: Vec<usize> = (0..eval_n).collect();
    let mut out_splits = Vec::with_capacity(splits.len());
    let mut aggregates = Vec::new();
    for (si, (split, graphs)) in splits.iter().enumerate() {
        let results = parallel::map_collect(graphs.len(), |gi| {
            eval_one_graph(model, &graphs[gi], data, cfg, &eval_idx, si, gi, split)
        });
        let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
        aggregates.extend(aggregate_split(split, &rows, &cfg.bits));
        out_splits.push(SplitEval { split: split.clone(), rows });
    }
    Ok(EvalReport { splits: out_splits, aggregates })
}

#[allow(clippy::too_many_arguments)]
fn eval_one_graph<T: Real>(
    model: &GhnModel<T>,
    g: &ArchGraph,
    data: &Dataset<T>,
    cfg: &GhnEvalConfig,
    eval_idx: &[usize],
    split_i: usize,
    graph_i: usize,
    split: &str,
) -> Result<EvalRow> {
    let pred = model.predict_all(g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((split_i as u64) << 32) | graph_i as u64);
    let inst = instantiate(g, Some(pred.params), &mut rng)?;
    let calib_idx =
        rand::seq::index::sample(&mut rng, data.test.len(), cfg.calib_samples).into_vec();
    let (cx, _) = data.test.batch(&calib_idx)?;
    let (calib, stats) =
        calibrate_activations(&inst.net, &cx, None, &cfg.observer, cfg.calib_samples)?;
    evaluate(
        &inst.net,
        &data.test,
        eval_idx,
        &stats,
        &calib,
        &cfg.bits,
        cfg.batch,
        &format!("{split}-{:04}", g.index),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticSpec};
    use crate::graph::{graph_rng, sample_graph, SamplerConfig, SplitTag};
    use crate::init::Initializer;
    use crate::quant::ObserverMode;
    use crate::zoo::NetBuilder;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny_net(classes: usize, bn: bool) -> Network<f64> {
        let mut b = NetBuilder::new(3);
        let c1 = b.conv(0, 8, 3, 2, 1, 1, !bn);
        let x = if bn {
            let n = b.batch_norm(c1);
            b.relu(n)
        } else {
            b.relu(c1)
        };
        let c2 = b.conv(x, 8, 3, 2, 1, 1, true);
        let r2 = b.relu(c2);
        let g = b.global_avg_pool(r2);
        b.dense(g, classes);
        b.finish(classes)
    }

    fn toy_data(noise: f64, train_per_class: usize, test_per_class: usize) -> Dataset<f64> {
        synthetic(&SyntheticSpec {
            classes: 3,
            train_per_class,
            test_per_class,
            noise,
            seed: 9,
        })
        .unwrap()
    }

    fn quick_sched(epochs: usize, batch_size: usize, lr: f64) -> TrainSchedule {
        TrainSchedule {
            epochs,
            batch_size,
            optim: OptimKind::Sgd { lr, momentum: 0.9 },
            milestones: vec![],
            lr_factor: 0.1,
            meta_batch: 1,
            divergence_factor: 10.0,
            seed: 7,
        }
    }

    fn tiny_graphs(count: usize, seed: u64) -> Vec<ArchGraph> {
        let scfg = SamplerConfig {
            min_cells: 2,
            max_cells: 2,
            min_channels: 8,
            max_channels: 16,
            num_classes: 3,
            ..SamplerConfig::for_split(SplitTag::Train, seed)
        };
        (0..count as u64)
            .map(|i| sample_graph(&scfg, i, &mut graph_rng(scfg.seed, i)).unwrap())
            .collect()
    }

    fn tiny_ghn(seed: u64) -> GhnModel<f64> {
        let cfg = crate::ghn::GhnConfig {
            embed_dim: 8,
            hidden_dim: 8,
            ..crate::ghn::GhnConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GhnModel::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn schedule_defaults_validate_and_reject_bad_fields() {
        assert!(TrainSchedule::cnn_default().validate().is_ok());
        assert!(TrainSchedule::ghn_default().validate().is_ok());
        let base = TrainSchedule::cnn_default();
        for broken in [
            TrainSchedule { epochs: 0, ..base.clone() },
            TrainSchedule { batch_size: 0, ..base.clone() },
            TrainSchedule { meta_batch: 0, ..base.clone() },
            TrainSchedule { lr_factor: 0.0, ..base.clone() },
            TrainSchedule { divergence_factor: 1.0, ..base.clone() },
            TrainSchedule { milestones: vec![0.5, 0.5], ..base.clone() },
            TrainSchedule { milestones: vec![0.0], ..base.clone() },
            TrainSchedule { milestones: vec![0.5, 0.2], ..base.clone() },
            TrainSchedule { milestones: vec![1.0], ..base.clone() },
        ] {
            assert!(broken.validate().is_err());
        }
    }

    #[test]
    fn lr_drops_at_milestone_fractions() {
        // 16 samples at batch 8 over 4 epochs is 8 steps; the halfway
        // milestone lands on step 4.
        let mut sched = quick_sched(4, 8, 0.01);
        sched.milestones = vec![0.5];
        assert_relative_eq!(sched.lr_at(3, 8), 0.01);
        assert_relative_eq!(sched.lr_at(4, 8), 0.001, max_relative = 1e-12);

        let data = toy_data(0.5, 6, 2);
        assert_eq!(data.train.len(), 18);
        let mut sched = quick_sched(4, 9, 0.01);
        sched.milestones = vec![0.5];
        let mut net = tiny_net(3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        net.initialize(Initializer::HeNorm, &mut rng).unwrap();
        let hist = train_cnn(&mut net, &data, &sched).unwrap();
        assert_eq!(hist.losses.len(), 8);
        assert_eq!(hist.lr_changes.len(), 2);
        assert_eq!(hist.lr_changes[0].0, 0);
        assert_relative_eq!(hist.lr_changes[0].1, 0.01);
        assert_eq!(hist.lr_changes[1].0, 4);
        assert_relative_eq!(hist.lr_changes[1].1, 0.001, max_relative = 1e-12);
    }

    #[test]
    fn training_learns_a_separable_toy_problem() {
        let data = toy_data(0.1, 40, 10);
        let mut net = tiny_net(3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        net.initialize(Initializer::HeNorm, &mut rng).unwrap();
        let sched = quick_sched(10, 30, 0.05);
        let hist = train_cnn(&mut net, &data, &sched).unwrap();
        assert!(hist.diverged.is_none());
        assert_eq!(hist.losses.len(), 40);

        let idx: Vec<usize> = (0..data.train.len()).collect();
        let (x, _) = data.train.batch(&idx).unwrap();
        let (calib, stats) =
            calibrate_activations(&net, &x, Some(&net.bn_stats), &ObserverConfig::default(), 30)
                .unwrap();
        let row =
            evaluate(&net, &data.train, &idx, &stats, &calib, &[], 30, "toy").unwrap();
        assert!(row.fp32_top1 > 0.95, "train accuracy {}", row.fp32_top1);
        assert!(row.fp32_top5 >= row.fp32_top1);
    }

    #[test]
    fn fixed_seed_reproduces_the_loss_curve() {
        let data = toy_data(0.5, 10, 2);
        let sched = quick_sched(3, 10, 0.02);
        let mut curves = Vec::new();
        for _ in 0..2 {
            let mut net = tiny_net(3, true);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            net.initialize(Initializer::HeNorm, &mut rng).unwrap();
            let hist = train_cnn(&mut net, &data, &sched).unwrap();
            curves.push(hist.losses);
        }
        assert_eq!(curves[0], curves[1]);
    }

    #[test]
    fn exploding_rate_trips_the_divergence_guard() {
        let data = toy_data(0.5, 10, 2);
        let mut net = tiny_net(3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        net.initialize(Initializer::HeNorm, &mut rng).unwrap();
        let sched = quick_sched(40, 10, 1e4);
        let hist = train_cnn(&mut net, &data, &sched).unwrap();
        let info = hist.diverged.expect("guard fires");
        assert_eq!(info.step + 1, hist.losses.len());
        assert!(hist.losses.len() < 120, "stopped early");
    }

    #[test]
    fn guard_needs_three_consecutive_bad_steps() {
        let mut guard = DivergenceGuard::new(10.0);
        assert!(guard.observe(0, 1.0).is_none());
        assert!(guard.observe(1, 50.0).is_none());
        assert!(guard.observe(2, 60.0).is_none());
        // A recovery resets the streak.
        assert!(guard.observe(3, 2.0).is_none());
        assert!(guard.observe(4, f64::NAN).is_none());
        assert!(guard.observe(5, 70.0).is_none());
        let info = guard.observe(6, f64::INFINITY).expect("third bad step");
        assert_eq!(info.step, 6);
    }

    #[test]
    fn calibration_matches_direct_observers_and_is_idempotent() {
        let data = toy_data(0.5, 12, 2);
        let mut net = tiny_net(3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        net.initialize(Initializer::HeNorm, &mut rng).unwrap();
        let idx: Vec<usize> = (0..36).collect();
        let (x, _) = data.train.batch(&idx).unwrap();

        let cfg = ObserverConfig::default();
        let (a, _) = calibrate_activations(&net, &x, Some(&net.bn_stats), &cfg, 12).unwrap();
        let (b, _) = calibrate_activations(&net, &x, Some(&net.bn_stats), &cfg, 12).unwrap();
        assert_eq!(a, b);

        // Chunked calibration must agree with one direct pass.
        let sites = quant_sites(&net);
        let mut observers: Vec<RangeObserver> =
            (0..sites.len()).map(|_| RangeObserver::new(cfg.clone())).collect();
        net.forward_eval(&x, BnSource::Given(&net.bn_stats), None, |site, t| {
            observers[site].observe(t)
        })
        .unwrap();
        for (got, obs) in a.ranges.iter().zip(&observers) {
            let want = obs.range().unwrap();
            assert_relative_eq!(got.0, want.0, max_relative = 1e-12);
            assert_relative_eq!(got.1, want.1, max_relative = 1e-12);
        }

        // Percentile clipping can only narrow the observed ranges.
        let pct = ObserverConfig { mode: ObserverMode::Percentile { pct: 5.0 }, ..cfg };
        let (c, _) = calibrate_activations(&net, &x, Some(&net.bn_stats), &pct, 36).unwrap();
        for (clip, full) in c.ranges.iter().zip(&a.ranges) {
            assert!(clip.0 >= full.0 && clip.1 <= full.1);
        }
        assert!(c.ranges[0].0 > a.ranges[0].0, "input tail clipped");
        assert!(c.ranges[0].1 < a.ranges[0].1);
    }

    #[test]
    fn quant_metric_identities_hold() {
        // Identical logits: zero mse, cross entropy equals the softmax
        // entropy, uniform rows give ln(classes).
        let f = Tensor::<f64>::from_f64_slice(&[2, 3], &[0.0, 0.0, 0.0, 5.0, 5.0, 5.0]).unwrap();
        let (mse, ce) = quant_metrics(&f, &f).unwrap();
        assert_eq!(mse, 0.0);
        assert_relative_eq!(ce, 3f64.ln(), max_relative = 1e-12);

        // A 0.1 shift on one of three logits: mse is 0.1^2 / 3.
        let q = Tensor::<f64>::from_f64_slice(&[1, 3], &[1.1, 2.0, 3.0]).unwrap();
        let f = Tensor::from_f64_slice(&[1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let (mse, ce) = quant_metrics(&f, &q).unwrap();
        assert_relative_eq!(mse, 0.01 / 3.0, max_relative = 1e-12);
        assert!(ce > 0.0);

        assert_eq!(percent_decrease(70.0, 70.0), 0.0);
        assert_eq!(percent_decrease(0.0, 0.0), 0.0);
        // 71.1 to 70.9 is a 0.281 percent drop at three decimals.
        assert_relative_eq!(percent_decrease(71.1, 70.9), 0.281, epsilon = 5e-4);
    }

    #[test]
    fn random_logits_score_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, c) = (2000, 10);
        let vals: Vec<f64> = (0..n * c).map(|_| StandardNormal.sample(&mut rng)).collect();
        let logits = Tensor::<f64>::from_f64_slice(&[n, c], &vals).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let top1 = top_k_accuracy(&logits, &labels, 1).unwrap();
        let top5 = top_k_accuracy(&logits, &labels, 5).unwrap();
        assert!((top1 - 0.1).abs() < 0.03, "top1 {top1}");
        assert!((top5 - 0.5).abs() < 0.05, "top5 {top5}");
        assert!(top5 >= top1);
    }

    #[test]
    fn evaluate_composes_float_and_quant_passes() {
        let data = toy_data(0.3, 20, 5);
        let mut net = tiny_net(3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        net.initialize(Initializer::HeNorm, &mut rng).unwrap();
        let sched = quick_sched(4, 20, 0.05);
        train_cnn(&mut net, &data, &sched).unwrap();

        let idx: Vec<usize> = (0..data.test.len()).collect();
        let (x, _) = data.train.batch(&(0..60).collect::<Vec<_>>()).unwrap();
        let (calib, stats) =
            calibrate_activations(&net, &x, Some(&net.bn_stats), &ObserverConfig::default(), 30)
                .unwrap();
        let bits = [BitConfig::new(8, 8), BitConfig::new(2, 2)];
        let row = evaluate(&net, &data.test, &idx, &stats, &calib, &bits, 8, "tiny").unwrap();
        assert_eq!(row.quant.len(), 2);
        for q in &row.quant {
            assert!(q.qmse >= 0.0);
            assert!(q.top5 >= q.top1);
            assert_relative_eq!(
                q.pct_decrease,
                percent_decrease(row.fp32_top1, q.top1),
                max_relative = 1e-12
            );
        }
        assert!(
            row.quant[0].qmse < row.quant[1].qmse,
            "8-bit logits closer to float than 2-bit: {} vs {}",
            row.quant[0].qmse,
            row.quant[1].qmse
        );
    }

    #[test]
    fn aggregate_cells_recompute_from_rows() {
        let bits = BitConfig::new(8, 8);
        let rows: Vec<EvalRow> = [(0.70, 0.60), (0.71, 0.62), (0.72, 0.61)]
            .iter()
            .map(|&(f, q)| EvalRow {
                name: "r".into(),
                fp32_top1: f,
                fp32_top5: 1.0,
                quant: vec![QuantRow {
                    bits,
                    top1: q,
                    top5: 1.0,
                    qmse: 0.0,
                    qce: 0.0,
                    pct_decrease: percent_decrease(f, q),
                }],
            })
            .collect();
        let cells = aggregate_split("ID", &rows, &[bits]);
        assert_eq!(cells.len(), 2);
        assert!(cells[0].bits.is_none());
        assert_eq!(cells[0].n, 3);
        assert_relative_eq!(cells[0].mean, 0.71, max_relative = 1e-12);
        // Sample std of {.70, .71, .72} is 0.01, so sem is 0.01/sqrt(3).
        assert_relative_eq!(cells[0].sem, 0.01 / 3f64.sqrt(), max_relative = 1e-9);
        assert_relative_eq!(cells[0].max, 0.72, max_relative = 1e-12);
        assert_eq!(cells[1].bits, Some(bits));
        assert_relative_eq!(cells[1].mean, 0.61, max_relative = 1e-12);

        let (mean, sem, max) = mean_sem_max(&[0.5]);
        assert_eq!((mean, sem, max), (0.5, 0.0, 0.5));
    }

    #[test]
    fn layerwise_records_fold_scale_and_sites() {
        let data = toy_data(0.5, 8, 2);
        let mut net = tiny_net(3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        net.initialize(Initializer::HeNorm, &mut rng).unwrap();
        let idx: Vec<usize> = (0..24).collect();
        let (x, _) = data.train.batch(&idx).unwrap();
        let (calib, _) =
            calibrate_activations(&net, &x, Some(&net.bn_stats), &ObserverConfig::default(), 24)
                .unwrap();
        let bits = BitConfig::new(8, 8);
        let records = layerwise_report(&net, &calib, bits).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(
            records.iter().map(|r| r.op.as_str()).collect::<Vec<_>>(),
            ["conv", "conv", "dense"]
        );
        assert_eq!(records.iter().map(|r| r.layer).collect::<Vec<_>>(), [0, 1, 2]);
        for r in &records {
            assert!(r.act.is_some(), "layer {} reads a quant site", r.layer);
            assert!(r.weight_step > 0.0);
        }

        // Fresh identity batch norm folds to a 1/sqrt(1 + eps) rescale.
        let w0 = &net.params[0];
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        assert_relative_eq!(records[0].weight_min, w0.min() * scale, max_relative = 1e-9);
        assert_relative_eq!(records[0].weight_max, w0.max() * scale, max_relative = 1e-9);

        // Doubling an unfolded layer's weights doubles its range and step.
        let before = records[1].clone();
        let w_idx = match &net.nodes[before.node].op {
            NetOp::Conv { weight, .. } => *weight,
            _ => unreachable!(),
        };
        for v in net.params[w_idx].data_mut() {
            *v *= 2.0;
        }
        let after = layerwise_report(&net, &calib, bits).unwrap()[1].clone();
        assert_relative_eq!(after.weight_min, 2.0 * before.weight_min, max_relative = 1e-12);
        assert_relative_eq!(after.weight_max, 2.0 * before.weight_max, max_relative = 1e-12);
        assert_relative_eq!(after.weight_step, 2.0 * before.weight_step, max_relative = 1e-9);

        // Without batch norm the report is the raw weight range, and the
        // 8-bit step spans the zero-including range over 255 levels.
        let mut plain = tiny_net(3, false);
        plain.initialize(Initializer::HeNorm, &mut rng).unwrap();
        let (calib2, _) = calibrate_activations(
            &plain,
            &x,
            Some(&plain.bn_stats),
            &ObserverConfig::default(),
            24,
        )
        .unwrap();
        let recs = layerwise_report(&plain, &calib2, bits).unwrap();
        let w = &plain.params[0];
        assert_eq!(recs[0].weight_min, w.min());
        assert_eq!(recs[0].weight_max, w.max());
        assert!(w.min() < 0.0 && w.max() > 0.0);
        assert_relative_eq!(
            recs[0].weight_step,
            (w.max() - w.min()) / 255.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn hypernetwork_finetuning_reduces_loss_deterministically() {
        let data = toy_data(0.1, 16, 4);
        let graphs = tiny_graphs(1, 21);
        let mut sched = TrainSchedule {
            epochs: 12,
            batch_size: 16,
            optim: OptimKind::Adam { lr: 1e-2, beta1: 0.9, beta2: 0.999, weight_decay: 0.0 },
            milestones: vec![],
            lr_factor: 0.1,
            meta_batch: 1,
            divergence_factor: 10.0,
            seed: 13,
        };
        let mut model = tiny_ghn(31);
        let hist = ghn_finetune_fp32(&mut model, &graphs, &data, &sched).unwrap();
        assert!(hist.diverged.is_none());
        assert_eq!(hist.losses.len(), 12);
        assert!(hist.losses.iter().all(|l| l.is_finite()));
        let sm = hist.smoothed(3);
        assert!(
            sm.last().unwrap() < sm.first().unwrap(),
            "smoothed loss fell: {:?}",
            sm
        );

        // Same seed, same curve.
        let mut model2 = tiny_ghn(31);
        let hist2 = ghn_finetune_fp32(&mut model2, &graphs, &data, &sched).unwrap();
        assert_eq!(hist.losses, hist2.losses);

        // With one graph, any meta batch degenerates to the same run.
        sched.meta_batch = 4;
        let mut model3 = tiny_ghn(31);
        let hist3 = ghn_finetune_fp32(&mut model3, &graphs, &data, &sched).unwrap();
        assert_eq!(hist.losses, hist3.losses);
        for (a, b) in model2.params.iter().zip(&model3.params) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn qat_finetuning_runs_at_hard_and_noisy_widths() {
        let data = toy_data(0.3, 8, 2);
        let graphs = tiny_graphs(2, 22);
        let sched = TrainSchedule {
            epochs: 2,
            batch_size: 8,
            optim: OptimKind::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, weight_decay: 1e-5 },
            milestones: vec![],
            lr_factor: 0.1,
            meta_batch: 2,
            divergence_factor: 10.0,
            seed: 17,
        };
        let mut float_model = tiny_ghn(41);
        let float_hist = ghn_finetune_fp32(&mut float_model, &graphs, &data, &sched).unwrap();

        for bits in [BitConfig::new(8, 8), BitConfig::new(2, 2)] {
            let mut model = tiny_ghn(41);
            let hist = ghn_qat(&mut model, &graphs, &data, &sched, bits).unwrap();
            assert!(hist.diverged.is_none());
            assert!(hist.losses.iter().all(|l| l.is_finite()));
            assert_ne!(hist.losses, float_hist.losses, "{} changes the loss", bits.label());

            let mut model2 = tiny_ghn(41);
            let hist2 = ghn_qat(&mut model2, &graphs, &data, &sched, bits).unwrap();
            assert_eq!(hist.losses, hist2.losses);
        }
    }

    #[test]
    fn ghn_report_covers_splits_bits_and_aggregates() {
        let data = toy_data(0.3, 4, 10);
        let model = tiny_ghn(51);
        let splits = vec![
            ("ID".to_string(), tiny_graphs(3, 23)),
            ("Wide".to_string(), tiny_graphs(2, 24)),
        ];
        let cfg = GhnEvalConfig {
            bits: vec![BitConfig::new(8, 8), BitConfig::new(4, 4)],
            calib_samples: 16,
            eval_samples: 20,
            batch: 10,
            seed: 3,
            observer: ObserverConfig::default(),
        };
        let report = evaluate_ghn(&model, &splits, &data, &cfg).unwrap();
        assert_eq!(report.splits.len(), 2);
        assert_eq!(report.splits[0].rows.len(), 3);
        assert_eq!(report.splits[1].rows.len(), 2);
        for split in &report.splits {
            for row in &split.rows {
                assert_eq!(row.quant.len(), 2);
                assert!(row.fp32_top5 >= row.fp32_top1);
            }
        }
        assert_eq!(report.aggregates.len(), 6);
        let id_float = &report.aggregates[0];
        assert_eq!(id_float.split, "ID");
        assert!(id_float.bits.is_none());
        assert_eq!(id_float.n, 3);
        let tops: Vec<f64> = report.splits[0].rows.iter().map(|r| r.fp32_top1).collect();
        let (mean, sem, max) = mean_sem_max(&tops);
        assert_relative_eq!(id_float.mean, mean);
        assert_relative_eq!(id_float.sem, sem);
        assert_relative_eq!(id_float.max, max);

        // Same protocol, same report.
        let again = evaluate_ghn(&model, &splits, &data, &cfg).unwrap();
        for (a, b) in report.splits.iter().zip(&again.splits) {
            assert_eq!(a.rows, b.rows);
        }
    }

    #[test]
    fn smoothing_and_empty_input_edges() {
        let hist = TrainHistory { losses: vec![3.0, 1.0, 2.0], ..Default::default() };
        assert_eq!(hist.smoothed(2), vec![2.0, 1.5]);
        assert!(hist.smoothed(4).is_empty());
        assert!(hist.smoothed(0).is_empty());
        let (m, s, x) = mean_sem_max(&[]);
        assert!(m.is_nan() && s.is_nan() && x.is_nan());
    }
}
