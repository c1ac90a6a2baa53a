//! Simulated fixed-point quantization.
//!
//! Models uniform affine quantization to unsigned N-bit integers with a
//! per-tensor scale and zero point, the way inference runtimes execute
//! integer kernels. Nothing here produces integer tensors for compute;
//! the point is the float-visible effect: `fake_quant` rounds a float
//! tensor onto its quantization grid so that training and evaluation see
//! exactly the precision loss a fixed-point deployment would suffer.
//!
//! The pieces:
//!
//! - [`QuantParams`]: scale/zero-point derivation from a float range.
//! - [`RangeObserver`]: min-max or percentile range estimation.
//! - [`fake_quant_var`]: fake quantization on the tape with a
//!   straight-through estimator for the rounding step.
//! - [`noise_quant_var`]: the additive-uniform-noise relaxation used for
//!   very low precision training.
//! - [`bn_fold`]: folding batch norm statistics into convolution weights,
//!   as done before deploying a quantized model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Half-open sanity bound for bit widths; the study uses 2, 4 and 8.
const MAX_BITS: u8 = 16;

/// Affine quantization parameters for one tensor.
///
/// A float value R maps to an unsigned level Q = round(clamp(R) / scale) +
/// zero_point, clamped to [0, 2^bits - 1], and back to scale * (Q -
/// zero_point). Rounding is half away from zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub min: f64,
    pub max: f64,
    pub scale: f64,
    pub zero_point: u32,
    pub bits: u8,
}

impl QuantParams {
    /// Derive parameters from an observed float range.
    ///
    /// Degenerate ranges are widened by 1e-8 on both sides first; then the
    /// range is extended to include zero so that zero is exactly
    /// representable (a requirement for padding and ReLU zeros to survive
    /// quantization unchanged).
    pub fn from_range(min: f64, max: f64, bits: u8) -> Result<Self> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(Error::config(format!("bit width {bits} outside 1..={MAX_BITS}")));
        }
        if !min.is_finite() || !max.is_finite() {
            return Err(Error::config(format!("non-finite quantization range [{min}, {max}]")));
        }
        if min > max {
            return Err(Error::config(format!("inverted quantization range [{min}, {max}]")));
        }
        let (mut min, mut max) = (min, max);
        if min == max {
            min -= 1e-8;
            max += 1e-8;
        }
        if min > 0.0 {
            min = 0.0;
        }
        if max < 0.0 {
            max = 0.0;
        }
        let levels = Self::level_count(bits);
        let scale = (max - min) / levels as f64;
        let zero_point = ((0.0 - min) / scale).round().clamp(0.0, levels as f64) as u32;
        Ok(QuantParams { min, max, scale, zero_point, bits })
    }

    /// Highest representable level, 2^bits - 1.
    pub fn level_count(bits: u8) -> u32 {
        (1u32 << bits) - 1
    }

    pub fn levels(&self) -> u32 {
        Self::level_count(self.bits)
    }

    /// Float -> integer level.
    pub fn quantize(&self, x: f64) -> u32 {
        let c = x.clamp(self.min, self.max);
        let q = (c / self.scale).round() + self.zero_point as f64;
        q.clamp(0.0, self.levels() as f64) as u32
    }

    /// Integer level -> float.
    pub fn dequantize(&self, q: u32) -> f64 {
        self.scale * (q as f64 - self.zero_point as f64)
    }

    /// Round-trip through the integer grid.
    pub fn fake(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }
}

/// Fake quantization of a whole tensor, with all arithmetic carried out in
/// the tensor's own precision so that repeated application is bit-stable.
pub fn fake_quant_tensor<T: Real>(x: &Tensor<T>, qp: &QuantParams) -> Tensor<T> {
    let lo = T::from_f64(qp.min);
    let hi = T::from_f64(qp.max);
    let s = T::from_f64(qp.scale);
    let z = T::from_f64(qp.zero_point as f64);
    let top = T::from_f64(qp.levels() as f64);
    x.map(|v| {
        let c = v.max(lo).min(hi);
        let q = ((c / s).round() + z).max(T::zero()).min(top);
        s * (q - z)
    })
}

/// Mask of the straight-through estimator: upstream gradient where the input
/// lies inside the clamp range (boundaries included), zero where it was
/// clipped.
fn ste_mask<T: Real>(x: &Tensor<T>, grad: &Tensor<T>, min: f64, max: f64) -> Tensor<T> {
    let lo = T::from_f64(min);
    let hi = T::from_f64(max);
    grad.zip_map(x, |g, v| if v >= lo && v <= hi { g } else { T::zero() })
        .expect("ste mask shape")
}

/// Fake quantization recorded on the tape. The rounding step has zero
/// derivative almost everywhere, so the backward rule is a straight-through
/// estimator: gradients pass unchanged inside the clamp range and are zeroed
/// outside it.
pub fn fake_quant_var<T: Real>(tape: &Tape<T>, x: Var, qp: &QuantParams) -> Var {
    let qp = *qp;
    tape.custom_grad(
        x,
        move |t| fake_quant_tensor(t, &qp),
        move |xv, g| ste_mask(xv, g, qp.min, qp.max),
    )
}

/// Additive-noise relaxation of quantization: clamp to the range and add
/// uniform noise of one quantization step's width, freshly drawn per element.
pub fn noise_quant_tensor<T: Real, R: Rng>(x: &Tensor<T>, qp: &QuantParams, rng: &mut R) -> Tensor<T> {
    let lo = T::from_f64(qp.min);
    let hi = T::from_f64(qp.max);
    let half = qp.scale / 2.0;
    x.map(|v| {
        let c = v.max(lo).min(hi);
        c + T::from_f64(rng.gen_range(-half..=half))
    })
}

/// Noise quantization on the tape. The noise is treated as a constant, so
/// the backward rule is the same clamp-region mask as the straight-through
/// estimator.
pub fn noise_quant_var<T: Real, R: Rng>(tape: &Tape<T>, x: Var, qp: &QuantParams, rng: &mut R) -> Var {
    let qp = *qp;
    tape.custom_grad(
        x,
        |t| noise_quant_tensor(t, &qp, rng),
        move |xv, g| ste_mask(xv, g, qp.min, qp.max),
    )
}

/// Weight and activation bit widths, e.g. W4A8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitConfig {
    pub weight_bits: u8,
    pub act_bits: u8,
}

impl BitConfig {
    pub fn new(weight_bits: u8, act_bits: u8) -> Self {
        BitConfig { weight_bits, act_bits }
    }

    pub fn label(&self) -> String {
        format!("W{}A{}", self.weight_bits, self.act_bits)
    }

    /// Parse labels like "W4A8" (case-insensitive).
    pub fn parse(s: &str) -> Result<Self> {
        let up = s.to_ascii_uppercase();
        let rest = up
            .strip_prefix('W')
            .ok_or_else(|| Error::config(format!("bit config '{s}' does not match WxAy")))?;
        let (w, a) = rest
            .split_once('A')
            .ok_or_else(|| Error::config(format!("bit config '{s}' does not match WxAy")))?;
        let weight_bits: u8 = w.parse().map_err(|_| Error::config(format!("bad weight bits in '{s}'")))?;
        let act_bits: u8 = a.parse().map_err(|_| Error::config(format!("bad activation bits in '{s}'")))?;
        if !(1..=MAX_BITS).contains(&weight_bits) || !(1..=MAX_BITS).contains(&act_bits) {
            return Err(Error::config(format!("bit config '{s}' outside 1..={MAX_BITS}")));
        }
        Ok(BitConfig { weight_bits, act_bits })
    }
}

impl std::fmt::Display for BitConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// Which tensors the noise relaxation replaces fake quantization on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseQuantConfig {
    pub weights: bool,
    pub activations: bool,
}

impl NoiseQuantConfig {
    pub const OFF: NoiseQuantConfig = NoiseQuantConfig { weights: false, activations: false };

    /// The low-precision recipe: relax both tensors at 2-bit widths, where
    /// hard rounding leaves too few usable levels for gradients to shape.
    pub fn for_bits(bits: BitConfig) -> Self {
        NoiseQuantConfig { weights: bits.weight_bits <= 2, activations: bits.act_bits <= 2 }
    }
}

/// How an observer turns seen values into a range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObserverMode {
    /// Running minimum and maximum over everything observed.
    MinMax,
    /// Clip to the pct-th and (100-pct)-th percentiles of observed values.
    Percentile { pct: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObserverConfig {
    pub mode: ObserverMode,
    /// Sample budget for percentile mode; above it, samples are decimated by
    /// doubling a keep-every-k stride, which keeps the estimate deterministic.
    pub max_samples: usize,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        ObserverConfig { mode: ObserverMode::MinMax, max_samples: 1 << 20 }
    }
}

/// Accumulates the value range of one tensor site across batches.
#[derive(Debug, Clone)]
pub struct RangeObserver {
    cfg: ObserverConfig,
    min: f64,
    max: f64,
    seen: usize,
    samples: Vec<f64>,
    stride: usize,
    phase: usize,
}

impl RangeObserver {
    pub fn new(cfg: ObserverConfig) -> Self {
        RangeObserver { cfg, min: f64::INFINITY, max: f64::NEG_INFINITY, seen: 0, samples: Vec::new(), stride: 1, phase: 0 }
    }

    pub fn observe<T: Real>(&mut self, t: &Tensor<T>) {
        self.seen += t.numel();
        match self.cfg.mode {
            ObserverMode::MinMax => {
                for &v in t.data() {
                    let v = v.to_f64();
                    self.min = self.min.min(v);
                    self.max = self.max.max(v);
                }
            }
            ObserverMode::Percentile { .. } => {
                for &v in t.data() {
                    if self.phase == 0 {
                        self.samples.push(v.to_f64());
                    }
                    self.phase = (self.phase + 1) % self.stride;
                }
                while self.samples.len() > self.cfg.max_samples {
                    self.stride *= 2;
                    let mut keep = 0;
                    for i in (0..self.samples.len()).step_by(2) {
                        self.samples[keep] = self.samples[i];
                        keep += 1;
                    }
                    self.samples.truncate(keep);
                }
            }
        }
    }

    pub fn count(&self) -> usize {
        self.seen
    }

    /// The observed range under the configured mode.
    pub fn range(&self) -> Result<(f64, f64)> {
        if self.seen == 0 {
            return Err(Error::data("range requested from an observer that saw no values"));
        }
        match self.cfg.mode {
            ObserverMode::MinMax => Ok((self.min, self.max)),
            ObserverMode::Percentile { pct } => {
                if !(0.0..50.0).contains(&pct) {
                    return Err(Error::config(format!("percentile {pct} outside [0, 50)")));
                }
                let mut sorted = self.samples.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample"));
                Ok((percentile_linear(&sorted, pct), percentile_linear(&sorted, 100.0 - pct)))
            }
        }
    }

    pub fn quant_params(&self, bits: u8) -> Result<QuantParams> {
        let (min, max) = self.range()?;
        QuantParams::from_range(min, max, bits)
    }
}

/// Exponentially averaged min-max range, the activation-range tracker used
/// during quantization-aware training. The first update seeds the range
/// outright; later ones blend with `decay` weight on the old value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaMinMax {
    pub min: f64,
    pub max: f64,
    pub decay: f64,
    pub initialized: bool,
}

impl EmaMinMax {
    pub fn new(decay: f64) -> Self {
        EmaMinMax { min: 0.0, max: 0.0, decay, initialized: false }
    }

    pub fn update(&mut self, lo: f64, hi: f64) {
        if self.initialized {
            self.min = self.decay * self.min + (1.0 - self.decay) * lo;
            self.max = self.decay * self.max + (1.0 - self.decay) * hi;
        } else {
            self.min = lo;
            self.max = hi;
            self.initialized = true;
        }
    }

    pub fn quant_params(&self, bits: u8) -> Result<QuantParams> {
        if !self.initialized {
            return Err(Error::data("quant params requested from a range that saw no values"));
        }
        QuantParams::from_range(self.min, self.max, bits)
    }
}

/// Percentile of pre-sorted data with linear interpolation between order
/// statistics: rank = pct/100 * (n-1).
fn percentile_linear(sorted: &[f64], pct: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi.min(sorted.len() - 1)] - sorted[lo])
}

/// Fold batch norm into the preceding convolution.
///
/// With per-channel statistics (mean, var) and affine parameters (gamma,
/// beta), the folded kernel is w * gamma / sqrt(var + eps) and the folded
/// bias is beta + gamma * (b - mean) / sqrt(var + eps).
pub fn bn_fold<T: Real>(
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = w.shape()[0];
    for (t, name) in [(gamma, "gamma"), (beta, "beta"), (mean, "mean"), (var, "var")] {
        if t.shape() != [c] {
            return Err(Error::shape(format!("bn_fold {name} shape {:?}, want [{c}]", t.shape())));
        }
    }
    if let Some(b) = b {
        if b.shape() != [c] {
            return Err(Error::shape(format!("bn_fold bias shape {:?}, want [{c}]", b.shape())));
        }
    }
    let mut scales = vec![T::zero(); c];
    let mut bias = vec![T::zero(); c];
    for o in 0..c {
        let s = gamma.data()[o] / (var.data()[o] + eps).sqrt();
        scales[o] = s;
        let b0 = b.map_or(T::zero(), |b| b.data()[o]);
        bias[o] = beta.data()[o] + s * (b0 - mean.data()[o]);
    }
    let w_fold = crate::tensor::ops::scale_axis0(w, &Tensor::new(&[c], scales)?)?;
    Ok((w_fold, Tensor::new(&[c], bias)?))
}

/// Running batch norm statistics with exponential moving averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub decay: f64,
}

impl BnStats {
    /// Fresh statistics: zero mean, unit variance.
    pub fn new(channels: usize, decay: f64) -> Self {
        BnStats { mean: vec![0.0; channels], var: vec![1.0; channels], decay }
    }

    /// new = decay * old + (1 - decay) * batch.
    pub fn update<T: Real>(&mut self, batch_mean: &Tensor<T>, batch_var: &Tensor<T>) {
        for (m, &bm) in self.mean.iter_mut().zip(batch_mean.data()) {
            *m = self.decay * *m + (1.0 - self.decay) * bm.to_f64();
        }
        for (v, &bv) in self.var.iter_mut().zip(batch_var.data()) {
            *v = self.decay * *v + (1.0 - self.decay) * bv.to_f64();
        }
    }

    /// Replace the averages with one batch's statistics outright.
    pub fn set<T: Real>(&mut self, batch_mean: &Tensor<T>, batch_var: &Tensor<T>) {
        self.mean = batch_mean.data().iter().map(|&v| v.to_f64()).collect();
        self.var = batch_var.data().iter().map(|&v| v.to_f64()).collect();
    }

    pub fn mean_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64_slice(&[self.mean.len()], &self.mean).expect("bn mean")
    }

    pub fn var_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64_slice(&[self.var.len()], &self.var).expect("bn var")
    }
}
