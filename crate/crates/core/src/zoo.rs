//! Executable CNNs and the fixed macroarchitectures of the initializer study.
//!
//! A [`Network`] is a DAG of primitive ops over a flat parameter store. One
//! executor drives every use in the crate:
//!
//! - [`Network::forward_eval`]: pure inference, optionally with simulated
//!   quantization (batch norm folded into preceding convolutions, weights and
//!   activation sites rounded onto their integer grids).
//! - [`Network::forward_tape`]: the same graph recorded on a [`Tape`] for
//!   training, either in float or in quantization-aware mode with per-step
//!   batch-norm folding.
//!
//! [`build_network`] constructs the four fixed block architectures used by
//! the initializer robustness study; the architecture sampler in
//! [`crate::graph`] assembles cell-based networks through the same
//! [`NetBuilder`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{init_tensor, Initializer};
use crate::quant::{
    bn_fold, fake_quant_tensor, fake_quant_var, noise_quant_var, BitConfig, BnStats, EmaMinMax, NoiseQuantConfig,
    QuantParams,
};
use crate::tensor::ops::{self, ConvSpec};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Batch norm epsilon used across the crate.
pub const BN_EPS: f64 = 1e-5;
/// Decay of batch norm running averages.
pub const BN_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    ConvWeight,
    DenseWeight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamMeta {
    pub kind: ParamKind,
    /// Node the parameter belongs to.
    pub node: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NetOp {
    Input,
    Conv { spec: ConvSpec, weight: usize, bias: Option<usize> },
    BatchNorm { gamma: usize, beta: usize, stats: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize, padding: usize },
    AvgPool { kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    Dense { weight: usize, bias: usize },
    /// Elementwise sum of all inputs (residual / skip joins).
    Add,
    /// Channel concatenation of all inputs.
    Concat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetNode {
    pub op: NetOp,
    pub inputs: Vec<usize>,
}

/// An executable network: nodes in topological order plus owned parameters.
#[derive(Debug, Clone)]
pub struct Network<T: Real> {
    pub nodes: Vec<NetNode>,
    pub params: Vec<Tensor<T>>,
    pub meta: Vec<ParamMeta>,
    pub bn_stats: Vec<BnStats>,
    pub num_classes: usize,
}

/// Incremental constructor that tracks per-node channel counts so parameter
/// shapes cannot drift out of sync with the graph.
pub struct NetBuilder<T: Real> {
    nodes: Vec<NetNode>,
    params: Vec<Tensor<T>>,
    meta: Vec<ParamMeta>,
    channels: Vec<usize>,
    bn_count: usize,
}

impl<T: Real> NetBuilder<T> {
    pub fn new(in_channels: usize) -> Self {
        NetBuilder {
            nodes: vec![NetNode { op: NetOp::Input, inputs: vec![] }],
            params: Vec::new(),
            meta: Vec::new(),
            channels: vec![in_channels],
            bn_count: 0,
        }
    }

    pub fn channels_of(&self, node: usize) -> usize {
        self.channels[node]
    }

    /// Number of parameter tensors created so far.
    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn push(&mut self, op: NetOp, inputs: Vec<usize>, channels: usize) -> usize {
        self.nodes.push(NetNode { op, inputs });
        self.channels.push(channels);
        self.nodes.len() - 1
    }

    fn add_param(&mut self, kind: ParamKind, node: usize, shape: &[usize]) -> usize {
        self.params.push(Tensor::zeros(shape));
        self.meta.push(ParamMeta { kind, node, shape: shape.to_vec() });
        self.params.len() - 1
    }

    /// Convolution with same-padding for odd kernels.
    pub fn conv(
        &mut self,
        from: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
    ) -> usize {
        let c_in = self.channels[from];
        assert!(c_in % groups == 0 && c_out % groups == 0, "conv groups {groups} with {c_in}->{c_out}");
        let padding = dilation * (kernel - 1) / 2;
        let spec = ConvSpec { stride, padding, dilation, groups };
        let node = self.push(NetOp::Conv { spec, weight: usize::MAX, bias: None }, vec![from], c_out);
        let weight = self.add_param(ParamKind::ConvWeight, node, &[c_out, c_in / groups, kernel, kernel]);
        let bias_id = bias.then(|| self.add_param(ParamKind::Bias, node, &[c_out]));
        self.nodes[node].op = NetOp::Conv { spec, weight, bias: bias_id };
        node
    }

    pub fn batch_norm(&mut self, from: usize) -> usize {
        let c = self.channels[from];
        let node = self.push(NetOp::BatchNorm { gamma: usize::MAX, beta: usize::MAX, stats: self.bn_count }, vec![from], c);
        let gamma = self.add_param(ParamKind::Gamma, node, &[c]);
        let beta = self.add_param(ParamKind::Beta, node, &[c]);
        let stats = self.bn_count;
        self.bn_count += 1;
        self.nodes[node].op = NetOp::BatchNorm { gamma, beta, stats };
        node
    }

    pub fn relu(&mut self, from: usize) -> usize {
        let c = self.channels[from];
        self.push(NetOp::Relu, vec![from], c)
    }

    pub fn max_pool(&mut self, from: usize, kernel: usize, stride: usize, padding: usize) -> usize {
        let c = self.channels[from];
        self.push(NetOp::MaxPool { kernel, stride, padding }, vec![from], c)
    }

    pub fn avg_pool(&mut self, from: usize, kernel: usize, stride: usize, padding: usize) -> usize {
        let c = self.channels[from];
        self.push(NetOp::AvgPool { kernel, stride, padding }, vec![from], c)
    }

    pub fn global_avg_pool(&mut self, from: usize) -> usize {
        let c = self.channels[from];
        self.push(NetOp::GlobalAvgPool, vec![from], c)
    }

    pub fn dense(&mut self, from: usize, units: usize) -> usize {
        let f_in = self.channels[from];
        let node = self.push(NetOp::Dense { weight: usize::MAX, bias: usize::MAX }, vec![from], units);
        let weight = self.add_param(ParamKind::DenseWeight, node, &[f_in, units]);
        let bias = self.add_param(ParamKind::Bias, node, &[units]);
        self.nodes[node].op = NetOp::Dense { weight, bias };
        node
    }

    pub fn add(&mut self, inputs: &[usize]) -> usize {
        let c = self.channels[inputs[0]];
        assert!(inputs.iter().all(|&i| self.channels[i] == c), "add with mismatched channels");
        self.push(NetOp::Add, inputs.to_vec(), c)
    }

    pub fn concat(&mut self, inputs: &[usize]) -> usize {
        let c = inputs.iter().map(|&i| self.channels[i]).sum();
        self.push(NetOp::Concat, inputs.to_vec(), c)
    }

    pub fn finish(self, num_classes: usize) -> Network<T> {
        let mut stats: Vec<BnStats> = vec![BnStats::new(0, BN_DECAY); self.bn_count];
        for (node, ch) in self.nodes.iter().zip(&self.channels) {
            if let NetOp::BatchNorm { stats: idx, .. } = node.op {
                stats[idx] = BnStats::new(*ch, BN_DECAY);
            }
        }
        Network { nodes: self.nodes, params: self.params, meta: self.meta, bn_stats: stats, num_classes }
    }
}

/// The fixed block families of the initializer study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockVariant {
    /// Plain conv / norm / relu blocks.
    RegularConv,
    /// Depthwise-separable convolution blocks.
    DwsConv,
    /// Two-conv residual blocks with projection shortcuts.
    BasicResidual,
    /// Inverted residual blocks with expansion factor 6.
    MbNetV2,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 4] =
        [BlockVariant::RegularConv, BlockVariant::DwsConv, BlockVariant::BasicResidual, BlockVariant::MbNetV2];

    pub fn name(&self) -> &'static str {
        match self {
            BlockVariant::RegularConv => "RegularConv",
            BlockVariant::DwsConv => "DWSConv",
            BlockVariant::BasicResidual => "BasicResidual",
            BlockVariant::MbNetV2 => "MbNetV2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown block variant '{s}'")))
    }
}

impl std::fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

fn conv_bn_relu<T: Real>(
    b: &mut NetBuilder<T>,
    from: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
) -> usize {
    let c = b.conv(from, c_out, kernel, stride, 1, groups, true);
    let n = b.batch_norm(c);
    b.relu(n)
}

fn block<T: Real>(b: &mut NetBuilder<T>, variant: BlockVariant, from: usize, c_out: usize, stride: usize) -> usize {
    let c_in = b.channels_of(from);
    match variant {
        BlockVariant::RegularConv => conv_bn_relu(b, from, c_out, 3, stride, 1),
        BlockVariant::DwsConv => {
            let dw = conv_bn_relu(b, from, c_in, 3, stride, c_in);
            conv_bn_relu(b, dw, c_out, 1, 1, 1)
        }
        BlockVariant::BasicResidual => {
            let main = conv_bn_relu(b, from, c_out, 3, stride, 1);
            let main = b.conv(main, c_out, 3, 1, 1, 1, true);
            let main = b.batch_norm(main);
            let skip = if stride != 1 || c_in != c_out {
                let s = b.conv(from, c_out, 1, stride, 1, 1, true);
                b.batch_norm(s)
            } else {
                from
            };
            let sum = b.add(&[main, skip]);
            b.relu(sum)
        }
        BlockVariant::MbNetV2 => {
            let expanded = 6 * c_in;
            let e = conv_bn_relu(b, from, expanded, 1, 1, 1);
            let d = conv_bn_relu(b, e, expanded, 3, stride, expanded);
            let p = b.conv(d, c_out, 1, 1, 1, 1, true);
            let p = b.batch_norm(p);
            if stride == 1 && c_in == c_out {
                b.add(&[p, from])
            } else {
                p
            }
        }
    }
}

/// Fixed macroarchitecture: a 3x3 stem to 16 channels, three stages of two
/// blocks at 16/32/64 channels with stride-2 stage transitions, global
/// average pooling and a dense classifier.
pub fn build_network<T: Real>(variant: BlockVariant, num_classes: usize) -> Network<T> {
    let mut b = NetBuilder::new(3);
    let mut x = conv_bn_relu(&mut b, 0, 16, 3, 1, 1);
    for stage in 0..3u32 {
        let c = 16 << stage;
        for blk in 0..2 {
            let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
            x = block(&mut b, variant, x, c, stride);
        }
    }
    let gap = b.global_avg_pool(x);
    b.dense(gap, num_classes);
    b.finish(num_classes)
}

/// Sites where activations are quantized in the simulated deployment: the
/// input, every ReLU, pooling output, residual sum, and dense output
/// (logits included). Returns node indices in execution order.
pub fn quant_sites<T: Real>(net: &Network<T>) -> Vec<usize> {
    net.nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| {
            matches!(
                n.op,
                NetOp::Input
                    | NetOp::Relu
                    | NetOp::MaxPool { .. }
                    | NetOp::AvgPool { .. }
                    | NetOp::GlobalAvgPool
                    | NetOp::Add
                    | NetOp::Dense { .. }
            )
        })
        .map(|(i, _)| i)
        .collect()
}

/// Batch norm statistics source for inference.
pub enum BnSource<'a> {
    /// Compute statistics from the batch being evaluated and report them.
    Batch,
    /// Use the supplied per-BN statistics.
    Given(&'a [BnStats]),
}

/// Simulated-quantization context for [`Network::forward_eval`].
pub struct QuantCtx<'a> {
    pub bits: BitConfig,
    /// Per-site activation parameters, indexed like [`quant_sites`].
    pub act_params: &'a [QuantParams],
}

impl<T: Real> Network<T> {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Apply the study's initialization policy: the stem convolution and all
    /// dense layers use the fan-scaled uniform default, other convolutions
    /// use `init`, biases start at zero, batch norm at identity.
    pub fn initialize<R: Rng>(&mut self, init: Initializer, rng: &mut R) -> Result<()> {
        let first_conv = self.meta.iter().position(|m| m.kind == ParamKind::ConvWeight);
        self.init_with(rng, |i, kind| match kind {
            ParamKind::ConvWeight => {
                if Some(i) == first_conv {
                    Initializer::GlorotUni
                } else {
                    init
                }
            }
            _ => Initializer::GlorotUni,
        })
    }

    /// Initialize every weight with the same rule; biases zero, batch norm at
    /// identity.
    pub fn initialize_all<R: Rng>(&mut self, init: Initializer, rng: &mut R) -> Result<()> {
        self.init_with(rng, |_, _| init)
    }

    fn init_with<R: Rng>(&mut self, rng: &mut R, rule: impl Fn(usize, ParamKind) -> Initializer) -> Result<()> {
        for i in 0..self.params.len() {
            let meta = &self.meta[i];
            self.params[i] = match meta.kind {
                ParamKind::ConvWeight | ParamKind::DenseWeight => {
                    init_tensor(&meta.shape, rule(i, meta.kind), rng)?
                }
                ParamKind::Bias | ParamKind::Beta => Tensor::zeros(&meta.shape),
                ParamKind::Gamma => Tensor::full(&meta.shape, T::one()),
            };
        }
        for s in &mut self.bn_stats {
            *s = BnStats::new(s.mean.len(), BN_DECAY);
        }
        Ok(())
    }

    /// Number of consumers of each node's output.
    fn consumer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                counts[i] += 1;
            }
        }
        counts
    }

    /// conv -> bn pairs where the batch norm is the convolution's only
    /// consumer, i.e. the pairs an inference runtime would fold.
    pub fn fold_pairs(&self) -> Vec<(usize, usize)> {
        let counts = self.consumer_counts();
        let mut pairs = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let NetOp::BatchNorm { .. } = n.op {
                let src = n.inputs[0];
                if counts[src] == 1 {
                    if let NetOp::Conv { .. } = self.nodes[src].op {
                        pairs.push((src, i));
                    }
                }
            }
        }
        pairs
    }

    /// Pure inference. In quantized mode, foldable conv+bn pairs execute as a
    /// single convolution with folded weights (fake-quantized per tensor) and
    /// activations are rounded at every site in `quant_sites` order.
    /// `observe` is called with (site index, float value) at each site before
    /// any rounding. Returns the logits and the per-BN statistics used.
    pub fn forward_eval(
        &self,
        x: &Tensor<T>,
        bn: BnSource<'_>,
        quant: Option<&QuantCtx<'_>>,
        mut observe: impl FnMut(usize, &Tensor<T>),
    ) -> Result<(Tensor<T>, Vec<BnStats>)> {
        let sites = quant_sites(self);
        let site_of = |node: usize| sites.iter().position(|&s| s == node);
        let fold: Vec<Option<usize>> = {
            // fold[bn_node] = conv_node when quantizing
            let mut f = vec![None; self.nodes.len()];
            if quant.is_some() {
                for (conv, bn) in self.fold_pairs() {
                    f[bn] = Some(conv);
                }
            }
            f
        };
        let folded_into: Vec<bool> = {
            let mut m = vec![false; self.nodes.len()];
            for bn in 0..self.nodes.len() {
                if let Some(conv) = fold[bn] {
                    m[conv] = true;
                }
            }
            m
        };
        let mut counts = self.consumer_counts();
        let eps = T::from_f64(BN_EPS);
        let mut stats_out: Vec<BnStats> = self.bn_stats.clone();
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];

        let take_input = |values: &mut Vec<Option<Tensor<T>>>, counts: &mut Vec<usize>, id: usize| {
            counts[id] -= 1;
            if counts[id] == 0 {
                values[id].take().expect("value already freed")
            } else {
                values[id].clone().expect("value already freed")
            }
        };

        for id in 0..self.nodes.len() {
            if folded_into[id] {
                // Skip: the paired batch norm executes the folded convolution.
                // Its float output is still needed for batch statistics, which
                // the Given source supplies from the float pass.
                continue;
            }
            let node = &self.nodes[id];
            let mut out = match &node.op {
                NetOp::Input => x.clone(),
                NetOp::Conv { spec, weight, bias } => {
                    let inp = take_input(&mut values, &mut counts, node.inputs[0]);
                    let (w, b) = self.eval_conv_params(*weight, *bias, None, quant)?;
                    ops::conv2d(&inp, &w, b.as_ref(), spec)?
                }
                NetOp::BatchNorm { gamma, beta, stats } => {
                    if let Some(conv_id) = fold[id] {
                        let NetOp::Conv { spec, weight, bias } = &self.nodes[conv_id].op else {
                            unreachable!("fold pair without conv")
                        };
                        let inp = take_input(&mut values, &mut counts, self.nodes[conv_id].inputs[0]);
                        let st = match &bn {
                            BnSource::Batch => {
                                return Err(Error::config(
                                    "quantized evaluation needs pre-computed batch norm statistics",
                                ))
                            }
                            BnSource::Given(s) => &s[*stats],
                        };
                        let (w, b) = self.eval_conv_params(*weight, *bias, Some((*gamma, *beta, st)), quant)?;
                        ops::conv2d(&inp, &w, b.as_ref(), spec)?
                    } else {
                        let inp = take_input(&mut values, &mut counts, node.inputs[0]);
                        let (mean, var) = match &bn {
                            BnSource::Batch => {
                                let (m, v) = ops::batch_stats(&inp)?;
                                stats_out[*stats].set(&m, &v);
                                (m, v)
                            }
                            BnSource::Given(s) => (s[*stats].mean_tensor(), s[*stats].var_tensor()),
                        };
                        ops::batch_norm_apply(&inp, &self.params[*gamma], &self.params[*beta], &mean, &var, eps)?
                    }
                }
                NetOp::Relu => ops::relu(&take_input(&mut values, &mut counts, node.inputs[0])),
                NetOp::MaxPool { kernel, stride, padding } => {
                    let inp = take_input(&mut values, &mut counts, node.inputs[0]);
                    ops::max_pool2d(&inp, *kernel, *stride, *padding)?.0
                }
                NetOp::AvgPool { kernel, stride, padding } => {
                    let inp = take_input(&mut values, &mut counts, node.inputs[0]);
                    ops::avg_pool2d(&inp, *kernel, *stride, *padding)?
                }
                NetOp::GlobalAvgPool => ops::global_avg_pool(&take_input(&mut values, &mut counts, node.inputs[0]))?,
                NetOp::Dense { weight, bias } => {
                    let inp = take_input(&mut values, &mut counts, node.inputs[0]);
                    let w = match quant {
                        Some(q) => quant_weight(&self.params[*weight], q.bits.weight_bits)?,
                        None => self.params[*weight].clone(),
                    };
                    ops::dense(&inp, &w, Some(&self.params[*bias]))?
                }
                NetOp::Add => {
                    let mut acc = take_input(&mut values, &mut counts, node.inputs[0]);
                    for &i in &node.inputs[1..] {
                        acc.add_assign(&take_input(&mut values, &mut counts, i));
                    }
                    acc
                }
                NetOp::Concat => {
                    let inps: Vec<Tensor<T>> =
                        node.inputs.iter().map(|&i| take_input(&mut values, &mut counts, i)).collect();
                    let refs: Vec<&Tensor<T>> = inps.iter().collect();
                    ops::concat_channels(&refs)?
                }
            };
            if let Some(site) = site_of(id) {
                observe(site, &out);
                if let Some(q) = quant {
                    let qp = q.act_params.get(site).ok_or_else(|| {
                        Error::config(format!("no activation parameters for site {site}"))
                    })?;
                    out = fake_quant_tensor(&out, qp);
                }
            }
            if !out.all_finite() {
                return Err(Error::data(format!("non-finite activation at node {id}")));
            }
            values[id] = Some(out);
        }
        let out = values
            .last_mut()
            .and_then(|v| v.take())
            .ok_or_else(|| Error::graph("network produced no output"))?;
        Ok((out, stats_out))
    }

    /// Weight (and bias) of a convolution for inference, optionally folded
    /// with batch norm statistics and optionally fake-quantized.
    fn eval_conv_params(
        &self,
        weight: usize,
        bias: Option<usize>,
        fold: Option<(usize, usize, &BnStats)>,
        quant: Option<&QuantCtx<'_>>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let (mut w, b) = match fold {
            Some((gamma, beta, st)) => {
                let (wf, bf) = bn_fold(
                    &self.params[weight],
                    bias.map(|b| &self.params[b]),
                    &self.params[gamma],
                    &self.params[beta],
                    &st.mean_tensor(),
                    &st.var_tensor(),
                    T::from_f64(BN_EPS),
                )?;
                (wf, Some(bf))
            }
            None => (self.params[weight].clone(), bias.map(|b| self.params[b].clone())),
        };
        // Biases ride along unrounded, as integer runtimes keep them in the
        // accumulator width.
        if let Some(q) = quant {
            w = quant_weight(&w, q.bits.weight_bits)?;
        }
        Ok((w, b))
    }
}

/// Fake-quantize a weight tensor on its own min-max range.
pub fn quant_weight<T: Real>(w: &Tensor<T>, bits: u8) -> Result<Tensor<T>> {
    let qp = QuantParams::from_range(w.min().to_f64(), w.max().to_f64(), bits)?;
    Ok(fake_quant_tensor(w, &qp))
}

/// Result of recording a forward pass on a tape.
pub struct TapedForward<T: Real> {
    /// One Var per parameter, aligned with `Network::params`.
    pub param_vars: Vec<Var>,
    /// Logits node.
    pub output: Var,
    /// (stats index, batch mean, batch var) per batch norm encountered.
    pub batch_stats: Vec<(usize, Tensor<T>, Tensor<T>)>,
}

/// Quantization-aware training context for [`Network::forward_tape`].
pub struct QatCtx<'a> {
    pub bits: BitConfig,
    pub noise: NoiseQuantConfig,
    /// Per-site running activation ranges, updated from this pass's float
    /// values before rounding is applied.
    pub act_ranges: &'a mut [EmaMinMax],
}

impl<T: Real> Network<T> {
    /// Record a training forward pass. In float mode batch norm runs on batch
    /// statistics as its own op. In QAT mode foldable conv+bn pairs run the
    /// per-step fold: a float convolution supplies batch statistics, the
    /// weights are folded with them, rounded, and applied in a second
    /// convolution, all differentiably; activation sites are rounded with
    /// straight-through gradients (or relaxed with uniform noise where
    /// configured).
    pub fn forward_tape<R: Rng>(
        &self,
        tape: &Tape<T>,
        x: &Tensor<T>,
        qat: Option<&mut QatCtx<'_>>,
        rng: &mut R,
    ) -> Result<TapedForward<T>> {
        let param_vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        self.forward_tape_with(tape, param_vars, x, qat, rng)
    }

    /// Like [`Network::forward_tape`] but over caller-supplied parameter
    /// Vars, e.g. hypernetwork predictions living on the same tape. Values
    /// behind the Vars must match the network's parameter shapes.
    pub fn forward_tape_with<R: Rng>(
        &self,
        tape: &Tape<T>,
        param_vars: Vec<Var>,
        x: &Tensor<T>,
        mut qat: Option<&mut QatCtx<'_>>,
        rng: &mut R,
    ) -> Result<TapedForward<T>> {
        if param_vars.len() != self.params.len() {
            return Err(Error::config(format!(
                "{} parameter vars for network with {}",
                param_vars.len(),
                self.params.len()
            )));
        }
        let sites = quant_sites(self);
        let site_of = |node: usize| sites.iter().position(|&s| s == node);
        let fold: Vec<Option<usize>> = {
            let mut f = vec![None; self.nodes.len()];
            if qat.is_some() {
                for (conv, bn) in self.fold_pairs() {
                    f[bn] = Some(conv);
                }
            }
            f
        };
        let folded_into: Vec<bool> = {
            let mut m = vec![false; self.nodes.len()];
            for bn in 0..self.nodes.len() {
                if let Some(conv) = fold[bn] {
                    m[conv] = true;
                }
            }
            m
        };
        let eps = T::from_f64(BN_EPS);
        let mut batch_stats = Vec::new();
        let mut vars: Vec<Option<Var>> = vec![None; self.nodes.len()];

        for id in 0..self.nodes.len() {
            if folded_into[id] {
                continue;
            }
            let node = &self.nodes[id];
            let inp = |i: usize| vars[node.inputs[i]].expect("input not computed");
            let mut out = match &node.op {
                NetOp::Input => tape.constant(x.clone()),
                NetOp::Conv { spec, weight, bias } => {
                    let w = match qat.as_deref() {
                        Some(q) => self.qat_weight(tape, param_vars[*weight], q, rng)?,
                        None => param_vars[*weight],
                    };
                    tape.conv2d(inp(0), w, bias.map(|b| param_vars[b]), *spec)?
                }
                NetOp::BatchNorm { gamma, beta, stats } => {
                    if let Some(conv_id) = fold[id] {
                        let NetOp::Conv { spec, weight, bias } = &self.nodes[conv_id].op else {
                            unreachable!("fold pair without conv")
                        };
                        let conv_in = vars[self.nodes[conv_id].inputs[0]].expect("input not computed");
                        let float_conv = tape.conv2d(conv_in, param_vars[*weight], bias.map(|b| param_vars[b]), *spec)?;
                        let mean = tape.channel_mean(float_conv)?;
                        let var = tape.channel_var(float_conv)?;
                        batch_stats.push((*stats, tape.value_clone(mean), tape.value_clone(var)));
                        let inv = tape.rsqrt_eps(var, eps);
                        let scale = tape.mul(param_vars[*gamma], inv)?;
                        let w_fold = tape.scale_axis0(param_vars[*weight], scale)?;
                        let shift = match bias {
                            Some(b) => tape.sub(param_vars[*b], mean)?,
                            None => tape.scale(mean, -T::one()),
                        };
                        let bias_fold = tape.add(param_vars[*beta], tape.mul(scale, shift)?)?;
                        let q = qat.as_deref().expect("fold only in qat mode");
                        let w_q = self.qat_weight(tape, w_fold, q, rng)?;
                        tape.conv2d(conv_in, w_q, Some(bias_fold), *spec)?
                    } else {
                        let (y, m, v) =
                            tape.batch_norm_train(inp(0), param_vars[*gamma], param_vars[*beta], eps)?;
                        batch_stats.push((*stats, m, v));
                        y
                    }
                }
                NetOp::Relu => tape.relu(inp(0)),
                NetOp::MaxPool { kernel, stride, padding } => tape.max_pool2d(inp(0), *kernel, *stride, *padding)?,
                NetOp::AvgPool { kernel, stride, padding } => tape.avg_pool2d(inp(0), *kernel, *stride, *padding)?,
                NetOp::GlobalAvgPool => tape.global_avg_pool(inp(0))?,
                NetOp::Dense { weight, bias } => {
                    let w = match qat.as_deref() {
                        Some(q) => self.qat_weight(tape, param_vars[*weight], q, rng)?,
                        None => param_vars[*weight],
                    };
                    tape.dense(inp(0), w, Some(param_vars[*bias]))?
                }
                NetOp::Add => {
                    let ids: Vec<Var> = node.inputs.iter().map(|&i| vars[i].expect("input not computed")).collect();
                    tape.add_n(&ids)?
                }
                NetOp::Concat => {
                    let ids: Vec<Var> = node.inputs.iter().map(|&i| vars[i].expect("input not computed")).collect();
                    tape.concat_channels(&ids)?
                }
            };
            if let Some(site) = site_of(id) {
                if let Some(q) = qat.as_deref_mut() {
                    let (lo, hi) = {
                        let v = tape.value(out);
                        (v.min().to_f64(), v.max().to_f64())
                    };
                    q.act_ranges[site].update(lo, hi);
                    let qp = q.act_ranges[site].quant_params(q.bits.act_bits)?;
                    out = if q.noise.activations {
                        noise_quant_var(tape, out, &qp, rng)
                    } else {
                        fake_quant_var(tape, out, &qp)
                    };
                }
            }
            vars[id] = Some(out);
        }
        let output = vars.last().and_then(|v| *v).ok_or_else(|| Error::graph("network produced no output"))?;
        Ok(TapedForward { param_vars, output, batch_stats })
    }

    /// Round a weight Var on the tape using its current value's range.
    fn qat_weight<R: Rng>(&self, tape: &Tape<T>, w: Var, q: &QatCtx<'_>, rng: &mut R) -> Result<Var> {
        let (lo, hi) = {
            let v = tape.value(w);
            (v.min().to_f64(), v.max().to_f64())
        };
        let qp = QuantParams::from_range(lo, hi, q.bits.weight_bits)?;
        Ok(if q.noise.weights { noise_quant_var(tape, w, &qp, rng) } else { fake_quant_var(tape, w, &qp) })
    }

    /// Fold one batch of statistics into the running averages.
    pub fn update_bn_stats(&mut self, batch: &[(usize, Tensor<T>, Tensor<T>)]) {
        for (idx, mean, var) in batch {
            self.bn_stats[*idx].update(mean, var);
        }
    }

    /// Replace the parameter set, e.g. with optimizer output or predictions.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::config(format!("{} params for network with {}", params.len(), self.params.len())));
        }
        for (p, m) in params.iter().zip(&self.meta) {
            if p.shape() != m.shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter for node {} has shape {:?}, want {:?}",
                    m.node,
                    p.shape(),
                    m.shape
                )));
            }
        }
        self.params = params;
        Ok(())
    }
}
