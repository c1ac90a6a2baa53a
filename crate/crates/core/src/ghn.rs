//! Toy graph hypernetwork: predicts every trainable parameter of a sampled
//! architecture from its graph alone.
//!
//! The pipeline is embed, refine, decode. Each node gets an embedding from an
//! op-kind table plus a projection of its scalar attributes; gated message
//! passing (GRU-form updates, one forward and one backward topological sweep
//! per round) refines the embeddings over real and virtual edges; a two-layer
//! decoder maps each parameterized node's state to one weight tile and a
//! per-channel vector head. Weight tensors are cut from the tile by center
//! cropping the kernel axes and tiling modulo the channel axes, then
//! rescaled so their RMS matches the fan-in rule. Biases, gammas, and betas
//! come from the vector head.
//!
//! Everything runs on the shared tape, so a task loss computed through a
//! predicted network differentiates back into the hypernetwork weights.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{add_virtual_edges, build_instance, ArchGraph, NetworkInstance, OpKind, VirtualEdgeSet};
use crate::init::{fan_of, init_tensor, Initializer};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::zoo::ParamKind;

/// Checkpoint schema version.
pub const GHN_SCHEMA: u32 = 1;

/// Scalar attribute count fed to the embedding projection.
const FEATURE_DIM: usize = 4;
/// Kernel sizes are scaled by the largest vocabulary kernel.
const KERNEL_SCALE: f64 = 7.0;
/// Channel counts enter logarithmically, scaled by the largest sampled width.
const CHANNEL_SCALE: f64 = 512.0;
/// Guards the RMS denominator; far below any meaningful mean square.
const RMS_EPS: f64 = 1e-12;

/// How decoded weight tensors are rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Rescale each weight tensor so its RMS equals sqrt(2 / fan_in).
    FanInRms,
    Off,
}

/// Hypernetwork hyperparameters. The decoder tile must be able to cover the
/// largest kernel the sampler emits, and crops stay aligned only when tile
/// and target kernels share parity, so the tile kernel is odd.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GhnConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Message-passing rounds; each runs a forward then a backward sweep.
    pub rounds: usize,
    /// Maximum shortest-path distance for virtual edges.
    pub s_max: usize,
    pub tile_out: usize,
    pub tile_in: usize,
    pub tile_kernel: usize,
    pub normalization: NormMode,
}

impl Default for GhnConfig {
    fn default() -> Self {
        GhnConfig {
            embed_dim: 64,
            hidden_dim: 128,
            rounds: 1,
            s_max: 10,
            tile_out: 16,
            tile_in: 16,
            tile_kernel: 7,
            normalization: NormMode::FanInRms,
        }
    }
}

impl GhnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config("embedding and hidden dims must be positive"));
        }
        if self.rounds == 0 {
            return Err(Error::config("message passing needs at least one round"));
        }
        if self.tile_out == 0 || self.tile_in == 0 {
            return Err(Error::config("tile channel dims must be positive"));
        }
        if self.tile_kernel % 2 == 0 {
            return Err(Error::config(format!("tile kernel {} must be odd", self.tile_kernel)));
        }
        Ok(())
    }

    /// Flat length of one decoded tile.
    pub fn tile_len(&self) -> usize {
        self.tile_out * self.tile_in * self.tile_kernel * self.tile_kernel
    }
}

// Indices into the model's parameter list. The layout below is the single
// source of truth for names and shapes; these constants must match its order.
const T_EMBED: usize = 0;
const T_FEAT_W: usize = 1;
const T_FEAT_B: usize = 2;
const T_MSG_FWD_W: usize = 3;
const T_MSG_FWD_B: usize = 4;
const T_MSG_BWD_W: usize = 5;
const T_MSG_BWD_B: usize = 6;
const T_GRU_WZ: usize = 7;
const T_GRU_UZ: usize = 8;
const T_GRU_BZ: usize = 9;
const T_GRU_WR: usize = 10;
const T_GRU_UR: usize = 11;
const T_GRU_BR: usize = 12;
const T_GRU_WH: usize = 13;
const T_GRU_UH: usize = 14;
const T_GRU_BH: usize = 15;
const T_DEC_HIDDEN_W: usize = 16;
const T_DEC_HIDDEN_B: usize = 17;
const T_DEC_TILE_W: usize = 18;
const T_DEC_TILE_B: usize = 19;
const T_DEC_VEC_W: usize = 20;
const T_DEC_VEC_B: usize = 21;
const NUM_TENSORS: usize = 22;

/// Named shapes of every trainable tensor under `cfg`.
fn tensor_layout(cfg: &GhnConfig) -> Vec<(&'static str, Vec<usize>)> {
    let d = cfg.embed_dim;
    let h = cfg.hidden_dim;
    let tile = cfg.tile_len();
    // One slot per output channel for each of bias, gamma, beta.
    let vec_len = 3 * cfg.tile_out;
    vec![
        ("embed_table", vec![OpKind::COUNT, d]),
        ("feat_w", vec![FEATURE_DIM, d]),
        ("feat_b", vec![d]),
        ("msg_fwd_w", vec![d, d]),
        ("msg_fwd_b", vec![d]),
        ("msg_bwd_w", vec![d, d]),
        ("msg_bwd_b", vec![d]),
        ("gru_wz", vec![d, d]),
        ("gru_uz", vec![d, d]),
        ("gru_bz", vec![d]),
        ("gru_wr", vec![d, d]),
        ("gru_ur", vec![d, d]),
        ("gru_br", vec![d]),
        ("gru_wh", vec![d, d]),
        ("gru_uh", vec![d, d]),
        ("gru_bh", vec![d]),
        ("dec_hidden_w", vec![d, h]),
        ("dec_hidden_b", vec![h]),
        ("dec_tile_w", vec![h, tile]),
        ("dec_tile_b", vec![tile]),
        ("dec_vec_w", vec![h, vec_len]),
        ("dec_vec_b", vec![vec_len]),
    ]
}

/// The hypernetwork: a config plus its trainable tensors in layout order.
#[derive(Debug, Clone)]
pub struct GhnModel<T: Real> {
    pub cfg: GhnConfig,
    pub params: Vec<Tensor<T>>,
}

impl<T: Real> GhnModel<T> {
    /// Fresh model: matrices are Glorot-uniform, vectors zero.
    pub fn new<R: Rng>(cfg: GhnConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = Vec::with_capacity(NUM_TENSORS);
        for (_, shape) in tensor_layout(&cfg) {
            let t = if shape.len() >= 2 {
                init_tensor(&shape, Initializer::GlorotUni, rng)?
            } else {
                Tensor::zeros(&shape)
            };
            params.push(t);
        }
        Ok(GhnModel { cfg, params })
    }

    /// Total trainable element count.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|t| t.numel()).sum()
    }

    /// Register every tensor as a trainable leaf.
    pub fn leaf_vars(&self, tape: &Tape<T>) -> Vec<Var> {
        self.params.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Register every tensor as a constant (prediction only, no gradients).
    pub fn constant_vars(&self, tape: &Tape<T>) -> Vec<Var> {
        self.params.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Initial node embeddings, one row per graph node.
    pub fn embed_graph(&self, g: &ArchGraph) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let weights = self.constant_vars(&tape);
        let e = embed_vars(&tape, &weights, g)?;
        Ok(tape.value_clone(e))
    }

    /// Embeddings refined by `cfg.rounds` rounds of message passing over the
    /// given virtual edge set. Rows align with graph nodes.
    pub fn message_pass(&self, g: &ArchGraph, virt: &VirtualEdgeSet) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let weights = self.constant_vars(&tape);
        let states = refined_states(&self.cfg, &tape, &weights, g, virt)?;
        let d = self.cfg.embed_dim;
        let mut out = Tensor::zeros(&[states.len(), d]);
        for (i, &s) in states.iter().enumerate() {
            let row = tape.value_clone(s);
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(row.data());
        }
        Ok(out)
    }

    /// Decode one parameter tensor from a node state of shape `[1, embed_dim]`.
    pub fn decode_param(&self, state: &Tensor<T>, kind: ParamKind, shape: &[usize]) -> Result<Tensor<T>> {
        if state.shape() != [1, self.cfg.embed_dim] {
            return Err(Error::shape(format!(
                "node state must be [1, {}], got {:?}",
                self.cfg.embed_dim,
                state.shape()
            )));
        }
        let tape = Tape::new();
        let weights = self.constant_vars(&tape);
        let dec = Decoder::new(&self.cfg, &tape, &weights, 1);
        let v = dec.decode(0, tape.constant(state.clone()), kind, shape)?;
        Ok(tape.value_clone(v))
    }

    /// Predict every parameter tensor of `g` in one forward pass.
    pub fn predict_all(&self, g: &ArchGraph) -> Result<PredictedParams<T>> {
        let virt = add_virtual_edges(g, self.cfg.s_max);
        let inst = build_instance::<T>(g)?;
        let targets = targets_for(&inst);
        let tape = Tape::new();
        let weights = self.constant_vars(&tape);
        let vars = predict_vars(&self.cfg, &tape, &weights, g, &virt, &targets)?;
        let params = vars.iter().map(|&v| tape.value_clone(v)).collect();
        Ok(PredictedParams { params, param_nodes: inst.param_nodes })
    }

    /// Write a versioned JSON checkpoint (config header plus named tensors).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = tensor_layout(&self.cfg)
            .into_iter()
            .zip(&self.params)
            .map(|((name, _), t)| TensorDump {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.to_f64_vec(),
            })
            .collect();
        let ck = Checkpoint { schema: GHN_SCHEMA, config: self.cfg.clone(), tensors };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, &ck)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    /// Load a checkpoint, verifying schema, names, and shapes.
    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        if ck.schema != GHN_SCHEMA {
            return Err(Error::config(format!("checkpoint schema {} (expected {GHN_SCHEMA})", ck.schema)));
        }
        ck.config.validate()?;
        let layout = tensor_layout(&ck.config);
        if ck.tensors.len() != layout.len() {
            return Err(Error::config(format!(
                "checkpoint has {} tensors, layout expects {}",
                ck.tensors.len(),
                layout.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.len());
        for (dump, (name, shape)) in ck.tensors.iter().zip(layout) {
            if dump.name != name {
                return Err(Error::config(format!("checkpoint tensor '{}' where '{name}' expected", dump.name)));
            }
            if dump.shape != shape {
                return Err(Error::shape(format!("tensor '{name}' has shape {:?}, expected {shape:?}", dump.shape)));
            }
            params.push(Tensor::from_f64_slice(&shape, &dump.data)?);
        }
        Ok(GhnModel { cfg: ck.config, params })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorDump {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema: u32,
    config: GhnConfig,
    tensors: Vec<TensorDump>,
}

/// One parameter tensor to decode: the graph node that owns it, its role,
/// and its exact shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamTarget {
    pub node: usize,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

/// Decode targets of an instantiated graph, aligned with `net.params`.
pub fn targets_for<T: Real>(inst: &NetworkInstance<T>) -> Vec<ParamTarget> {
    inst.net
        .meta
        .iter()
        .zip(&inst.param_nodes)
        .map(|(m, &node)| ParamTarget { node, kind: m.kind, shape: m.shape.clone() })
        .collect()
}

/// Predicted parameters for one graph, aligned with `Network::params`.
#[derive(Debug, Clone)]
pub struct PredictedParams<T: Real> {
    pub params: Vec<Tensor<T>>,
    /// params[i] belongs to this graph node.
    pub param_nodes: Vec<usize>,
}

/// Full prediction on an existing tape. `weights` are the model tensors as
/// tape vars (leaves during training, constants during inference); returned
/// vars align with `targets`, so they can feed a network forward pass and
/// carry task gradients back into the hypernetwork.
pub fn predict_vars<T: Real>(
    cfg: &GhnConfig,
    tape: &Tape<T>,
    weights: &[Var],
    g: &ArchGraph,
    virt: &VirtualEdgeSet,
    targets: &[ParamTarget],
) -> Result<Vec<Var>> {
    if weights.len() != NUM_TENSORS {
        return Err(Error::config(format!("expected {NUM_TENSORS} weight vars, got {}", weights.len())));
    }
    let states = refined_states(cfg, tape, weights, g, virt)?;
    let dec = Decoder::new(cfg, tape, weights, g.nodes.len());
    let mut out = Vec::with_capacity(targets.len());
    for t in targets {
        if t.node >= states.len() {
            return Err(Error::graph(format!("target node {} outside graph of {} nodes", t.node, states.len())));
        }
        out.push(dec.decode(t.node, states[t.node], t.kind, &t.shape)?);
    }
    Ok(out)
}

/// Scalar attribute rows: kernel, log channels, stride, batch-norm flag.
fn node_features<T: Real>(g: &ArchGraph) -> Tensor<T> {
    let mut t = Tensor::zeros(&[g.nodes.len(), FEATURE_DIM]);
    for (i, node) in g.nodes.iter().enumerate() {
        let row = &mut t.data_mut()[i * FEATURE_DIM..(i + 1) * FEATURE_DIM];
        row[0] = T::from_f64(node.kernel as f64 / KERNEL_SCALE);
        row[1] = T::from_f64((node.channels.max(1) as f64).ln() / CHANNEL_SCALE.ln());
        row[2] = T::from_f64(node.stride as f64 - 1.0);
        row[3] = T::from_f64(if node.has_bn { 1.0 } else { 0.0 });
    }
    t
}

/// Kind-table rows plus projected attributes, `[n, embed_dim]`.
fn embed_vars<T: Real>(tape: &Tape<T>, weights: &[Var], g: &ArchGraph) -> Result<Var> {
    let kinds: Vec<usize> = g.nodes.iter().map(|o| o.kind.index()).collect();
    let table = tape.gather_rows(weights[T_EMBED], &kinds)?;
    let feats = tape.constant(node_features::<T>(g));
    let proj = tape.dense(feats, weights[T_FEAT_W], Some(weights[T_FEAT_B]))?;
    tape.add(table, proj)
}

/// Real neighbors weigh 1, virtual neighbors 1/distance. `fwd[v]` lists
/// message sources for the forward sweep, `bwd[u]` for the backward sweep.
fn neighbor_lists(g: &ArchGraph, virt: &VirtualEdgeSet) -> (Vec<Vec<(usize, f64)>>, Vec<Vec<(usize, f64)>>) {
    let mut fwd: Vec<Vec<(usize, f64)>> =
        g.producers().into_iter().map(|ps| ps.into_iter().map(|u| (u, 1.0)).collect()).collect();
    let mut bwd: Vec<Vec<(usize, f64)>> =
        g.consumers().into_iter().map(|cs| cs.into_iter().map(|v| (v, 1.0)).collect()).collect();
    for &(u, v, w) in &virt.pairs {
        debug_assert!(u < g.nodes.len() && v < g.nodes.len());
        fwd[v].push((u, w));
        bwd[u].push((v, w));
    }
    (fwd, bwd)
}

/// Embed then refine: per round, one forward topological sweep and one
/// backward sweep. Updates are sequential in sweep order, so later nodes see
/// already-updated predecessors within the same sweep.
fn refined_states<T: Real>(
    cfg: &GhnConfig,
    tape: &Tape<T>,
    weights: &[Var],
    g: &ArchGraph,
    virt: &VirtualEdgeSet,
) -> Result<Vec<Var>> {
    let n = g.nodes.len();
    let embeds = embed_vars(tape, weights, g)?;
    let mut states: Vec<Var> = (0..n).map(|i| tape.gather_rows(embeds, &[i])).collect::<Result<_>>()?;
    let (fwd, bwd) = neighbor_lists(g, virt);
    for _ in 0..cfg.rounds {
        for v in 0..n {
            states[v] = gated_update(cfg, tape, weights, &fwd[v], &states, v, T_MSG_FWD_W, T_MSG_FWD_B)?;
        }
        for v in (0..n).rev() {
            states[v] = gated_update(cfg, tape, weights, &bwd[v], &states, v, T_MSG_BWD_W, T_MSG_BWD_B)?;
        }
    }
    Ok(states)
}

/// One node update: weighted mean of neighbor states through the sweep's
/// message network (zero message when there are no neighbors), then a GRU
/// step against the current state.
fn gated_update<T: Real>(
    cfg: &GhnConfig,
    tape: &Tape<T>,
    weights: &[Var],
    neighbors: &[(usize, f64)],
    states: &[Var],
    v: usize,
    msg_w: usize,
    msg_b: usize,
) -> Result<Var> {
    let m = if neighbors.is_empty() {
        tape.constant(Tensor::zeros(&[1, cfg.embed_dim]))
    } else {
        let terms: Vec<(Var, T)> = neighbors.iter().map(|&(u, w)| (states[u], T::from_f64(w))).collect();
        let total: f64 = neighbors.iter().map(|&(_, w)| w).sum();
        let mean = tape.scale(tape.weighted_sum(&terms)?, T::from_f64(1.0 / total));
        tape.dense(mean, weights[msg_w], Some(weights[msg_b]))?
    };
    let h = states[v];
    let z = tape.sigmoid(tape.add(tape.dense(m, weights[T_GRU_WZ], Some(weights[T_GRU_BZ]))?, tape.dense(h, weights[T_GRU_UZ], None)?)?);
    let r = tape.sigmoid(tape.add(tape.dense(m, weights[T_GRU_WR], Some(weights[T_GRU_BR]))?, tape.dense(h, weights[T_GRU_UR], None)?)?);
    let gated = tape.mul(r, h)?;
    let cand = tape.tanh(tape.add(tape.dense(m, weights[T_GRU_WH], Some(weights[T_GRU_BH]))?, tape.dense(gated, weights[T_GRU_UH], None)?)?);
    // h' = h + z * (cand - h), the usual convex gate.
    tape.add(h, tape.mul(z, tape.sub(cand, h)?)?)
}

/// Per-node decoder with cached heads, so a node's tile and vector are each
/// computed once no matter how many tensors it owns.
struct Decoder<'a, T: Real> {
    cfg: &'a GhnConfig,
    tape: &'a Tape<T>,
    weights: &'a [Var],
    trunk: std::cell::RefCell<Vec<Option<Var>>>,
    tile: std::cell::RefCell<Vec<Option<Var>>>,
    vec: std::cell::RefCell<Vec<Option<Var>>>,
}

impl<'a, T: Real> Decoder<'a, T> {
    fn new(cfg: &'a GhnConfig, tape: &'a Tape<T>, weights: &'a [Var], nodes: usize) -> Self {
        Decoder {
            cfg,
            tape,
            weights,
            trunk: std::cell::RefCell::new(vec![None; nodes]),
            tile: std::cell::RefCell::new(vec![None; nodes]),
            vec: std::cell::RefCell::new(vec![None; nodes]),
        }
    }

    fn trunk_of(&self, node: usize, state: Var) -> Result<Var> {
        if let Some(v) = self.trunk.borrow()[node] {
            return Ok(v);
        }
        let v = self
            .tape
            .relu(self.tape.dense(state, self.weights[T_DEC_HIDDEN_W], Some(self.weights[T_DEC_HIDDEN_B]))?);
        self.trunk.borrow_mut()[node] = Some(v);
        Ok(v)
    }

    fn tile_of(&self, node: usize, state: Var) -> Result<Var> {
        if let Some(v) = self.tile.borrow()[node] {
            return Ok(v);
        }
        let trunk = self.trunk_of(node, state)?;
        let v = self.tape.dense(trunk, self.weights[T_DEC_TILE_W], Some(self.weights[T_DEC_TILE_B]))?;
        self.tile.borrow_mut()[node] = Some(v);
        Ok(v)
    }

    fn vec_of(&self, node: usize, state: Var) -> Result<Var> {
        if let Some(v) = self.vec.borrow()[node] {
            return Ok(v);
        }
        let trunk = self.trunk_of(node, state)?;
        let v = self.tape.dense(trunk, self.weights[T_DEC_VEC_W], Some(self.weights[T_DEC_VEC_B]))?;
        self.vec.borrow_mut()[node] = Some(v);
        Ok(v)
    }

    fn decode(&self, node: usize, state: Var, kind: ParamKind, shape: &[usize]) -> Result<Var> {
        match kind {
            ParamKind::ConvWeight => {
                let &[o, i, kh, kw] = shape else {
                    return Err(Error::shape(format!("conv weight must be 4-d, got {shape:?}")));
                };
                if kh != kw {
                    return Err(Error::shape(format!("decoder handles square kernels only, got {kh}x{kw}")));
                }
                let tk = self.cfg.tile_kernel;
                if kh > tk {
                    return Err(Error::config(format!("kernel {kh} exceeds decoder tile kernel {tk}")));
                }
                if (tk - kh) % 2 != 0 {
                    return Err(Error::config(format!("kernel {kh} cannot be center-cropped from tile kernel {tk}")));
                }
                let tile = self.tile_of(node, state)?;
                let gathered = self.tape.gather_map(tile, conv_map(self.cfg, o, i, kh), shape)?;
                self.normalize(gathered, shape)
            }
            ParamKind::DenseWeight => {
                let &[f, u] = shape else {
                    return Err(Error::shape(format!("dense weight must be 2-d, got {shape:?}")));
                };
                let tile = self.tile_of(node, state)?;
                let gathered = self.tape.gather_map(tile, dense_map(self.cfg, f, u), shape)?;
                self.normalize(gathered, shape)
            }
            ParamKind::Bias | ParamKind::Gamma | ParamKind::Beta => {
                let &[c] = shape else {
                    return Err(Error::shape(format!("channel vector must be 1-d, got {shape:?}")));
                };
                let slot = match kind {
                    ParamKind::Bias => 0,
                    ParamKind::Gamma => 1,
                    _ => 2,
                };
                let vec = self.vec_of(node, state)?;
                let map = (0..c).map(|ch| (slot * self.cfg.tile_out + ch % self.cfg.tile_out) as u32).collect();
                let gathered = self.tape.gather_map(vec, map, shape)?;
                // Gammas decode around identity.
                if kind == ParamKind::Gamma {
                    Ok(self.tape.add_scalar(gathered, T::one()))
                } else {
                    Ok(gathered)
                }
            }
        }
    }

    fn normalize(&self, v: Var, shape: &[usize]) -> Result<Var> {
        match self.cfg.normalization {
            NormMode::Off => Ok(v),
            NormMode::FanInRms => {
                let fan_in = fan_of(shape)?.fan_in;
                let target = T::from_f64((2.0 / fan_in as f64).sqrt());
                Ok(self.tape.rms_normalize(v, target, T::from_f64(RMS_EPS)))
            }
        }
    }
}

/// Flat tile indices for a conv weight: channels tile modulo, kernel axes
/// center-crop.
fn conv_map(cfg: &GhnConfig, o_c: usize, i_c: usize, k: usize) -> Vec<u32> {
    let tk = cfg.tile_kernel;
    let off = (tk - k) / 2;
    let mut map = Vec::with_capacity(o_c * i_c * k * k);
    for o in 0..o_c {
        let to = o % cfg.tile_out;
        for i in 0..i_c {
            let ti = i % cfg.tile_in;
            for y in 0..k {
                for x in 0..k {
                    map.push((((to * cfg.tile_in + ti) * tk + y + off) * tk + x + off) as u32);
                }
            }
        }
    }
    map
}

/// Dense weights read the tile's center pixel: the (tile_out, tile_in) face
/// there tiles modulo over (features, units).
fn dense_map(cfg: &GhnConfig, f_in: usize, u_out: usize) -> Vec<u32> {
    let tk = cfg.tile_kernel;
    let center = (tk / 2) * tk + tk / 2;
    let mut map = Vec::with_capacity(f_in * u_out);
    for f in 0..f_in {
        for u in 0..u_out {
            map.push((((f % cfg.tile_out) * cfg.tile_in + (u % cfg.tile_in)) * tk * tk + center) as u32);
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{graph_rng, sample_graph, sample_split, OpNode, SamplerConfig, SplitTag, GRAPH_SCHEMA};
    use crate::tensor::tape::grad_check;
    use crate::zoo::BnSource;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn op(kind: OpKind, kernel: usize, channels: usize, stride: usize, has_bn: bool) -> OpNode {
        OpNode { kind, kernel, channels, stride, has_bn }
    }

    fn chain(nodes: Vec<OpNode>) -> ArchGraph {
        let edges = (1..nodes.len()).map(|i| (i - 1, i)).collect();
        ArchGraph {
            schema: GRAPH_SCHEMA,
            split: SplitTag::Train,
            index: 0,
            cells: 0,
            channels: 0,
            nodes,
            edges,
            param_count: 0,
        }
    }

    fn tiny_cfg() -> GhnConfig {
        GhnConfig {
            embed_dim: 8,
            hidden_dim: 8,
            rounds: 1,
            s_max: 10,
            tile_out: 2,
            tile_in: 2,
            tile_kernel: 3,
            normalization: NormMode::FanInRms,
        }
    }

    fn finite<T: Real>(t: &Tensor<T>) -> bool {
        t.data().iter().all(|&v| v.to_f64().is_finite())
    }

    #[test]
    fn layout_matches_constants_and_size() {
        let cfg = GhnConfig::default();
        let layout = tensor_layout(&cfg);
        assert_eq!(layout.len(), NUM_TENSORS);
        assert_eq!(layout[T_EMBED].0, "embed_table");
        assert_eq!(layout[T_GRU_WH].0, "gru_wh");
        assert_eq!(layout[T_DEC_TILE_W].0, "dec_tile_w");
        assert_eq!(layout[T_DEC_VEC_B].0, "dec_vec_b");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = GhnModel::<f32>::new(cfg, &mut rng).unwrap();
        assert_eq!(model.params.len(), NUM_TENSORS);
        // Hand count at d=64, hidden=128, tile (16,16,7,7), vec 48.
        assert_eq!(model.num_params(), 1_666_800);
        assert!(model.params.iter().all(finite));
    }

    #[test]
    fn config_validation() {
        assert!(GhnConfig::default().validate().is_ok());
        assert!(GhnConfig { rounds: 0, ..GhnConfig::default() }.validate().is_err());
        assert!(GhnConfig { embed_dim: 0, ..GhnConfig::default() }.validate().is_err());
        assert!(GhnConfig { tile_kernel: 4, ..GhnConfig::default() }.validate().is_err());
        assert!(GhnConfig { tile_out: 0, ..GhnConfig::default() }.validate().is_err());
    }

    #[test]
    fn identical_nodes_embed_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = GhnModel::<f64>::new(GhnConfig::default(), &mut rng).unwrap();
        let g = chain(vec![
            op(OpKind::Stem, 3, 8, 1, false),
            op(OpKind::Relu, 0, 8, 1, false),
            op(OpKind::Relu, 0, 8, 1, false),
            op(OpKind::Head, 0, 10, 1, false),
        ]);
        let e = model.embed_graph(&g).unwrap();
        assert_eq!(e.shape(), [4, 64]);
        let d = 64;
        assert_eq!(e.data()[d..2 * d], e.data()[2 * d..3 * d]);
        assert!(finite(&e));
    }

    #[test]
    fn kernel_changes_embedding_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = GhnModel::<f64>::new(GhnConfig::default(), &mut rng).unwrap();
        let g = chain(vec![
            op(OpKind::Stem, 3, 8, 1, false),
            op(OpKind::Conv, 3, 8, 1, false),
            op(OpKind::Conv, 5, 8, 1, false),
            op(OpKind::Head, 0, 10, 1, false),
        ]);
        let e = model.embed_graph(&g).unwrap();
        let d = 64;
        assert_ne!(e.data()[d..2 * d], e.data()[2 * d..3 * d]);
    }

    #[test]
    fn isolated_node_updates_through_self_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = GhnModel::<f64>::new(GhnConfig::default(), &mut rng).unwrap();
        let g = chain(vec![op(OpKind::Stem, 3, 8, 1, false)]);
        let virt = add_virtual_edges(&g, 10);
        assert!(virt.pairs.is_empty());
        let before = model.embed_graph(&g).unwrap();
        let after = model.message_pass(&g, &virt).unwrap();
        assert_eq!(after.shape(), [1, 64]);
        assert!(finite(&after));
        assert_ne!(before.data(), after.data());
    }

    #[test]
    fn virtual_edges_change_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = GhnModel::<f64>::new(GhnConfig::default(), &mut rng).unwrap();
        let g = chain(vec![
            op(OpKind::Stem, 3, 8, 1, false),
            op(OpKind::Relu, 0, 8, 1, false),
            op(OpKind::Head, 0, 10, 1, false),
        ]);
        let with = add_virtual_edges(&g, 10);
        assert_eq!(with.pairs, vec![(0, 2, 0.5)]);
        let without = VirtualEdgeSet { s_max: 0, pairs: vec![] };
        let a = model.message_pass(&g, &with).unwrap();
        let b = model.message_pass(&g, &without).unwrap();
        assert_ne!(a.data(), b.data());
        assert!(finite(&a) && finite(&b));
    }

    #[test]
    fn decode_crops_center_and_tiles_channels() {
        let cfg = GhnConfig { normalization: NormMode::Off, ..GhnConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = GhnModel::<f64>::new(cfg, &mut rng).unwrap();
        let state = init_tensor::<f64, _>(&[1, 64], Initializer::RandNormSmall, &mut rng).unwrap();
        let w33 = model.decode_param(&state, ParamKind::ConvWeight, &[32, 16, 3, 3]).unwrap();
        let w77 = model.decode_param(&state, ParamKind::ConvWeight, &[16, 16, 7, 7]).unwrap();
        let at33 = |o: usize, i: usize, y: usize, x: usize| w33.data()[((o * 16 + i) * 3 + y) * 3 + x];
        let at77 = |o: usize, i: usize, y: usize, x: usize| w77.data()[((o * 16 + i) * 7 + y) * 7 + x];
        for o in 0..16 {
            for i in 0..16 {
                for y in 0..3 {
                    for x in 0..3 {
                        // Output channels 16..32 repeat the first 16.
                        assert_eq!(at33(o + 16, i, y, x), at33(o, i, y, x));
                        // The 3x3 target reads the center of the 7x7 tile.
                        assert_eq!(at33(o, i, y, x), at77(o, i, y + 2, x + 2));
                    }
                }
            }
        }
    }

    #[test]
    fn decode_smaller_than_tile_is_a_pure_slice() {
        let cfg = GhnConfig { normalization: NormMode::Off, ..GhnConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = GhnModel::<f64>::new(cfg, &mut rng).unwrap();
        let state = init_tensor::<f64, _>(&[1, 64], Initializer::RandNormSmall, &mut rng).unwrap();
        let w = model.decode_param(&state, ParamKind::ConvWeight, &[8, 8, 3, 3]).unwrap();
        let w77 = model.decode_param(&state, ParamKind::ConvWeight, &[16, 16, 7, 7]).unwrap();
        for o in 0..8 {
            for i in 0..8 {
                for y in 0..3 {
                    for x in 0..3 {
                        assert_eq!(
                            w.data()[((o * 8 + i) * 3 + y) * 3 + x],
                            w77.data()[((o * 16 + i) * 7 + y + 2) * 7 + x + 2]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn decode_rms_matches_fan_in_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = GhnModel::<f64>::new(GhnConfig::default(), &mut rng).unwrap();
        let state = init_tensor::<f64, _>(&[1, 64], Initializer::RandNormSmall, &mut rng).unwrap();
        let rms = |t: &Tensor<f64>| (t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64).sqrt();
        // fan_in 8 gives sqrt(2/8) = 0.5.
        let w = model.decode_param(&state, ParamKind::ConvWeight, &[4, 8, 1, 1]).unwrap();
        assert!((rms(&w) - 0.5).abs() < 1e-5, "rms {}", rms(&w));
        let w = model.decode_param(&state, ParamKind::ConvWeight, &[8, 4, 3, 3]).unwrap();
        assert!((rms(&w) - (2.0 / 36.0f64).sqrt()).abs() < 1e-5);
        let w = model.decode_param(&state, ParamKind::DenseWeight, &[32, 10]).unwrap();
        assert!((rms(&w) - 0.25).abs() < 1e-5);
    }

    #[test]
    fn zero_state_decodes_identity_bn_and_zero_weights() {
        // Fresh decoder biases are zero, so a zero state yields zero raw
        // outputs everywhere; only the gamma offset survives.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = GhnModel::<f64>::new(GhnConfig::default(), &mut rng).unwrap();
        let state = Tensor::<f64>::zeros(&[1, 64]);
        let w = model.decode_param(&state, ParamKind::ConvWeight, &[4, 4, 3, 3]).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
        let gamma = model.decode_param(&state, ParamKind::Gamma, &[20]).unwrap();
        assert!(gamma.data().iter().all(|&v| v == 1.0));
        let beta = model.decode_param(&state, ParamKind::Beta, &[20]).unwrap();
        assert!(beta.data().iter().all(|&v| v == 0.0));
        let bias = model.decode_param(&state, ParamKind::Bias, &[20]).unwrap();
        assert!(bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_vectors_wrap_modulo_tile() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = GhnModel::<f64>::new(GhnConfig::default(), &mut rng).unwrap();
        let state = init_tensor::<f64, _>(&[1, 64], Initializer::RandNormSmall, &mut rng).unwrap();
        let bias = model.decode_param(&state, ParamKind::Bias, &[40]).unwrap();
        for c in 0..24 {
            assert_eq!(bias.data()[c], bias.data()[c % 16]);
        }
        let gamma = model.decode_param(&state, ParamKind::Gamma, &[16]).unwrap();
        let beta = model.decode_param(&state, ParamKind::Beta, &[16]).unwrap();
        assert_ne!(gamma.data(), beta.data());
    }

    #[test]
    fn oversized_or_misaligned_kernels_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = GhnModel::<f64>::new(GhnConfig::default(), &mut rng).unwrap();
        let state = Tensor::<f64>::zeros(&[1, 64]);
        assert!(model.decode_param(&state, ParamKind::ConvWeight, &[4, 4, 9, 9]).is_err());
        assert!(model.decode_param(&state, ParamKind::ConvWeight, &[4, 4, 2, 2]).is_err());
        assert!(model.decode_param(&state, ParamKind::ConvWeight, &[4, 4, 3, 5]).is_err());
    }

    #[test]
    fn predict_all_is_shape_exact_and_instantiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = GhnModel::<f64>::new(GhnConfig::default(), &mut rng).unwrap();
        let cfg = SamplerConfig::for_split(SplitTag::Train, 40);
        for idx in 0..5u64 {
            let g = sample_graph(&cfg, idx, &mut graph_rng(cfg.seed, idx)).unwrap();
            let pred = model.predict_all(&g).unwrap();
            let inst = build_instance::<f64>(&g).unwrap();
            assert_eq!(pred.params.len(), inst.net.params.len());
            assert_eq!(pred.param_nodes, inst.param_nodes);
            for (p, m) in pred.params.iter().zip(&inst.net.meta) {
                assert_eq!(p.shape(), &m.shape[..], "shape mismatch for {:?}", m.kind);
                assert!(finite(p));
            }
            let inst = crate::graph::instantiate(&g, Some(pred.params), &mut rng).unwrap();
            let x = init_tensor::<f64, _>(&[1, 3, 32, 32], Initializer::RandNormSmall, &mut rng).unwrap();
            let (logits, _) = inst.net.forward_eval(&x, BnSource::Batch, None, |_, _| {}).unwrap();
            assert_eq!(logits.shape(), [1, 10]);
            assert!(finite(&logits));
        }
    }

    #[test]
    fn predictions_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = GhnModel::<f64>::new(GhnConfig::default(), &mut rng).unwrap();
        let cfg = SamplerConfig::for_split(SplitTag::Train, 41);
        let g = sample_graph(&cfg, 0, &mut graph_rng(cfg.seed, 0)).unwrap();
        let a = model.predict_all(&g).unwrap();
        let b = model.predict_all(&g).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn predictions_finite_across_split_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = GhnModel::<f32>::new(GhnConfig::default(), &mut rng).unwrap();
        let cfg = SamplerConfig::for_split(SplitTag::Train, 42);
        for g in sample_split(&cfg, 25).unwrap() {
            let pred = model.predict_all(&g).unwrap();
            assert!(pred.params.iter().all(finite));
        }
    }

    #[test]
    fn equivalent_nodes_decode_equal_tensors() {
        // Two convs with equal attributes and mirror-image neighborhoods
        // must end message passing in the same state and decode identically.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = GhnModel::<f64>::new(GhnConfig::default(), &mut rng).unwrap();
        let g = ArchGraph {
            schema: GRAPH_SCHEMA,
            split: SplitTag::Train,
            index: 0,
            cells: 0,
            channels: 0,
            nodes: vec![
                op(OpKind::Stem, 3, 8, 1, false),
                op(OpKind::Conv, 3, 8, 1, false),
                op(OpKind::Conv, 3, 8, 1, false),
                op(OpKind::Head, 0, 10, 1, false),
            ],
            edges: vec![(0, 1), (0, 2), (1, 3), (2, 3)],
            param_count: 0,
        };
        let pred = model.predict_all(&g).unwrap();
        let of_node = |n: usize| -> Vec<&Tensor<f64>> {
            pred.param_nodes.iter().zip(&pred.params).filter(|(&pn, _)| pn == n).map(|(_, t)| t).collect()
        };
        let a = of_node(1);
        let b = of_node(2);
        assert_eq!(a.len(), 2);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn task_loss_reaches_hypernetwork_weights() {
        let cfg = GhnConfig { embed_dim: 8, hidden_dim: 8, ..GhnConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let model = GhnModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let scfg = SamplerConfig {
            min_cells: 2,
            max_cells: 2,
            min_channels: 8,
            max_channels: 16,
            ..SamplerConfig::for_split(SplitTag::Train, 43)
        };
        let g = sample_graph(&scfg, 0, &mut graph_rng(scfg.seed, 0)).unwrap();
        let virt = add_virtual_edges(&g, cfg.s_max);
        let inst = build_instance::<f64>(&g).unwrap();
        let targets = targets_for(&inst);

        let tape = Tape::new();
        let weights = model.leaf_vars(&tape);
        let params = predict_vars(&cfg, &tape, &weights, &g, &virt, &targets).unwrap();
        let x = init_tensor::<f64, _>(&[2, 3, 16, 16], Initializer::RandNormSmall, &mut rng).unwrap();
        let fwd = inst.net.forward_tape_with(&tape, params, &x, None, &mut rng).unwrap();
        let loss = tape.softmax_cross_entropy(fwd.output, &[0, 1]).unwrap();
        assert!(tape.value_clone(loss).item().is_finite());
        let grads = tape.backward(loss).unwrap();
        for &idx in &[T_EMBED, T_GRU_WH, T_DEC_TILE_W, T_DEC_VEC_W, T_FEAT_W] {
            let gt = grads.get(weights[idx]).expect("gradient present");
            assert!(finite(gt));
            assert!(gt.data().iter().any(|&v| v != 0.0), "zero gradient at tensor {idx}");
        }
    }

    #[test]
    fn finite_difference_gradients_agree() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let model = GhnModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let g = chain(vec![
            op(OpKind::Stem, 3, 4, 1, true),
            op(OpKind::BatchNorm, 0, 4, 1, false),
            op(OpKind::Relu, 0, 4, 1, false),
            op(OpKind::Head, 0, 3, 1, false),
        ]);
        let virt = add_virtual_edges(&g, cfg.s_max);
        let inst = build_instance::<f64>(&g).unwrap();
        let targets = targets_for(&inst);
        // Random loss weights break decode symmetries so no gradient sits at
        // a stationary point by construction.
        let loss_w: Vec<Tensor<f64>> = targets
            .iter()
            .map(|t| {
                let n: usize = t.shape.iter().product();
                Tensor::new(&t.shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let checked = [T_EMBED, T_FEAT_W, T_MSG_FWD_W, T_MSG_BWD_W, T_GRU_WH, T_GRU_UZ, T_DEC_HIDDEN_W, T_DEC_TILE_W, T_DEC_VEC_W];
        let inputs: Vec<Tensor<f64>> = checked.iter().map(|&i| model.params[i].clone()).collect();
        let err = grad_check(&inputs, 1e-5, |tape, vars| {
            let weights: Vec<Var> = (0..NUM_TENSORS)
                .map(|i| match checked.iter().position(|&c| c == i) {
                    Some(j) => vars[j],
                    None => tape.constant(model.params[i].clone()),
                })
                .collect();
            let preds = predict_vars(&cfg, tape, &weights, &g, &virt, &targets).unwrap();
            let parts: Vec<Var> = preds
                .iter()
                .zip(&loss_w)
                .map(|(&p, w)| tape.sum_all(tape.mul(p, tape.constant(w.clone())).unwrap()))
                .collect();
            tape.add_n(&parts).unwrap()
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let cfg = GhnConfig { embed_dim: 16, hidden_dim: 16, tile_out: 4, tile_in: 4, ..GhnConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = GhnModel::<f64>::new(cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ghn.json");
        model.save(&path).unwrap();
        let loaded = GhnModel::<f64>::load(&path).unwrap();
        assert_eq!(model.cfg, loaded.cfg);
        for (a, b) in model.params.iter().zip(&loaded.params) {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data());
        }
        let scfg = SamplerConfig::for_split(SplitTag::Train, 44);
        let g = sample_graph(&scfg, 0, &mut graph_rng(scfg.seed, 0)).unwrap();
        let a = model.predict_all(&g).unwrap();
        let b = loaded.predict_all(&g).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn checkpoint_schema_and_shape_mismatches_are_rejected() {
        let cfg = GhnConfig { embed_dim: 8, hidden_dim: 8, tile_out: 2, tile_in: 2, ..GhnConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let model = GhnModel::<f64>::new(cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ghn.json");
        model.save(&path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let bad_schema = path.with_file_name("bad_schema.json");
        std::fs::write(&bad_schema, text.replacen("{\"schema\":1", "{\"schema\":99", 1)).unwrap();
        assert!(GhnModel::<f64>::load(&bad_schema).is_err());

        let mut ck: serde_json::Value = serde_json::from_str(&text).unwrap();
        ck["tensors"][0]["data"] = serde_json::json!([0.0]);
        let bad_shape = path.with_file_name("bad_shape.json");
        std::fs::write(&bad_shape, serde_json::to_string(&ck).unwrap()).unwrap();
        assert!(GhnModel::<f64>::load(&bad_shape).is_err());
    }
}
