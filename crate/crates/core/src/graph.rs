//! Architecture graphs: representation, random sampler, OOD splits, virtual
//! edges, and the bridge to executable networks.
//!
//! The sampler draws mobile-friendly cell networks: a stem, a sequence of
//! normal and reduction cells, and a classifier head. Each cell takes the two
//! previous cell outputs through 1x1 preprocessing convolutions and wires
//! four intermediate nodes, each summing two sampled edge operations drawn
//! from a reduced vocabulary (regular, separable, and dilated convolutions,
//! pooling, identity). Cell outputs are the channel concatenation of the four
//! intermediates, realized implicitly by multi-input consumers. Whole graphs
//! are resampled while their exact trainable-parameter count exceeds the cap.
//!
//! Graphs serialize as JSON lines (see [`OpNode`] for the per-node schema)
//! with a manifest carrying per-split statistics. Per-graph RNG streams are
//! derived from (seed, index), so datasets regenerate byte-identically and
//! sampling parallelizes without coordination.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::tensor::{Real, Tensor};
use crate::zoo::{NetBuilder, Network};

/// Input image channels assumed by stems and standalone convolutions.
pub const IMAGE_CHANNELS: usize = 3;
/// Current JSON-lines schema version.
pub const GRAPH_SCHEMA: u32 = 1;
/// Whole-graph resampling budget before the parameter cap is declared
/// unsatisfiable for the configured ranges.
const MAX_SAMPLE_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Stem,
    Conv,
    SeparableConv,
    DilatedConv,
    MaxPool,
    AvgPool,
    Skip,
    BatchNorm,
    Relu,
    Dense,
    Head,
}

impl OpKind {
    pub const COUNT: usize = 11;

    /// Stable index for embedding tables.
    pub fn index(&self) -> usize {
        match self {
            OpKind::Stem => 0,
            OpKind::Conv => 1,
            OpKind::SeparableConv => 2,
            OpKind::DilatedConv => 3,
            OpKind::MaxPool => 4,
            OpKind::AvgPool => 5,
            OpKind::Skip => 6,
            OpKind::BatchNorm => 7,
            OpKind::Relu => 8,
            OpKind::Dense => 9,
            OpKind::Head => 10,
        }
    }

    pub fn is_conv_like(&self) -> bool {
        matches!(self, OpKind::Stem | OpKind::Conv | OpKind::SeparableConv | OpKind::DilatedConv)
    }
}

/// One typed operation node.
///
/// JSON schema per node: `kind` (vocabulary string), `kernel` (0 for
/// non-spatial ops), `channels` (output channels; classes for the head),
/// `stride`, `has_bn` (whether a batch_norm node follows this operation).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpNode {
    pub kind: OpKind,
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
    pub has_bn: bool,
}

/// Dataset split tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    TestID,
    Deep,
    Wide,
    BNFree,
}

impl SplitTag {
    pub const ALL: [SplitTag; 5] =
        [SplitTag::Train, SplitTag::TestID, SplitTag::Deep, SplitTag::Wide, SplitTag::BNFree];

    pub fn name(&self) -> &'static str {
        match self {
            SplitTag::Train => "Train",
            SplitTag::TestID => "TestID",
            SplitTag::Deep => "Deep",
            SplitTag::Wide => "Wide",
            SplitTag::BNFree => "BNFree",
        }
    }

    /// File stem for the split's JSON-lines file.
    pub fn file_stem(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::TestID => "test_id",
            SplitTag::Deep => "deep",
            SplitTag::Wide => "wide",
            SplitTag::BNFree => "bn_free",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name().eq_ignore_ascii_case(s) || t.file_stem().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown split '{s}'")))
    }
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Sampler configuration; ranges are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub split: SplitTag,
    pub min_cells: usize,
    pub max_cells: usize,
    pub min_channels: usize,
    pub max_channels: usize,
    /// Maximum exact trainable-parameter count; larger samples are rejected.
    pub param_cap: usize,
    /// Probability that a layer group (the stem, or one cell) attaches batch
    /// norm to its convolutions.
    pub bn_prob: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl SamplerConfig {
    /// Canonical ranges: train and in-distribution test share 2..=6 cells at
    /// 8..=64 channels; Deep sits strictly above in cells (10..=16), Wide
    /// strictly above in channels (128..=256), BNFree drops batch norm.
    pub fn for_split(split: SplitTag, seed: u64) -> Self {
        let (cells, channels) = match split {
            SplitTag::Deep => ((10, 16), (8, 64)),
            SplitTag::Wide => ((2, 6), (128, 256)),
            _ => ((2, 6), (8, 64)),
        };
        SamplerConfig {
            split,
            min_cells: cells.0,
            max_cells: cells.1,
            min_channels: channels.0,
            max_channels: channels.1,
            param_cap: 10_000_000,
            bn_prob: if split == SplitTag::BNFree { 0.0 } else { 0.5 },
            num_classes: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_cells == 0 || self.min_cells > self.max_cells {
            return Err(Error::config(format!("cell range {}..={} invalid", self.min_cells, self.max_cells)));
        }
        if self.min_channels == 0 || self.min_channels > self.max_channels {
            return Err(Error::config(format!(
                "channel range {}..={} invalid",
                self.min_channels, self.max_channels
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_prob) {
            return Err(Error::config(format!("bn probability {} outside [0, 1]", self.bn_prob)));
        }
        if self.param_cap == 0 || self.num_classes == 0 {
            return Err(Error::config("parameter cap and class count must be positive"));
        }
        if self.split == SplitTag::BNFree && self.bn_prob != 0.0 {
            return Err(Error::config("BNFree split requires bn probability 0"));
        }
        Ok(())
    }
}

/// A sampled architecture: nodes in topological order (every edge points from
/// a lower to a higher index), plus sampling metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchGraph {
    pub schema: u32,
    pub split: SplitTag,
    pub index: u64,
    pub cells: usize,
    pub channels: usize,
    pub nodes: Vec<OpNode>,
    pub edges: Vec<(usize, usize)>,
    pub param_count: usize,
}

impl ArchGraph {
    /// Producers of each node, in edge insertion order. Order is meaningful:
    /// multi-input consumers concatenate channels in this order.
    pub fn producers(&self) -> Vec<Vec<usize>> {
        let mut p = vec![Vec::new(); self.nodes.len()];
        for &(u, v) in &self.edges {
            p[v].push(u);
        }
        p
    }

    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut c = vec![Vec::new(); self.nodes.len()];
        for &(u, v) in &self.edges {
            c[u].push(v);
        }
        c
    }

    /// Structural invariants: topological edge order, one stem at the front,
    /// one head at the back, full reachability from the stem, and vocabulary
    /// constraints on kernels and strides.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n < 2 {
            return Err(Error::graph("graph needs at least a stem and a head"));
        }
        if self.nodes[0].kind != OpKind::Stem || self.nodes[n - 1].kind != OpKind::Head {
            return Err(Error::graph("graph must start with stem and end with head"));
        }
        let stems = self.nodes.iter().filter(|o| o.kind == OpKind::Stem).count();
        let heads = self.nodes.iter().filter(|o| o.kind == OpKind::Head).count();
        if stems != 1 || heads != 1 {
            return Err(Error::graph(format!("expected 1 stem and 1 head, found {stems} and {heads}")));
        }
        for &(u, v) in &self.edges {
            if v >= n || u >= v {
                return Err(Error::graph(format!("edge ({u}, {v}) breaks topological node order")));
            }
        }
        let producers = self.producers();
        for (i, node) in self.nodes.iter().enumerate() {
            let np = producers[i].len();
            if i == 0 {
                if np != 0 {
                    return Err(Error::graph("stem cannot have producers"));
                }
            } else if np == 0 {
                return Err(Error::graph(format!("node {i} ({:?}) has no producers", node.kind)));
            }
            match node.kind {
                OpKind::Conv | OpKind::SeparableConv | OpKind::DilatedConv => {
                    if !matches!(node.kernel, 1 | 3 | 5 | 7) {
                        return Err(Error::graph(format!("conv kernel {} not in {{1,3,5,7}}", node.kernel)));
                    }
                }
                OpKind::MaxPool | OpKind::AvgPool => {
                    if !matches!(node.kernel, 1 | 3) {
                        return Err(Error::graph(format!("pool kernel {} not in {{1,3}}", node.kernel)));
                    }
                }
                _ => {}
            }
            if !matches!(node.stride, 1 | 2) {
                return Err(Error::graph(format!("stride {} not in {{1,2}}", node.stride)));
            }
            if node.channels == 0 {
                return Err(Error::graph(format!("node {i} has zero channels")));
            }
        }
        // Reachability from the stem.
        let consumers = self.consumers();
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &consumers[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        if let Some(unreached) = seen.iter().position(|&s| !s) {
            return Err(Error::graph(format!("node {unreached} unreachable from stem")));
        }
        Ok(())
    }
}

/// Exact trainable-parameter count of the network the graph instantiates to:
/// convolution weights and biases, batch norm scale/shift, dense weights and
/// biases. Pooling, skip, and relu nodes contribute nothing. Nodes without
/// producers read the image directly.
pub fn count_params(g: &ArchGraph) -> usize {
    let producers = g.producers();
    let in_channels = |i: usize| -> usize {
        if producers[i].is_empty() {
            IMAGE_CHANNELS
        } else {
            producers[i].iter().map(|&p| g.nodes[p].channels).sum()
        }
    };
    g.nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            let c_in = in_channels(i);
            let c_out = node.channels;
            match node.kind {
                OpKind::Stem | OpKind::Conv | OpKind::DilatedConv => {
                    node.kernel * node.kernel * c_in * c_out + c_out
                }
                OpKind::SeparableConv => {
                    // Depthwise kernel without bias, then biased pointwise.
                    node.kernel * node.kernel * c_in + c_in * c_out + c_out
                }
                OpKind::BatchNorm => 2 * c_out,
                OpKind::Dense | OpKind::Head => c_in * c_out + c_out,
                OpKind::MaxPool | OpKind::AvgPool | OpKind::Skip | OpKind::Relu => 0,
            }
        })
        .sum()
}

/// Virtual edges: ordered pairs (u, v) whose directed shortest-path distance
/// d satisfies 2 <= d <= s_max, weighted 1/d.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualEdgeSet {
    pub s_max: usize,
    /// (producer, consumer, 1/distance), lexicographic by (u, v).
    pub pairs: Vec<(usize, usize, f64)>,
}

/// BFS shortest paths along edge direction from every node.
pub fn add_virtual_edges(g: &ArchGraph, s_max: usize) -> VirtualEdgeSet {
    let n = g.nodes.len();
    let consumers = g.consumers();
    let mut pairs = Vec::new();
    let mut dist = vec![usize::MAX; n];
    for u in 0..n {
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[u] = 0;
        let mut queue = std::collections::VecDeque::from([u]);
        while let Some(x) = queue.pop_front() {
            if dist[x] >= s_max {
                continue;
            }
            for &y in &consumers[x] {
                if dist[y] == usize::MAX {
                    dist[y] = dist[x] + 1;
                    queue.push_back(y);
                }
            }
        }
        for v in 0..n {
            let d = dist[v];
            if d >= 2 && d <= s_max {
                pairs.push((u, v, 1.0 / d as f64));
            }
        }
    }
    VirtualEdgeSet { s_max, pairs }
}

struct GraphAssembler {
    nodes: Vec<OpNode>,
    edges: Vec<(usize, usize)>,
}

impl GraphAssembler {
    fn push(&mut self, node: OpNode, producers: &[usize]) -> usize {
        let id = self.nodes.len();
        self.nodes.push(node);
        for &p in producers {
            self.edges.push((p, id));
        }
        id
    }

    /// Convolution-like node, then its optional batch_norm and a relu.
    fn conv_chain(&mut self, kind: OpKind, kernel: usize, channels: usize, stride: usize, bn: bool, from: &[usize]) -> usize {
        let mut cur = self.push(OpNode { kind, kernel, channels, stride, has_bn: bn }, from);
        if bn {
            cur = self.push(OpNode { kind: OpKind::BatchNorm, kernel: 0, channels, stride: 1, has_bn: false }, &[cur]);
        }
        self.push(OpNode { kind: OpKind::Relu, kernel: 0, channels, stride: 1, has_bn: false }, &[cur])
    }
}

fn sample_once<R: Rng>(cfg: &SamplerConfig, index: u64, rng: &mut R) -> ArchGraph {
    let cells = rng.gen_range(cfg.min_cells..=cfg.max_cells);
    let channels = rng.gen_range(cfg.min_channels..=cfg.max_channels);
    let mut a = GraphAssembler { nodes: Vec::new(), edges: Vec::new() };

    let stem_bn = rng.gen_bool(cfg.bn_prob);
    let stem_out = a.conv_chain(OpKind::Stem, 3, channels, 1, stem_bn, &[]);

    // Reduction cells at the canonical one-third and two-thirds positions.
    let reduce_at = [cells / 3, 2 * cells / 3];
    let mut prev_prev: Vec<usize> = vec![stem_out];
    let mut prev: Vec<usize> = vec![stem_out];
    let mut prev_was_reduction = false;

    for c in 0..cells {
        let reduction = reduce_at.contains(&c);
        let cell_bn = rng.gen_bool(cfg.bn_prob);
        // 1x1 preprocessing; the older input catches up in scale when the
        // previous cell reduced.
        let s0_stride = if prev_was_reduction { 2 } else { 1 };
        let s0 = a.conv_chain(OpKind::Conv, 1, channels, s0_stride, cell_bn, &prev_prev);
        let s1 = a.conv_chain(OpKind::Conv, 1, channels, 1, cell_bn, &prev);

        let mut intermediates: Vec<usize> = Vec::new();
        for _ in 0..4 {
            // Candidate producers: the two cell inputs plus earlier
            // intermediates. Cell-input edges stride in reduction cells.
            let mut pool: Vec<(usize, bool)> = vec![(s0, true), (s1, true)];
            pool.extend(intermediates.iter().map(|&n| (n, false)));
            let first = rng.gen_range(0..pool.len());
            let second = loop {
                let x = rng.gen_range(0..pool.len());
                if x != first {
                    break x;
                }
            };
            let mut summands = Vec::new();
            for &(src, is_input) in [&pool[first], &pool[second]] {
                let stride = if reduction && is_input { 2 } else { 1 };
                summands.push(sample_edge_op(&mut a, src, channels, stride, cell_bn, rng));
            }
            let adder = a.push(
                OpNode { kind: OpKind::Skip, kernel: 0, channels, stride: 1, has_bn: false },
                &summands,
            );
            intermediates.push(adder);
        }
        prev_prev = std::mem::replace(&mut prev, intermediates);
        prev_was_reduction = reduction;
    }

    a.push(
        OpNode { kind: OpKind::Head, kernel: 0, channels: cfg.num_classes, stride: 1, has_bn: false },
        &prev,
    );

    let mut g = ArchGraph {
        schema: GRAPH_SCHEMA,
        split: cfg.split,
        index,
        cells,
        channels,
        nodes: a.nodes,
        edges: a.edges,
        param_count: 0,
    };
    g.param_count = count_params(&g);
    g
}

fn sample_edge_op<R: Rng>(
    a: &mut GraphAssembler,
    src: usize,
    channels: usize,
    stride: usize,
    bn: bool,
    rng: &mut R,
) -> usize {
    let kernel = [3, 5, 7][rng.gen_range(0..3)];
    match rng.gen_range(0..6) {
        0 => a.conv_chain(OpKind::Conv, kernel, channels, stride, bn, &[src]),
        1 => a.conv_chain(OpKind::SeparableConv, kernel, channels, stride, bn, &[src]),
        2 => a.conv_chain(OpKind::DilatedConv, kernel, channels, stride, bn, &[src]),
        3 => a.push(OpNode { kind: OpKind::MaxPool, kernel: 3, channels, stride, has_bn: false }, &[src]),
        4 => a.push(OpNode { kind: OpKind::AvgPool, kernel: 3, channels, stride, has_bn: false }, &[src]),
        _ => a.push(OpNode { kind: OpKind::Skip, kernel: 0, channels, stride, has_bn: false }, &[src]),
    }
}

/// Sample one graph, resampling whole drafts while they exceed the parameter
/// cap. Deterministic given (cfg, rng state).
pub fn sample_graph<R: Rng>(cfg: &SamplerConfig, index: u64, rng: &mut R) -> Result<ArchGraph> {
    cfg.validate()?;
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let g = sample_once(cfg, index, rng);
        if g.param_count <= cfg.param_cap {
            debug_assert!(g.validate().is_ok());
            return Ok(g);
        }
    }
    Err(Error::config(format!(
        "no graph under {} parameters in {MAX_SAMPLE_ATTEMPTS} attempts; cap unsatisfiable for the configured ranges",
        cfg.param_cap
    )))
}

/// RNG stream for graph `index` of a dataset seeded with `seed`.
pub fn graph_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// An instantiated graph: the executable network plus, for every parameter
/// tensor, the graph node that owns it.
pub struct NetworkInstance<T: Real> {
    pub net: Network<T>,
    /// param_nodes[i] = graph node owning net.params[i].
    pub param_nodes: Vec<usize>,
}

/// Build the executable network for a graph. Provided parameters are
/// validated against the expected shapes; missing ones are drawn with the
/// fan-in-scaled normal rule (biases zero, batch norm at identity).
pub fn instantiate<T: Real, R: Rng>(
    g: &ArchGraph,
    params: Option<Vec<Tensor<T>>>,
    rng: &mut R,
) -> Result<NetworkInstance<T>> {
    let mut inst = build_instance(g)?;
    match params {
        Some(p) => inst.net.set_params(p)?,
        None => inst.net.initialize_all(Initializer::HeNorm, rng)?,
    }
    Ok(inst)
}

/// Structure-only instantiation: the network with all parameters at zero,
/// plus the parameter-to-node map. Callers fill parameters themselves.
pub fn build_instance<T: Real>(g: &ArchGraph) -> Result<NetworkInstance<T>> {
    g.validate()?;
    let producers = g.producers();
    let mut b = NetBuilder::<T>::new(IMAGE_CHANNELS);
    let mut built: Vec<usize> = Vec::with_capacity(g.nodes.len());
    let mut param_nodes = Vec::new();

    for (id, node) in g.nodes.iter().enumerate() {
        let inputs: Vec<usize> = producers[id].iter().map(|&p| built[p]).collect();
        let single_or_concat = |b: &mut NetBuilder<T>, inputs: &[usize]| -> usize {
            if inputs.len() == 1 {
                inputs[0]
            } else {
                b.concat(inputs)
            }
        };
        let before = b.num_params();
        let out = match node.kind {
            OpKind::Stem => b.conv(0, node.channels, node.kernel, node.stride, 1, 1, true),
            OpKind::Conv | OpKind::DilatedConv => {
                let inp = single_or_concat(&mut b, &inputs);
                let dilation = if node.kind == OpKind::DilatedConv { 2 } else { 1 };
                b.conv(inp, node.channels, node.kernel, node.stride, dilation, 1, true)
            }
            OpKind::SeparableConv => {
                let inp = single_or_concat(&mut b, &inputs);
                let c_in = b.channels_of(inp);
                let dw = b.conv(inp, c_in, node.kernel, node.stride, 1, c_in, false);
                b.conv(dw, node.channels, 1, 1, 1, 1, true)
            }
            OpKind::MaxPool => {
                let inp = single_or_concat(&mut b, &inputs);
                b.max_pool(inp, node.kernel, node.stride, (node.kernel - 1) / 2)
            }
            OpKind::AvgPool => {
                let inp = single_or_concat(&mut b, &inputs);
                b.avg_pool(inp, node.kernel, node.stride, (node.kernel - 1) / 2)
            }
            OpKind::Skip => {
                if inputs.len() == 1 {
                    if node.stride == 1 {
                        inputs[0]
                    } else {
                        // Parameter-free spatial reduction.
                        b.avg_pool(inputs[0], 1, node.stride, 0)
                    }
                } else {
                    b.add(&inputs)
                }
            }
            OpKind::BatchNorm => b.batch_norm(inputs[0]),
            OpKind::Relu => b.relu(inputs[0]),
            OpKind::Dense => {
                let inp = single_or_concat(&mut b, &inputs);
                b.dense(inp, node.channels)
            }
            OpKind::Head => {
                let inp = single_or_concat(&mut b, &inputs);
                let gap = b.global_avg_pool(inp);
                b.dense(gap, node.channels)
            }
        };
        for _ in before..b.num_params() {
            param_nodes.push(id);
        }
        built.push(out);
    }

    let num_classes = g.nodes.last().expect("validated").channels;
    let net = b.finish(num_classes);
    Ok(NetworkInstance { net, param_nodes })
}

/// One power-of-two histogram bin over exact parameter counts; `hi` is
/// exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

fn param_histogram(graphs: &[ArchGraph]) -> Vec<ParamBin> {
    let mut bins: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for g in graphs {
        let mut lo = 1usize;
        while lo * 2 <= g.param_count {
            lo *= 2;
        }
        *bins.entry(lo).or_default() += 1;
    }
    bins.into_iter().map(|(lo, count)| ParamBin { lo, hi: lo * 2, count }).collect()
}

/// Per-split statistics recorded in the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: SplitTag,
    pub file: String,
    pub count: usize,
    pub seed: u64,
    pub bn_prob: f64,
    pub min_params: usize,
    pub max_params: usize,
    pub mean_params: f64,
    pub mean_cells: f64,
    pub mean_channels: f64,
    pub bn_nodes: usize,
    /// Parameter-count histogram in doubling bins, occupied bins only.
    pub param_histogram: Vec<ParamBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: u32,
    pub param_cap: usize,
    pub splits: Vec<SplitStats>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }
}

/// Sample `count` graphs for one split configuration, fanned out over
/// per-index RNG streams.
pub fn sample_split(cfg: &SamplerConfig, count: usize) -> Result<Vec<ArchGraph>> {
    cfg.validate()?;
    let results = crate::parallel::map_collect(count, |i| {
        let mut rng = graph_rng(cfg.seed, i as u64);
        sample_graph(cfg, i as u64, &mut rng)
    });
    results.into_iter().collect()
}

/// Generate JSON-lines files plus a manifest for each (config, size) pair.
pub fn generate_dataset(specs: &[(SamplerConfig, usize)], dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    let mut cap = 0usize;
    for (cfg, count) in specs {
        let graphs = sample_split(cfg, *count)?;
        let file = format!("{}.jsonl", cfg.split.file_stem());
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(&file))?);
        for g in &graphs {
            serde_json::to_writer(&mut f, g)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        cap = cap.max(cfg.param_cap);
        let n = graphs.len().max(1) as f64;
        let bn_nodes =
            graphs.iter().map(|g| g.nodes.iter().filter(|o| o.kind == OpKind::BatchNorm).count()).sum();
        splits.push(SplitStats {
            split: cfg.split,
            file,
            count: graphs.len(),
            seed: cfg.seed,
            bn_prob: cfg.bn_prob,
            min_params: graphs.iter().map(|g| g.param_count).min().unwrap_or(0),
            max_params: graphs.iter().map(|g| g.param_count).max().unwrap_or(0),
            mean_params: graphs.iter().map(|g| g.param_count as f64).sum::<f64>() / n,
            mean_cells: graphs.iter().map(|g| g.cells as f64).sum::<f64>() / n,
            mean_channels: graphs.iter().map(|g| g.channels as f64).sum::<f64>() / n,
            bn_nodes,
            param_histogram: param_histogram(&graphs),
        });
    }
    let manifest = DatasetManifest { schema: GRAPH_SCHEMA, param_cap: cap, splits };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Read a JSON-lines graph file.
pub fn load_graphs(path: &Path) -> Result<Vec<ArchGraph>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut graphs = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g: ArchGraph = serde_json::from_str(&line)?;
        if g.schema != GRAPH_SCHEMA {
            return Err(Error::data(format!("graph schema {} unsupported (want {GRAPH_SCHEMA})", g.schema)));
        }
        g.validate()?;
        graphs.push(g);
    }
    Ok(graphs)
}
