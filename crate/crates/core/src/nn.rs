//! HCNet and HRNet message passing with hand-written reverse-mode gradients.
//!
//! One layer computes, for every node `v`,
//!
//! ```text
//! m_{e,i} = g_ρ(e) ⊙ ⊙_{j≠i} (α h_{e(j)} + (1 − α) p_j)
//! h'_v    = ReLU(norm(W [h_v ‖ Σ_{(e,i)∈E(v)} m_{e,i}] + b)) (+ h_v)
//! ```
//!
//! where `g_r = W_r z_q` (query dependent) or a free vector `w_r`. HCNet
//! starts from the query-conditioned initialisation and scores candidates
//! with a unary decoder; HRNet starts from all-ones features and scores a
//! completed fact with a k-ary decoder.
//!
//! Per-node messages are summed in lexicographic order, so nodes receiving
//! the same multiset of messages get bitwise identical features.

use std::cmp::Ordering;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypergraph::{GraphError, HypergraphView, NodeId, Query, RelationalHypergraph};
use crate::refine::{feature_partition, Color};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("one-hot encoding of position {position} needs width >= {position}, got {dim}")]
    DimensionTooSmall { position: usize, dim: usize },
    #[error("sinusoidal encoding needs an even width, got {0}")]
    OddDimension(usize),
    #[error("positions are 1-based, got {0}")]
    InvalidPosition(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("query has {found} entries but relation arity is {expected}")]
    QueryArityMismatch { expected: usize, found: usize },
    #[error("parameters changed since the forward pass was recorded")]
    StaleTrace,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Hcnet,
    Hrnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeKind {
    Sinusoidal,
    OneHot,
    Constant,
    Learnable,
}

/// Which terms the HCNet initialisation places on the given nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitVariant {
    /// `p_i + z_q`
    PosQuery,
    /// `p_i`
    PosOnly,
    /// `z_q`
    QueryOnly,
    /// the all-ones vector
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageMode {
    /// `g_r = W_r z_q`
    QueryDependent,
    /// `g_r = w_r`
    QueryIndependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dim: usize,
    pub layers: usize,
    pub num_relations: usize,
    /// Largest relation arity the model will see, query relations included.
    pub max_arity: usize,
    pub pe: PeKind,
    pub init: InitVariant,
    pub message: MessageMode,
    pub layer_norm: bool,
    pub skip: bool,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn hcnet(num_relations: usize, max_arity: usize, dim: usize, layers: usize) -> Self {
        Self {
            kind: ModelKind::Hcnet,
            dim,
            layers,
            num_relations,
            max_arity,
            pe: PeKind::Sinusoidal,
            init: InitVariant::PosQuery,
            message: MessageMode::QueryDependent,
            layer_norm: true,
            skip: true,
            dropout: 0.0,
        }
    }

    pub fn hrnet(num_relations: usize, max_arity: usize, dim: usize, layers: usize) -> Self {
        Self {
            kind: ModelKind::Hrnet,
            message: MessageMode::QueryIndependent,
            ..Self::hcnet(num_relations, max_arity, dim, layers)
        }
    }

    /// The plain update without normalisation, skip connection or dropout.
    pub fn bare(mut self) -> Self {
        self.layer_norm = false;
        self.skip = false;
        self.dropout = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_relations == 0 || self.max_arity == 0 {
            return Err(NnError::InvalidConfig(
                "dim, num_relations and max_arity must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::InvalidConfig(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.kind == ModelKind::Hrnet && self.message == MessageMode::QueryDependent {
            return Err(NnError::InvalidConfig(
                "HRNet messages cannot depend on the query".into(),
            ));
        }
        match self.pe {
            PeKind::Sinusoidal if self.dim % 2 == 1 => Err(NnError::OddDimension(self.dim)),
            PeKind::OneHot if self.dim < self.max_arity => Err(NnError::DimensionTooSmall {
                position: self.max_arity,
                dim: self.dim,
            }),
            _ => Ok(()),
        }
    }

    fn decoder_input(&self) -> usize {
        match self.kind {
            ModelKind::Hcnet => 2 * self.dim,
            ModelKind::Hrnet => (self.max_arity + 1) * self.dim,
        }
    }

    fn rel_width(&self) -> usize {
        match self.message {
            MessageMode::QueryDependent => self.dim * self.dim,
            MessageMode::QueryIndependent => self.dim,
        }
    }
}

/// Encoding of 1-based position `i`. Learnable encodings live in
/// [`ModelParams::positional`] and have no closed form.
pub fn positional_encoding(kind: PeKind, i: usize, d: usize) -> Result<Vec<f64>> {
    match kind {
        PeKind::Sinusoidal => {
            if d % 2 == 1 {
                return Err(NnError::OddDimension(d));
            }
            let mut p = vec![0.0; d];
            for j in 0..d / 2 {
                let angle = i as f64 / 10000f64.powf(2.0 * j as f64 / d as f64);
                p[2 * j] = angle.sin();
                p[2 * j + 1] = angle.cos();
            }
            Ok(p)
        }
        PeKind::OneHot => {
            if i == 0 {
                return Err(NnError::InvalidPosition(0));
            }
            if i > d {
                return Err(NnError::DimensionTooSmall { position: i, dim: d });
            }
            let mut p = vec![0.0; d];
            p[i - 1] = 1.0;
            Ok(p)
        }
        PeKind::Constant => Ok(vec![1.0; d]),
        PeKind::Learnable => Err(NnError::InvalidConfig(
            "learnable encodings are rows of the parameter table".into(),
        )),
    }
}

/// Node features, one row of width `dim` per node.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_vec(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(NnError::ShapeMismatch(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, v: NodeId) -> &[f64] {
        &self.data[v * self.dim..(v + 1) * self.dim]
    }

    pub fn row_mut(&mut self, v: NodeId) -> &mut [f64] {
        &mut self.data[v * self.dim..(v + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Partition of the nodes by exact equality of their rows.
    pub fn partition(&self) -> Vec<Color> {
        feature_partition(&self.data, self.dim)
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows reordered so that row `perm[v]` of the result is row `v` here.
    pub fn permuted(&self, perm: &[NodeId]) -> Self {
        let mut out = Self::zeros(self.rows(), self.dim);
        for v in 0..self.rows() {
            out.row_mut(perm[v]).copy_from_slice(self.row(v));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `d x 2d`, row-major; the first `d` columns act on `h_v`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub alpha: f64,
    /// `W_r` stacked as `|R| x d x d`, or `w_r` stacked as `|R| x d`.
    pub rel: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

/// Two-layer MLP `w2 · ReLU(w1 x + b1) + b2` producing a logit.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// `d x input`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams>,
    /// Query vectors `z_q`, `|R| x d`.
    pub query: Vec<f64>,
    /// Positional table, row `i - 1` is `p_i`.
    pub positional: Vec<f64>,
    pub decoder: DecoderParams,
}

impl ModelParams {
    /// All-zero parameters (fixed positional encodings included), the shape
    /// used for gradients.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.dim;
        let layer = LayerParams {
            w: vec![0.0; 2 * d * d],
            b: vec![0.0; d],
            alpha: 0.0,
            rel: vec![0.0; config.num_relations * config.rel_width()],
            ln_gain: vec![0.0; d],
            ln_bias: vec![0.0; d],
        };
        Self {
            config: config.clone(),
            layers: vec![layer; config.layers],
            query: vec![0.0; config.num_relations * d],
            positional: vec![0.0; config.max_arity * d],
            decoder: DecoderParams {
                w1: vec![0.0; d * config.decoder_input()],
                b1: vec![0.0; d],
                w2: vec![0.0; d],
                b2: 0.0,
            },
        }
    }

    /// Default initialisation: matrices and relation vectors uniform in
    /// `±1/√d`, biases zero, `α = 0.5`, unit layer-norm gains, query vectors
    /// standard normal scaled by `1/√d`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::gen::rng(seed);
        let mut p = Self::zeros(config);
        let d = config.dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut uniform = |xs: &mut [f64]| {
            for x in xs {
                *x = rng.gen_range(-bound..bound);
            }
        };
        for layer in &mut p.layers {
            uniform(&mut layer.w);
            uniform(&mut layer.rel);
            layer.alpha = 0.5;
            layer.ln_gain.fill(1.0);
        }
        uniform(&mut p.decoder.w1);
        uniform(&mut p.decoder.w2);
        if config.pe == PeKind::Learnable {
            uniform(&mut p.positional);
        }
        for z in &mut p.query {
            *z = rng.sample::<f64, _>(StandardNormal) * bound;
        }
        p.fill_fixed_positional()?;
        Ok(p)
    }

    fn fill_fixed_positional(&mut self) -> Result<()> {
        if self.config.pe == PeKind::Learnable {
            return Ok(());
        }
        let d = self.config.dim;
        for i in 1..=self.config.max_arity {
            let row = positional_encoding(self.config.pe, i, d)?;
            self.positional[(i - 1) * d..i * d].copy_from_slice(&row);
        }
        Ok(())
    }

    /// Every trainable entry uniform in `(-scale, scale)` and `α` uniform in
    /// `(0, 1)`. Used to probe the model away from the default initialisation.
    pub fn randomize(&mut self, rng: &mut impl Rng, scale: f64) {
        for (name, t) in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = if name.ends_with(".alpha") {
                    rng.gen_range(0.0..1.0)
                } else {
                    rng.gen_range(-scale..scale)
                };
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn query_vector(&self, r: usize) -> &[f64] {
        let d = self.config.dim;
        &self.query[r * d..(r + 1) * d]
    }

    /// `p_i` for 1-based `i`.
    pub fn position(&self, i: usize) -> &[f64] {
        let d = self.config.dim;
        &self.positional[(i - 1) * d..i * d]
    }

    /// Names and shapes of the trainable tensors, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        let d = c.dim;
        let mut out = Vec::new();
        for l in 0..c.layers {
            out.push((format!("layer{l}.w"), vec![d, 2 * d]));
            out.push((format!("layer{l}.b"), vec![d]));
            out.push((format!("layer{l}.alpha"), vec![1]));
            let rel = match c.message {
                MessageMode::QueryDependent => vec![c.num_relations, d, d],
                MessageMode::QueryIndependent => vec![c.num_relations, d],
            };
            out.push((format!("layer{l}.rel"), rel));
            if c.layer_norm {
                out.push((format!("layer{l}.ln_gain"), vec![d]));
                out.push((format!("layer{l}.ln_bias"), vec![d]));
            }
        }
        out.push(("query".into(), vec![c.num_relations, d]));
        if c.pe == PeKind::Learnable {
            out.push(("positional".into(), vec![c.max_arity, d]));
        }
        out.push(("decoder.w1".into(), vec![d, c.decoder_input()]));
        out.push(("decoder.b1".into(), vec![d]));
        out.push(("decoder.w2".into(), vec![d]));
        out.push(("decoder.b2".into(), vec![1]));
        out
    }

    /// Trainable tensors in the order of [`Self::tensor_shapes`].
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let c = &self.config;
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.w"), &layer.w));
            out.push((format!("layer{l}.b"), &layer.b));
            out.push((format!("layer{l}.alpha"), std::slice::from_ref(&layer.alpha)));
            out.push((format!("layer{l}.rel"), &layer.rel));
            if c.layer_norm {
                out.push((format!("layer{l}.ln_gain"), &layer.ln_gain));
                out.push((format!("layer{l}.ln_bias"), &layer.ln_bias));
            }
        }
        out.push(("query".into(), &self.query));
        if c.pe == PeKind::Learnable {
            out.push(("positional".into(), &self.positional));
        }
        out.push(("decoder.w1".into(), &self.decoder.w1));
        out.push(("decoder.b1".into(), &self.decoder.b1));
        out.push(("decoder.w2".into(), &self.decoder.w2));
        out.push(("decoder.b2".into(), std::slice::from_ref(&self.decoder.b2)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let layer_norm = self.config.layer_norm;
        let learnable = self.config.pe == PeKind::Learnable;
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let LayerParams {
                w,
                b,
                alpha,
                rel,
                ln_gain,
                ln_bias,
            } = layer;
            out.push((format!("layer{l}.w"), w));
            out.push((format!("layer{l}.b"), b));
            out.push((format!("layer{l}.alpha"), std::slice::from_mut(alpha)));
            out.push((format!("layer{l}.rel"), rel));
            if layer_norm {
                out.push((format!("layer{l}.ln_gain"), ln_gain));
                out.push((format!("layer{l}.ln_bias"), ln_bias));
            }
        }
        out.push(("query".into(), &mut self.query));
        if learnable {
            out.push(("positional".into(), &mut self.positional));
        }
        let DecoderParams { w1, b1, w2, b2 } = &mut self.decoder;
        out.push(("decoder.w1".into(), w1));
        out.push(("decoder.b1".into(), b1));
        out.push(("decoder.w2".into(), w2));
        out.push(("decoder.b2".into(), std::slice::from_mut(b2)));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other` over the trainable tensors.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Hash of the configuration and every parameter value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        serde_json::to_string(&self.config)
            .expect("config serialises")
            .hash(&mut h);
        for (_, t) in self.tensors() {
            for x in t {
                x.to_bits().hash(&mut h);
            }
        }
        for x in &self.positional {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

fn check_graph(params: &ModelParams, graph: &RelationalHypergraph) -> Result<()> {
    let c = &params.config;
    if graph.relations().len() > c.num_relations {
        return Err(NnError::ShapeMismatch(format!(
            "graph has {} relations, model has {}",
            graph.relations().len(),
            c.num_relations
        )));
    }
    if graph.max_arity() > c.max_arity {
        return Err(NnError::ShapeMismatch(format!(
            "graph arity {} exceeds model arity {}",
            graph.max_arity(),
            c.max_arity
        )));
    }
    Ok(())
}

fn check_query(params: &ModelParams, graph: &RelationalHypergraph, query: &Query) -> Result<()> {
    if query.relation >= graph.relations().len() {
        return Err(GraphError::UnknownRelation {
            edge: 0,
            relation: query.relation,
        }
        .into());
    }
    let arity = graph.relation(query.relation).arity;
    if query.arity() != arity {
        return Err(NnError::QueryArityMismatch {
            expected: arity,
            found: query.arity(),
        });
    }
    if arity > params.config.max_arity {
        return Err(NnError::ShapeMismatch(format!(
            "query arity {arity} exceeds model arity {}",
            params.config.max_arity
        )));
    }
    graph.validate_query(query)?;
    Ok(())
}

/// Query-conditioned initial features `Σ_{i≠t} 1[v = u_i] (p_i + z_q)`, with
/// the terms selected by the configured [`InitVariant`].
pub fn hcnet_init(
    graph: &RelationalHypergraph,
    query: &Query,
    params: &ModelParams,
) -> Result<FeatureMap> {
    check_graph(params, graph)?;
    check_query(params, graph, query)?;
    let d = params.dim();
    let z = params.query_vector(query.relation);
    let mut h = FeatureMap::zeros(graph.node_count(), d);
    for (i, u) in query.given_positions() {
        let p = params.position(i);
        for (k, x) in h.row_mut(u).iter_mut().enumerate() {
            *x += match params.config.init {
                InitVariant::PosQuery => p[k] + z[k],
                InitVariant::PosOnly => p[k],
                InitVariant::QueryOnly => z[k],
                InitVariant::Ones => 1.0,
            };
        }
    }
    Ok(h)
}

/// Per-relation message gates `g_r` of one layer, `|R| x d`.
fn gates(params: &ModelParams, layer: usize, query: Option<&Query>) -> Result<Vec<f64>> {
    let c = &params.config;
    let d = c.dim;
    let lp = &params.layers[layer];
    match c.message {
        MessageMode::QueryIndependent => Ok(lp.rel.clone()),
        MessageMode::QueryDependent => {
            let q = query.ok_or_else(|| {
                NnError::InvalidConfig("query-dependent messages need a query".into())
            })?;
            let z = params.query_vector(q.relation);
            let mut g = vec![0.0; c.num_relations * d];
            for r in 0..c.num_relations {
                let wr = &lp.rel[r * d * d..(r + 1) * d * d];
                for a in 0..d {
                    g[r * d + a] = dot(&wr[a * d..(a + 1) * d], z);
                }
            }
            Ok(g)
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Offsets of each edge's first message in an edge-major message buffer.
fn message_offsets(graph: &RelationalHypergraph) -> Vec<usize> {
    let mut off = Vec::with_capacity(graph.edges().len() + 1);
    let mut acc = 0;
    for e in graph.edges() {
        off.push(acc);
        acc += e.arity();
    }
    off.push(acc);
    off
}

/// Inputs `x_j = α h_{e(j)} + (1 − α) p_j` of one edge, `k x d`.
fn edge_inputs(
    params: &ModelParams,
    alpha: f64,
    h: &FeatureMap,
    nodes: &[NodeId],
    x: &mut Vec<f64>,
) {
    let d = params.dim();
    x.clear();
    for (j, &u) in nodes.iter().enumerate() {
        let p = params.position(j + 1);
        x.extend(
            h.row(u)
                .iter()
                .zip(p)
                .map(|(hv, pv)| alpha * hv + (1.0 - alpha) * pv),
        );
    }
    debug_assert_eq!(x.len(), nodes.len() * d);
}

/// Fills `out[i]` with `⊙_{j≠i} x_j` for every `i`, via prefix and suffix
/// products. An arity-one edge gets the all-ones vector.
fn leave_one_out(x: &[f64], k: usize, d: usize, out: &mut Vec<f64>, scratch: &mut Vec<f64>) {
    out.clear();
    out.resize(k * d, 1.0);
    // Prefix products into `out`.
    for i in 1..k {
        for a in 0..d {
            out[i * d + a] = out[(i - 1) * d + a] * x[(i - 1) * d + a];
        }
    }
    scratch.clear();
    scratch.resize(d, 1.0);
    for i in (0..k).rev() {
        for a in 0..d {
            out[i * d + a] *= scratch[a];
            scratch[a] *= x[i * d + a];
        }
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    Ordering::Equal
}

#[derive(Debug, Clone, PartialEq)]
struct LayerTrace {
    gates: Vec<f64>,
    agg: Vec<f64>,
    /// Normalised pre-activation, or the raw pre-activation without norm.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Input to the ReLU.
    act_in: Vec<f64>,
    mask: Option<Vec<f64>>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    fingerprint: u64,
    query: Option<Query>,
    /// Feature maps `h⁰ .. h^L`.
    pub features: Vec<FeatureMap>,
    layers: Vec<LayerTrace>,
    /// Messages generated from each edge id, summed over layers. Masked
    /// edges generate none.
    pub messages_per_edge: Vec<usize>,
}

impl ForwardTrace {
    pub fn final_features(&self) -> &FeatureMap {
        self.features.last().expect("trace holds the initial features")
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    pub fn query(&self) -> Option<&Query> {
        self.query.as_ref()
    }

    /// Recomputes the forward pass with the recorded dropout masks and
    /// reports whether every stored feature map is reproduced bitwise.
    pub fn replay<G: HypergraphView>(&self, view: &G, params: &ModelParams) -> Result<bool> {
        if params.fingerprint() != self.fingerprint {
            return Err(NnError::StaleTrace);
        }
        let mut h = self.features[0].clone();
        for (l, lt) in self.layers.iter().enumerate() {
            let mut counts = vec![0; view.graph().edges().len()];
            let (next, _) = layer_forward::<_, rand_chacha::ChaCha8Rng>(
                view,
                params,
                l,
                self.query.as_ref(),
                &h,
                DropoutSource::Replay(lt.mask.as_deref()),
                &mut counts,
            )?;
            if next.data.iter().map(|x| x.to_bits()).ne(self.features[l + 1]
                .data
                .iter()
                .map(|x| x.to_bits()))
            {
                return Ok(false);
            }
            h = next;
        }
        Ok(true)
    }
}

enum DropoutSource<'a, R> {
    Off,
    Sample(&'a mut R),
    Replay(Option<&'a [f64]>),
}

fn layer_forward<G: HypergraphView, R: Rng>(
    view: &G,
    params: &ModelParams,
    layer: usize,
    query: Option<&Query>,
    h: &FeatureMap,
    dropout: DropoutSource<'_, R>,
    counts: &mut [usize],
) -> Result<(FeatureMap, LayerTrace)> {
    let graph = view.graph();
    let c = &params.config;
    let d = c.dim;
    let n = graph.node_count();
    if h.rows() != n || h.dim() != d {
        return Err(NnError::ShapeMismatch(format!(
            "features are {}x{}, expected {n}x{d}",
            h.rows(),
            h.dim()
        )));
    }
    let lp = &params.layers[layer];
    let g = gates(params, layer, query)?;
    let offsets = message_offsets(graph);
    let mut msg = vec![0.0; offsets[graph.edges().len()] * d];
    let (mut x, mut loo, mut scratch) = (Vec::new(), Vec::new(), Vec::new());
    for (e, edge) in graph.edges().iter().enumerate() {
        if !view.is_active(e) {
            continue;
        }
        let k = edge.arity();
        edge_inputs(params, lp.alpha, h, &edge.nodes, &mut x);
        leave_one_out(&x, k, d, &mut loo, &mut scratch);
        let gr = &g[edge.relation * d..(edge.relation + 1) * d];
        let out = &mut msg[offsets[e] * d..(offsets[e] + k) * d];
        for i in 0..k {
            for a in 0..d {
                out[i * d + a] = gr[a] * loo[i * d + a];
            }
        }
        counts[e] += k;
    }

    let mut agg = vec![0.0; n * d];
    agg.par_chunks_mut(d).enumerate().for_each(|(v, out)| {
        let mut ids: Vec<usize> = view
            .active_incidence(v)
            .map(|(e, i)| offsets[e] + i - 1)
            .collect();
        ids.sort_by(|&a, &b| lex_cmp(&msg[a * d..(a + 1) * d], &msg[b * d..(b + 1) * d]));
        for id in ids {
            for (o, m) in out.iter_mut().zip(&msg[id * d..(id + 1) * d]) {
                *o += m;
            }
        }
    });

    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![1.0; n];
    xhat.par_chunks_mut(d)
        .zip(inv_std.par_iter_mut())
        .enumerate()
        .for_each(|(v, (out, istd))| {
            let hv = h.row(v);
            let av = &agg[v * d..(v + 1) * d];
            for a in 0..d {
                let row = &lp.w[a * 2 * d..(a + 1) * 2 * d];
                out[a] = dot(&row[..d], hv) + dot(&row[d..], av) + lp.b[a];
            }
            if c.layer_norm {
                let mean = out.iter().sum::<f64>() / d as f64;
                let var = out.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / d as f64;
                *istd = 1.0 / (var + LN_EPS).sqrt();
                out.iter_mut().for_each(|u| *u = (*u - mean) * *istd);
            }
        });

    let mut act_in = xhat.clone();
    if c.layer_norm {
        for row in act_in.chunks_mut(d) {
            for a in 0..d {
                row[a] = lp.ln_gain[a] * row[a] + lp.ln_bias[a];
            }
        }
    }
    let mask = match dropout {
        DropoutSource::Off => None,
        DropoutSource::Replay(m) => m.map(<[f64]>::to_vec),
        DropoutSource::Sample(rng) => (c.dropout > 0.0).then(|| {
            let keep = 1.0 / (1.0 - c.dropout);
            (0..n * d)
                .map(|_| if rng.gen::<f64>() < c.dropout { 0.0 } else { keep })
                .collect()
        }),
    };
    if let Some(m) = &mask {
        act_in.iter_mut().zip(m).for_each(|(a, k)| *a *= k);
    }
    let mut out = FeatureMap::zeros(n, d);
    for (idx, o) in out.data.iter_mut().enumerate() {
        *o = act_in[idx].max(0.0);
        if c.skip {
            *o += h.data[idx];
        }
    }
    Ok((
        out,
        LayerTrace {
            gates: g,
            agg,
            xhat,
            inv_std,
            act_in,
            mask,
        },
    ))
}

/// One message passing layer. `query` is required in query-dependent mode.
pub fn hcnet_layer<G: HypergraphView>(
    view: &G,
    query: Option<&Query>,
    h: &FeatureMap,
    params: &ModelParams,
    layer: usize,
) -> Result<FeatureMap> {
    if layer >= params.layers.len() {
        return Err(NnError::ShapeMismatch(format!(
            "layer {layer} of a {}-layer model",
            params.layers.len()
        )));
    }
    check_graph(params, view.graph())?;
    let mut counts = vec![0; view.graph().edges().len()];
    let (out, _) = layer_forward::<_, rand_chacha::ChaCha8Rng>(
        view,
        params,
        layer,
        query,
        h,
        DropoutSource::Off,
        &mut counts,
    )?;
    Ok(out)
}

/// Initial features for either model: query conditioned for HCNet, all ones
/// for HRNet.
pub fn initial_features(
    graph: &RelationalHypergraph,
    query: Option<&Query>,
    params: &ModelParams,
) -> Result<FeatureMap> {
    match params.config.kind {
        ModelKind::Hcnet => {
            let q = query.ok_or_else(|| NnError::InvalidConfig("HCNet needs a query".into()))?;
            hcnet_init(graph, q, params)
        }
        ModelKind::Hrnet => {
            check_graph(params, graph)?;
            Ok(FeatureMap {
                dim: params.dim(),
                data: vec![1.0; graph.node_count() * params.dim()],
            })
        }
    }
}

/// Runs `layers` layers from the model's initialisation. Dropout is applied
/// only when `rng` is given and the configured rate is positive.
pub fn forward<G: HypergraphView, R: Rng>(
    view: &G,
    query: Option<&Query>,
    params: &ModelParams,
    layers: usize,
    rng: Option<&mut R>,
) -> Result<ForwardTrace> {
    if layers > params.layers.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{layers} layers requested from a {}-layer model",
            params.layers.len()
        )));
    }
    let graph = view.graph();
    if let Some(q) = query {
        check_query(params, graph, q)?;
    }
    let mut features = vec![initial_features(graph, query, params)?];
    let mut traces = Vec::with_capacity(layers);
    let mut counts = vec![0; graph.edges().len()];
    let mut rng = rng;
    for l in 0..layers {
        let source = match rng.as_deref_mut() {
            Some(r) => DropoutSource::Sample(r),
            None => DropoutSource::Off,
        };
        let (next, lt) = layer_forward(
            view,
            params,
            l,
            query,
            features.last().expect("nonempty"),
            source,
            &mut counts,
        )?;
        features.push(next);
        traces.push(lt);
    }
    Ok(ForwardTrace {
        fingerprint: params.fingerprint(),
        query: query.cloned(),
        features,
        layers: traces,
        messages_per_edge: counts,
    })
}

/// HCNet features after `layers` layers, without dropout.
pub fn hcnet_forward<G: HypergraphView>(
    view: &G,
    query: &Query,
    params: &ModelParams,
    layers: usize,
) -> Result<(FeatureMap, ForwardTrace)> {
    if params.config.kind != ModelKind::Hcnet {
        return Err(NnError::InvalidConfig("parameters are not an HCNet".into()));
    }
    let trace = forward::<_, rand_chacha::ChaCha8Rng>(view, Some(query), params, layers, None)?;
    Ok((trace.final_features().clone(), trace))
}

/// HRNet features after `layers` layers, without dropout.
pub fn hrnet_forward<G: HypergraphView>(
    view: &G,
    params: &ModelParams,
    layers: usize,
) -> Result<(FeatureMap, ForwardTrace)> {
    if params.config.kind != ModelKind::Hrnet {
        return Err(NnError::InvalidConfig("parameters are not an HRNet".into()));
    }
    let trace = forward::<_, rand_chacha::ChaCha8Rng>(view, None, params, layers, None)?;
    Ok((trace.final_features().clone(), trace))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn decoder_logit(dec: &DecoderParams, input: &[f64], hidden: &mut [f64]) -> f64 {
    let width = input.len();
    for (a, hd) in hidden.iter_mut().enumerate() {
        *hd = (dot(&dec.w1[a * width..(a + 1) * width], input) + dec.b1[a]).max(0.0);
    }
    dot(&dec.w2, hidden) + dec.b2
}

fn check_decoder(dec: &DecoderParams, width: usize) -> Result<()> {
    let hidden = dec.b1.len();
    if dec.w1.len() != hidden * width || dec.w2.len() != hidden {
        return Err(NnError::ShapeMismatch(format!(
            "decoder expects {} inputs, got {width}",
            dec.w1.len() / hidden.max(1)
        )));
    }
    Ok(())
}

/// `σ(MLP([h_v ‖ z_q]))`.
pub fn decode_unary(h_v: &[f64], z_q: &[f64], dec: &DecoderParams) -> Result<f64> {
    let input: Vec<f64> = h_v.iter().chain(z_q).copied().collect();
    check_decoder(dec, input.len())?;
    let mut hidden = vec![0.0; dec.b1.len()];
    Ok(sigmoid(decoder_logit(dec, &input, &mut hidden)))
}

/// `σ(MLP([h_{u_1} ‖ … ‖ h_{u_k} ‖ 0 … ‖ z_q]))`, the node slots padded with
/// zeros up to `max_arity`.
pub fn decode_kary(
    hs: &[&[f64]],
    z_q: &[f64],
    dec: &DecoderParams,
    max_arity: usize,
) -> Result<f64> {
    let d = z_q.len();
    if hs.len() > max_arity || hs.iter().any(|h| h.len() != d) {
        return Err(NnError::ShapeMismatch(format!(
            "{} node features for a decoder of arity {max_arity}",
            hs.len()
        )));
    }
    let input = kary_input(hs.iter().copied(), z_q, max_arity);
    check_decoder(dec, input.len())?;
    let mut hidden = vec![0.0; dec.b1.len()];
    Ok(sigmoid(decoder_logit(dec, &input, &mut hidden)))
}

fn kary_input<'a>(
    hs: impl Iterator<Item = &'a [f64]>,
    z_q: &[f64],
    max_arity: usize,
) -> Vec<f64> {
    let d = z_q.len();
    let mut input = vec![0.0; (max_arity + 1) * d];
    for (j, h) in hs.enumerate() {
        input[j * d..(j + 1) * d].copy_from_slice(h);
    }
    input[max_arity * d..].copy_from_slice(z_q);
    input
}

fn decoder_input(params: &ModelParams, h: &FeatureMap, query: &Query, v: NodeId) -> Vec<f64> {
    let z = params.query_vector(query.relation);
    match params.config.kind {
        ModelKind::Hcnet => h.row(v).iter().chain(z).copied().collect(),
        ModelKind::Hrnet => {
            let fact = query.complete(v);
            kary_input(fact.nodes.iter().map(|&u| h.row(u)), z, params.config.max_arity)
        }
    }
}

/// Logit of every node as the answer to `query`, from final features `h`.
pub fn score_candidates(params: &ModelParams, h: &FeatureMap, query: &Query) -> Result<Vec<f64>> {
    if query.relation >= params.config.num_relations || query.arity() > params.config.max_arity {
        return Err(NnError::ShapeMismatch(
            "query outside the model's relations".into(),
        ));
    }
    let width = params.config.decoder_input();
    check_decoder(&params.decoder, width)?;
    Ok((0..h.rows())
        .into_par_iter()
        .map(|v| {
            let input = decoder_input(params, h, query, v);
            let mut hidden = vec![0.0; params.dim()];
            decoder_logit(&params.decoder, &input, &mut hidden)
        })
        .collect())
}

/// Adds decoder gradients for `dlogits` (pairs of candidate and
/// `∂loss/∂logit`) to `grads` and returns `∂loss/∂h^L`.
pub fn decoder_backward(
    params: &ModelParams,
    h: &FeatureMap,
    query: &Query,
    dlogits: &[(NodeId, f64)],
    grads: &mut ModelParams,
) -> Result<FeatureMap> {
    let d = params.dim();
    let width = params.config.decoder_input();
    let dec = &params.decoder;
    let mut dh = FeatureMap::zeros(h.rows(), d);
    let mut hidden = vec![0.0; d];
    let mut dx = vec![0.0; width];
    for &(v, s) in dlogits {
        if v >= h.rows() {
            return Err(GraphError::NodeIdOutOfRange(v).into());
        }
        if s == 0.0 {
            continue;
        }
        let input = decoder_input(params, h, query, v);
        decoder_logit(dec, &input, &mut hidden);
        grads.decoder.b2 += s;
        dx.fill(0.0);
        for a in 0..d {
            grads.decoder.w2[a] += s * hidden[a];
            if hidden[a] <= 0.0 {
                continue;
            }
            let dpre = s * dec.w2[a];
            grads.decoder.b1[a] += dpre;
            let row = &dec.w1[a * width..(a + 1) * width];
            let grow = &mut grads.decoder.w1[a * width..(a + 1) * width];
            for k in 0..width {
                grow[k] += dpre * input[k];
                dx[k] += dpre * row[k];
            }
        }
        let r = query.relation;
        match params.config.kind {
            ModelKind::Hcnet => {
                dh.row_mut(v)
                    .iter_mut()
                    .zip(&dx[..d])
                    .for_each(|(g, x)| *g += x);
                add_into(&mut grads.query[r * d..(r + 1) * d], &dx[d..]);
            }
            ModelKind::Hrnet => {
                let fact = query.complete(v);
                for (j, &u) in fact.nodes.iter().enumerate() {
                    let slot = &dx[j * d..(j + 1) * d];
                    dh.row_mut(u).iter_mut().zip(slot).for_each(|(g, x)| *g += x);
                }
                let m = params.config.max_arity;
                add_into(&mut grads.query[r * d..(r + 1) * d], &dx[m * d..]);
            }
        }
    }
    Ok(dh)
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

/// Backpropagates `∂loss/∂h^L` through every recorded layer and the
/// initialisation, adding parameter gradients to `grads`.
pub fn layers_backward<G: HypergraphView>(
    params: &ModelParams,
    view: &G,
    trace: &ForwardTrace,
    dfinal: FeatureMap,
    grads: &mut ModelParams,
) -> Result<()> {
    if params.fingerprint() != trace.fingerprint {
        return Err(NnError::StaleTrace);
    }
    let graph = view.graph();
    if trace.features[0].rows() != graph.node_count() || dfinal.rows() != graph.node_count() {
        return Err(NnError::ShapeMismatch(
            "trace was recorded on a different graph".into(),
        ));
    }
    let c = &params.config;
    let d = c.dim;
    let n = graph.node_count();
    let mut dh = dfinal.data;
    for l in (0..trace.layers.len()).rev() {
        let lt = &trace.layers[l];
        let lp = &params.layers[l];
        let h = &trace.features[l];
        let mut dprev = if c.skip { dh.clone() } else { vec![0.0; n * d] };
        let mut dagg = vec![0.0; n * d];
        let gl = &mut grads.layers[l];
        let mut dpre = vec![0.0; d];
        for v in 0..n {
            let base = v * d;
            // ReLU, dropout, then the layer norm affine.
            let mut dy = vec![0.0; d];
            for a in 0..d {
                let mut g = if lt.act_in[base + a] > 0.0 { dh[base + a] } else { 0.0 };
                if let Some(m) = &lt.mask {
                    g *= m[base + a];
                }
                dy[a] = g;
            }
            if c.layer_norm {
                let xh = &lt.xhat[base..base + d];
                let mut dxh = vec![0.0; d];
                for a in 0..d {
                    gl.ln_gain[a] += dy[a] * xh[a];
                    gl.ln_bias[a] += dy[a];
                    dxh[a] = dy[a] * lp.ln_gain[a];
                }
                let mean_d = dxh.iter().sum::<f64>() / d as f64;
                let mean_dx = dxh.iter().zip(xh).map(|(g, x)| g * x).sum::<f64>() / d as f64;
                for a in 0..d {
                    dpre[a] = lt.inv_std[v] * (dxh[a] - mean_d - xh[a] * mean_dx);
                }
            } else {
                dpre.copy_from_slice(&dy);
            }
            let hv = h.row(v);
            let av = &lt.agg[base..base + d];
            for a in 0..d {
                let g = dpre[a];
                if g == 0.0 {
                    continue;
                }
                gl.b[a] += g;
                let row = &lp.w[a * 2 * d..(a + 1) * 2 * d];
                let grow = &mut gl.w[a * 2 * d..(a + 1) * 2 * d];
                for k in 0..d {
                    grow[k] += g * hv[k];
                    grow[d + k] += g * av[k];
                    dprev[base + k] += g * row[k];
                    dagg[base + k] += g * row[d + k];
                }
            }
        }

        // Messages.
        let mut dgates = vec![0.0; c.num_relations * d];
        let (mut x, mut loo, mut scratch) = (Vec::new(), Vec::new(), Vec::new());
        let mut dprod = Vec::new();
        let mut dx = Vec::new();
        let mut rest = Vec::new();
        let mut rest_loo = Vec::new();
        for (e, edge) in graph.edges().iter().enumerate() {
            if !view.is_active(e) {
                continue;
            }
            let k = edge.arity();
            let r = edge.relation;
            let gr = &lt.gates[r * d..(r + 1) * d];
            edge_inputs(params, lp.alpha, h, &edge.nodes, &mut x);
            leave_one_out(&x, k, d, &mut loo, &mut scratch);
            dprod.clear();
            dprod.resize(k * d, 0.0);
            for (i, &v) in edge.nodes.iter().enumerate() {
                let dm = &dagg[v * d..(v + 1) * d];
                for a in 0..d {
                    dgates[r * d + a] += dm[a] * loo[i * d + a];
                    dprod[i * d + a] = dm[a] * gr[a];
                }
            }
            // dx_j = Σ_{i≠j} dprod_i ⊙ ⊙_{m∉{i,j}} x_m
            dx.clear();
            dx.resize(k * d, 0.0);
            for i in 0..k {
                rest.clear();
                for j in (0..k).filter(|&j| j != i) {
                    rest.extend_from_slice(&x[j * d..(j + 1) * d]);
                }
                leave_one_out(&rest, k - 1, d, &mut rest_loo, &mut scratch);
                for (slot, j) in (0..k).filter(|&j| j != i).enumerate() {
                    for a in 0..d {
                        dx[j * d + a] += dprod[i * d + a] * rest_loo[slot * d + a];
                    }
                }
            }
            for (j, &u) in edge.nodes.iter().enumerate() {
                let p = params.position(j + 1);
                let hu = h.row(u);
                let gp = &mut grads.positional[j * d..(j + 1) * d];
                for a in 0..d {
                    let g = dx[j * d + a];
                    dprev[u * d + a] += lp.alpha * g;
                    grads.layers[l].alpha += g * (hu[a] - p[a]);
                    gp[a] += (1.0 - lp.alpha) * g;
                }
            }
        }
        match c.message {
            MessageMode::QueryIndependent => add_into(&mut grads.layers[l].rel, &dgates),
            MessageMode::QueryDependent => {
                let q = trace.query.as_ref().ok_or(NnError::StaleTrace)?;
                let qr = q.relation;
                let z = params.query_vector(qr).to_vec();
                for r in 0..c.num_relations {
                    let wr = &lp.rel[r * d * d..(r + 1) * d * d];
                    let gw = &mut grads.layers[l].rel[r * d * d..(r + 1) * d * d];
                    for a in 0..d {
                        let g = dgates[r * d + a];
                        if g == 0.0 {
                            continue;
                        }
                        for b in 0..d {
                            gw[a * d + b] += g * z[b];
                            grads.query[qr * d + b] += g * wr[a * d + b];
                        }
                    }
                }
            }
        }
        dh = dprev;
    }

    if c.kind == ModelKind::Hcnet {
        let q = trace.query.as_ref().ok_or(NnError::StaleTrace)?;
        let r = q.relation;
        for (i, u) in q.given_positions() {
            let g = &dh[u * d..(u + 1) * d];
            if matches!(c.init, InitVariant::PosQuery | InitVariant::PosOnly) {
                add_into(&mut grads.positional[(i - 1) * d..i * d], g);
            }
            if matches!(c.init, InitVariant::PosQuery | InitVariant::QueryOnly) {
                add_into(&mut grads.query[r * d..(r + 1) * d], g);
            }
        }
    }
    Ok(())
}

/// Gradients of a loss whose derivative with respect to the logit of each
/// listed candidate of `query` is given.
pub fn backward<G: HypergraphView>(
    params: &ModelParams,
    view: &G,
    trace: &ForwardTrace,
    query: &Query,
    dlogits: &[(NodeId, f64)],
) -> Result<ModelParams> {
    if params.fingerprint() != trace.fingerprint {
        return Err(NnError::StaleTrace);
    }
    if params.config.kind == ModelKind::Hcnet && trace.query.as_ref() != Some(query) {
        return Err(NnError::ShapeMismatch(
            "trace was recorded for a different query".into(),
        ));
    }
    let mut grads = ModelParams::zeros(&params.config);
    let dh = decoder_backward(params, trace.final_features(), query, dlogits, &mut grads)?;
    layers_backward(params, view, trace, dh, &mut grads)?;
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor holding the worst entry.
    pub worst_tensor: String,
    pub checked: usize,
}

/// `|a − b| / max(|a|, |b|, 1e-6)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares [`backward`] with central differences of the loss
/// `Σ_v c_v · logit_v` for fixed random coefficients `c`. At most
/// `per_tensor` entries of each tensor are probed (all when `None`).
pub fn grad_check<G: HypergraphView>(
    view: &G,
    query: &Query,
    params: &ModelParams,
    eps: f64,
    per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = crate::gen::rng(seed);
    let n = view.graph().node_count();
    let coeffs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let layers = params.layers.len();
    let hq = match params.config.kind {
        ModelKind::Hcnet => Some(query),
        ModelKind::Hrnet => None,
    };
    let loss = |p: &ModelParams| -> Result<f64> {
        let t = forward::<_, rand_chacha::ChaCha8Rng>(view, hq, p, layers, None)?;
        let s = score_candidates(p, t.final_features(), query)?;
        Ok(s.iter().zip(&coeffs).map(|(a, b)| a * b).sum())
    };
    let trace = forward::<_, rand_chacha::ChaCha8Rng>(view, hq, params, layers, None)?;
    let dl: Vec<(NodeId, f64)> = coeffs.iter().copied().enumerate().collect();
    let grads = backward(params, view, &trace, query, &dl)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        checked: 0,
    };
    let mut probe = params.clone();
    let analytic = grads.tensors();
    for (t, (name, values)) in params.tensors().iter().enumerate() {
        let len = values.len();
        let picks: Vec<usize> = match per_tensor {
            Some(m) if m < len => (0..m).map(|_| rng.gen_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for idx in picks {
            let orig = values[idx];
            probe.tensors_mut()[t].1[idx] = orig + eps;
            let up = loss(&probe)?;
            probe.tensors_mut()[t].1[idx] = orig - eps;
            let down = loss(&probe)?;
            probe.tensors_mut()[t].1[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[t].1[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_tensor = name.clone();
            }
        }
    }
    Ok(report)
}

/// Metadata stored next to the tensors of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub relations: Vec<String>,
    /// Free-form echo of the configuration that produced the checkpoint.
    #[serde(default)]
    pub echo: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Layout: little-endian `u64` header length, a JSON header listing tensor
/// names, shapes and byte offsets, then the tensors as little-endian `f32`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    meta: &CheckpointMeta,
) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for ((name, shape), (_, data)) in params.tensor_shapes().into_iter().zip(params.tensors()) {
        tensors.push(TensorEntry {
            name,
            shape,
            offset,
        });
        offset += data.len() * 4;
    }
    let header = CheckpointHeader {
        config: params.config.clone(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(8 + json.len() + offset);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, data) in params.tensors() {
        for x in data {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    let io = |source| NnError::Io {
        path: path.display().to_string(),
        source,
    };
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, CheckpointMeta)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| NnError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let bad = |m: &str| NnError::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[8..body]).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    header.config.validate()?;
    let blob = &bytes[body..];
    let mut params = ModelParams::init(&header.config, 0)?;
    let expected = params.tensor_shapes();
    if expected.len() != header.tensors.len() {
        return Err(bad("tensor list does not match the configuration"));
    }
    for ((entry, (name, shape)), (_, data)) in header
        .tensors
        .iter()
        .zip(&expected)
        .zip(params.tensors_mut())
    {
        if &entry.name != name || &entry.shape != shape {
            return Err(NnError::Checkpoint(format!(
                "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let end = entry.offset + data.len() * 4;
        if end > blob.len() {
            return Err(NnError::Checkpoint(format!("tensor `{name}` is truncated")));
        }
        for (x, chunk) in data
            .iter_mut()
            .zip(blob[entry.offset..end].chunks_exact(4))
        {
            *x = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    Ok((params, header.meta))
}
