//! Training: corruption negatives, positive-edge masking, the self-adversarial
//! loss, Adam, and the epoch loop with best-on-validation selection.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::evalrank::{self, CandidateMode, EvalError, FactIndex};
use crate::hypergraph::{GraphError, HyperEdge, MaskedView, NodeId, Query, RelationalHypergraph};
use crate::nn::{
    self, InitVariant, MessageMode, ModelConfig, ModelKind, ModelParams, NnError, PeKind,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no legal corruption of position {position} exists")]
    NoCandidate { position: usize },
    #[error("probability {0} is outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("position {position} out of range for arity {arity}")]
    InvalidPosition { position: usize, arity: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("config {path}: {message}")]
    ConfigParse { path: String, message: String },
    #[error("parameter and gradient shapes differ")]
    ShapeMismatch,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Hyperparameters. The defaults are the WP-IND settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub dim: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub adv_temperature: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub message: MessageMode,
    pub init: InitVariant,
    pub pe: PeKind,
    pub layer_norm: bool,
    pub skip: bool,
    /// Batches whose gradients are averaged before one optimizer step.
    pub accumulation: usize,
    /// Optional cap on batches per epoch.
    pub steps_per_epoch: Option<usize>,
    /// Sampled-candidate validation with this many negatives; full
    /// filtered ranking when absent.
    pub eval_negatives: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Hcnet,
            dim: 128,
            layers: 5,
            lr: 5e-3,
            batch_size: 32,
            negatives: 10,
            adv_temperature: 0.5,
            epochs: 20,
            dropout: 0.2,
            message: MessageMode::QueryDependent,
            init: InitVariant::PosQuery,
            pe: PeKind::Sinusoidal,
            layer_norm: true,
            skip: true,
            accumulation: 1,
            steps_per_epoch: None,
            eval_negatives: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn wp_ind() -> Self {
        Self::default()
    }

    pub fn jf_ind() -> Self {
        Self {
            dim: 256,
            lr: 1e-2,
            ..Self::default()
        }
    }

    pub fn mfb_ind() -> Self {
        Self {
            dim: 32,
            layers: 4,
            batch_size: 1,
            epochs: 10,
            steps_per_epoch: Some(10000),
            dropout: 0.0,
            accumulation: 32,
            ..Self::default()
        }
    }

    /// The HyperCycle experiment: 7 layers of width 32, learning rate 1e-3,
    /// 100 epochs. HRNet gets query-independent messages.
    pub fn hypercycle(model: ModelKind) -> Self {
        let message = match model {
            ModelKind::Hcnet => MessageMode::QueryDependent,
            ModelKind::Hrnet => MessageMode::QueryIndependent,
        };
        Self {
            model,
            message,
            dim: 32,
            layers: 7,
            lr: 1e-3,
            batch_size: 1,
            negatives: 1,
            epochs: 100,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        let c: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |message: String| TrainError::ConfigParse {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::from_toml_str(&text).map_err(err)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.negatives == 0 {
            return bad("negatives must be at least 1");
        }
        if !(self.adv_temperature > 0.0) {
            return bad("adversarial temperature must be positive");
        }
        if self.batch_size == 0 || self.accumulation == 0 {
            return bad("batch size and accumulation must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.model == ModelKind::Hrnet && self.message == MessageMode::QueryDependent {
            return bad("HRNet needs query-independent messages");
        }
        Ok(())
    }

    pub fn model_config(&self, num_relations: usize, max_arity: usize) -> ModelConfig {
        ModelConfig {
            kind: self.model,
            dim: self.dim,
            layers: self.layers,
            num_relations,
            max_arity,
            pe: self.pe,
            init: self.init,
            message: self.message,
            layer_norm: self.layer_norm,
            skip: self.skip,
            dropout: self.dropout,
        }
    }
}

/// `count` corruptions of position `t` of `fact`: uniform nodes other than
/// the true one whose substituted fact is not in `known`. Samples are drawn
/// with replacement.
pub fn corrupt(
    fact: &HyperEdge,
    t: usize,
    known: &FactIndex,
    node_count: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<NodeId>> {
    if t == 0 || t > fact.arity() {
        return Err(TrainError::InvalidPosition {
            position: t,
            arity: fact.arity(),
        });
    }
    let truth = fact.at(t);
    let mut probe = fact.clone();
    let mut legal = |v: NodeId| {
        probe.nodes[t - 1] = v;
        v != truth && !known.contains(&probe)
    };
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 20 * count + 20 {
        attempts += 1;
        let v = rng.gen_range(0..node_count);
        if legal(v) {
            out.push(v);
        }
    }
    if out.len() < count {
        let pool: Vec<NodeId> = (0..node_count).filter(|&v| legal(v)).collect();
        if pool.is_empty() {
            return Err(TrainError::NoCandidate { position: t });
        }
        while out.len() < count {
            out.push(pool[rng.gen_range(0..pool.len())]);
        }
    }
    Ok(out)
}

/// Negative weights `softmax(log(1 − p'_i) / α)`.
pub fn adversarial_weights(p_negs: &[f64], temperature: f64) -> Result<Vec<f64>> {
    for &p in p_negs {
        if !(p > 0.0 && p < 1.0) {
            return Err(TrainError::ProbabilityOutOfRange(p));
        }
    }
    Ok(softmax(
        &p_negs.iter().map(|p| (1.0 - p).ln() / temperature).collect::<Vec<_>>(),
    ))
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `−log p − Σ w_i log(1 − p'_i)` with the weights of [`adversarial_weights`].
pub fn self_adversarial_loss(p_pos: f64, p_negs: &[f64], temperature: f64) -> Result<f64> {
    if !(p_pos > 0.0 && p_pos < 1.0) {
        return Err(TrainError::ProbabilityOutOfRange(p_pos));
    }
    let w = adversarial_weights(p_negs, temperature)?;
    Ok(-p_pos.ln() - w.iter().zip(p_negs).map(|(w, p)| w * (1.0 - p).ln()).sum::<f64>())
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// The same loss on logits, with its derivatives with respect to the
/// positive and negative logits. The weights are treated as constants.
pub fn adversarial_loss_logits(
    s_pos: f64,
    s_negs: &[f64],
    temperature: f64,
) -> (f64, f64, Vec<f64>) {
    // log(1 − σ(s)) = −softplus(s)
    let w = softmax(
        &s_negs
            .iter()
            .map(|&s| -softplus(s) / temperature)
            .collect::<Vec<_>>(),
    );
    let loss = softplus(-s_pos) + w.iter().zip(s_negs).map(|(w, &s)| w * softplus(s)).sum::<f64>();
    let d_pos = nn::sigmoid(s_pos) - 1.0;
    let d_negs = w.iter().zip(s_negs).map(|(w, &s)| w * nn::sigmoid(s)).collect();
    (loss, d_pos, d_negs)
}

/// View of `graph` with every copy of each batch fact hidden.
pub fn mask_positives<'a>(
    graph: &'a RelationalHypergraph,
    facts: &[HyperEdge],
) -> Result<MaskedView<'a>> {
    let mut ids = Vec::new();
    for f in facts {
        let found = graph.find_edges(f);
        if found.is_empty() {
            return Err(GraphError::FactNotFound {
                relation: f.relation,
                nodes: f.nodes.clone(),
            }
            .into());
        }
        ids.extend(found);
    }
    Ok(MaskedView::new(graph, ids))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: ModelParams::zeros(&params.config),
            v: ModelParams::zeros(&params.config),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every trainable tensor.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.tensor_shapes() != grads.tensor_shapes()
        || params.tensor_shapes() != state.m.tensor_shapes()
    {
        return Err(TrainError::ShapeMismatch);
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let gs = grads.tensors();
    for ((((_, p), (_, g)), (_, m)), (_, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(gs)
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// One positive with its negatives, on graph `graph` of a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub graph: usize,
    pub query: Query,
    pub positive: NodeId,
    pub negatives: Vec<NodeId>,
    /// Fact hidden from message passing while this example's batch runs.
    pub masked_fact: Option<HyperEdge>,
}

fn example_rng(seed: u64, step: u64, idx: usize) -> ChaCha8Rng {
    crate::gen::rng(
        seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (idx as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9),
    )
}

/// Mean loss and gradients of a batch. Gradients of the examples are summed
/// in batch order, so the result does not depend on the thread count.
pub fn batch_gradients(
    params: &ModelParams,
    graphs: &[RelationalHypergraph],
    batch: &[Example],
    config: &TrainConfig,
    step: u64,
) -> Result<(f64, ModelParams)> {
    let mut grads = ModelParams::zeros(&params.config);
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    let layers = params.layers.len();
    let train_mode = params.config.dropout > 0.0;
    // Masks per graph: every batch fact on that graph.
    let mut masks: BTreeMap<usize, Vec<HyperEdge>> = BTreeMap::new();
    for ex in batch {
        let entry = masks.entry(ex.graph).or_default();
        if let Some(f) = &ex.masked_fact {
            entry.push(f.clone());
        }
    }
    let views: BTreeMap<usize, MaskedView> = masks
        .iter()
        .map(|(&g, facts)| Ok((g, mask_positives(&graphs[g], facts)?)))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;

    let seed_of = |ex: &Example, logits: &[f64]| {
        let negs: Vec<f64> = ex.negatives.iter().map(|&v| logits[v]).collect();
        let (loss, dp, dn) = adversarial_loss_logits(logits[ex.positive], &negs, config.adv_temperature);
        let mut seeds = vec![(ex.positive, dp * scale)];
        seeds.extend(ex.negatives.iter().zip(dn).map(|(&v, d)| (v, d * scale)));
        (loss, seeds)
    };

    match params.config.kind {
        ModelKind::Hcnet => {
            let chunk = rayon::current_num_threads().max(1);
            for (c, part) in batch.chunks(chunk).enumerate() {
                let results: Vec<Result<(f64, ModelParams)>> = part
                    .par_iter()
                    .enumerate()
                    .map(|(j, ex)| {
                        let view = &views[&ex.graph];
                        let mut rng = example_rng(config.seed, step, c * chunk + j);
                        let trace = nn::forward(
                            view,
                            Some(&ex.query),
                            params,
                            layers,
                            train_mode.then_some(&mut rng),
                        )?;
                        let logits = nn::score_candidates(params, trace.final_features(), &ex.query)?;
                        let (loss, seeds) = seed_of(ex, &logits);
                        let g = nn::backward(params, view, &trace, &ex.query, &seeds)?;
                        Ok((loss, g))
                    })
                    .collect();
                for r in results {
                    let (loss, g) = r?;
                    total += loss;
                    grads.add_scaled(&g, 1.0);
                }
            }
        }
        ModelKind::Hrnet => {
            for (&gi, view) in &views {
                let mut rng = example_rng(config.seed, step, gi);
                let trace = nn::forward(view, None, params, layers, train_mode.then_some(&mut rng))?;
                let h = trace.final_features();
                let mut dh = nn::FeatureMap::zeros(h.rows(), h.dim());
                for ex in batch.iter().filter(|ex| ex.graph == gi) {
                    let logits = nn::score_candidates(params, h, &ex.query)?;
                    let (loss, seeds) = seed_of(ex, &logits);
                    total += loss;
                    let d = nn::decoder_backward(params, h, &ex.query, &seeds, &mut grads)?;
                    for v in 0..h.rows() {
                        dh.row_mut(v)
                            .iter_mut()
                            .zip(d.row(v))
                            .for_each(|(a, b)| *a += b);
                    }
                }
                nn::layers_backward(params, view, &trace, dh, &mut grads)?;
            }
        }
    }
    Ok((total * scale, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_mrr: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// Epoch (1-based) of the returned parameters; 0 means the initial ones.
    pub best_epoch: usize,
}

/// Generic epoch loop. `batches` produces the batches of an epoch and
/// `validate` scores parameters (higher is better); without a validator the
/// final parameters are returned. `on_epoch` sees each log line as it is
/// produced.
pub fn run_training<B, V, L>(
    params: ModelParams,
    graphs: &[RelationalHypergraph],
    config: &TrainConfig,
    mut batches: B,
    mut validate: Option<V>,
    mut on_epoch: L,
) -> Result<FitResult>
where
    B: FnMut(usize, &mut ChaCha8Rng) -> Result<Vec<Vec<Example>>>,
    V: FnMut(&ModelParams) -> Result<f64>,
    L: FnMut(&EpochLog),
{
    config.validate()?;
    let mut params = params;
    let mut adam = AdamState::new(&params);
    let mut rng = crate::gen::rng(config.seed);
    let mut best = (f64::NEG_INFINITY, params.clone(), 0usize);
    let mut log = Vec::new();
    let mut step: u64 = 0;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut epoch_batches = batches(epoch, &mut rng)?;
        if let Some(cap) = config.steps_per_epoch {
            epoch_batches.truncate(cap);
        }
        let mut losses = Vec::new();
        let mut acc = ModelParams::zeros(&params.config);
        let mut pending = 0;
        for batch in &epoch_batches {
            let (loss, g) = batch_gradients(&params, graphs, batch, config, step)?;
            step += 1;
            losses.push(loss);
            acc.add_scaled(&g, 1.0);
            pending += 1;
            if pending == config.accumulation {
                acc.scale(1.0 / pending as f64);
                adam_step(&mut params, &acc, &mut adam, config.lr)?;
                acc = ModelParams::zeros(&params.config);
                pending = 0;
            }
        }
        if pending > 0 {
            acc.scale(1.0 / pending as f64);
            adam_step(&mut params, &acc, &mut adam, config.lr)?;
        }
        let loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let val = match validate.as_mut() {
            Some(f) => Some(f(&params)?),
            None => None,
        };
        let entry = EpochLog {
            epoch,
            loss,
            val_mrr: val,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
        match val {
            Some(v) if v > best.0 => best = (v, params.clone(), epoch),
            Some(_) => {}
            None => best = (f64::NEG_INFINITY, params.clone(), epoch),
        }
    }
    Ok(FitResult {
        params: best.1,
        log,
        best_epoch: best.2,
    })
}

/// Examples of one epoch over a dataset: every training fact once, with a
/// uniformly drawn corruption position, shuffled and cut into batches.
pub fn dataset_batches(
    data: &Dataset,
    known: &FactIndex,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Example>>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(rng);
    let n = data.graph.node_count();
    let mut out = Vec::new();
    for chunk in order.chunks(config.batch_size) {
        let mut batch = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let fact = &data.train[i];
            let t = rng.gen_range(1..=fact.arity());
            let negatives = corrupt(fact, t, known, n, config.negatives, rng)?;
            batch.push(Example {
                graph: 0,
                query: Query::from_fact(fact, t),
                positive: fact.at(t),
                negatives,
                masked_fact: Some(fact.clone()),
            });
        }
        out.push(batch);
    }
    Ok(out)
}

/// Trains on a dataset, scoring validation MRR each epoch on the evaluation
/// graph and keeping the best parameters.
pub fn fit(
    data: &Dataset,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<FitResult> {
    config.validate()?;
    let g = &data.graph;
    let max_arity = g.max_arity().max(1);
    let params = ModelParams::init(&config.model_config(g.relations().len(), max_arity), config.seed)?;
    let train_known = FactIndex::new(&data.train);
    let all_known = FactIndex::new(&data.all_facts());
    let eval_graph = data.eval_graph()?;
    let mode = match config.eval_negatives {
        Some(k) => CandidateMode::Sampled {
            negatives: k,
            seed: config.seed,
        },
        None => CandidateMode::Full,
    };
    let validate = (!data.valid.is_empty()).then_some(|p: &ModelParams| -> Result<f64> {
        let (r, _) = evalrank::evaluate_model(&eval_graph, &data.valid, &all_known, p, mode)?;
        Ok(r.overall.mrr)
    });
    run_training(
        params,
        std::slice::from_ref(g),
        config,
        |_, rng| dataset_batches(data, &train_known, config, rng),
        validate,
        on_epoch,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::Relation;
    use proptest::prelude::*;

    fn tiny_dataset() -> Dataset {
        let rels = vec![Relation::new(0, "r", 2), Relation::new(1, "s", 3)];
        let train = vec![
            HyperEdge::new(0, vec![0, 1]),
            HyperEdge::new(0, vec![1, 2]),
            HyperEdge::new(0, vec![2, 3]),
            HyperEdge::new(1, vec![0, 2, 4]),
            HyperEdge::new(1, vec![1, 3, 5]),
            HyperEdge::new(0, vec![3, 4]),
        ];
        let graph = RelationalHypergraph::new(rels, train.clone(), 6, None).unwrap();
        Dataset {
            graph,
            train,
            valid: vec![HyperEdge::new(0, vec![4, 5])],
            test: vec![HyperEdge::new(0, vec![5, 0])],
            inference: vec![],
            entity_names: (0..6).map(|i| format!("e{i}")).collect(),
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            dim: 8,
            layers: 2,
            batch_size: 2,
            negatives: 3,
            epochs: 3,
            dropout: 0.1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn forced_corruption() {
        let f = HyperEdge::new(0, vec![0, 1]);
        let known = FactIndex::new(&[f.clone()]);
        let mut rng = crate::gen::rng(1);
        assert_eq!(corrupt(&f, 2, &known, 2, 1, &mut rng).unwrap(), vec![0]);
        let known = FactIndex::new(&[f.clone(), HyperEdge::new(0, vec![0, 0])]);
        assert!(matches!(
            corrupt(&f, 2, &known, 2, 1, &mut rng),
            Err(TrainError::NoCandidate { position: 2 })
        ));
        let a = corrupt(&f, 1, &FactIndex::default(), 50, 5, &mut crate::gen::rng(3)).unwrap();
        let b = corrupt(&f, 1, &FactIndex::default(), 50, 5, &mut crate::gen::rng(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v != 0));
    }

    #[test]
    fn loss_arithmetic() {
        assert_eq!(adversarial_weights(&[0.3], 0.7).unwrap(), vec![1.0]);
        assert_eq!(adversarial_weights(&[0.4, 0.4], 0.5).unwrap(), vec![0.5, 0.5]);
        let l = self_adversarial_loss(0.5, &[0.5], 0.5).unwrap();
        assert!((l - 1.3862943611198906).abs() < 1e-12);
        assert!(matches!(
            self_adversarial_loss(1.0, &[0.5], 0.5),
            Err(TrainError::ProbabilityOutOfRange(_))
        ));
        let (ll, _, _) = adversarial_loss_logits(0.0, &[0.0], 0.5);
        assert!((ll - l).abs() < 1e-12);
    }

    #[test]
    fn logit_loss_derivatives() {
        let negs = [0.3, -1.2, 2.0];
        let (_, dp, dn) = adversarial_loss_logits(0.7, &negs, 0.5);
        // Weights are held fixed, so differentiate with frozen weights.
        let w = softmax(&negs.iter().map(|&s| -softplus(s) / 0.5).collect::<Vec<_>>());
        let f = |sp: f64, sn: &[f64]| softplus(-sp) + w.iter().zip(sn).map(|(w, &s)| w * softplus(s)).sum::<f64>();
        let eps = 1e-6;
        assert!(((f(0.7 + eps, &negs) - f(0.7 - eps, &negs)) / (2.0 * eps) - dp).abs() < 1e-8);
        for i in 0..3 {
            let (mut up, mut down) = (negs, negs);
            up[i] += eps;
            down[i] -= eps;
            assert!(((f(0.7, &up) - f(0.7, &down)) / (2.0 * eps) - dn[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn masking() {
        let d = tiny_dataset();
        let all = mask_positives(&d.graph, &d.train).unwrap();
        use crate::hypergraph::HypergraphView;
        assert!((0..6).all(|v| all.active_incidence(v).count() == 0));
        let one = mask_positives(&d.graph, &d.train[3..4]).unwrap();
        assert_eq!(one.active_incidence(0).count(), d.graph.incidence(0).len() - 1);
        assert_eq!(one.active_incidence(4).count(), d.graph.incidence(4).len() - 1);
        assert_eq!(one.active_incidence(1).count(), d.graph.incidence(1).len());
        let none = mask_positives(&d.graph, &[]).unwrap();
        assert!(none.masked_edges().is_empty());
        assert!(matches!(
            mask_positives(&d.graph, &[HyperEdge::new(0, vec![5, 5])]),
            Err(TrainError::Graph(GraphError::FactNotFound { .. }))
        ));
    }

    #[test]
    fn masked_positive_sends_no_messages() {
        let d = tiny_dataset();
        let p = ModelParams::init(&small_config().model_config(2, 3), 0).unwrap();
        let fact = &d.train[3];
        let view = mask_positives(&d.graph, std::slice::from_ref(fact)).unwrap();
        let q = Query::from_fact(fact, 3);
        let t = nn::forward::<_, ChaCha8Rng>(&view, Some(&q), &p, 2, None).unwrap();
        assert_eq!(t.messages_per_edge[3], 0);
        assert!(t.messages_per_edge[0] > 0);
    }

    #[test]
    fn adam_behaviour() {
        let c = ModelConfig::hcnet(1, 2, 2, 1);
        let mut p = ModelParams::init(&c, 0).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &ModelParams::zeros(&c), &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
        // Constant gradient: every step moves by lr.
        let mut g = ModelParams::zeros(&c);
        g.decoder.b2 = 3.0;
        let mut st = AdamState::new(&p);
        for _ in 0..50 {
            let b = p.decoder.b2;
            adam_step(&mut p, &g, &mut st, 0.01).unwrap();
            assert!(((b - p.decoder.b2) - 0.01).abs() < 1e-6);
        }
        let other = ModelParams::zeros(&ModelConfig::hcnet(1, 2, 4, 1));
        assert!(matches!(adam_step(&mut p, &other, &mut st, 0.1), Err(TrainError::ShapeMismatch)));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let d = tiny_dataset();
        let c = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let r = fit(&d, &c, |_| {}).unwrap();
        let init = ModelParams::init(&c.model_config(2, 3), c.seed).unwrap();
        assert_eq!(r.params, init);
        assert_eq!(r.best_epoch, 0);
        assert!(r.log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let d = tiny_dataset();
        let c = small_config();
        let a = fit(&d, &c, |_| {}).unwrap();
        let b = fit(&d, &c, |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        let strip = |l: &[EpochLog]| l.iter().map(|e| (e.loss, e.val_mrr)).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));
        assert_eq!(a.log.len(), 3);
        assert!(a.log.iter().all(|e| e.val_mrr.is_some()));
    }

    #[test]
    fn hrnet_batch_gradients_match_per_example_sum() {
        let d = tiny_dataset();
        let c = TrainConfig {
            model: ModelKind::Hrnet,
            message: MessageMode::QueryIndependent,
            dropout: 0.0,
            ..small_config()
        };
        let p = ModelParams::init(&c.model_config(2, 3), 1).unwrap();
        let known = FactIndex::new(&d.train);
        let batches = dataset_batches(&d, &known, &c, &mut crate::gen::rng(0)).unwrap();
        let graphs = [d.graph.clone()];
        let (loss, g) = batch_gradients(&p, &graphs, &batches[0], &c, 0).unwrap();
        let mut sum = ModelParams::zeros(&p.config);
        let mut lsum = 0.0;
        // Each example alone sees only its own mask, so compare on a batch
        // whose examples share the mask.
        let shared: Vec<Example> = batches[0]
            .iter()
            .map(|e| Example {
                masked_fact: None,
                ..e.clone()
            })
            .collect();
        let (l2, g2) = batch_gradients(&p, &graphs, &shared, &c, 0).unwrap();
        for ex in &shared {
            let (l, gi) = batch_gradients(&p, &graphs, std::slice::from_ref(ex), &c, 0).unwrap();
            lsum += l;
            sum.add_scaled(&gi, 1.0 / shared.len() as f64);
        }
        assert!((lsum / shared.len() as f64 - l2).abs() < 1e-12);
        for ((_, a), (_, b)) in sum.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(loss.is_finite() && g.max_abs().is_finite());
    }

    #[test]
    fn config_toml_round_trip() {
        let c = TrainConfig::hypercycle(ModelKind::Hcnet);
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml()).unwrap(), c);
        assert!(TrainConfig::from_toml_str("dim = 8\nbogus = 1\n").is_err());
        assert!(TrainConfig::from_toml_str("negatives = 0\n").is_err());
        let partial = TrainConfig::from_toml_str("dim = 16\nmodel = \"hrnet\"\nmessage = \"query-independent\"\n").unwrap();
        assert_eq!(partial.dim, 16);
        assert_eq!(partial.layers, 5);
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_follow_permutations(ps in prop::collection::vec(0.01f64..0.99, 1..8), temp in 0.1f64..2.0, rot in 0usize..8) {
            let w = adversarial_weights(&ps, temp).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let k = rot % ps.len();
            let mut rotated = ps.clone();
            rotated.rotate_left(k);
            let mut wr = w.clone();
            wr.rotate_left(k);
            let w2 = adversarial_weights(&rotated, temp).unwrap();
            for (a, b) in w2.iter().zip(&wr) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
