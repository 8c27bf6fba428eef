//! HyperCycle: cyclic hypergraphs with alternating relations, where the
//! "opposite point" of every node must be told apart from its 2-hop
//! neighbour.
//!
//! Nodes are `x_0 .. x_{n-1}`. Edge `i` starts at `x_i` and covers the `k`
//! consecutive nodes `x_i, x_{i+1}, ..., x_{i+k-1}` (indices mod `n`); it
//! carries `r1` when `i` is even and `r2` otherwise. Relation `r0` is binary
//! and only ever appears in queries.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use serde::Serialize;

use crate::dataset::{self, Dataset, DatasetError};
use crate::evalrank::{self, CandidateMode, FactIndex, MetricsReport};
use crate::hypergraph::{HyperEdge, NodeId, Query, Relation, RelationalHypergraph};
use crate::nn::{self, ModelKind, ModelParams};
use crate::train::{self, EpochLog, Example, FitResult, TrainConfig, TrainError};

pub const QUERY_RELATION: usize = 0;
pub const GRID_NODES: [usize; 4] = [8, 12, 16, 20];
pub const GRID_ARITIES: [usize; 5] = [3, 4, 5, 6, 7];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid HyperCycle spec n={n}, k={k}: need n >= 8, n divisible by 4 and 3 <= k < n")]
    InvalidSpec { n: usize, k: usize },
    #[error("split ratio {0} must lie in (0, 1]")]
    InvalidRatio(f64),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperCycleSpec {
    pub n: usize,
    pub k: usize,
}

impl HyperCycleSpec {
    pub fn new(n: usize, k: usize) -> Result<Self, SynthError> {
        if n < 8 || n % 4 != 0 || k < 3 || k >= n {
            return Err(SynthError::InvalidSpec { n, k });
        }
        Ok(Self { n, k })
    }
}

pub fn hypercycle_relations(k: usize) -> Vec<Relation> {
    vec![
        Relation::new(0, "r0", 2),
        Relation::new(1, "r1", k),
        Relation::new(2, "r2", k),
    ]
}

pub fn hypercycle(n: usize, k: usize) -> Result<RelationalHypergraph, SynthError> {
    HyperCycleSpec::new(n, k)?;
    Ok(hypercycle_unchecked(n, k))
}

/// Same construction without the spec checks (used for large scaling runs,
/// where only the edge structure matters).
pub fn hypercycle_unchecked(n: usize, k: usize) -> RelationalHypergraph {
    let edges = (0..n)
        .map(|i| {
            let rel = if i % 2 == 0 { 1 } else { 2 };
            HyperEdge::new(rel, (0..k).map(|j| (i + j) % n).collect())
        })
        .collect();
    RelationalHypergraph::new(hypercycle_relations(k), edges, n, None)
        .expect("hypercycle construction is valid")
}

/// `r0(x_i, x_{i+n/2})` positives and `r0(x_i, x_{i+2})` negatives, one of
/// each per node, in node order.
pub fn opposite_queries(n: usize) -> (Vec<HyperEdge>, Vec<HyperEdge>) {
    let pos = (0..n)
        .map(|i| HyperEdge::new(QUERY_RELATION, vec![i, (i + n / 2) % n]))
        .collect();
    let neg = (0..n)
        .map(|i| HyperEdge::new(QUERY_RELATION, vec![i, (i + 2) % n]))
        .collect();
    (pos, neg)
}

/// One generated graph with its labelled queries.
#[derive(Debug, Clone)]
pub struct HyperCycleInstance {
    pub spec: HyperCycleSpec,
    pub graph: RelationalHypergraph,
    pub positives: Vec<HyperEdge>,
    pub negatives: Vec<HyperEdge>,
}

impl HyperCycleInstance {
    pub fn new(spec: HyperCycleSpec) -> Self {
        let (positives, negatives) = opposite_queries(spec.n);
        Self {
            spec,
            graph: hypercycle_unchecked(spec.n, spec.k),
            positives,
            negatives,
        }
    }

    /// Designated negative tail for the positive query sourced at `x_i`.
    pub fn negative_tail(&self, source: NodeId) -> NodeId {
        (source + 2) % self.spec.n
    }
}

#[derive(Debug, Clone)]
pub struct HyperCycleSuite {
    pub train: Vec<HyperCycleInstance>,
    pub test: Vec<HyperCycleInstance>,
}

/// Every valid `(n, k)` combination of the grid, shuffled with `seed`; the
/// first `round(ratio * total)` graphs form the training split.
pub fn hypercycle_suite(
    ns: &[usize],
    ks: &[usize],
    ratio: f64,
    seed: u64,
) -> Result<HyperCycleSuite, SynthError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(SynthError::InvalidRatio(ratio));
    }
    let mut specs: Vec<HyperCycleSpec> = Vec::new();
    for &n in ns {
        for &k in ks {
            if k < n {
                specs.push(HyperCycleSpec::new(n, k)?);
            }
        }
    }
    specs.shuffle(&mut crate::gen::rng(seed));
    let n_train = ((ratio * specs.len() as f64).round() as usize).min(specs.len());
    let test = specs.split_off(n_train);
    Ok(HyperCycleSuite {
        train: specs.into_iter().map(HyperCycleInstance::new).collect(),
        test: test.into_iter().map(HyperCycleInstance::new).collect(),
    })
}

pub fn grid_suite(seed: u64) -> HyperCycleSuite {
    hypercycle_suite(&GRID_NODES, &GRID_ARITIES, 0.7, seed).expect("grid is valid")
}

fn instance_dataset(inst: &HyperCycleInstance) -> Dataset {
    Dataset {
        graph: inst.graph.clone(),
        train: inst.graph.edges().to_vec(),
        valid: Vec::new(),
        test: inst.positives.clone(),
        inference: Vec::new(),
        entity_names: (0..inst.spec.n).map(|i| format!("x{i}")).collect(),
    }
}

fn instance_dir_name(spec: &HyperCycleSpec) -> String {
    format!("n{}_k{}", spec.n, spec.k)
}

/// Writes `out/{train,test}/n{n}_k{k}/`: each instance directory holds the
/// hyperedges in `train.txt`, the positive `r0` queries in `test.txt` and the
/// paired negatives in `negatives.txt`, plus id dictionaries.
pub fn write_suite(out: impl AsRef<Path>, suite: &HyperCycleSuite) -> Result<(), SynthError> {
    for (split, instances) in [("train", &suite.train), ("test", &suite.test)] {
        let split_dir = out.as_ref().join(split);
        for inst in instances.iter() {
            let dir = split_dir.join(instance_dir_name(&inst.spec));
            let ds = instance_dataset(inst);
            dataset::write_dataset(&dir, &ds)?;
            let negs = dataset::format_facts(&inst.negatives, &ds.relation_names(), &ds.entity_names);
            let path = dir.join("negatives.txt");
            fs::write(&path, negs).map_err(|source| SynthError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
    }
    Ok(())
}

/// Reads one instance directory written by [`write_suite`].
pub fn load_instance(dir: impl AsRef<Path>) -> Result<HyperCycleInstance, SynthError> {
    let dir = dir.as_ref();
    let ds = dataset::load_dataset(dir)?;
    let n = ds.graph.node_count();
    let k = ds.graph.relation(1).arity;
    let spec = HyperCycleSpec::new(n, k)?;
    let text = fs::read_to_string(dir.join("negatives.txt")).map_err(|source| SynthError::Io {
        path: dir.join("negatives.txt").display().to_string(),
        source,
    })?;
    let names: std::collections::HashMap<&str, usize> = ds
        .entity_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut negatives = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let nodes: Option<Vec<usize>> = fields[1..].iter().map(|f| names.get(f).copied()).collect();
        match nodes {
            Some(nodes) if fields[0] == "r0" && nodes.len() == 2 => {
                negatives.push(HyperEdge::new(QUERY_RELATION, nodes))
            }
            _ => {
                return Err(DatasetError::Parse {
                    path: dir.join("negatives.txt"),
                    line: lineno + 1,
                    message: "expected `r0<TAB>node<TAB>node` over known nodes".into(),
                }
                .into())
            }
        }
    }
    Ok(HyperCycleInstance {
        spec,
        graph: ds.graph,
        positives: ds.test,
        negatives,
    })
}

/// Loads every instance under `dir/train` and `dir/test`.
pub fn load_suite(dir: impl AsRef<Path>) -> Result<HyperCycleSuite, SynthError> {
    let mut splits = Vec::new();
    for split in ["train", "test"] {
        let split_dir = dir.as_ref().join(split);
        let mut entries: Vec<_> = fs::read_dir(&split_dir)
            .map_err(|source| SynthError::Io {
                path: split_dir.display().to_string(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        splits.push(entries.iter().map(load_instance).collect::<Result<Vec<_>, _>>()?);
    }
    let test = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(HyperCycleSuite { train, test })
}

/// Training examples of one instance: each positive query `r0(x_i, ?)`
/// with its designated negative `x_{i+2}`.
pub fn instance_examples(inst: &HyperCycleInstance, graph: usize) -> Vec<Example> {
    inst.positives
        .iter()
        .map(|p| Example {
            graph,
            query: Query::from_fact(p, 2),
            positive: p.at(2),
            negatives: vec![inst.negative_tail(p.at(1))],
            masked_fact: None,
        })
        .collect()
}

fn suite_max_arity(suite: &HyperCycleSuite) -> usize {
    suite
        .train
        .iter()
        .chain(&suite.test)
        .map(|i| i.spec.k)
        .max()
        .unwrap_or(2)
        .max(2)
}

/// Fraction of positive queries scored strictly above their paired negative;
/// exact ties count one half.
pub fn pairwise_accuracy(
    params: &ModelParams,
    instances: &[HyperCycleInstance],
) -> Result<f64, TrainError> {
    let layers = params.layers.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for inst in instances {
        let shared = match params.config.kind {
            ModelKind::Hrnet => Some(nn::hrnet_forward(&inst.graph, params, layers)?.0),
            ModelKind::Hcnet => None,
        };
        for p in &inst.positives {
            let q = Query::from_fact(p, 2);
            let h = match &shared {
                Some(h) => h.clone(),
                None => nn::hcnet_forward(&inst.graph, &q, params, layers)?.0,
            };
            let s = nn::score_candidates(params, &h, &q)?;
            let (a, b) = (s[p.at(2)], s[inst.negative_tail(p.at(1))]);
            total += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Trains on the suite's training graphs. Each epoch shuffles every
/// positive of every training graph into batches; there is no validation
/// split, so the final parameters are returned.
pub fn train_on_suite(
    suite: &HyperCycleSuite,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<FitResult, TrainError> {
    let model = config.model_config(hypercycle_relations(3).len(), suite_max_arity(suite));
    let params = ModelParams::init(&model, config.seed)?;
    let graphs: Vec<RelationalHypergraph> = suite.train.iter().map(|i| i.graph.clone()).collect();
    let examples: Vec<Example> = suite
        .train
        .iter()
        .enumerate()
        .flat_map(|(g, inst)| instance_examples(inst, g))
        .collect();
    let batches = |_: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut order = examples.clone();
        order.shuffle(rng);
        Ok(order.chunks(config.batch_size).map(|c| c.to_vec()).collect())
    };
    train::run_training(
        params,
        &graphs,
        config,
        batches,
        None::<fn(&ModelParams) -> Result<f64, TrainError>>,
        on_epoch,
    )
}

/// Result of training one model on one seed of the suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteRun {
    pub model: ModelKind,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
}

/// Trains `config.model` with the suite split by `seed` and the model
/// initialised with the same seed, then reports pairwise accuracy.
pub fn run_suite_experiment(config: &TrainConfig, seed: u64) -> Result<SuiteRun, TrainError> {
    let suite = grid_suite(seed);
    let config = TrainConfig {
        seed,
        ..config.clone()
    };
    let fit = train_on_suite(&suite, &config, |_| {})?;
    Ok(SuiteRun {
        model: config.model,
        seed,
        train_accuracy: pairwise_accuracy(&fit.params, &suite.train)?,
        test_accuracy: pairwise_accuracy(&fit.params, &suite.test)?,
        final_loss: fit.log.last().map_or(f64::NAN, |l| l.loss),
    })
}

/// Held-out quality of a model on HyperCycle instances.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub instances: usize,
    pub pairwise_accuracy: f64,
    /// Filtered ranking of both positions of every positive, filtered
    /// against the instance's positives.
    pub ranking: MetricsReport,
}

pub fn evaluate_suite(
    params: &ModelParams,
    instances: &[HyperCycleInstance],
) -> Result<SuiteReport, TrainError> {
    let layers = params.layers.len();
    let mut outcomes = Vec::new();
    for inst in instances {
        let known = FactIndex::new(&inst.positives);
        let n = inst.graph.node_count();
        let shared = match params.config.kind {
            ModelKind::Hrnet => Some(nn::hrnet_forward(&inst.graph, params, layers)?.0),
            ModelKind::Hcnet => None,
        };
        let (o, _) = evalrank::evaluate_with_scorer(n, &inst.positives, &known, CandidateMode::Full, |q| {
            let h = match &shared {
                Some(h) => h.clone(),
                None => nn::hcnet_forward(&inst.graph, q, params, layers)?.0,
            };
            Ok(nn::score_candidates(params, &h, q)?)
        })?;
        outcomes.extend(o);
    }
    Ok(SuiteReport {
        instances: instances.len(),
        pairwise_accuracy: pairwise_accuracy(params, instances)?,
        ranking: evalrank::aggregate(&outcomes)?,
    })
}
