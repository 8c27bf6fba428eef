//! Filtered ranking: every query `(q, ũ, t)` of a test fact scores all
//! substitutions at position `t` that do not form another known fact.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypergraph::{HyperEdge, HypergraphView, NodeId, Query, RelationalHypergraph};
use crate::nn::{self, ModelKind, ModelParams, NnError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("score of candidate {0} is NaN")]
    NaNScore(usize),
    #[error("no ranking outcomes to aggregate")]
    EmptyOutcomes,
    #[error("true index {index} out of range for {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Set of known facts used to filter candidates.
#[derive(Debug, Clone, Default)]
pub struct FactIndex {
    facts: HashSet<HyperEdge>,
}

impl FactIndex {
    pub fn new<'a>(facts: impl IntoIterator<Item = &'a HyperEdge>) -> Self {
        Self {
            facts: facts.into_iter().cloned().collect(),
        }
    }

    pub fn contains(&self, fact: &HyperEdge) -> bool {
        self.facts.contains(fact)
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }
}

/// Nodes whose substitution at position `t` of `fact` is not a known fact,
/// plus the true node itself, in increasing id order.
pub fn filtered_candidates(
    fact: &HyperEdge,
    t: usize,
    known: &FactIndex,
    node_count: usize,
) -> Vec<NodeId> {
    let truth = fact.at(t);
    let mut probe = fact.clone();
    (0..node_count)
        .filter(|&v| {
            if v == truth {
                return true;
            }
            probe.nodes[t - 1] = v;
            !known.contains(&probe)
        })
        .collect()
}

/// `1 + #{s > s_true} + #{v ≠ true : s_v = s_true} / 2`.
pub fn rank_of(scores: &[f64], true_idx: usize) -> Result<f64, EvalError> {
    if true_idx >= scores.len() {
        return Err(EvalError::IndexOutOfRange {
            index: true_idx,
            len: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(EvalError::NaNScore(i));
    }
    let s = scores[true_idx];
    let greater = scores.iter().filter(|&&x| x > s).count();
    let ties = scores.iter().filter(|&&x| x == s).count() - 1;
    Ok(1.0 + greater as f64 + ties as f64 / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingOutcome {
    pub query: Query,
    pub truth: NodeId,
    pub rank: f64,
    pub candidates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

impl Metrics {
    fn from_ranks(ranks: &[f64]) -> Self {
        let n = ranks.len() as f64;
        let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Self {
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hits1: hits(1.0),
            hits3: hits(3.0),
            hits10: hits(10.0),
            count: ranks.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub overall: Metrics,
    /// Breakdown by the arity of the query relation.
    pub per_arity: BTreeMap<usize, Metrics>,
}

pub fn aggregate(outcomes: &[RankingOutcome]) -> Result<MetricsReport, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyOutcomes);
    }
    let ranks: Vec<f64> = outcomes.iter().map(|o| o.rank).collect();
    let mut by_arity: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for o in outcomes {
        by_arity.entry(o.query.arity()).or_default().push(o.rank);
    }
    Ok(MetricsReport {
        overall: Metrics::from_ranks(&ranks),
        per_arity: by_arity
            .into_iter()
            .map(|(k, r)| (k, Metrics::from_ranks(&r)))
            .collect(),
    })
}

/// How candidates are drawn for each query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CandidateMode {
    /// Every filtered candidate.
    #[default]
    Full,
    /// The truth plus this many filtered candidates sampled without
    /// replacement.
    Sampled { negatives: usize, seed: u64 },
}

/// Queries of every test fact at every position, in fact order.
pub fn ranking_queries(test: &[HyperEdge]) -> Vec<(Query, NodeId, HyperEdge, usize)> {
    test.iter()
        .flat_map(|f| (1..=f.arity()).map(move |t| (Query::from_fact(f, t), f.at(t), f.clone(), t)))
        .collect()
}

/// Ranks every query of `test` using `scorer`, which returns one score per
/// node of the graph for a query. Returns the outcomes and the number of
/// scorer calls.
pub fn evaluate_with_scorer<F>(
    node_count: usize,
    test: &[HyperEdge],
    known: &FactIndex,
    mode: CandidateMode,
    scorer: F,
) -> Result<(Vec<RankingOutcome>, usize), EvalError>
where
    F: Fn(&Query) -> Result<Vec<f64>, EvalError> + Sync,
{
    let queries = ranking_queries(test);
    let outcomes: Result<Vec<RankingOutcome>, EvalError> = queries
        .par_iter()
        .enumerate()
        .map(|(idx, (query, truth, fact, t))| {
            let mut cands = filtered_candidates(fact, *t, known, node_count);
            if let CandidateMode::Sampled { negatives, seed } = mode {
                let mut rng = crate::gen::rng(seed ^ (idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let mut others: Vec<NodeId> = cands.iter().copied().filter(|v| v != truth).collect();
                others.shuffle(&mut rng);
                others.truncate(negatives);
                others.push(*truth);
                others.sort_unstable();
                cands = others;
            }
            let scores = scorer(query)?;
            let cand_scores: Vec<f64> = cands.iter().map(|&v| scores[v]).collect();
            let true_idx = cands.iter().position(|v| v == truth).expect("truth is a candidate");
            Ok(RankingOutcome {
                query: query.clone(),
                truth: *truth,
                rank: rank_of(&cand_scores, true_idx)?,
                candidates: cands.len(),
            })
        })
        .collect();
    Ok((outcomes?, queries.len()))
}

/// Filtered-ranking metrics of a trained model on `graph`. HCNet runs one
/// conditional forward pass per query, scoring all candidates at once; HRNet
/// runs a single forward pass shared by every query. The second value is the
/// number of forward passes.
pub fn evaluate_model<G: HypergraphView>(
    view: &G,
    test: &[HyperEdge],
    known: &FactIndex,
    params: &ModelParams,
    mode: CandidateMode,
) -> Result<(MetricsReport, usize), EvalError> {
    let graph: &RelationalHypergraph = view.graph();
    let layers = params.layers.len();
    let n = graph.node_count();
    let (outcomes, passes) = match params.config.kind {
        ModelKind::Hcnet => evaluate_with_scorer(n, test, known, mode, |q| {
            let (h, _) = nn::hcnet_forward(view, q, params, layers)?;
            Ok(nn::score_candidates(params, &h, q)?)
        })?,
        ModelKind::Hrnet => {
            let (h, _) = nn::hrnet_forward(view, params, layers)?;
            let (o, _) = evaluate_with_scorer(n, test, known, mode, |q| {
                Ok(nn::score_candidates(params, &h, q)?)
            })?;
            (o, 1)
        }
    };
    Ok((aggregate(&outcomes)?, passes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::Relation;
    use proptest::prelude::*;

    fn outcome(rank: f64, arity: usize) -> RankingOutcome {
        RankingOutcome {
            query: Query::new(0, vec![0; arity - 1], 1),
            truth: 0,
            rank,
            candidates: 10,
        }
    }

    #[test]
    fn tie_policy() {
        assert_eq!(rank_of(&[0.9, 0.1, 0.2], 0).unwrap(), 1.0);
        assert_eq!(rank_of(&[0.5; 5], 2).unwrap(), 3.0);
        assert_eq!(rank_of(&[0.1, 0.2, 0.3, 0.4], 0).unwrap(), 4.0);
        assert!(matches!(rank_of(&[0.1, f64::NAN], 0), Err(EvalError::NaNScore(1))));
    }

    #[test]
    fn aggregate_arithmetic() {
        let r = aggregate(&[outcome(1.0, 2), outcome(2.0, 2), outcome(4.0, 3)]).unwrap();
        assert!((r.overall.mrr - 0.5833333333333334).abs() < 1e-12);
        assert_eq!(r.overall.hits3, 2.0 / 3.0);
        assert_eq!(r.overall.hits1, 1.0 / 3.0);
        assert_eq!(r.per_arity[&2].count, 2);
        assert_eq!(r.per_arity[&3].mrr, 0.25);
        assert_eq!(aggregate(&[outcome(1.0, 2)]).unwrap().overall.mrr, 1.0);
        assert_eq!(aggregate(&[outcome(2.0, 2)]).unwrap().overall.mrr, 0.5);
        assert!(matches!(aggregate(&[]), Err(EvalError::EmptyOutcomes)));
    }

    #[test]
    fn filtering() {
        let f = HyperEdge::new(0, vec![0, 1]);
        assert_eq!(filtered_candidates(&f, 2, &FactIndex::default(), 3), vec![0, 1, 2]);
        let known = FactIndex::new(&[f.clone(), HyperEdge::new(0, vec![0, 2])]);
        assert_eq!(filtered_candidates(&f, 2, &known, 3), vec![0, 1]);
        assert_eq!(filtered_candidates(&f, 1, &known, 3), vec![0, 1, 2]);
    }

    #[test]
    fn oracle_and_constant_scorers() {
        let test = vec![HyperEdge::new(0, vec![0, 1]), HyperEdge::new(0, vec![2, 3])];
        let known = FactIndex::new(&test);
        let (out, calls) = evaluate_with_scorer(5, &test, &known, CandidateMode::Full, |q| {
            let truth = test
                .iter()
                .find(|f| Query::from_fact(f, q.target) == *q)
                .unwrap()
                .at(q.target);
            Ok((0..5).map(|v| (v == truth) as u8 as f64).collect())
        })
        .unwrap();
        assert_eq!(calls, 4);
        assert_eq!(aggregate(&out).unwrap().overall.mrr, 1.0);
        // Constant scorer: every query has 5 candidates, rank 3.
        let (out, _) =
            evaluate_with_scorer(5, &test, &known, CandidateMode::Full, |_| Ok(vec![0.0; 5])).unwrap();
        assert!(out.iter().all(|o| o.rank == 3.0 && o.candidates == 5));
        let (out, _) = evaluate_with_scorer(
            5,
            &test,
            &known,
            CandidateMode::Sampled { negatives: 2, seed: 1 },
            |_| Ok(vec![0.0; 5]),
        )
        .unwrap();
        assert!(out.iter().all(|o| o.candidates == 3 && o.rank == 2.0));
    }

    #[test]
    fn one_forward_pass_per_query() {
        let g = RelationalHypergraph::new(
            vec![Relation::new(0, "r", 2)],
            vec![HyperEdge::new(0, vec![0, 1]), HyperEdge::new(0, vec![1, 2])],
            4,
            None,
        )
        .unwrap();
        let test = vec![HyperEdge::new(0, vec![2, 3])];
        let known = FactIndex::new(g.edges().iter().chain(&test));
        let p = ModelParams::init(&nn::ModelConfig::hcnet(1, 2, 4, 2), 0).unwrap();
        let (r, passes) = evaluate_model(&g, &test, &known, &p, CandidateMode::Full).unwrap();
        assert_eq!(passes, 2);
        assert_eq!(r.overall.count, 2);
        let p = ModelParams::init(&nn::ModelConfig::hrnet(1, 2, 4, 2), 0).unwrap();
        let (_, passes) = evaluate_model(&g, &test, &known, &p, CandidateMode::Full).unwrap();
        assert_eq!(passes, 1);
    }

    proptest! {
        #[test]
        fn ranks_ignore_order_and_monotone_maps(scores in prop::collection::vec(-3i32..3, 1..12), pick in any::<prop::sample::Index>()) {
            let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
            let t = pick.index(s.len());
            let r = rank_of(&s, t).unwrap();
            prop_assert!(r >= 1.0 && r <= s.len() as f64);
            let rev: Vec<f64> = s.iter().rev().copied().collect();
            prop_assert_eq!(rank_of(&rev, s.len() - 1 - t).unwrap(), r);
            let mapped: Vec<f64> = s.iter().map(|x| (x * 0.5).exp() + 1.0).collect();
            prop_assert_eq!(rank_of(&mapped, t).unwrap(), r);
        }

        #[test]
        fn hits_are_ordered(ranks in prop::collection::vec(1u32..30, 1..20)) {
            let outs: Vec<RankingOutcome> = ranks.iter().map(|&r| outcome(r as f64, 2)).collect();
            let m = aggregate(&outs).unwrap().overall;
            prop_assert!(m.hits1 <= m.hits3 && m.hits3 <= m.hits10 && m.hits10 <= 1.0);
            prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
        }
    }
}
