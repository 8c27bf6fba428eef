//! Seeded property checks over random instances: refinement of model
//! features by colour refinement, the pairwise refinement equivalence on
//! knowledge graphs, the logic compiler against the evaluator, gradients,
//! permutation equivariance and ranking arithmetic.
//!
//! Each check returns a [`CheckOutcome`]; the `theorem-suite` command and
//! the acceptance target print them.

use rand::Rng;
use serde::Serialize;

use crate::evalrank::{aggregate, rank_of, RankingOutcome};
use crate::gen;
use crate::hypergraph::{Query, RelationalHypergraph};
use crate::logic::{self, LogicSignature, RowKind};
use crate::nn::{self, InitVariant, ModelConfig, ModelKind, ModelParams, PeKind};
use crate::refine::{self, equivalent, refines, NodeColoring, Rounds};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

/// Random hypergraph with up to `max_nodes` nodes, up to four relations of
/// arity at most four, and a random query over it.
pub fn random_instance(rng: &mut impl Rng, max_nodes: usize) -> (RelationalHypergraph, Query) {
    let n = rng.gen_range(1..=max_nodes);
    let rels = rng.gen_range(1..=4);
    let edges = rng.gen_range(0..=2 * n);
    let g = gen::random_hypergraph_with(rng, n, rels, 4, edges);
    let q = gen::random_query_with(rng, &g);
    (g, q)
}

fn model_config(kind: ModelKind, g: &RelationalHypergraph, dim: usize, layers: usize) -> ModelConfig {
    let (r, k) = (g.relations().len(), g.max_arity().max(1));
    match kind {
        ModelKind::Hcnet => ModelConfig::hcnet(r, k, dim, layers),
        ModelKind::Hrnet => ModelConfig::hrnet(r, k, dim, layers),
    }
}

fn random_params(config: &ModelConfig, seed: u64, scale: f64) -> Result<ModelParams, nn::NnError> {
    let mut p = ModelParams::init(config, seed)?;
    p.randomize(&mut gen::rng(seed ^ 0x5eed), scale);
    Ok(p)
}

/// Per-layer WL colourings and model features for one instance.
fn wl_and_features(
    g: &RelationalHypergraph,
    q: &Query,
    p: &ModelParams,
    layers: usize,
) -> Result<(Vec<NodeColoring>, Vec<nn::FeatureMap>), String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    match p.config.kind {
        ModelKind::Hcnet => {
            let (_, t) = nn::hcnet_forward(g, q, p, layers).map_err(|e| err(&e))?;
            let wl = refine::conditional_run(g, q, Rounds::Fixed(layers)).map_err(|e| err(&e))?;
            Ok((wl, t.features))
        }
        ModelKind::Hrnet => {
            let (_, t) = nn::hrnet_forward(g, p, layers).map_err(|e| err(&e))?;
            let wl = refine::hrwl1_run(g, NodeColoring::uniform(g.node_count()), Rounds::Fixed(layers))
                .map_err(|e| err(&e))?;
            Ok((wl, t.features))
        }
    }
}

/// On `graphs` random instances the round-`l` colour refinement partition
/// refines the layer-`l` feature partition for every `l <= layers`, for
/// HRNet (against hrwl₁) and HCNet (against the query-conditioned run).
pub fn wl_refines_features(seed: u64, graphs: usize, layers: usize) -> CheckOutcome {
    let mut rng = gen::rng(seed);
    let mut violations = 0;
    let mut checked = 0;
    let mut error = None;
    for i in 0..graphs {
        let (g, q) = random_instance(&mut rng, 30);
        for kind in [ModelKind::Hrnet, ModelKind::Hcnet] {
            let config = model_config(kind, &g, 8, layers);
            let res = random_params(&config, seed.wrapping_add(i as u64), 0.8)
                .map_err(|e| e.to_string())
                .and_then(|p| wl_and_features(&g, &q, &p, layers));
            match res {
                Ok((wl, feats)) => {
                    for l in 0..=layers {
                        checked += 1;
                        if !refines(&wl[l].colors, &feats[l].partition()).unwrap_or(false) {
                            violations += 1;
                        }
                    }
                }
                Err(e) => error = Some(e),
            }
        }
    }
    let name = "colour refinement refines model features";
    match error {
        Some(e) => CheckOutcome::new(name, false, format!("error: {e}")),
        None => CheckOutcome::new(
            name,
            violations == 0,
            format!("{violations} violations over {checked} (graph, model, layer) triples"),
        ),
    }
}

/// Counts, per model, the random instances on which bare width-`dim`
/// features with random parameters induce exactly the WL partition at
/// round `layers`. Returns `(hrnet_matches, hcnet_matches)`.
pub fn wl_partition_matches(seed: u64, graphs: usize, dim: usize, layers: usize) -> Result<(usize, usize), String> {
    let mut rng = gen::rng(seed);
    let mut hits = [0usize; 2];
    for i in 0..graphs {
        let (g, q) = random_instance(&mut rng, 30);
        for (slot, kind) in [ModelKind::Hrnet, ModelKind::Hcnet].into_iter().enumerate() {
            let config = model_config(kind, &g, dim, layers).bare();
            let p = random_params(&config, seed.wrapping_add(i as u64), 1.0).map_err(|e| e.to_string())?;
            let (wl, feats) = wl_and_features(&g, &q, &p, layers)?;
            if equivalent(&wl[layers].colors, &feats[layers].partition()).map_err(|e| e.to_string())? {
                hits[slot] += 1;
            }
        }
    }
    Ok((hits[0], hits[1]))
}

pub fn wl_partition_check(seed: u64, graphs: usize, dim: usize, layers: usize, need: usize) -> CheckOutcome {
    let name = "random features match the colour refinement partition";
    match wl_partition_matches(seed, graphs, dim, layers) {
        Ok((hr, hc)) => CheckOutcome::new(
            name,
            hr >= need && hc >= need,
            format!("HRNet {hr}/{graphs}, HCNet {hc}/{graphs} at round {layers}, width {dim} (need {need})"),
        ),
        Err(e) => CheckOutcome::new(name, false, format!("error: {e}")),
    }
}

/// The pairwise conditioned refinement and the relational pairwise test on
/// the inverse-augmented graph induce the same pair partition at every
/// round, on random loop-free knowledge graphs.
pub fn pairwise_equivalence(seed: u64, graphs: usize, rounds: usize) -> CheckOutcome {
    let name = "hcwl2 and rawl2+ pair partitions coincide";
    let mut rng = gen::rng(seed);
    let mut violations = 0;
    for _ in 0..graphs {
        let n = rng.gen_range(1..=15);
        let rels = rng.gen_range(1..=3);
        let edges = rng.gen_range(0..=3 * n);
        let g = gen::random_kg(n, rels, edges, false, rng.gen());
        let init = refine::diagonal_pair_init(n);
        let runs = refine::hcwl2_run(&g, init.clone(), rounds)
            .and_then(|a| refine::rawl2plus_run(&g, init, rounds).map(|b| (a, b)));
        match runs {
            Ok((a, b)) => {
                for l in 0..=rounds {
                    if !equivalent(&a[l].colors, &b[l].colors).unwrap_or(false) {
                        violations += 1;
                    }
                }
            }
            Err(e) => return CheckOutcome::new(name, false, format!("error: {e}")),
        }
    }
    CheckOutcome::new(
        name,
        violations == 0,
        format!("{violations} violations over {graphs} graphs, rounds 0..={rounds}"),
    )
}

/// Every row of the compiled network equals the evaluator's truth value of
/// the subformula it computes, at every node.
pub fn compiler_agreement(seed: u64, pairs: usize, depth: usize) -> CheckOutcome {
    let name = "compiled network matches the formula evaluator";
    let mut rng = gen::rng(seed);
    let mut violations = 0;
    let mut cells = 0;
    for _ in 0..pairs {
        let n = rng.gen_range(1..=12);
        let rels = rng.gen_range(1..=3);
        let edges = rng.gen_range(0..3 * n);
        let colors = rng.gen_range(1..=3u32);
        let g = gen::random_hypergraph_with(&mut rng, n, rels, 4, edges);
        let g = g
            .with_colors(Some(gen::random_colors(&mut rng, n, colors)))
            .expect("colouring has one entry per node");
        let sig = LogicSignature::for_graph(&g, (0..colors).map(|c| format!("c{c}")).collect());
        let f = logic::random_hgml_r(&mut rng, &sig, depth);
        let res = (|| -> Result<usize, logic::LogicError> {
            let net = logic::compile_hgml_r(&f, &sig)?;
            let out = logic::run_compiled(&net, &g)?;
            let mut bad = 0;
            for (row, kind) in net.rows.iter().enumerate() {
                let truth = match kind {
                    RowKind::True => vec![true; n],
                    _ => logic::eval_all(&g, &sig, &logic::parse_formula(&net.labels[row])?)?,
                };
                for v in 0..n {
                    cells += 1;
                    if out[v][row] != i64::from(truth[v]) {
                        bad += 1;
                    }
                }
            }
            Ok(bad)
        })();
        match res {
            Ok(bad) => violations += bad,
            Err(e) => return CheckOutcome::new(name, false, format!("error on `{f}`: {e}")),
        }
    }
    CheckOutcome::new(
        name,
        violations == 0,
        format!("{violations} mismatches over {cells} (row, node) cells in {pairs} formulas"),
    )
}

/// Model variants exercised by the gradient and equivariance checks.
fn variant(i: usize, g: &RelationalHypergraph) -> ModelConfig {
    let base = model_config(ModelKind::Hcnet, g, 4, 2);
    match i % 4 {
        0 => base,
        1 => base.bare(),
        2 => ModelConfig {
            pe: PeKind::Learnable,
            init: InitVariant::PosOnly,
            message: nn::MessageMode::QueryIndependent,
            ..base
        },
        _ => model_config(ModelKind::Hrnet, g, 4, 2),
    }
}

/// Largest relative error between [`nn::backward`] and central
/// differences with step `eps`, over every entry of every tensor.
pub fn gradient_agreement(seed: u64, instances: usize, eps: f64, tolerance: f64) -> CheckOutcome {
    let name = "backward matches finite differences";
    let mut rng = gen::rng(seed);
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for i in 0..instances {
        let (g, q) = random_instance(&mut rng, 6);
        let config = variant(i, &g);
        let res = random_params(&config, seed.wrapping_add(i as u64), 0.8)
            .and_then(|p| nn::grad_check(&g, &q, &p, eps, None, seed.wrapping_add(i as u64)));
        match res {
            Ok(r) => {
                checked += r.checked;
                if r.max_rel_error > worst.0 {
                    worst = (r.max_rel_error, r.worst_tensor);
                }
            }
            Err(e) => return CheckOutcome::new(name, false, format!("error: {e}")),
        }
    }
    CheckOutcome::new(
        name,
        worst.0 < tolerance,
        format!(
            "max relative error {:.3e} (in {}) over {checked} entries, {instances} instances",
            worst.0,
            if worst.1.is_empty() { "-" } else { &worst.1 }
        ),
    )
}

/// Relabelling the nodes permutes features and scores the same way.
pub fn permutation_equivariance(seed: u64, permutations: usize, tolerance: f64) -> CheckOutcome {
    let name = "features and scores are permutation equivariant";
    let mut rng = gen::rng(seed);
    let mut worst = 0.0f64;
    for i in 0..permutations {
        let (g, q) = random_instance(&mut rng, 20);
        let config = variant(i, &g);
        let perm = gen::random_permutation(g.node_count(), rng.gen());
        let res = (|| -> Result<f64, Box<dyn std::error::Error>> {
            let p = random_params(&config, seed.wrapping_add(i as u64), 0.8)?;
            let pg = g.apply_permutation(&perm)?;
            let pq = q.apply_permutation(&perm);
            let run = |g: &RelationalHypergraph, q: &Query| -> Result<nn::FeatureMap, nn::NnError> {
                Ok(match config.kind {
                    ModelKind::Hcnet => nn::hcnet_forward(g, q, &p, 2)?.0,
                    ModelKind::Hrnet => nn::hrnet_forward(g, &p, 2)?.0,
                })
            };
            let (h, ph) = (run(&g, &q)?, run(&pg, &pq)?);
            let mut diff = h.permuted(&perm).max_abs_diff(&ph);
            let s = nn::score_candidates(&p, &h, &q)?;
            let ps = nn::score_candidates(&p, &ph, &pq)?;
            for v in 0..g.node_count() {
                diff = diff.max((s[v] - ps[perm[v]]).abs());
            }
            Ok(diff)
        })();
        match res {
            Ok(d) => worst = worst.max(d),
            Err(e) => return CheckOutcome::new(name, false, format!("error: {e}")),
        }
    }
    CheckOutcome::new(
        name,
        worst <= tolerance,
        format!("max deviation {worst:.3e} over {permutations} permutations"),
    )
}

/// Fixed ranking arithmetic: ranks `[1, 2, 4]` and a fully tied query.
pub fn ranking_arithmetic() -> CheckOutcome {
    let name = "ranking metric arithmetic";
    let outcome = |rank: f64| RankingOutcome {
        query: Query::new(0, vec![0], 2),
        truth: 0,
        rank,
        candidates: 5,
    };
    let report = aggregate(&[outcome(1.0), outcome(2.0), outcome(4.0)]);
    let tied = rank_of(&[0.5; 5], 2);
    match (report, tied) {
        (Ok(r), Ok(t)) => {
            let mrr_ok = (r.overall.mrr - 0.583333).abs() <= 1e-6
                && (r.overall.mrr - 1.75 / 3.0).abs() <= 1e-9;
            let hits_ok = r.overall.hits3 == 2.0 / 3.0;
            let tie_ok = t == 3.0;
            CheckOutcome::new(
                name,
                mrr_ok && hits_ok && tie_ok,
                format!(
                    "MRR {:.9}, Hits@3 {}, tied rank {t}",
                    r.overall.mrr, r.overall.hits3
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => CheckOutcome::new(name, false, format!("error: {e}")),
    }
}

/// Every exact check at its full size.
pub fn exact_suite(seed: u64) -> Vec<CheckOutcome> {
    vec![
        wl_refines_features(seed, 100, 5),
        pairwise_equivalence(seed, 50, 5),
        compiler_agreement(seed, 200, 4),
        gradient_agreement(seed, 10, 1e-5, 1e-4),
        permutation_equivariance(seed, 20, 1e-9),
        ranking_arithmetic(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(wl_refines_features(1, 8, 3).passed);
        assert!(pairwise_equivalence(1, 8, 3).passed);
        assert!(compiler_agreement(1, 20, 3).passed);
        assert!(gradient_agreement(1, 4, 1e-5, 1e-4).passed);
        assert!(permutation_equivariance(1, 4, 1e-9).passed);
        assert!(ranking_arithmetic().passed);
    }

    #[test]
    fn outcome_display() {
        let o = CheckOutcome::new("x", false, "bad".into());
        assert_eq!(o.to_string(), "[FAIL] x: bad");
    }
}
