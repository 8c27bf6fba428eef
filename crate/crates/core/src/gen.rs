//! Seeded random instances used by property tests, the theorem suite and the
//! examples.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hypergraph::{HyperEdge, NodeId, Query, Relation, RelationalHypergraph};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random relational hypergraph with `n` nodes, `rels` relations of arity
/// `1..=max_arity` and `edges` facts. Nodes may repeat inside a fact.
pub fn random_hypergraph(
    n: usize,
    rels: usize,
    max_arity: usize,
    edges: usize,
    seed: u64,
) -> RelationalHypergraph {
    let mut rng = rng(seed);
    random_hypergraph_with(&mut rng, n, rels, max_arity, edges)
}

pub fn random_hypergraph_with(
    rng: &mut impl Rng,
    n: usize,
    rels: usize,
    max_arity: usize,
    edges: usize,
) -> RelationalHypergraph {
    assert!(n >= 1 && rels >= 1 && max_arity >= 1);
    let relations: Vec<Relation> = (0..rels)
        .map(|r| Relation::new(r, format!("r{r}"), rng.gen_range(1..=max_arity)))
        .collect();
    let facts = (0..edges)
        .map(|_| {
            let r = rng.gen_range(0..rels);
            let nodes = (0..relations[r].arity)
                .map(|_| rng.gen_range(0..n))
                .collect();
            HyperEdge::new(r, nodes)
        })
        .collect();
    RelationalHypergraph::new(relations, facts, n, None).expect("generated graph is valid")
}

/// Random knowledge graph (all relations binary) without duplicate facts.
/// Self-loops are only produced when `loops` is set.
pub fn random_kg(n: usize, rels: usize, edges: usize, loops: bool, seed: u64) -> RelationalHypergraph {
    let mut rng = rng(seed);
    let relations: Vec<Relation> = (0..rels)
        .map(|r| Relation::new(r, format!("r{r}"), 2))
        .collect();
    let mut facts: Vec<HyperEdge> = Vec::new();
    let mut attempts = 0;
    while facts.len() < edges && attempts < 20 * edges + 20 {
        attempts += 1;
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a == b && !loops {
            continue;
        }
        let fact = HyperEdge::new(rng.gen_range(0..rels), vec![a, b]);
        if !facts.contains(&fact) {
            facts.push(fact);
        }
    }
    RelationalHypergraph::new(relations, facts, n, None).expect("generated graph is valid")
}

/// Random node colouring with `colors` distinct labels.
pub fn random_colors(rng: &mut impl Rng, n: usize, colors: u32) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..colors)).collect()
}

pub fn random_permutation(n: usize, seed: u64) -> Vec<NodeId> {
    let mut perm: Vec<NodeId> = (0..n).collect();
    perm.shuffle(&mut rng(seed));
    perm
}

/// Random query over a random relation of `graph`, given nodes drawn
/// uniformly (repeats allowed).
pub fn random_query(graph: &RelationalHypergraph, seed: u64) -> Query {
    let mut rng = rng(seed);
    random_query_with(&mut rng, graph)
}

pub fn random_query_with(rng: &mut impl Rng, graph: &RelationalHypergraph) -> Query {
    let rel = &graph.relations()[rng.gen_range(0..graph.relations().len())];
    let given = (1..rel.arity)
        .map(|_| rng.gen_range(0..graph.node_count()))
        .collect();
    Query::new(rel.id, given, rng.gen_range(1..=rel.arity))
}
