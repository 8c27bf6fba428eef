//! Exact Weisfeiler-Leman style colour refinement on relational hypergraphs.
//!
//! Every engine builds an explicit structural key per node (or node pair),
//! sorts the distinct keys and numbers them in sorted order. Two elements get
//! the same colour exactly when their keys are equal, so partitions are exact
//! and reproducible; no hashing is involved.

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::hypergraph::{GraphError, HypergraphView, NodeId, Query, RelationId};

pub type Color = u32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RefineError {
    #[error("colorings cover {left} and {right} elements")]
    DomainMismatch { left: usize, right: usize },
    #[error("relation `{name}` has arity {arity}, expected a knowledge graph (arity 2 only)")]
    NotAKnowledgeGraph { name: String, arity: usize },
    #[error("initial coloring covers {found} elements, expected {expected}")]
    InitLength { expected: usize, found: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Assigns dense colour ids to structural keys: distinct keys are sorted and
/// numbered in that order, so the result does not depend on input order.
#[derive(Debug, Clone)]
pub struct ColorInterner<K: Ord> {
    table: Vec<K>,
}

impl<K: Ord + Clone> ColorInterner<K> {
    pub fn from_keys(keys: &[K]) -> Self {
        let mut table = keys.to_vec();
        table.sort();
        table.dedup();
        Self { table }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn id(&self, key: &K) -> Option<Color> {
        self.table.binary_search(key).ok().map(|i| i as Color)
    }

    pub fn key(&self, id: Color) -> &K {
        &self.table[id as usize]
    }
}

/// Interns a whole batch of keys and returns their colour ids.
pub fn intern_keys<K: Ord + Clone>(keys: &[K]) -> Vec<Color> {
    let interner = ColorInterner::from_keys(keys);
    keys.iter()
        .map(|k| interner.id(k).expect("key was interned"))
        .collect()
}

/// `true` iff equal colours in `a` imply equal colours in `b`.
pub fn refines(a: &[Color], b: &[Color]) -> Result<bool, RefineError> {
    if a.len() != b.len() {
        return Err(RefineError::DomainMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut image: HashMap<Color, Color> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if *image.entry(x).or_insert(y) != y {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn equivalent(a: &[Color], b: &[Color]) -> Result<bool, RefineError> {
    Ok(refines(a, b)? && refines(b, a)?)
}

pub fn class_count(colors: &[Color]) -> usize {
    let mut seen = colors.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Renumbers colours by first appearance, giving a canonical form of the
/// partition: two colorings are equivalent iff their canonical forms match.
pub fn canonical_partition(colors: &[Color]) -> Vec<Color> {
    let mut map: HashMap<Color, Color> = HashMap::new();
    colors
        .iter()
        .map(|&c| {
            let next = map.len() as Color;
            *map.entry(c).or_insert(next)
        })
        .collect()
}

/// Partition induced by exact equality of feature rows (`rows.len() / width`
/// rows). `-0.0` and `0.0` are identified; everything else compares by bits.
pub fn feature_partition(rows: &[f64], width: usize) -> Vec<Color> {
    if width == 0 {
        return vec![0; rows.len()];
    }
    let keys: Vec<Vec<u64>> = rows
        .chunks(width)
        .map(|row| {
            row.iter()
                .map(|&x| if x == 0.0 { 0 } else { x.to_bits() })
                .collect()
        })
        .collect();
    intern_keys(&keys)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeColoring {
    pub colors: Vec<Color>,
    pub round: usize,
}

impl NodeColoring {
    pub fn new(colors: Vec<Color>) -> Self {
        Self { colors, round: 0 }
    }

    pub fn uniform(n: usize) -> Self {
        Self::new(vec![0; n])
    }

    /// The node labelling carried by the graph (uniform when absent).
    pub fn from_graph<G: HypergraphView>(graph: &G) -> Self {
        Self::new(intern_keys(&graph.graph().colors()))
    }

    pub fn class_count(&self) -> usize {
        class_count(&self.colors)
    }

    pub fn refines(&self, other: &Self) -> Result<bool, RefineError> {
        refines(&self.colors, &other.colors)
    }

    pub fn equivalent(&self, other: &Self) -> Result<bool, RefineError> {
        equivalent(&self.colors, &other.colors)
    }
}

/// Colours over `V x V`, stored row-major: pair `(u, v)` at `u * n + v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairColoring {
    pub n: usize,
    pub colors: Vec<Color>,
    pub round: usize,
}

impl PairColoring {
    pub fn get(&self, u: NodeId, v: NodeId) -> Color {
        self.colors[u * self.n + v]
    }

    pub fn class_count(&self) -> usize {
        class_count(&self.colors)
    }
}

/// `η(u, v) = [u = v]`, which satisfies target node distinguishability.
pub fn diagonal_pair_init(n: usize) -> PairColoring {
    let mut colors = vec![0; n * n];
    for u in 0..n {
        colors[u * n + u] = 1;
    }
    PairColoring {
        n,
        colors,
        round: 0,
    }
}

/// Stopping rule for the node-level engines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounds {
    Fixed(usize),
    /// Run until the number of classes stops growing (at most `|V|` rounds).
    UntilStable,
}

type EdgeKey = (RelationId, Vec<(Color, usize)>);
type NodeKey = (Color, Vec<EdgeKey>);

fn hrwl1_key<G: HypergraphView>(graph: &G, colors: &[Color], v: NodeId) -> NodeKey {
    let g = graph.graph();
    let mut msgs: Vec<EdgeKey> = graph
        .active_incidence(v)
        .map(|(e, i)| {
            let edge = g.edge(e);
            let nbrs = edge
                .nodes
                .iter()
                .enumerate()
                .filter(|(idx, _)| idx + 1 != i)
                .map(|(idx, &w)| (colors[w], idx + 1))
                .collect();
            (edge.relation, nbrs)
        })
        .collect();
    msgs.sort();
    (colors[v], msgs)
}

/// One hrwl₁ round: the new colour of `v` interns its old colour together
/// with the multiset of `(relation, [(colour(w), j) for (w, j) in N_i(e)])`
/// over `(e, i) ∈ E(v)`.
pub fn hrwl1_step<G: HypergraphView>(graph: &G, coloring: &NodeColoring) -> NodeColoring {
    let keys: Vec<NodeKey> = (0..graph.node_count())
        .into_par_iter()
        .map(|v| hrwl1_key(graph, &coloring.colors, v))
        .collect();
    NodeColoring {
        colors: intern_keys(&keys),
        round: coloring.round + 1,
    }
}

/// Colorings for rounds `0..=L` (or until stable).
pub fn hrwl1_run<G: HypergraphView>(
    graph: &G,
    init: NodeColoring,
    rounds: Rounds,
) -> Result<Vec<NodeColoring>, RefineError> {
    if init.colors.len() != graph.node_count() {
        return Err(RefineError::InitLength {
            expected: graph.node_count(),
            found: init.colors.len(),
        });
    }
    let mut init = init;
    init.round = 0;
    let mut out = vec![init];
    let limit = match rounds {
        Rounds::Fixed(l) => l,
        Rounds::UntilStable => graph.node_count().max(1),
    };
    for _ in 0..limit {
        let last = out.last().expect("nonempty");
        let next = hrwl1_step(graph, last);
        let stable = next.class_count() == last.class_count();
        out.push(next);
        if rounds == Rounds::UntilStable && stable {
            break;
        }
    }
    Ok(out)
}

/// Conditioned initial colouring for a query: each given node is coloured by
/// the sorted set of positions it occupies in the query, every other node
/// gets a shared background colour. Graph node colours are ignored.
pub fn conditional_init<G: HypergraphView>(
    graph: &G,
    query: &Query,
) -> Result<NodeColoring, RefineError> {
    graph.graph().validate_query(query)?;
    let mut keys: Vec<Vec<usize>> = vec![Vec::new(); graph.node_count()];
    for (pos, u) in query.given_positions() {
        keys[u].push(pos);
    }
    Ok(NodeColoring::new(intern_keys(&keys)))
}

pub fn conditional_run<G: HypergraphView>(
    graph: &G,
    query: &Query,
    rounds: Rounds,
) -> Result<Vec<NodeColoring>, RefineError> {
    hrwl1_run(graph, conditional_init(graph, query)?, rounds)
}

fn require_kg<G: HypergraphView>(graph: &G) -> Result<(), RefineError> {
    match graph.graph().relations().iter().find(|r| r.arity != 2) {
        Some(r) => Err(RefineError::NotAKnowledgeGraph {
            name: r.name.clone(),
            arity: r.arity,
        }),
        None => Ok(()),
    }
}

fn check_pair_init(n: usize, init: &PairColoring) -> Result<(), RefineError> {
    if init.n != n || init.colors.len() != n * n {
        return Err(RefineError::InitLength {
            expected: n * n,
            found: init.colors.len(),
        });
    }
    Ok(())
}

/// Pairwise conditioned refinement on a knowledge graph: the colour of
/// `(u, v)` aggregates, for every `(e, i) ∈ E(v)`, the colour of `(u, w)`
/// for the other endpoint `w` at position `j`, tagged with `j` and `ρ(e)`.
pub fn hcwl2_run<G: HypergraphView>(
    graph: &G,
    init: PairColoring,
    rounds: usize,
) -> Result<Vec<PairColoring>, RefineError> {
    require_kg(graph)?;
    let n = graph.node_count();
    check_pair_init(n, &init)?;
    let g = graph.graph();
    let mut out = vec![PairColoring { round: 0, ..init }];
    for round in 1..=rounds {
        let prev = &out.last().expect("nonempty").colors;
        let keys: Vec<NodeKey> = (0..n * n)
            .into_par_iter()
            .map(|uv| {
                let (u, v) = (uv / n, uv % n);
                let mut msgs: Vec<EdgeKey> = graph
                    .active_incidence(v)
                    .map(|(e, i)| {
                        let edge = g.edge(e);
                        let j = 3 - i;
                        let w = edge.at(j);
                        (edge.relation, vec![(prev[u * n + w], j)])
                    })
                    .collect();
                msgs.sort();
                (prev[uv], msgs)
            })
            .collect();
        out.push(PairColoring {
            n,
            colors: intern_keys(&keys),
            round,
        });
    }
    Ok(out)
}

/// Relational pairwise refinement over the inverse-augmented graph: every
/// fact `r(v, w)` with `v ≠ w` gains a reversed copy `r⁻(w, v)` (relation id
/// `r + |R|`), self-loops are not reversed, and `(u, v)` aggregates
/// `(colour(u, w), relation)` over out-neighbours `w` of `v`.
pub fn rawl2plus_run<G: HypergraphView>(
    graph: &G,
    init: PairColoring,
    rounds: usize,
) -> Result<Vec<PairColoring>, RefineError> {
    require_kg(graph)?;
    let n = graph.node_count();
    check_pair_init(n, &init)?;
    let g = graph.graph();
    let num_rel = g.relations().len();
    let mut out_nbrs: Vec<Vec<(RelationId, NodeId)>> = vec![Vec::new(); n];
    for (e, edge) in g.edges().iter().enumerate() {
        if !graph.is_active(e) {
            continue;
        }
        let (a, b) = (edge.nodes[0], edge.nodes[1]);
        out_nbrs[a].push((edge.relation, b));
        if a != b {
            out_nbrs[b].push((edge.relation + num_rel, a));
        }
    }
    let mut out = vec![PairColoring { round: 0, ..init }];
    for round in 1..=rounds {
        let prev = &out.last().expect("nonempty").colors;
        let keys: Vec<(Color, Vec<(Color, RelationId)>)> = (0..n * n)
            .into_par_iter()
            .map(|uv| {
                let (u, v) = (uv / n, uv % n);
                let mut msgs: Vec<(Color, RelationId)> = out_nbrs[v]
                    .iter()
                    .map(|&(r, w)| (prev[u * n + w], r))
                    .collect();
                msgs.sort_unstable();
                (prev[uv], msgs)
            })
            .collect();
        out.push(PairColoring {
            n,
            colors: intern_keys(&keys),
            round,
        });
    }
    Ok(out)
}
