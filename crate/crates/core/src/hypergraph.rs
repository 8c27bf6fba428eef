//! Relational hypergraphs: relations with fixed arity, ordered typed hyperedges
//! and the edge-position incidence index `E(v)`.
//!
//! Positions inside a hyperedge are 1-based throughout the crate, so
//! `edge.nodes[i - 1]` is the node at position `i`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;
pub type RelationId = usize;
pub type EdgeId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("relation ids must be contiguous: expected {expected}, found {found}")]
    NonContiguousRelation { expected: usize, found: usize },
    #[error("relation `{0}` declared more than once")]
    DuplicateRelation(String),
    #[error("relation `{0}` has arity 0")]
    ZeroArity(String),
    #[error("edge {edge} references unknown relation {relation}")]
    UnknownRelation { edge: EdgeId, relation: RelationId },
    #[error("edge {edge} has {found} nodes but its relation has arity {expected}")]
    ArityMismatch {
        edge: EdgeId,
        expected: usize,
        found: usize,
    },
    #[error("edge {edge}, position {position}: node {node} out of range")]
    NodeOutOfRange {
        edge: EdgeId,
        position: usize,
        node: NodeId,
    },
    #[error("node {0} out of range")]
    NodeIdOutOfRange(NodeId),
    #[error("position {position} out of range for edge of arity {arity}")]
    PositionOutOfRange { position: usize, arity: usize },
    #[error("color map covers {found} nodes, graph has {expected}")]
    ColorLength { expected: usize, found: usize },
    #[error("permutation is not a bijection on 0..{0}")]
    NotABijection(usize),
    #[error("query relation {relation} has arity {arity} but {given} given nodes were supplied for target {target}")]
    QueryArityMismatch {
        relation: RelationId,
        arity: usize,
        given: usize,
        target: usize,
    },
    #[error("fact not found in graph: relation {relation} {nodes:?}")]
    FactNotFound {
        relation: RelationId,
        nodes: Vec<NodeId>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub id: RelationId,
    pub name: String,
    pub arity: usize,
}

impl Relation {
    pub fn new(id: RelationId, name: impl Into<String>, arity: usize) -> Self {
        Self {
            id,
            name: name.into(),
            arity,
        }
    }
}

/// An ordered fact `r(u_1, ..., u_k)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HyperEdge {
    pub relation: RelationId,
    pub nodes: Vec<NodeId>,
}

impl HyperEdge {
    pub fn new(relation: RelationId, nodes: Vec<NodeId>) -> Self {
        Self { relation, nodes }
    }

    pub fn arity(&self) -> usize {
        self.nodes.len()
    }

    /// Node at 1-based position `i`.
    pub fn at(&self, i: usize) -> NodeId {
        self.nodes[i - 1]
    }
}

/// A link-prediction query `(q, ũ, t)`: relation, the `k - 1` given nodes in
/// position order (skipping `t`), and the open target position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub relation: RelationId,
    pub given: Vec<NodeId>,
    pub target: usize,
}

impl Query {
    pub fn new(relation: RelationId, given: Vec<NodeId>, target: usize) -> Self {
        Self {
            relation,
            given,
            target,
        }
    }

    /// Query obtained from a fact by opening position `t`.
    pub fn from_fact(fact: &HyperEdge, t: usize) -> Self {
        let given = fact
            .nodes
            .iter()
            .enumerate()
            .filter(|(idx, _)| idx + 1 != t)
            .map(|(_, &n)| n)
            .collect();
        Self::new(fact.relation, given, t)
    }

    pub fn arity(&self) -> usize {
        self.given.len() + 1
    }

    /// Iterator over `(position, node)` for the given nodes, positions 1-based.
    pub fn given_positions(&self) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        let t = self.target;
        self.given
            .iter()
            .enumerate()
            .map(move |(idx, &n)| (if idx + 1 < t { idx + 1 } else { idx + 2 }, n))
    }

    /// The full fact obtained by placing `candidate` at the target position.
    pub fn complete(&self, candidate: NodeId) -> HyperEdge {
        let mut nodes = Vec::with_capacity(self.arity());
        nodes.extend_from_slice(&self.given[..self.target - 1]);
        nodes.push(candidate);
        nodes.extend_from_slice(&self.given[self.target - 1..]);
        HyperEdge::new(self.relation, nodes)
    }

    pub fn apply_permutation(&self, perm: &[NodeId]) -> Self {
        Self::new(
            self.relation,
            self.given.iter().map(|&n| perm[n]).collect(),
            self.target,
        )
    }
}

/// Immutable relational hypergraph with a CSR incidence index.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalHypergraph {
    node_count: usize,
    relations: Vec<Relation>,
    edges: Vec<HyperEdge>,
    node_colors: Option<Vec<u32>>,
    incidence_offsets: Vec<usize>,
    incidence: Vec<(EdgeId, usize)>,
}

impl RelationalHypergraph {
    /// Builds the graph and its incidence index. Edges keep their input order;
    /// duplicate facts stay distinct edges.
    pub fn new(
        relations: Vec<Relation>,
        edges: Vec<HyperEdge>,
        node_count: usize,
        colors: Option<Vec<u32>>,
    ) -> Result<Self, GraphError> {
        let mut names = HashMap::new();
        for (idx, rel) in relations.iter().enumerate() {
            if rel.id != idx {
                return Err(GraphError::NonContiguousRelation {
                    expected: idx,
                    found: rel.id,
                });
            }
            if rel.arity == 0 {
                return Err(GraphError::ZeroArity(rel.name.clone()));
            }
            if names.insert(rel.name.as_str(), idx).is_some() {
                return Err(GraphError::DuplicateRelation(rel.name.clone()));
            }
        }
        for (e, edge) in edges.iter().enumerate() {
            let rel = relations
                .get(edge.relation)
                .ok_or(GraphError::UnknownRelation {
                    edge: e,
                    relation: edge.relation,
                })?;
            if rel.arity != edge.nodes.len() {
                return Err(GraphError::ArityMismatch {
                    edge: e,
                    expected: rel.arity,
                    found: edge.nodes.len(),
                });
            }
            for (idx, &node) in edge.nodes.iter().enumerate() {
                if node >= node_count {
                    return Err(GraphError::NodeOutOfRange {
                        edge: e,
                        position: idx + 1,
                        node,
                    });
                }
            }
        }
        if let Some(c) = &colors {
            if c.len() != node_count {
                return Err(GraphError::ColorLength {
                    expected: node_count,
                    found: c.len(),
                });
            }
        }

        let mut counts = vec![0usize; node_count + 1];
        for edge in &edges {
            for &node in &edge.nodes {
                counts[node + 1] += 1;
            }
        }
        for v in 0..node_count {
            counts[v + 1] += counts[v];
        }
        let offsets = counts;
        let mut fill = offsets.clone();
        let mut incidence = vec![(0, 0); offsets[node_count]];
        for (e, edge) in edges.iter().enumerate() {
            for (idx, &node) in edge.nodes.iter().enumerate() {
                incidence[fill[node]] = (e, idx + 1);
                fill[node] += 1;
            }
        }

        Ok(Self {
            node_count,
            relations,
            edges,
            node_colors: colors,
            incidence_offsets: offsets,
            incidence,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn relation(&self, id: RelationId) -> &Relation {
        &self.relations[id]
    }

    pub fn relation_by_name(&self, name: &str) -> Option<&Relation> {
        self.relations.iter().find(|r| r.name == name)
    }

    pub fn edges(&self) -> &[HyperEdge] {
        &self.edges
    }

    pub fn edge(&self, e: EdgeId) -> &HyperEdge {
        &self.edges[e]
    }

    pub fn max_arity(&self) -> usize {
        self.relations.iter().map(|r| r.arity).max().unwrap_or(0)
    }

    /// Node color, defaulting to a single uniform color 0.
    pub fn color(&self, v: NodeId) -> u32 {
        self.node_colors.as_ref().map_or(0, |c| c[v])
    }

    pub fn colors(&self) -> Vec<u32> {
        (0..self.node_count).map(|v| self.color(v)).collect()
    }

    pub fn has_colors(&self) -> bool {
        self.node_colors.is_some()
    }

    /// `E(v)`: the `(edge, position)` pairs with `e(i) = v`, ordered by edge id
    /// then position.
    pub fn incidence(&self, v: NodeId) -> &[(EdgeId, usize)] {
        &self.incidence[self.incidence_offsets[v]..self.incidence_offsets[v + 1]]
    }

    pub fn try_incidence(&self, v: NodeId) -> Result<&[(EdgeId, usize)], GraphError> {
        if v >= self.node_count {
            return Err(GraphError::NodeIdOutOfRange(v));
        }
        Ok(self.incidence(v))
    }

    /// `N_i(e)`: the `(node, position)` pairs of `e` other than position `i`,
    /// sorted by position.
    pub fn positional_neighborhood(
        &self,
        e: EdgeId,
        i: usize,
    ) -> Result<Vec<(NodeId, usize)>, GraphError> {
        let edge = &self.edges[e];
        if i == 0 || i > edge.arity() {
            return Err(GraphError::PositionOutOfRange {
                position: i,
                arity: edge.arity(),
            });
        }
        Ok(edge
            .nodes
            .iter()
            .enumerate()
            .filter(|(idx, _)| idx + 1 != i)
            .map(|(idx, &n)| (n, idx + 1))
            .collect())
    }

    /// Relabels every node through `perm` (node `v` becomes `perm[v]`).
    pub fn apply_permutation(&self, perm: &[NodeId]) -> Result<Self, GraphError> {
        check_bijection(perm, self.node_count)?;
        let edges = self
            .edges
            .iter()
            .map(|e| HyperEdge::new(e.relation, e.nodes.iter().map(|&n| perm[n]).collect()))
            .collect();
        let colors = self.node_colors.as_ref().map(|c| {
            let mut out = vec![0; c.len()];
            for (v, &col) in c.iter().enumerate() {
                out[perm[v]] = col;
            }
            out
        });
        Self::new(self.relations.clone(), edges, self.node_count, colors)
    }

    /// Same graph with a different edge list (relations and colors kept).
    pub fn with_edges(&self, edges: Vec<HyperEdge>) -> Result<Self, GraphError> {
        Self::new(
            self.relations.clone(),
            edges,
            self.node_count,
            self.node_colors.clone(),
        )
    }

    pub fn with_colors(&self, colors: Option<Vec<u32>>) -> Result<Self, GraphError> {
        Self::new(
            self.relations.clone(),
            self.edges.clone(),
            self.node_count,
            colors,
        )
    }

    /// Ids of every edge equal to `fact`.
    pub fn find_edges(&self, fact: &HyperEdge) -> Vec<EdgeId> {
        let Some(&first) = fact.nodes.first() else {
            return Vec::new();
        };
        if first >= self.node_count {
            return Vec::new();
        }
        self.incidence(first)
            .iter()
            .filter(|&&(e, i)| i == 1 && self.edges[e] == *fact)
            .map(|&(e, _)| e)
            .collect()
    }

    pub fn validate_query(&self, query: &Query) -> Result<(), GraphError> {
        let arity = self
            .relations
            .get(query.relation)
            .map(|r| r.arity)
            .ok_or(GraphError::UnknownRelation {
                edge: usize::MAX,
                relation: query.relation,
            })?;
        if query.given.len() + 1 != arity || query.target == 0 || query.target > arity {
            return Err(GraphError::QueryArityMismatch {
                relation: query.relation,
                arity,
                given: query.given.len(),
                target: query.target,
            });
        }
        if let Some(&bad) = query.given.iter().find(|&&n| n >= self.node_count) {
            return Err(GraphError::NodeIdOutOfRange(bad));
        }
        Ok(())
    }
}

pub(crate) fn check_bijection(perm: &[NodeId], n: usize) -> Result<(), GraphError> {
    if perm.len() != n {
        return Err(GraphError::NotABijection(n));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(GraphError::NotABijection(n));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Inverse of a permutation given as `perm[v] = image of v`.
pub fn invert_permutation(perm: &[NodeId]) -> Vec<NodeId> {
    let mut inv = vec![0; perm.len()];
    for (v, &p) in perm.iter().enumerate() {
        inv[p] = v;
    }
    inv
}

/// Read access to a hypergraph whose edges may be partially hidden.
///
/// Message passing runs over a view so that training can mask the facts of
/// the current batch without copying the graph.
pub trait HypergraphView: Sync {
    fn graph(&self) -> &RelationalHypergraph;

    fn is_active(&self, e: EdgeId) -> bool;

    fn node_count(&self) -> usize {
        self.graph().node_count()
    }

    fn active_incidence(&self, v: NodeId) -> impl Iterator<Item = (EdgeId, usize)> + '_ {
        self.graph()
            .incidence(v)
            .iter()
            .copied()
            .filter(move |&(e, _)| self.is_active(e))
    }
}

impl HypergraphView for RelationalHypergraph {
    fn graph(&self) -> &RelationalHypergraph {
        self
    }

    fn is_active(&self, _e: EdgeId) -> bool {
        true
    }
}

/// A graph with a set of edges hidden from message passing.
#[derive(Debug, Clone)]
pub struct MaskedView<'a> {
    graph: &'a RelationalHypergraph,
    masked: Vec<EdgeId>,
}

impl<'a> MaskedView<'a> {
    pub fn new(graph: &'a RelationalHypergraph, mut masked: Vec<EdgeId>) -> Self {
        masked.sort_unstable();
        masked.dedup();
        Self { graph, masked }
    }

    pub fn masked_edges(&self) -> &[EdgeId] {
        &self.masked
    }
}

impl HypergraphView for MaskedView<'_> {
    fn graph(&self) -> &RelationalHypergraph {
        self.graph
    }

    fn is_active(&self, e: EdgeId) -> bool {
        self.masked.binary_search(&e).is_err()
    }
}

impl<T: HypergraphView> HypergraphView for &T {
    fn graph(&self) -> &RelationalHypergraph {
        (**self).graph()
    }

    fn is_active(&self, e: EdgeId) -> bool {
        (**self).is_active(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hawking=0, Oxford=1, Physics=2, BA=3, Nobel=4.
    fn small_mixed_arity_graph() -> RelationalHypergraph {
        RelationalHypergraph::new(
            vec![Relation::new(0, "StudyDegree", 4), Relation::new(1, "Awarded", 3)],
            vec![
                HyperEdge::new(0, vec![0, 1, 2, 3]),
                HyperEdge::new(1, vec![2, 4, 1]),
            ],
            5,
            None,
        )
        .unwrap()
    }

    #[test]
    fn builds_small_mixed_arity_graph() {
        let g = small_mixed_arity_graph();
        assert_eq!(g.node_count(), 5);
        assert_eq!(g.edges().len(), 2);
        assert_eq!(g.incidence(1), &[(0, 2), (1, 3)]);
        assert_eq!(g.incidence(2), &[(0, 3), (1, 1)]);
        assert_eq!(g.incidence(0), &[(0, 1)]);
    }

    #[test]
    fn empty_edge_list_gives_empty_incidence() {
        let g = RelationalHypergraph::new(vec![Relation::new(0, "r", 2)], vec![], 3, None).unwrap();
        for v in 0..3 {
            assert!(g.incidence(v).is_empty());
        }
    }

    #[test]
    fn arity_mismatch_is_rejected() {
        let err = RelationalHypergraph::new(
            vec![Relation::new(0, "r", 4)],
            vec![HyperEdge::new(0, vec![0, 1, 2])],
            3,
            None,
        )
        .unwrap_err();
        assert_eq!(
            err,
            GraphError::ArityMismatch {
                edge: 0,
                expected: 4,
                found: 3
            }
        );
    }

    #[test]
    fn node_out_of_range_is_rejected() {
        let err = RelationalHypergraph::new(
            vec![Relation::new(0, "r", 2)],
            vec![HyperEdge::new(0, vec![0, 7])],
            3,
            None,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            GraphError::NodeOutOfRange {
                edge: 0,
                position: 2,
                node: 7
            }
        ));
        assert!(small_mixed_arity_graph().try_incidence(9).is_err());
    }

    #[test]
    fn isolated_node_has_no_incidence() {
        let g = RelationalHypergraph::new(
            vec![Relation::new(0, "r", 2)],
            vec![HyperEdge::new(0, vec![0, 1])],
            3,
            None,
        )
        .unwrap();
        assert!(g.incidence(2).is_empty());
    }

    #[test]
    fn positional_neighborhoods() {
        let g = small_mixed_arity_graph();
        assert_eq!(
            g.positional_neighborhood(0, 1).unwrap(),
            vec![(1, 2), (2, 3), (3, 4)]
        );
        let g2 = RelationalHypergraph::new(
            vec![Relation::new(0, "r", 2), Relation::new(1, "s", 3)],
            vec![HyperEdge::new(0, vec![0, 1]), HyperEdge::new(1, vec![0, 0, 1])],
            2,
            None,
        )
        .unwrap();
        assert_eq!(g2.positional_neighborhood(0, 2).unwrap(), vec![(0, 1)]);
        assert_eq!(g2.positional_neighborhood(1, 3).unwrap(), vec![(0, 1), (0, 2)]);
        assert!(matches!(
            g2.positional_neighborhood(0, 3),
            Err(GraphError::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn identity_permutation_keeps_edges() {
        let g = small_mixed_arity_graph();
        let p = g.apply_permutation(&[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(p.edges(), g.edges());
        assert!(g.apply_permutation(&[0, 0, 1, 2, 3]).is_err());
        assert!(g.apply_permutation(&[0, 1]).is_err());
    }

    #[test]
    fn query_completion_and_positions() {
        let q = Query::new(0, vec![10, 20, 30], 2);
        assert_eq!(q.complete(5).nodes, vec![10, 5, 20, 30]);
        assert_eq!(
            q.given_positions().collect::<Vec<_>>(),
            vec![(1, 10), (3, 20), (4, 30)]
        );
        let fact = HyperEdge::new(0, vec![1, 2, 3]);
        assert_eq!(Query::from_fact(&fact, 3).given, vec![1, 2]);
        assert_eq!(Query::from_fact(&fact, 1).complete(1), fact);
    }

    #[test]
    fn masked_view_hides_edges() {
        let g = small_mixed_arity_graph();
        let view = MaskedView::new(&g, vec![1]);
        assert_eq!(view.active_incidence(1).collect::<Vec<_>>(), vec![(0, 2)]);
        assert_eq!(g.find_edges(&HyperEdge::new(1, vec![2, 4, 1])), vec![1]);
    }
}
