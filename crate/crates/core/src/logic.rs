//! Hypergraph graded modal logic: formulas, a direct model checker, and a
//! compiler from conjunction-guarded formulas to a fixed-form message passing
//! network with integer parameters.
//!
//! Text syntax:
//!
//! ```text
//! F := color(a) | is(b) | not F | (F and F) | (F or F)
//!    | exists>=N r@i [j:F, ...]      conjunction guard, one formula per position
//!    | exists>=N r@i {G}             Boolean guard
//! G := j:F | not G | (G and G) | (G or G)
//! ```
//!
//! `(F or G)` is sugar for `not (not F and not G)`.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::hypergraph::{HyperEdge, NodeId, RelationalHypergraph};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LogicError {
    #[error("unknown color `{0}`")]
    UnknownColor(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("unknown constant `{0}`")]
    UnknownConstant(String),
    #[error("constants `{0}` and `{1}` are interpreted by the same node")]
    InvalidConstants(String, String),
    #[error("constant `{name}` interpreted by node {node}, graph has {nodes} nodes")]
    ConstantOutOfRange {
        name: String,
        node: NodeId,
        nodes: usize,
    },
    #[error("position {position} is not a valid guard position of `{relation}` (arity {arity}, bound position {bound})")]
    InvalidPosition {
        relation: String,
        position: usize,
        arity: usize,
        bound: usize,
    },
    #[error("counting quantifier needs N >= 1")]
    ZeroCount,
    #[error("node {node} has color id {color}, outside the signature's {colors} colors")]
    ColorOutOfSignature { node: NodeId, color: u32, colors: usize },
    #[error("node {0} out of range")]
    NodeOutOfRange(NodeId),
    #[error("formula is not in restricted (conjunction-guarded) form")]
    NotRestricted,
    #[error("constant atoms cannot be compiled")]
    ConstantsUnsupported,
    #[error("graph relations do not match the signature: {0}")]
    SignatureMismatch(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
}

/// A unary formula with free variable `x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Formula {
    Color(String),
    /// `x = b` for a constant symbol `b`.
    Const(String),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    /// `x` occurs at `position` of at least `count` edges of `relation` whose
    /// other entries satisfy `guard`.
    Exists {
        count: usize,
        relation: String,
        position: usize,
        guard: Guard,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Guard {
    /// One optional formula per other position; missing positions are
    /// unconstrained.
    Conj(BTreeMap<usize, Formula>),
    Bool(GuardExpr),
}

/// Boolean combination of formulas over the bound positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GuardExpr {
    At(usize, Box<Formula>),
    Not(Box<GuardExpr>),
    And(Box<GuardExpr>, Box<GuardExpr>),
    Or(Box<GuardExpr>, Box<GuardExpr>),
}

impl Formula {
    pub fn color(a: impl Into<String>) -> Self {
        Formula::Color(a.into())
    }

    pub fn constant(b: impl Into<String>) -> Self {
        Formula::Const(b.into())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(f: Formula) -> Self {
        Formula::Not(Box::new(f))
    }

    pub fn and(a: Formula, b: Formula) -> Self {
        Formula::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Formula, b: Formula) -> Self {
        Formula::not(Formula::and(Formula::not(a), Formula::not(b)))
    }

    pub fn exists(
        count: usize,
        relation: impl Into<String>,
        position: usize,
        guards: impl IntoIterator<Item = (usize, Formula)>,
    ) -> Self {
        Formula::Exists {
            count,
            relation: relation.into(),
            position,
            guard: Guard::Conj(guards.into_iter().collect()),
        }
    }

    pub fn exists_bool(
        count: usize,
        relation: impl Into<String>,
        position: usize,
        guard: GuardExpr,
    ) -> Self {
        Formula::Exists {
            count,
            relation: relation.into(),
            position,
            guard: Guard::Bool(guard),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Formula::Color(_) | Formula::Const(_) => 1,
            Formula::Not(f) => 1 + f.depth(),
            Formula::And(a, b) => 1 + a.depth().max(b.depth()),
            Formula::Exists { guard, .. } => {
                1 + match guard {
                    Guard::Conj(m) => m.values().map(Formula::depth).max().unwrap_or(0),
                    Guard::Bool(g) => g.depth(),
                }
            }
        }
    }

    pub fn uses_constants(&self) -> bool {
        match self {
            Formula::Color(_) => false,
            Formula::Const(_) => true,
            Formula::Not(f) => f.uses_constants(),
            Formula::And(a, b) => a.uses_constants() || b.uses_constants(),
            Formula::Exists { guard, .. } => match guard {
                Guard::Conj(m) => m.values().any(Formula::uses_constants),
                Guard::Bool(g) => g.uses_constants(),
            },
        }
    }
}

impl GuardExpr {
    pub fn at(j: usize, f: Formula) -> Self {
        GuardExpr::At(j, Box::new(f))
    }

    fn depth(&self) -> usize {
        match self {
            GuardExpr::At(_, f) => f.depth(),
            GuardExpr::Not(g) => g.depth(),
            GuardExpr::And(a, b) | GuardExpr::Or(a, b) => a.depth().max(b.depth()),
        }
    }

    fn uses_constants(&self) -> bool {
        match self {
            GuardExpr::At(_, f) => f.uses_constants(),
            GuardExpr::Not(g) => g.uses_constants(),
            GuardExpr::And(a, b) | GuardExpr::Or(a, b) => a.uses_constants() || b.uses_constants(),
        }
    }

    /// The per-position conjunction this expression denotes, if it is an
    /// `and`-tree of atoms over pairwise distinct positions.
    pub fn as_conjunction(&self) -> Option<BTreeMap<usize, Formula>> {
        fn collect(g: &GuardExpr, out: &mut BTreeMap<usize, Formula>) -> bool {
            match g {
                GuardExpr::At(j, f) => out.insert(*j, (**f).clone()).is_none(),
                GuardExpr::And(a, b) => collect(a, out) && collect(b, out),
                _ => false,
            }
        }
        let mut out = BTreeMap::new();
        collect(self, &mut out).then_some(out)
    }
}

impl Guard {
    fn as_conjunction(&self) -> Option<BTreeMap<usize, Formula>> {
        match self {
            Guard::Conj(m) => Some(m.clone()),
            Guard::Bool(g) => g.as_conjunction(),
        }
    }
}

/// `true` iff every counting quantifier is guarded by a per-position
/// conjunction of restricted formulas.
pub fn is_hgml_r(formula: &Formula) -> bool {
    match formula {
        Formula::Color(_) | Formula::Const(_) => true,
        Formula::Not(f) => is_hgml_r(f),
        Formula::And(a, b) => is_hgml_r(a) && is_hgml_r(b),
        Formula::Exists { guard, .. } => match guard.as_conjunction() {
            Some(m) => m.values().all(is_hgml_r),
            None => false,
        },
    }
}

/// Colours, relations and constant interpretations formulas are read over.
/// Graph colour id `c` denotes `colors[c]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogicSignature {
    pub colors: Vec<String>,
    pub relations: Vec<(String, usize)>,
    pub constants: Vec<(String, NodeId)>,
}

impl LogicSignature {
    pub fn new(colors: Vec<String>, relations: Vec<(String, usize)>) -> Self {
        Self {
            colors,
            relations,
            constants: Vec::new(),
        }
    }

    /// Signature with the graph's relations and the given colour names.
    pub fn for_graph(graph: &RelationalHypergraph, colors: Vec<String>) -> Self {
        Self::new(
            colors,
            graph
                .relations()
                .iter()
                .map(|r| (r.name.clone(), r.arity))
                .collect(),
        )
    }

    pub fn with_constants(mut self, constants: Vec<(String, NodeId)>) -> Self {
        self.constants = constants;
        self
    }

    fn color_id(&self, a: &str) -> Result<u32, LogicError> {
        self.colors
            .iter()
            .position(|c| c == a)
            .map(|i| i as u32)
            .ok_or_else(|| LogicError::UnknownColor(a.to_string()))
    }

    fn relation_id(&self, r: &str) -> Result<(usize, usize), LogicError> {
        self.relations
            .iter()
            .position(|(name, _)| name == r)
            .map(|i| (i, self.relations[i].1))
            .ok_or_else(|| LogicError::UnknownRelation(r.to_string()))
    }

    fn check_constants(&self, nodes: usize) -> Result<(), LogicError> {
        for (i, (a, u)) in self.constants.iter().enumerate() {
            if *u >= nodes {
                return Err(LogicError::ConstantOutOfRange {
                    name: a.clone(),
                    node: *u,
                    nodes,
                });
            }
            if let Some((b, _)) = self.constants[..i].iter().find(|(_, w)| w == u) {
                return Err(LogicError::InvalidConstants(b.clone(), a.clone()));
            }
        }
        Ok(())
    }

    /// Checks the graph's relations are exactly the signature's, in order.
    fn check_graph(&self, graph: &RelationalHypergraph) -> Result<(), LogicError> {
        let ours: Vec<(String, usize)> = graph
            .relations()
            .iter()
            .map(|r| (r.name.clone(), r.arity))
            .collect();
        if ours != self.relations {
            return Err(LogicError::SignatureMismatch(format!(
                "graph has {ours:?}, signature has {:?}",
                self.relations
            )));
        }
        for v in 0..graph.node_count() {
            let c = graph.color(v);
            if c as usize >= self.colors.len() {
                return Err(LogicError::ColorOutOfSignature {
                    node: v,
                    color: c,
                    colors: self.colors.len(),
                });
            }
        }
        Ok(())
    }
}

fn check_position(
    relation: &str,
    arity: usize,
    bound: usize,
    position: usize,
) -> Result<(), LogicError> {
    if position == 0 || position > arity || position == bound {
        return Err(LogicError::InvalidPosition {
            relation: relation.to_string(),
            position,
            arity,
            bound,
        });
    }
    Ok(())
}

struct Evaluator<'a> {
    graph: &'a RelationalHypergraph,
    sig: &'a LogicSignature,
    allow_constants: bool,
}

impl Evaluator<'_> {
    fn eval(&self, f: &Formula) -> Result<Vec<bool>, LogicError> {
        let n = self.graph.node_count();
        Ok(match f {
            Formula::Color(a) => {
                let id = self.sig.color_id(a)?;
                (0..n).map(|v| self.graph.color(v) == id).collect()
            }
            Formula::Const(b) => {
                if !self.allow_constants {
                    return Err(LogicError::UnknownConstant(b.clone()));
                }
                let (_, u) = self
                    .sig
                    .constants
                    .iter()
                    .find(|(name, _)| name == b)
                    .ok_or_else(|| LogicError::UnknownConstant(b.clone()))?;
                (0..n).map(|v| v == *u).collect()
            }
            Formula::Not(g) => self.eval(g)?.into_iter().map(|x| !x).collect(),
            Formula::And(a, b) => {
                let (a, b) = (self.eval(a)?, self.eval(b)?);
                a.into_iter().zip(b).map(|(x, y)| x && y).collect()
            }
            Formula::Exists {
                count,
                relation,
                position,
                guard,
            } => {
                if *count == 0 {
                    return Err(LogicError::ZeroCount);
                }
                let rel = self
                    .graph
                    .relation_by_name(relation)
                    .ok_or_else(|| LogicError::UnknownRelation(relation.clone()))?;
                let (rel_id, arity) = (rel.id, rel.arity);
                if *position == 0 || *position > arity {
                    return Err(LogicError::InvalidPosition {
                        relation: relation.clone(),
                        position: *position,
                        arity,
                        bound: *position,
                    });
                }
                let check: Box<dyn Fn(&HyperEdge) -> bool + '_> = match guard {
                    Guard::Conj(m) => {
                        let mut parts = Vec::new();
                        for (&j, g) in m {
                            check_position(relation, arity, *position, j)?;
                            parts.push((j, self.eval(g)?));
                        }
                        Box::new(move |e: &HyperEdge| parts.iter().all(|(j, sat)| sat[e.at(*j)]))
                    }
                    Guard::Bool(g) => {
                        let compiled = self.eval_guard(g, relation, arity, *position)?;
                        Box::new(move |e: &HyperEdge| compiled.holds(e))
                    }
                };
                let mut counts = vec![0usize; n];
                for e in self.graph.edges() {
                    if e.relation == rel_id && check(e) {
                        counts[e.at(*position)] += 1;
                    }
                }
                counts.into_iter().map(|c| c >= *count).collect()
            }
        })
    }

    fn eval_guard(
        &self,
        g: &GuardExpr,
        relation: &str,
        arity: usize,
        bound: usize,
    ) -> Result<EvaluatedGuard, LogicError> {
        Ok(match g {
            GuardExpr::At(j, f) => {
                check_position(relation, arity, bound, *j)?;
                EvaluatedGuard::At(*j, self.eval(f)?)
            }
            GuardExpr::Not(a) => {
                EvaluatedGuard::Not(Box::new(self.eval_guard(a, relation, arity, bound)?))
            }
            GuardExpr::And(a, b) => EvaluatedGuard::And(
                Box::new(self.eval_guard(a, relation, arity, bound)?),
                Box::new(self.eval_guard(b, relation, arity, bound)?),
            ),
            GuardExpr::Or(a, b) => EvaluatedGuard::Or(
                Box::new(self.eval_guard(a, relation, arity, bound)?),
                Box::new(self.eval_guard(b, relation, arity, bound)?),
            ),
        })
    }
}

enum EvaluatedGuard {
    At(usize, Vec<bool>),
    Not(Box<EvaluatedGuard>),
    And(Box<EvaluatedGuard>, Box<EvaluatedGuard>),
    Or(Box<EvaluatedGuard>, Box<EvaluatedGuard>),
}

impl EvaluatedGuard {
    fn holds(&self, e: &HyperEdge) -> bool {
        match self {
            EvaluatedGuard::At(j, sat) => sat[e.at(*j)],
            EvaluatedGuard::Not(g) => !g.holds(e),
            EvaluatedGuard::And(a, b) => a.holds(e) && b.holds(e),
            EvaluatedGuard::Or(a, b) => a.holds(e) || b.holds(e),
        }
    }
}

fn check_colors(graph: &RelationalHypergraph, sig: &LogicSignature) -> Result<(), LogicError> {
    for v in 0..graph.node_count() {
        let c = graph.color(v);
        if c as usize >= sig.colors.len() {
            return Err(LogicError::ColorOutOfSignature {
                node: v,
                color: c,
                colors: sig.colors.len(),
            });
        }
    }
    Ok(())
}

/// Satisfaction of `formula` at every node. Counting quantifiers count edges
/// `e` with `ρ(e) = r`, `e(i) = v` and the guard true on the other entries.
pub fn eval_all(
    graph: &RelationalHypergraph,
    sig: &LogicSignature,
    formula: &Formula,
) -> Result<Vec<bool>, LogicError> {
    check_colors(graph, sig)?;
    Evaluator {
        graph,
        sig,
        allow_constants: false,
    }
    .eval(formula)
}

pub fn eval_formula(
    graph: &RelationalHypergraph,
    sig: &LogicSignature,
    formula: &Formula,
    node: NodeId,
) -> Result<bool, LogicError> {
    if node >= graph.node_count() {
        return Err(LogicError::NodeOutOfRange(node));
    }
    Ok(eval_all(graph, sig, formula)?[node])
}

/// Like [`eval_all`] with constant atoms `x = b` resolved through the
/// signature's constant interpretations, which must be pairwise distinct.
pub fn eval_all_c(
    graph: &RelationalHypergraph,
    sig: &LogicSignature,
    formula: &Formula,
) -> Result<Vec<bool>, LogicError> {
    sig.check_constants(graph.node_count())?;
    check_colors(graph, sig)?;
    Evaluator {
        graph,
        sig,
        allow_constants: true,
    }
    .eval(formula)
}

pub fn eval_formula_c(
    graph: &RelationalHypergraph,
    sig: &LogicSignature,
    formula: &Formula,
    node: NodeId,
) -> Result<bool, LogicError> {
    if node >= graph.node_count() {
        return Err(LogicError::NodeOutOfRange(node));
    }
    Ok(eval_all_c(graph, sig, formula)?[node])
}

/// One row of a compiled network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum RowKind {
    Color(u32),
    Not(usize),
    And(usize, usize),
    Exists {
        count: usize,
        relation: usize,
        position: usize,
        /// Row of the guard at every position other than `position`.
        guards: Vec<(usize, usize)>,
    },
    /// Always-true row standing in for an unconstrained guard position.
    True,
}

/// Integer parameters of the fixed-form network
/// `h' = σ(W₀ h + Σ_{(e,i)∈E(v)} (a_ρ(e) − σ(W_ρ(e) ⊙_{j≠i}(p_j − h_e(j)))) + b)`
/// with `σ(x) = min(max(x, 0), 1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompiledNetwork {
    pub rows: Vec<RowKind>,
    /// Text of the subformula computed by each row.
    pub labels: Vec<String>,
    pub w0: Vec<Vec<i64>>,
    /// `w_rel[r]` is the `L x L` matrix of relation `r`.
    pub w_rel: Vec<Vec<Vec<i64>>>,
    pub a_rel: Vec<Vec<i64>>,
    pub bias: Vec<i64>,
    /// `positional[j - 1]` is `p_j`.
    pub positional: Vec<Vec<i64>>,
    pub signature: LogicSignature,
}

impl CompiledNetwork {
    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// Row of the compiled formula itself.
    pub fn root(&self) -> usize {
        self.rows.len() - 1
    }
}

struct Compiler<'a> {
    sig: &'a LogicSignature,
    rows: Vec<RowKind>,
    labels: Vec<String>,
}

impl Compiler<'_> {
    fn push(&mut self, row: RowKind, label: String) -> usize {
        self.rows.push(row);
        self.labels.push(label);
        self.rows.len() - 1
    }

    /// Post-order over formula occurrences, so every child row precedes its
    /// parent. Shared subformulas get one row per occurrence.
    fn visit(&mut self, f: &Formula) -> Result<usize, LogicError> {
        let row = match f {
            Formula::Color(a) => RowKind::Color(self.sig.color_id(a)?),
            Formula::Const(_) => return Err(LogicError::ConstantsUnsupported),
            Formula::Not(g) => RowKind::Not(self.visit(g)?),
            Formula::And(a, b) => {
                let a = self.visit(a)?;
                RowKind::And(a, self.visit(b)?)
            }
            Formula::Exists {
                count,
                relation,
                position,
                guard,
            } => {
                if *count == 0 {
                    return Err(LogicError::ZeroCount);
                }
                let (rel, arity) = self.sig.relation_id(relation)?;
                if *position == 0 || *position > arity {
                    return Err(LogicError::InvalidPosition {
                        relation: relation.clone(),
                        position: *position,
                        arity,
                        bound: *position,
                    });
                }
                let conj = guard.as_conjunction().ok_or(LogicError::NotRestricted)?;
                for &j in conj.keys() {
                    check_position(relation, arity, *position, j)?;
                }
                let mut guards = Vec::new();
                for j in (1..=arity).filter(|&j| j != *position) {
                    let k = match conj.get(&j) {
                        Some(g) => self.visit(g)?,
                        None => self.push(RowKind::True, "true".into()),
                    };
                    guards.push((j, k));
                }
                RowKind::Exists {
                    count: *count,
                    relation: rel,
                    position: *position,
                    guards,
                }
            }
        };
        Ok(self.push(row, f.to_string()))
    }
}

/// Builds the network whose row `p` after `L` rounds is 1 exactly at the
/// nodes satisfying the `p`-th subformula.
pub fn compile_hgml_r(
    formula: &Formula,
    sig: &LogicSignature,
) -> Result<CompiledNetwork, LogicError> {
    if !is_hgml_r(formula) {
        return Err(LogicError::NotRestricted);
    }
    let mut c = Compiler {
        sig,
        rows: Vec::new(),
        labels: Vec::new(),
    };
    c.visit(formula)?;
    let l = c.rows.len();
    let nrel = sig.relations.len();
    let max_arity = sig.relations.iter().map(|r| r.1).max().unwrap_or(0);
    let mut w0 = vec![vec![0i64; l]; l];
    let mut w_rel = vec![vec![vec![0i64; l]; l]; nrel];
    let mut a_rel = vec![vec![0i64; l]; nrel];
    let mut bias = vec![0i64; l];
    let mut positional = vec![vec![3i64; l]; max_arity];
    for (row, kind) in c.rows.iter().enumerate() {
        match kind {
            RowKind::Color(_) => w0[row][row] = 1,
            RowKind::Not(k) => {
                w0[row][*k] = -1;
                bias[row] = 1;
            }
            RowKind::And(j, k) => {
                w0[row][*j] += 1;
                w0[row][*k] += 1;
                bias[row] = -1;
            }
            RowKind::Exists {
                count,
                relation,
                guards,
                ..
            } => {
                for &(j, k) in guards {
                    w_rel[*relation][row][k] = 1;
                    positional[j - 1][k] = 1;
                }
                a_rel[*relation][row] = 1;
                bias[row] = 1 - *count as i64;
            }
            RowKind::True => bias[row] = 1,
        }
    }
    Ok(CompiledNetwork {
        rows: c.rows,
        labels: c.labels,
        w0,
        w_rel,
        a_rel,
        bias,
        positional,
        signature: sig.clone(),
    })
}

fn clamp01(x: i64) -> i64 {
    x.clamp(0, 1)
}

/// Runs the compiled network for `L` rounds from one-hot colour features and
/// returns the final `L`-dimensional 0/1 feature of every node.
pub fn run_compiled(
    net: &CompiledNetwork,
    graph: &RelationalHypergraph,
) -> Result<Vec<Vec<i64>>, LogicError> {
    net.signature.check_graph(graph)?;
    let l = net.dim();
    let n = graph.node_count();
    let mut h: Vec<Vec<i64>> = (0..n)
        .map(|v| {
            net.rows
                .iter()
                .map(|row| matches!(row, RowKind::Color(a) if *a == graph.color(v)) as i64)
                .collect()
        })
        .collect();
    let mut prod = vec![0i64; l];
    for _ in 0..l {
        let mut next = vec![vec![0i64; l]; n];
        for (v, out) in next.iter_mut().enumerate() {
            let mut acc: Vec<i64> = (0..l)
                .map(|row| {
                    net.bias[row]
                        + net.w0[row]
                            .iter()
                            .zip(&h[v])
                            .map(|(w, x)| w * x)
                            .sum::<i64>()
                })
                .collect();
            for &(e, i) in graph.incidence(v) {
                let edge = graph.edge(e);
                prod.iter_mut().for_each(|p| *p = 1);
                for (idx, &w) in edge.nodes.iter().enumerate() {
                    if idx + 1 == i {
                        continue;
                    }
                    for (k, p) in prod.iter_mut().enumerate() {
                        *p *= net.positional[idx][k] - h[w][k];
                    }
                }
                let (wr, ar) = (&net.w_rel[edge.relation], &net.a_rel[edge.relation]);
                for row in 0..l {
                    let z: i64 = wr[row].iter().zip(&prod).map(|(w, p)| w * p).sum();
                    acc[row] += ar[row] - clamp01(z);
                }
            }
            for (o, a) in out.iter_mut().zip(acc) {
                *o = clamp01(a);
            }
        }
        h = next;
    }
    Ok(h)
}

/// Random restricted formula of depth at most `depth` over the signature.
/// Guard positions are filled with probability one half.
pub fn random_hgml_r(rng: &mut impl Rng, sig: &LogicSignature, depth: usize) -> Formula {
    let leaf = |rng: &mut dyn rand::RngCore| {
        Formula::color(sig.colors[rng.gen_range(0..sig.colors.len())].clone())
    };
    if depth <= 1 {
        return leaf(rng);
    }
    match rng.gen_range(0..8) {
        0 => leaf(rng),
        1 | 2 => Formula::not(random_hgml_r(rng, sig, depth - 1)),
        3 | 4 => Formula::and(
            random_hgml_r(rng, sig, depth - 1),
            random_hgml_r(rng, sig, depth - 1),
        ),
        _ => {
            let (name, arity) = sig.relations[rng.gen_range(0..sig.relations.len())].clone();
            let position = rng.gen_range(1..=arity);
            let guards: Vec<(usize, Formula)> = (1..=arity)
                .filter(|&j| j != position)
                .filter_map(|j| {
                    rng.gen_bool(0.5)
                        .then(|| (j, random_hgml_r(rng, sig, depth - 1)))
                })
                .collect();
            Formula::exists(rng.gen_range(1..=3), name, position, guards)
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Color(a) => write!(f, "color({a})"),
            Formula::Const(b) => write!(f, "is({b})"),
            Formula::Not(g) => write!(f, "not {g}"),
            Formula::And(a, b) => write!(f, "({a} and {b})"),
            Formula::Exists {
                count,
                relation,
                position,
                guard,
            } => {
                write!(f, "exists>={count} {relation}@{position} ")?;
                match guard {
                    Guard::Conj(m) => {
                        write!(f, "[")?;
                        for (idx, (j, g)) in m.iter().enumerate() {
                            if idx > 0 {
                                write!(f, ", ")?;
                            }
                            write!(f, "{j}:{g}")?;
                        }
                        write!(f, "]")
                    }
                    Guard::Bool(g) => write!(f, "{{{g}}}"),
                }
            }
        }
    }
}

impl fmt::Display for GuardExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GuardExpr::At(j, g) => write!(f, "{j}:{g}"),
            GuardExpr::Not(g) => write!(f, "not {g}"),
            GuardExpr::And(a, b) => write!(f, "({a} and {b})"),
            GuardExpr::Or(a, b) => write!(f, "({a} or {b})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(usize),
    Sym(&'static str),
}

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>, LogicError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if src[i..].starts_with(">=") {
            out.push((i, Tok::Sym(">=")));
            i += 2;
            continue;
        }
        let sym = match c {
            '(' => Some("("),
            ')' => Some(")"),
            '[' => Some("["),
            ']' => Some("]"),
            '{' => Some("{"),
            '}' => Some("}"),
            ',' => Some(","),
            ':' => Some(":"),
            '@' => Some("@"),
            _ => None,
        };
        if let Some(s) = sym {
            out.push((i, Tok::Sym(s)));
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() {
            let c = bytes[i] as char;
            if c.is_alphanumeric() || matches!(c, '_' | '-' | '.' | '/' | '\'') || !c.is_ascii() {
                i += 1;
            } else {
                break;
            }
        }
        if start == i {
            return Err(LogicError::Parse {
                offset: i,
                message: format!("unexpected character `{c}`"),
            });
        }
        let word = &src[start..i];
        let tok = if word.bytes().all(|b| b.is_ascii_digit()) {
            Tok::Num(word.parse().map_err(|_| LogicError::Parse {
                offset: start,
                message: "number too large".into(),
            })?)
        } else {
            Tok::Ident(word.to_string())
        };
        out.push((start, tok));
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |t| t.0)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, LogicError> {
        Err(LogicError::Parse {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn expect_sym(&mut self, s: &'static str) -> Result<(), LogicError> {
        match self.peek() {
            Some(Tok::Sym(x)) if *x == s => {
                self.pos += 1;
                Ok(())
            }
            _ => self.err(format!("expected `{s}`")),
        }
    }

    fn ident(&mut self) -> Result<String, LogicError> {
        match self.peek().cloned() {
            Some(Tok::Ident(s)) => {
                self.pos += 1;
                Ok(s)
            }
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(n.to_string())
            }
            _ => self.err("expected a name"),
        }
    }

    fn number(&mut self) -> Result<usize, LogicError> {
        match self.peek() {
            Some(Tok::Num(n)) => {
                let n = *n;
                self.pos += 1;
                Ok(n)
            }
            _ => self.err("expected a number"),
        }
    }

    fn keyword(&self) -> Option<&str> {
        match self.peek() {
            Some(Tok::Ident(s)) => Some(s.as_str()),
            _ => None,
        }
    }

    fn formula(&mut self) -> Result<Formula, LogicError> {
        match self.keyword() {
            Some("color") | Some("is") => {
                let is_color = self.keyword() == Some("color");
                self.pos += 1;
                self.expect_sym("(")?;
                let name = self.ident()?;
                self.expect_sym(")")?;
                Ok(if is_color {
                    Formula::Color(name)
                } else {
                    Formula::Const(name)
                })
            }
            Some("not") => {
                self.pos += 1;
                Ok(Formula::not(self.formula()?))
            }
            Some("exists") => {
                self.pos += 1;
                self.expect_sym(">=")?;
                let count = self.number()?;
                let relation = self.ident()?;
                self.expect_sym("@")?;
                let position = self.number()?;
                let guard = match self.peek() {
                    Some(Tok::Sym("[")) => {
                        self.pos += 1;
                        let mut m = BTreeMap::new();
                        if self.peek() != Some(&Tok::Sym("]")) {
                            loop {
                                let j = self.number()?;
                                self.expect_sym(":")?;
                                let g = self.formula()?;
                                if m.insert(j, g).is_some() {
                                    return self.err(format!("position {j} guarded twice"));
                                }
                                if self.peek() == Some(&Tok::Sym(",")) {
                                    self.pos += 1;
                                } else {
                                    break;
                                }
                            }
                        }
                        self.expect_sym("]")?;
                        Guard::Conj(m)
                    }
                    Some(Tok::Sym("{")) => {
                        self.pos += 1;
                        let g = self.guard()?;
                        self.expect_sym("}")?;
                        Guard::Bool(g)
                    }
                    _ => return self.err("expected `[` or `{` after the quantifier"),
                };
                Ok(Formula::Exists {
                    count,
                    relation,
                    position,
                    guard,
                })
            }
            _ if self.peek() == Some(&Tok::Sym("(")) => {
                self.pos += 1;
                let a = self.formula()?;
                let op = self.ident()?;
                let b = self.formula()?;
                self.expect_sym(")")?;
                match op.as_str() {
                    "and" => Ok(Formula::and(a, b)),
                    "or" => Ok(Formula::or(a, b)),
                    _ => self.err(format!("expected `and` or `or`, found `{op}`")),
                }
            }
            _ => self.err("expected a formula"),
        }
    }

    fn guard(&mut self) -> Result<GuardExpr, LogicError> {
        match self.peek().cloned() {
            Some(Tok::Num(j)) => {
                self.pos += 1;
                self.expect_sym(":")?;
                Ok(GuardExpr::at(j, self.formula()?))
            }
            Some(Tok::Ident(s)) if s == "not" => {
                self.pos += 1;
                Ok(GuardExpr::Not(Box::new(self.guard()?)))
            }
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                let a = self.guard()?;
                let op = self.ident()?;
                let b = self.guard()?;
                self.expect_sym(")")?;
                match op.as_str() {
                    "and" => Ok(GuardExpr::And(Box::new(a), Box::new(b))),
                    "or" => Ok(GuardExpr::Or(Box::new(a), Box::new(b))),
                    _ => self.err(format!("expected `and` or `or`, found `{op}`")),
                }
            }
            _ => self.err("expected a guard"),
        }
    }
}

pub fn parse_formula(src: &str) -> Result<Formula, LogicError> {
    let mut p = Parser {
        toks: tokenize(src)?,
        pos: 0,
        end: src.len(),
    };
    let f = p.formula()?;
    if p.pos < p.toks.len() {
        return p.err("trailing input");
    }
    Ok(f)
}

impl std::str::FromStr for Formula {
    type Err = LogicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_formula(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::Relation;
    use proptest::prelude::*;
    use rand::Rng;

    /// Hawking=0, Oxford=1, Physics=2, BA=3, Nobel=4; Hawking is a Person.
    fn figure_one() -> (RelationalHypergraph, LogicSignature) {
        let g = RelationalHypergraph::new(
            vec![Relation::new(0, "StudyDegree", 4), Relation::new(1, "Awarded", 3)],
            vec![
                HyperEdge::new(0, vec![0, 1, 2, 3]),
                HyperEdge::new(1, vec![2, 4, 1]),
            ],
            5,
            Some(vec![0, 1, 1, 1, 1]),
        )
        .unwrap();
        let sig = LogicSignature::for_graph(&g, vec!["Person".into(), "Entity".into()]);
        (g, sig)
    }

    /// A person who studied at a university with fewer than two awards.
    fn person_at_quiet_university() -> Formula {
        parse_formula(
            "(color(Person) and exists>=1 StudyDegree@1 [2: not exists>=2 Awarded@3 []])",
        )
        .unwrap()
    }

    #[test]
    fn color_atom() {
        let (g, sig) = figure_one();
        assert!(eval_formula(&g, &sig, &Formula::color("Person"), 0).unwrap());
        assert!(!eval_formula(&g, &sig, &Formula::color("Person"), 1).unwrap());
        assert_eq!(
            eval_formula(&g, &sig, &Formula::color("Robot"), 0),
            Err(LogicError::UnknownColor("Robot".into()))
        );
    }

    #[test]
    fn quiet_university_formula_holds_at_person() {
        let (g, sig) = figure_one();
        let phi = person_at_quiet_university();
        assert!(eval_formula(&g, &sig, &phi, 0).unwrap());
        assert_eq!(eval_all(&g, &sig, &phi).unwrap(), vec![true, false, false, false, false]);
        let net = compile_hgml_r(&phi, &sig).unwrap();
        let out = run_compiled(&net, &g).unwrap();
        assert_eq!(out[0][net.root()], 1);
        assert_eq!(out[1][net.root()], 0);
    }

    #[test]
    fn constants_pin_query_nodes() {
        let (g, sig) = figure_one();
        let sig = sig.with_constants(vec![("Physics".into(), 2), ("BA".into(), 3)]);
        let psi = parse_formula(
            "(color(Person) and exists>=1 StudyDegree@1 \
             [2: not exists>=2 Awarded@3 [1: is(Physics)], 3: is(Physics), 4: is(BA)])",
        )
        .unwrap();
        assert!(eval_formula_c(&g, &sig, &psi, 0).unwrap());
        assert!(!eval_formula_c(&g, &sig, &psi, 1).unwrap());
        assert!(eval_formula_c(&g, &sig, &Formula::constant("BA"), 3).unwrap());
        assert!(!eval_formula_c(&g, &sig, &Formula::constant("BA"), 2).unwrap());
        // Plain evaluation has no constants.
        assert!(matches!(
            eval_formula(&g, &sig, &psi, 0),
            Err(LogicError::UnknownConstant(_))
        ));
        let clash = sig.clone().with_constants(vec![("a".into(), 1), ("b".into(), 1)]);
        assert!(matches!(
            eval_formula_c(&g, &clash, &Formula::constant("a"), 0),
            Err(LogicError::InvalidConstants(..))
        ));
        assert!(matches!(
            eval_formula_c(&g, &sig, &Formula::constant("Nobel"), 0),
            Err(LogicError::UnknownConstant(_))
        ));
    }

    #[test]
    fn unknown_relation() {
        let (g, sig) = figure_one();
        let f = Formula::exists(1, "Married", 1, []);
        assert_eq!(
            eval_formula(&g, &sig, &f, 0),
            Err(LogicError::UnknownRelation("Married".into()))
        );
    }

    #[test]
    fn restricted_form_detection() {
        assert!(is_hgml_r(&Formula::color("a")));
        assert!(is_hgml_r(&parse_formula("exists>=1 r@1 [2: color(a), 3: color(b)]").unwrap()));
        assert!(is_hgml_r(
            &parse_formula("exists>=1 r@1 {(2:color(a) and 3:color(b))}").unwrap()
        ));
        let disj = parse_formula("exists>=1 r@1 {(2:color(a) or 3:color(b))}").unwrap();
        assert!(!is_hgml_r(&disj));
        let (g, sig) = figure_one();
        let _ = g;
        assert_eq!(compile_hgml_r(&disj, &sig), Err(LogicError::NotRestricted));
    }

    #[test]
    fn single_color_compiles_to_identity_row() {
        let g = RelationalHypergraph::new(vec![Relation::new(0, "r", 2)], vec![], 3, Some(vec![0, 1, 0]))
            .unwrap();
        let sig = LogicSignature::for_graph(&g, vec!["a".into(), "b".into()]);
        let net = compile_hgml_r(&Formula::color("a"), &sig).unwrap();
        assert_eq!(net.dim(), 1);
        assert_eq!(net.w0, vec![vec![1]]);
        let out = run_compiled(&net, &g).unwrap();
        assert_eq!(out, vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn counting_row_bias() {
        let sig = LogicSignature::new(vec!["a".into()], vec![("r".into(), 2)]);
        let f = parse_formula("exists>=2 r@1 [2: color(a)]").unwrap();
        let net = compile_hgml_r(&f, &sig).unwrap();
        assert_eq!(net.dim(), 2);
        assert_eq!(net.bias[net.root()], -1);
        assert_eq!(net.w_rel[0][1][0], 1);
        assert_eq!(net.a_rel[0][1], 1);
        assert_eq!(net.positional[1][0], 1);
        assert_eq!(net.positional[0][0], 3);
    }

    #[test]
    fn unguarded_positions_get_true_rows() {
        let sig = LogicSignature::new(vec!["a".into()], vec![("r".into(), 3)]);
        let f = parse_formula("exists>=1 r@2 [3: color(a)]").unwrap();
        let net = compile_hgml_r(&f, &sig).unwrap();
        assert_eq!(net.rows[0], RowKind::True);
        assert_eq!(net.bias[0], 1);
        // Without the row for position 1, a node sitting at position 1 of an
        // edge with an `a` at position 3 would be counted as well.
        let g = RelationalHypergraph::new(
            vec![Relation::new(0, "r", 3)],
            vec![HyperEdge::new(0, vec![0, 1, 2])],
            3,
            None,
        )
        .unwrap();
        let out = run_compiled(&net, &g).unwrap();
        let root = net.root();
        assert_eq!(
            out.iter().map(|h| h[root]).collect::<Vec<_>>(),
            eval_all(&g, &sig, &f).unwrap().iter().map(|&b| b as i64).collect::<Vec<_>>()
        );
    }

    #[test]
    fn shared_subformula_gets_separate_rows() {
        // The same guard at different positions of different quantifiers.
        let sig = LogicSignature::new(vec!["a".into(), "b".into()], vec![("r".into(), 2)]);
        let f = parse_formula("(exists>=1 r@1 [2: color(a)] and exists>=1 r@2 [1: color(a)])").unwrap();
        let net = compile_hgml_r(&f, &sig).unwrap();
        assert_eq!(net.dim(), 5);
        let g = RelationalHypergraph::new(
            vec![Relation::new(0, "r", 2)],
            vec![HyperEdge::new(0, vec![0, 1]), HyperEdge::new(0, vec![1, 1])],
            2,
            Some(vec![1, 0]),
        )
        .unwrap();
        let out = run_compiled(&net, &g).unwrap();
        for p in 0..net.dim() {
            let sub = parse_formula(&net.labels[p]).ok();
            if let Some(sub) = sub {
                let truth = eval_all(&g, &sig, &sub).unwrap();
                for v in 0..2 {
                    assert_eq!(out[v][p] == 1, truth[v], "row {p} node {v}");
                }
            }
        }
    }

    #[test]
    fn edgeless_graph_returns_color_bits() {
        let g = RelationalHypergraph::new(vec![Relation::new(0, "r", 2)], vec![], 2, Some(vec![1, 0]))
            .unwrap();
        let sig = LogicSignature::for_graph(&g, vec!["a".into(), "b".into()]);
        let net = compile_hgml_r(&Formula::color("b"), &sig).unwrap();
        assert_eq!(run_compiled(&net, &g).unwrap(), vec![vec![1], vec![0]]);
        let bad = g.with_colors(Some(vec![5, 0])).unwrap();
        assert!(matches!(
            run_compiled(&net, &bad),
            Err(LogicError::ColorOutOfSignature { node: 0, .. })
        ));
    }

    #[test]
    fn constants_are_not_compiled() {
        let (_, sig) = figure_one();
        assert_eq!(
            compile_hgml_r(&Formula::constant("x"), &sig),
            Err(LogicError::ConstantsUnsupported)
        );
    }

    #[test]
    fn parser_reports_errors() {
        assert!(matches!(parse_formula("color(a"), Err(LogicError::Parse { .. })));
        assert!(matches!(parse_formula("(color(a) xor color(b))"), Err(LogicError::Parse { .. })));
        assert!(matches!(parse_formula("color(a) color(b)"), Err(LogicError::Parse { .. })));
        assert!(matches!(parse_formula("exists>=1 r@1 [2: color(a), 2: color(b)]"), Err(LogicError::Parse { .. })));
    }

    #[test]
    fn or_is_sugar() {
        let f = parse_formula("(color(a) or color(b))").unwrap();
        assert_eq!(f, Formula::or(Formula::color("a"), Formula::color("b")));
    }

    fn random_instance(seed: u64) -> (RelationalHypergraph, LogicSignature, Formula) {
        let mut rng = crate::gen::rng(seed);
        let n = rng.gen_range(1..=12);
        let rels = rng.gen_range(1..=3);
        let edges = rng.gen_range(0..3 * n);
        let g = crate::gen::random_hypergraph_with(&mut rng, n, rels, 4, edges);
        let colors = rng.gen_range(1..=3u32);
        let g = g
            .with_colors(Some(crate::gen::random_colors(&mut rng, n, colors)))
            .unwrap();
        let sig = LogicSignature::for_graph(&g, (0..colors).map(|c| format!("c{c}")).collect());
        let f = random_hgml_r(&mut rng, &sig, 4);
        (g, sig, f)
    }

    proptest! {
        #[test]
        fn compiled_rows_match_evaluator(seed in any::<u64>()) {
            let (g, sig, f) = random_instance(seed);
            let net = compile_hgml_r(&f, &sig).unwrap();
            let out = run_compiled(&net, &g).unwrap();
            let truth = eval_all(&g, &sig, &f).unwrap();
            for v in 0..g.node_count() {
                prop_assert_eq!(out[v][net.root()] == 1, truth[v]);
            }
        }

        #[test]
        fn display_parse_round_trip(seed in any::<u64>()) {
            let (_, _, f) = random_instance(seed);
            prop_assert_eq!(parse_formula(&f.to_string()).unwrap(), f);
        }

        #[test]
        fn evaluator_is_isomorphism_invariant(seed in any::<u64>(), pseed in any::<u64>()) {
            let (g, sig, f) = random_instance(seed);
            let perm = crate::gen::random_permutation(g.node_count(), pseed);
            let pg = g.apply_permutation(&perm).unwrap();
            let a = eval_all(&g, &sig, &f).unwrap();
            let b = eval_all(&pg, &sig, &f).unwrap();
            for v in 0..g.node_count() {
                prop_assert_eq!(a[v], b[perm[v]]);
            }
        }

        #[test]
        fn de_morgan_and_counting_monotonicity(seed in any::<u64>()) {
            let (g, sig, f) = random_instance(seed);
            let h = Formula::color(sig.colors[0].clone());
            let lhs = eval_all(&g, &sig, &Formula::not(Formula::and(f.clone(), h.clone()))).unwrap();
            let rhs = eval_all(&g, &sig, &Formula::or(Formula::not(f.clone()), Formula::not(h))).unwrap();
            prop_assert_eq!(lhs, rhs);
            let (rel, arity) = sig.relations[0].clone();
            for n in 1..4 {
                let weak = Formula::exists(n, rel.clone(), 1, (2..=arity).map(|j| (j, f.clone())));
                let strong = Formula::exists(n + 1, rel.clone(), 1, (2..=arity).map(|j| (j, f.clone())));
                let (w, s) = (eval_all(&g, &sig, &weak).unwrap(), eval_all(&g, &sig, &strong).unwrap());
                for v in 0..g.node_count() {
                    prop_assert!(!s[v] || w[v]);
                }
            }
        }
    }
}
