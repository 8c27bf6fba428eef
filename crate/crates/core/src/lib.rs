//! Link prediction on relational hypergraphs.
//!
//! The crate bundles the data model ([`hypergraph`], [`dataset`]), exact
//! colour refinement ([`refine`]), graded modal logic with a formula to
//! network compiler ([`logic`]), the HCNet/HRNet message passing models with
//! hand-written gradients ([`nn`]), training ([`train`]), filtered ranking
//! evaluation ([`evalrank`]) and the HyperCycle synthetic task ([`synth`]).

pub mod cli;
pub mod dataset;
pub mod evalrank;
pub mod gen;
pub mod hypergraph;
pub mod logic;
pub mod nn;
pub mod refine;
pub mod synth;
pub mod theorems;
pub mod train;
