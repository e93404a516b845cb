//! Low-rank recovery regularized by a sample graph and a feature graph.
//!
//! [`solver::fista_solve`] is the entry point; [`graph`] builds the graphs it
//! needs and [`analysis`] inspects the result. The guide in `book/` walks
//! through the whole pipeline.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod cluster;
pub mod error;
pub mod graph;
pub mod matrix;
pub mod pgm;
pub mod solver;
pub mod sparse;
pub mod synth;

pub use error::{Error, Result};

// The guide's chapters are compiled as doc-tests so its snippets stay in sync
// with the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/background.md")]
    mod background {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
