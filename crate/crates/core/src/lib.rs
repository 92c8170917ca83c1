//! Sparse linear regression with Rényi α-divergence variational inference
//! under a Laplace spike-and-slab prior.
//!
//! Two solvers share the mean-field family `γ·N(μ, σ²) + (1 − γ)·δ₀`:
//! [`cavi::run_cavi`] (coordinate ascent, `α > 1`) and [`svb::run_svb`]
//! (stochastic gradient on the Monte Carlo bound, any `α ≠ 1`).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cavi;
pub mod error;
pub mod metrics;
pub mod model_core;
pub mod simgen;
pub mod svb;

pub use error::{Error, Result};
pub use model_core::{precompute, DatasetView, PriorSpec, RenyiConfig, VariationalParams};
