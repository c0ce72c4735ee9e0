//! Hypergradient estimation for unrolled bi-level optimization.
//!
//! The meta objective is `h(phi) = f(theta_T(phi), phi)` where `theta_T` is
//! produced by `T` steps of an inner optimizer. This crate provides exact
//! forward and reverse unrolled differentiation, truncated reverse mode,
//! implicit-function estimators and the forward-gradient estimator that
//! propagates `b` tangents `Z_t v` alongside the inner iterate.

pub mod error;
pub mod estimators;
pub mod footprint;
pub mod io;
pub mod math;
pub mod meta_opt;
pub mod problem;
pub mod unroll;

pub use error::{Error, Result};
pub use math::{DirectionBatch, Distribution, InnerVector, MetaVector};
pub use problem::BilevelProblem;
