//! Inverse-transfer multiobjective Bayesian optimization.

// NaN-rejecting comparisons are written as `!(x > 0.0)` on purpose.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::type_complexity,
    clippy::needless_range_loop
)]

pub mod dataset;
pub mod decomposition;
pub mod error;
pub mod gp;
pub mod inverse;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod nsga2;
pub mod optim;
pub mod optimizer;
pub mod problems;

pub use error::{Error, Result};
