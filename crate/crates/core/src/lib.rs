//! Solver and verifier for second-order vectorial L∞ variational problems
//!
//! `minimize max_x F(x, L u(x))` with `L u = div(A Du)` on a box, clamped data
//! on two node layers, by power-mean continuation in p.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod convex;
pub mod exec;
pub mod grid;
pub mod linalg;
pub mod operator;
pub mod oracle;
pub mod run;
pub mod solver;
pub mod tensor;
pub mod verify;

pub use config::{ConfigError, RunConfig};
pub use convex::{Supremand, Weight, WeightedPowerNorm};
pub use exec::Execution;
pub use grid::{DofField, Grid, SubBox};
pub use operator::DiscreteOperator;
pub use solver::{continuation_solve, PSchedule, SolveReport, SolverError, SolverOptions};
pub use tensor::EllipticTensor;
