//! Stochastic model predictive control for linear systems with unbounded
//! additive disturbances under a discounted infinite-horizon chance
//! constraint.
//!
//! The online problem is a convex QCQP with a single quadratic constraint
//! obtained from Chebyshev bounds on each predicted violation probability.
//! The constraint budget is re-derived every step from the previous optimal
//! solution and the measured disturbance, which keeps the problem feasible
//! for all time.
//!
//! Module map:
//! - [`linalg`]: dense matrix kernel
//! - [`model`]: model data, assumption checks, offline precomputation
//! - [`constraint`]: the Chebyshev constraint and the budget update
//! - [`qcqp`]: exact single-constraint QCQP solver
//! - [`sim`]: closed-loop simulation and Monte Carlo ensembles

pub mod constraint;
pub mod error;
pub mod linalg;
pub mod model;
pub mod qcqp;
pub mod sim;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use model::{precompute, validate, Precomputed, SystemModel, ValidationReport};
pub use qcqp::{MpcSolution, QcqpProblem};
pub use sim::{DisturbanceSampler, EnsembleSummary, MpcState, TrajectoryLog};
