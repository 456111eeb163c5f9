//! Linear-quadratic optimal control of mean-field backward SDEs driven by a
//! Brownian motion and a compensated Poisson random measure with finitely
//! many marks.
//!
//! The optimal control is obtained by decoupling the forward-backward
//! optimality system through two Riccati equations and one auxiliary linear
//! mean-field BSDE. Expectations are replaced by empirical means over an
//! interacting particle ensemble; conditional expectations in the backward
//! solvers use least-squares regression.

pub mod bsde;
pub mod control;
pub mod cost;
pub mod error;
pub mod export;
pub mod kernel;
pub mod linalg;
pub mod oracle;
pub mod pipeline;
pub mod problem;
pub mod regression;
pub mod riccati;
pub mod verify;

pub use bsde::{AdjointConvention, BsdeOptions, PicardOptions};
pub use control::ControlProcess;
pub use cost::CostValue;
pub use error::{Error, Result};
pub use export::RunMeta;
pub use kernel::{generate_noise, NoiseIncrements, PathEnsemble};
pub use oracle::brute_force_lq_oracle;
pub use pipeline::{solve_decoupled, DecoupledOptions, DecoupledSolution};
pub use problem::*;
pub use riccati::{solve_riccati, RiccatiPair};
pub use verify::{verify_optimality, VerificationReport, VerifyOptions};
