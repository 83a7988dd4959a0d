//! LM rate of mismatched decoding via a Sinkhorn-type solver for a
//! capacity-constrained entropic transport problem.
//!
//! The pipeline is: pick a [`Constellation`], describe the channel with
//! [`build_channel`], discretize the output plane with [`discretize`] into a
//! [`DiscreteProblem`], then [`solve`] it. The [`dual`] module provides an
//! independent Newton reference, the alternative dual form of the rate,
//! convergence certificates and kernel checks; [`gmi`] gives the
//! generalized mutual information baseline.
//!
//! ```
//! use lmrate::{build_channel, discretize, solve, Constellation, GridOptions, Scheme, SolverConfig};
//!
//! let c = Constellation::build(Scheme::Qpsk);
//! let ch = build_channel(1.0, 0.9, std::f64::consts::PI / 18.0, 0.0).unwrap();
//! let (_, p) = discretize(&ch, &c, GridOptions::new(10)).unwrap();
//! let report = solve(&p, &SolverConfig::for_problem(&p)).unwrap();
//! assert!(report.lm_rate_nats > 0.0);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod channel;
pub mod cli;
pub mod constellation;
pub mod dual;
pub mod error;
pub mod gmi;
pub mod problem;
pub mod sinkhorn;

pub use channel::{analytic_threshold, build_channel, discretize, ChannelSpec, GridOptions, OutputGrid};
pub use constellation::{Constellation, Scheme, ValidationOptions, Violation};
pub use dual::{
    dual_gradient, dual_hessian, dual_objective, gauge_normalize, newton_oracle, scarlett_dual_value, DualPoint,
    NewtonConfig, ScarlettDualPoint,
};
pub use error::{Error, Result};
pub use gmi::{gmi, GmiResult};
pub use problem::{lm_rate, nats_to_bits, primal_entropy, Coupling, DiscreteProblem};
pub use sinkhorn::{moment_tau, solve, Acceleration, LambdaStrategy, LogDomain, SolveReport, SolverConfig, Status};
