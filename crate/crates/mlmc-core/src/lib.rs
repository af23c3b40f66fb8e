//! Multilevel Monte Carlo estimation for SDE-driven expectations and risk measures.
//!
//! The crate is organised around three estimator families:
//!
//! * plain multilevel estimation of `E[G(X_T)]` for an Euler-discretised SDE
//!   ([`mlmc::run_mlmc`]),
//! * importance-sampled variants where each level carries a Girsanov drift
//!   shift chosen by sample-average approximation or stochastic approximation
//!   ([`importance`]),
//! * nested estimation of large-loss probabilities, VaR and CVaR with uniform
//!   or adaptive inner sampling ([`risk`]).
//!
//! All randomness is derived from [`rng::StreamKey`] values, so every estimate
//! is a pure function of its inputs: results are bit-identical no matter how
//! many worker threads the supplied [`exec::Executor`] uses.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the `std` feature
//! (default) only switches float math from `libm` to the faster intrinsics.

#![cfg_attr(not(feature = "std"), no_std)]
// Frozen reference constants keep every digit of their source computation,
// validations use negated comparisons so NaN fails closed, and estimator
// entry points take their whole problem description as explicit arguments.
#![allow(clippy::excessive_precision)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

extern crate alloc;

pub mod analytic;
pub mod error;
pub mod exec;
pub mod importance;
pub mod math;
pub mod mlmc;
pub mod model;
pub mod paths;
pub mod risk;
pub mod rng;
pub mod stats;

pub use error::MlmcError;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, MlmcError>;
