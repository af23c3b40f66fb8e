//! Error type shared by every estimator in the crate.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::mlmc::MlmcEstimate;

/// Everything that can go wrong while building or running an estimator.
#[derive(Debug, Clone)]
pub enum MlmcError {
    /// A caller-supplied value violates a precondition. The message names the
    /// offending argument.
    InvalidArgument(String),
    /// Inputs were syntactically fine but produced a state the algorithm
    /// cannot proceed from (non-finite intermediate, empty level set, ...).
    InvalidState(String),
    /// All pilot payoffs were zero, so the variance objective has no
    /// information to optimise over.
    DegenerateObjective { level: u32 },
    /// Newton on the sample-average objective did not reach the gradient
    /// tolerance. Carries the last iterate so callers can inspect it.
    NoConvergence { iterations: u32, last_theta: Vec<f64>, grad_norm: f64 },
    /// The level cap was hit before the weak-error target; carries the
    /// partial estimate assembled so far.
    BiasUnreachable { partial: Box<MlmcEstimate> },
    /// The pilot bracket for a quantile search does not contain the root.
    BracketFailure(String),
}

impl fmt::Display for MlmcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MlmcError::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            MlmcError::InvalidState(m) => write!(f, "invalid state: {m}"),
            MlmcError::DegenerateObjective { level } => {
                write!(f, "degenerate variance objective at level {level}: every pilot payoff is zero")
            }
            MlmcError::NoConvergence { iterations, grad_norm, .. } => {
                write!(f, "optimizer did not converge after {iterations} iterations (|grad| = {grad_norm:e})")
            }
            MlmcError::BiasUnreachable { partial } => write!(
                f,
                "weak-error target {:.3e} unreachable within {} levels",
                partial.eps,
                partial.levels.len()
            ),
            MlmcError::BracketFailure(m) => write!(f, "quantile bracket failure: {m}"),
        }
    }
}

impl core::error::Error for MlmcError {}

pub(crate) fn invalid(msg: impl Into<String>) -> MlmcError {
    MlmcError::InvalidArgument(msg.into())
}

pub(crate) fn bad_state(msg: impl Into<String>) -> MlmcError {
    MlmcError::InvalidState(msg.into())
}
