//! Crate-wide error type.

use crate::trace::Trace;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input: dimension mismatch, nonpositive parameter, bad config.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A gain (or Lyapunov coefficient matrix) is not Hurwitz where it must be.
    #[error("not stabilizing: {0}")]
    NotStabilizing(String),

    /// An iterative routine failed to converge.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// A rollout state norm crossed the divergence cap; carries the blowup time.
    #[error("trajectory diverged at t = {time:.6}")]
    Divergence { time: f64 },

    /// Rejection sampling exhausted its attempt budget.
    #[error("sampling failure: {0}")]
    SamplingFailure(String),

    /// A policy update left the stabilizing set; the partial trace is preserved.
    #[error("run aborted: policy destabilized at iteration {iteration}")]
    Destabilized { iteration: u64, trace: Box<Trace> },

    /// The iteration budget ran out before the target; the partial trace is preserved.
    #[error("target not reached within {max_iters} iterations")]
    TargetNotReached { max_iters: u64, trace: Box<Trace> },

    /// A speedup report could not be assembled from the given traces.
    #[error("report error: {0}")]
    Report(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 invalid config, 3 run failure,
    /// 4 target unreached.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Serde(_) => 2,
            Error::TargetNotReached { .. } => 4,
            Error::Report(msg) if msg.contains("target") => 4,
            _ => 3,
        }
    }

    /// The partial trace carried by run-level failures, if any.
    pub fn partial_trace(&self) -> Option<&Trace> {
        match self {
            Error::Destabilized { trace, .. } | Error::TargetNotReached { trace, .. } => {
                Some(trace)
            }
            _ => None,
        }
    }
}
