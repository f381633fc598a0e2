//! The asynchronous master–worker runtime.
//!
//! Workers repeatedly pull the latest policy, produce a two-point gradient
//! estimate from two rollouts, and push it back. The master buffers incoming
//! estimates — stale ones included — and applies one averaged descent step
//! per full batch. Two execution modes share the exact same update rule:
//!
//! * [`run_simulated`] — a strictly single-threaded discrete-event loop with
//!   worker cycle durations drawn from a [`DelayModel`]; byte-reproducible
//!   under a fixed seed.
//! * [`run_threaded`] — real concurrent workers with wall-clock timing;
//!   statistically equivalent but not bit-reproducible for more than one
//!   worker.
//!
//! The exact oracle (`f`, `f*`) is consulted only for stopping and trace
//! logging, never for the update itself, so the learner stays model-free.

mod master;
mod simulated;
mod threaded;

pub use master::MasterState;
pub use simulated::run_simulated;
pub use threaded::run_threaded;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rollout::{InitDistribution, RolloutConfig};
use crate::{Error, Result, Scalar};

/// Tuning knobs of one AZOPG run.
#[derive(Clone, Debug)]
pub struct EngineConfig<T: Scalar> {
    /// Step size applied to the batch-averaged estimate.
    pub eta: T,
    /// Estimates averaged per policy update.
    pub batch_size: usize,
    /// Smoothing radius of the two-point estimator.
    pub radius: T,
    /// Integration settings for every rollout.
    pub rollout: RolloutConfig<T>,
    /// Number of workers.
    pub workers: usize,
    /// Initial-state law sampled per estimate.
    pub dist: InitDistribution<T>,
    /// Optional staleness filter: drop estimates older than this many
    /// updates. `None` (the default) is the plain unconditional averaging.
    pub staleness_limit: Option<u64>,
    /// Real seconds each matching worker sleeps per cycle in *threaded* mode
    /// (shorter lists pad with zero). Simulated mode models slowdowns through
    /// the [`DelayModel`] instead and ignores this field.
    pub per_worker_sleep: Vec<f64>,
}

impl<T: Scalar> EngineConfig<T> {
    pub(crate) fn validate(&self, state_dim: usize) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::InvalidArgument("need at least one worker".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.eta <= T::zero() || !self.eta.is_finite() {
            return Err(Error::InvalidArgument("eta must be positive".into()));
        }
        if self.radius <= T::zero() || !self.radius.is_finite() {
            return Err(Error::InvalidArgument("radius must be positive".into()));
        }
        if self.dist.dim() != state_dim {
            return Err(Error::InvalidArgument(format!(
                "distribution dimension {} does not match state dimension {state_dim}",
                self.dist.dim()
            )));
        }
        if self.per_worker_sleep.len() > self.workers
            || self
                .per_worker_sleep
                .iter()
                .any(|s| *s < 0.0 || !s.is_finite())
        {
            return Err(Error::InvalidArgument(
                "per-worker sleeps must be finite, nonnegative, and at most one per worker".into(),
            ));
        }
        if self.workers > self.batch_size {
            eprintln!(
                "warning: {} workers exceed the batch size {}; staleness grows with M/N",
                self.workers, self.batch_size
            );
        }
        Ok(())
    }
}

/// Termination rule for a run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StopCondition {
    /// Stop once `(f(K_j) - f*) / (f(K_0) - f*)` drops to this value.
    pub target_rel_error: f64,
    /// Abort with a timeout error after this many master updates.
    pub max_iters: u64,
}

impl StopCondition {
    pub fn new(target_rel_error: f64, max_iters: u64) -> Result<Self> {
        if target_rel_error <= 0.0 || !target_rel_error.is_finite() {
            return Err(Error::InvalidArgument(
                "target relative error must be positive".into(),
            ));
        }
        if max_iters == 0 {
            return Err(Error::InvalidArgument(
                "iteration budget must be positive".into(),
            ));
        }
        Ok(Self {
            target_rel_error,
            max_iters,
        })
    }
}

/// How simulated worker cycle durations are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayLaw {
    /// Every cycle duration is drawn uniformly from `[t_lo, t_hi]`.
    Uniform,
    /// Each worker gets one duration drawn from `[t_lo, t_hi]` at start-up
    /// and keeps it for the whole run (heterogeneous but time-invariant).
    FixedPerWorker,
}

/// Worker timing model for the simulated mode (Assumption-2 style interval
/// plus optional injected per-worker slowdowns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub t_lo: f64,
    pub t_hi: f64,
    /// Extra seconds added to every cycle of the matching worker; shorter
    /// lists are padded with zeros.
    pub per_worker_extra: Vec<f64>,
    pub law: DelayLaw,
}

impl DelayModel {
    pub fn uniform(t_lo: f64, t_hi: f64) -> Result<Self> {
        Self::new(t_lo, t_hi, Vec::new(), DelayLaw::Uniform)
    }

    pub fn new(t_lo: f64, t_hi: f64, per_worker_extra: Vec<f64>, law: DelayLaw) -> Result<Self> {
        if t_lo <= 0.0 || t_hi < t_lo || !t_hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "delay interval must satisfy 0 < t_lo <= t_hi < inf, got [{t_lo}, {t_hi}]"
            )));
        }
        if per_worker_extra.iter().any(|e| *e < 0.0 || !e.is_finite()) {
            return Err(Error::InvalidArgument(
                "per-worker slowdowns must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            t_lo,
            t_hi,
            per_worker_extra,
            law,
        })
    }

    pub fn with_extras(mut self, per_worker_extra: Vec<f64>) -> Result<Self> {
        if per_worker_extra.iter().any(|e| *e < 0.0 || !e.is_finite()) {
            return Err(Error::InvalidArgument(
                "per-worker slowdowns must be finite and nonnegative".into(),
            ));
        }
        self.per_worker_extra = per_worker_extra;
        Ok(self)
    }

    pub fn extra_for(&self, worker: usize) -> f64 {
        self.per_worker_extra.get(worker).copied().unwrap_or(0.0)
    }

    /// Upper end of the effective duration interval once slowdowns apply.
    pub fn effective_t_hi(&self) -> f64 {
        self.t_hi + self.per_worker_extra.iter().copied().fold(0.0, f64::max)
    }

    pub(crate) fn base_duration<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.t_hi > self.t_lo {
            rng.random_range(self.t_lo..=self.t_hi)
        } else {
            self.t_lo
        }
    }
}

/// Worst-case estimate staleness for `m` workers and batch size `n` with
/// cycle durations in `[t_lo, t_hi]`: while one estimate is in flight (at
/// most `t_hi`), the other `m - 1` workers can push at most
/// `floor(t_hi (m-1) / t_lo)` estimates, so the master can complete at most
/// `floor(t_hi (m-1) / (t_lo n)) + 1` updates.
pub fn delay_bound(t_lo: f64, t_hi: f64, m: usize, n: usize) -> Result<u64> {
    if t_lo <= 0.0 || t_hi < t_lo || !t_hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "delay interval must satisfy 0 < t_lo <= t_hi < inf, got [{t_lo}, {t_hi}]"
        )));
    }
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(
            "worker count and batch size must be positive".into(),
        ));
    }
    Ok((t_hi * (m - 1) as f64 / (t_lo * n as f64)).floor() as u64 + 1)
}
