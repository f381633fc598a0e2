//! Master-side state: the current policy, the estimate buffer and the trace.

use crate::estimator::{batch_average, GradEstimate};
use crate::lqr::{is_stabilizing, value_certificate, LinearSystem, Policy};
use crate::trace::{FailureEvent, Trace, TraceRow};
use crate::{to_f64, Error, Result, Scalar};

/// The master's mutable state. `pull` and `push` are the only two entry
/// points; in threaded mode the caller serializes them behind one lock so
/// each is atomic with respect to the other.
#[derive(Clone, Debug)]
pub struct MasterState<T: Scalar> {
    sys: LinearSystem<T>,
    policy: Policy<T>,
    iteration: u64,
    buffer: Vec<GradEstimate<T>>,
    eta: T,
    batch_size: usize,
    f_star: T,
    initial_gap: T,
    rollouts_total: u64,
    max_delay_seen: u64,
    staleness_limit: Option<u64>,
    trace: Trace,
}

impl<T: Scalar> MasterState<T> {
    /// Seed the master with a stabilizing initial policy. `f_star` is the
    /// oracle optimum used for relative-error logging only.
    pub fn new(
        sys: LinearSystem<T>,
        initial_policy: Policy<T>,
        eta: T,
        batch_size: usize,
        f_star: T,
        workers: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if eta <= T::zero() || !eta.is_finite() {
            return Err(Error::InvalidArgument("eta must be positive".into()));
        }
        let cert = value_certificate(&sys, &initial_policy).map_err(|e| match e {
            Error::NotStabilizing(_) => {
                Error::NotStabilizing("initial policy must be stabilizing".into())
            }
            other => other,
        })?;
        let initial_gap = cert.cost - f_star;
        if initial_gap <= T::zero() || !initial_gap.is_finite() {
            return Err(Error::InvalidArgument(
                "initial policy already at or below the reported optimum".into(),
            ));
        }
        let mut trace = Trace::new(workers);
        trace.rows.push(TraceRow {
            iteration: 0,
            time_s: 0.0,
            rollouts_total: 0,
            rel_error: 1.0,
            grad_norm: to_f64(cert.grad.norm()),
            max_delay: 0,
        });
        Ok(Self {
            sys,
            policy: initial_policy,
            iteration: 0,
            buffer: Vec::with_capacity(batch_size),
            eta,
            batch_size,
            f_star,
            initial_gap,
            rollouts_total: 0,
            max_delay_seen: 0,
            staleness_limit: None,
            trace,
        })
    }

    /// Drop estimates older than `limit` updates instead of averaging them.
    /// Off by default: the unconditional averaging *is* the algorithm, and
    /// filtering changes it. Exists for experimentation only.
    pub fn with_staleness_limit(mut self, limit: Option<u64>) -> Self {
        self.staleness_limit = limit;
        self
    }

    /// Atomic snapshot of the latest policy and its iteration index.
    pub fn pull(&self) -> (Policy<T>, u64) {
        (self.policy.clone(), self.iteration)
    }

    /// Accept one estimate. Completing a batch triggers the averaged descent
    /// step, a trace row at time `now`, and returns the fresh policy.
    ///
    /// Stale estimates are accepted unconditionally; the recorded delay is
    /// the number of updates between the producing pull and this push.
    pub fn push(&mut self, estimate: GradEstimate<T>, now: f64) -> Result<Option<Policy<T>>> {
        if !estimate.grad().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "pushed estimate has non-finite entries".into(),
            ));
        }
        if estimate.pulled_iteration() > self.iteration {
            return Err(Error::InvalidArgument(format!(
                "estimate pulled at future iteration {} (master at {})",
                estimate.pulled_iteration(),
                self.iteration
            )));
        }
        let delay = self.iteration - estimate.pulled_iteration();
        if let Some(limit) = self.staleness_limit {
            if delay > limit {
                self.trace.discarded_stale += 1;
                return Ok(None);
            }
        }
        self.max_delay_seen = self.max_delay_seen.max(delay);
        self.buffer.push(estimate);
        if self.buffer.len() < self.batch_size {
            return Ok(None);
        }

        let mean = batch_average(&self.buffer, self.batch_size)?;
        self.buffer.clear();
        let next = Policy::new(self.policy.gain() - mean.scale(self.eta));
        let next_iteration = self.iteration + 1;
        if !is_stabilizing(&self.sys, &next)? {
            self.trace.failure = Some(FailureEvent {
                iteration: next_iteration,
                time_s: now,
            });
            return Err(Error::NotStabilizing(format!(
                "update {next_iteration} left the stabilizing set"
            )));
        }
        let cert = value_certificate(&self.sys, &next)?;
        self.policy = next;
        self.iteration = next_iteration;
        self.rollouts_total += 2 * self.batch_size as u64;
        self.trace.rows.push(TraceRow {
            iteration: next_iteration,
            time_s: now,
            rollouts_total: self.rollouts_total,
            rel_error: to_f64((cert.cost - self.f_star) / self.initial_gap),
            grad_norm: to_f64(cert.grad.norm()),
            max_delay: self.max_delay_seen,
        });
        Ok(Some(self.policy.clone()))
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn latest_rel_error(&self) -> f64 {
        self.trace
            .rows
            .last()
            .map_or(f64::INFINITY, |row| row.rel_error)
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut Trace {
        &mut self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }
}
