//! Two-point zero-order gradient estimation and batch aggregation.

use nalgebra::{DMatrix, DVector};

use crate::lqr::{LinearSystem, Policy};
use crate::rollout::{rollout_cost, Perturbation, RolloutConfig};
use crate::{real, Error, Result, Scalar};

/// Rollouts behind one two-point estimate.
pub const ROLLOUTS_PER_ESTIMATE: u32 = 2;

/// One gradient estimate in flight between a worker and the master, tagged
/// with the bookkeeping the asynchronous update rule needs.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEstimate<T: Scalar> {
    grad: DMatrix<T>,
    worker_id: usize,
    pulled_iteration: u64,
    pushed_at: f64,
    rollout_count: u32,
}

impl<T: Scalar> GradEstimate<T> {
    /// Wrap a finished estimate; rejects non-finite entries.
    pub fn new(
        grad: DMatrix<T>,
        worker_id: usize,
        pulled_iteration: u64,
        pushed_at: f64,
    ) -> Result<Self> {
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "gradient estimate has non-finite entries".into(),
            ));
        }
        Ok(Self {
            grad,
            worker_id,
            pulled_iteration,
            pushed_at,
            rollout_count: ROLLOUTS_PER_ESTIMATE,
        })
    }

    pub fn grad(&self) -> &DMatrix<T> {
        &self.grad
    }

    pub fn worker_id(&self) -> usize {
        self.worker_id
    }

    /// Master iteration index observed when the producing worker pulled.
    pub fn pulled_iteration(&self) -> u64 {
        self.pulled_iteration
    }

    pub fn pushed_at(&self) -> f64 {
        self.pushed_at
    }

    pub fn rollout_count(&self) -> u32 {
        self.rollout_count
    }
}

/// Two-point estimate along `U`: `(f(K + rU) - f(K - rU)) / (2r) * U`, with
/// both costs measured by system rollouts from the same initial state.
///
/// A divergence from either rollout propagates so the caller can redraw the
/// sample pair.
pub fn two_point_estimate<T: Scalar>(
    sys: &LinearSystem<T>,
    policy: &Policy<T>,
    zeta: &DVector<T>,
    direction: &Perturbation<T>,
    radius: T,
    cfg: &RolloutConfig<T>,
) -> Result<DMatrix<T>> {
    if radius <= T::zero() || !radius.is_finite() {
        return Err(Error::InvalidArgument(
            "smoothing radius must be positive".into(),
        ));
    }
    let u = direction.matrix();
    if u.shape() != policy.gain().shape() {
        return Err(Error::InvalidArgument(format!(
            "perturbation shape {:?} does not match policy shape {:?}",
            u.shape(),
            policy.gain().shape()
        )));
    }
    let forward = Policy::new(policy.gain() + u.scale(radius));
    let backward = Policy::new(policy.gain() - u.scale(radius));
    let cost_forward = rollout_cost(sys, &forward, zeta, cfg)?;
    let cost_backward = rollout_cost(sys, &backward, zeta, cfg)?;
    let slope = (cost_forward - cost_backward) / (real::<T>(2.0) * radius);
    Ok(u.scale(slope))
}

/// Entrywise mean of exactly `expected` estimates.
pub fn batch_average<T: Scalar>(
    estimates: &[GradEstimate<T>],
    expected: usize,
) -> Result<DMatrix<T>> {
    if expected == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if estimates.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "batch average expects exactly {expected} estimates, got {}",
            estimates.len()
        )));
    }
    let shape = estimates[0].grad().shape();
    let mut acc = DMatrix::<T>::zeros(shape.0, shape.1);
    for est in estimates {
        if est.grad().shape() != shape {
            return Err(Error::InvalidArgument(
                "estimates in a batch must share one shape".into(),
            ));
        }
        acc += est.grad();
    }
    Ok(acc.unscale(real(expected as f64)))
}
