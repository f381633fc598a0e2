//! Closed-loop trajectory simulation and the learner's random inputs.
//!
//! A rollout integrates `x' = (A - B K) x` from a sampled initial state with
//! the classical fixed-step fourth-order scheme and accumulates the truncated
//! quadratic cost with composite Simpson weights on the same grid. Perturbed
//! gains may be destabilizing, so the integrator aborts with a divergence
//! error once the state norm crosses a cap instead of overflowing.
//!
//! All sampling is driven by a caller-supplied random stream; identical seeds
//! produce bit-identical values.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::lqr::{LinearSystem, Policy};
use crate::{real, to_f64, Error, Result, Scalar};

/// Default state-norm threshold treated as numerical blowup.
pub const DEFAULT_DIVERGENCE_CAP: f64 = 1e6;

/// Integration settings for one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig<T: Scalar> {
    tau: T,
    dt: T,
    divergence_cap: T,
}

impl<T: Scalar> RolloutConfig<T> {
    /// Horizon `tau` and integrator step `dt`; requires `0 < dt <= tau`.
    pub fn new(tau: T, dt: T) -> Result<Self> {
        if dt <= T::zero() || !dt.is_finite() {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        if tau < dt || !tau.is_finite() {
            return Err(Error::InvalidArgument("tau must be at least dt".into()));
        }
        Ok(Self {
            tau,
            dt,
            divergence_cap: real(DEFAULT_DIVERGENCE_CAP),
        })
    }

    pub fn with_divergence_cap(mut self, cap: T) -> Result<Self> {
        if cap <= T::zero() || !cap.is_finite() {
            return Err(Error::InvalidArgument(
                "divergence cap must be positive".into(),
            ));
        }
        self.divergence_cap = cap;
        Ok(self)
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn divergence_cap(&self) -> T {
        self.divergence_cap
    }

    /// Number of integration intervals: `tau/dt` rounded up to an even count
    /// (Simpson quadrature needs interval pairs). A tiny slack keeps exact
    /// ratios like `100/0.01` from rounding up spuriously.
    pub fn step_count(&self) -> usize {
        let ratio = to_f64(self.tau) / to_f64(self.dt);
        let mut steps = (ratio - 1e-9).ceil().max(1.0) as usize;
        if steps % 2 == 1 {
            steps += 1;
        }
        steps
    }
}

/// Initial-state laws: i.i.d. zero-mean entries, unit variance for the
/// unbounded kinds. The truncated kind rejects entries beyond `bound`, which
/// leaves the per-entry variance slightly below one for small bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Gaussian,
    Rademacher,
    TruncatedGaussian,
}

impl std::str::FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "rademacher" => Ok(Self::Rademacher),
            "truncated-gaussian" => Ok(Self::TruncatedGaussian),
            other => Err(Error::InvalidArgument(format!(
                "unknown distribution kind {other:?} (expected gaussian, rademacher or truncated-gaussian)"
            ))),
        }
    }
}

/// A validated initial-state distribution of fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct InitDistribution<T: Scalar> {
    kind: InitKind,
    dim: usize,
    bound: Option<T>,
}

impl<T: Scalar> InitDistribution<T> {
    pub fn gaussian(dim: usize) -> Self {
        assert!(dim >= 1, "distribution dimension must be at least 1");
        Self {
            kind: InitKind::Gaussian,
            dim,
            bound: None,
        }
    }

    pub fn rademacher(dim: usize) -> Self {
        assert!(dim >= 1, "distribution dimension must be at least 1");
        Self {
            kind: InitKind::Rademacher,
            dim,
            bound: Some(T::one()),
        }
    }

    pub fn truncated_gaussian(dim: usize, bound: T) -> Result<Self> {
        assert!(dim >= 1, "distribution dimension must be at least 1");
        if bound <= T::zero() || !bound.is_finite() {
            return Err(Error::InvalidArgument(
                "truncation bound must be positive".into(),
            ));
        }
        Ok(Self {
            kind: InitKind::TruncatedGaussian,
            dim,
            bound: Some(bound),
        })
    }

    /// Build from a kind tag, with the default truncation bound of 3.
    pub fn from_kind(kind: InitKind, dim: usize) -> Self {
        match kind {
            InitKind::Gaussian => Self::gaussian(dim),
            InitKind::Rademacher => Self::rademacher(dim),
            InitKind::TruncatedGaussian => {
                Self::truncated_gaussian(dim, real(3.0)).expect("positive default bound")
            }
        }
    }

    pub fn kind(&self) -> InitKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bound(&self) -> Option<T> {
        self.bound
    }
}

/// Draw one initial state with the declared per-entry law.
pub fn sample_initial_state<T: Scalar, R: Rng + ?Sized>(
    dist: &InitDistribution<T>,
    rng: &mut R,
) -> DVector<T> {
    let mut out = DVector::zeros(dist.dim);
    match dist.kind {
        InitKind::Gaussian => {
            for v in out.iter_mut() {
                *v = real(rng.sample::<f64, _>(StandardNormal));
            }
        }
        InitKind::Rademacher => {
            for v in out.iter_mut() {
                *v = if rng.random::<bool>() {
                    T::one()
                } else {
                    -T::one()
                };
            }
        }
        InitKind::TruncatedGaussian => {
            let bound = to_f64(dist.bound.expect("truncated kind carries a bound"));
            for v in out.iter_mut() {
                let x = loop {
                    let draw: f64 = rng.sample(StandardNormal);
                    if draw.abs() <= bound {
                        break draw;
                    }
                };
                *v = real(x);
            }
        }
    }
    out
}

/// A gain-space perturbation direction with `vec(U)` on the sphere of radius
/// `sqrt(m * n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation<T: Scalar> {
    u: DMatrix<T>,
}

impl<T: Scalar> Perturbation<T> {
    /// Draw uniformly: `m*n` standard normals, normalized to the unit sphere
    /// and scaled by `sqrt(m*n)`. An all-zero draw (probability zero) is
    /// resampled.
    pub fn sample<R: Rng + ?Sized>(inputs: usize, states: usize, rng: &mut R) -> Self {
        assert!(
            inputs >= 1 && states >= 1,
            "perturbation dims must be at least 1"
        );
        let len = inputs * states;
        let mut entries = vec![T::zero(); len];
        loop {
            let mut norm_sq = T::zero();
            for e in entries.iter_mut() {
                let draw: f64 = rng.sample(StandardNormal);
                *e = real(draw);
                norm_sq += *e * *e;
            }
            if norm_sq > T::zero() {
                let scale = (real::<T>(len as f64) / norm_sq).sqrt();
                for e in entries.iter_mut() {
                    *e *= scale;
                }
                break;
            }
        }
        Self {
            u: DMatrix::from_vec(inputs, states, entries),
        }
    }

    /// Wrap an explicit direction, validating the sphere-radius invariant.
    pub fn from_matrix(u: DMatrix<T>) -> Result<Self> {
        let expected = real::<T>((u.nrows() * u.ncols()) as f64).sqrt();
        if (u.norm() - expected).abs() > real::<T>(1e-12) * expected {
            return Err(Error::InvalidArgument(format!(
                "perturbation norm {:.15e} differs from sqrt(m*n) = {:.15e}",
                to_f64(u.norm()),
                to_f64(expected)
            )));
        }
        Ok(Self { u })
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.u
    }

    /// The mirrored direction `-U`.
    pub fn flipped(&self) -> Self {
        Self { u: -&self.u }
    }
}

/// Integrate the closed loop from `zeta` and return the truncated quadratic
/// cost over `[0, tau]`.
///
/// The gain need not be stabilizing; a state-norm blowup yields
/// [`Error::Divergence`] carrying the blowup time. For stabilizing gains the
/// result matches [`crate::lqr::truncated_cost_exact`] to about `1e-6`
/// relative at `dt = 1e-3`.
pub fn rollout_cost<T: Scalar>(
    sys: &LinearSystem<T>,
    policy: &Policy<T>,
    zeta: &DVector<T>,
    cfg: &RolloutConfig<T>,
) -> Result<T> {
    sys.check_policy_dims(policy)?;
    let n = sys.state_dim();
    if zeta.len() != n {
        return Err(Error::InvalidArgument(format!(
            "initial state must have length {n}, got {}",
            zeta.len()
        )));
    }

    let k = policy.gain();
    let closed = sys.closed_loop(policy)?;
    let weight = sys.q() + k.transpose() * sys.r() * k;
    let f_rows = row_major(&closed);
    let c_rows = row_major(&weight);

    let steps = cfg.step_count();
    let h = cfg.tau() / real(steps as f64);
    let cap_sq = cfg.divergence_cap() * cfg.divergence_cap();

    let mut x: Vec<T> = zeta.iter().copied().collect();
    let mut stage = Stage::new(n);

    let four = real::<T>(4.0);
    let two = real::<T>(2.0);
    let mut acc = quadratic_form(&c_rows, &x, &mut stage.scratch);
    for step in 1..=steps {
        rk4_step(&f_rows, &mut x, h, &mut stage);
        let norm_sq = dot(&x, &x);
        // A NaN state must trip the divergence path too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(norm_sq <= cap_sq) {
            return Err(Error::Divergence {
                time: to_f64(h) * step as f64,
            });
        }
        let g = quadratic_form(&c_rows, &x, &mut stage.scratch);
        let w = if step == steps {
            T::one()
        } else if step % 2 == 1 {
            four
        } else {
            two
        };
        acc += w * g;
    }
    Ok(acc * h / real(3.0))
}

struct Stage<T> {
    k1: Vec<T>,
    k2: Vec<T>,
    k3: Vec<T>,
    k4: Vec<T>,
    xt: Vec<T>,
    scratch: Vec<T>,
}

impl<T: Scalar> Stage<T> {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![T::zero(); n],
            k2: vec![T::zero(); n],
            k3: vec![T::zero(); n],
            k4: vec![T::zero(); n],
            xt: vec![T::zero(); n],
            scratch: vec![T::zero(); n],
        }
    }
}

fn row_major<T: Scalar>(m: &DMatrix<T>) -> Vec<T> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[inline]
fn matvec<T: Scalar>(a_rows: &[T], x: &[T], y: &mut [T]) {
    let n = x.len();
    for (row, out) in a_rows.chunks_exact(n).zip(y.iter_mut()) {
        let mut acc = T::zero();
        for (aij, xj) in row.iter().zip(x.iter()) {
            acc += *aij * *xj;
        }
        *out = acc;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (ai, bi) in a.iter().zip(b.iter()) {
        acc += *ai * *bi;
    }
    acc
}

#[inline]
fn quadratic_form<T: Scalar>(c_rows: &[T], x: &[T], scratch: &mut [T]) -> T {
    matvec(c_rows, x, scratch);
    dot(x, scratch)
}

#[inline]
#[allow(clippy::needless_range_loop)]
fn rk4_step<T: Scalar>(f_rows: &[T], x: &mut [T], h: T, s: &mut Stage<T>) {
    let n = x.len();
    let half = h * real(0.5);
    matvec(f_rows, x, &mut s.k1);
    for i in 0..n {
        s.xt[i] = x[i] + half * s.k1[i];
    }
    matvec(f_rows, &s.xt, &mut s.k2);
    for i in 0..n {
        s.xt[i] = x[i] + half * s.k2[i];
    }
    matvec(f_rows, &s.xt, &mut s.k3);
    for i in 0..n {
        s.xt[i] = x[i] + h * s.k3[i];
    }
    matvec(f_rows, &s.xt, &mut s.k4);
    let sixth = h / real(6.0);
    let two = real::<T>(2.0);
    for i in 0..n {
        x[i] += sixth * (s.k1[i] + two * (s.k2[i] + s.k3[i]) + s.k4[i]);
    }
}
