//! Exact model-based LQR mathematics.
//!
//! Everything in this module assumes full knowledge of the system matrices.
//! The learner itself never calls these routines to update a policy; they
//! supply reference quantities (cost, gradient, optimal gain) for stopping
//! rules, traces and tests.
//!
//! The Lyapunov solver vectorizes through a Kronecker system, an `O(n^6)`
//! dense solve that is perfectly adequate at desk scale (`n <= 32`).

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::{real, to_f64, Error, Result, Scalar};

/// Largest state dimension the dense Kronecker Lyapunov solver accepts.
pub const MAX_STATE_DIM: usize = 32;

/// Strictness for symmetry and definiteness checks at construction.
const SHAPE_TOL: f64 = 1e-9;

/// Newton–Kleinman stopping threshold on the gain increment.
const GAIN_ITERATION_TOL: f64 = 1e-12;

/// Newton–Kleinman iteration budget.
const GAIN_MAX_ITERS: usize = 200;

/// Gradient norm guaranteed at the returned optimal gain.
const STATIONARITY_TOL: f64 = 1e-8;

/// A continuous-time linear plant with quadratic cost weights.
///
/// Holds `A`, `B`, the cost weights `Q` (state) and `R` (input), and the
/// initial-state second moment `X0`. Construction validates symmetry and
/// definiteness of the weights and controllability of `(A, B)`, so a value
/// of this type is always a well-posed LQR instance.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem<T: Scalar> {
    a: DMatrix<T>,
    b: DMatrix<T>,
    q: DMatrix<T>,
    r: DMatrix<T>,
    x0: DMatrix<T>,
}

impl<T: Scalar> LinearSystem<T> {
    /// Build and validate an LQR instance.
    ///
    /// Checks: consistent dimensions, `Q` and `R` symmetric positive
    /// definite, `X0` symmetric positive semidefinite, `(A, B)` controllable.
    pub fn new(
        a: DMatrix<T>,
        b: DMatrix<T>,
        q: DMatrix<T>,
        r: DMatrix<T>,
        x0: DMatrix<T>,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::InvalidArgument(format!(
                "A must be square and nonempty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if n > MAX_STATE_DIM {
            return Err(Error::InvalidArgument(format!(
                "state dimension {n} exceeds supported maximum {MAX_STATE_DIM}"
            )));
        }
        let m = b.ncols();
        if b.nrows() != n || m == 0 {
            return Err(Error::InvalidArgument(format!(
                "B must be {n}xm with m >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        check_square(&q, n, "Q")?;
        check_square(&r, m, "R")?;
        check_square(&x0, n, "X0")?;
        check_symmetric(&q, "Q")?;
        check_symmetric(&r, "R")?;
        check_symmetric(&x0, "X0")?;

        let tol = |mat: &DMatrix<T>| real::<T>(SHAPE_TOL) * (T::one() + mat.norm());
        if smallest_symmetric_eigenvalue(&q) <= tol(&q) {
            return Err(Error::InvalidArgument("Q must be positive definite".into()));
        }
        if smallest_symmetric_eigenvalue(&r) <= tol(&r) {
            return Err(Error::InvalidArgument("R must be positive definite".into()));
        }
        if smallest_symmetric_eigenvalue(&x0) < -tol(&x0) {
            return Err(Error::InvalidArgument(
                "X0 must be positive semidefinite".into(),
            ));
        }
        if !is_controllable(&a, &b) {
            return Err(Error::InvalidArgument("(A, B) must be controllable".into()));
        }
        Ok(Self { a, b, q, r, x0 })
    }

    /// Identity `Q`, `R` and `X0` of matching sizes.
    pub fn with_identity_weights(a: DMatrix<T>, b: DMatrix<T>) -> Result<Self> {
        let (n, m) = (a.nrows(), b.ncols());
        Self::new(
            a,
            b,
            DMatrix::identity(n, n),
            DMatrix::identity(m, m),
            DMatrix::identity(n, n),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<T> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<T> {
        &self.b
    }

    pub fn q(&self) -> &DMatrix<T> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<T> {
        &self.r
    }

    pub fn x0(&self) -> &DMatrix<T> {
        &self.x0
    }

    /// Closed-loop matrix `A - B K`.
    pub fn closed_loop(&self, policy: &Policy<T>) -> Result<DMatrix<T>> {
        self.check_policy_dims(policy)?;
        Ok(&self.a - &self.b * policy.gain())
    }

    pub(crate) fn check_policy_dims(&self, policy: &Policy<T>) -> Result<()> {
        let (m, n) = (self.input_dim(), self.state_dim());
        if policy.gain().nrows() != m || policy.gain().ncols() != n {
            return Err(Error::InvalidArgument(format!(
                "policy must be {m}x{n}, got {}x{}",
                policy.gain().nrows(),
                policy.gain().ncols()
            )));
        }
        Ok(())
    }
}

/// A linear state-feedback gain `K`, applied as `u = -K x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy<T: Scalar> {
    gain: DMatrix<T>,
}

impl<T: Scalar> Policy<T> {
    pub fn new(gain: DMatrix<T>) -> Self {
        Self { gain }
    }

    /// The all-zero gain of the given shape.
    pub fn zeros(inputs: usize, states: usize) -> Self {
        Self {
            gain: DMatrix::zeros(inputs, states),
        }
    }

    pub fn gain(&self) -> &DMatrix<T> {
        &self.gain
    }

    pub fn into_gain(self) -> DMatrix<T> {
        self.gain
    }
}

/// Exact value quantities at a stabilizing gain: the value matrix `P`, the
/// state correlation `X`, the factor `E = 2(RK - B'P)`, the cost
/// `tr(P X0)` and the gradient `E X`.
#[derive(Clone, Debug)]
pub struct ValueCertificate<T: Scalar> {
    pub p: DMatrix<T>,
    pub x: DMatrix<T>,
    pub e: DMatrix<T>,
    pub cost: T,
    pub grad: DMatrix<T>,
}

/// Largest real part over the eigenvalues of `m`.
pub fn spectral_abscissa<T: Scalar>(m: &DMatrix<T>) -> T {
    m.complex_eigenvalues().iter().map(|ev| ev.re).fold(
        T::min_value().unwrap_or_else(|| -T::one() / T::default_epsilon()),
        |acc, re| {
            if re > acc {
                re
            } else {
                acc
            }
        },
    )
}

/// Whether `A - B K` is Hurwitz (all eigenvalue real parts `< 0`).
pub fn is_stabilizing<T: Scalar>(sys: &LinearSystem<T>, policy: &Policy<T>) -> Result<bool> {
    is_stabilizing_with_margin(sys, policy, T::zero())
}

/// Hurwitz check with a conservative margin: requires every eigenvalue real
/// part to lie strictly below `-margin`.
pub fn is_stabilizing_with_margin<T: Scalar>(
    sys: &LinearSystem<T>,
    policy: &Policy<T>,
    margin: T,
) -> Result<bool> {
    if margin < T::zero() {
        return Err(Error::InvalidArgument(
            "stability margin must be nonnegative".into(),
        ));
    }
    let f = sys.closed_loop(policy)?;
    Ok(spectral_abscissa(&f) < -margin)
}

/// Solve the Lyapunov equation `F' X + X F + W = 0` for symmetric `W` and
/// Hurwitz `F`, through the vectorized linear system
/// `(I (x) F' + F' (x) I) vec(X) = -vec(W)`.
///
/// Callers pass `F` or `F'` to obtain either orientation of the equation.
pub fn solve_lyapunov<T: Scalar>(f: &DMatrix<T>, w: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = f.nrows();
    if f.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "F must be square, got {}x{}",
            f.nrows(),
            f.ncols()
        )));
    }
    if w.nrows() != n || w.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "W must be {n}x{n}, got {}x{}",
            w.nrows(),
            w.ncols()
        )));
    }
    check_symmetric(w, "W")?;
    let alpha = spectral_abscissa(f);
    if alpha >= T::zero() {
        return Err(Error::NotStabilizing(format!(
            "Lyapunov coefficient matrix has spectral abscissa {:.3e} >= 0",
            to_f64(alpha)
        )));
    }

    let ft = f.transpose();
    let eye = DMatrix::<T>::identity(n, n);
    let system = eye.kronecker(&ft) + ft.kronecker(&eye);
    let rhs = DVector::from_column_slice(w.as_slice()).scale(-T::one());
    let vec_x = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NumericalFailure("singular Lyapunov system".into()))?;
    let x = DMatrix::from_column_slice(n, n, vec_x.as_slice());
    // Solution of a symmetric-W Lyapunov equation is symmetric; enforce it
    // against rounding.
    Ok((&x + x.transpose()).scale(real(0.5)))
}

/// Exact cost, gradient and the matrices behind them at a stabilizing gain.
pub fn value_certificate<T: Scalar>(
    sys: &LinearSystem<T>,
    policy: &Policy<T>,
) -> Result<ValueCertificate<T>> {
    sys.check_policy_dims(policy)?;
    let f = sys.closed_loop(policy)?;
    let k = policy.gain();
    let w_p = &sys.q + k.transpose() * &sys.r * k;
    let p = solve_lyapunov(&f, &w_p).map_err(|e| match e {
        Error::NotStabilizing(_) => Error::NotStabilizing("policy is not stabilizing".into()),
        other => other,
    })?;
    let x = solve_lyapunov(&f.transpose(), &sys.x0)?;
    let e = (&sys.r * k - sys.b.transpose() * &p).scale(real(2.0));
    let cost = (&p * &sys.x0).trace();
    let grad = &e * &x;
    Ok(ValueCertificate {
        p,
        x,
        e,
        cost,
        grad,
    })
}

/// Optimal gain and cost by Newton–Kleinman iteration from a stabilizing seed.
///
/// Each step solves one Lyapunov equation for the current value matrix and
/// re-centers the gain at `R^-1 B' P`; iteration stops when the gain
/// increment drops below `1e-12` in Frobenius norm. The returned gain has
/// gradient norm at most `1e-8`.
pub fn optimal_policy<T: Scalar>(
    sys: &LinearSystem<T>,
    seed: &Policy<T>,
) -> Result<(Policy<T>, T)> {
    sys.check_policy_dims(seed)?;
    if !is_stabilizing(sys, seed)? {
        return Err(Error::NotStabilizing(
            "Newton-Kleinman seed gain is not stabilizing".into(),
        ));
    }
    let r_chol = Cholesky::new(sys.r.clone())
        .ok_or_else(|| Error::NumericalFailure("R is not positive definite".into()))?;

    let mut k = seed.gain().clone();
    let mut converged = false;
    for _ in 0..GAIN_MAX_ITERS {
        let f = &sys.a - &sys.b * &k;
        let w = &sys.q + k.transpose() * &sys.r * &k;
        let p = solve_lyapunov(&f, &w)?;
        let k_next = r_chol.solve(&(sys.b.transpose() * &p));
        let step = (&k_next - &k).norm();
        k = k_next;
        if step <= real(GAIN_ITERATION_TOL) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NumericalFailure(format!(
            "Newton-Kleinman did not converge in {GAIN_MAX_ITERS} iterations"
        )));
    }
    let policy = Policy::new(k);
    let cert = value_certificate(sys, &policy)?;
    if cert.grad.norm() > real(STATIONARITY_TOL) {
        return Err(Error::NumericalFailure(format!(
            "gradient norm {:.3e} at the computed optimum exceeds {STATIONARITY_TOL:.0e}",
            to_f64(cert.grad.norm())
        )));
    }
    Ok((policy, cert.cost))
}

/// Exact value of the horizon-`tau` truncated quadratic cost from the initial
/// state `zeta`: `zeta' (P - e^{F' tau} P e^{F tau}) zeta` with `F = A - B K`.
///
/// This is the oracle the rollout simulator is validated against.
pub fn truncated_cost_exact<T: Scalar>(
    sys: &LinearSystem<T>,
    policy: &Policy<T>,
    zeta: &DVector<T>,
    tau: T,
) -> Result<T> {
    if zeta.len() != sys.state_dim() {
        return Err(Error::InvalidArgument(format!(
            "initial state must have length {}, got {}",
            sys.state_dim(),
            zeta.len()
        )));
    }
    if tau < T::zero() {
        return Err(Error::InvalidArgument("tau must be nonnegative".into()));
    }
    let cert = value_certificate(sys, policy)?;
    let f = sys.closed_loop(policy)?;
    let propagator = (f.scale(tau)).exp();
    let tail = propagator.transpose() * &cert.p * &propagator;
    let window = &cert.p - tail;
    Ok((zeta.transpose() * window * zeta)[(0, 0)])
}

fn check_square<T: Scalar>(m: &DMatrix<T>, dim: usize, name: &str) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::InvalidArgument(format!(
            "{name} must be {dim}x{dim}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_symmetric<T: Scalar>(m: &DMatrix<T>, name: &str) -> Result<()> {
    let asym = (m - m.transpose()).norm();
    if asym > real::<T>(SHAPE_TOL) * (T::one() + m.norm()) {
        return Err(Error::InvalidArgument(format!(
            "{name} must be symmetric (asymmetry {:.3e})",
            to_f64(asym)
        )));
    }
    Ok(())
}

fn smallest_symmetric_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    m.symmetric_eigenvalues().iter().copied().fold(
        T::max_value().unwrap_or_else(|| T::one() / T::default_epsilon()),
        |acc, ev| {
            if ev < acc {
                ev
            } else {
                acc
            }
        },
    )
}

fn is_controllable<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> bool {
    let (n, m) = (a.nrows(), b.ncols());
    let mut ctrb = DMatrix::<T>::zeros(n, n * m);
    let mut block = b.clone();
    for i in 0..n {
        ctrb.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    let svd = ctrb.svd(false, false);
    let sigma_max = svd.singular_values.max();
    if sigma_max == T::zero() {
        return false;
    }
    let thresh = sigma_max * real::<T>(1e-10);
    svd.singular_values.iter().filter(|s| **s > thresh).count() == n
}
