//! Asynchronous zero-order policy gradient (AZOPG) for the continuous-time
//! linear quadratic regulator.
//!
//! The crate is organized in layers:
//!
//! * [`lqr`] — exact model-based LQR mathematics: Lyapunov solves, analytic
//!   cost/gradient certificates, the optimal gain via Newton–Kleinman, and an
//!   exact truncated-cost oracle.
//! * [`rollout`] — closed-loop trajectory simulation with a fixed-step
//!   fourth-order integrator, plus the random inputs (initial states, sphere
//!   perturbations) the learner consumes.
//! * [`estimator`] — two-point zero-order gradient estimates and batch
//!   averaging.
//! * [`engine`] — the asynchronous master–worker runtime, in both a
//!   deterministic discrete-event mode and a real-thread mode.
//! * [`bench`] — benchmark systems, experiment harness, CSV traces and
//!   speedup reports.
//!
//! All numeric routines are generic over the scalar type through [`Scalar`];
//! `f64` aliases for the main types live at the crate root. Everything is
//! deterministic under a fixed seed in simulated mode.

pub mod bench;
pub mod engine;
pub mod error;
pub mod estimator;
pub mod lqr;
pub mod rollout;
pub mod trace;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

pub use error::{Error, Result};

/// Floating-point scalar for all numeric routines: `f32` or `f64`.
pub trait Scalar: RealField + Copy + FromPrimitive + ToPrimitive {}
impl<T> Scalar for T where T: RealField + Copy + FromPrimitive + ToPrimitive {}

/// Convert an `f64` constant into the working scalar type.
pub(crate) fn real<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 constant representable in scalar type")
}

/// Convert a working scalar into `f64` for logging and traces.
pub(crate) fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().expect("scalar convertible to f64")
}

pub use engine::{
    delay_bound, run_simulated, run_threaded, DelayLaw, DelayModel, EngineConfig, MasterState,
    StopCondition,
};
pub use estimator::{batch_average, two_point_estimate, GradEstimate};
pub use lqr::{
    is_stabilizing, optimal_policy, solve_lyapunov, truncated_cost_exact, value_certificate,
    LinearSystem, Policy, ValueCertificate,
};
pub use rollout::{
    rollout_cost, sample_initial_state, InitDistribution, InitKind, Perturbation, RolloutConfig,
};
pub use trace::{Trace, TraceRow};

/// Concrete `f64` aliases for the default working precision.
pub type LinearSystem64 = LinearSystem<f64>;
pub type Policy64 = Policy<f64>;
pub type ValueCertificate64 = ValueCertificate<f64>;
pub type RolloutConfig64 = RolloutConfig<f64>;
pub type InitDistribution64 = InitDistribution<f64>;
pub type Perturbation64 = Perturbation<f64>;
pub type GradEstimate64 = GradEstimate<f64>;
pub type EngineConfig64 = EngineConfig<f64>;
pub type MasterState64 = MasterState<f64>;
