//! Deterministic discrete-event execution of the asynchronous loop.
//!
//! Every worker is an event source: it pulls the latest policy, computes a
//! two-point estimate, and pushes it after a cycle duration drawn from the
//! delay model. Events are processed in `(time, worker_id)` order, so a run
//! is a pure function of its seed.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{DelayLaw, DelayModel, EngineConfig, MasterState, StopCondition};
use crate::estimator::{two_point_estimate, GradEstimate};
use crate::lqr::{optimal_policy, LinearSystem, Policy};
use crate::rollout::{sample_initial_state, Perturbation};
use crate::trace::Trace;
use crate::{Error, Result, Scalar};

/// Redraw budget per estimate before sampling is declared broken.
const MAX_REDRAWS: u64 = 10_000;

/// Worker-local random streams: one for samples, one for cycle durations.
/// Separate streams keep the sample sequence independent of how many
/// duration draws a delay law consumes, which is what makes the single-worker
/// simulated run match the threaded one draw-for-draw.
struct SimWorker {
    id: usize,
    sample_rng: ChaCha8Rng,
    delay_rng: ChaCha8Rng,
    fixed_base: Option<f64>,
}

impl SimWorker {
    fn new(id: usize, seed: u64, dm: &DelayModel) -> Self {
        let mut sample_rng = ChaCha8Rng::seed_from_u64(seed ^ id as u64);
        sample_rng.set_stream(0);
        let mut delay_rng = ChaCha8Rng::seed_from_u64(seed ^ id as u64);
        delay_rng.set_stream(1);
        let fixed_base = match dm.law {
            DelayLaw::Uniform => None,
            DelayLaw::FixedPerWorker => Some(dm.base_duration(&mut delay_rng)),
        };
        Self {
            id,
            sample_rng,
            delay_rng,
            fixed_base,
        }
    }

    fn next_duration(&mut self, dm: &DelayModel) -> f64 {
        let base = self
            .fixed_base
            .unwrap_or_else(|| dm.base_duration(&mut self.delay_rng));
        base + dm.extra_for(self.id)
    }
}

struct Pending<T: Scalar> {
    time: f64,
    worker: usize,
    estimate: GradEstimate<T>,
}

impl<T: Scalar> PartialEq for Pending<T> {
    fn eq(&self, other: &Self) -> bool {
        self.time.to_bits() == other.time.to_bits() && self.worker == other.worker
    }
}

impl<T: Scalar> Eq for Pending<T> {}

impl<T: Scalar> PartialOrd for Pending<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> Ord for Pending<T> {
    /// Max-heap key inverted so the earliest `(time, worker)` pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.worker.cmp(&other.worker))
            .reverse()
    }
}

/// Run AZOPG as a deterministic simulation and return its trace.
///
/// Simulated time advances through drawn cycle durations; rollout costs are
/// still computed exactly as in the threaded mode. Fails with
/// [`Error::Destabilized`] if an update leaves the stabilizing set and with
/// [`Error::TargetNotReached`] when the iteration budget runs out; both carry
/// the partial trace.
pub fn run_simulated<T: Scalar>(
    sys: &LinearSystem<T>,
    initial_policy: &Policy<T>,
    cfg: &EngineConfig<T>,
    dm: &DelayModel,
    stop: &StopCondition,
    seed: u64,
) -> Result<Trace> {
    cfg.validate(sys.state_dim())?;
    if dm.per_worker_extra.len() > cfg.workers {
        return Err(Error::InvalidArgument(format!(
            "{} per-worker slowdowns for {} workers",
            dm.per_worker_extra.len(),
            cfg.workers
        )));
    }
    let (_, f_star) = optimal_policy(sys, initial_policy)?;
    let mut master = MasterState::new(
        sys.clone(),
        initial_policy.clone(),
        cfg.eta,
        cfg.batch_size,
        f_star,
        cfg.workers,
    )?
    .with_staleness_limit(cfg.staleness_limit);

    let mut workers: Vec<SimWorker> = (0..cfg.workers)
        .map(|id| SimWorker::new(id, seed, dm))
        .collect();
    let mut heap: BinaryHeap<Pending<T>> = BinaryHeap::with_capacity(cfg.workers);
    let mut redraws = 0u64;
    let mut observed = (f64::INFINITY, 0f64);

    for worker in workers.iter_mut() {
        let pending = start_cycle(
            sys,
            cfg,
            dm,
            &master,
            worker,
            0.0,
            &mut redraws,
            &mut observed,
        )?;
        heap.push(pending);
    }

    loop {
        let Pending {
            time,
            worker,
            estimate,
        } = heap.pop().expect("every worker keeps one pending push");
        match master.push(estimate, time) {
            Ok(Some(_)) => {
                if master.latest_rel_error() <= stop.target_rel_error {
                    return Ok(finish(master.into_trace(), redraws, observed));
                }
                if master.iteration() >= stop.max_iters {
                    return Err(Error::TargetNotReached {
                        max_iters: stop.max_iters,
                        trace: Box::new(finish(master.into_trace(), redraws, observed)),
                    });
                }
            }
            Ok(None) => {}
            Err(Error::NotStabilizing(_)) => {
                let iteration = master.iteration() + 1;
                return Err(Error::Destabilized {
                    iteration,
                    trace: Box::new(finish(master.into_trace(), redraws, observed)),
                });
            }
            Err(other) => return Err(other),
        }
        let pending = start_cycle(
            sys,
            cfg,
            dm,
            &master,
            &mut workers[worker],
            time,
            &mut redraws,
            &mut observed,
        )?;
        heap.push(pending);
    }
}

/// Pull, sample, compute the estimate, and schedule its push. Divergent
/// sample pairs are redrawn; the estimate always reflects the policy at pull
/// time regardless of updates that land while it is "in flight".
#[allow(clippy::too_many_arguments)]
fn start_cycle<T: Scalar>(
    sys: &LinearSystem<T>,
    cfg: &EngineConfig<T>,
    dm: &DelayModel,
    master: &MasterState<T>,
    worker: &mut SimWorker,
    now: f64,
    redraws: &mut u64,
    observed: &mut (f64, f64),
) -> Result<Pending<T>> {
    let (policy, pulled_iteration) = master.pull();
    let grad = compute_estimate(sys, cfg, &policy, &mut worker.sample_rng, redraws)?;
    let duration = worker.next_duration(dm);
    observed.0 = observed.0.min(duration);
    observed.1 = observed.1.max(duration);
    let time = now + duration;
    let estimate = GradEstimate::new(grad, worker.id, pulled_iteration, time)?;
    Ok(Pending {
        time,
        worker: worker.id,
        estimate,
    })
}

/// One estimate worth of sampling, shared verbatim with the threaded mode.
pub(super) fn compute_estimate<T: Scalar, R: Rng + ?Sized>(
    sys: &LinearSystem<T>,
    cfg: &EngineConfig<T>,
    policy: &Policy<T>,
    rng: &mut R,
    redraws: &mut u64,
) -> Result<nalgebra::DMatrix<T>> {
    let (m, n) = (sys.input_dim(), sys.state_dim());
    let mut attempts = 0u64;
    loop {
        let direction = Perturbation::sample(m, n, rng);
        let zeta = sample_initial_state(&cfg.dist, rng);
        match two_point_estimate(sys, policy, &zeta, &direction, cfg.radius, &cfg.rollout) {
            Ok(grad) => return Ok(grad),
            Err(Error::Divergence { .. }) => {
                *redraws += 1;
                attempts += 1;
                if attempts >= MAX_REDRAWS {
                    return Err(Error::SamplingFailure(format!(
                        "{MAX_REDRAWS} consecutive divergent sample pairs; \
                         the policy neighborhood looks destabilizing"
                    )));
                }
            }
            Err(other) => return Err(other),
        }
    }
}

fn finish(mut trace: Trace, redraws: u64, observed: (f64, f64)) -> Trace {
    trace.redraws = redraws;
    trace.observed_t_lo = observed.0;
    trace.observed_t_hi = observed.1;
    trace
}
