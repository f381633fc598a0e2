//! Real-thread execution of the asynchronous loop.
//!
//! One mutex guards the master; pull and push-and-update are each atomic
//! under it, workers share nothing else. Timing comes from the wall clock,
//! so multi-worker runs are not bit-reproducible — a single worker is, and
//! matches the simulated mode update for update under the same seed.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::simulated::compute_estimate;
use crate::engine::{EngineConfig, MasterState, StopCondition};
use crate::estimator::GradEstimate;
use crate::lqr::{optimal_policy, LinearSystem, Policy};
use crate::trace::Trace;
use crate::{Error, Result, Scalar};

enum Verdict {
    Reached,
    MaxIters,
    Destabilized(u64),
    Failed(Error),
}

/// Run AZOPG with `cfg.workers` operating-system threads.
///
/// Meaningful wall-clock speedup needs at least `workers + 1` hardware
/// threads; correctness does not.
pub fn run_threaded<T: Scalar + Send + Sync>(
    sys: &LinearSystem<T>,
    initial_policy: &Policy<T>,
    cfg: &EngineConfig<T>,
    stop: &StopCondition,
    seed: u64,
) -> Result<Trace> {
    cfg.validate(sys.state_dim())?;
    let (_, f_star) = optimal_policy(sys, initial_policy)?;
    let master = Mutex::new(
        MasterState::new(
            sys.clone(),
            initial_policy.clone(),
            cfg.eta,
            cfg.batch_size,
            f_star,
            cfg.workers,
        )?
        .with_staleness_limit(cfg.staleness_limit),
    );

    let done = AtomicBool::new(false);
    let verdict: Mutex<Option<Verdict>> = Mutex::new(None);
    let stats: Mutex<(u64, f64, f64)> = Mutex::new((0, f64::INFINITY, 0.0));
    let start = Instant::now();

    std::thread::scope(|scope| {
        for id in 0..cfg.workers {
            let master = &master;
            let done = &done;
            let verdict = &verdict;
            let stats = &stats;
            scope.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id as u64);
                rng.set_stream(0);
                let mut redraws = 0u64;
                let mut cycle_lo = f64::INFINITY;
                let mut cycle_hi = 0.0f64;

                let sleep = cfg.per_worker_sleep.get(id).copied().unwrap_or(0.0);
                while !done.load(Ordering::Acquire) {
                    let cycle_start = Instant::now();
                    let (policy, pulled_iteration) = master.lock().expect("master lock").pull();
                    let grad = match compute_estimate(sys, cfg, &policy, &mut rng, &mut redraws) {
                        Ok(grad) => grad,
                        Err(err) => {
                            settle(verdict, done, Verdict::Failed(err));
                            break;
                        }
                    };
                    if sleep > 0.0 {
                        std::thread::sleep(std::time::Duration::from_secs_f64(sleep));
                    }
                    let now = start.elapsed().as_secs_f64();
                    let estimate = match GradEstimate::new(grad, id, pulled_iteration, now) {
                        Ok(est) => est,
                        Err(err) => {
                            settle(verdict, done, Verdict::Failed(err));
                            break;
                        }
                    };

                    {
                        let mut guard = master.lock().expect("master lock");
                        // A terminal push may have landed while this estimate
                        // was being computed; keep the trace frozen after it.
                        if done.load(Ordering::Acquire) {
                            break;
                        }
                        match guard.push(estimate, now) {
                            Ok(Some(_)) => {
                                if guard.latest_rel_error() <= stop.target_rel_error {
                                    settle(verdict, done, Verdict::Reached);
                                } else if guard.iteration() >= stop.max_iters {
                                    settle(verdict, done, Verdict::MaxIters);
                                }
                            }
                            Ok(None) => {}
                            Err(Error::NotStabilizing(_)) => {
                                let iteration = guard.iteration() + 1;
                                settle(verdict, done, Verdict::Destabilized(iteration));
                            }
                            Err(other) => {
                                settle(verdict, done, Verdict::Failed(other));
                            }
                        }
                    }

                    let cycle = cycle_start.elapsed().as_secs_f64();
                    cycle_lo = cycle_lo.min(cycle);
                    cycle_hi = cycle_hi.max(cycle);
                }

                let mut guard = stats.lock().expect("stats lock");
                guard.0 += redraws;
                guard.1 = guard.1.min(cycle_lo);
                guard.2 = guard.2.max(cycle_hi);
            });
        }
    });

    let (redraws, cycle_lo, cycle_hi) = stats.into_inner().expect("stats lock");
    let mut trace = master.into_inner().expect("master lock").into_trace();
    trace.redraws = redraws;
    trace.observed_t_lo = cycle_lo;
    trace.observed_t_hi = cycle_hi;

    match verdict.into_inner().expect("verdict lock") {
        Some(Verdict::Reached) => Ok(trace),
        Some(Verdict::MaxIters) => Err(Error::TargetNotReached {
            max_iters: stop.max_iters,
            trace: Box::new(trace),
        }),
        Some(Verdict::Destabilized(iteration)) => Err(Error::Destabilized {
            iteration,
            trace: Box::new(trace),
        }),
        Some(Verdict::Failed(err)) => Err(err),
        None => Err(Error::NumericalFailure(
            "threaded run ended without a verdict".into(),
        )),
    }
}

/// First terminal event wins; everything after it only observes `done`.
fn settle(verdict: &Mutex<Option<Verdict>>, done: &AtomicBool, outcome: Verdict) {
    let mut slot = verdict.lock().expect("verdict lock");
    if slot.is_none() {
        *slot = Some(outcome);
        done.store(true, Ordering::Release);
    }
}
