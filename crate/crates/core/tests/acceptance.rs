//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantities (visible with `--nocapture`; assertions carry the
//! same numbers on failure).
//!
//! The benchmark plant throughout is the four-mass chain with the benchmark
//! hyperparameters: eta = 2e-3, r = 1e-5, tau = 100, N = 32, K0 = 0,
//! relative-error target 1e-3. The expensive worker sweeps are computed once
//! and shared across criteria 5-8.

use azopg::bench::{mass_spring_damper, scalar_system, speedup_report};
use azopg::engine::{delay_bound, DelayLaw, DelayModel, EngineConfig, StopCondition};
use azopg::lqr::{solve_lyapunov, truncated_cost_exact, value_certificate, LinearSystem, Policy};
use azopg::rollout::{
    rollout_cost, sample_initial_state, InitDistribution, Perturbation, RolloutConfig,
};
use azopg::trace::{Trace, TraceRow};
use azopg::{run_simulated, run_threaded, two_point_estimate};
use nalgebra::{DMatrix, DVector};
use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SWEEP_SEED: u64 = 3;
const TARGET: f64 = 1e-3;
const BATCH: usize = 32;

fn benchmark_system() -> LinearSystem<f64> {
    mass_spring_damper(4).unwrap()
}

fn fig3_engine_config(workers: usize) -> EngineConfig<f64> {
    EngineConfig {
        eta: 2e-3,
        batch_size: BATCH,
        radius: 1e-5,
        rollout: RolloutConfig::new(100.0, 1e-2).unwrap(),
        workers,
        dist: InitDistribution::gaussian(8),
        staleness_limit: None,
        per_worker_sleep: Vec::new(),
    }
}

fn homogeneous_delays() -> DelayModel {
    DelayModel::uniform(0.05, 0.15).unwrap()
}

fn slowed_delays(workers: usize) -> DelayModel {
    // Half the workers pay +100 ms per cycle.
    DelayModel::new(0.05, 0.15, vec![0.1; workers / 2], DelayLaw::Uniform).unwrap()
}

struct Sweeps {
    homogeneous: Vec<(usize, Trace)>,
    slowed: Vec<(usize, Trace)>,
}

/// All seven full-length runs behind criteria 5-8, computed once. Each run
/// is internally single-threaded and deterministic; independent runs execute
/// on their own OS threads.
static SWEEPS: Lazy<Sweeps> = Lazy::new(|| {
    let stop = StopCondition::new(TARGET, 100_000).unwrap();
    let jobs: Vec<(usize, bool)> = vec![
        (1, false),
        (2, false),
        (4, false),
        (8, false),
        (2, true),
        (4, true),
        (8, true),
    ];
    let mut results: Vec<(usize, bool, Trace)> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(workers, slowed)| {
                scope.spawn(move || {
                    let sys = benchmark_system();
                    let cfg = fig3_engine_config(workers);
                    let dm = if slowed {
                        slowed_delays(workers)
                    } else {
                        homogeneous_delays()
                    };
                    let trace =
                        run_simulated(&sys, &Policy::zeros(4, 8), &cfg, &dm, &stop, SWEEP_SEED)
                            .unwrap_or_else(|e| {
                                panic!("sweep run M={workers} slowed={slowed}: {e}")
                            });
                    (workers, slowed, trace)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    results.sort_by_key(|(workers, slowed, _)| (*slowed, *workers));
    let (slowed, homogeneous): (Vec<_>, Vec<_>) =
        results.into_iter().partition(|(_, slowed, _)| *slowed);
    Sweeps {
        homogeneous: homogeneous.into_iter().map(|(m, _, t)| (m, t)).collect(),
        slowed: slowed.into_iter().map(|(m, _, t)| (m, t)).collect(),
    }
});

#[test]
fn criterion_01_exact_gradient_oracle() {
    let sys = scalar_system::<f64>();
    let cert = value_certificate(&sys, &Policy::new(DMatrix::from_element(1, 1, 2.0))).unwrap();
    let cost_err = (cert.cost - 1.25).abs();
    let grad_err = (cert.grad[(0, 0)] - 0.375).abs();
    assert!(cost_err <= 1e-12, "cost error {cost_err:.3e}");
    assert!(grad_err <= 1e-12, "gradient error {grad_err:.3e}");
    println!(
        "criterion 1 PASS: scalar oracle f=1.25 grad=0.375 (errors {cost_err:.1e}, {grad_err:.1e})"
    );
}

#[test]
fn criterion_02_finite_difference_agreement() {
    let sys = benchmark_system();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let policy = random_stabilizing_gain(&sys, 0.3, &mut rng);
        let cert = value_certificate(&sys, &policy).unwrap();
        let mut fd = DMatrix::<f64>::zeros(4, 8);
        for i in 0..4 {
            for j in 0..8 {
                let mut plus = policy.gain().clone();
                plus[(i, j)] += h;
                let mut minus = policy.gain().clone();
                minus[(i, j)] -= h;
                let f_plus = value_certificate(&sys, &Policy::new(plus)).unwrap().cost;
                let f_minus = value_certificate(&sys, &Policy::new(minus)).unwrap().cost;
                fd[(i, j)] = (f_plus - f_minus) / (2.0 * h);
            }
        }
        let rel = (&cert.grad - &fd).norm() / cert.grad.norm();
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-5, "worst FD relative error {worst:.3e}");
    println!("criterion 2 PASS: 20 gains, worst FD relative error {worst:.2e} <= 1e-5");
}

#[test]
fn criterion_03_rollout_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let states = rng.random_range(1..=8);
        let inputs = rng.random_range(1..=states);
        let (sys, policy) = azopg::bench::random_test_case::<f64, _>(states, inputs, &mut rng);
        let zeta = DVector::from_fn(states, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cfg = RolloutConfig::new(100.0, 1e-3).unwrap();
        let exact = truncated_cost_exact(&sys, &policy, &zeta, 100.0).unwrap();
        let rolled = rollout_cost(&sys, &policy, &zeta, &cfg).unwrap();
        let rel = (rolled - exact).abs() / (1.0 + exact.abs());
        worst = worst.max(rel);
        assert!(
            rel <= 1e-6,
            "case {case} (n={states}): relative error {rel:.3e}"
        );
    }
    println!("criterion 3 PASS: 50 rollouts vs exact oracle, worst relative error {worst:.2e}");
}

#[test]
fn criterion_04_estimator_unbiasedness() {
    let sys = scalar_system::<f64>();
    let policy = Policy::new(DMatrix::from_element(1, 1, 2.0));
    let cfg = RolloutConfig::new(100.0, 1e-2).unwrap();
    let dist = InitDistribution::gaussian(1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples = 100_000;
    let mut acc = 0.0;
    for _ in 0..samples {
        let u = Perturbation::sample(1, 1, &mut rng);
        let z = sample_initial_state(&dist, &mut rng);
        let g = two_point_estimate(&sys, &policy, &z, &u, 1e-4, &cfg).unwrap();
        acc += g[(0, 0)];
    }
    let mean = acc / samples as f64;
    let rel = (mean - 0.375).abs() / 0.375;
    assert!(
        rel <= 0.01,
        "mean {mean:.6} deviates {:.3}% from 0.375",
        100.0 * rel
    );
    println!(
        "criterion 4 PASS: mean of {samples} two-point estimates = {mean:.5} ({:.3}% off 0.375)",
        100.0 * rel
    );
}

#[test]
fn criterion_05_convergence_shape() {
    let trace = &SWEEPS.homogeneous.iter().find(|(m, _)| *m == 1).unwrap().1;
    let hit = trace
        .first_at_target(TARGET)
        .expect("single-worker run reaches 1e-3");
    let r2 = log_linear_r2(&trace.rows, TARGET);
    assert!(r2 >= 0.95, "log-linear fit R^2 = {r2:.4}");
    println!(
        "criterion 5 PASS: M=1 reaches 1e-3 at iteration {} ({} rollouts), log-linear R^2 = {:.4}",
        hit.iteration, hit.rollouts_total, r2
    );
}

#[test]
fn criterion_06_linear_speedup() {
    let report = speedup_report(&SWEEPS.homogeneous, TARGET).unwrap();
    let baseline_rollouts = report.rows[0].rollouts_per_worker as f64;
    for row in &report.rows {
        let m = row.workers as f64;
        assert!(
            row.speedup >= 0.8 * m && row.speedup <= 1.05 * m,
            "speedup at M={}: {:.3} outside [{:.1}, {:.2}]",
            row.workers,
            row.speedup,
            0.8 * m,
            1.05 * m
        );
        let expected = baseline_rollouts / m;
        let dev = (row.rollouts_per_worker as f64 - expected).abs() / expected;
        assert!(
            dev <= 0.2,
            "rollouts/worker at M={}: {} vs expected {expected:.0} ({dev:.1}% off)",
            row.workers,
            row.rollouts_per_worker
        );
    }
    // Monotone speedup after 10% smoothing.
    for pair in report.rows.windows(2) {
        assert!(
            pair[1].speedup >= 0.9 * pair[0].speedup,
            "speedup not monotone: M={} gives {:.3} after M={} gave {:.3}",
            pair[1].workers,
            pair[1].speedup,
            pair[0].workers,
            pair[0].speedup
        );
    }
    let summary: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("M={} speedup={:.2}", r.workers, r.speedup))
        .collect();
    println!("criterion 6 PASS: {}", summary.join(", "));
}

#[test]
fn criterion_07_slow_worker_robustness() {
    let baseline = SWEEPS
        .homogeneous
        .iter()
        .find(|(m, _)| *m == 1)
        .unwrap()
        .clone();
    let mut traces = vec![baseline];
    traces.extend(SWEEPS.slowed.iter().cloned());
    let report = speedup_report(&traces, TARGET).unwrap();
    for row in report.rows.iter().filter(|r| r.workers > 1) {
        let m = row.workers as f64;
        assert!(
            row.speedup >= 0.5 * m,
            "slowed speedup at M={}: {:.3} < {:.1}",
            row.workers,
            row.speedup,
            0.5 * m
        );
    }
    let summary: Vec<String> = report
        .rows
        .iter()
        .skip(1)
        .map(|r| format!("M={} speedup={:.2}", r.workers, r.speedup))
        .collect();
    println!(
        "criterion 7 PASS (half of workers +100ms): {}",
        summary.join(", ")
    );
}

#[test]
fn criterion_08_delay_bound_holds_everywhere() {
    let mut checked = 0;
    for (workers, trace) in &SWEEPS.homogeneous {
        let bound = delay_bound(0.05, 0.15, *workers, BATCH).unwrap();
        assert!(
            trace.max_delay_seen() <= bound,
            "homogeneous M={workers}: max delay {} > bound {bound}",
            trace.max_delay_seen()
        );
        checked += 1;
    }
    for (workers, trace) in &SWEEPS.slowed {
        let bound = delay_bound(
            0.05,
            slowed_delays(*workers).effective_t_hi(),
            *workers,
            BATCH,
        )
        .unwrap();
        assert!(
            trace.max_delay_seen() <= bound,
            "slowed M={workers}: max delay {} > bound {bound}",
            trace.max_delay_seen()
        );
        checked += 1;
    }

    // Companion property for the out-of-scope failure-probability constants:
    // descent on at least 90% of iterations of the converged baseline.
    let baseline = &SWEEPS.homogeneous.iter().find(|(m, _)| *m == 1).unwrap().1;
    let decreases = baseline
        .rows
        .windows(2)
        .filter(|pair| pair[1].rel_error < pair[0].rel_error)
        .count();
    let total = baseline.rows.len() - 1;
    assert!(
        decreases as f64 >= 0.9 * total as f64,
        "descent on only {decreases}/{total} iterations"
    );
    println!(
        "criterion 8 PASS: delay bound satisfied on {checked} runs, descent on {decreases}/{total} iterations"
    );
}

#[test]
fn criterion_09_threaded_mode_sanity() {
    // Step-for-step equivalence of the two modes with one worker. Timing
    // columns differ by construction; everything else must match bitwise.
    let sys = benchmark_system();
    let cfg = fig3_engine_config(1);
    let stop = StopCondition::new(0.3, 100_000).unwrap();
    let simulated = run_simulated(
        &sys,
        &Policy::zeros(4, 8),
        &cfg,
        &homogeneous_delays(),
        &stop,
        SWEEP_SEED,
    )
    .unwrap();
    let threaded = run_threaded(&sys, &Policy::zeros(4, 8), &cfg, &stop, SWEEP_SEED).unwrap();
    assert_eq!(simulated.rows.len(), threaded.rows.len());
    for (s, t) in simulated.rows.iter().zip(&threaded.rows) {
        assert_eq!(s.iteration, t.iteration);
        assert_eq!(s.rel_error, t.rel_error, "iteration {}", s.iteration);
        assert_eq!(s.grad_norm, t.grad_norm);
        assert_eq!(s.rollouts_total, t.rollouts_total);
        assert_eq!(s.max_delay, t.max_delay);
    }

    // Wall-clock speedup is machine-dependent; measured only with enough
    // hardware threads for master + 4 workers to run truly in parallel.
    let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
    if cores < 8 {
        println!(
            "criterion 9 PASS: M=1 threaded == M=1 simulated ({} iterations); \
             wall-clock speedup SKIPPED (environment-sensitive: {cores} hardware threads < 8)",
            simulated.rows.len() - 1
        );
        return;
    }
    let full_stop = StopCondition::new(TARGET, 100_000).unwrap();
    let t_start = std::time::Instant::now();
    run_threaded(
        &sys,
        &Policy::zeros(4, 8),
        &fig3_engine_config(1),
        &full_stop,
        SWEEP_SEED,
    )
    .unwrap();
    let t1 = t_start.elapsed().as_secs_f64();
    let t_start = std::time::Instant::now();
    run_threaded(
        &sys,
        &Policy::zeros(4, 8),
        &fig3_engine_config(4),
        &full_stop,
        SWEEP_SEED,
    )
    .unwrap();
    let t4 = t_start.elapsed().as_secs_f64();
    let speedup = t1 / t4;
    assert!(
        speedup >= 2.5,
        "threaded M=4 wall-clock speedup {speedup:.2} < 2.5"
    );
    println!(
        "criterion 9 PASS: modes equivalent; threaded M=4 wall-clock speedup {speedup:.2} >= 2.5"
    );
}

#[test]
fn criterion_10_property_suites() {
    // Lyapunov residuals on 100 random Hurwitz instances up to n = 16.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_residual: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=16);
        let f = azopg::bench::random_hurwitz::<f64, _>(n, &mut rng);
        let mut w = DMatrix::<f64>::zeros(n, n);
        for v in w.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let w = (&w + w.transpose()).scale(0.5);
        let x = solve_lyapunov(&f, &w).unwrap();
        let residual = (f.transpose() * &x + &x * &f + &w).norm() / (1.0 + w.norm());
        worst_residual = worst_residual.max(residual);
    }
    assert!(
        worst_residual <= 1e-10,
        "worst Lyapunov residual {worst_residual:.3e}"
    );

    // Sphere samples sit on the sphere of radius sqrt(m*n) to 1e-12.
    let mut worst_norm_dev: f64 = 0.0;
    for _ in 0..1_000 {
        let m = rng.random_range(1..=6);
        let n = rng.random_range(1..=6);
        let u = Perturbation::<f64>::sample(m, n, &mut rng);
        let dev = (u.matrix().norm() - ((m * n) as f64).sqrt()).abs();
        worst_norm_dev = worst_norm_dev.max(dev);
    }
    assert!(
        worst_norm_dev <= 1e-12,
        "worst sphere deviation {worst_norm_dev:.3e}"
    );

    // Simulated runs are byte-reproducible under a fixed seed.
    let sys = benchmark_system();
    let cfg = fig3_engine_config(2);
    let stop = StopCondition::new(0.3, 100_000).unwrap();
    let dm = homogeneous_delays();
    let a = run_simulated(&sys, &Policy::zeros(4, 8), &cfg, &dm, &stop, 7).unwrap();
    let b = run_simulated(&sys, &Policy::zeros(4, 8), &cfg, &dm, &stop, 7).unwrap();
    assert_eq!(
        a.to_csv_string().unwrap(),
        b.to_csv_string().unwrap(),
        "fixed-seed runs must serialize identically"
    );
    println!(
        "criterion 10 PASS: Lyapunov residual {worst_residual:.2e} <= 1e-10, \
         sphere norms to {worst_norm_dev:.2e}, byte-reproducible traces"
    );
}

fn random_stabilizing_gain(
    sys: &LinearSystem<f64>,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Policy<f64> {
    loop {
        let gain = DMatrix::from_fn(sys.input_dim(), sys.state_dim(), |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        let policy = Policy::new(gain);
        if azopg::is_stabilizing(sys, &policy).unwrap() {
            return policy;
        }
    }
}

/// R^2 of a least-squares line through `(iteration, ln rel_error)` after a
/// 10% burn-in, up to the first row at the target.
fn log_linear_r2(rows: &[TraceRow], target: f64) -> f64 {
    let hit = rows
        .iter()
        .position(|r| r.rel_error <= target)
        .unwrap_or(rows.len() - 1);
    let start = (hit / 10).max(1);
    let pts: Vec<(f64, f64)> = rows[start..=hit]
        .iter()
        .map(|r| (r.iteration as f64, r.rel_error.ln()))
        .collect();
    let n = pts.len() as f64;
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - mean_y) * (p.1 - mean_y)).sum();
    (sxy * sxy) / (sxx * syy)
}
