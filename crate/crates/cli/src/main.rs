//! `azopg` — experiment harness for asynchronous zero-order policy gradient
//! on continuous-time LQR plants.
//!
//! Subcommands:
//! * `solve`  — one learning run, trace CSV + metadata on disk.
//! * `oracle` — model-based gradient-descent baseline with the same schema.
//! * `bench`  — worker sweep plus a speedup report.
//! * `check`  — runtime invariant and diagnostic suite.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 run failure,
//! 4 target not reached.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use azopg::bench::{
    build_system, gradient_dominance_probe, mass_spring_damper, run_experiment, run_oracle_descent,
    scalar_system, speedup_report, trace_path, version_string, ExperimentConfig, Mode, SystemSpec,
};
use azopg::engine::{delay_bound, DelayModel, EngineConfig, StopCondition};
use azopg::lqr::{optimal_policy, solve_lyapunov, truncated_cost_exact, value_certificate, Policy};
use azopg::rollout::{rollout_cost, InitDistribution, InitKind, Perturbation, RolloutConfig};
use azopg::{run_simulated, Error, Result};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Parser)]
#[command(
    name = "azopg",
    version,
    about = "Asynchronous zero-order policy gradient for LQR"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run AZOPG once and write its trace.
    Solve(ConfigFlags),
    /// Model-based policy gradient baseline (exact gradients, no rollouts).
    Oracle(ConfigFlags),
    /// Sweep worker counts and report speedups.
    Bench(ConfigFlags),
    /// Run the invariant and diagnostic suite.
    Check {
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Flags mirror the experiment-config fields; a JSON file may supply any
/// subset and explicit flags override it. The seed resolves as
/// `--seed` > `AZOPG_SEED` > config file > built-in default.
#[derive(Args)]
struct ConfigFlags {
    /// JSON file with experiment-config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Plant: `msd:<masses>`, `scalar`, or `file:<path>`.
    #[arg(long)]
    system: Option<String>,
    /// Worker counts (comma-separated); `solve` uses the first.
    #[arg(long, value_delimiter = ',')]
    workers: Option<Vec<usize>>,
    /// Step size.
    #[arg(long)]
    eta: Option<f64>,
    /// Two-point smoothing radius.
    #[arg(long)]
    r: Option<f64>,
    /// Rollout horizon.
    #[arg(long)]
    tau: Option<f64>,
    /// Integrator step.
    #[arg(long)]
    dt: Option<f64>,
    /// Batch size (estimates per update).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target_rel_error: Option<f64>,
    /// `simulated` or `threaded`.
    #[arg(long)]
    mode: Option<String>,
    /// Fraction of workers slowed by `slow_extra` seconds.
    #[arg(long)]
    slow_fraction: Option<f64>,
    #[arg(long)]
    slow_extra: Option<f64>,
    /// Initial-state law: `gaussian`, `rademacher`, `truncated-gaussian`.
    #[arg(long)]
    dist: Option<String>,
    /// Simulated cycle-duration interval.
    #[arg(long)]
    t_lo: Option<f64>,
    #[arg(long)]
    t_hi: Option<f64>,
    #[arg(long)]
    max_iters: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Drop estimates staler than this many updates (filtering changes the
    /// algorithm; leave unset for the plain method).
    #[arg(long)]
    staleness_limit: Option<u64>,
}

impl ConfigFlags {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str::<ExperimentConfig>(&text)
                    .map_err(|e| Error::InvalidArgument(format!("config file: {e}")))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(spec) = self.system {
            cfg.system = SystemSpec::from_str(&spec)?;
        }
        if let Some(workers) = self.workers {
            cfg.workers = workers;
        }
        if let Some(eta) = self.eta {
            cfg.eta = eta;
        }
        if let Some(r) = self.r {
            cfg.r = r;
        }
        if let Some(tau) = self.tau {
            cfg.tau = tau;
        }
        if let Some(dt) = self.dt {
            cfg.dt = dt;
        }
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(target) = self.target_rel_error {
            cfg.target_rel_error = target;
        }
        if let Some(mode) = self.mode {
            cfg.mode = Mode::from_str(&mode)?;
        }
        if let Some(f) = self.slow_fraction {
            cfg.slow_fraction = f;
        }
        if let Some(extra) = self.slow_extra {
            cfg.slow_extra = extra;
        }
        if let Some(dist) = self.dist {
            cfg.dist = InitKind::from_str(&dist)?;
        }
        if let Some(t_lo) = self.t_lo {
            cfg.t_lo = t_lo;
        }
        if let Some(t_hi) = self.t_hi {
            cfg.t_hi = t_hi;
        }
        if let Some(max_iters) = self.max_iters {
            cfg.max_iters = max_iters;
        }
        if let Some(out_dir) = self.out_dir {
            cfg.out_dir = out_dir;
        }
        if self.staleness_limit.is_some() {
            cfg.staleness_limit = self.staleness_limit;
        }
        cfg.seed = match (self.seed, seed_from_env()?) {
            (Some(flag), _) => flag,
            (None, Some(env)) => env,
            (None, None) => cfg.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var("AZOPG_SEED") {
        Ok(raw) => raw
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("AZOPG_SEED must be a u64, got {raw:?}"))),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Solve(flags) => cmd_solve(flags),
        Command::Oracle(flags) => cmd_oracle(flags),
        Command::Bench(flags) => cmd_bench(flags),
        Command::Check { seed } => cmd_check(seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn cmd_solve(flags: ConfigFlags) -> Result<()> {
    let mut cfg = flags.resolve()?;
    cfg.workers.truncate(1);
    let workers = cfg.workers[0];
    let traces = run_experiment(&cfg)?;
    let (_, trace) = &traces[0];
    let last = trace.rows.last().expect("trace has rows");
    println!(
        "reached rel_error {:.3e} at iteration {} ({} rollouts, {} redraws, {:.2} s {})",
        last.rel_error,
        last.iteration,
        last.rollouts_total,
        trace.redraws,
        last.time_s,
        match cfg.mode {
            Mode::Simulated => "simulated",
            Mode::Threaded => "wall clock",
        },
    );
    println!("trace: {}", trace_path(&cfg.out_dir, workers).display());
    println!("metadata: {}", cfg.out_dir.join("meta.json").display());
    Ok(())
}

fn cmd_oracle(flags: ConfigFlags) -> Result<()> {
    let cfg = flags.resolve()?;
    let sys = build_system(&cfg.system)?;
    let initial = cfg.initial_policy(&sys)?;
    let stop = cfg.stop_condition()?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let (k_star, f_star) = optimal_policy(&sys, &initial)?;
    let path = cfg.out_dir.join("oracle.csv");
    let outcome = run_oracle_descent(&sys, &initial, cfg.eta, &stop);
    let trace = match outcome {
        Ok(trace) => trace,
        Err(err) => {
            if let Some(partial) = err.partial_trace() {
                partial.write_csv_path(&path)?;
            }
            return Err(err);
        }
    };
    trace.write_csv_path(&path)?;
    let last = trace.rows.last().expect("trace has rows");
    println!(
        "model-based descent reached rel_error {:.3e} at iteration {} (f* = {:.6}, |K*| = {:.4})",
        last.rel_error,
        last.iteration,
        f_star,
        k_star.gain().norm()
    );
    println!("trace: {}", path.display());
    Ok(())
}

fn cmd_bench(flags: ConfigFlags) -> Result<()> {
    let cfg = flags.resolve()?;
    let traces = run_experiment(&cfg)?;
    let report = speedup_report(&traces, cfg.target_rel_error)?;
    let path = cfg.out_dir.join("speedup.csv");
    report.write_csv_path(&path)?;
    print!("{report}");
    println!("speedup table: {}", path.display());
    Ok(())
}

/// Runtime diagnostic suite: one PASS/FAIL line per check, exit 3 on any
/// failure. Mirrors the library's invariants against fresh random instances.
fn cmd_check(seed: Option<u64>) -> Result<()> {
    let seed = match (seed, seed_from_env()?) {
        (Some(flag), _) => flag,
        (None, Some(env)) => env,
        (None, None) => 42,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    let mut verdict = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failures += 1;
        }
    };

    // Lyapunov residuals on random Hurwitz instances.
    {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let n = rng.random_range(1..=16);
            let f = azopg::bench::random_hurwitz::<f64, _>(n, &mut rng);
            let mut w = DMatrix::<f64>::zeros(n, n);
            for v in w.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
            let w = (&w + w.transpose()).scale(0.5);
            let x = solve_lyapunov(&f, &w).unwrap();
            worst = worst.max((f.transpose() * &x + &x * &f + &w).norm() / (1.0 + w.norm()));
        }
        verdict(
            "lyapunov residual",
            worst <= 1e-10,
            format!("worst {worst:.2e} over 100 random instances (tol 1e-10)"),
        );
    }

    // Certificate symmetry and gradient vs central differences.
    {
        let mut worst_sym: f64 = 0.0;
        let mut worst_fd: f64 = 0.0;
        for _ in 0..20 {
            let states = rng.random_range(2..=8);
            let inputs = rng.random_range(1..=states);
            let (sys, policy) = azopg::bench::random_test_case::<f64, _>(states, inputs, &mut rng);
            let cert = value_certificate(&sys, &policy).unwrap();
            worst_sym = worst_sym
                .max((&cert.p - cert.p.transpose()).norm())
                .max((&cert.x - cert.x.transpose()).norm());
            let h = 1e-6;
            let mut fd = DMatrix::<f64>::zeros(inputs, states);
            for i in 0..inputs {
                for j in 0..states {
                    let mut plus = policy.gain().clone();
                    plus[(i, j)] += h;
                    let mut minus = policy.gain().clone();
                    minus[(i, j)] -= h;
                    let fp = value_certificate(&sys, &Policy::new(plus)).unwrap().cost;
                    let fm = value_certificate(&sys, &Policy::new(minus)).unwrap().cost;
                    fd[(i, j)] = (fp - fm) / (2.0 * h);
                }
            }
            worst_fd = worst_fd.max((&cert.grad - &fd).norm() / cert.grad.norm());
        }
        verdict(
            "certificate symmetry",
            worst_sym <= 1e-12,
            format!("worst asymmetry {worst_sym:.2e} (tol 1e-12)"),
        );
        verdict(
            "gradient vs finite differences",
            worst_fd <= 1e-5,
            format!("worst relative error {worst_fd:.2e} over 20 systems (tol 1e-5)"),
        );
    }

    // Stationarity at the optimum and sampled minimality.
    {
        let sys = mass_spring_damper::<f64>(4).unwrap();
        let (k_star, f_star) = optimal_policy(&sys, &Policy::zeros(4, 8)).unwrap();
        let grad_norm = value_certificate(&sys, &k_star).unwrap().grad.norm();
        let mut min_gap: f64 = f64::INFINITY;
        for _ in 0..100 {
            let gain = DMatrix::from_fn(4, 8, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
            let policy = Policy::new(gain);
            if azopg::is_stabilizing(&sys, &policy).unwrap() {
                min_gap = min_gap.min(value_certificate(&sys, &policy).unwrap().cost - f_star);
            }
        }
        verdict(
            "stationarity at optimum",
            grad_norm <= 1e-8,
            format!("|grad f(K*)| = {grad_norm:.2e} (tol 1e-8)"),
        );
        verdict(
            "sampled minimality",
            min_gap >= -1e-9,
            format!("min f(K) - f* = {min_gap:.2e} over random stabilizing gains"),
        );
    }

    // Sphere geometry of perturbations.
    {
        let mut worst: f64 = 0.0;
        for _ in 0..1_000 {
            let m = rng.random_range(1..=6);
            let n = rng.random_range(1..=6);
            let u = Perturbation::<f64>::sample(m, n, &mut rng);
            worst = worst.max((u.matrix().norm() - ((m * n) as f64).sqrt()).abs());
        }
        verdict(
            "perturbation sphere norm",
            worst <= 1e-12,
            format!("worst |norm - sqrt(mn)| = {worst:.2e} (tol 1e-12)"),
        );
    }

    // Rollout simulator against the exact truncated-cost oracle.
    {
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let states = rng.random_range(1..=8);
            let inputs = rng.random_range(1..=states);
            let (sys, policy) = azopg::bench::random_test_case::<f64, _>(states, inputs, &mut rng);
            let zeta = DVector::from_fn(states, |_, _| rng.sample::<f64, _>(StandardNormal));
            let cfg = RolloutConfig::new(100.0, 1e-3).unwrap();
            let exact = truncated_cost_exact(&sys, &policy, &zeta, 100.0).unwrap();
            let rolled = rollout_cost(&sys, &policy, &zeta, &cfg).unwrap();
            worst = worst.max((rolled - exact).abs() / (1.0 + exact.abs()));
        }
        verdict(
            "rollout fidelity",
            worst <= 1e-6,
            format!("worst relative error {worst:.2e} at dt=1e-3 (tol 1e-6)"),
        );
    }

    // Two-point smoothing bias shrinks with the radius (exact costs).
    {
        let sys = scalar_system::<f64>();
        let zeta = DVector::from_element(1, 1.0);
        let bias = |r: f64| {
            let kp = Policy::new(DMatrix::from_element(1, 1, 2.0 + r));
            let km = Policy::new(DMatrix::from_element(1, 1, 2.0 - r));
            let fp = truncated_cost_exact(&sys, &kp, &zeta, 100.0).unwrap();
            let fm = truncated_cost_exact(&sys, &km, &zeta, 100.0).unwrap();
            ((fp - fm) / (2.0 * r) - 0.375).abs()
        };
        let (b2, b3, b4) = (bias(1e-2), bias(1e-3), bias(1e-4));
        verdict(
            "estimator bias sweep",
            b2 > b3 && b3 > b4,
            format!("bias(1e-2)={b2:.2e} > bias(1e-3)={b3:.2e} > bias(1e-4)={b4:.2e}"),
        );
    }

    // Staleness stays below the worst-case bound on an oversubscribed run.
    {
        let sys = scalar_system::<f64>();
        let cfg = EngineConfig {
            eta: 0.2,
            batch_size: 4,
            radius: 1e-3,
            rollout: RolloutConfig::new(20.0, 1e-2).unwrap(),
            workers: 8,
            dist: InitDistribution::gaussian(1),
            staleness_limit: None,
            per_worker_sleep: Vec::new(),
        };
        let dm = DelayModel::uniform(0.05, 0.15).unwrap();
        let stop = StopCondition::new(1e-2, 10_000).unwrap();
        let k0 = Policy::new(DMatrix::from_element(1, 1, 2.0));
        let trace = run_simulated(&sys, &k0, &cfg, &dm, &stop, seed).unwrap();
        let bound = delay_bound(dm.t_lo, dm.effective_t_hi(), 8, 4).unwrap();
        verdict(
            "delay bound",
            trace.max_delay_seen() <= bound,
            format!(
                "max observed {} <= bound {bound} (M=8, N=4)",
                trace.max_delay_seen()
            ),
        );

        let again = run_simulated(&sys, &k0, &cfg, &dm, &stop, seed).unwrap();
        verdict(
            "seeded reproducibility",
            trace.to_csv_string()? == again.to_csv_string()?,
            "two equal-seed simulated runs serialize identically".into(),
        );
    }

    // Gradient-dominance probe stays positive.
    {
        let sys = scalar_system::<f64>();
        let mu_scalar = gradient_dominance_probe(&sys, 50, 2.0, seed)?;
        let msd = mass_spring_damper::<f64>(2).unwrap();
        let (_, f_star) = optimal_policy(&msd, &Policy::zeros(2, 4)).unwrap();
        let mu_msd = gradient_dominance_probe(&msd, 30, 2.0 * f_star, seed)?;
        verdict(
            "gradient dominance probe",
            mu_scalar > 0.0 && mu_msd > 0.0,
            format!("mu1(scalar) = {mu_scalar:.3e}, mu1(msd:2) = {mu_msd:.3e}"),
        );
    }

    println!("{}", version_string());
    if failures > 0 {
        return Err(Error::NumericalFailure(format!(
            "{failures} diagnostic check(s) failed"
        )));
    }
    println!("all checks passed");
    Ok(())
}
