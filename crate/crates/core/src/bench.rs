//! Benchmark systems, the experiment harness, and speedup reporting.
//!
//! Experiments write one trace CSV per worker count plus a `meta.json` with
//! the configuration echo and the oracle reference (`K*`, `f*`). The speedup
//! report consumes those traces: `speedup(M) = T_1 / T_M` where `T_M` is the
//! first time the relative error reaches the target.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{
    run_simulated, run_threaded, DelayLaw, DelayModel, EngineConfig, StopCondition,
};
use crate::lqr::{is_stabilizing, optimal_policy, value_certificate, LinearSystem, Policy};
use crate::rollout::{InitDistribution, InitKind, RolloutConfig};
use crate::trace::{Trace, TraceRow};
use crate::{real, to_f64, Error, Result, Scalar};

/// Serial chain of point masses with springs and dampers between neighbors
/// and to the walls, one force input per mass.
///
/// State is positions stacked over velocities (`n = 2k`), so
/// `A = [[0, I], [-T, -T]]` and `B = [[0], [I]]` with `T` the symmetric
/// tridiagonal Toeplitz matrix with 2 on the diagonal and -1 off it.
/// Weights and the initial-state second moment are identities. The open loop
/// is damped, so the zero gain is stabilizing.
pub fn mass_spring_damper<T: Scalar>(masses: usize) -> Result<LinearSystem<T>> {
    if masses < 1 {
        return Err(Error::InvalidArgument(
            "mass-spring-damper chain needs at least one mass".into(),
        ));
    }
    let k = masses;
    let n = 2 * k;
    let mut a = DMatrix::<T>::zeros(n, n);
    for i in 0..k {
        a[(i, k + i)] = T::one();
        a[(k + i, i)] = -real::<T>(2.0);
        a[(k + i, k + i)] = -real::<T>(2.0);
        if i + 1 < k {
            a[(k + i, i + 1)] = T::one();
            a[(k + i, k + i + 1)] = T::one();
            a[(k + i + 1, i)] = T::one();
            a[(k + i + 1, k + i)] = T::one();
        }
    }
    let mut b = DMatrix::<T>::zeros(n, k);
    for i in 0..k {
        b[(k + i, i)] = T::one();
    }
    LinearSystem::new(
        a,
        b,
        DMatrix::identity(n, n),
        DMatrix::identity(k, k),
        DMatrix::identity(n, n),
    )
}

/// The one-dimensional benchmark plant `A = 0, B = 1` with unit weights.
/// Its cost has the closed form `f(K) = (K^2 + 1) / (2K)` with optimum
/// `K* = 1`, `f* = 1`; the customary seed gain is `K = 2`.
pub fn scalar_system<T: Scalar>() -> LinearSystem<T> {
    LinearSystem::new(
        DMatrix::from_element(1, 1, T::zero()),
        DMatrix::from_element(1, 1, T::one()),
        DMatrix::from_element(1, 1, T::one()),
        DMatrix::from_element(1, 1, T::one()),
        DMatrix::from_element(1, 1, T::one()),
    )
    .expect("scalar benchmark system is well posed")
}

/// Which plant an experiment runs on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemSpec {
    MassSpringDamper { masses: usize },
    Scalar,
    File { path: PathBuf },
}

impl Default for SystemSpec {
    fn default() -> Self {
        SystemSpec::MassSpringDamper { masses: 4 }
    }
}

impl std::str::FromStr for SystemSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "scalar" {
            return Ok(SystemSpec::Scalar);
        }
        if let Some(rest) = s
            .strip_prefix("msd:")
            .or_else(|| s.strip_prefix("mass-spring-damper:"))
        {
            let masses = rest.parse().map_err(|_| {
                Error::InvalidArgument(format!("bad mass count in system spec {s:?}"))
            })?;
            return Ok(SystemSpec::MassSpringDamper { masses });
        }
        if let Some(path) = s.strip_prefix("file:") {
            return Ok(SystemSpec::File { path: path.into() });
        }
        Err(Error::InvalidArgument(format!(
            "unknown system spec {s:?} (expected msd:<k>, scalar, or file:<path>)"
        )))
    }
}

impl fmt::Display for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SystemSpec::MassSpringDamper { masses } => write!(f, "msd:{masses}"),
            SystemSpec::Scalar => write!(f, "scalar"),
            SystemSpec::File { path } => write!(f, "file:{}", path.display()),
        }
    }
}

/// Execution mode of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulated,
    Threaded,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulated" => Ok(Mode::Simulated),
            "threaded" => Ok(Mode::Threaded),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (expected simulated or threaded)"
            ))),
        }
    }
}

/// Full experiment description. Field names double as CLI flag names, and a
/// JSON file with any subset of them can seed a run (flags override the
/// file).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    /// Worker counts to sweep; `solve` uses the first entry.
    pub workers: Vec<usize>,
    /// Step size.
    pub eta: f64,
    /// Smoothing radius of the two-point estimator.
    pub r: f64,
    /// Rollout horizon.
    pub tau: f64,
    /// Integrator step.
    pub dt: f64,
    /// Batch size: estimates averaged per policy update.
    pub n: usize,
    pub seed: u64,
    pub target_rel_error: f64,
    pub mode: Mode,
    /// Fraction of workers slowed by `slow_extra` seconds per cycle.
    pub slow_fraction: f64,
    /// Injected per-cycle slowdown in seconds.
    pub slow_extra: f64,
    pub dist: InitKind,
    /// Simulated worker cycle duration interval.
    pub t_lo: f64,
    pub t_hi: f64,
    pub max_iters: u64,
    pub out_dir: PathBuf,
    /// Initial gain rows; defaults to zero (or `[[2.0]]` for the scalar
    /// plant, whose zero gain is not stabilizing).
    pub k0: Option<Vec<Vec<f64>>>,
    /// Optional staleness filter (drops estimates older than this many
    /// updates). Off by default; filtering changes the algorithm.
    pub staleness_limit: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemSpec::default(),
            workers: vec![1],
            eta: 2e-3,
            r: 1e-5,
            tau: 100.0,
            dt: 1e-2,
            n: 32,
            seed: 42,
            target_rel_error: 1e-3,
            mode: Mode::Simulated,
            slow_fraction: 0.0,
            slow_extra: 0.0,
            dist: InitKind::Gaussian,
            t_lo: 0.05,
            t_hi: 0.15,
            max_iters: 200_000,
            out_dir: PathBuf::from("runs"),
            k0: None,
            staleness_limit: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers.is_empty() {
            return Err(Error::InvalidArgument("workers list is empty".into()));
        }
        if self.workers.contains(&0) {
            return Err(Error::InvalidArgument(
                "worker counts must be positive".into(),
            ));
        }
        for (name, value) in [
            ("eta", self.eta),
            ("r", self.r),
            ("tau", self.tau),
            ("dt", self.dt),
            ("target_rel_error", self.target_rel_error),
            ("t_lo", self.t_lo),
        ] {
            if value <= 0.0 || !value.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if self.n == 0 || self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "n and max_iters must be positive".into(),
            ));
        }
        if self.t_hi < self.t_lo || !self.t_hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "need t_lo <= t_hi < inf, got [{}, {}]",
                self.t_lo, self.t_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.slow_fraction) {
            return Err(Error::InvalidArgument(format!(
                "slow_fraction must lie in [0, 1], got {}",
                self.slow_fraction
            )));
        }
        if self.slow_extra < 0.0 || !self.slow_extra.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "slow_extra must be nonnegative, got {}",
                self.slow_extra
            )));
        }
        Ok(())
    }

    /// Engine configuration for a specific worker count. In threaded mode
    /// slowdowns become real per-cycle sleeps; the simulated delay model
    /// carries them otherwise.
    pub fn engine_config(&self, state_dim: usize, workers: usize) -> Result<EngineConfig<f64>> {
        Ok(EngineConfig {
            eta: self.eta,
            batch_size: self.n,
            radius: self.r,
            rollout: RolloutConfig::new(self.tau, self.dt)?,
            workers,
            dist: InitDistribution::from_kind(self.dist, state_dim),
            staleness_limit: self.staleness_limit,
            per_worker_sleep: match self.mode {
                Mode::Threaded => self.slow_extras(workers),
                Mode::Simulated => Vec::new(),
            },
        })
    }

    /// Delay model for a specific worker count: uniform cycle durations with
    /// the first `round(slow_fraction * M)` workers slowed by `slow_extra`.
    pub fn delay_model(&self, workers: usize) -> Result<DelayModel> {
        DelayModel::new(
            self.t_lo,
            self.t_hi,
            self.slow_extras(workers),
            DelayLaw::Uniform,
        )
    }

    fn slow_extras(&self, workers: usize) -> Vec<f64> {
        let slow_count = ((self.slow_fraction * workers as f64).round() as usize).min(workers);
        if self.slow_extra > 0.0 {
            vec![self.slow_extra; slow_count]
        } else {
            Vec::new()
        }
    }

    pub fn stop_condition(&self) -> Result<StopCondition> {
        StopCondition::new(self.target_rel_error, self.max_iters)
    }

    /// The seed gain: configured rows if present, otherwise zero, with the
    /// scalar plant defaulting to its customary stabilizing seed `K = 2`.
    pub fn initial_policy(&self, sys: &LinearSystem<f64>) -> Result<Policy<f64>> {
        if let Some(rows) = &self.k0 {
            let gain = rows_to_matrix(rows)?;
            return Ok(Policy::new(gain));
        }
        if matches!(self.system, SystemSpec::Scalar) {
            return Ok(Policy::new(DMatrix::from_element(1, 1, 2.0)));
        }
        Ok(Policy::zeros(sys.input_dim(), sys.state_dim()))
    }
}

/// Instantiate the plant described by a [`SystemSpec`].
pub fn build_system(spec: &SystemSpec) -> Result<LinearSystem<f64>> {
    match spec {
        SystemSpec::MassSpringDamper { masses } => mass_spring_damper(*masses),
        SystemSpec::Scalar => Ok(scalar_system()),
        SystemSpec::File { path } => load_system_json(path),
    }
}

#[derive(Serialize, Deserialize)]
struct SystemJson {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    x0: Vec<Vec<f64>>,
}

/// Read a plant from JSON with row-major `a`, `b`, `q`, `r`, `x0` arrays.
pub fn load_system_json<P: AsRef<Path>>(path: P) -> Result<LinearSystem<f64>> {
    let text = std::fs::read_to_string(path)?;
    let raw: SystemJson = serde_json::from_str(&text)?;
    LinearSystem::new(
        rows_to_matrix(&raw.a)?,
        rows_to_matrix(&raw.b)?,
        rows_to_matrix(&raw.q)?,
        rows_to_matrix(&raw.r)?,
        rows_to_matrix(&raw.x0)?,
    )
}

/// Write a plant as JSON readable by [`load_system_json`].
pub fn save_system_json<P: AsRef<Path>>(sys: &LinearSystem<f64>, path: P) -> Result<()> {
    let raw = SystemJson {
        a: matrix_to_rows(sys.a()),
        b: matrix_to_rows(sys.b()),
        q: matrix_to_rows(sys.q()),
        r: matrix_to_rows(sys.r()),
        x0: matrix_to_rows(sys.x0()),
    };
    std::fs::write(path, serde_json::to_string_pretty(&raw)?)?;
    Ok(())
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::InvalidArgument(
            "matrix rows must be nonempty".into(),
        ));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidArgument("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Metadata written next to the trace CSVs of an experiment.
#[derive(Serialize, Deserialize)]
pub struct RunMetadata {
    pub version: String,
    pub config: ExperimentConfig,
    pub k_star: Vec<Vec<f64>>,
    pub f_star: f64,
}

pub fn version_string() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Run the configured sweep, writing `trace_M<w>.csv` per worker count plus
/// `meta.json`, and return the traces for reporting.
///
/// On a run failure the partial trace is still flushed to disk before the
/// error propagates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<(usize, Trace)>> {
    cfg.validate()?;
    let sys = build_system(&cfg.system)?;
    let initial = cfg.initial_policy(&sys)?;
    if !is_stabilizing(&sys, &initial)? {
        return Err(Error::NotStabilizing(
            "configured initial gain does not stabilize the plant".into(),
        ));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;

    let (k_star, f_star) = optimal_policy(&sys, &initial)?;
    let metadata = RunMetadata {
        version: version_string(),
        config: cfg.clone(),
        k_star: matrix_to_rows(k_star.gain()),
        f_star,
    };
    std::fs::write(
        cfg.out_dir.join("meta.json"),
        serde_json::to_string_pretty(&metadata)?,
    )?;

    let stop = cfg.stop_condition()?;
    let mut traces = Vec::with_capacity(cfg.workers.len());
    for &workers in &cfg.workers {
        let engine_cfg = cfg.engine_config(sys.state_dim(), workers)?;
        let path = trace_path(&cfg.out_dir, workers);
        let outcome = match cfg.mode {
            Mode::Simulated => {
                let dm = cfg.delay_model(workers)?;
                run_simulated(&sys, &initial, &engine_cfg, &dm, &stop, cfg.seed)
            }
            Mode::Threaded => run_threaded(&sys, &initial, &engine_cfg, &stop, cfg.seed),
        };
        match outcome {
            Ok(trace) => {
                trace.write_csv_path(&path)?;
                traces.push((workers, trace));
            }
            Err(err) => {
                if let Some(partial) = err.partial_trace() {
                    partial.write_csv_path(&path)?;
                }
                return Err(err);
            }
        }
    }
    Ok(traces)
}

/// Canonical trace file name for a worker count.
pub fn trace_path(dir: &Path, workers: usize) -> PathBuf {
    dir.join(format!("trace_M{workers}.csv"))
}

/// One line of a speedup report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub workers: usize,
    pub time_to_target_s: f64,
    pub speedup: f64,
    pub rollouts_per_worker: u64,
}

/// Speedup table relative to the single-worker baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupReport {
    pub rows: Vec<SpeedupRow>,
}

impl SpeedupReport {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for row in &self.rows {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(file)
    }
}

impl fmt::Display for SpeedupReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>8} {:>18} {:>10} {:>20}",
            "workers", "time_to_target_s", "speedup", "rollouts_per_worker"
        )?;
        for row in &self.rows {
            writeln!(
                f,
                "{:>8} {:>18.4} {:>10.3} {:>20}",
                row.workers, row.time_to_target_s, row.speedup, row.rollouts_per_worker
            )?;
        }
        Ok(())
    }
}

/// Build the speedup table from per-worker-count traces.
///
/// Requires a single-worker baseline and that every trace reaches the
/// target; `speedup(1)` is exactly 1.
pub fn speedup_report(traces: &[(usize, Trace)], target: f64) -> Result<SpeedupReport> {
    let baseline = traces
        .iter()
        .find(|(workers, _)| *workers == 1)
        .ok_or_else(|| Error::Report("missing single-worker baseline trace".into()))?;
    let t1 = time_to_target(&baseline.1, 1, target)?.0;

    let mut rows = Vec::with_capacity(traces.len());
    for (workers, trace) in traces {
        let (time, rollouts) = time_to_target(trace, *workers, target)?;
        rows.push(SpeedupRow {
            workers: *workers,
            time_to_target_s: time,
            speedup: t1 / time,
            rollouts_per_worker: rollouts / *workers as u64,
        });
    }
    rows.sort_by_key(|row| row.workers);
    Ok(SpeedupReport { rows })
}

fn time_to_target(trace: &Trace, workers: usize, target: f64) -> Result<(f64, u64)> {
    let row = trace.first_at_target(target).ok_or_else(|| {
        Error::Report(format!(
            "trace for M={workers} never reaches target {target}"
        ))
    })?;
    Ok((row.time_s, row.rollouts_total))
}

/// Model-based gradient-descent baseline `K ← K - eta * grad f(K)` with the
/// same trace schema as the learner (zero rollouts, wall-clock time).
pub fn run_oracle_descent(
    sys: &LinearSystem<f64>,
    initial_policy: &Policy<f64>,
    eta: f64,
    stop: &StopCondition,
) -> Result<Trace> {
    if eta <= 0.0 || !eta.is_finite() {
        return Err(Error::InvalidArgument("eta must be positive".into()));
    }
    let (_, f_star) = optimal_policy(sys, initial_policy)?;
    let cert0 = value_certificate(sys, initial_policy)?;
    let gap = cert0.cost - f_star;
    if gap <= 0.0 {
        return Err(Error::InvalidArgument(
            "initial gain is already optimal".into(),
        ));
    }

    let start = Instant::now();
    let mut trace = Trace::new(0);
    trace.rows.push(TraceRow {
        iteration: 0,
        time_s: 0.0,
        rollouts_total: 0,
        rel_error: 1.0,
        grad_norm: cert0.grad.norm(),
        max_delay: 0,
    });
    let mut policy = initial_policy.clone();
    let mut grad = cert0.grad;
    for iteration in 1..=stop.max_iters {
        policy = Policy::new(policy.gain() - grad.scale(eta));
        if !is_stabilizing(sys, &policy)? {
            trace.failure = Some(crate::trace::FailureEvent {
                iteration,
                time_s: start.elapsed().as_secs_f64(),
            });
            return Err(Error::Destabilized {
                iteration,
                trace: Box::new(trace),
            });
        }
        let cert = value_certificate(sys, &policy)?;
        let rel = (cert.cost - f_star) / gap;
        trace.rows.push(TraceRow {
            iteration,
            time_s: start.elapsed().as_secs_f64(),
            rollouts_total: 0,
            rel_error: rel,
            grad_norm: cert.grad.norm(),
            max_delay: 0,
        });
        grad = cert.grad;
        if rel <= stop.target_rel_error {
            return Ok(trace);
        }
    }
    Err(Error::TargetNotReached {
        max_iters: stop.max_iters,
        trace: Box::new(trace),
    })
}

/// Empirical lower-bound probe of the gradient-dominance ratio
/// `|grad f(K)|^2 / (2 (f(K) - f*))` over the sublevel set `f <= a`:
/// samples stabilizing gains around `K*` by rejection and returns the
/// smallest observed ratio. Diagnostic only.
pub fn gradient_dominance_probe<T: Scalar>(
    sys: &LinearSystem<T>,
    samples: usize,
    level: T,
    seed: u64,
) -> Result<T> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seed_gain = find_stabilizing_gain(sys, &mut rng)?;
    let (k_star, f_star) = optimal_policy(sys, &seed_gain)?;
    if level <= f_star {
        return Err(Error::InvalidArgument(format!(
            "sublevel value {:.6} must exceed the optimum {:.6}",
            to_f64(level),
            to_f64(f_star)
        )));
    }

    let (m, n) = (sys.input_dim(), sys.state_dim());
    let gap_floor = real::<T>(1e-12) * (T::one() + f_star.abs());
    let mut best: Option<T> = None;
    let mut found = 0usize;
    let budget = samples.saturating_mul(1_000);
    for _ in 0..budget {
        if found == samples {
            break;
        }
        // Log-uniform radius explores both the flat core and the rim of the
        // sublevel set.
        let exponent = rng.random_range(-3.0..1.0);
        let radius = real::<T>(10f64.powf(exponent));
        let mut direction = DMatrix::<T>::zeros(m, n);
        for v in direction.iter_mut() {
            *v = real(rng.sample::<f64, _>(StandardNormal));
        }
        let norm = direction.norm();
        if norm == T::zero() {
            continue;
        }
        let candidate = Policy::new(k_star.gain() + direction.scale(radius / norm));
        if !is_stabilizing(sys, &candidate)? {
            continue;
        }
        let cert = value_certificate(sys, &candidate)?;
        let gap = cert.cost - f_star;
        if cert.cost > level || gap <= gap_floor {
            continue;
        }
        let ratio = cert.grad.norm_squared() / (real::<T>(2.0) * gap);
        best = Some(match best {
            Some(current) if current <= ratio => current,
            _ => ratio,
        });
        found += 1;
    }
    if found < samples {
        return Err(Error::SamplingFailure(format!(
            "found only {found}/{samples} gains in the sublevel set after {budget} attempts"
        )));
    }
    Ok(best.expect("at least one accepted sample"))
}

/// Find some stabilizing gain: the zero gain when the plant is open-loop
/// stable, otherwise random search. Good enough at desk scale.
pub fn find_stabilizing_gain<T: Scalar, R: Rng + ?Sized>(
    sys: &LinearSystem<T>,
    rng: &mut R,
) -> Result<Policy<T>> {
    let (m, n) = (sys.input_dim(), sys.state_dim());
    let zero = Policy::zeros(m, n);
    if is_stabilizing(sys, &zero)? {
        return Ok(zero);
    }
    for attempt in 0..4_000 {
        let scale = real::<T>(10f64.powf((attempt % 40) as f64 / 10.0 - 1.0));
        let mut gain = DMatrix::<T>::zeros(m, n);
        for v in gain.iter_mut() {
            *v = real::<T>(rng.sample::<f64, _>(StandardNormal)) * scale;
        }
        let policy = Policy::new(gain);
        if is_stabilizing(sys, &policy)? {
            return Ok(policy);
        }
    }
    Err(Error::SamplingFailure(
        "no stabilizing gain found by random search".into(),
    ))
}

/// Random Hurwitz matrix: a standard-normal draw shifted left past its own
/// spectral abscissa.
pub fn random_hurwitz<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<T> {
    let mut g = DMatrix::<T>::zeros(n, n);
    for v in g.iter_mut() {
        *v = real(rng.sample::<f64, _>(StandardNormal));
    }
    let margin = real::<T>(rng.random_range(0.3..1.0));
    let shift = crate::lqr::spectral_abscissa(&g) + margin;
    for i in 0..n {
        g[(i, i)] -= shift;
    }
    g
}

/// Random open-loop-stable controllable plant with identity weights, paired
/// with a random stabilizing gain. Used by diagnostics and tests.
pub fn random_test_case<T: Scalar, R: Rng + ?Sized>(
    states: usize,
    inputs: usize,
    rng: &mut R,
) -> (LinearSystem<T>, Policy<T>) {
    loop {
        let a = random_hurwitz(states, rng);
        let mut b = DMatrix::<T>::zeros(states, inputs);
        for v in b.iter_mut() {
            *v = real(rng.sample::<f64, _>(StandardNormal));
        }
        let Ok(sys) = LinearSystem::new(
            a,
            b,
            DMatrix::identity(states, states),
            DMatrix::identity(inputs, inputs),
            DMatrix::identity(states, states),
        ) else {
            continue;
        };
        // Small random gains around zero stay stabilizing most of the time.
        for _ in 0..50 {
            let mut gain = DMatrix::<T>::zeros(inputs, states);
            for v in gain.iter_mut() {
                *v = real::<T>(rng.sample::<f64, _>(StandardNormal)) * real::<T>(0.3);
            }
            let policy = Policy::new(gain);
            if is_stabilizing(&sys, &policy).unwrap_or(false) {
                return (sys, policy);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msd_matches_block_structure() {
        let sys = mass_spring_damper::<f64>(4).unwrap();
        assert_eq!(sys.state_dim(), 8);
        assert_eq!(sys.input_dim(), 4);
        let a = sys.a();
        assert_eq!(a[(4, 0)], -2.0);
        assert_eq!(a[(4, 1)], 1.0);
        assert_eq!(a[(0, 4)], 1.0);
        assert_eq!(a[(0, 0)], 0.0);
        // -T block is symmetric tridiagonal, mirrored into the velocity block.
        assert_eq!(a[(5, 0)], 1.0);
        assert_eq!(a[(4, 5)], 1.0);
        assert_eq!(a[(7, 7)], -2.0);
        assert_eq!(sys.b()[(4, 0)], 1.0);
        assert_eq!(sys.b()[(0, 0)], 0.0);
    }

    #[test]
    fn msd_open_loop_is_stable() {
        let sys = mass_spring_damper::<f64>(4).unwrap();
        assert!(is_stabilizing(&sys, &Policy::zeros(4, 8)).unwrap());
    }

    #[test]
    fn msd_single_mass_eigenvalues() {
        let sys = mass_spring_damper::<f64>(1).unwrap();
        let a = sys.a();
        assert_eq!(a[(0, 0)], 0.0);
        assert_eq!(a[(0, 1)], 1.0);
        assert_eq!(a[(1, 0)], -2.0);
        assert_eq!(a[(1, 1)], -2.0);
        let eigs = a.complex_eigenvalues();
        for ev in eigs.iter() {
            assert!((ev.re - (-1.0)).abs() < 1e-12);
            assert!((ev.im.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn msd_rejects_zero_masses() {
        assert!(matches!(
            mass_spring_damper::<f64>(0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn system_spec_parsing() {
        use std::str::FromStr;
        assert_eq!(
            SystemSpec::from_str("msd:4").unwrap(),
            SystemSpec::MassSpringDamper { masses: 4 }
        );
        assert_eq!(SystemSpec::from_str("scalar").unwrap(), SystemSpec::Scalar);
        assert!(matches!(
            SystemSpec::from_str("file:sys.json").unwrap(),
            SystemSpec::File { .. }
        ));
        assert!(SystemSpec::from_str("nope").is_err());
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.eta = 0.0;
        assert!(cfg.validate().is_err());
        cfg = ExperimentConfig {
            workers: vec![],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg = ExperimentConfig {
            slow_fraction: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg = ExperimentConfig {
            t_hi: 0.01,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn delay_model_slows_requested_fraction() {
        let cfg = ExperimentConfig {
            slow_fraction: 0.5,
            slow_extra: 0.1,
            ..Default::default()
        };
        let dm = cfg.delay_model(8).unwrap();
        assert_eq!(dm.per_worker_extra.len(), 4);
        assert!((dm.effective_t_hi() - (cfg.t_hi + 0.1)).abs() < 1e-15);
        let none = cfg.delay_model(1).unwrap();
        // Half of one worker rounds to one slowed worker.
        assert_eq!(none.per_worker_extra.len(), 1);
    }

    #[test]
    fn speedup_of_single_trace_is_exactly_one() {
        let mut trace = Trace::new(1);
        trace.rows.push(TraceRow {
            iteration: 5,
            time_s: 12.5,
            rollouts_total: 320,
            rel_error: 5e-4,
            grad_norm: 0.1,
            max_delay: 0,
        });
        let report = speedup_report(&[(1, trace)], 1e-3).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].speedup, 1.0);
        assert_eq!(report.rows[0].rollouts_per_worker, 320);
    }

    #[test]
    fn speedup_report_errors() {
        let mut reached = Trace::new(2);
        reached.rows.push(TraceRow {
            iteration: 1,
            time_s: 1.0,
            rollouts_total: 64,
            rel_error: 1e-4,
            grad_norm: 0.1,
            max_delay: 0,
        });
        // No single-worker baseline.
        assert!(matches!(
            speedup_report(&[(2, reached.clone())], 1e-3),
            Err(Error::Report(_))
        ));
        // Baseline present but a trace never reaches the target.
        let mut unreached = Trace::new(4);
        unreached.rows.push(TraceRow {
            iteration: 1,
            time_s: 1.0,
            rollouts_total: 64,
            rel_error: 0.5,
            grad_norm: 0.1,
            max_delay: 0,
        });
        let err = speedup_report(&[(1, reached), (4, unreached)], 1e-3).unwrap_err();
        assert!(matches!(err, Error::Report(_)));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn dominance_probe_scalar_system() {
        let sys = scalar_system::<f64>();
        let mu = gradient_dominance_probe(&sys, 50, 2.0, 7).unwrap();
        assert!(mu > 0.0, "probe returned {mu}");
        // Near K* = 1 the ratio tends to f''(1) = 1; the minimum over the
        // sublevel set cannot exceed it.
        assert!(mu <= 1.0 + 1e-6, "probe returned {mu}");
    }

    #[test]
    fn dominance_probe_rejects_low_level() {
        let sys = scalar_system::<f64>();
        assert!(matches!(
            gradient_dominance_probe(&sys, 10, 0.5, 7),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn system_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sys.json");
        let sys = mass_spring_damper::<f64>(2).unwrap();
        save_system_json(&sys, &path).unwrap();
        let back = load_system_json(&path).unwrap();
        assert_eq!(back, sys);
    }

    #[test]
    fn oracle_descent_converges_on_scalar() {
        let sys = scalar_system::<f64>();
        let k0 = Policy::new(DMatrix::from_element(1, 1, 2.0));
        let stop = StopCondition::new(1e-3, 10_000).unwrap();
        let trace = run_oracle_descent(&sys, &k0, 0.2, &stop).unwrap();
        assert!(trace.final_rel_error().unwrap() <= 1e-3);
        assert!(trace.rows.iter().all(|row| row.rollouts_total == 0));
        // Deterministic descent never loses ground on this convex-like path.
        for pair in trace.rows.windows(2) {
            assert!(pair[1].rel_error < pair[0].rel_error);
        }
    }
}
