//! Config-driven experiments: a validated JSON document in, a deterministic
//! artifact bundle out.
//!
//! Each experiment kind reads these config sections and writes these files
//! (always alongside a `summary.json`):
//!
//! | kind | required sections | artifacts |
//! |------|-------------------|-----------|
//! | `solve` | kernel, initial, truncation, times | `trajectory.csv`, `path.csv`, `final_measure.csv`, `conservation.json` |
//! | `simulate` | kernel, initial, times or t_end | `events.csv`, `trajectory.csv`, `path.csv` |
//! | `couple` | kernel, initial, truncation, times or t_end (optional extra_lambda) | `events.csv`, `trajectory.csv`, `path.csv` |
//! | `family` | kernel, initial, truncation_list, times or t_end | `events_<i>.csv`, `trajectory_<i>.csv` per retained set |
//! | `nonuniq` | chain, times | `limits_plus.csv`, `limits_minus.csv`, `separation.csv`, `parity_plus.json`, `parity_minus.json` |
//! | `converge` | kernel, initial, truncation, times, n_list, replicas ≥ 2 | `convergence.csv`, `convergence.gp` |
//! | `concentrate` | converge's sections plus delta | `concentration.csv`, `concentration.gp` |
//!
//! `replicas` is read by the two population studies; the other kinds run a
//! single path. `phi` (envelope override), `seed`, `out_dir`, and `tolerances`
//! apply everywhere.
//!
//! Guarantees:
//!
//! * Configs are checked against the shipped schema, parsed strictly
//!   (unknown fields rejected with their names), then validated per kind;
//!   every failure is a [`HarnessError::Config`] with a field- or line-level
//!   diagnostic.
//! * Given the same config text and seed, a run writes byte-identical
//!   artifacts — including `summary.json`, which records the SHA-256 of the
//!   config document and the effective seed. Worker-thread counts never
//!   influence results.
//! * Summaries are validated against their own shipped schema before being
//!   written.
//!
//! Failures map onto the CLI exit codes via [`HarnessError::exit_code`]:
//! config errors exit 2, invariant violations 3, numerical failures and I/O
//! problems 4.

pub mod config;
pub mod schema;
pub mod studies;

pub use config::{
    AtomSpec, ChainParams, ExperimentConfig, ExperimentKind, InitialSpec, PhiSpec, Tolerances,
};
pub use studies::{
    concentration_study, convergence_study, ConcentrationRow, ConcentrationStudy, ConvergenceRow,
    ConvergenceStudy,
};

use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coalescent::{
    keyed_u64, simulate_coalescent, simulate_coupled, simulate_coupled_family, EventKind,
    SimError, SimOptions, SimResult, TAG_REPLICA,
};
use crate::deterministic::{conservation_report, solve_truncated, SolveError, SolveOptions};
use crate::nonuniqueness::{extract_limits_scaled, verify_parity_bounds, ChainError};

/// Harness failure, classified by which exit code it maps to.
#[derive(Debug, Error)]
pub enum HarnessError {
    /// The config document is malformed, incomplete, or incoherent (exit 2).
    #[error("config error: {0}")]
    Config(String),
    /// An internal consistency guarantee was broken mid-run (exit 3).
    #[error("invariant violation: {0}")]
    Invariant(String),
    /// The computation could not reach the requested accuracy or budget
    /// (exit 4).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Artifact I/O failed (exit 4).
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// CLI exit code: 0 is success, 2 config, 3 invariant, 4 numerical/I-O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Invariant(_) => 3,
            HarnessError::Numerical(_) | HarnessError::Io(_) => 4,
        }
    }
}

impl From<SolveError> for HarnessError {
    fn from(e: SolveError) -> Self {
        match &e {
            SolveError::InvalidInput(_) | SolveError::Measure(_) | SolveError::Kernel(_) => {
                HarnessError::Config(e.to_string())
            }
            _ => HarnessError::Numerical(e.to_string()),
        }
    }
}

impl From<SimError> for HarnessError {
    fn from(e: SimError) -> Self {
        match &e {
            SimError::InvalidInput(_)
            | SimError::Measure(_)
            | SimError::EnvelopeNotPositive { .. }
            | SimError::UnnestedFamily(_)
            | SimError::FamilyMarginUnsupported { .. } => HarnessError::Config(e.to_string()),
            SimError::DominationViolation { .. }
            | SimError::OrderingViolation(_)
            | SimError::Internal(_) => HarnessError::Invariant(e.to_string()),
            SimError::BudgetExhausted(_) => HarnessError::Numerical(e.to_string()),
        }
    }
}

impl From<ChainError> for HarnessError {
    fn from(e: ChainError) -> Self {
        match &e {
            ChainError::InvalidInput(_)
            | ChainError::RateOverflow(_)
            | ChainError::DivergentMass { .. } => HarnessError::Config(e.to_string()),
            ChainError::NonMonotone(_) => HarnessError::Invariant(e.to_string()),
        }
    }
}

/// CLI-level adjustments applied on top of the config document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces the config's `seed` (the CLI resolves flag vs. environment
    /// precedence before calling [`run`]).
    pub seed: Option<u64>,
    /// Replaces the config's `out_dir`.
    pub out_dir: Option<PathBuf>,
    /// The subcommand's kind; a config declaring a different kind is
    /// rejected.
    pub expected_kind: Option<ExperimentKind>,
}

/// A completed run: where it wrote, what it wrote, and the summary document.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub summary: Value,
    /// Every file written, `summary.json` last.
    pub files: Vec<PathBuf>,
}

/// Parse, schema-check, and semantically validate a config document.
pub fn load_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let raw: Value = serde_json::from_str(text).map_err(|e| {
        HarnessError::Config(format!(
            "config is not valid JSON (line {}, column {}): {e}",
            e.line(),
            e.column()
        ))
    })?;
    schema::validate_config_value(&raw)?;
    // Parse the typed config from the original text so serde's diagnostics
    // carry line/column positions.
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
        HarnessError::Config(format!(
            "config rejected (line {}, column {}): {e}",
            e.line(),
            e.column()
        ))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// In-memory artifact bundle produced by one experiment.
struct Artifacts {
    /// `(file name, contents)` in emission order.
    files: Vec<(String, String)>,
    /// Headline numbers for the summary.
    metrics: Map<String, Value>,
}

impl Artifacts {
    fn new() -> Self {
        Self { files: Vec::new(), metrics: Map::new() }
    }

    fn file(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    fn metric(&mut self, key: &str, value: Value) {
        self.metrics.insert(key.to_string(), value);
    }
}

/// Execute a validated config and write its artifact bundle.
///
/// The effective seed is `overrides.seed` when present, else the config's.
/// The output directory is `overrides.out_dir`, else the config's `out_dir`,
/// else the current directory. Rerunning with identical config text and seed
/// reproduces every artifact byte for byte.
pub fn run(config_text: &str, overrides: &Overrides) -> Result<RunOutcome, HarnessError> {
    let cfg = load_config(config_text)?;
    if let Some(expected) = overrides.expected_kind {
        if expected != cfg.kind {
            return Err(HarnessError::Config(format!(
                "this subcommand runs \"{}\" configs, but the document declares kind \"{}\"",
                expected.as_str(),
                cfg.kind.as_str()
            )));
        }
    }
    let seed = overrides.seed.unwrap_or(cfg.seed);
    let digest = hex_digest(config_text.as_bytes());

    let artifacts = match cfg.kind {
        ExperimentKind::Solve => run_solve(&cfg)?,
        ExperimentKind::Simulate => run_stochastic(&cfg, seed, false)?,
        ExperimentKind::Couple => run_stochastic(&cfg, seed, true)?,
        ExperimentKind::Family => run_family(&cfg, seed)?,
        ExperimentKind::Nonuniq => run_nonuniq(&cfg)?,
        ExperimentKind::Converge => run_converge(&cfg, seed)?,
        ExperimentKind::Concentrate => run_concentrate(&cfg, seed)?,
    };

    let out_dir = overrides
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;

    let mut outputs = Vec::new();
    let mut files = Vec::new();
    for (name, contents) in &artifacts.files {
        let path = out_dir.join(name);
        fs::write(&path, contents)?;
        outputs.push(json!({ "file": name, "bytes": contents.len() as u64 }));
        files.push(path);
    }

    let summary = json!({
        "version": 1,
        "kind": cfg.kind.as_str(),
        "config_sha256": digest,
        "seed": seed,
        "toolkit": {
            "name": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
        },
        "outputs": outputs,
        "metrics": Value::Object(artifacts.metrics),
    });
    schema::validate_summary_value(&summary)?;
    let summary_path = out_dir.join("summary.json");
    fs::write(&summary_path, format!("{summary:#}\n"))?;
    files.push(summary_path);

    Ok(RunOutcome { out_dir, summary, files })
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn require<'a, T>(field: &'a Option<T>, name: &str) -> Result<&'a T, HarnessError> {
    field
        .as_ref()
        .ok_or_else(|| HarnessError::Config(format!("missing {name}")))
}

fn run_solve(cfg: &ExperimentConfig) -> Result<Artifacts, HarnessError> {
    let kernel = cfg.build_kernel()?;
    let tol = &cfg.tolerances;
    let mu0 = require(&cfg.initial, "initial")?.measure(tol.eps_mass)?;
    let trunc = require(&cfg.truncation, "truncation")?;
    let opts = SolveOptions { atol: tol.atol, rtol: tol.rtol, ..SolveOptions::default() };
    let traj = solve_truncated(&mu0, &kernel, kernel.phi(), trunc, &cfg.times, &opts)?;
    let report = conservation_report(&traj, tol.lambda_onset);
    let last = traj
        .samples()
        .last()
        .ok_or_else(|| HarnessError::Invariant("solve produced an empty trajectory".into()))?;

    let mut art = Artifacts::new();
    art.file("trajectory.csv", traj.diagnostics_csv());
    art.file("path.csv", traj.path_csv());
    art.file("final_measure.csv", last.measure.to_csv());
    art.file(
        "conservation.json",
        serde_json::to_string_pretty(&report)
            .map_err(|e| HarnessError::Invariant(format!("conservation report: {e}")))?
            + "\n",
    );
    art.metric("final_mass", json!(last.mass));
    art.metric("final_lambda", json!(last.lambda));
    art.metric("final_envelope_plus_lambda", json!(last.phi_mass_plus_lambda()));
    art.metric("lambda_onset", json!(report.lambda_onset));
    art.metric("envelope_monotone", json!(report.envelope_monotone));
    art.metric("accepted_steps", json!(traj.meta.steps));
    Ok(art)
}

/// Shared body for `simulate` (plain chain) and `couple` (leak tracking).
fn run_stochastic(
    cfg: &ExperimentConfig,
    seed: u64,
    coupled: bool,
) -> Result<Artifacts, HarnessError> {
    let kernel = cfg.build_kernel()?;
    let tol = &cfg.tolerances;
    let mut draw_rng = ChaCha8Rng::seed_from_u64(keyed_u64(seed, [TAG_REPLICA, 0, 0, 1]));
    let particles = require(&cfg.initial, "initial")?.particles(None, &mut draw_rng)?;
    let opts = SimOptions { eps_mass: tol.eps_mass, ..SimOptions::default() };
    let t_end = cfg.horizon()?;
    let result: SimResult = if coupled {
        let trunc = require(&cfg.truncation, "truncation")?;
        simulate_coupled(
            &particles,
            &kernel,
            trunc,
            cfg.extra_lambda,
            t_end,
            &cfg.times,
            seed,
            &opts,
        )?
    } else {
        simulate_coalescent(&particles, &kernel, t_end, &cfg.times, seed, &opts)?
    };

    let mut art = Artifacts::new();
    art.file("events.csv", result.events.to_csv());
    art.file("trajectory.csv", result.trajectory.diagnostics_csv());
    art.file("path.csv", result.trajectory.path_csv());
    art.metric("events", json!(result.events.len() as u64));
    art.metric("merges", json!(result.events.count(EventKind::Merge) as u64));
    art.metric(
        "merge_leaks",
        json!(result.events.count(EventKind::MergeLeak) as u64),
    );
    art.metric(
        "single_leaks",
        json!(result.events.count(EventKind::SingleLeak) as u64),
    );
    art.metric("final_particles", json!(result.system.particle_count() as u64));
    art.metric("final_mass", json!(result.system.total_mass()));
    art.metric("final_lambda", json!(result.system.lambda()));
    art.metric(
        "final_envelope_plus_lambda",
        json!(result.system.envelope_plus_lambda()),
    );
    Ok(art)
}

fn run_family(cfg: &ExperimentConfig, seed: u64) -> Result<Artifacts, HarnessError> {
    let kernel = cfg.build_kernel()?;
    let tol = &cfg.tolerances;
    let mut draw_rng = ChaCha8Rng::seed_from_u64(keyed_u64(seed, [TAG_REPLICA, 0, 0, 1]));
    let particles = require(&cfg.initial, "initial")?.particles(None, &mut draw_rng)?;
    let truncs = require(&cfg.truncation_list, "truncation_list")?;
    let opts = SimOptions { eps_mass: tol.eps_mass, ..SimOptions::default() };
    let t_end = cfg.horizon()?;
    let fam = simulate_coupled_family(&particles, &kernel, truncs, t_end, &cfg.times, seed, &opts)?;

    let mut art = Artifacts::new();
    for (b, (traj, log)) in fam.trajectories.iter().zip(&fam.event_logs).enumerate() {
        art.file(&format!("events_{b}.csv"), log.to_csv());
        art.file(&format!("trajectory_{b}.csv"), traj.diagnostics_csv());
    }
    art.metric("retained_sets", json!(fam.trajectories.len() as u64));
    art.metric("rounds", json!(fam.rounds));
    art.metric("transition_rounds", json!(fam.transition_rounds));
    art.metric("ordering_checks", json!(fam.ordering_checks));
    art.metric("final_lambdas", json!(fam.final_lambdas));
    Ok(art)
}

fn run_nonuniq(cfg: &ExperimentConfig) -> Result<Artifacts, HarnessError> {
    let chain = require(&cfg.chain, "chain")?;
    let limits = extract_limits_scaled(chain.n_max, &cfg.times, chain.rate_scale)?;
    let parity_plus = verify_parity_bounds(&limits.plus);
    let parity_minus = verify_parity_bounds(&limits.minus);

    let mut separation = String::from("t,n,separation\n");
    for n in 1..=limits.plus.n_max {
        let sep = limits.separation(n);
        for (k, &t) in limits.plus.times.iter().enumerate() {
            separation.push_str(&format!("{},{},{}\n", t, n, sep[k]));
        }
    }
    // The two limits agree at t = 0 and split as the dying components decay,
    // so the last grid time carries the headline separation.
    let sep_m2 = limits.separation(2);
    let sep_m2_last = sep_m2.last().copied().unwrap_or(0.0);

    let mut art = Artifacts::new();
    art.file("limits_plus.csv", limits.plus.to_long_csv());
    art.file("limits_minus.csv", limits.minus.to_long_csv());
    art.file("separation.csv", separation);
    art.file(
        "parity_plus.json",
        serde_json::to_string_pretty(&parity_plus)
            .map_err(|e| HarnessError::Invariant(format!("parity report: {e}")))?
            + "\n",
    );
    art.file(
        "parity_minus.json",
        serde_json::to_string_pretty(&parity_minus)
            .map_err(|e| HarnessError::Invariant(format!("parity report: {e}")))?
            + "\n",
    );
    art.metric("max_monotone_violation", json!(limits.max_monotone_violation));
    art.metric(
        "gap_plus_max",
        json!(limits.gap_plus.iter().copied().fold(0.0f64, f64::max)),
    );
    art.metric(
        "gap_minus_max",
        json!(limits.gap_minus.iter().copied().fold(0.0f64, f64::max)),
    );
    art.metric("parity_plus_ok", json!(parity_plus.all_ok));
    art.metric("parity_minus_ok", json!(parity_minus.all_ok));
    art.metric("separation_m2_last", json!(sep_m2_last));
    Ok(art)
}

fn run_converge(cfg: &ExperimentConfig, seed: u64) -> Result<Artifacts, HarnessError> {
    let study = convergence_study(cfg, seed)?;
    let mut art = Artifacts::new();
    art.file("convergence.csv", study.to_csv());
    art.file("convergence.gp", study.plot_script());
    art.metric("slope", json!(study.slope));
    art.metric("reference_lambda", json!(study.reference_lambda));
    if let (Some(first), Some(last)) = (study.rows.first(), study.rows.last()) {
        art.metric("mean_first", json!(first.mean_sup_d0));
        art.metric("mean_last", json!(last.mean_sup_d0));
    }
    Ok(art)
}

fn run_concentrate(cfg: &ExperimentConfig, seed: u64) -> Result<Artifacts, HarnessError> {
    let study = concentration_study(cfg, seed)?;
    let mut art = Artifacts::new();
    art.file("concentration.csv", study.to_csv());
    art.file("concentration.gp", study.plot_script());
    art.metric("delta", json!(study.delta));
    art.metric("mc_floor", json!(study.mc_floor));
    art.metric("diameter_bound", json!(study.diameter_bound));
    art.metric("log_slope", json!(study.log_slope));
    art.metric(
        "zero_at_largest",
        json!(study.rows.last().is_some_and(|r| r.exceedances == 0)),
    );
    if let Some(w) = &study.warning {
        art.metric("warning", json!(w));
    }
    Ok(art)
}
