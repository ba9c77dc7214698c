//! Population-scaling studies.
//!
//! Both studies rescale the stochastic chain onto the deterministic clock:
//! a replica with population `n` runs to raw time `t/n` and its empirical
//! measure is scaled by `1/n` before comparison with the truncated solution
//! started from the normalized initial data.
//!
//! * The **convergence** study measures the weak-metric distance (envelope-
//!   weighted, over a dyadic dictionary of test functions) between path and
//!   solution, reporting per-`n` mean/stderr of the sup over the grid and the
//!   fitted log-log rate.
//! * The **concentration** study counts, per `n`, how many replicas ever
//!   exceed a fixed total-variation threshold `delta`, the empirical tail of
//!   the deviation event.
//!
//! Replicas fan out across worker threads; per-replica randomness is derived
//! from the base seed by counter hashing and the reduction is a sequential
//! fold in replica order, so results are identical for any worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::coalescent::{keyed_u64, simulate_coupled, SimOptions, TAG_REPLICA};
use crate::deterministic::{solve_truncated, SolveOptions, Truncation};
use crate::kernels::Kernel;
use crate::measures::{total_variation, weak_distance_d0, WeakMetricDict};
use crate::trajectory::Trajectory;

use super::config::{ExperimentConfig, InitialSpec};
use super::HarnessError;

/// Dyadic refinement depth for the weak-metric dictionary.
const DICT_LEVELS: u32 = 16;

/// Largest retained mass (the studies require a bounded retained set).
fn truncation_bound(trunc: &Truncation) -> Result<f64, HarnessError> {
    match trunc {
        Truncation::Interval { x_max } => Ok(*x_max),
        Truncation::Set { masses } => Ok(masses.iter().copied().fold(0.0, f64::max)),
        Truncation::All => Err(HarnessError::Config(
            "population studies need a bounded retained set".into(),
        )),
    }
}

/// Everything both studies share: the kernel, the retained set, and the
/// deterministic reference path on the scaled grid.
struct StudySetup {
    kernel: Kernel,
    trunc: Truncation,
    initial: InitialSpec,
    reference: Trajectory,
    reference_lambda: f64,
    sim_opts: SimOptions,
}

fn setup(cfg: &ExperimentConfig, enforce_lambda: bool) -> Result<StudySetup, HarnessError> {
    let kernel = cfg.build_kernel()?;
    let trunc = cfg
        .truncation
        .clone()
        .ok_or_else(|| HarnessError::Config("missing truncation".into()))?;
    let initial = cfg
        .initial
        .clone()
        .ok_or_else(|| HarnessError::Config("missing initial".into()))?;
    let tol = &cfg.tolerances;
    let mu0 = initial.reference_measure(tol.eps_mass)?;
    let solve_opts = SolveOptions { atol: tol.atol, rtol: tol.rtol, ..SolveOptions::default() };
    let reference = solve_truncated(&mu0, &kernel, kernel.phi(), &trunc, &cfg.times, &solve_opts)?;
    let reference_lambda = reference.samples().last().map_or(0.0, |s| s.lambda);
    if enforce_lambda && reference_lambda > tol.lambda_reference {
        return Err(HarnessError::Numerical(format!(
            "reference leak mass {reference_lambda:e} at the horizon exceeds \
             tolerances.lambda_reference = {:e}; enlarge the retained set or \
             shorten the horizon so the truncated solution is a faithful reference",
            tol.lambda_reference
        )));
    }
    let sim_opts = SimOptions { eps_mass: tol.eps_mass, ..SimOptions::default() };
    Ok(StudySetup { kernel, trunc, initial, reference, reference_lambda, sim_opts })
}

/// Run one replica at population `n` and return its trajectory paired with
/// the scaled grid. Replica randomness: stream 0 drives the chain, stream 1
/// the initial sample (when the initial data is sampled).
fn run_replica(
    s: &StudySetup,
    cfg: &ExperimentConfig,
    seed: u64,
    n: u64,
    r: u64,
) -> Result<Trajectory, HarnessError> {
    let mut draw_rng = ChaCha8Rng::seed_from_u64(keyed_u64(seed, [TAG_REPLICA, n, r, 1]));
    let particles = s.initial.particles(Some(n), &mut draw_rng)?;
    let scale = n as f64;
    let raw_times: Vec<f64> = cfg.times.iter().map(|t| t / scale).collect();
    let t_end = cfg.horizon()? / scale;
    let sim_seed = keyed_u64(seed, [TAG_REPLICA, n, r, 0]);
    let sim = simulate_coupled(
        &particles,
        &s.kernel,
        &s.trunc,
        0.0,
        t_end,
        &raw_times,
        sim_seed,
        &s.sim_opts,
    )?;
    if sim.trajectory.len() != s.reference.len() {
        return Err(HarnessError::Invariant(format!(
            "replica produced {} snapshots for a {}-point grid",
            sim.trajectory.len(),
            s.reference.len()
        )));
    }
    Ok(sim.trajectory)
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Ordinary least-squares slope of `y` against `x`; `None` when fewer than
/// two points or degenerate abscissae.
fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx > 0.0 {
        Some(sxy / sxx)
    } else {
        None
    }
}

/// One population size of the convergence study.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub n: u64,
    /// Mean over replicas of `sup_t d0(scaled empirical, reference)`.
    pub mean_sup_d0: f64,
    pub stderr: f64,
    pub replicas: u64,
}

/// Convergence-study result.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `ln(mean)` against `ln(n)`; the theoretical
    /// fluctuation rate is −1/2.
    pub slope: Option<f64>,
    /// Leak mass of the reference solve at the horizon (gated against
    /// `tolerances.lambda_reference`).
    pub reference_lambda: f64,
}

impl ConvergenceStudy {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,mean_sup_d0,stderr,replicas\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.n, row.mean_sup_d0, row.stderr, row.replicas
            ));
        }
        out
    }

    /// gnuplot script for the log-log rate plot (expects `convergence.csv`
    /// alongside).
    pub fn plot_script(&self) -> String {
        let slope = self
            .slope
            .map_or_else(|| "n/a".into(), |s| format!("{s:.3}"));
        format!(
            "set datafile separator \",\"\n\
             set logscale xy\n\
             set xlabel \"population size n\"\n\
             set ylabel \"mean sup d0\"\n\
             set title \"weak-metric convergence (fitted log-log slope {slope})\"\n\
             plot \"convergence.csv\" skip 1 using 1:2:3 with yerrorlines title \"mean sup d0\"\n"
        )
    }
}

/// Mean and standard error, per population size, of the sup over the grid of
/// the weak-metric distance between the rescaled chain and the truncated
/// solution, plus the fitted log-log rate.
pub fn convergence_study(cfg: &ExperimentConfig, seed: u64) -> Result<ConvergenceStudy, HarnessError> {
    let s = setup(cfg, true)?;
    let dict = WeakMetricDict::new(truncation_bound(&s.trunc)?, DICT_LEVELS)
        .map_err(|e| HarnessError::Config(format!("weak-metric dictionary: {e}")))?;
    let n_list = cfg.n_list.as_deref().unwrap_or(&[]);
    let phi = s.kernel.phi().clone();

    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let sups: Vec<f64> = (0..cfg.replicas)
            .into_par_iter()
            .map(|r| {
                let traj = run_replica(&s, cfg, seed, n, r)?;
                let scale = 1.0 / n as f64;
                let mut sup = 0.0f64;
                for (snap, refs) in traj.samples().iter().zip(s.reference.samples()) {
                    let emp = snap.measure.scaled(scale).weighted_by(&phi);
                    let want = refs.measure.weighted_by(&phi);
                    sup = sup.max(weak_distance_d0(&emp, &want, &dict));
                }
                Ok(sup)
            })
            .collect::<Result<_, HarnessError>>()?;
        let (mean, stderr) = mean_stderr(&sups);
        rows.push(ConvergenceRow { n, mean_sup_d0: mean, stderr, replicas: cfg.replicas });
    }

    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.mean_sup_d0 > 0.0)
        .map(|r| ((r.n as f64).ln(), r.mean_sup_d0.ln()))
        .collect();
    let slope = least_squares_slope(&points);
    Ok(ConvergenceStudy { rows, slope, reference_lambda: s.reference_lambda })
}

/// One population size of the concentration study.
#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationRow {
    pub n: u64,
    /// Replicas whose sup-over-grid total-variation distance exceeded `delta`.
    pub exceedances: u64,
    pub replicas: u64,
    pub frequency: f64,
}

/// Concentration-study result.
#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationStudy {
    pub rows: Vec<ConcentrationRow>,
    pub delta: f64,
    /// Least-squares slope of `ln(frequency)` against `n` over rows with at
    /// least one exceedance; exponential concentration makes this steeply
    /// negative.
    pub log_slope: Option<f64>,
    /// No replica can exceed this total-variation distance (sum of the two
    /// initial norms), so any `delta` above it trivially yields zeros.
    pub diameter_bound: f64,
    /// Smallest nonzero frequency resolvable at this replica count.
    pub mc_floor: f64,
    /// Set when some population size recorded zero exceedances: the true
    /// frequency is below the Monte-Carlo floor, not known to be zero.
    pub warning: Option<String>,
}

impl ConcentrationStudy {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,exceedances,replicas,frequency\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.n, row.exceedances, row.replicas, row.frequency
            ));
        }
        out
    }

    /// gnuplot script for the tail plot (expects `concentration.csv`
    /// alongside; zero frequencies drop off the log axis).
    pub fn plot_script(&self) -> String {
        format!(
            "set datafile separator \",\"\n\
             set logscale y\n\
             set xlabel \"population size n\"\n\
             set ylabel \"exceedance frequency\"\n\
             set title \"deviation tail: freq(sup TV > {})\"\n\
             plot \"concentration.csv\" skip 1 using 1:4 with linespoints title \"frequency\"\n",
            self.delta
        )
    }
}

/// Per population size, the fraction of replicas whose rescaled path ever
/// strays from the truncated solution by more than `delta` in total
/// variation.
pub fn concentration_study(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ConcentrationStudy, HarnessError> {
    let s = setup(cfg, false)?;
    let delta = cfg
        .delta
        .ok_or_else(|| HarnessError::Config("missing delta".into()))?;
    let n_list = cfg.n_list.as_deref().unwrap_or(&[]);
    let mu0_norm = s
        .initial
        .reference_measure(cfg.tolerances.eps_mass)?
        .norm();

    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let exceeded: Vec<bool> = (0..cfg.replicas)
            .into_par_iter()
            .map(|r| {
                let traj = run_replica(&s, cfg, seed, n, r)?;
                let scale = 1.0 / n as f64;
                for (snap, refs) in traj.samples().iter().zip(s.reference.samples()) {
                    let emp = snap.measure.scaled(scale);
                    let tv = total_variation(&emp, &refs.measure).map_err(|e| {
                        HarnessError::Invariant(format!("total-variation comparison: {e}"))
                    })?;
                    if tv > delta {
                        return Ok(true);
                    }
                }
                Ok(false)
            })
            .collect::<Result<_, HarnessError>>()?;
        let exceedances = exceeded.iter().filter(|&&e| e).count() as u64;
        rows.push(ConcentrationRow {
            n,
            exceedances,
            replicas: cfg.replicas,
            frequency: exceedances as f64 / cfg.replicas as f64,
        });
    }

    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.exceedances > 0)
        .map(|r| (r.n as f64, r.frequency.ln()))
        .collect();
    let log_slope = least_squares_slope(&points);
    let mc_floor = 1.0 / cfg.replicas as f64;
    let warning = rows.iter().any(|r| r.exceedances == 0).then(|| {
        format!(
            "some population sizes recorded zero exceedances; at {} replicas this \
             study cannot resolve tail frequencies below {mc_floor:e}",
            cfg.replicas
        )
    });
    Ok(ConcentrationStudy {
        rows,
        delta,
        log_slope,
        diameter_bound: 2.0 * mu0_norm,
        mc_floor,
        warning,
    })
}
