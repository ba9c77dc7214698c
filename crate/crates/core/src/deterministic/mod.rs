//! Deterministic evolution of the truncated coagulation system.
//!
//! The state is a pair `(μ, λ)`: an atomic measure supported inside a
//! truncation set `B`, plus a scalar accounting for envelope mass that has
//! left `B`. Ordered pairs of atoms `(x, y)` interact at rate `K(x,y)`;
//! a merged mass `x+y` that stays in `B` moves weight onto its atom, while a
//! merged mass outside `B` adds `φ(x+y)` to `λ`. Once positive, `λ` also
//! erodes the measure: each atom decays at rate `λ·φ(x)`, feeding `λ·φ(x)²`
//! back into `λ`. Writing `w_i` for atom weights, the right-hand side is
//!
//! ```text
//!   dw/dt:  pair (i,j), i<j :  w_i, w_j lose K_ij w_i w_j ; sum gains it
//!           pair (i,i)      :  w_i loses K_ii w_i²        ; sum gains half
//!           every atom i    :  loses λ·φ(x_i)·w_i
//!   dλ/dt:  Σ leaked-pair flux · φ(x_i+x_j)  +  λ·Σ φ(x_i)²·w_i
//! ```
//!
//! Per pair, `φ(x+y) ≤ φ(x) + φ(y)` makes `⟨φ,μ⟩ + λ` non-increasing, which
//! is the conservation diagnostic every report tracks.
//!
//! The support never grows during integration: it is closed under in-`B`
//! pair sums up front, so the system is a fixed-dimension ODE. Two solvers
//! share that right-hand side: an adaptive embedded Runge–Kutta 5(4) scheme
//! (default) and a fixed-point iteration that repeatedly integrates the
//! right-hand side along the current iterate (restarted on short horizons
//! where it provably contracts). The second is slower and exists as an
//! independent cross-check of the first.

mod picard;
pub(crate) mod rk;

#[cfg(test)]
pub(crate) use picard::scaled_nonneg_check;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{Kernel, KernelError};
use crate::measures::{
    make_measure, moment, DiscreteMeasure, KahanSum, MeasureError, SublinearFn,
};
use crate::trajectory::{Sample, SolverMeta, Trajectory};

/// Threshold below zero at which a weight stops being roundoff and becomes an
/// error.
const NEG_TOL: f64 = 1e-12;

/// Errors from the deterministic solvers.
#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("closed support would exceed {cap} sites (reached {size}); tighten the truncation or raise the cap")]
    SupportTooLarge { size: usize, cap: usize },
    #[error("weight {value} at mass {mass} fell below -{NEG_TOL} at t = {t}")]
    NumericalNegativity { t: f64, mass: f64, value: f64 },
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("fixed-point iteration failed to contract within {iterations} sweeps at t = {t}")]
    NotContracting { t: f64, iterations: usize },
}

/// The set `B` of retained masses.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Truncation {
    /// `(0, x_max]`.
    Interval { x_max: f64 },
    /// An explicit finite set of masses.
    Set { masses: Vec<f64> },
    /// No truncation (usable only when pair sums close up on a finite set).
    All,
}

impl Truncation {
    pub fn validate(&self) -> Result<(), SolveError> {
        match self {
            Truncation::Interval { x_max } => {
                if !x_max.is_finite() || *x_max <= 0.0 {
                    return Err(SolveError::InvalidInput(format!(
                        "interval truncation needs finite x_max > 0, got {x_max}"
                    )));
                }
            }
            Truncation::Set { masses } => {
                if masses.is_empty() {
                    return Err(SolveError::InvalidInput("empty truncation set".into()));
                }
                if masses.iter().any(|&x| !x.is_finite() || x <= 0.0) {
                    return Err(SolveError::InvalidInput(
                        "truncation set masses must be finite and positive".into(),
                    ));
                }
            }
            Truncation::All => {}
        }
        Ok(())
    }

    /// Does `x` belong to `B` (sites matched within `eps` for explicit sets)?
    pub fn contains(&self, x: f64, eps: f64) -> bool {
        match self {
            Truncation::Interval { x_max } => x > 0.0 && x <= *x_max,
            Truncation::Set { masses } => masses.iter().any(|&m| (m - x).abs() <= eps),
            Truncation::All => x > 0.0,
        }
    }

    /// Is `self ⊆ other` (up to `eps` site matching)?
    pub fn is_subset_of(&self, other: &Truncation, eps: f64) -> bool {
        match (self, other) {
            (Truncation::Interval { x_max: a }, Truncation::Interval { x_max: b }) => a <= b,
            (Truncation::Set { masses }, other) => {
                masses.iter().all(|&m| other.contains(m, eps))
            }
            (_, Truncation::All) => true,
            (Truncation::Interval { .. }, Truncation::Set { .. }) => false,
            (Truncation::All, _) => false,
        }
    }
}

/// A `(μ, λ)` state tagged with its truncation set and time.
#[derive(Debug, Clone)]
pub struct TruncatedState {
    pub mu: DiscreteMeasure,
    pub lambda: f64,
    pub trunc: Truncation,
    pub t: f64,
}

impl TruncatedState {
    /// Split a full initial measure across `B`: atoms inside `B` seed `μ`,
    /// atoms outside contribute their envelope mass `φ(x)·w` to `λ`.
    pub fn initial(
        mu0: &DiscreteMeasure,
        trunc: &Truncation,
        phi: &SublinearFn,
    ) -> Result<Self, SolveError> {
        trunc.validate()?;
        let eps = mu0.eps_mass();
        let mut inside = Vec::new();
        let mut lambda = KahanSum::new();
        for &(m, w) in mu0.atoms() {
            if trunc.contains(m, eps) {
                inside.push((m, w));
            } else {
                lambda.add(phi.eval(m) * w);
            }
        }
        Ok(Self {
            mu: make_measure(&inside, eps)?,
            lambda: lambda.value(),
            trunc: trunc.clone(),
            t: 0.0,
        })
    }
}

/// Solver selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Adaptive embedded Runge–Kutta 5(4) (default).
    Rk,
    /// Restarted fixed-point iteration; the independent cross-check.
    Picard,
}

/// Options for [`solve_truncated`] and [`solve_exhaustion`].
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub method: Method,
    pub atol: f64,
    pub rtol: f64,
    /// Hard cap on the closed support size.
    pub max_support: usize,
    /// Quadrature panels per fixed-point restart window.
    pub picard_panels: usize,
    /// Slack for the exhaustion-family ordering checks.
    pub order_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            method: Method::Rk,
            atol: 1e-10,
            rtol: 1e-8,
            max_support: 100_000,
            picard_panels: 32,
            order_tol: 1e-8,
        }
    }
}

// ---------------------------------------------------------------------------
// Closed support and the shared right-hand side
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct PairEntry {
    i: u32,
    j: u32,
    rate: f64,
    /// Index of the atom receiving the merged mass, or `None` if the sum
    /// leaves `B` (flux then feeds `λ` weighted by `phi_sum`).
    target: Option<u32>,
    /// `φ(x_i + x_j)`, evaluated at the raw sum.
    phi_sum: f64,
}

/// A fixed-support truncated system: sites, envelope values, and the
/// precomputed pair table. State vectors are `[w_0, …, w_{n−1}, λ]`.
#[derive(Debug, Clone)]
pub(crate) struct System {
    pub masses: Vec<f64>,
    pub phis: Vec<f64>,
    pairs: Vec<PairEntry>,
    pub eps: f64,
}

fn find_within(sorted: &[f64], x: f64, eps: f64) -> Option<usize> {
    let i = sorted.partition_point(|&m| m < x);
    for j in [i.wrapping_sub(1), i] {
        if let Some(&m) = sorted.get(j) {
            if (m - x).abs() <= eps {
                return Some(j);
            }
        }
    }
    None
}

impl System {
    /// Close the initial sites under in-`B` pair sums and build the pair
    /// table. Sums within `eps` of an existing site merge into it.
    pub(crate) fn build(
        initial_sites: &[f64],
        trunc: &Truncation,
        kernel: &Kernel,
        phi: &SublinearFn,
        eps: f64,
        max_support: usize,
    ) -> Result<Self, SolveError> {
        let mut sites: Vec<f64> = initial_sites.to_vec();
        sites.sort_by(f64::total_cmp);
        sites.dedup_by(|a, b| (*a - *b).abs() <= eps);
        loop {
            let mut added: Vec<f64> = Vec::new();
            for i in 0..sites.len() {
                for j in i..sites.len() {
                    let s = sites[i] + sites[j];
                    if trunc.contains(s, eps)
                        && find_within(&sites, s, eps).is_none()
                        && find_within(&added, s, eps).is_none()
                    {
                        let at = added.partition_point(|&m| m < s);
                        added.insert(at, s);
                    }
                }
            }
            if added.is_empty() {
                break;
            }
            sites.extend_from_slice(&added);
            sites.sort_by(f64::total_cmp);
            sites.dedup_by(|a, b| (*a - *b).abs() <= eps);
            if sites.len() > max_support {
                return Err(SolveError::SupportTooLarge { size: sites.len(), cap: max_support });
            }
        }

        let phis: Vec<f64> = sites.iter().map(|&m| phi.eval(m)).collect();
        let mut pairs = Vec::with_capacity(sites.len() * (sites.len() + 1) / 2);
        for i in 0..sites.len() {
            for j in i..sites.len() {
                let rate = kernel.eval(sites[i], sites[j]);
                if rate == 0.0 {
                    continue;
                }
                if !rate.is_finite() || rate < 0.0 {
                    return Err(SolveError::InvalidInput(format!(
                        "kernel value {rate} at ({}, {}) is not a finite non-negative rate",
                        sites[i], sites[j]
                    )));
                }
                let s = sites[i] + sites[j];
                let target = if trunc.contains(s, eps) {
                    // The closure guarantees the site exists.
                    Some(find_within(&sites, s, eps).expect("closed support") as u32)
                } else {
                    None
                };
                pairs.push(PairEntry {
                    i: i as u32,
                    j: j as u32,
                    rate,
                    target,
                    phi_sum: phi.eval(s),
                });
            }
        }
        Ok(Self { masses: sites, phis, pairs, eps })
    }

    pub(crate) fn dim(&self) -> usize {
        self.masses.len() + 1
    }

    /// Evaluate the right-hand side described in the module docs.
    pub(crate) fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let n = self.masses.len();
        dy.fill(0.0);
        let lambda = y[n];
        let mut dlam = 0.0;
        for e in &self.pairs {
            let (i, j) = (e.i as usize, e.j as usize);
            let flux = e.rate * y[i] * y[j];
            if i == j {
                dy[i] -= flux;
                match e.target {
                    Some(t) => dy[t as usize] += 0.5 * flux,
                    None => dlam += 0.5 * e.phi_sum * flux,
                }
            } else {
                dy[i] -= flux;
                dy[j] -= flux;
                match e.target {
                    Some(t) => dy[t as usize] += flux,
                    None => dlam += e.phi_sum * flux,
                }
            }
        }
        if lambda != 0.0 {
            for i in 0..n {
                dy[i] -= lambda * self.phis[i] * y[i];
                dlam += lambda * self.phis[i] * self.phis[i] * y[i];
            }
        }
        dy[n] = dlam;
    }

    /// Per-unit-weight decay rate of every atom against the frozen weights
    /// `y` (used by the integrating-factor cross-check): atom `i` decays at
    /// `Σ_j K_ij w_j + λ·φ_i`.
    #[cfg(test)]
    pub(crate) fn loss_rates(&self, y: &[f64]) -> Vec<f64> {
        let n = self.masses.len();
        let lambda = y[n];
        let mut rates: Vec<f64> = self.phis.iter().map(|&p| lambda * p).collect();
        for e in &self.pairs {
            let (a, b) = (e.i as usize, e.j as usize);
            rates[a] += e.rate * y[b];
            if a != b {
                rates[b] += e.rate * y[a];
            }
        }
        rates
    }

    #[cfg(test)]
    pub(crate) fn pair_entries(
        &self,
    ) -> impl Iterator<Item = (usize, usize, f64, Option<usize>, f64)> + '_ {
        self.pairs
            .iter()
            .map(|e| (e.i as usize, e.j as usize, e.rate, e.target.map(|t| t as usize), e.phi_sum))
    }

    fn measure_from(&self, y: &[f64]) -> Result<DiscreteMeasure, MeasureError> {
        let atoms: Vec<(f64, f64)> = self
            .masses
            .iter()
            .zip(y.iter())
            .map(|(&m, &w)| (m, w))
            .collect();
        make_measure(&atoms, self.eps)
    }
}

/// Clamp roundoff negatives to zero; genuine negatives are an error.
fn clamp_state(system: &System, y: &mut [f64], t: f64) -> Result<(), SolveError> {
    let n = system.masses.len();
    for (i, v) in y.iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(SolveError::NonFinite { t });
        }
        if *v < 0.0 {
            if *v >= -NEG_TOL {
                *v = 0.0;
            } else {
                let mass = if i < n { system.masses[i] } else { f64::NAN };
                return Err(SolveError::NumericalNegativity { t, mass, value: *v });
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Generator evaluation
// ---------------------------------------------------------------------------

/// Instantaneous rates `d/dt μ{x}` of the untruncated coagulation generator
/// applied to `μ`: every ordered atom pair contributes a gain at its sum and
/// losses at both factors. Returned as a signed `(mass, rate)` list sorted by
/// mass.
pub fn coagulation_rates(mu: &DiscreteMeasure, kernel: &Kernel) -> Vec<(f64, f64)> {
    let atoms = mu.atoms();
    let mut entries: Vec<(f64, f64)> = Vec::new();
    for i in 0..atoms.len() {
        for j in i..atoms.len() {
            let (xi, wi) = atoms[i];
            let (xj, wj) = atoms[j];
            let rate = kernel.eval(xi, xj);
            if rate == 0.0 {
                continue;
            }
            let flux = rate * wi * wj;
            if i == j {
                entries.push((xi, -flux));
                entries.push((xi + xj, 0.5 * flux));
            } else {
                entries.push((xi, -flux));
                entries.push((xj, -flux));
                entries.push((xi + xj, flux));
            }
        }
    }
    combine_signed(entries, mu.eps_mass())
}

/// Instantaneous rates of the truncated generator at `state`: the signed
/// `(mass, rate)` list for `dμ/dt` plus the scalar `dλ/dt`.
pub fn truncated_coagulation_rates(
    state: &TruncatedState,
    kernel: &Kernel,
    phi: &SublinearFn,
) -> Result<(Vec<(f64, f64)>, f64), SolveError> {
    let eps = state.mu.eps_mass();
    let atoms = state.mu.atoms();
    let mut entries: Vec<(f64, f64)> = Vec::new();
    let mut dlam = KahanSum::new();
    for i in 0..atoms.len() {
        for j in i..atoms.len() {
            let (xi, wi) = atoms[i];
            let (xj, wj) = atoms[j];
            let rate = kernel.eval(xi, xj);
            if rate == 0.0 {
                continue;
            }
            let flux = rate * wi * wj;
            let s = xi + xj;
            let (loss, gain) = if i == j { (flux, 0.5 * flux) } else { (flux, flux) };
            entries.push((xi, -loss));
            if i != j {
                entries.push((xj, -loss));
            }
            if state.trunc.contains(s, eps) {
                entries.push((s, gain));
            } else {
                dlam.add(phi.eval(s) * gain);
            }
        }
    }
    if state.lambda != 0.0 {
        for &(x, w) in atoms {
            let p = phi.eval(x);
            entries.push((x, -state.lambda * p * w));
            dlam.add(state.lambda * p * p * w);
        }
    }
    Ok((combine_signed(entries, eps), dlam.value()))
}

/// Merge signed `(site, value)` contributions whose sites agree within `eps`.
fn combine_signed(mut entries: Vec<(f64, f64)>, eps: f64) -> Vec<(f64, f64)> {
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (site, value) in entries {
        match out.last_mut() {
            Some((s, v)) if (site - *s).abs() <= eps => *v += value,
            _ => out.push((site, value)),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Solvers
// ---------------------------------------------------------------------------

/// Dissolve horizon lower bound `1/⟨φ², μ0⟩` before which the truncated
/// solutions provably stay bounded in the squared envelope (`+∞` when the
/// moment vanishes).
pub fn blowup_horizon(mu0: &DiscreteMeasure, phi: &SublinearFn) -> f64 {
    let m2 = moment(mu0, |x| phi.eval(x).powi(2));
    if m2 > 0.0 {
        1.0 / m2
    } else {
        f64::INFINITY
    }
}

fn validate_times(sample_times: &[f64]) -> Result<(), SolveError> {
    if sample_times.is_empty() {
        return Err(SolveError::InvalidInput("empty sample grid".into()));
    }
    if sample_times[0] < 0.0 {
        return Err(SolveError::InvalidInput("sample times must be >= 0".into()));
    }
    for w in sample_times.windows(2) {
        if w[1] <= w[0] {
            return Err(SolveError::InvalidInput(format!(
                "sample times must increase strictly ({} after {})",
                w[1], w[0]
            )));
        }
    }
    if sample_times.iter().any(|t| !t.is_finite()) {
        return Err(SolveError::InvalidInput("non-finite sample time".into()));
    }
    Ok(())
}

/// Solve the truncated system from `μ0` over `B`, sampling at the given
/// strictly increasing times (all relative to a start at `t = 0`).
pub fn solve_truncated(
    mu0: &DiscreteMeasure,
    kernel: &Kernel,
    phi: &SublinearFn,
    trunc: &Truncation,
    sample_times: &[f64],
    opts: &SolveOptions,
) -> Result<Trajectory, SolveError> {
    validate_times(sample_times)?;
    phi.validate()?;
    let state0 = TruncatedState::initial(mu0, trunc, phi)?;
    let initial_sites: Vec<f64> = state0.mu.atoms().iter().map(|&(m, _)| m).collect();
    let system = System::build(
        &initial_sites,
        trunc,
        kernel,
        phi,
        mu0.eps_mass(),
        opts.max_support,
    )?;

    let mut y = vec![0.0; system.dim()];
    for &(m, w) in state0.mu.atoms() {
        y[find_within(&system.masses, m, system.eps).expect("initial site")] += w;
    }
    *y.last_mut().unwrap() = state0.lambda;

    let mut meta = SolverMeta {
        method: match opts.method {
            Method::Rk => "rk".into(),
            Method::Picard => "picard".into(),
        },
        atol: Some(opts.atol),
        rtol: Some(opts.rtol),
        support_size: Some(system.masses.len()),
        ..SolverMeta::default()
    };

    let mut trajectory_samples: Vec<(f64, Vec<f64>)> = Vec::new();
    match opts.method {
        Method::Rk => {
            let mut integ = rk::Integrator::new(opts.atol, opts.rtol);
            let mut stats = rk::StepStats::default();
            let mut t = 0.0;
            for &ts in sample_times {
                if ts > t {
                    integ.integrate_to(&mut y, t, ts, |y, dy| system.rhs(y, dy), &mut stats)?;
                    t = ts;
                }
                clamp_state(&system, &mut y, t)?;
                trajectory_samples.push((ts, y.clone()));
            }
            meta.steps = stats.accepted;
            meta.rejected = stats.rejected;
        }
        Method::Picard => {
            let mut t = 0.0;
            let mut sweeps = 0u64;
            for &ts in sample_times {
                if ts > t {
                    sweeps +=
                        picard::advance(&system, &mut y, t, ts, phi, opts.picard_panels)?;
                    t = ts;
                }
                clamp_state(&system, &mut y, t)?;
                trajectory_samples.push((ts, y.clone()));
            }
            meta.steps = sweeps;
        }
    }

    let mut traj = Trajectory::new(meta);
    for (ts, y) in trajectory_samples {
        let lambda = *y.last().unwrap();
        let measure = system.measure_from(&y[..system.masses.len()])?;
        traj.push(Sample::new(ts, measure, lambda, phi));
    }
    Ok(traj)
}

// ---------------------------------------------------------------------------
// Exhaustion families
// ---------------------------------------------------------------------------

/// Result of solving the same initial data over a nested family of
/// truncations.
#[derive(Debug)]
pub struct ExhaustionResult {
    /// One trajectory per truncation, in input (increasing) order.
    pub trajectories: Vec<Trajectory>,
    /// Atomwise `μ^B ≤ μ^{B'}` across consecutive truncations at all samples.
    pub monotone_ok: bool,
    pub max_atom_violation: f64,
    /// `⟨φ,μ^B⟩ + λ^B ≥ ⟨φ,μ^{B'}⟩ + λ^{B'}` across consecutive truncations.
    pub envelope_order_ok: bool,
    pub max_envelope_violation: f64,
    /// Per sample time: total-variation gap between the two largest
    /// truncations, as a proxy for distance to the exhaustion limit.
    pub limit_gap: Vec<f64>,
}

impl ExhaustionResult {
    /// The best available approximation of the exhaustion limit.
    pub fn limit(&self) -> &Trajectory {
        self.trajectories.last().expect("at least one truncation")
    }
}

/// Solve over every truncation of a nested family (smallest to largest) and
/// check the ordering the truncated systems must satisfy: growing `B` can
/// only grow the measure, and only shrink the retained envelope mass.
pub fn solve_exhaustion(
    mu0: &DiscreteMeasure,
    kernel: &Kernel,
    phi: &SublinearFn,
    truncs: &[Truncation],
    sample_times: &[f64],
    opts: &SolveOptions,
) -> Result<ExhaustionResult, SolveError> {
    if truncs.is_empty() {
        return Err(SolveError::InvalidInput("empty truncation family".into()));
    }
    for w in truncs.windows(2) {
        if !w[0].is_subset_of(&w[1], mu0.eps_mass()) {
            return Err(SolveError::InvalidInput(
                "truncation family must be nested in increasing order".into(),
            ));
        }
    }
    let trajectories: Vec<Trajectory> = truncs
        .iter()
        .map(|b| solve_truncated(mu0, kernel, phi, b, sample_times, opts))
        .collect::<Result<_, _>>()?;

    let mut max_atom_violation = 0.0f64;
    let mut max_envelope_violation = 0.0f64;
    for pair in trajectories.windows(2) {
        let (small, big) = (&pair[0], &pair[1]);
        for (a, b) in small.samples().iter().zip(big.samples().iter()) {
            for &(m, w) in a.measure.atoms() {
                let excess = w - b.measure.weight_at(m);
                max_atom_violation = max_atom_violation.max(excess);
            }
            let deficit = b.phi_mass_plus_lambda() - a.phi_mass_plus_lambda();
            max_envelope_violation = max_envelope_violation.max(deficit);
        }
    }
    let limit_gap: Vec<f64> = if trajectories.len() >= 2 {
        let a = &trajectories[trajectories.len() - 2];
        let b = &trajectories[trajectories.len() - 1];
        a.samples()
            .iter()
            .zip(b.samples().iter())
            .map(|(sa, sb)| {
                crate::measures::total_variation(&sa.measure, &sb.measure)
                    .expect("matching resolutions")
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(ExhaustionResult {
        monotone_ok: max_atom_violation <= opts.order_tol,
        max_atom_violation,
        envelope_order_ok: max_envelope_violation <= opts.order_tol,
        max_envelope_violation,
        limit_gap,
        trajectories,
    })
}

// ---------------------------------------------------------------------------
// Conservation reporting
// ---------------------------------------------------------------------------

/// Per-sample conservation table row.
#[derive(Debug, Clone, Serialize)]
pub struct ConservationRow {
    pub t: f64,
    pub total_weight: f64,
    pub mass: f64,
    pub phi_mass_plus_lambda: f64,
    pub phi2_moment: f64,
    pub lambda: f64,
}

/// Conservation and a-priori-bound diagnostics for a solved trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct ConservationReport {
    pub rows: Vec<ConservationRow>,
    /// `⟨φ,μ⟩ + λ` never increases (within 1e−9 relative slack).
    pub envelope_monotone: bool,
    pub max_envelope_increase: f64,
    /// `λ` never decreases.
    pub lambda_monotone: bool,
    /// First sample time at which `λ` exceeds `lambda_threshold`, if any — the
    /// leak-onset (gelation) marker.
    pub lambda_onset: Option<f64>,
    pub lambda_threshold: f64,
    /// When the first sampled state has negligible `λ` and `⟨φ²,μ⟩ > 0`: the
    /// horizon `T = t_first + 1/⟨φ²,μ_{t_first}⟩` and whether
    /// `⟨φ²,μ_t⟩ ≤ (T−t)^{-1}` held (with 1e−6 relative slack) strictly
    /// before it.
    pub horizon: Option<f64>,
    pub horizon_bound_ok: Option<bool>,
    pub max_horizon_excess: f64,
    /// When the run starts with `λ > 0`: smallest ratio of `λ_t` to the
    /// integrating-factor floor `λ0·exp(∫⟨φ²,μ_s⟩ds)` (trapezoid on the
    /// sample grid; ratios below `1 − 1e−3` flag a dynamics error).
    pub lambda_floor_ratio: Option<f64>,
}

/// Build the conservation report for a trajectory solved under envelope `phi`
/// (the same one used to produce it). `lambda_threshold` sets the leak-onset
/// marker, e.g. `1e-4`.
pub fn conservation_report(
    traj: &Trajectory,
    lambda_threshold: f64,
) -> ConservationReport {
    let samples = traj.samples();
    let rows: Vec<ConservationRow> = samples
        .iter()
        .map(|s| ConservationRow {
            t: s.t,
            total_weight: s.measure.norm(),
            mass: s.mass,
            phi_mass_plus_lambda: s.phi_mass_plus_lambda(),
            phi2_moment: s.phi2_moment,
            lambda: s.lambda,
        })
        .collect();

    let mut max_envelope_increase = 0.0f64;
    let mut lambda_monotone = true;
    for w in rows.windows(2) {
        let (prev, next) = (&w[0], &w[1]);
        let scale = prev.phi_mass_plus_lambda.abs().max(1e-300);
        max_envelope_increase =
            max_envelope_increase.max((next.phi_mass_plus_lambda - prev.phi_mass_plus_lambda) / scale);
        if next.lambda < prev.lambda - 1e-12 * prev.lambda.abs().max(1.0) {
            lambda_monotone = false;
        }
    }

    let lambda_onset = rows
        .iter()
        .find(|r| r.lambda > lambda_threshold)
        .map(|r| r.t);

    let (mut horizon, mut horizon_bound_ok, mut max_horizon_excess) = (None, None, 0.0f64);
    let mut lambda_floor_ratio = None;
    if let Some(first) = rows.first() {
        // The horizon bound needs a leak-free start; λ below numerical noise
        // relative to the envelope counts as zero.
        let lambda_negligible = first.lambda <= 1e-12 * first.phi_mass_plus_lambda.abs();
        if lambda_negligible && first.phi2_moment > 0.0 {
            // Measured from the first sampled time, not necessarily t = 0.
            let t_star = first.t + 1.0 / first.phi2_moment;
            let mut ok = true;
            for r in &rows {
                if r.t < t_star {
                    let bound = 1.0 / (t_star - r.t);
                    let excess = r.phi2_moment / bound - 1.0;
                    max_horizon_excess = max_horizon_excess.max(excess);
                    if excess > 1e-6 {
                        ok = false;
                    }
                }
            }
            horizon = Some(t_star);
            horizon_bound_ok = Some(ok);
        } else if first.lambda > 0.0 {
            // Trapezoid ∫⟨φ²,μ⟩ along the sample grid gives the minimal
            // multiplicative growth λ must exhibit.
            let mut integral = 0.0;
            let mut min_ratio = f64::INFINITY;
            for w in rows.windows(2) {
                integral += 0.5 * (w[0].phi2_moment + w[1].phi2_moment) * (w[1].t - w[0].t);
                let floor = first.lambda * integral.exp();
                min_ratio = min_ratio.min(w[1].lambda / floor);
            }
            if min_ratio.is_finite() {
                lambda_floor_ratio = Some(min_ratio);
            }
        }
    }

    ConservationReport {
        rows,
        envelope_monotone: max_envelope_increase <= 1e-9,
        max_envelope_increase,
        lambda_monotone,
        lambda_onset,
        lambda_threshold,
        horizon,
        horizon_bound_ok,
        max_horizon_excess,
        lambda_floor_ratio,
    }
}

#[cfg(test)]
mod tests;
