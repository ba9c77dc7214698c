//! Exact stochastic simulation of the mass-coalescence jump chain.
//!
//! A state is a finite collection of positive particle masses. Every unordered
//! pair `(x_i, x_j)` merges at rate `K(x_i, x_j)` into a single particle of
//! mass `x_i + x_j`. The engine simulates this chain *exactly* by thinning: a
//! proposal clock runs at the product-envelope majorant rate
//! `margin·(S1² − S2)/2` (with `S1 = Σφ(x_i)`, `S2 = Σφ(x_i)²`), candidate
//! pairs are drawn proportionally to `φ(x_i)φ(x_j)` from a binary-indexed
//! tree, and a candidate is accepted with probability
//! `K/(margin·φφ)` — so accepted events occur at exactly the kernel rate while
//! rejected proposals only advance the clock.
//!
//! Three layers sit on top of the same engine:
//!
//! * [`simulate_coalescent`] — the plain chain (mass is conserved exactly).
//! * [`simulate_coupled`] — the chain truncated to a retained set `B` with a
//!   scalar leak tracker `Λ`: merges landing outside `B` remove both parents
//!   and add `φ(x_i+x_j)` to `Λ`, and each particle is additionally removed at
//!   rate `φ(x_i)·Λ` (adding `φ(x_i)` to `Λ`). `⟨φ, X⟩ + Λ` never increases.
//! * [`simulate_coupled_family`] — one shared realization of the truncated
//!   chain for a whole nested list of retained sets, built from a common clock
//!   table per round so that the smaller-set state stays a sub-multiset of the
//!   larger-set state at every instant. The containment and the envelope
//!   ordering are re-checked after every transition and any violation is a
//!   hard error.
//!
//! [`rescale_path`] applies the hydrodynamic scaling (time × n, weights / n),
//! and [`generator_consistency`] compares Monte-Carlo drift estimates against
//! the exact expected drift computed from the ordered-pair counting measure
//! (see [`pair_integral`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::deterministic::Truncation;
use crate::kernels::Kernel;
use crate::measures::{
    make_measure, moment, DiscreteMeasure, KahanSum, MeasureError, SublinearFn,
};
use crate::trajectory::{Sample, SolverMeta, Trajectory};

/// Errors from the stochastic engines.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("measure error: {0}")]
    Measure(#[from] MeasureError),
    /// The declared envelope does not dominate the kernel at a proposed pair.
    #[error("envelope domination violated at ({x}, {y}): acceptance ratio {ratio}")]
    DominationViolation { x: f64, y: f64, ratio: f64 },
    #[error("envelope not strictly positive at mass {x} (phi = {phi})")]
    EnvelopeNotPositive { x: f64, phi: f64 },
    #[error("retained-set family is not nested at position {0}")]
    UnnestedFamily(usize),
    /// The shared-clock coupling is only defined when the envelope dominates
    /// the kernel pointwise with margin exactly 1 (the cross-pair clocks have
    /// rate `φφ − K`, which must be non-negative with no slack factor).
    #[error("shared-clock family requires a margin-1 envelope (kernel declares margin {margin})")]
    FamilyMarginUnsupported { margin: f64 },
    /// The almost-sure coupling order broke; this is an implementation bug by
    /// construction, never a statistical fluctuation.
    #[error("coupling order violated: {0}")]
    OrderingViolation(String),
    #[error("proposal budget exhausted after {0} proposals")]
    BudgetExhausted(u64),
    #[error("internal invariant failed: {0}")]
    Internal(String),
}

// ---------------------------------------------------------------------------
// Event logs
// ---------------------------------------------------------------------------

/// What happened at a jump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Two particles merged and the sum was retained.
    Merge,
    /// Two particles merged but the sum fell outside the retained set: both
    /// parents removed, `φ(sum)` added to the leak tracker.
    MergeLeak,
    /// One particle was removed by the leak channel: `φ(x)` added to `Λ`.
    SingleLeak,
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::Merge => "merge",
            EventKind::MergeLeak => "merge-leak",
            EventKind::SingleLeak => "single-leak",
        }
    }
}

/// One logged jump. `m2`/`m_out` are absent for single-particle removals.
#[derive(Debug, Clone, Copy)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    pub m1: f64,
    pub m2: Option<f64>,
    pub m_out: Option<f64>,
}

/// A time-ordered list of jumps.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append an event; timestamps must be strictly increasing.
    pub fn push(&mut self, ev: Event) {
        if let Some(last) = self.events.last() {
            assert!(
                ev.t > last.t,
                "event times must be strictly increasing ({} after {})",
                ev.t,
                last.t
            );
        }
        self.events.push(ev);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Number of logged events of one kind.
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    /// CSV with header `t,kind,m1,m2,m_out`; floats are written in shortest
    /// round-trip form and absent fields are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,kind,m1,m2,m_out\n");
        for e in &self.events {
            let m2 = e.m2.map(|v| v.to_string()).unwrap_or_default();
            let m_out = e.m_out.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", e.t, e.kind.label(), e.m1, m2, m_out));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Counter-keyed random streams (shared-clock family engine)
// ---------------------------------------------------------------------------

/// 64-bit finalizer with full avalanche; bijective on `u64`.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic `u64` for a (seed, word₁..word₄) key. Each absorption step
/// is injective in the word for a fixed state, so distinct keys collide only
/// with generic hash probability.
pub(crate) fn keyed_u64(seed: u64, words: [u64; 4]) -> u64 {
    let mut h = mix64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for w in words {
        h = mix64(h ^ w.wrapping_add(0x9e37_79b9_7f4a_7c15));
    }
    h
}

/// `u64` → uniform in `(0, 1]` (53-bit resolution, never exactly 0).
fn unit_from_bits(x: u64) -> f64 {
    ((x >> 11) as f64 + 1.0) * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard-exponential variate for a counter key.
fn keyed_exp1(seed: u64, round: u64, tag: u64, a: u64, b: u64) -> f64 {
    -unit_from_bits(keyed_u64(seed, [round, tag, a, b])).ln()
}

const TAG_PAIR_MERGE: u64 = 1;
const TAG_PAIR_CROSS: u64 = 2;
const TAG_SINGLE: u64 = 3;
pub(crate) const TAG_REPLICA: u64 = 4;

/// Uniform in `(0, 1]` from a sequential generator.
fn unit_open_closed<R: Rng>(rng: &mut R) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// Smallest float strictly greater than `x` (finite, non-negative `x`).
fn next_up(x: f64) -> f64 {
    debug_assert!(x >= 0.0 && x.is_finite());
    f64::from_bits(x.to_bits() + 1)
}

// ---------------------------------------------------------------------------
// Weighted sampling tree
// ---------------------------------------------------------------------------

/// Binary-indexed tree over non-negative weights supporting O(log n) point
/// updates and O(log n) draws proportional to weight.
#[derive(Debug, Clone)]
struct WeightTree {
    tree: Vec<f64>,
    cap: usize,
    /// Largest power of two ≤ `cap`, for the sampling descent.
    mask: usize,
}

impl WeightTree {
    fn with_capacity(cap: usize) -> Self {
        let cap = cap.max(1);
        let mut mask = 1usize;
        while mask * 2 <= cap {
            mask *= 2;
        }
        Self { tree: vec![0.0; cap + 1], cap, mask }
    }

    fn add(&mut self, index: usize, delta: f64) {
        debug_assert!(index < self.cap);
        let mut i = index + 1;
        while i <= self.cap {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    fn total(&self) -> f64 {
        let mut i = self.cap;
        let mut sum = 0.0;
        while i > 0 {
            sum += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        sum
    }

    /// Leaf index where the cumulative weight first reaches `target`
    /// (`0 < target ≤ total`).
    fn descend(&self, mut target: f64) -> usize {
        let mut pos = 0usize;
        let mut pw = self.mask;
        while pw > 0 {
            let next = pos + pw;
            if next <= self.cap && self.tree[next] < target {
                target -= self.tree[next];
                pos = next;
            }
            pw >>= 1;
        }
        pos
    }

    /// Reset to exactly `weights` (drift repair).
    fn assign(&mut self, weights: &[f64]) {
        debug_assert!(weights.len() <= self.cap);
        for v in self.tree.iter_mut() {
            *v = 0.0;
        }
        for (i, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                self.add(i, w);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Options and results
// ---------------------------------------------------------------------------

/// Tuning knobs for the stochastic engines.
#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Site-matching tolerance used for snapshots and retained-set membership.
    pub eps_mass: f64,
    /// Rebuild the cached sums and the sampling tree after this many
    /// proposals, bounding incremental float drift.
    pub rebuild_every: u64,
    /// Hard cap on proposals (and family rounds); exceeding it is an error
    /// rather than a hang.
    pub max_proposals: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { eps_mass: 0.0, rebuild_every: 4096, max_proposals: 100_000_000 }
    }
}

/// Output of a single-chain run.
#[derive(Debug)]
pub struct SimResult {
    /// Snapshots at the requested sample times.
    pub trajectory: Trajectory,
    /// Every accepted jump.
    pub events: EventLog,
    /// Final state (time advanced to the horizon).
    pub system: ParticleSystem,
}

// ---------------------------------------------------------------------------
// Particle system
// ---------------------------------------------------------------------------

/// The live state of one stochastic chain: particle masses, cached envelope
/// sums `S1 = Σφ`, `S2 = Σφ²`, the leak tracker `Λ`, the retained set, and a
/// seedable generator.
#[derive(Debug)]
pub struct ParticleSystem {
    masses: Vec<f64>,
    alive: Vec<bool>,
    phi_w: Vec<f64>,
    tree: WeightTree,
    alive_count: usize,
    s1: f64,
    s2: f64,
    lambda: f64,
    trunc: Truncation,
    t: f64,
    rng: ChaCha8Rng,
    seed: u64,
    phi: SublinearFn,
    eps_mass: f64,
}

impl ParticleSystem {
    /// Build the initial state. Masses inside the retained set become live
    /// particles; each mass outside contributes `φ(x)` to the leak tracker,
    /// on top of `extra_lambda`.
    pub fn new(
        masses: &[f64],
        kernel: &Kernel,
        trunc: &Truncation,
        extra_lambda: f64,
        seed: u64,
        eps_mass: f64,
    ) -> Result<Self, SimError> {
        trunc
            .validate()
            .map_err(|e| SimError::InvalidInput(e.to_string()))?;
        if !extra_lambda.is_finite() || extra_lambda < 0.0 {
            return Err(SimError::InvalidInput(format!(
                "extra_lambda {extra_lambda} must be finite and >= 0"
            )));
        }
        if !eps_mass.is_finite() || eps_mass < 0.0 {
            return Err(SimError::InvalidInput(format!(
                "eps_mass {eps_mass} must be finite and >= 0"
            )));
        }
        for &x in masses {
            if !x.is_finite() || x <= 0.0 {
                return Err(SimError::InvalidInput(format!(
                    "particle masses must be finite and positive, got {x}"
                )));
            }
        }
        let phi = kernel.phi().clone();
        let mut inside = Vec::new();
        let mut lambda = KahanSum::new();
        lambda.add(extra_lambda);
        for &x in masses {
            if trunc.contains(x, eps_mass) {
                inside.push(x);
            } else {
                let p = phi.eval(x);
                if !p.is_finite() || p < 0.0 {
                    return Err(SimError::EnvelopeNotPositive { x, phi: p });
                }
                lambda.add(p);
            }
        }
        let cap = 2 * inside.len() + 2;
        let mut sys = Self {
            masses: Vec::with_capacity(inside.len()),
            alive: Vec::with_capacity(inside.len()),
            phi_w: Vec::with_capacity(inside.len()),
            tree: WeightTree::with_capacity(cap),
            alive_count: 0,
            s1: 0.0,
            s2: 0.0,
            lambda: lambda.value(),
            trunc: trunc.clone(),
            t: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            phi,
            eps_mass,
        };
        for x in inside {
            sys.insert(x)?;
        }
        sys.rebuild_caches();
        Ok(sys)
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn particle_count(&self) -> usize {
        self.alive_count
    }

    /// Masses of the live particles, in creation order.
    pub fn alive_masses(&self) -> Vec<f64> {
        self.masses
            .iter()
            .zip(&self.alive)
            .filter_map(|(&m, &a)| a.then_some(m))
            .collect()
    }

    /// `Σ x_i` over live particles (compensated).
    pub fn total_mass(&self) -> f64 {
        let mut s = KahanSum::new();
        for (&m, &a) in self.masses.iter().zip(&self.alive) {
            if a {
                s.add(m);
            }
        }
        s.value()
    }

    /// Cached `S1 = Σφ(x_i)`.
    pub fn phi_sum(&self) -> f64 {
        self.s1
    }

    /// Cached `S2 = Σφ(x_i)²`.
    pub fn phi2_sum(&self) -> f64 {
        self.s2
    }

    /// `⟨φ, X⟩ + Λ`, the quantity the truncated chain can only dissipate.
    pub fn envelope_plus_lambda(&self) -> f64 {
        self.s1 + self.lambda
    }

    /// Worst relative error of the cached sums against a fresh recomputation.
    pub fn cache_coherence(&self) -> f64 {
        let mut s1 = KahanSum::new();
        let mut s2 = KahanSum::new();
        for (&w, &a) in self.phi_w.iter().zip(&self.alive) {
            if a {
                s1.add(w);
                s2.add(w * w);
            }
        }
        let d1 = (self.s1 - s1.value()).abs() / s1.value().abs().max(1.0);
        let d2 = (self.s2 - s2.value()).abs() / s2.value().abs().max(1.0);
        d1.max(d2)
    }

    /// The live particles as a discrete measure (unit weight per particle,
    /// sites merged at the configured tolerance).
    pub fn to_measure(&self) -> Result<DiscreteMeasure, SimError> {
        let atoms: Vec<(f64, f64)> = self
            .masses
            .iter()
            .zip(&self.alive)
            .filter_map(|(&m, &a)| a.then_some((m, 1.0)))
            .collect();
        Ok(make_measure(&atoms, self.eps_mass)?)
    }

    fn snapshot(&self, t: f64) -> Result<Sample, SimError> {
        Ok(Sample::new(t, self.to_measure()?, self.lambda, &self.phi))
    }

    fn insert(&mut self, mass: f64) -> Result<usize, SimError> {
        let p = self.phi.eval(mass);
        if !p.is_finite() || p <= 0.0 {
            return Err(SimError::EnvelopeNotPositive { x: mass, phi: p });
        }
        let idx = self.masses.len();
        if idx >= self.tree.cap {
            return Err(SimError::Internal(format!(
                "particle slot capacity {} exceeded",
                self.tree.cap
            )));
        }
        self.masses.push(mass);
        self.alive.push(true);
        self.phi_w.push(p);
        self.tree.add(idx, p);
        self.alive_count += 1;
        self.s1 += p;
        self.s2 += p * p;
        Ok(idx)
    }

    fn kill(&mut self, idx: usize) {
        debug_assert!(self.alive[idx]);
        let p = self.phi_w[idx];
        self.alive[idx] = false;
        self.phi_w[idx] = 0.0;
        self.tree.add(idx, -p);
        self.alive_count -= 1;
        self.s1 -= p;
        self.s2 -= p * p;
    }

    fn rebuild_caches(&mut self) {
        let mut s1 = KahanSum::new();
        let mut s2 = KahanSum::new();
        for (&w, &a) in self.phi_w.iter().zip(&self.alive) {
            if a {
                s1.add(w);
                s2.add(w * w);
            }
        }
        self.s1 = s1.value();
        self.s2 = s2.value();
        self.tree.assign(&self.phi_w);
    }

    /// Draw a live particle index with probability proportional to `φ(x_i)`.
    fn draw_particle(&mut self) -> Result<usize, SimError> {
        let total = self.tree.total();
        if !(total > 0.0) {
            return Err(SimError::Internal("weighted draw from empty system".into()));
        }
        let target = unit_open_closed(&mut self.rng) * total;
        let mut idx = self.tree.descend(target).min(self.masses.len() - 1);
        // Float drift can land the descent on a dead slot; snap to the
        // nearest live one.
        if self.phi_w[idx] == 0.0 {
            let fwd = self.phi_w[idx..].iter().position(|&w| w > 0.0).map(|k| idx + k);
            let back = self.phi_w[..idx].iter().rposition(|&w| w > 0.0);
            idx = fwd
                .or(back)
                .ok_or_else(|| SimError::Internal("no live particle to draw".into()))?;
        }
        Ok(idx)
    }
}

// ---------------------------------------------------------------------------
// Core thinning engine (plain and single-truncation chains)
// ---------------------------------------------------------------------------

fn validate_horizon_and_grid(t_end: f64, sample_times: &[f64]) -> Result<(), SimError> {
    if !t_end.is_finite() || t_end < 0.0 {
        return Err(SimError::InvalidInput(format!(
            "t_end {t_end} must be finite and >= 0"
        )));
    }
    for (k, &ts) in sample_times.iter().enumerate() {
        if !ts.is_finite() || ts < 0.0 {
            return Err(SimError::InvalidInput(format!("sample time {ts} invalid")));
        }
        if ts > t_end {
            return Err(SimError::InvalidInput(format!(
                "sample time {ts} exceeds horizon {t_end}"
            )));
        }
        if k > 0 && ts <= sample_times[k - 1] {
            return Err(SimError::InvalidInput(
                "sample times must be strictly increasing".into(),
            ));
        }
    }
    Ok(())
}

/// Run the thinning chain in `sys` up to `t_end`, recording snapshots at
/// `sample_times` and every accepted jump.
fn run_chain(
    sys: &mut ParticleSystem,
    kernel: &Kernel,
    t_end: f64,
    sample_times: &[f64],
    opts: &SimOptions,
) -> Result<(Trajectory, EventLog), SimError> {
    validate_horizon_and_grid(t_end, sample_times)?;
    let margin = kernel.margin();
    let mut traj = Trajectory::new(SolverMeta {
        method: "stochastic-thinning".into(),
        ..SolverMeta::default()
    });
    let mut log = EventLog::new();
    let mut next_sample = 0usize;
    let mut proposals: u64 = 0;
    let mut accepted: u64 = 0;
    let mut rejected: u64 = 0;

    loop {
        let r_pair = if sys.alive_count >= 2 {
            margin * (sys.s1 * sys.s1 - sys.s2).max(0.0) / 2.0
        } else {
            0.0
        };
        let r_single = if sys.alive_count >= 1 && sys.lambda > 0.0 {
            sys.s1 * sys.lambda
        } else {
            0.0
        };
        let r_total = r_pair + r_single;
        if !(r_total > 0.0) {
            break;
        }
        proposals += 1;
        if proposals > opts.max_proposals {
            return Err(SimError::BudgetExhausted(proposals));
        }
        let dt = -unit_open_closed(&mut sys.rng).ln() / r_total;
        let mut t_next = sys.t + dt;
        if !(t_next > sys.t) {
            t_next = next_up(sys.t);
        }
        if t_next > t_end {
            break;
        }
        while next_sample < sample_times.len() && sample_times[next_sample] < t_next {
            let s = sys.snapshot(sample_times[next_sample])?;
            traj.push(s);
            next_sample += 1;
        }
        sys.t = t_next;

        // Category split: merge proposal vs. leak removal. The comparison
        // draw is skipped whenever the leak channel is silent so that a run
        // with Λ ≡ 0 consumes exactly the same random stream as the plain
        // chain.
        let is_pair = if r_single > 0.0 {
            sys.rng.gen::<f64>() * r_total < r_pair
        } else {
            true
        };

        if is_pair {
            // Two independent envelope-proportional draws; a collision
            // rejects the whole candidate so accepted pairs are distributed
            // ∝ φφ over *distinct* ordered pairs.
            let (i, j) = {
                let mut guard = 0u32;
                loop {
                    let i = sys.draw_particle()?;
                    let j = sys.draw_particle()?;
                    if i != j {
                        break (i, j);
                    }
                    guard += 1;
                    if guard > 1_000_000 {
                        return Err(SimError::Internal(
                            "candidate redraw loop failed to find a distinct pair".into(),
                        ));
                    }
                }
            };
            let (xi, xj) = (sys.masses[i], sys.masses[j]);
            let k_ij = kernel.eval(xi, xj);
            if !k_ij.is_finite() || k_ij < 0.0 {
                return Err(SimError::InvalidInput(format!(
                    "kernel returned {k_ij} at ({xi}, {xj})"
                )));
            }
            let ratio = k_ij / (margin * sys.phi_w[i] * sys.phi_w[j]);
            if ratio > 1.0 + 1e-9 {
                return Err(SimError::DominationViolation { x: xi, y: xj, ratio });
            }
            let u = sys.rng.gen::<f64>();
            if u < ratio {
                accepted += 1;
                let sum = xi + xj;
                sys.kill(i);
                sys.kill(j);
                if sys.trunc.contains(sum, sys.eps_mass) {
                    sys.insert(sum)?;
                    log.push(Event {
                        t: sys.t,
                        kind: EventKind::Merge,
                        m1: xi,
                        m2: Some(xj),
                        m_out: Some(sum),
                    });
                } else {
                    let p = sys.phi.eval(sum);
                    if !p.is_finite() || p < 0.0 {
                        return Err(SimError::EnvelopeNotPositive { x: sum, phi: p });
                    }
                    sys.lambda += p;
                    log.push(Event {
                        t: sys.t,
                        kind: EventKind::MergeLeak,
                        m1: xi,
                        m2: Some(xj),
                        m_out: Some(sum),
                    });
                }
            } else {
                rejected += 1;
            }
        } else {
            let i = sys.draw_particle()?;
            let xi = sys.masses[i];
            let pi = sys.phi_w[i];
            sys.kill(i);
            sys.lambda += pi;
            accepted += 1;
            log.push(Event {
                t: sys.t,
                kind: EventKind::SingleLeak,
                m1: xi,
                m2: None,
                m_out: None,
            });
        }

        while next_sample < sample_times.len() && sample_times[next_sample] == sys.t {
            let s = sys.snapshot(sample_times[next_sample])?;
            traj.push(s);
            next_sample += 1;
        }
        if proposals.is_multiple_of(opts.rebuild_every) {
            sys.rebuild_caches();
        }
    }

    sys.t = t_end;
    while next_sample < sample_times.len() {
        let s = sys.snapshot(sample_times[next_sample])?;
        traj.push(s);
        next_sample += 1;
    }
    traj.meta.steps = accepted;
    traj.meta.rejected = rejected;
    Ok((traj, log))
}

/// Simulate the plain coalescent from unit particles at `masses` up to
/// `t_end`. Identical seeds give bit-identical paths.
pub fn simulate_coalescent(
    masses: &[f64],
    kernel: &Kernel,
    t_end: f64,
    sample_times: &[f64],
    seed: u64,
    opts: &SimOptions,
) -> Result<SimResult, SimError> {
    let mut sys =
        ParticleSystem::new(masses, kernel, &Truncation::All, 0.0, seed, opts.eps_mass)?;
    let (trajectory, events) = run_chain(&mut sys, kernel, t_end, sample_times, opts)?;
    Ok(SimResult { trajectory, events, system: sys })
}

/// Simulate the truncated chain with leak tracker. Initial particles outside
/// the retained set contribute `φ(x)` to `Λ₀` (plus `extra_lambda`); merges
/// out of the set and the `φ(x_i)·Λ` removal channel feed `Λ` as the chain
/// runs. With the full retained set and `extra_lambda = 0` this degenerates
/// bit-for-bit to [`simulate_coalescent`].
#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled(
    masses: &[f64],
    kernel: &Kernel,
    trunc: &Truncation,
    extra_lambda: f64,
    t_end: f64,
    sample_times: &[f64],
    seed: u64,
    opts: &SimOptions,
) -> Result<SimResult, SimError> {
    let mut sys = ParticleSystem::new(masses, kernel, trunc, extra_lambda, seed, opts.eps_mass)?;
    let (trajectory, events) = run_chain(&mut sys, kernel, t_end, sample_times, opts)?;
    Ok(SimResult { trajectory, events, system: sys })
}

// ---------------------------------------------------------------------------
// Shared-clock family
// ---------------------------------------------------------------------------

/// Output of a shared-clock family run: one path per retained set, in input
/// order.
#[derive(Debug)]
pub struct FamilyResult {
    pub trajectories: Vec<Trajectory>,
    pub event_logs: Vec<EventLog>,
    /// Final leak trackers, one per retained set.
    pub final_lambdas: Vec<f64>,
    /// Final live masses per retained set, sorted ascending.
    pub final_masses: Vec<Vec<f64>>,
    /// Total construction rounds (including rounds where no listed set moved).
    pub rounds: u64,
    /// Rounds in which at least one listed set transitioned.
    pub transition_rounds: u64,
    /// Number of times the containment/envelope ordering was re-verified.
    pub ordering_checks: u64,
}

/// One realization of the truncated chain simultaneously for every retained
/// set in a nested list, driven by a shared clock table.
///
/// Per round (restarted after every event), with the full particle table
/// `x_1..x_m` and each listed set holding a sub-multiset via an index set
/// `I(B)` plus a leak tracker `Λ^B`:
///
/// * every unordered pair carries a merge clock at rate `K(x_i, x_j)`;
/// * every ordered pair carries a cross clock at rate `φ(x_i)φ(x_j) − K`;
/// * every particle draws one standard-exponential `E_i`, shared by all
///   listed sets as the removal clock `E_i/(φ(x_i)·ν^B)`, where
///   `ν^B = Λ^B − Σ_{j∉I(B)} φ(x_j) ≥ 0` shrinks as the set grows — so the
///   shared `E_i` makes smaller sets leak no later than larger ones.
///
/// The minimum clock fires. A merge clock merges the pair in the full table
/// and, for each listed set: merges (sum retained), merge-leaks (sum
/// outside), or single-leaks (only one parent held). A cross clock `(i, j)`
/// single-leaks `i` from every set holding `i` but not `j`. A removal clock
/// single-leaks its particle from every set whose clock ties the minimum
/// exactly. All randomness is counter-keyed by `(seed, round, kind, ids)`, so
/// identical seeds reproduce identical families.
///
/// After every transition the engine re-checks that each state is a
/// sub-multiset of the next and that `⟨φ, X^B⟩ + Λ^B` is ordered the opposite
/// way (within 1e−9); a violation is an implementation bug and errors out.
pub fn simulate_coupled_family(
    masses: &[f64],
    kernel: &Kernel,
    truncs: &[Truncation],
    t_end: f64,
    sample_times: &[f64],
    seed: u64,
    opts: &SimOptions,
) -> Result<FamilyResult, SimError> {
    if kernel.margin() != 1.0 {
        return Err(SimError::FamilyMarginUnsupported { margin: kernel.margin() });
    }
    if truncs.is_empty() {
        return Err(SimError::InvalidInput("empty retained-set family".into()));
    }
    for b in truncs {
        b.validate().map_err(|e| SimError::InvalidInput(e.to_string()))?;
    }
    for k in 0..truncs.len() - 1 {
        if !truncs[k].is_subset_of(&truncs[k + 1], opts.eps_mass) {
            return Err(SimError::UnnestedFamily(k + 1));
        }
    }
    validate_horizon_and_grid(t_end, sample_times)?;
    for &x in masses {
        if !x.is_finite() || x <= 0.0 {
            return Err(SimError::InvalidInput(format!(
                "particle masses must be finite and positive, got {x}"
            )));
        }
    }
    let phi = kernel.phi();
    let nb = truncs.len();
    let eps = opts.eps_mass;

    // Full particle table (slots are never reused; merged particles append).
    let mut table: Vec<f64> = masses.to_vec();
    let mut phi_tab: Vec<f64> = Vec::with_capacity(table.len());
    for &x in &table {
        let p = phi.eval(x);
        if !p.is_finite() || p <= 0.0 {
            return Err(SimError::EnvelopeNotPositive { x, phi: p });
        }
        phi_tab.push(p);
    }
    let mut alive: Vec<bool> = vec![true; table.len()];

    // Per listed set: membership flags over slots, leak tracker, outputs.
    let mut in_b: Vec<Vec<bool>> = Vec::with_capacity(nb);
    let mut lambdas: Vec<f64> = Vec::with_capacity(nb);
    for b in truncs {
        let membership: Vec<bool> = table.iter().map(|&x| b.contains(x, eps)).collect();
        let mut lam = KahanSum::new();
        for (idx, &inside) in membership.iter().enumerate() {
            if !inside {
                lam.add(phi_tab[idx]);
            }
        }
        in_b.push(membership);
        lambdas.push(lam.value());
    }
    let mut trajs: Vec<Trajectory> = (0..nb)
        .map(|_| {
            Trajectory::new(SolverMeta {
                method: "shared-clock-family".into(),
                ..SolverMeta::default()
            })
        })
        .collect();
    let mut logs: Vec<EventLog> = (0..nb).map(|_| EventLog::new()).collect();

    let env_sum = |in_set: &[bool], phi_tab: &[f64], lam: f64| -> f64 {
        let mut s = KahanSum::new();
        for (idx, &inside) in in_set.iter().enumerate() {
            if inside {
                s.add(phi_tab[idx]);
            }
        }
        s.value() + lam
    };
    let mut prev_env: Vec<f64> = (0..nb)
        .map(|b| env_sum(&in_b[b], &phi_tab, lambdas[b]))
        .collect();

    let push_samples = |trajs: &mut Vec<Trajectory>,
                        in_b: &Vec<Vec<bool>>,
                        lambdas: &Vec<f64>,
                        table: &Vec<f64>,
                        ts: f64|
     -> Result<(), SimError> {
        for b in 0..trajs.len() {
            let atoms: Vec<(f64, f64)> = table
                .iter()
                .enumerate()
                .filter_map(|(idx, &m)| in_b[b][idx].then_some((m, 1.0)))
                .collect();
            let measure = make_measure(&atoms, eps)?;
            trajs[b].push(Sample::new(ts, measure, lambdas[b], phi));
        }
        Ok(())
    };

    let mut t = 0.0f64;
    let mut round: u64 = 0;
    let mut transition_rounds: u64 = 0;
    let mut ordering_checks: u64 = 0;
    let mut next_sample = 0usize;
    let mut accepted: Vec<u64> = vec![0; nb];

    #[derive(Clone, Copy)]
    enum Winner {
        Merge(usize, usize),
        Cross(usize, usize),
        Removal(usize),
    }

    loop {
        round += 1;
        if round > opts.max_proposals {
            return Err(SimError::BudgetExhausted(round));
        }
        let alive_ids: Vec<usize> =
            (0..table.len()).filter(|&idx| alive[idx]).collect();
        if alive_ids.is_empty() {
            break;
        }

        // ν^B per listed set, clamped non-negative and re-monotonized (the
        // mathematical monotonicity in the set can be lost to last-ulp
        // rounding, which would wrongly reorder the shared removal clocks).
        let mut s1_all = KahanSum::new();
        for &idx in &alive_ids {
            s1_all.add(phi_tab[idx]);
        }
        let s1_all = s1_all.value();
        let mut nu: Vec<f64> = Vec::with_capacity(nb);
        for b in 0..nb {
            let mut s1_b = KahanSum::new();
            for &idx in &alive_ids {
                if in_b[b][idx] {
                    s1_b.add(phi_tab[idx]);
                }
            }
            let v = lambdas[b] - (s1_all - s1_b.value());
            let scale = s1_all.max(lambdas[b]).max(1.0);
            if v < -1e-9 * scale {
                return Err(SimError::Internal(format!(
                    "negative removal-rate mass {v} for retained set {b}"
                )));
            }
            nu.push(v.max(0.0));
        }
        for b in (0..nb.saturating_sub(1)).rev() {
            nu[b] = nu[b].max(nu[b + 1]);
        }

        // Draw the round's clock table and find the earliest clock.
        let mut best = f64::INFINITY;
        let mut winner: Option<Winner> = None;
        for (pos, &i) in alive_ids.iter().enumerate() {
            for &j in &alive_ids[pos + 1..] {
                let k_ij = kernel.eval(table[i], table[j]);
                if !k_ij.is_finite() || k_ij < 0.0 {
                    return Err(SimError::InvalidInput(format!(
                        "kernel returned {k_ij} at ({}, {})",
                        table[i], table[j]
                    )));
                }
                if k_ij > 0.0 {
                    let v = keyed_exp1(seed, round, TAG_PAIR_MERGE, i as u64, j as u64) / k_ij;
                    if v < best {
                        best = v;
                        winner = Some(Winner::Merge(i, j));
                    }
                }
            }
        }
        for &i in &alive_ids {
            for &j in &alive_ids {
                if i == j {
                    continue;
                }
                let pp = phi_tab[i] * phi_tab[j];
                let k_ij = kernel.eval(table[i], table[j]);
                let rate = pp - k_ij;
                if rate < -1e-9 * pp {
                    return Err(SimError::DominationViolation {
                        x: table[i],
                        y: table[j],
                        ratio: k_ij / pp,
                    });
                }
                if rate > 0.0 {
                    let v = keyed_exp1(seed, round, TAG_PAIR_CROSS, i as u64, j as u64) / rate;
                    if v < best {
                        best = v;
                        winner = Some(Winner::Cross(i, j));
                    }
                }
            }
        }
        for &i in &alive_ids {
            let e_i = keyed_exp1(seed, round, TAG_SINGLE, i as u64, 0);
            for &nu_b in &nu {
                if nu_b > 0.0 {
                    let v = e_i / (phi_tab[i] * nu_b);
                    if v < best {
                        best = v;
                        winner = Some(Winner::Removal(i));
                    }
                }
            }
        }
        let Some(winner) = winner else {
            break;
        };
        let mut t_next = t + best;
        if !(t_next > t) {
            t_next = next_up(t);
        }
        if t_next > t_end {
            break;
        }
        while next_sample < sample_times.len() && sample_times[next_sample] < t_next {
            push_samples(&mut trajs, &in_b, &lambdas, &table, sample_times[next_sample])?;
            next_sample += 1;
        }
        t = t_next;

        let mut any_transition = false;
        match winner {
            Winner::Merge(i, j) => {
                let sum = table[i] + table[j];
                let p_sum = phi.eval(sum);
                if !p_sum.is_finite() || p_sum <= 0.0 {
                    return Err(SimError::EnvelopeNotPositive { x: sum, phi: p_sum });
                }
                let k_new = table.len();
                table.push(sum);
                phi_tab.push(p_sum);
                alive.push(true);
                alive[i] = false;
                alive[j] = false;
                for b in 0..nb {
                    in_b[b].push(false);
                    let (bi, bj) = (in_b[b][i], in_b[b][j]);
                    if bi && bj {
                        in_b[b][i] = false;
                        in_b[b][j] = false;
                        if truncs[b].contains(sum, eps) {
                            in_b[b][k_new] = true;
                            logs[b].push(Event {
                                t,
                                kind: EventKind::Merge,
                                m1: table[i],
                                m2: Some(table[j]),
                                m_out: Some(sum),
                            });
                        } else {
                            lambdas[b] += p_sum;
                            logs[b].push(Event {
                                t,
                                kind: EventKind::MergeLeak,
                                m1: table[i],
                                m2: Some(table[j]),
                                m_out: Some(sum),
                            });
                        }
                        accepted[b] += 1;
                        any_transition = true;
                    } else if bi != bj {
                        let a = if bi { i } else { j };
                        in_b[b][a] = false;
                        lambdas[b] += phi_tab[a];
                        logs[b].push(Event {
                            t,
                            kind: EventKind::SingleLeak,
                            m1: table[a],
                            m2: None,
                            m_out: None,
                        });
                        accepted[b] += 1;
                        any_transition = true;
                    }
                }
            }
            Winner::Cross(i, j) => {
                for b in 0..nb {
                    if in_b[b][i] && !in_b[b][j] {
                        in_b[b][i] = false;
                        lambdas[b] += phi_tab[i];
                        logs[b].push(Event {
                            t,
                            kind: EventKind::SingleLeak,
                            m1: table[i],
                            m2: None,
                            m_out: None,
                        });
                        accepted[b] += 1;
                        any_transition = true;
                    }
                }
            }
            Winner::Removal(i) => {
                // Re-derive each set's clock; exact ties (shared E_i, equal
                // ν) fire together, which is what keeps smaller sets inside
                // larger ones.
                let e_i = keyed_exp1(seed, round, TAG_SINGLE, i as u64, 0);
                for b in 0..nb {
                    if nu[b] > 0.0 && in_b[b][i] {
                        let v = e_i / (phi_tab[i] * nu[b]);
                        if v == best {
                            in_b[b][i] = false;
                            lambdas[b] += phi_tab[i];
                            logs[b].push(Event {
                                t,
                                kind: EventKind::SingleLeak,
                                m1: table[i],
                                m2: None,
                                m_out: None,
                            });
                            accepted[b] += 1;
                            any_transition = true;
                        }
                    }
                }
            }
        }

        if any_transition {
            transition_rounds += 1;
            ordering_checks += 1;
            for b in 0..nb {
                for idx in 0..table.len() {
                    if in_b[b][idx] && !alive[idx] {
                        return Err(SimError::Internal(format!(
                            "retained set {b} holds dead slot {idx}"
                        )));
                    }
                    if b + 1 < nb && in_b[b][idx] && !in_b[b + 1][idx] {
                        return Err(SimError::OrderingViolation(format!(
                            "slot {idx} (mass {}) held by set {b} but not by set {}",
                            table[idx],
                            b + 1
                        )));
                    }
                }
            }
            let envs: Vec<f64> = (0..nb)
                .map(|b| env_sum(&in_b[b], &phi_tab, lambdas[b]))
                .collect();
            for b in 0..nb {
                let tol = 1e-9 * prev_env[b].abs().max(1.0);
                if envs[b] > prev_env[b] + tol {
                    return Err(SimError::OrderingViolation(format!(
                        "envelope mass of set {b} increased: {} -> {}",
                        prev_env[b], envs[b]
                    )));
                }
                if b + 1 < nb {
                    let tol = 1e-9 * envs[b].abs().max(1.0);
                    if envs[b] + tol < envs[b + 1] {
                        return Err(SimError::OrderingViolation(format!(
                            "envelope mass out of order between sets {b} and {}: {} < {}",
                            b + 1,
                            envs[b],
                            envs[b + 1]
                        )));
                    }
                }
            }
            prev_env = envs;
        }

        while next_sample < sample_times.len() && sample_times[next_sample] == t {
            push_samples(&mut trajs, &in_b, &lambdas, &table, sample_times[next_sample])?;
            next_sample += 1;
        }
    }

    while next_sample < sample_times.len() {
        push_samples(&mut trajs, &in_b, &lambdas, &table, sample_times[next_sample])?;
        next_sample += 1;
    }
    for b in 0..nb {
        trajs[b].meta.steps = accepted[b];
    }
    let final_masses: Vec<Vec<f64>> = (0..nb)
        .map(|b| {
            let mut ms: Vec<f64> = table
                .iter()
                .enumerate()
                .filter_map(|(idx, &m)| in_b[b][idx].then_some(m))
                .collect();
            ms.sort_by(f64::total_cmp);
            ms
        })
        .collect();
    Ok(FamilyResult {
        trajectories: trajs,
        event_logs: logs,
        final_lambdas: lambdas,
        final_masses,
        rounds: round,
        transition_rounds,
        ordering_checks,
    })
}

// ---------------------------------------------------------------------------
// Hydrodynamic rescaling
// ---------------------------------------------------------------------------

/// Rescale a raw path: times are multiplied by `n`, measure weights (and the
/// leak tracker and cached moments) divided by `n`. `n = 1` is the bitwise
/// identity.
pub fn rescale_path(traj: &Trajectory, n: u64) -> Result<Trajectory, SimError> {
    if n == 0 {
        return Err(SimError::InvalidInput("rescaling factor must be >= 1".into()));
    }
    let nf = n as f64;
    let inv = 1.0 / nf;
    let mut out = Trajectory::new(traj.meta.clone());
    let mut prev_t: Option<f64> = None;
    for s in traj.samples() {
        let mut ts = s.t * nf;
        // Scaling can collapse adjacent representable times; keep the path
        // strictly ordered.
        if let Some(p) = prev_t {
            if ts <= p {
                ts = next_up(p);
            }
        }
        prev_t = Some(ts);
        out.push(Sample {
            t: ts,
            measure: s.measure.scaled(inv),
            lambda: s.lambda * inv,
            mass: s.mass * inv,
            phi_mass: s.phi_mass * inv,
            phi2_moment: s.phi2_moment * inv,
        });
    }
    Ok(out)
}

/// Rescale an event log: times are multiplied by `n`; the participant masses
/// are unchanged (each jump moves weight `1/n` in the rescaled measure).
pub fn rescale_events(log: &EventLog, n: u64) -> Result<EventLog, SimError> {
    if n == 0 {
        return Err(SimError::InvalidInput("rescaling factor must be >= 1".into()));
    }
    let nf = n as f64;
    let mut out = EventLog::new();
    let mut prev_t: Option<f64> = None;
    for e in log.events() {
        let mut ts = e.t * nf;
        if let Some(p) = prev_t {
            if ts <= p {
                ts = next_up(p);
            }
        }
        prev_t = Some(ts);
        out.push(Event { t: ts, ..*e });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pair measures and generator consistency
// ---------------------------------------------------------------------------

/// Integral of `g` against the ordered-pair counting measure of `mu` at
/// population scale `n`:
///
/// `Σ_{s,s'} w_s w_{s'} g(x_s, x_{s'}) − n⁻¹ Σ_s w_s g(x_s, x_s)`.
///
/// At `n = 1` with an integer-valued measure this counts every ordered pair
/// of *distinct* particles exactly once. The scaling identity
/// `n² · pair_integral(μ, n, g) = pair_integral(n·μ, 1, g)` holds bitwise
/// when the weights and `n` are exactly representable powers-of-two scalings,
/// because every term and partial sum scales exactly.
pub fn pair_integral<G: Fn(f64, f64) -> f64>(mu: &DiscreteMeasure, n: f64, g: G) -> f64 {
    let atoms = mu.atoms();
    let mut cross = KahanSum::new();
    let mut diag = KahanSum::new();
    for &(x, w) in atoms {
        for &(y, v) in atoms {
            cross.add(w * v * g(x, y));
        }
        diag.add(w * g(x, x));
    }
    cross.value() - n.recip() * diag.value()
}

/// Exact expected drift of `⟨f, X⟩` for the jump chain started at the
/// integer-valued measure `mu`:
/// `½ ∫ {f(x+y) − f(x) − f(y)} K(x,y)` against the ordered-distinct-pair
/// counting measure.
pub fn generator_drift<F: Fn(f64) -> f64>(mu: &DiscreteMeasure, kernel: &Kernel, f: F) -> f64 {
    0.5 * pair_integral(mu, 1.0, |x, y| (f(x + y) - f(x) - f(y)) * kernel.eval(x, y))
}

/// Monte-Carlo drift check against [`generator_drift`].
#[derive(Debug, Clone)]
pub struct GeneratorCheck {
    pub exact_drift: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    /// `(mc_mean − exact) / mc_stderr`; defined as 0 when the replicas were
    /// all identical *and* matched the exact drift.
    pub z_score: f64,
    pub reps: u64,
    pub dt: f64,
}

/// Estimate `E[⟨f, X_Δt⟩ − ⟨f, X₀⟩]/Δt` over `reps` independent replicas and
/// compare with the exact expected drift at `X₀`. `dt` should be small
/// against the total jump rate (the estimator has O(dt) bias).
#[allow(clippy::too_many_arguments)]
pub fn generator_consistency<F: Fn(f64) -> f64>(
    masses: &[f64],
    kernel: &Kernel,
    f: F,
    reps: u64,
    dt: f64,
    seed: u64,
    opts: &SimOptions,
) -> Result<GeneratorCheck, SimError> {
    if reps < 2 {
        return Err(SimError::InvalidInput("need at least 2 replicas".into()));
    }
    if !dt.is_finite() || dt <= 0.0 {
        return Err(SimError::InvalidInput(format!("dt {dt} must be positive")));
    }
    let mu0 = make_measure(
        &masses.iter().map(|&m| (m, 1.0)).collect::<Vec<_>>(),
        opts.eps_mass,
    )?;
    let exact = generator_drift(&mu0, kernel, &f);
    let f0 = moment(&mu0, &f);

    let mut ys = Vec::with_capacity(reps as usize);
    for r in 0..reps {
        let rep_seed = keyed_u64(seed, [TAG_REPLICA, r, 0, 0]);
        let mut sys =
            ParticleSystem::new(masses, kernel, &Truncation::All, 0.0, rep_seed, opts.eps_mass)?;
        run_chain(&mut sys, kernel, dt, &[], opts)?;
        let ft = moment(&sys.to_measure()?, &f);
        ys.push((ft - f0) / dt);
    }
    let mut mean = KahanSum::new();
    for &y in &ys {
        mean.add(y);
    }
    let mean = mean.value() / reps as f64;
    let mut var = KahanSum::new();
    for &y in &ys {
        var.add((y - mean) * (y - mean));
    }
    let var = var.value() / (reps - 1) as f64;
    let stderr = (var / reps as f64).sqrt();
    let z_score = if stderr > 0.0 {
        (mean - exact) / stderr
    } else if (mean - exact).abs() <= 1e-12 * exact.abs().max(1.0) {
        0.0
    } else {
        f64::INFINITY * (mean - exact).signum()
    };
    Ok(GeneratorCheck { exact_drift: exact, mc_mean: mean, mc_stderr: stderr, z_score, reps, dt })
}

// ---------------------------------------------------------------------------
