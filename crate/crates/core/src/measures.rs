//! Finite atomic measures on `(0, ∞)`, sublinear weight functions, and the
//! metrics used throughout: total variation and a bounded-Lipschitz-style weak
//! distance built from a fixed dictionary of tent functions.
//!
//! A [`DiscreteMeasure`] is a sorted list of `(mass, weight)` atoms with a
//! quantization resolution `eps_mass`: atoms closer than `eps_mass` are merged
//! at construction (weights summed, mass at the weight-weighted mean), so the
//! atom list is canonical and rebuilding a measure from its own atoms is a
//! no-op. Integer-mass problems use `eps_mass = 0`, which keeps masses exact.
//!
//! A [`SublinearFn`] `φ` satisfies `φ(λx) ≤ λ·φ(x)` for `λ ≥ 1` (hence is
//! subadditive: `φ(x+y) ≤ φ(x) + φ(y)`). These serve as dominating envelopes
//! for kernels (`K(x,y) ≤ φ(x)φ(y)`) and as the weight in the conservation
//! functional `⟨φ,μ⟩ + λ`. [`truncate_sublinear`] builds the compactly
//! supported cutoff used to probe mass escaping a truncation window.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from measure construction, metric evaluation, and shape checks.
#[derive(Debug, Error)]
pub enum MeasureError {
    /// An input atom had a non-finite or non-positive mass, or a non-finite or
    /// negative weight.
    #[error("invalid atom #{index}: mass {mass}, weight {weight} (need finite mass > 0, finite weight >= 0)")]
    InvalidAtom { index: usize, mass: f64, weight: f64 },
    /// The quantization resolution was negative or non-finite.
    #[error("invalid mass resolution {0} (need finite value >= 0)")]
    InvalidResolution(f64),
    /// Two measures with different quantization resolutions were compared.
    #[error("mass resolutions differ: {0} vs {1}")]
    ResolutionMismatch(f64, f64),
    /// A sublinear-function descriptor carries invalid parameters.
    #[error("invalid sublinear function: {0}")]
    InvalidSublinear(String),
    /// A random spot check caught a sublinearity/subadditivity violation.
    #[error("shape violation: {0}")]
    ShapeViolation(String),
    /// A weak-metric dictionary was requested with unusable parameters.
    #[error("invalid metric dictionary: {0}")]
    InvalidDictionary(String),
    /// Serialized measure data could not be parsed.
    #[error("measure parse error: {0}")]
    Parse(String),
}

/// Compensated (Kahan) accumulator; used wherever many small weights are
/// summed so that cancellation does not pollute conservation diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Sum an iterator of `f64` with compensation.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = KahanSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// A finite non-negative atomic measure on `(0, ∞)`.
///
/// Atoms are kept sorted by mass and pairwise separated by more than
/// `eps_mass`; construction enforces this by merging clusters. Weights may be
/// zero (an atom can decay to nothing without losing its site).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<(f64, f64)>,
    eps_mass: f64,
}

/// Build a measure from raw `(mass, weight)` pairs, merging atoms closer than
/// `eps_mass` (weights summed, mass at the weight-weighted mean).
///
/// Rebuilding from a measure's own atom list reproduces it exactly: merged
/// atoms are separated by more than `eps_mass`, so the sweep finds nothing
/// left to merge.
pub fn make_measure(atoms: &[(f64, f64)], eps_mass: f64) -> Result<DiscreteMeasure, MeasureError> {
    DiscreteMeasure::new(atoms, eps_mass)
}

impl DiscreteMeasure {
    /// See [`make_measure`].
    pub fn new(atoms: &[(f64, f64)], eps_mass: f64) -> Result<Self, MeasureError> {
        if !eps_mass.is_finite() || eps_mass < 0.0 {
            return Err(MeasureError::InvalidResolution(eps_mass));
        }
        for (index, &(mass, weight)) in atoms.iter().enumerate() {
            if !mass.is_finite() || mass <= 0.0 || !weight.is_finite() || weight < 0.0 {
                return Err(MeasureError::InvalidAtom { index, mass, weight });
            }
        }
        let mut sorted: Vec<(f64, f64)> = atoms.to_vec();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

        // Left-to-right cluster sweep. A new atom joins the current cluster
        // when it sits within eps_mass of the cluster's running mean; the mean
        // of the next cluster starts at least at its first member, which lies
        // strictly beyond eps_mass of the previous mean, so emitted atoms are
        // separated by more than eps_mass.
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
        let mut cluster: Vec<(f64, f64)> = Vec::new();
        let flush = |cluster: &mut Vec<(f64, f64)>, merged: &mut Vec<(f64, f64)>| {
            if cluster.is_empty() {
                return;
            }
            if cluster.len() == 1 {
                merged.push(cluster[0]);
            } else {
                let w = kahan_sum(cluster.iter().map(|&(_, w)| w));
                let mass = if w > 0.0 {
                    kahan_sum(cluster.iter().map(|&(m, w)| m * w)) / w
                } else {
                    // All-zero weights: fall back to the plain average so the
                    // site stays inside the cluster's span.
                    kahan_sum(cluster.iter().map(|&(m, _)| m)) / cluster.len() as f64
                };
                merged.push((mass, w));
            }
            cluster.clear();
        };
        for &(mass, weight) in &sorted {
            let joins = match cluster.last() {
                Some(_) => {
                    let w = kahan_sum(cluster.iter().map(|&(_, w)| w));
                    let mean = if w > 0.0 {
                        kahan_sum(cluster.iter().map(|&(m, w)| m * w)) / w
                    } else {
                        kahan_sum(cluster.iter().map(|&(m, _)| m)) / cluster.len() as f64
                    };
                    mass - mean <= eps_mass
                }
                None => true,
            };
            if joins {
                cluster.push((mass, weight));
            } else {
                flush(&mut cluster, &mut merged);
                cluster.push((mass, weight));
            }
        }
        flush(&mut cluster, &mut merged);
        Ok(Self { atoms: merged, eps_mass })
    }

    /// The empty measure.
    pub fn empty(eps_mass: f64) -> Self {
        Self { atoms: Vec::new(), eps_mass }
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn eps_mass(&self) -> f64 {
        self.eps_mass
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Total weight `⟨1, μ⟩`.
    pub fn norm(&self) -> f64 {
        kahan_sum(self.atoms.iter().map(|&(_, w)| w))
    }

    /// Weight carried at `mass` (sites match within `eps_mass`; exact at 0).
    pub fn weight_at(&self, mass: f64) -> f64 {
        match self.find_site(mass) {
            Some(i) => self.atoms[i].1,
            None => 0.0,
        }
    }

    /// Index of the atom whose site matches `mass` within `eps_mass`.
    pub fn find_site(&self, mass: f64) -> Option<usize> {
        let i = self.atoms.partition_point(|&(m, _)| m < mass);
        for j in [i.wrapping_sub(1), i] {
            if let Some(&(m, _)) = self.atoms.get(j) {
                if (m - mass).abs() <= self.eps_mass {
                    return Some(j);
                }
            }
        }
        None
    }

    /// Total weight on the interval `(lo, hi]`.
    pub fn interval_weight(&self, lo: f64, hi: f64) -> f64 {
        kahan_sum(
            self.atoms
                .iter()
                .filter(|&&(m, _)| m > lo && m <= hi)
                .map(|&(_, w)| w),
        )
    }

    /// The measure `φ·μ` (each atom's weight multiplied by `φ(mass)`).
    pub fn weighted_by(&self, phi: &SublinearFn) -> Self {
        Self {
            atoms: self.atoms.iter().map(|&(m, w)| (m, w * phi.eval(m))).collect(),
            eps_mass: self.eps_mass,
        }
    }

    /// The measure with all weights multiplied by `c ≥ 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            atoms: self.atoms.iter().map(|&(m, w)| (m, w * c)).collect(),
            eps_mass: self.eps_mass,
        }
    }

    /// Serialize as a two-column CSV (`mass,weight` header).
    ///
    /// Floats are written in shortest round-trip form, so parsing the output
    /// recovers the exact bit patterns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mass,weight\n");
        for &(m, w) in &self.atoms {
            let _ = writeln!(out, "{},{}", m, w);
        }
        out
    }

    /// Parse the CSV form produced by [`DiscreteMeasure::to_csv`].
    pub fn from_csv(text: &str, eps_mass: f64) -> Result<Self, MeasureError> {
        let mut atoms = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 {
                if line.trim() != "mass,weight" {
                    return Err(MeasureError::Parse(format!(
                        "expected header 'mass,weight', got '{line}'"
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let (m, w) = match (fields.next(), fields.next(), fields.next()) {
                (Some(m), Some(w), None) => (m, w),
                _ => {
                    return Err(MeasureError::Parse(format!(
                        "line {}: expected two fields, got '{line}'",
                        lineno + 1
                    )))
                }
            };
            let parse = |s: &str| -> Result<f64, MeasureError> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| MeasureError::Parse(format!("line {}: {e}", lineno + 1)))
            };
            atoms.push((parse(m)?, parse(w)?));
        }
        Self::new(&atoms, eps_mass)
    }

    /// Serialize as a JSON object `{"epsilon_mass": ..., "atoms": [[m, w], ...]}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&MeasureJson {
            epsilon_mass: self.eps_mass,
            atoms: self.atoms.clone(),
        })
        .expect("measure serialization cannot fail")
    }

    /// Parse the JSON form produced by [`DiscreteMeasure::to_json`].
    pub fn from_json(text: &str) -> Result<Self, MeasureError> {
        let raw: MeasureJson =
            serde_json::from_str(text).map_err(|e| MeasureError::Parse(e.to_string()))?;
        Self::new(&raw.atoms, raw.epsilon_mass)
    }
}

#[derive(Serialize, Deserialize)]
struct MeasureJson {
    epsilon_mass: f64,
    atoms: Vec<(f64, f64)>,
}

/// Integral `⟨f, μ⟩ = Σ f(x_i)·w_i` with compensated summation.
///
/// `f` must be finite on every atom site; non-finite values propagate into the
/// result rather than being masked.
pub fn moment<F: Fn(f64) -> f64>(mu: &DiscreteMeasure, f: F) -> f64 {
    kahan_sum(mu.atoms.iter().map(|&(m, w)| f(m) * w))
}

/// Total-variation distance: sum of `|μ{x} − ν{x}|` over the union of atom
/// sites, sites matched within the (shared) `eps_mass`.
pub fn total_variation(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64, MeasureError> {
    if mu.eps_mass != nu.eps_mass {
        return Err(MeasureError::ResolutionMismatch(mu.eps_mass, nu.eps_mass));
    }
    let eps = mu.eps_mass;
    let (a, b) = (&mu.atoms, &nu.atoms);
    let mut acc = KahanSum::new();
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() || j < b.len() {
        match (a.get(i), b.get(j)) {
            (Some(&(ma, wa)), Some(&(mb, wb))) => {
                if (ma - mb).abs() <= eps {
                    acc.add((wa - wb).abs());
                    i += 1;
                    j += 1;
                } else if ma < mb {
                    acc.add(wa.abs());
                    i += 1;
                } else {
                    acc.add(wb.abs());
                    j += 1;
                }
            }
            (Some(&(_, wa)), None) => {
                acc.add(wa.abs());
                i += 1;
            }
            (None, Some(&(_, wb))) => {
                acc.add(wb.abs());
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    Ok(acc.value())
}

// ---------------------------------------------------------------------------
// Sublinear weight functions
// ---------------------------------------------------------------------------

/// A non-negative weight function `φ` on `(0, ∞)` satisfying
/// `φ(λx) ≤ λ·φ(x)` for all `λ ≥ 1` (and hence `φ(x+y) ≤ φ(x) + φ(y)`).
///
/// Dominating envelopes for kernels must additionally be strictly positive;
/// [`truncate_sublinear`] produces functions that vanish beyond their window,
/// which is why the type itself only guarantees non-negativity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SublinearFn {
    /// `φ(x) = x`.
    Identity,
    /// `φ(x) = c` with `c > 0`.
    Constant { c: f64 },
    /// `φ(x) = x^alpha` with `alpha ≤ 1` (negative exponents allowed).
    Power { alpha: f64 },
    /// `φ(x) = max(x, c)` with `c > 0`.
    MaxConst { c: f64 },
    /// `φ(x) = 2(x^{1/3} + x^{−1/3})`, the standard envelope for the
    /// Brownian-coagulation kernel.
    BrownianDominator,
    /// Compact cutoff of `base` to the window `(0, n]`:
    /// `n·x·base(1/n)` on `(0, 1/n]`, `base(x)` on `(1/n, n]`, `0` beyond `n`.
    Truncated { base: Box<SublinearFn>, n: u32 },
    /// Piecewise-linear interpolation through `(x, value)` nodes (linear from
    /// the origin below the first node, constant beyond the last). Shape is
    /// spot-checked at registration rather than guaranteed by construction.
    Table { nodes: Vec<(f64, f64)> },
}

impl SublinearFn {
    /// Evaluate at `x > 0`.
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            SublinearFn::Identity => x,
            SublinearFn::Constant { c } => *c,
            SublinearFn::Power { alpha } => x.powf(*alpha),
            SublinearFn::MaxConst { c } => x.max(*c),
            SublinearFn::BrownianDominator => {
                let r = x.cbrt();
                2.0 * (r + 1.0 / r)
            }
            SublinearFn::Truncated { base, n } => {
                let n = f64::from(*n);
                if x <= 1.0 / n {
                    n * x * base.eval(1.0 / n)
                } else if x <= n {
                    base.eval(x)
                } else {
                    0.0
                }
            }
            SublinearFn::Table { nodes } => {
                if nodes.is_empty() {
                    return 0.0;
                }
                let (x0, y0) = nodes[0];
                if x <= x0 {
                    return y0 * x / x0;
                }
                for pair in nodes.windows(2) {
                    let ((xa, ya), (xb, yb)) = (pair[0], pair[1]);
                    if x <= xb {
                        return ya + (yb - ya) * (x - xa) / (xb - xa);
                    }
                }
                nodes[nodes.len() - 1].1
            }
        }
    }

    /// Validate descriptor parameters (positivity, exponent range, table
    /// ordering). Does not prove sublinearity of tables; see [`check_shape`].
    pub fn validate(&self) -> Result<(), MeasureError> {
        match self {
            SublinearFn::Identity | SublinearFn::BrownianDominator => Ok(()),
            SublinearFn::Constant { c } | SublinearFn::MaxConst { c } => {
                if c.is_finite() && *c > 0.0 {
                    Ok(())
                } else {
                    Err(MeasureError::InvalidSublinear(format!(
                        "constant {c} must be finite and positive"
                    )))
                }
            }
            SublinearFn::Power { alpha } => {
                if alpha.is_finite() && *alpha <= 1.0 {
                    Ok(())
                } else {
                    Err(MeasureError::InvalidSublinear(format!(
                        "exponent {alpha} must be finite and <= 1"
                    )))
                }
            }
            SublinearFn::Truncated { base, n } => {
                if *n == 0 {
                    return Err(MeasureError::InvalidSublinear(
                        "truncation index must be >= 1".into(),
                    ));
                }
                base.validate()
            }
            SublinearFn::Table { nodes } => {
                if nodes.is_empty() {
                    return Err(MeasureError::InvalidSublinear("empty table".into()));
                }
                for pair in nodes.windows(2) {
                    if pair[1].0 <= pair[0].0 {
                        return Err(MeasureError::InvalidSublinear(
                            "table nodes must have strictly increasing x".into(),
                        ));
                    }
                }
                if nodes.iter().any(|&(x, y)| {
                    !x.is_finite() || x <= 0.0 || !y.is_finite() || y < 0.0
                }) {
                    return Err(MeasureError::InvalidSublinear(
                        "table nodes must have finite positive x and finite non-negative values"
                            .into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Compact cutoff of `phi` to the window `(0, n]` (see
/// [`SublinearFn::Truncated`] for the three branches). Fails for `n = 0`.
pub fn truncate_sublinear(phi: &SublinearFn, n: u32) -> Result<SublinearFn, MeasureError> {
    if n == 0 {
        return Err(MeasureError::InvalidSublinear(
            "truncation index must be >= 1".into(),
        ));
    }
    Ok(SublinearFn::Truncated { base: Box::new(phi.clone()), n })
}

/// Spot-check sublinearity (`f(λx) ≤ λ·f(x)`, `λ ≥ 1`) and subadditivity
/// (`f(x+y) ≤ f(x) + f(y)`) on `samples` random points log-uniform in
/// `[range.0, range.1]`, with relative slack `1 + 1e−12` for rounding.
pub fn check_shape(
    f: &SublinearFn,
    samples: usize,
    range: (f64, f64),
    seed: u64,
) -> Result<(), MeasureError> {
    let (lo, hi) = range;
    if !(lo > 0.0) || !(hi > lo) {
        return Err(MeasureError::InvalidSublinear(format!(
            "bad check range [{lo}, {hi}]"
        )));
    }
    const SLACK: f64 = 1.0 + 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (llo, lhi) = (lo.ln(), hi.ln());
    let draw = |rng: &mut ChaCha8Rng| (llo + (lhi - llo) * rng.gen::<f64>()).exp();
    for _ in 0..samples {
        let x = draw(&mut rng);
        let lam = 1.0 + 9.0 * rng.gen::<f64>();
        let (fx, flx) = (f.eval(x), f.eval(lam * x));
        if !(flx <= lam * fx * SLACK + 1e-300) {
            return Err(MeasureError::ShapeViolation(format!(
                "f({lam}*{x}) = {flx} > {lam}*f({x}) = {}",
                lam * fx
            )));
        }
        let y = draw(&mut rng);
        let (fy, fxy) = (f.eval(y), f.eval(x + y));
        if !(fxy <= (fx + fy) * SLACK + 1e-300) {
            return Err(MeasureError::ShapeViolation(format!(
                "f({x}+{y}) = {fxy} > f({x})+f({y}) = {}",
                fx + fy
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Weak distance
// ---------------------------------------------------------------------------

/// A fixed dictionary of tent functions `g_1, g_2, …` on `(0, x_max]` defining
/// the weak distance
/// `d₀(μ, ν) = Σ_k 2^{−k} · min(1, |⟨g_k, μ⟩ − ⟨g_k, ν⟩|)`.
///
/// Level `ℓ = 0, …, levels−1` splits `(0, x_max]` into `2^ℓ` cells; each cell
/// carries one tent peaking at its center with height `min(1, half_width)`,
/// so every `g_k` has `sup |g_k| ≤ 1` and Lipschitz constant ≤ 1. The
/// enumeration runs coarse-to-fine, left-to-right. Consequences used by the
/// tests: `d₀ ≤ TV` (each term is at most the TV difference, capped at 1 and
/// geometrically weighted), and `d₀(δ_x, δ_y) → 0` linearly in `|x − y|`.
#[derive(Debug, Clone)]
pub struct WeakMetricDict {
    x_max: f64,
    levels: u32,
    tents: Vec<Tent>,
}

#[derive(Debug, Clone, Copy)]
struct Tent {
    lo: f64,
    mid: f64,
    hi: f64,
    height: f64,
}

impl Tent {
    fn eval(&self, x: f64) -> f64 {
        if x <= self.lo || x >= self.hi {
            0.0
        } else {
            let half = self.mid - self.lo;
            self.height * (1.0 - (x - self.mid).abs() / half)
        }
    }
}

impl WeakMetricDict {
    /// Build the dictionary over `(0, x_max]` with the given number of dyadic
    /// refinement levels (`1 ≤ levels ≤ 16`).
    pub fn new(x_max: f64, levels: u32) -> Result<Self, MeasureError> {
        if !x_max.is_finite() || x_max <= 0.0 {
            return Err(MeasureError::InvalidDictionary(format!(
                "x_max {x_max} must be finite and positive"
            )));
        }
        if levels == 0 || levels > 16 {
            return Err(MeasureError::InvalidDictionary(format!(
                "levels {levels} out of range 1..=16"
            )));
        }
        let mut tents = Vec::with_capacity((1usize << levels) - 1);
        for level in 0..levels {
            let cells = 1u64 << level;
            let width = x_max / cells as f64;
            let height = (width / 2.0).min(1.0);
            for j in 0..cells {
                let lo = j as f64 * width;
                tents.push(Tent { lo, mid: lo + width / 2.0, hi: lo + width, height });
            }
        }
        Ok(Self { x_max, levels, tents })
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    /// Number of dictionary functions.
    pub fn len(&self) -> usize {
        self.tents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tents.is_empty()
    }

    /// `⟨g_k, μ⟩` for the `k`-th dictionary function (0-based index).
    pub fn pair(&self, k: usize, mu: &DiscreteMeasure) -> f64 {
        let tent = &self.tents[k];
        kahan_sum(mu.atoms().iter().map(|&(m, w)| tent.eval(m) * w))
    }
}

/// Weak distance `d₀(μ, ν)` under the dictionary `dict` (see
/// [`WeakMetricDict`]). Symmetric, bounded by 1, and never exceeds the
/// total-variation distance.
pub fn weak_distance_d0(mu: &DiscreteMeasure, nu: &DiscreteMeasure, dict: &WeakMetricDict) -> f64 {
    let mut total = 0.0;
    let mut weight = 1.0;
    for k in 0..dict.len() {
        weight *= 0.5; // 2^{-(k+1)}
        if weight == 0.0 {
            break;
        }
        let diff = (dict.pair(k, mu) - dict.pair(k, nu)).abs();
        total += weight * diff.min(1.0);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn delta(mass: f64) -> DiscreteMeasure {
        make_measure(&[(mass, 1.0)], 0.0).unwrap()
    }

    #[test]
    fn duplicate_sites_merge_exactly_at_zero_resolution() {
        let mu = make_measure(&[(1.0, 2.0), (1.0, 3.0)], 0.0).unwrap();
        assert_eq!(mu.atoms(), &[(1.0, 5.0)]);
    }

    #[test]
    fn nearby_sites_merge_at_weighted_mean() {
        let mu = make_measure(&[(1.0, 1.0), (1.0 + 5e-10, 3.0)], 1e-9).unwrap();
        assert_eq!(mu.len(), 1);
        let (m, w) = mu.atoms()[0];
        assert_eq!(w, 4.0);
        let expect = (1.0 + 3.0 * (1.0 + 5e-10)) / 4.0;
        assert!((m - expect).abs() < 1e-15, "merged site {m} vs {expect}");
    }

    #[test]
    fn distant_sites_stay_separate() {
        let mu = make_measure(&[(1.0, 1.0), (2.0, 1.0)], 1e-9).unwrap();
        assert_eq!(mu.len(), 2);
    }

    #[test]
    fn invalid_atoms_are_rejected() {
        assert!(make_measure(&[(0.0, 1.0)], 0.0).is_err());
        assert!(make_measure(&[(-1.0, 1.0)], 0.0).is_err());
        assert!(make_measure(&[(1.0, -0.5)], 0.0).is_err());
        assert!(make_measure(&[(f64::NAN, 1.0)], 0.0).is_err());
        assert!(make_measure(&[(1.0, f64::INFINITY)], 0.0).is_err());
        assert!(make_measure(&[(1.0, 1.0)], -1e-9).is_err());
    }

    #[test]
    fn zero_weight_atoms_are_kept() {
        let mu = make_measure(&[(1.0, 0.0), (2.0, 1.0)], 0.0).unwrap();
        assert_eq!(mu.len(), 2);
        assert_eq!(mu.weight_at(1.0), 0.0);
    }

    #[test]
    fn moment_of_empty_measure_is_zero() {
        let mu = DiscreteMeasure::empty(0.0);
        assert_eq!(moment(&mu, |x| x), 0.0);
    }

    #[test]
    fn first_moment_of_dyadic_ladder_matches_closed_form() {
        // Σ_{k=1..20} k·2^{-k} = 2 − 22·2^{-20}, summed with compensation.
        let atoms: Vec<(f64, f64)> =
            (1..=20).map(|k| (k as f64, (0.5f64).powi(k))).collect();
        let mu = make_measure(&atoms, 0.0).unwrap();
        let expect = 2.0 - 22.0 * (0.5f64).powi(20);
        let got = moment(&mu, |x| x);
        assert!(
            (got - expect).abs() <= 1e-15 * expect,
            "moment {got} vs closed form {expect}"
        );
    }

    #[test]
    fn total_variation_of_separated_deltas_adds_weights() {
        let d = total_variation(&delta(2.0), &delta(3.0)).unwrap();
        assert_eq!(d, 2.0);
    }

    #[test]
    fn total_variation_requires_matching_resolution() {
        let a = make_measure(&[(1.0, 1.0)], 0.0).unwrap();
        let b = make_measure(&[(1.0, 1.0)], 1e-9).unwrap();
        assert!(matches!(
            total_variation(&a, &b),
            Err(MeasureError::ResolutionMismatch(_, _))
        ));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mu = make_measure(
            &[(1.0, 0.1), (2.5e-7, 3.333333333333333e-1), (7.25, 1.0 / 3.0)],
            0.0,
        )
        .unwrap();
        let back = DiscreteMeasure::from_csv(&mu.to_csv(), 0.0).unwrap();
        assert_eq!(mu, back);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mu = make_measure(&[(0.1 + 0.2, 1.0e-17), (5e-324_f64.max(1e-300), 2.0)], 0.0).unwrap();
        let back = DiscreteMeasure::from_json(&mu.to_json()).unwrap();
        assert_eq!(mu, back);
    }

    #[test]
    fn truncated_constant_envelope_has_three_branches() {
        let phi = SublinearFn::Constant { c: 1.0 };
        let cut = truncate_sublinear(&phi, 2).unwrap();
        assert_eq!(cut.eval(0.25), 0.5);
        assert_eq!(cut.eval(1.0), 1.0);
        assert_eq!(cut.eval(3.0), 0.0);
    }

    #[test]
    fn truncated_identity_is_identity_inside_the_window() {
        let cut = truncate_sublinear(&SublinearFn::Identity, 10).unwrap();
        assert!((cut.eval(0.05) - 0.05).abs() < 1e-15);
        assert_eq!(cut.eval(5.0), 5.0);
        assert_eq!(cut.eval(10.5), 0.0);
    }

    #[test]
    fn truncation_index_zero_is_rejected() {
        assert!(truncate_sublinear(&SublinearFn::Identity, 0).is_err());
    }

    #[test]
    fn builtin_envelopes_pass_shape_spot_checks() {
        let candidates = [
            SublinearFn::Identity,
            SublinearFn::Constant { c: 2.0 },
            SublinearFn::Power { alpha: 1.0 / 3.0 },
            SublinearFn::Power { alpha: -1.0 / 3.0 },
            SublinearFn::MaxConst { c: 2.0 },
            SublinearFn::BrownianDominator,
            truncate_sublinear(&SublinearFn::Constant { c: 1.0 }, 8).unwrap(),
            truncate_sublinear(&SublinearFn::Identity, 8).unwrap(),
        ];
        for f in &candidates {
            f.validate().unwrap();
            check_shape(f, 10_000, (1e-4, 1e4), 7).unwrap_or_else(|e| {
                panic!("{f:?}: {e}");
            });
        }
    }

    #[test]
    fn superlinear_table_fails_the_shape_check() {
        // value 4 at x=2 vs value 1 at x=1 is steeper than linear scaling.
        let f = SublinearFn::Table { nodes: vec![(1.0, 1.0), (2.0, 4.0)] };
        f.validate().unwrap();
        assert!(check_shape(&f, 10_000, (0.5, 4.0), 1).is_err());
    }

    #[test]
    fn dictionary_tents_are_bounded_and_lipschitz() {
        let dict = WeakMetricDict::new(32.0, 6).unwrap();
        assert_eq!(dict.len(), 63);
        for tent in &dict.tents {
            assert!(tent.height <= 1.0);
            let half = tent.mid - tent.lo;
            assert!(tent.height / half <= 1.0 + 1e-12, "Lipschitz constant > 1");
        }
    }

    #[test]
    fn weak_distance_is_zero_on_equal_measures_and_bounded_by_one() {
        let dict = WeakMetricDict::new(32.0, 6).unwrap();
        let mu = make_measure(&[(1.0, 3.0), (9.5, 2.0)], 0.0).unwrap();
        assert_eq!(weak_distance_d0(&mu, &mu, &dict), 0.0);
        let heavy = make_measure(&[(3.0, 1e9)], 0.0).unwrap();
        assert!(weak_distance_d0(&heavy, &DiscreteMeasure::empty(0.0), &dict) <= 1.0);
    }

    #[test]
    fn weak_distance_between_nearby_deltas_shrinks_linearly() {
        let dict = WeakMetricDict::new(32.0, 6).unwrap();
        let x = 7.3;
        let mut ratios = Vec::new();
        for h in [1e-2, 1e-3, 1e-4, 1e-5] {
            let d = weak_distance_d0(&delta(x), &delta(x + h), &dict);
            assert!(d <= h * (1.0 + 1e-12), "slope above the Lipschitz bound");
            assert!(d > 0.0);
            ratios.push(d / h);
        }
        // The ratio d0/h converges to the local dictionary slope: the two
        // finest-h ratios agree to well under a percent.
        let (a, b) = (ratios[2], ratios[3]);
        assert!((a - b).abs() <= 0.01 * b, "ratios {a} vs {b} not converged");
    }

    fn small_measure_strategy() -> impl Strategy<Value = DiscreteMeasure> {
        proptest::collection::vec(
            (
                // Masses over several decades; positive and finite.
                (1u32..4000).prop_map(|q| q as f64 / 128.0),
                (0u32..1000).prop_map(|q| q as f64 / 100.0),
            ),
            0..12,
        )
        .prop_map(|atoms| make_measure(&atoms, 0.0).unwrap())
    }

    proptest! {
        #[test]
        fn rebuilding_from_own_atoms_is_identity(mu in small_measure_strategy()) {
            let rebuilt = make_measure(mu.atoms(), mu.eps_mass()).unwrap();
            prop_assert_eq!(&mu, &rebuilt);
        }

        #[test]
        fn rebuilding_with_positive_resolution_is_idempotent(
            atoms in proptest::collection::vec(
                ((1u32..2000).prop_map(|q| q as f64 / 64.0),
                 (0u32..100).prop_map(|q| q as f64 / 10.0)),
                0..12,
            )
        ) {
            let mu = make_measure(&atoms, 1e-3).unwrap();
            let rebuilt = make_measure(mu.atoms(), 1e-3).unwrap();
            prop_assert_eq!(&mu, &rebuilt);
        }

        #[test]
        fn serialization_round_trips_bit_exactly(mu in small_measure_strategy()) {
            prop_assert_eq!(&mu, &DiscreteMeasure::from_csv(&mu.to_csv(), 0.0).unwrap());
            prop_assert_eq!(&mu, &DiscreteMeasure::from_json(&mu.to_json()).unwrap());
        }

        #[test]
        fn total_variation_is_a_metric(
            a in small_measure_strategy(),
            b in small_measure_strategy(),
            c in small_measure_strategy(),
        ) {
            let dab = total_variation(&a, &b).unwrap();
            let dba = total_variation(&b, &a).unwrap();
            prop_assert_eq!(dab, dba);
            prop_assert_eq!(total_variation(&a, &a).unwrap(), 0.0);
            let dac = total_variation(&a, &c).unwrap();
            let dcb = total_variation(&c, &b).unwrap();
            prop_assert!(dab <= dac + dcb + 1e-12);
        }

        #[test]
        fn weak_distance_never_exceeds_total_variation(
            a in small_measure_strategy(),
            b in small_measure_strategy(),
        ) {
            let dict = WeakMetricDict::new(40.0, 5).unwrap();
            let d0 = weak_distance_d0(&a, &b, &dict);
            let tv = total_variation(&a, &b).unwrap();
            prop_assert!(d0 <= tv + 1e-12, "d0 {} > tv {}", d0, tv);
        }
    }
}
