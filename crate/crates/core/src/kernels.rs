//! Coagulation kernels: symmetric rate functions `K(x, y)` giving the merge
//! rate of particle masses `x` and `y`, each registered together with a
//! dominating envelope — a strictly positive [`SublinearFn`] `φ` and a margin
//! `m ≥ 1` such that `K(x, y) ≤ m·φ(x)·φ(y)`.
//!
//! The envelope is what every consumer leans on: the deterministic solver uses
//! `⟨φ,μ⟩ + λ` as its conservation functional, and the stochastic engine
//! proposes merge candidates from the product majorant `m·φ(x_i)φ(x_j)` and
//! thins them by the true rate. [`verify_domination`] spot-checks the declared
//! envelope; the simulation engine still treats any acceptance ratio above 1
//! as a hard error, so an under-declared envelope cannot silently bias
//! results.
//!
//! Built-in forms and their canonical envelopes:
//!
//! | form                | `K(x, y)`                                   | `φ(x)`                  |
//! |---------------------|---------------------------------------------|-------------------------|
//! | `constant(c)`       | `c`                                         | `√c`                    |
//! | `additive`          | `x + y`                                     | `max(x, 2)`             |
//! | `multiplicative`    | `x·y`                                       | `x`                     |
//! | `brownian`          | `(x^{1/3}+y^{1/3})(x^{−1/3}+y^{−1/3})`      | `2(x^{1/3}+x^{−1/3})`   |
//! | `index_chain(b, T)` | `b^n` for adjacent classes `{n, n+1}` of `T`| `√(b^{N−1})` (constant) |
//!
//! All built-ins satisfy their envelope with margin 1. The index-chain kernel
//! has no sublinear envelope on an *infinite* class ladder (rates grow much
//! faster than any product of sublinear functions — that failure mode is
//! exactly what the non-uniqueness experiments exploit), but on a finite
//! registered table it is bounded, so a constant envelope is valid.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::SublinearFn;

/// Errors from kernel construction and evaluation.
#[derive(Debug, Error)]
pub enum KernelError {
    #[error("invalid kernel parameter: {0}")]
    InvalidParameter(String),
    #[error("kernel evaluated at non-positive mass ({x}, {y})")]
    NonPositiveMass { x: f64, y: f64 },
    #[error("declared envelope is not strictly positive at {x} (phi = {phi})")]
    EnvelopeNotPositive { x: f64, phi: f64 },
    #[error("domination violated at ({x}, {y}): K/(margin*phi*phi) = {ratio}")]
    DominationViolated { x: f64, y: f64, ratio: f64 },
}

/// The rate function itself, without its envelope.
#[derive(Clone)]
pub enum KernelForm {
    /// `K(x, y) = c`.
    Constant { c: f64 },
    /// `K(x, y) = x + y`.
    Additive,
    /// `K(x, y) = x·y`.
    Multiplicative,
    /// `K(x, y) = (x^{1/3} + y^{1/3})(x^{−1/3} + y^{−1/3})`.
    Brownian,
    /// Nearest-neighbour ladder: masses are mapped to classes `1..=N` by exact
    /// match against `classes`; `K = lambda_base^n` when the two classes are
    /// `{n, n+1}`, and `0` otherwise (same class, distant classes, off-table).
    IndexChain { lambda_base: f64, classes: Vec<f64> },
    /// User-supplied symmetric rate.
    Custom { name: String, eval: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync> },
}

impl fmt::Debug for KernelForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelForm::Constant { c } => write!(f, "Constant {{ c: {c} }}"),
            KernelForm::Additive => write!(f, "Additive"),
            KernelForm::Multiplicative => write!(f, "Multiplicative"),
            KernelForm::Brownian => write!(f, "Brownian"),
            KernelForm::IndexChain { lambda_base, classes } => write!(
                f,
                "IndexChain {{ lambda_base: {lambda_base}, classes: {} entries }}",
                classes.len()
            ),
            KernelForm::Custom { name, .. } => write!(f, "Custom {{ name: {name:?} }}"),
        }
    }
}

/// A kernel bundled with its declared dominating envelope.
#[derive(Debug, Clone)]
pub struct Kernel {
    form: KernelForm,
    phi: SublinearFn,
    margin: f64,
    /// Sorted `(mass, class)` index for `IndexChain`; empty otherwise.
    class_index: Vec<(f64, usize)>,
}

impl Kernel {
    /// Constant kernel `K ≡ c`, envelope `φ = √c`.
    pub fn constant(c: f64) -> Result<Self, KernelError> {
        if !c.is_finite() || c <= 0.0 {
            return Err(KernelError::InvalidParameter(format!(
                "constant rate {c} must be finite and positive"
            )));
        }
        Ok(Self::assemble(
            KernelForm::Constant { c },
            SublinearFn::Constant { c: c.sqrt() },
            1.0,
        ))
    }

    /// Sum kernel `K = x + y`, envelope `φ = max(x, 2)`.
    ///
    /// Domination with margin 1: if both masses are ≤ 2 then `x+y ≤ 4 = φφ`;
    /// if `x ≤ 2 < y` then `x+y ≤ 2+y ≤ 2y = φφ`; if both exceed 2 then
    /// `1/x + 1/y ≤ 1` gives `x+y ≤ xy = φφ`.
    pub fn additive() -> Self {
        Self::assemble(KernelForm::Additive, SublinearFn::MaxConst { c: 2.0 }, 1.0)
    }

    /// Product kernel `K = x·y`, envelope `φ = x`.
    pub fn multiplicative() -> Self {
        Self::assemble(KernelForm::Multiplicative, SublinearFn::Identity, 1.0)
    }

    /// Brownian-coagulation kernel, envelope `2(x^{1/3} + x^{−1/3})`.
    ///
    /// With `a = x^{1/3}`, `b = y^{1/3}`: `K = 2 + a/b + b/a` while
    /// `φφ/4 = ab + a/b + b/a + 1/(ab) ≥ 2 + a/b + b/a` since `t + 1/t ≥ 2`;
    /// the ratio `K/(φφ)` peaks at exactly `1/4` along `xy = 1`.
    pub fn brownian() -> Self {
        Self::assemble(KernelForm::Brownian, SublinearFn::BrownianDominator, 1.0)
    }

    /// Nearest-neighbour ladder kernel over a finite class table.
    ///
    /// `classes[i]` is the mass of class `i+1`; adjacent classes `{n, n+1}`
    /// interact at rate `lambda_base^n`, everything else at 0. The envelope is
    /// the constant `√(lambda_base^{N−1})`, the square root of the largest
    /// rate on the table.
    pub fn index_chain(lambda_base: f64, classes: Vec<f64>) -> Result<Self, KernelError> {
        if !lambda_base.is_finite() || lambda_base <= 0.0 {
            return Err(KernelError::InvalidParameter(format!(
                "lambda_base {lambda_base} must be finite and positive"
            )));
        }
        if classes.is_empty() {
            return Err(KernelError::InvalidParameter("empty class table".into()));
        }
        if classes.iter().any(|&x| !x.is_finite() || x <= 0.0) {
            return Err(KernelError::InvalidParameter(
                "class masses must be finite and positive".into(),
            ));
        }
        let top_rate = lambda_base.powi(classes.len().saturating_sub(1) as i32);
        if !top_rate.is_finite() {
            return Err(KernelError::InvalidParameter(format!(
                "top rate lambda_base^{} overflows",
                classes.len() - 1
            )));
        }
        let mut class_index: Vec<(f64, usize)> =
            classes.iter().enumerate().map(|(i, &x)| (x, i + 1)).collect();
        class_index.sort_by(|a, b| a.0.total_cmp(&b.0));
        for pair in class_index.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(KernelError::InvalidParameter(format!(
                    "duplicate class mass {}",
                    pair[0].0
                )));
            }
        }
        let mut kernel = Self::assemble(
            KernelForm::IndexChain { lambda_base, classes },
            SublinearFn::Constant { c: top_rate.sqrt().max(1.0) },
            1.0,
        );
        kernel.class_index = class_index;
        Ok(kernel)
    }

    /// Register a custom kernel with a user-declared envelope and margin.
    ///
    /// The declared domination is spot-checked on `samples` log-uniform pairs
    /// over `mass_range`; registration fails if any sampled ratio exceeds 1 or
    /// the envelope fails to be strictly positive. Sampling cannot prove
    /// domination everywhere — the simulation engine re-checks every accepted
    /// proposal at run time.
    pub fn custom<F>(
        name: &str,
        eval: F,
        phi: SublinearFn,
        margin: f64,
        samples: usize,
        mass_range: (f64, f64),
    ) -> Result<Self, KernelError>
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        if !margin.is_finite() || margin < 1.0 {
            return Err(KernelError::InvalidParameter(format!(
                "margin {margin} must be finite and >= 1"
            )));
        }
        phi.validate()
            .map_err(|e| KernelError::InvalidParameter(e.to_string()))?;
        let kernel = Self {
            form: KernelForm::Custom { name: name.to_string(), eval: Arc::new(eval) },
            phi,
            margin,
            class_index: Vec::new(),
        };
        let report = verify_domination(&kernel, samples, mass_range, 0)?;
        if !report.pass {
            let (x, y) = report.worst_pair;
            return Err(KernelError::DominationViolated { x, y, ratio: report.max_ratio });
        }
        Ok(kernel)
    }

    fn assemble(form: KernelForm, phi: SublinearFn, margin: f64) -> Self {
        Self { form, phi, margin, class_index: Vec::new() }
    }

    pub fn form(&self) -> &KernelForm {
        &self.form
    }

    /// The declared dominating envelope.
    pub fn phi(&self) -> &SublinearFn {
        &self.phi
    }

    /// Declared margin `m` in `K ≤ m·φφ`.
    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Replace the envelope/margin pair (the caller vouches for domination;
    /// used by experiment configs that probe alternative envelopes).
    pub fn with_envelope(mut self, phi: SublinearFn, margin: f64) -> Result<Self, KernelError> {
        if !margin.is_finite() || margin < 1.0 {
            return Err(KernelError::InvalidParameter(format!(
                "margin {margin} must be finite and >= 1"
            )));
        }
        phi.validate()
            .map_err(|e| KernelError::InvalidParameter(e.to_string()))?;
        self.phi = phi;
        self.margin = margin;
        Ok(self)
    }

    /// Class of a mass under an `IndexChain` table (0 = off-table).
    pub fn class_of(&self, x: f64) -> usize {
        match self.class_index.binary_search_by(|&(m, _)| m.total_cmp(&x)) {
            Ok(i) => self.class_index[i].1,
            Err(_) => 0,
        }
    }

    /// Evaluate `K(x, y)` without argument validation (callers guarantee
    /// positive masses; see [`eval_kernel`] for the checked form).
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        debug_assert!(x > 0.0 && y > 0.0, "kernel masses must be positive");
        match &self.form {
            KernelForm::Constant { c } => *c,
            KernelForm::Additive => x + y,
            KernelForm::Multiplicative => x * y,
            KernelForm::Brownian => {
                let (a, b) = (x.cbrt(), y.cbrt());
                (a + b) * (1.0 / a + 1.0 / b)
            }
            KernelForm::IndexChain { lambda_base, .. } => {
                let (nx, ny) = (self.class_of(x), self.class_of(y));
                if nx == 0 || ny == 0 || nx.abs_diff(ny) != 1 {
                    0.0
                } else {
                    lambda_base.powi(nx.min(ny) as i32)
                }
            }
            KernelForm::Custom { eval, .. } => eval(x, y),
        }
    }
}

/// Checked kernel evaluation: rejects non-positive or non-finite masses.
pub fn eval_kernel(kernel: &Kernel, x: f64, y: f64) -> Result<f64, KernelError> {
    if !(x > 0.0) || !(y > 0.0) || !x.is_finite() || !y.is_finite() {
        return Err(KernelError::NonPositiveMass { x, y });
    }
    Ok(kernel.eval(x, y))
}

/// Result of a domination spot check.
#[derive(Debug, Clone, Serialize)]
pub struct DominationReport {
    /// Largest sampled `K/(margin·φφ)`.
    pub max_ratio: f64,
    /// Pair attaining `max_ratio`.
    pub worst_pair: (f64, f64),
    /// `max_ratio ≤ 1 + 1e−12`.
    pub pass: bool,
}

/// Sample `K/(margin·φφ)` on `samples` log-uniform pairs over `mass_range`
/// (diagonal pairs included every few draws — it is a common place for
/// envelopes to be tight). Errors if the envelope is not strictly positive at
/// a sampled point.
pub fn verify_domination(
    kernel: &Kernel,
    samples: usize,
    mass_range: (f64, f64),
    seed: u64,
) -> Result<DominationReport, KernelError> {
    let (lo, hi) = mass_range;
    if !(lo > 0.0) || !(hi > lo) || !hi.is_finite() {
        return Err(KernelError::InvalidParameter(format!(
            "bad mass range [{lo}, {hi}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (llo, lhi) = (lo.ln(), hi.ln());
    let mut best = (0.0f64, (lo, lo));
    for i in 0..samples {
        let x = (llo + (lhi - llo) * rng.gen::<f64>()).exp();
        let y = if i % 8 == 0 {
            x
        } else {
            (llo + (lhi - llo) * rng.gen::<f64>()).exp()
        };
        let (px, py) = (kernel.phi.eval(x), kernel.phi.eval(y));
        if !(px > 0.0) {
            return Err(KernelError::EnvelopeNotPositive { x, phi: px });
        }
        if !(py > 0.0) {
            return Err(KernelError::EnvelopeNotPositive { x: y, phi: py });
        }
        let ratio = kernel.eval(x, y) / (kernel.margin * px * py);
        if ratio > best.0 {
            best = (ratio, (x, y));
        }
    }
    Ok(DominationReport {
        max_ratio: best.0,
        worst_pair: best.1,
        pass: best.0 <= 1.0 + 1e-12,
    })
}

/// Serializable kernel description used by experiment configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Constant { c: f64 },
    Additive,
    Multiplicative,
    Brownian,
    IndexChain { lambda_base: f64, classes: Vec<f64> },
}

impl KernelSpec {
    /// Build the kernel with its canonical envelope.
    pub fn build(&self) -> Result<Kernel, KernelError> {
        match self {
            KernelSpec::Constant { c } => Kernel::constant(*c),
            KernelSpec::Additive => Ok(Kernel::additive()),
            KernelSpec::Multiplicative => Ok(Kernel::multiplicative()),
            KernelSpec::Brownian => Ok(Kernel::brownian()),
            KernelSpec::IndexChain { lambda_base, classes } => {
                Kernel::index_chain(*lambda_base, classes.clone())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builtin_values_match_their_formulas() {
        assert_eq!(Kernel::constant(1.0).unwrap().eval(5.0, 0.1), 1.0);
        assert_eq!(Kernel::additive().eval(1.0, 2.0), 3.0);
        assert_eq!(Kernel::multiplicative().eval(2.0, 3.0), 6.0);
        // (8^{1/3} + 1)(8^{-1/3} + 1) = 3 · 1.5
        assert!((Kernel::brownian().eval(8.0, 1.0) - 4.5).abs() < 1e-12);
    }

    #[test]
    fn brownian_diagonal_is_four_for_every_mass() {
        let k = Kernel::brownian();
        for x in [1e-6, 1e-2, 1.0, 3.7, 1e5] {
            assert!((k.eval(x, x) - 4.0).abs() < 1e-10, "K({x},{x}) != 4");
        }
    }

    #[test]
    fn index_chain_hits_adjacent_classes_only() {
        let k = Kernel::index_chain(8.0, vec![2.0, 4.0, 8.0, 16.0]).unwrap();
        assert_eq!(k.eval(2.0, 4.0), 8.0);
        assert_eq!(k.eval(8.0, 4.0), 64.0);
        assert_eq!(k.eval(8.0, 16.0), 512.0);
        assert_eq!(k.eval(2.0, 8.0), 0.0); // classes 1 and 3
        assert_eq!(k.eval(4.0, 4.0), 0.0); // same class
        assert_eq!(k.eval(3.0, 4.0), 0.0); // off-table mass
    }

    #[test]
    fn index_chain_rejects_bad_tables() {
        assert!(Kernel::index_chain(8.0, vec![]).is_err());
        assert!(Kernel::index_chain(8.0, vec![1.0, 1.0]).is_err());
        assert!(Kernel::index_chain(8.0, vec![1.0, -2.0]).is_err());
        // 8^400 overflows f64.
        let long: Vec<f64> = (1..=401).map(|i| i as f64).collect();
        assert!(Kernel::index_chain(8.0, long).is_err());
    }

    #[test]
    fn checked_eval_rejects_non_positive_mass() {
        let k = Kernel::additive();
        assert!(eval_kernel(&k, 0.0, 1.0).is_err());
        assert!(eval_kernel(&k, 1.0, -2.0).is_err());
        assert!(eval_kernel(&k, f64::NAN, 1.0).is_err());
        assert_eq!(eval_kernel(&k, 1.0, 2.0).unwrap(), 3.0);
    }

    #[test]
    fn builtin_envelopes_pass_domination_sampling() {
        let kernels = [
            Kernel::constant(3.0).unwrap(),
            Kernel::additive(),
            Kernel::multiplicative(),
            Kernel::brownian(),
            Kernel::index_chain(8.0, vec![1.5, 2.25, 3.375]).unwrap(),
        ];
        for k in &kernels {
            let report = verify_domination(k, 20_000, (1e-3, 1e3), 11).unwrap();
            assert!(report.pass, "{:?}: max ratio {}", k.form(), report.max_ratio);
        }
    }

    #[test]
    fn brownian_envelope_ratio_peaks_at_one_quarter() {
        // Independent dense-grid maximization of K/(φφ) over a symmetric
        // log grid on [1e-3, 1e3]^2, written directly against the formulas.
        let n = 401;
        let mut max_ratio: f64 = 0.0;
        let mut arg = (0.0, 0.0);
        let grid: Vec<f64> = (0..n)
            .map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / (n - 1) as f64))
            .collect();
        for &x in &grid {
            for &y in &grid {
                let k = (x.cbrt() + y.cbrt()) * (1.0 / x.cbrt() + 1.0 / y.cbrt());
                let phi = |t: f64| 2.0 * (t.cbrt() + 1.0 / t.cbrt());
                let ratio = k / (phi(x) * phi(y));
                if ratio > max_ratio {
                    max_ratio = ratio;
                    arg = (x, y);
                }
            }
        }
        assert!(
            (max_ratio - 0.25).abs() < 1e-12,
            "grid max {max_ratio} at {arg:?}, expected exactly 1/4"
        );
        // The registered envelope therefore dominates with real slack.
        let report = verify_domination(&Kernel::brownian(), 50_000, (1e-3, 1e3), 5).unwrap();
        assert!(report.max_ratio <= 0.25 + 1e-12);
        assert!(report.pass);
    }

    #[test]
    fn custom_registration_rejects_under_declared_envelopes() {
        let err = Kernel::custom(
            "ten_times_product",
            |x, y| 10.0 * x * y,
            SublinearFn::Identity,
            1.0,
            5_000,
            (1e-2, 1e2),
        );
        assert!(matches!(err, Err(KernelError::DominationViolated { .. })));
    }

    #[test]
    fn vanishing_envelope_is_rejected() {
        let cut = crate::measures::truncate_sublinear(&SublinearFn::Constant { c: 1.0 }, 2).unwrap();
        let err = Kernel::custom("tiny", |_, _| 0.1, cut, 1.0, 5_000, (1e-2, 1e2));
        assert!(matches!(err, Err(KernelError::EnvelopeNotPositive { .. })));
    }

    #[test]
    fn kernel_specs_parse_and_reject_unknown_types() {
        let spec: KernelSpec = serde_json::from_str(r#"{"type":"brownian"}"#).unwrap();
        assert!(matches!(spec.build().unwrap().form(), KernelForm::Brownian));
        let spec: KernelSpec =
            serde_json::from_str(r#"{"type":"index_chain","lambda_base":8.0,"classes":[1.0,2.0]}"#)
                .unwrap();
        assert!(spec.build().is_ok());
        assert!(serde_json::from_str::<KernelSpec>(r#"{"type":"fractal"}"#).is_err());
        assert!(serde_json::from_str::<KernelSpec>(r#"{"type":"constant","c":1.0,"x":2}"#).is_err());
    }

    proptest! {
        #[test]
        fn every_form_is_bitwise_symmetric(
            xq in 1u32..100_000,
            yq in 1u32..100_000,
        ) {
            let (x, y) = (xq as f64 / 97.0, yq as f64 / 97.0);
            let kernels = [
                Kernel::constant(2.5).unwrap(),
                Kernel::additive(),
                Kernel::multiplicative(),
                Kernel::brownian(),
                Kernel::index_chain(8.0, vec![1.0, 2.0, 4.0]).unwrap(),
            ];
            for k in &kernels {
                prop_assert_eq!(k.eval(x, y).to_bits(), k.eval(y, x).to_bits());
            }
        }
    }
}
