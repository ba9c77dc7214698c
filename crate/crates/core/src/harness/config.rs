//! Experiment configuration: strict serde types plus per-kind semantic
//! validation.
//!
//! Configs are JSON documents. Parsing is strict (`deny_unknown_fields`
//! everywhere) and every load is additionally checked against the shipped
//! schema (see [`super::schema`]) so that a malformed document is rejected
//! with a field-level diagnostic before anything runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deterministic::Truncation;
use crate::kernels::{Kernel, KernelSpec};
use crate::measures::{make_measure, DiscreteMeasure, SublinearFn};

use super::HarnessError;

/// Which experiment a config drives. Matches the CLI subcommand names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Deterministic truncated-system solve with a conservation report.
    Solve,
    /// Plain stochastic chain.
    Simulate,
    /// Truncated stochastic chain with the leak tracker.
    Couple,
    /// Shared-clock family over a nested truncation list.
    Family,
    /// Dueling-decay ladder: extract both scaling limits and certify the
    /// parity bounds separating them.
    Nonuniq,
    /// Population-scaling convergence study (weak-metric distance to the
    /// deterministic solution).
    Converge,
    /// Population-scaling concentration study (total-variation exceedance
    /// frequencies).
    Concentrate,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Solve => "solve",
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Couple => "couple",
            ExperimentKind::Family => "family",
            ExperimentKind::Nonuniq => "nonuniq",
            ExperimentKind::Converge => "converge",
            ExperimentKind::Concentrate => "concentrate",
        }
    }
}

/// One atom of an explicit initial measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub mass: f64,
    pub weight: f64,
}

/// Initial data. Deterministic runs read it as a measure; stochastic runs
/// materialize a particle population from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// Explicit atoms. As a particle population, each atom contributes
    /// `weight` particles (weights must be whole numbers for that use).
    Atoms { atoms: Vec<AtomSpec> },
    /// `n` particles of one mass (as a measure: weight `n` at `mass`).
    Monodisperse {
        n: u64,
        #[serde(default = "default_mass")]
        mass: f64,
    },
    /// `n` particles drawn independently from the normalized weights of
    /// `atoms` — the empirical-sample initial data for scaling studies.
    Sample { atoms: Vec<AtomSpec>, n: u64 },
}

fn default_mass() -> f64 {
    1.0
}

impl InitialSpec {
    fn atoms(&self) -> Option<&[AtomSpec]> {
        match self {
            InitialSpec::Atoms { atoms } | InitialSpec::Sample { atoms, .. } => Some(atoms),
            InitialSpec::Monodisperse { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if let Some(atoms) = self.atoms() {
            if atoms.is_empty() {
                return Err(HarnessError::Config("initial.atoms must be non-empty".into()));
            }
            let mut total = 0.0;
            for (i, a) in atoms.iter().enumerate() {
                if !a.mass.is_finite() || a.mass <= 0.0 {
                    return Err(HarnessError::Config(format!(
                        "initial.atoms[{i}].mass must be positive, got {}",
                        a.mass
                    )));
                }
                if !a.weight.is_finite() || a.weight < 0.0 {
                    return Err(HarnessError::Config(format!(
                        "initial.atoms[{i}].weight must be non-negative, got {}",
                        a.weight
                    )));
                }
                total += a.weight;
            }
            if total <= 0.0 {
                return Err(HarnessError::Config(
                    "initial atoms carry no weight".into(),
                ));
            }
        }
        if let InitialSpec::Monodisperse { n, mass } = self {
            if *n == 0 {
                return Err(HarnessError::Config("initial.n must be >= 1".into()));
            }
            if !mass.is_finite() || *mass <= 0.0 {
                return Err(HarnessError::Config(format!(
                    "initial.mass must be positive, got {mass}"
                )));
            }
        }
        if let InitialSpec::Sample { n, .. } = self {
            if *n == 0 {
                return Err(HarnessError::Config("initial.n must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// The initial data as a measure (used by the deterministic solver and as
    /// the scaling-study reference after [`Self::reference_measure`]).
    pub fn measure(&self, eps_mass: f64) -> Result<DiscreteMeasure, HarnessError> {
        let atoms: Vec<(f64, f64)> = match self {
            InitialSpec::Atoms { atoms } | InitialSpec::Sample { atoms, .. } => {
                atoms.iter().map(|a| (a.mass, a.weight)).collect()
            }
            InitialSpec::Monodisperse { n, mass } => vec![(*mass, *n as f64)],
        };
        make_measure(&atoms, eps_mass)
            .map_err(|e| HarnessError::Config(format!("initial measure: {e}")))
    }

    /// The scaling-limit initial measure: total weight normalized to 1.
    pub fn reference_measure(&self, eps_mass: f64) -> Result<DiscreteMeasure, HarnessError> {
        let mu = self.measure(eps_mass)?;
        let norm = mu.norm();
        if !(norm > 0.0) {
            return Err(HarnessError::Config("initial measure has zero weight".into()));
        }
        Ok(mu.scaled(1.0 / norm))
    }

    /// Materialize a particle population of size `n` (for `atoms`, `n` must
    /// be `None` and the whole-number weights are used as particle counts).
    /// `rng` is consumed only by the `sample` variant.
    pub fn particles<R: Rng>(
        &self,
        n_override: Option<u64>,
        rng: &mut R,
    ) -> Result<Vec<f64>, HarnessError> {
        match self {
            InitialSpec::Atoms { atoms } => {
                if n_override.is_some() {
                    return Err(HarnessError::Config(
                        "explicit-atom initial data has a fixed population; \
                         use monodisperse or sample for population scans"
                            .into(),
                    ));
                }
                let mut out = Vec::new();
                for (i, a) in atoms.iter().enumerate() {
                    let count = a.weight.round();
                    if (a.weight - count).abs() > 1e-9 || count < 0.0 {
                        return Err(HarnessError::Config(format!(
                            "initial.atoms[{i}].weight {} is not a whole particle count",
                            a.weight
                        )));
                    }
                    for _ in 0..count as u64 {
                        out.push(a.mass);
                    }
                }
                Ok(out)
            }
            InitialSpec::Monodisperse { n, mass } => {
                let n = n_override.unwrap_or(*n);
                Ok(vec![*mass; n as usize])
            }
            InitialSpec::Sample { atoms, n } => {
                let n = n_override.unwrap_or(*n);
                let total: f64 = atoms.iter().map(|a| a.weight).sum();
                let mut out = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let mut target = rng.gen::<f64>() * total;
                    let mut chosen = atoms.len() - 1;
                    for (i, a) in atoms.iter().enumerate() {
                        if target < a.weight {
                            chosen = i;
                            break;
                        }
                        target -= a.weight;
                    }
                    out.push(atoms[chosen].mass);
                }
                Ok(out)
            }
        }
    }
}

/// Optional envelope override for the kernel.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiSpec {
    pub shape: SublinearFn,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    1.0
}

/// Parameters for the dueling-decay ladder.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainParams {
    /// Components `1..=n_max` are tracked; must be even and in `[6, 298]`.
    pub n_max: usize,
    #[serde(default = "default_rate_scale")]
    pub rate_scale: f64,
}

fn default_rate_scale() -> f64 {
    1.0
}

/// Numerical tolerances; every field has a sensible default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// ODE absolute tolerance.
    pub atol: f64,
    /// ODE relative tolerance.
    pub rtol: f64,
    /// Site-matching resolution for measures.
    pub eps_mass: f64,
    /// Scaling studies require the reference solve's leak tracker to stay
    /// below this at the horizon (otherwise the retained set is too small for
    /// the comparison to be meaningful).
    pub lambda_reference: f64,
    /// Leak-onset marker threshold for conservation reports.
    pub lambda_onset: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            atol: 1e-10,
            rtol: 1e-8,
            eps_mass: 0.0,
            lambda_reference: 1e-6,
            lambda_onset: 1e-4,
        }
    }
}

/// A fully described experiment. See the module docs of [`super`] for which
/// fields each kind requires.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Config format version; must be 1.
    pub version: u32,
    pub kind: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<PhiSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<Truncation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation_list: Option<Vec<Truncation>>,
    /// Sample times. Raw chain time for solve/simulate/couple/family and
    /// nonuniq; *scaled* time for the population studies (each replica runs
    /// to `t/n` in raw time).
    #[serde(default)]
    pub times: Vec<f64>,
    /// Horizon for the stochastic kinds; defaults to the last sample time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default = "default_replicas")]
    pub replicas: u64,
    /// Base seed; every replica derives its own stream from it.
    #[serde(default)]
    pub seed: u64,
    /// Additional leak-tracker mass at time zero (couple only).
    #[serde(default)]
    pub extra_lambda: f64,
    /// Population sizes for the scaling studies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<u64>>,
    /// Exceedance threshold for the concentration study.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_replicas() -> u64 {
    1
}

impl ExperimentConfig {
    /// Build the kernel, applying the optional envelope override.
    pub fn build_kernel(&self) -> Result<Kernel, HarnessError> {
        let spec = self
            .kernel
            .as_ref()
            .ok_or_else(|| HarnessError::Config("missing kernel".into()))?;
        let kernel = spec
            .build()
            .map_err(|e| HarnessError::Config(format!("kernel: {e}")))?;
        match &self.phi {
            None => Ok(kernel),
            Some(p) => kernel
                .with_envelope(p.shape.clone(), p.margin)
                .map_err(|e| HarnessError::Config(format!("phi override: {e}"))),
        }
    }

    fn require_times(&self) -> Result<(), HarnessError> {
        if self.times.is_empty() {
            return Err(HarnessError::Config("times must be non-empty".into()));
        }
        Ok(())
    }

    fn check_times_shape(&self) -> Result<(), HarnessError> {
        for (k, &t) in self.times.iter().enumerate() {
            if !t.is_finite() || t < 0.0 {
                return Err(HarnessError::Config(format!("times[{k}] = {t} is invalid")));
            }
            if k > 0 && t <= self.times[k - 1] {
                return Err(HarnessError::Config(
                    "times must be strictly increasing".into(),
                ));
            }
        }
        if let Some(te) = self.t_end {
            if !te.is_finite() || te <= 0.0 {
                return Err(HarnessError::Config(format!("t_end = {te} is invalid")));
            }
            if let Some(&last) = self.times.last() {
                if te < last {
                    return Err(HarnessError::Config(format!(
                        "t_end {te} is before the last sample time {last}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The stochastic horizon: explicit `t_end`, else the last sample time.
    pub fn horizon(&self) -> Result<f64, HarnessError> {
        self.t_end
            .or_else(|| self.times.last().copied())
            .ok_or_else(|| HarnessError::Config("need t_end or a non-empty times grid".into()))
    }

    fn require_initial(&self) -> Result<&InitialSpec, HarnessError> {
        self.initial
            .as_ref()
            .ok_or_else(|| HarnessError::Config("missing initial".into()))
    }

    fn require_kernel_spec(&self) -> Result<(), HarnessError> {
        if self.kernel.is_none() {
            return Err(HarnessError::Config("missing kernel".into()));
        }
        Ok(())
    }

    /// Per-kind semantic validation (presence and coherence of sections).
    /// Schema validation and strict parsing have already happened by the time
    /// this runs.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.version != 1 {
            return Err(HarnessError::Config(format!(
                "unsupported config version {} (this build reads version 1)",
                self.version
            )));
        }
        self.check_times_shape()?;
        if let Some(initial) = &self.initial {
            initial.validate()?;
        }
        if let Some(phi) = &self.phi {
            phi.shape
                .validate()
                .map_err(|e| HarnessError::Config(format!("phi.shape: {e}")))?;
            if !phi.margin.is_finite() || phi.margin < 1.0 {
                return Err(HarnessError::Config(format!(
                    "phi.margin must be >= 1, got {}",
                    phi.margin
                )));
            }
        }
        let tol = &self.tolerances;
        for (name, v) in [
            ("atol", tol.atol),
            ("rtol", tol.rtol),
            ("lambda_reference", tol.lambda_reference),
            ("lambda_onset", tol.lambda_onset),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(HarnessError::Config(format!(
                    "tolerances.{name} must be positive, got {v}"
                )));
            }
        }
        if !tol.eps_mass.is_finite() || tol.eps_mass < 0.0 {
            return Err(HarnessError::Config(format!(
                "tolerances.eps_mass must be >= 0, got {}",
                tol.eps_mass
            )));
        }

        match self.kind {
            ExperimentKind::Solve => {
                self.require_kernel_spec()?;
                self.require_initial()?;
                if self.truncation.is_none() {
                    return Err(HarnessError::Config("solve needs a truncation".into()));
                }
                self.require_times()?;
            }
            ExperimentKind::Simulate => {
                self.require_kernel_spec()?;
                self.require_initial()?;
                self.horizon()?;
            }
            ExperimentKind::Couple => {
                self.require_kernel_spec()?;
                self.require_initial()?;
                if self.truncation.is_none() {
                    return Err(HarnessError::Config("couple needs a truncation".into()));
                }
                if !self.extra_lambda.is_finite() || self.extra_lambda < 0.0 {
                    return Err(HarnessError::Config(format!(
                        "extra_lambda must be >= 0, got {}",
                        self.extra_lambda
                    )));
                }
                self.horizon()?;
            }
            ExperimentKind::Family => {
                self.require_kernel_spec()?;
                self.require_initial()?;
                match &self.truncation_list {
                    None => {
                        return Err(HarnessError::Config(
                            "family needs a truncation_list".into(),
                        ))
                    }
                    Some(list) if list.is_empty() => {
                        return Err(HarnessError::Config(
                            "truncation_list must be non-empty".into(),
                        ))
                    }
                    Some(_) => {}
                }
                self.horizon()?;
            }
            ExperimentKind::Nonuniq => {
                let chain = self.chain.as_ref().ok_or_else(|| {
                    HarnessError::Config("nonuniq needs a chain section".into())
                })?;
                if chain.n_max % 2 != 0 || !(6..=298).contains(&chain.n_max) {
                    return Err(HarnessError::Config(format!(
                        "chain.n_max must be even and in [6, 298], got {}",
                        chain.n_max
                    )));
                }
                if !chain.rate_scale.is_finite() || chain.rate_scale < 0.0 {
                    return Err(HarnessError::Config(format!(
                        "chain.rate_scale must be >= 0, got {}",
                        chain.rate_scale
                    )));
                }
                self.require_times()?;
            }
            ExperimentKind::Converge | ExperimentKind::Concentrate => {
                self.require_kernel_spec()?;
                let initial = self.require_initial()?;
                if matches!(initial, InitialSpec::Atoms { .. }) {
                    return Err(HarnessError::Config(
                        "population studies need monodisperse or sample initial data \
                         (the population size comes from n_list)"
                            .into(),
                    ));
                }
                match self.truncation {
                    None => {
                        return Err(HarnessError::Config(
                            "population studies need a truncation for the reference solve".into(),
                        ))
                    }
                    Some(Truncation::All) => {
                        return Err(HarnessError::Config(
                            "population studies compare against a truncated solution; \
                             the retained set must be bounded (interval or set)"
                                .into(),
                        ))
                    }
                    Some(_) => {}
                }
                self.require_times()?;
                let n_list = self
                    .n_list
                    .as_ref()
                    .ok_or_else(|| HarnessError::Config("missing n_list".into()))?;
                if n_list.is_empty() {
                    return Err(HarnessError::Config("n_list must be non-empty".into()));
                }
                for (k, &n) in n_list.iter().enumerate() {
                    if n == 0 {
                        return Err(HarnessError::Config("n_list entries must be >= 1".into()));
                    }
                    if k > 0 && n <= n_list[k - 1] {
                        return Err(HarnessError::Config(
                            "n_list must be strictly increasing".into(),
                        ));
                    }
                }
                if self.replicas < 2 {
                    return Err(HarnessError::Config(
                        "population studies need at least 2 replicas".into(),
                    ));
                }
                if self.kind == ExperimentKind::Concentrate {
                    match self.delta {
                        None => {
                            return Err(HarnessError::Config(
                                "concentrate needs a delta threshold".into(),
                            ))
                        }
                        Some(d) if !d.is_finite() || d <= 0.0 => {
                            return Err(HarnessError::Config(format!(
                                "delta must be positive, got {d}"
                            )))
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        Ok(())
    }
}
