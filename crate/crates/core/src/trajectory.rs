//! Time-stamped measure paths shared by the deterministic solver and the
//! stochastic engines, with the per-sample diagnostics every consumer needs
//! (total mass, envelope mass plus leak, second envelope moment).

use serde::Serialize;

use crate::measures::{moment, DiscreteMeasure, SublinearFn};

/// One snapshot of a `(μ_t, λ_t)` path with cached diagnostics.
#[derive(Debug, Clone)]
pub struct Sample {
    pub t: f64,
    pub measure: DiscreteMeasure,
    /// Leak tracker `λ_t` (0 for untruncated runs).
    pub lambda: f64,
    /// `⟨x, μ_t⟩`.
    pub mass: f64,
    /// `⟨φ, μ_t⟩`.
    pub phi_mass: f64,
    /// `⟨φ², μ_t⟩`.
    pub phi2_moment: f64,
}

impl Sample {
    /// Build a snapshot, computing the diagnostics under the envelope `phi`.
    pub fn new(t: f64, measure: DiscreteMeasure, lambda: f64, phi: &SublinearFn) -> Self {
        let mass = moment(&measure, |x| x);
        let phi_mass = moment(&measure, |x| phi.eval(x));
        let phi2_moment = moment(&measure, |x| phi.eval(x).powi(2));
        Self { t, measure, lambda, mass, phi_mass, phi2_moment }
    }

    /// `⟨φ, μ_t⟩ + λ_t`, the conservation functional.
    pub fn phi_mass_plus_lambda(&self) -> f64 {
        self.phi_mass + self.lambda
    }
}

/// How a trajectory was produced; recorded so artifacts are self-describing.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SolverMeta {
    pub method: String,
    /// Accepted steps (adaptive integration) or events (jump chains).
    pub steps: u64,
    /// Rejected adaptive steps, or thinning rejections.
    pub rejected: u64,
    pub atol: Option<f64>,
    pub rtol: Option<f64>,
    /// Size of the closed mass support (deterministic runs).
    pub support_size: Option<usize>,
}

/// A time-ordered sequence of [`Sample`]s.
#[derive(Debug, Clone)]
pub struct Trajectory {
    samples: Vec<Sample>,
    pub meta: SolverMeta,
}

impl Trajectory {
    pub fn new(meta: SolverMeta) -> Self {
        Self { samples: Vec::new(), meta }
    }

    /// Append a snapshot; timestamps must be strictly increasing.
    pub fn push(&mut self, sample: Sample) {
        if let Some(last) = self.samples.last() {
            assert!(
                sample.t > last.t,
                "trajectory timestamps must be strictly increasing ({} after {})",
                sample.t,
                last.t
            );
        }
        self.samples.push(sample);
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// The sample at exactly time `t` (within `tol`), if any.
    pub fn at_time(&self, t: f64, tol: f64) -> Option<&Sample> {
        self.samples.iter().find(|s| (s.t - t).abs() <= tol)
    }

    /// Long-format CSV of the measure path: `t,mass,weight` rows.
    pub fn path_csv(&self) -> String {
        let mut out = String::from("t,mass,weight\n");
        for s in &self.samples {
            for &(m, w) in s.measure.atoms() {
                out.push_str(&format!("{},{},{}\n", s.t, m, w));
            }
        }
        out
    }

    /// Per-sample diagnostics CSV.
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("t,total_weight,mass,phi_mass,phi2_moment,lambda,atoms\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.t,
                s.measure.norm(),
                s.mass,
                s.phi_mass,
                s.phi2_moment,
                s.lambda,
                s.measure.len()
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::make_measure;

    #[test]
    fn sample_diagnostics_match_direct_moments() {
        let mu = make_measure(&[(1.0, 2.0), (3.0, 0.5)], 0.0).unwrap();
        let phi = SublinearFn::Identity;
        let s = Sample::new(0.5, mu, 0.25, &phi);
        assert_eq!(s.mass, 2.0 + 1.5);
        assert_eq!(s.phi_mass, 3.5);
        assert_eq!(s.phi2_moment, 2.0 + 4.5);
        assert_eq!(s.phi_mass_plus_lambda(), 3.75);
    }

    #[test]
    #[should_panic(expected = "strictly increasing")]
    fn out_of_order_samples_panic() {
        let phi = SublinearFn::Identity;
        let mut traj = Trajectory::new(SolverMeta::default());
        let mu = make_measure(&[(1.0, 1.0)], 0.0).unwrap();
        traj.push(Sample::new(1.0, mu.clone(), 0.0, &phi));
        traj.push(Sample::new(0.5, mu, 0.0, &phi));
    }
}
