//! Coagulation-dynamics toolkit.
//!
//! Three layers, connected by shared measure types:
//!
//! * [`deterministic`] — solves the truncated coagulation equations: mass in a
//!   truncation set `B` evolves by binary merges, mass leaking out of `B` is
//!   tracked by a scalar `λ` so that the pair ``(μ_t, λ_t)`` stays conservative
//!   in the weighted sense ``⟨φ,μ_t⟩ + λ_t`` non-increasing.
//! * [`coalescent`] — exact stochastic simulation of the finite coalescent
//!   (particles `i, j` merge at rate `K(x_i, x_j)`), its leak-tracking variant,
//!   and a coupled family over nested truncation sets built from shared
//!   exponential clocks.
//! * [`nonuniqueness`] — a two-class mass-exchange chain with geometrically
//!   growing rates whose even/odd truncation limits disagree, plus the
//!   bookkeeping that certifies mass conservation for the selected limit.
//!
//! [`measures`] and [`kernels`] provide the common vocabulary (atomic measures,
//! sublinear weight functions, coagulation kernels with declared dominating
//! envelopes), and [`harness`] turns everything into reproducible, config-driven
//! experiments with CSV/JSON artifacts.

// `!(x > 0.0)`-style guards are used throughout on purpose: a NaN comparison
// is false, so negating sends NaN down the rejecting branch, which a plain
// `x <= 0.0` would not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coalescent;
pub mod deterministic;
pub mod harness;
pub mod kernels;
pub mod measures;
pub mod nonuniqueness;
pub mod trajectory;


pub use coalescent::{
    generator_consistency, pair_integral, rescale_events, rescale_path, simulate_coalescent,
    simulate_coupled, simulate_coupled_family, Event, EventKind, EventLog, FamilyResult,
    GeneratorCheck, ParticleSystem, SimError, SimOptions, SimResult,
};
pub use harness::{
    load_config, run, ExperimentConfig, ExperimentKind, HarnessError, Overrides, RunOutcome,
};
pub use kernels::{Kernel, KernelForm, KernelSpec};
pub use measures::{
    make_measure, moment, total_variation, truncate_sublinear, weak_distance_d0, DiscreteMeasure,
    SublinearFn, WeakMetricDict,
};
pub use trajectory::{Sample, Trajectory};

