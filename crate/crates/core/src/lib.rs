//! Robust optimal experimental design for discriminating rival ODE models.
//!
//! The library computes experimental designs — initial concentrations,
//! measurement time spacings and perturbation quantities — that maximize the
//! worst-case Kullback-Leibler separation between two families of candidate
//! kinetic models. The worst case is taken over box-bounded model parameters,
//! which turns the design problem into a semi-infinite program. It is solved
//! by outer approximation: finite subproblems in multiple-shooting form are
//! solved by an interior-point NLP method, the constraint set grows by one
//! worst-case parameter point per iteration, and newly added constraints are
//! blended in by a homotopy to keep successive solutions in the same basin.
//!
//! Module map:
//! - [`integrator`]: adaptive stiff ODE integration with forward sensitivities
//! - [`models`]: candidate model registry, error models, built-in benchmarks
//! - [`config`]: JSON run-configuration loading and validation
//! - [`criterion`]: switching gates and the KL discrimination objective
//! - [`design`]: design vectors and design-space specifications
//! - [`nlp`]: interior-point solver for smooth NLPs with bounds/eq/ineq
//! - [`transcription`]: multiple-shooting transcription of the design problem
//! - [`outer`]: outer approximation loop, robustification gap, homotopy
//! - [`power`]: Monte Carlo likelihood-ratio power validation

pub mod config;
pub mod criterion;
pub mod design;
pub mod integrator;
mod linalg;
pub mod models;
pub mod nlp;
pub mod outer;
pub mod transcription;

pub use config::{load_config, RunConfig};
pub use design::{DesignSpec, DesignVector};
pub use integrator::{IntegrationResult, Integrator, IntegratorConfig, OdeSystem};
pub use models::{builtin_dicty, builtin_glycolysis, ErrorModel, HypothesisSet, ModelSpec};
pub use nlp::{NlpProblem, NlpSolution, SolveStatus};
pub use outer::{OuterConfig, OuterTrace};

/// Format a float with 17 significant digits, stable across runs.
///
/// Used for every float that ends up in a CSV file; 17 digits round-trip
/// any f64 exactly.
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}
