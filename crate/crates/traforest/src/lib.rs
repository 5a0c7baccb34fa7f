//! Transformation and distributional survival forests.
//!
//! Survival models of the form `P(T <= t | x) = 1 - exp(-exp(a(t)' theta(x)))`
//! are fitted locally: a forest of trees, split on score residuals of a
//! parametric transformation model, supplies nearest-neighbor weights, and
//! the conditional parameters are the weighted censored-data maximum
//! likelihood under monotonicity constraints. Splitting scores cover
//! proportional-hazards (log-rank) and non-proportional-hazards (full
//! parameter vector) alternatives, in prognostic and treatment-effect
//! variants.
//!
//! Start with the runnable programs under `examples/`; the `traforest`
//! binary exposes the same functionality as subcommands.

pub mod basis;
pub mod cli;
pub mod forest;
pub mod likelihood;
pub mod optim;
pub mod simulate;
pub mod tree;

pub use basis::{Basis, BasisError, ConstraintSet};
pub use forest::{Forest, ForestConfig, ModelFile, TrainObs};
pub use likelihood::{ModelParams, Subject, SurvResponse};
pub use optim::{FitConfig, FitResult};
pub use simulate::Scenario;
pub use tree::{ScoreFamily, SplitSpec};
