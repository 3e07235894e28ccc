//! Penalized estimation of multivariate linear mixed-effects models.
//!
//! The model for group `j` is `Y_j = X_j B + Z_j Λ_j + E_j` with
//! `vec(Λ_j) ~ N(0, Ψ)` and `vec(E_j) ~ N(0, Σ ⊗ I)`. Parameters are fitted
//! by an ECM algorithm whose B-update is a penalized multitask least-squares
//! problem, solved here by coordinate descent for elastic-net, group-lasso
//! and network-regularized penalties.

pub mod em;
pub mod error;
pub mod estep;
mod kernel;
pub mod linalg;
pub mod model;
pub mod penalty;
pub mod select;
pub mod sim;
pub mod solver;
pub mod study;

pub use em::{fit, fit_fixed_effects, pvre, EmConfig, FitResult};
pub use error::{Error, Result};
pub use estep::PosteriorMoments;
pub use model::{loglik_gradient, marginal_loglik, penalized_loglik, predict, Group, GroupedDataset, ModelDims, ModelParams, RandomEffects};
pub use penalty::{penalty_value, PenaltySpec};
pub use solver::{Design, SolverConfig, SolverSolution};
