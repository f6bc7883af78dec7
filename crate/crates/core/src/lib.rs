//! Estimation and inference for optimal linear treatment regimes.
//!
//! A regime treats when `xᵀβ > 0` with `‖β‖ = 1`. The value of a regime is
//! estimated with an augmented inverse-probability-weighted criterion, maximized
//! over the sphere, and the maximizer is bootstrapped with a reshaped objective
//! that corrects the cube-root asymptotics of the plain bootstrap.

pub mod aipw;
pub mod bootstrap;
pub mod cli;
pub mod data;
pub mod error;
pub mod nuisance;
pub mod report;
pub mod search;
pub mod simulation;

pub use aipw::{value, value_ci, AipwObjective, Objective, ValueReport};
pub use data::{load_csv, ColumnConfig, Dataset, RegimeParameter};
pub use error::{Error, Result};
pub use nuisance::{EstimatorSpec, Method, NuisanceEstimator, NuisanceFit};
pub use search::{search, SearchConfig, SearchResult};
