//! Mixed model trace regression: scalar responses with matrix-valued fixed-
//! and random-effect covariates, a sparse mean matrix and a low-rank
//! Kronecker-separable random-effect covariance, fitted by a regularized
//! three-cycle AECM algorithm.
//!
//! Modules build on each other bottom-up: [`numerics`] → [`solvers`] →
//! [`model`] → [`aecm`] → [`sim`].

pub mod aecm;
pub mod error;
pub mod model;
pub mod numerics;
pub mod sim;
pub mod solvers;

pub use aecm::{fit, fit_from, tune, FitConfig, FitReport, GridCell, Selection, TraceRow, TuneGrid, TuneResult};
pub use error::{MmtrError, Result};
pub use model::{Dims, GroupData, ModelParams, PosteriorMoments, PredictMode, TraceDataset, CycleSystem};
pub use numerics::{Mat, PsdSqrt};
pub use sim::{EquicorrScenario, MmtrScenario, ReplicationTable, Scenario, TruthBundle, TruthKind};
pub use solvers::SolverOptions;
