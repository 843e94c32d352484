//! Ridge-leverage-score sampling for featurized kernels, exact NTK kernel
//! ridge regression, and a two-layer ReLU trainer with the diagnostics needed
//! to compare the two.
//!
//! The [`harness`] module wires these pieces into reproducible experiments
//! that emit JSON reports; the `ntklev` binary is a thin front end over it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod harness;
pub mod kernels;
pub mod krr;
pub mod nn;
pub mod rng;

#[cfg(test)]
mod oracle;

pub use config::{ExperimentConfig, FeatureFamilyName, InitScheme, LambdaRule};
pub use data::{generate_dataset, validate_dataset, Dataset, Violation};
pub use error::{Error, Result};
pub use features::{FeatureFamily, FeatureMatrix, FeatureSample};
pub use harness::{ExperimentKind, ExperimentReport, Gate};
pub use krr::{KrrSolution, KrrTrajectory};
pub use nn::{TrainRecord, TwoLayerNet};

pub use kernels::{KernelKind, KernelMatrix, RegularizedKernel, SandwichCertificate};

pub use rng::SeedStream;
