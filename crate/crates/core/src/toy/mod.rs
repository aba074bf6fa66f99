//! Desk-scale testbed: synthetic shifted domains, a rectifier MLP trained by
//! SGD, Fisher estimation, ensemble evaluation and scripted merge experiments.

pub mod data;
pub mod experiment;
pub mod model;
pub mod train;

use thiserror::Error;

use crate::alignment::AlignmentError;
use crate::checkpoint::CheckpointError;
use crate::discrepancy::DiscrepancyError;
use crate::merge::MergeError;

pub use data::{make_domain_pair, sample_domain, DomainShift, ToyDataset};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport, StrategyName};
pub use model::{DenseLayer, ToyModel};
pub use train::{accuracy, ensemble_accuracy, estimate_fisher, evaluate, train, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("not a toy model checkpoint: {0}")]
    InvalidModel(String),
    #[error("training diverged to a non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("non-finite gradient while estimating Fisher information")]
    NonFiniteGradient,
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Discrepancy(#[from] DiscrepancyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
