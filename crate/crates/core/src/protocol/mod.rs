//! Trainer, auditor, threshold search and log-size estimation.

mod config;
mod engine;
mod estimate;
mod threshold;

use std::io;

use thiserror::Error;

use crate::fpround::RoundError;
use crate::merkle::MerkleError;
use crate::roundlog::LogError;
use crate::simnet::SimError;

pub use config::{DataSpec, TauPolicy, TrainConfig, BCE_TAU_KEY};
pub use engine::{
    audit, audit_file, audit_with, audit_without_corrections, audit_without_corrections_with,
    l2_series, train, train_file, train_with, training_data, weight_l2_distance, AuditOutput,
    Phase, RunOptions, RunOutput, StepStats, TrainOutput, WeightTamper,
};
pub use estimate::{estimate_log_entries, step_entries, StorageEstimate};
pub use threshold::{collect_divergence, search_tau, threshold_search, DivergenceSample};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("numeric failure at step {step}: {source}")]
    Numeric { step: usize, source: RoundError },
    #[error("operation-count mismatch: {0}")]
    OperationCountMismatch(String),
    #[error("rounding log does not match the config: {0}")]
    LogMismatch(String),
    #[error("weights have different shapes")]
    ShapeMismatch,
    #[error(transparent)]
    Round(#[from] RoundError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Merkle(#[from] MerkleError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ProtocolError {
    fn at_step(self, step: usize) -> Self {
        match self {
            ProtocolError::Round(source) => ProtocolError::Numeric { step, source },
            other => other,
        }
    }
}
