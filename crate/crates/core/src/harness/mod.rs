//! Experiment configuration, orchestration and the command-line front end.

pub mod cli;
mod config;
mod experiments;
mod output;

pub use config::{ExperimentConfig, FedConfig, SUPERVISION_LEVELS};
pub use experiments::{
    client_validation, evaluate, learn_for_seed, load_checkpoint, random_pair_entries, run_ablation, run_fed,
    run_static_vs_random, run_supervision, run_topk_sweep, run_tta, static_bank, subsample, AblationRow, Arm,
    FedOutcome, StaticVsRandomRow, SupervisionRow, TopkRow,
};
pub use output::{write_csv, CsvTable};

use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::backbone::BackboneError;
use crate::controller::ControllerError;
use crate::fedsim::FedError;
use crate::memory::MemoryError;
use crate::synthdata::SynthError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("checkpoint not found at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("checkpoint at {0} is not frozen")]
    CheckpointNotFrozen(PathBuf),
    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 3 for failures
    /// while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::ConfigInvalid(_) => 2,
            _ => 3,
        }
    }
}
