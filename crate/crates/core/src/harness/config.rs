use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::backbone::{ArchConstants, PretrainConfig};
use crate::controller::ControllerConfig;
use crate::memory::{StaticConfig, WorkingMemoryConfig};
use crate::synthdata::DataConfig;

pub const SUPERVISION_LEVELS: [f64; 3] = [1.0, 0.3, 0.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub bytes_per_param: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: 4,
            rounds: 50,
            local_steps: 6,
            bytes_per_param: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Seeds for the multi-seed experiments (eval, ablate, topk-sweep, fed).
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub arch: ArchConstants,
    /// Pretrained weights, relative paths resolved against the config file.
    pub checkpoint: PathBuf,
    pub pretrain: PretrainConfig,
    pub static_memory: StaticConfig,
    pub working_memory: WorkingMemoryConfig,
    pub controller: ControllerConfig,
    pub fed: FedConfig,
    pub supervision_fraction: f64,
    pub topk: Vec<usize>,
    pub eval_window: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            data: DataConfig::default(),
            arch: ArchConstants::current(),
            checkpoint: PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/pretrained.json")),
            pretrain: PretrainConfig::default(),
            static_memory: StaticConfig::default(),
            working_memory: WorkingMemoryConfig::default(),
            controller: ControllerConfig::default(),
            fed: FedConfig::default(),
            supervision_fraction: 1.0,
            topk: vec![1, 2, 4, 8],
            eval_window: 50,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| HarnessError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        if cfg.checkpoint.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.checkpoint = dir.join(&cfg.checkpoint);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let invalid = |m: String| Err(HarnessError::ConfigInvalid(m));
        if !SUPERVISION_LEVELS.contains(&self.supervision_fraction) {
            return invalid(format!(
                "supervision_fraction {} must be one of 1.0, 0.3, 0.1",
                self.supervision_fraction
            ));
        }
        if self.arch != ArchConstants::current() {
            return invalid(format!("arch constants {:?} differ from the compiled model", self.arch));
        }
        if self.seeds.is_empty() || self.topk.is_empty() || self.topk.contains(&0) {
            return invalid("seeds and topk must be nonempty, k >= 1".into());
        }
        if self.eval_window == 0 {
            return invalid("eval_window must be positive".into());
        }
        if self.static_memory.n == 0 || self.static_memory.batch_size == 0 {
            return invalid("static memory needs n >= 1 and batch_size >= 1".into());
        }
        if self.fed.clients == 0 || self.fed.rounds == 0 || self.fed.local_steps == 0 || self.fed.bytes_per_param == 0 {
            return invalid("fed settings must be positive".into());
        }
        if self.pretrain.batch_size == 0 || !(0.0..=1.0).contains(&self.pretrain.support_free_prob) {
            return invalid("pretrain needs batch_size >= 1 and support_free_prob in [0, 1]".into());
        }
        if self.fed.clients != self.data.n_clients {
            return invalid("fed.clients must equal data.n_clients".into());
        }
        self.data
            .validate()
            .map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        self.working_memory
            .validate()
            .map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        self.controller
            .validate()
            .map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form. The
    /// output directory is excluded so the same experiment hashes the same
    /// wherever it writes.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
            obj.remove("checkpoint");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
