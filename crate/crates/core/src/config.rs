//! Serializable run configuration. A run is reproducible from its snapshot
//! plus the case file it names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acopf::SolverConfig;
use crate::dynamics::DynamicsConfig;
use crate::dynopf::TrainerConfig;
use crate::node::{NodeConfig, NodeTrainConfig};
use crate::CoreError;

/// Name of the snapshot file written into every output directory.
pub const SNAPSHOT_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Bundled case name or path to a case file.
    pub case: String,
    pub seed: u64,
    pub samples: usize,
    /// Relative load perturbation half-width.
    pub perturb: f64,
    pub node_samples: usize,
    pub solver: SolverConfig,
    pub dynamics: DynamicsConfig,
    pub node: NodeConfig,
    pub node_train: NodeTrainConfig,
    pub trainer: TrainerConfig,
    /// Directory holding the OPF dataset, when the run consumes one.
    pub data_dir: Option<PathBuf>,
    /// Directory holding pretrained surrogate checkpoints.
    pub node_dir: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            case: "wscc9".into(),
            seed: 0,
            samples: 1000,
            perturb: 0.2,
            node_samples: 2000,
            solver: SolverConfig::default(),
            dynamics: DynamicsConfig::default(),
            node: NodeConfig::default(),
            node_train: NodeTrainConfig::default(),
            trainer: TrainerConfig::default(),
            data_dir: None,
            node_dir: None,
            output: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn to_json(&self) -> Result<String, CoreError> {
        serde_json::to_string_pretty(self).map_err(|e| CoreError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, CoreError> {
        serde_json::from_str(text).map_err(|e| CoreError::Format(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Writes the snapshot into `dir`, creating it if needed.
    pub fn save_snapshot(&self, dir: &Path) -> Result<(), CoreError> {
        std::fs::create_dir_all(dir)?;
        Ok(std::fs::write(dir.join(SNAPSHOT_FILE), self.to_json()?)?)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String, CoreError> {
        let text = serde_json::to_string(self).map_err(|e| CoreError::Format(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json_and_partial_files() {
        let mut c = RunConfig::default();
        c.trainer.rho = 0.25;
        c.dynamics.clearing_time = 0.1;
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        let partial = RunConfig::from_json(r#"{"samples": 12, "trainer": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.samples, 12);
        assert_eq!(partial.trainer.epochs, 3);
        assert_eq!(partial.trainer.batch, TrainerConfig::default().batch);
        assert!(RunConfig::from_json("{").is_err());
    }
}
