use std::path::Path;

use featsteer::subject::{DatasetConfig, SubjectConfig};
use featsteer::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// One self-describing run configuration. `seed` builds the subject and,
/// offset by one, draws the dataset; training has its own seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub subject: SubjectConfig,
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Finite-difference probes for `gradcheck` and `train --grad-check`.
    pub grad_check_probes: usize,
    /// Layers for `sweep`; empty means every layer.
    pub sweep_layers: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grad_check_probes: 60,
            sweep_layers: Vec::new(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            subject: SubjectConfig::default(),
            data: DatasetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub layer: Option<usize>,
    pub tau: Option<f64>,
}

/// Which part of the pipeline an artifact depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Train,
    Run,
}

impl RunConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.extension().is_some_and(|e| e == "json"))
    }

    pub fn parse(text: &str, json: bool) -> Result<Self, CliError> {
        if json {
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(layer) = o.layer {
            self.train.site.layer = layer;
        }
        if let Some(tau) = o.tau {
            self.train.tau = tau;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: featsteer::Error| CliError::Config(e.to_string());
        self.subject.validate().map_err(cfg)?;
        for (name, n) in [("data.n_pos", self.data.n_pos), ("data.n_neg", self.data.n_neg)] {
            if n == 0 {
                return Err(CliError::Config(format!("{name} must be positive")));
            }
        }
        if self.data.n_test_neg == 0 {
            return Err(CliError::Config("data.n_test_neg must be positive".into()));
        }
        self.train.validate(self.subject.dim).map_err(cfg)?;
        if self.train.site.layer >= self.subject.layers {
            return Err(CliError::Config(format!(
                "train.site.layer {} is out of range for {} layers",
                self.train.site.layer, self.subject.layers
            )));
        }
        if let Some(&l) = self.eval.sweep_layers.iter().find(|&&l| l >= self.subject.layers) {
            return Err(CliError::Config(format!("eval.sweep_layers contains {l}, out of range")));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    /// SHA-256 of the canonical JSON of the sections `stage` depends on.
    pub fn hash(&self, stage: Stage) -> String {
        let value = match stage {
            Stage::Generate => serde_json::json!([self.seed, self.subject, self.data]),
            Stage::Train => serde_json::json!([self.seed, self.subject, self.data, self.train]),
            Stage::Run => serde_json::to_value(self).expect("config serializes"),
        };
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}
