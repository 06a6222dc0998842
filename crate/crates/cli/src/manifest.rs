use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub featsteer: String,
    pub container_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            featsteer: env!("CARGO_PKG_VERSION").to_string(),
            container_format: featsteer::container::VERSION,
        }
    }
}

/// Written next to the outputs of every command as `<command>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Hash of the whole resolved config.
    pub config_hash: String,
    /// Hash of the config sections this command's outputs depend on.
    pub stage_hash: String,
    pub seed: u64,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    pub versions: Versions,
    pub wall_clock_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_layer: Option<usize>,
}

impl RunManifest {
    pub fn path(out: &Path, command: &str) -> std::path::PathBuf {
        out.join(format!("{command}.manifest.json"))
    }

    pub fn read(out: &Path, command: &str) -> Option<Self> {
        let text = std::fs::read_to_string(Self::path(out, command)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(Self::path(out, &self.command), text + "\n").map_err(|e| CliError::Io(e.to_string()))
    }

    /// True when every recorded artifact is still on disk with its recorded hash.
    pub fn artifacts_intact(&self, out: &Path) -> bool {
        self.artifacts
            .values()
            .all(|a| file_sha256(&out.join(&a.path)).is_ok_and(|h| h == a.sha256))
    }
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
