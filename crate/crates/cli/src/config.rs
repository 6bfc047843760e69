use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use jepa_dna::eval::ProbeConfig;
use jepa_dna::genomics_io::{ChunkConfig, SyntheticSpec};
use jepa_dna::model::ModelConfig;
use jepa_dna::trainer::TrainConfig;

/// Everything a command may read from `--config`. Absent sections keep
/// their defaults; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub chunk: ChunkConfig,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("config {}", path.display()))
    }

    /// Hex SHA-256 of the canonical JSON form. Field order is fixed by the
    /// struct definitions and floats print in shortest round-trip form, so
    /// the digest does not depend on the platform.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}
