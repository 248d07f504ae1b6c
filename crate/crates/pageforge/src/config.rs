//! Loading pipeline configuration files.

use std::path::Path;

use pageforge_core::pipeline::PipelineConfig;
use sha2::{Digest, Sha256};

use crate::dataset::read_json;
use crate::error::{Error, Result};

/// Reads and validates a JSON pipeline config; missing sections and keys
/// take their defaults.
pub fn load(path: &Path) -> Result<PipelineConfig> {
    if !path.is_file() {
        return Err(Error::Usage(format!(
            "config file {} does not exist",
            path.display()
        )));
    }
    let cfg: PipelineConfig = read_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Hex SHA-256 of the config's canonical JSON.
pub fn hash(cfg: &PipelineConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
