use std::fs;
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::experiment::write_json;
use crate::{ExperimentConfig, HarnessError};

pub const MANIFEST_FILE: &str = "manifest.json";

/// What a run needs to be replayed: the resolved config, the code version
/// and the checkpoint digest. Everything runs on one thread, so replaying
/// the same manifest reproduces the event logs byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_sha256: Option<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Self, HarnessError> {
        let checkpoint_sha256 = match checkpoint {
            Some(p) => Some(hex::encode(Sha256::digest(
                fs::read(p).map_err(|e| HarnessError::io(p, e))?,
            ))),
            None => None,
        };
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: cfg.clone(),
            seeds: cfg.seeds.clone(),
            checkpoint: checkpoint.map(Path::to_path_buf),
            checkpoint_sha256,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, HarnessError> {
        let path = dir.join(MANIFEST_FILE);
        write_json(&path, self)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| HarnessError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })
    }
}
