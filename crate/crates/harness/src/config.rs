use std::fs;
use std::path::{Path, PathBuf};

use odes_core::adaptation::AdaptConfig;
use odes_core::data::{BatchPolicy, GenConfig, ShiftSpec};
use odes_core::segcore::{ArchConfig, TrainConfig};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// Environment variable that, when set, prefixes a relative `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "ODES_OUTPUT_ROOT";

/// `path` under `$ODES_OUTPUT_ROOT` when that is set and `path` is relative.
pub fn under_output_root(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Where volumes come from. A directory, when given, holds one volume
/// directory per patient and replaces the generator for that split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub generator: GenConfig,
    pub source_volumes: usize,
    pub source_seed: u64,
    pub holdout_volumes: usize,
    pub holdout_seed: u64,
    pub target_volumes: usize,
    /// Run seed `s` generates its target cohort from `target_seed + s`.
    pub target_seed: u64,
    pub source_dir: Option<PathBuf>,
    pub holdout_dir: Option<PathBuf>,
    /// Already shifted target volumes; the shift spec is not applied again.
    pub target_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: GenConfig::default(),
            source_volumes: 12,
            source_seed: 100,
            holdout_volumes: 3,
            holdout_seed: 200,
            target_volumes: 10,
            target_seed: 5000,
            source_dir: None,
            holdout_dir: None,
            target_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub batch_size: usize,
    pub policy: BatchPolicy,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            policy: BatchPolicy::PerPatient,
        }
    }
}

/// Everything one experiment needs. Every field has a default, so a config
/// file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Name of the configuration in summaries and reports.
    pub label: String,
    pub data: DataConfig,
    /// Target-domain shift; run seed `s` uses `shift.seed + s`.
    pub shift: ShiftSpec,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub stream: StreamConfig,
    pub seeds: Vec<u64>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            label: "odes".into(),
            data: DataConfig::default(),
            shift: ShiftSpec::strong(1000),
            model: ArchConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            stream: StreamConfig::default(),
            seeds: (0..5).collect(),
            checkpoint: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config file. Missing keys take their defaults.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => HarnessError::MissingPath(path.to_path_buf()),
            _ => HarnessError::io(path, e),
        })?;
        serde_json::from_str(&text).map_err(|source| HarnessError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the config
    /// (`adapt.K`, `stream.batch_size`); values are JSON, or a plain string
    /// when they do not parse as JSON.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, HarnessError> {
        let mut value = serde_json::to_value(self).expect("configs serialize");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override {o:?} is not key=value")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut value;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| HarnessError::Config(format!("unknown config key {key:?}")))?;
            }
            *slot = parsed;
        }
        serde_json::from_value(value).map_err(|e| HarnessError::Config(format!("after overrides: {e}")))
    }

    /// `output_dir`, under `$ODES_OUTPUT_ROOT` when that is set and the
    /// directory is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        under_output_root(&self.output_dir)
    }

    /// Structural checks plus existence of every referenced input path.
    /// `need_checkpoint` is set by commands that load a trained model.
    pub fn validate(&self, need_checkpoint: bool) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        if self.stream.batch_size == 0 {
            return Err(HarnessError::Config("stream.batch_size must be at least 1".into()));
        }
        if self.adapt.cycles == 0 {
            return Err(HarnessError::Config("adapt.cycles must be at least 1".into()));
        }
        if !(self.adapt.k > 0.0 && self.adapt.k <= 100.0) {
            return Err(HarnessError::Config(format!("adapt.K must be in (0, 100], got {}", self.adapt.k)));
        }
        if !(self.adapt.b > 0.0 && self.adapt.b <= 100.0) {
            return Err(HarnessError::Config(format!("adapt.b must be in (0, 100], got {}", self.adapt.b)));
        }
        if self.adapt.patch_side < 3 || self.adapt.patch_side % 2 == 0 {
            return Err(HarnessError::Config(format!(
                "adapt.patch_side must be odd and at least 3, got {}",
                self.adapt.patch_side
            )));
        }
        self.model.validate()?;
        self.shift.validate()?;
        let dirs = [&self.data.source_dir, &self.data.holdout_dir, &self.data.target_dir];
        for p in dirs.into_iter().flatten() {
            if !p.is_dir() {
                return Err(HarnessError::MissingPath(p.clone()));
            }
        }
        match (&self.checkpoint, need_checkpoint) {
            (Some(p), _) if need_checkpoint && !p.is_file() => Err(HarnessError::MissingPath(p.clone())),
            (None, true) => Err(HarnessError::Config("a checkpoint path is required".into())),
            _ => Ok(()),
        }
    }
}
