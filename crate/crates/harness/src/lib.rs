//! Headless experiment driver around `odes-core`.
//!
//! [`config::ExperimentConfig`] describes data, model, training and
//! adaptation; [`experiment`] pretrains and runs seeded streams with the
//! oracle annotator; [`report`] turns event logs into CSV tables and SVG
//! plots.

use std::path::{Path, PathBuf};

use odes_core::adaptation::AdaptError;
use odes_core::data::DataError;
use odes_core::segcore::SegError;
use thiserror::Error;

pub mod config;
pub mod experiment;
pub mod manifest;
pub mod report;

pub use config::{under_output_root, DataConfig, ExperimentConfig, StreamConfig, OUTPUT_ROOT_ENV};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("path does not exist: {}", .0.display())]
    MissingPath(PathBuf),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot parse {}: {source}", path.display())]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint {} does not match the configured architecture: {detail}", path.display())]
    ArchMismatch { path: PathBuf, detail: String },
    #[error("no event logs given")]
    NoLogs,
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("plot {}: {message}", path.display())]
    Plot { path: PathBuf, message: String },
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for bad input or configuration, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::MissingPath(_)
            | Self::Config(_)
            | Self::ConfigParse { .. }
            | Self::ArchMismatch { .. }
            | Self::NoLogs
            | Self::Data(_) => 2,
            Self::Seg(SegError::Config(_) | SegError::Checkpoint(_)) => 2,
            _ => 1,
        }
    }
}
