//! Volumes, synthetic source/target generation and stream assembly.

mod io;
mod stream;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segcore::{LabelMap, SliceImage};

pub use io::{load_volume, save_volume, VolumeMeta, LABELS_FILE, META_FILE, PIXELS_FILE};
pub use stream::{make_stream, Batch, BatchPolicy};
pub use synth::{
    apply_shift, generate_synthetic_volume, synthetic_cohort, GenConfig, ShiftSpec, CLASS_NAMES,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("sha256 mismatch for {array}: expected {expected}, found {found}")]
    Digest {
        array: String,
        expected: String,
        found: String,
    },
    #[error("{array} is truncated: expected {expected} bytes, found {found}")]
    Truncated {
        array: String,
        expected: usize,
        found: usize,
    },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("generator: {0}")]
    Generator(String),
    #[error("invalid volume: {0}")]
    Invalid(String),
}

impl DataError {
    /// Stable machine-readable code per failure class.
    pub fn code(&self) -> &'static str {
        match self {
            DataError::Io { .. } => "io",
            DataError::Digest { .. } => "digest_mismatch",
            DataError::Truncated { .. } => "truncated",
            DataError::Schema(_) => "schema_violation",
            DataError::Generator(_) => "generator",
            DataError::Invalid(_) => "invalid_volume",
        }
    }
}

/// One patient's ordered stack of slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub patient_id: String,
    pub slices: Vec<SliceImage>,
    pub truth: Option<Vec<LabelMap>>,
    pub domain_tag: String,
    /// Number of classes the labels are drawn from.
    pub classes: usize,
}

impl VolumeRecord {
    pub fn height(&self) -> usize {
        self.slices.first().map_or(0, |s| s.height())
    }

    pub fn width(&self) -> usize {
        self.slices.first().map_or(0, |s| s.width())
    }

    /// Checks ordering, shapes and label alignment.
    pub fn validate(&self) -> Result<(), DataError> {
        let (h, w) = (self.height(), self.width());
        for (i, s) in self.slices.iter().enumerate() {
            if s.slice_index != i {
                return Err(DataError::Invalid(format!(
                    "slice {i} carries index {}",
                    s.slice_index
                )));
            }
            if s.height() != h || s.width() != w {
                return Err(DataError::Invalid(format!("slice {i} has a different shape")));
            }
            if s.patient_id != self.patient_id {
                return Err(DataError::Invalid(format!("slice {i} belongs to another patient")));
            }
        }
        if let Some(truth) = &self.truth {
            if truth.len() != self.slices.len() {
                return Err(DataError::Invalid("truth not aligned with slices".into()));
            }
            for (i, t) in truth.iter().enumerate() {
                if t.height != h || t.width != w {
                    return Err(DataError::Invalid(format!("label map {i} has a different shape")));
                }
                if t.labels.iter().any(|&l| l as usize >= self.classes) {
                    return Err(DataError::Invalid(format!("label map {i} has an invalid class")));
                }
            }
        }
        Ok(())
    }
}
