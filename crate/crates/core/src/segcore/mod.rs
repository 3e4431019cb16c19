//! Segmentation network abstraction with batch-normalization instrumentation.
//!
//! The default network is a small 2-D encoder-decoder (conv + BN + ReLU per
//! stage, skip connections, 1x1 softmax head). Everything downstream only
//! needs [`Model::infer`], [`Model::probe_bn_stats`], [`Model::source_stats`]
//! and the BN/non-BN [`ParamPartition`], so a larger backbone can be slotted
//! in behind the same surface.

mod checkpoint;
mod layers;
mod model;
mod tensor;
mod train;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};
pub use layers::{BatchNorm2d, BnCache, BnMode, ChannelStats, Conv2d, VARIANCE_FLOOR};
pub use model::{
    softmax_tensor, ArchConfig, ConvBlock, ForwardOutput, ForwardTrace, HeadInit, Model,
    ModelGrads, ParamId, ParamPartition,
};
pub use tensor::{Real, Tensor};
pub use train::{evaluate, pretrain_source, TrainConfig, TrainLog};


/// Minimum image side accepted by [`SliceImage::new`].
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid image: {0}")]
    Image(String),
    #[error("invalid probability map: {0}")]
    Probabilities(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One 2-D slice of a volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    pub patient_id: String,
    pub slice_index: usize,
}

impl SliceImage {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<f32>,
        patient_id: impl Into<String>,
        slice_index: usize,
    ) -> Result<Self, SegError> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(SegError::Image(format!(
                "{height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if pixels.len() != height * width {
            return Err(SegError::Image(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(SegError::Image(format!("non-finite intensity at {i}")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            patient_id: patient_id.into(),
            slice_index,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major intensities.
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Same metadata, new intensities. Panics on a length mismatch.
    pub fn with_pixels(&self, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), self.pixels.len(), "pixel count");
        Self {
            pixels,
            ..self.clone()
        }
    }

    /// Mean and population variance of the intensities.
    pub fn moments(&self) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .pixels
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean, var)
    }
}

/// Per-image zero-mean, unit-variance normalization.
///
/// Returns the image and whether it was degenerate (variance below the
/// floor), in which case the output is all zeros.
pub fn normalize(image: &SliceImage) -> (SliceImage, bool) {
    let (mean, var) = image.moments();
    if var < VARIANCE_FLOOR {
        return (image.with_pixels(vec![0.0; image.pixels.len()]), true);
    }
    let inv = 1.0 / var.sqrt();
    let px = image
        .pixels
        .iter()
        .map(|&v| ((v as f64 - mean) * inv) as f32)
        .collect();
    (image.with_pixels(px), false)
}

/// Per-pixel class probabilities, `classes x height x width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMap {
    classes: usize,
    height: usize,
    width: usize,
    probs: Vec<f32>,
}

impl ProbMap {
    /// Validates that every pixel holds a distribution over at least two classes.
    pub fn from_raw(
        classes: usize,
        height: usize,
        width: usize,
        probs: Vec<f32>,
    ) -> Result<Self, SegError> {
        if classes < 2 {
            return Err(SegError::Probabilities("need ≥2 classes".into()));
        }
        if probs.len() != classes * height * width {
            return Err(SegError::Probabilities("length mismatch".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SegError::Probabilities("value outside [0,1]".into()));
        }
        let map = Self {
            classes,
            height,
            width,
            probs,
        };
        for y in 0..height {
            for x in 0..width {
                let s: f64 = (0..classes).map(|c| map.get(x, y, c) as f64).sum();
                if (s - 1.0).abs() > 1e-5 {
                    return Err(SegError::Probabilities(format!(
                        "pixel ({x},{y}) sums to {s}"
                    )));
                }
            }
        }
        Ok(map)
    }

    /// Builds a map where every pixel carries the same distribution.
    pub fn constant(height: usize, width: usize, dist: &[f32]) -> Result<Self, SegError> {
        let plane = height * width;
        let mut probs = Vec::with_capacity(dist.len() * plane);
        for &p in dist {
            probs.extend(std::iter::repeat_n(p, plane));
        }
        Self::from_raw(dist.len(), height, width, probs)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.probs[(c * self.height + y) * self.width + x]
    }

    /// Channel-major raw storage.
    pub fn raw(&self) -> &[f32] {
        &self.probs
    }

    /// Pseudo-labels; ties resolve to the lower class index.
    pub fn argmax(&self) -> LabelMap {
        let plane = self.height * self.width;
        let labels = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.probs[c * plane + p] > self.probs[best * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}

/// Class index per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self, SegError> {
        if labels.len() != height * width {
            return Err(SegError::Shape(format!(
                "{} labels for {height}x{width}",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.labels[y * self.width + x] = class;
    }

    pub fn max_class(&self) -> Option<u8> {
        self.labels.iter().copied().max()
    }
}

/// Gaussian statistics of one BN layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer_id: usize,
    pub channel_means: Vec<f64>,
    /// Floored at [`VARIANCE_FLOOR`].
    pub channel_vars: Vec<f64>,
}

/// Per-layer, per-channel (mean, variance) of a model or an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStatsProfile {
    pub layers: Vec<LayerStats>,
    /// Set when the statistics come from a model that never saw training data.
    pub untrained: bool,
}

impl BnStatsProfile {
    pub fn channel_count(&self) -> usize {
        self.layers.iter().map(|l| l.channel_means.len()).sum()
    }

    /// SHA-256 over the little-endian means and variances.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            h.update((l.layer_id as u64).to_le_bytes());
            for v in l.channel_means.iter().chain(&l.channel_vars) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Builds a model from a config; alias kept for symmetry with the other
/// module-level operations.
pub fn build_model(arch: &ArchConfig, seed: u64) -> Result<Model<f32>, SegError> {
    Model::build(arch, seed)
}
