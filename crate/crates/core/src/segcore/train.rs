//! Supervised source pretraining: pixel-wise cross-entropy, Adam on all
//! parameters, BN in training mode.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::BnMode;
use super::model::{softmax_tensor, Model};
use super::tensor::Tensor;
use super::{normalize, LabelMap, SegError, SliceImage};
use crate::data::VolumeRecord;
use crate::metrics::{foreground_mean, DiceAccumulator};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Mean foreground DSC on held-out slices below which the run is
    /// flagged as not converged.
    pub dsc_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.005,
            batch_size: 8,
            seed: 0,
            dsc_threshold: 0.90,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct TrainLog {
    /// Mean training loss per epoch (nats).
    pub epoch_losses: Vec<f64>,
    /// Held-out Dice per class, background first.
    pub source_dsc_per_class: Vec<f64>,
    pub mean_dsc: f64,
    pub converged: bool,
}

fn labelled_slices(volumes: &[VolumeRecord]) -> Vec<(SliceImage, LabelMap)> {
    volumes
        .iter()
        .filter_map(|v| v.truth.as_ref().map(|t| (v, t)))
        .flat_map(|(v, t)| {
            v.slices
                .iter()
                .zip(t)
                .map(|(s, l)| (normalize(s).0, l.clone()))
        })
        .collect()
}

/// Held-out Dice of the model in evaluation mode (running statistics).
pub fn evaluate(model: &Model<f32>, volumes: &[VolumeRecord], mode: BnMode) -> Result<Vec<f64>, SegError> {
    let mut acc = DiceAccumulator::new(model.classes());
    for v in volumes {
        let Some(truth) = &v.truth else { continue };
        let images: Vec<_> = v.slices.iter().map(|s| normalize(s).0).collect();
        for (chunk, labels) in images.chunks(8).zip(truth.chunks(8)) {
            for (pm, t) in model.infer(chunk, mode)?.iter().zip(labels) {
                acc.add(&pm.argmax(), t);
            }
        }
    }
    Ok(acc.per_class())
}

/// Trains every parameter on labelled source volumes and fills the BN
/// running statistics. Zero epochs leaves the model untouched.
pub fn pretrain_source(
    model: &mut Model<f32>,
    train: &[VolumeRecord],
    holdout: &[VolumeRecord],
    cfg: &TrainConfig,
) -> Result<TrainLog, SegError> {
    let mut slices = labelled_slices(train);
    if slices.is_empty() {
        return Err(SegError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let targets = model.all_params().into_iter().collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        targets,
    );
    let classes = model.classes();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        slices.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in slices.chunks(cfg.batch_size.max(1)) {
            let images: Vec<_> = chunk.iter().map(|(s, _)| s.clone()).collect();
            let x = model.stack(&images)?;
            let out = model.forward(&x, BnMode::Train, true)?;
            let probs = softmax_tensor(&out.logits);
            let mut dlogits = Tensor::zeros(probs.n, probs.c, probs.h, probs.w);
            let plane = probs.plane();
            let scale = 1.0 / (probs.n * plane) as f32;
            let mut loss = 0.0f64;
            for (i, (_, labels)) in chunk.iter().enumerate() {
                let p = probs.image(i);
                let d = dlogits.image_mut(i);
                for (px, &l) in labels.labels.iter().enumerate() {
                    let l = l as usize;
                    loss -= (p[l * plane + px].max(1e-12) as f64).ln();
                    for c in 0..classes {
                        let onehot = if c == l { 1.0 } else { 0.0 };
                        d[c * plane + px] = (p[c * plane + px] - onehot) * scale;
                    }
                }
            }
            let trace = out.trace.as_ref().expect("trace requested");
            let grads = model.backward(trace, &dlogits, true);
            adam.step(model, &grads);
            model.update_running_stats(&out.bn_inputs, x.n * x.plane());
            total += loss / (probs.n * plane) as f64;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("pretrain epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
        model.mark_trained();
    }
    let source_dsc_per_class = evaluate(model, holdout, BnMode::Running)?;
    let mean_dsc = foreground_mean(&source_dsc_per_class);
    Ok(TrainLog {
        epoch_losses,
        converged: mean_dsc >= cfg.dsc_threshold,
        source_dsc_per_class,
        mean_dsc,
    })
}
