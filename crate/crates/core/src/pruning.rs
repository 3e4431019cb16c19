//! Batch pruning: rank the images of a batch by how far their BN statistics
//! sit from the source profile and keep the top K%.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::segcore::{BnStatsProfile, Model, SegError, SliceImage};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("K must lie in (0, 100], got {0}")]
    InvalidK(f64),
    #[error("non-finite Gaussian parameter")]
    NonFinite,
    #[error("profile shape mismatch: {0}")]
    ProfileMismatch(String),
    #[error("exp_decay needs a declared number of batches")]
    MissingHorizon,
    #[error(transparent)]
    Seg(#[from] SegError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMetric {
    #[default]
    Kl,
    L1,
    L2,
}

/// Argument order of the KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(source ‖ image).
    #[default]
    SourceFirst,
    /// KL(image ‖ source).
    TargetFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum PruningMode {
    /// Rank by BN-statistics divergence.
    #[default]
    Proposed,
    /// Uniformly random subset of the same size.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    /// Noise standard deviation as a fraction of the image's own std.
    pub noise_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            noise_frac: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default)]
pub struct PruneConfig {
    /// Percentage of each batch to keep, in (0, 100].
    #[serde(rename = "K")]
    pub k: f64,
    pub metric: DivergenceMetric,
    pub direction: KlDirection,
    pub mode: PruningMode,
    pub augmentation: AugmentConfig,
    pub min_selected: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            k: 100.0,
            metric: DivergenceMetric::Kl,
            direction: KlDirection::SourceFirst,
            mode: PruningMode::Proposed,
            augmentation: AugmentConfig::default(),
            min_selected: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceScore {
    pub image_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    /// Selected image indices, highest divergence first (ascending index in
    /// random mode).
    pub selected: Vec<usize>,
    /// One score per image, in batch order.
    pub scores: Vec<DivergenceScore>,
}

/// Seed derived from the image's identity (patient, slice, size) rather than
/// its batch position, so an image gets the same augmentation wherever it
/// sits. Pixel bytes are left out: renormalizing an offset copy perturbs the
/// low bits and would reseed the augmentation.
pub fn augment_seed(image: &SliceImage, salt: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(salt.to_le_bytes());
    h.update((image.height() as u64).to_le_bytes());
    h.update((image.width() as u64).to_le_bytes());
    h.update((image.slice_index as u64).to_le_bytes());
    h.update(image.patient_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Random horizontal flip followed by additive Gaussian noise scaled to the
/// image's standard deviation. Deterministic in `seed`.
pub fn augment(image: &SliceImage, cfg: &AugmentConfig, seed: u64) -> SliceImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (image.width(), image.height());
    let flip = cfg.flip_p > 0.0 && rng.random_bool(cfg.flip_p.min(1.0));
    let src = image.pixels();
    let mut px: Vec<f32> = if flip {
        (0..h * w).map(|i| src[(i / w) * w + (w - 1 - i % w)]).collect()
    } else {
        src.to_vec()
    };
    let sigma = cfg.noise_frac * image.moments().1.sqrt();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("sigma is finite and positive");
        for v in &mut px {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    image.with_pixels(px)
}

/// KL(N(mu1, var1) ‖ N(mu2, var2)) in nats.
pub fn gaussian_kl(mu1: f64, var1: f64, mu2: f64, var2: f64) -> Result<f64, PruneError> {
    if ![mu1, var1, mu2, var2].iter().all(|v| v.is_finite()) || var1 <= 0.0 || var2 <= 0.0 {
        return Err(PruneError::NonFinite);
    }
    Ok(0.5 * (var2 / var1).ln() + (var1 + (mu1 - mu2).powi(2)) / (2.0 * var2) - 0.5)
}

/// Divergence between the source profile and one image's probe, summed over
/// every layer and channel.
pub fn batch_divergence(
    source: &BnStatsProfile,
    probe: &BnStatsProfile,
    metric: DivergenceMetric,
    direction: KlDirection,
) -> Result<f64, PruneError> {
    if source.layers.len() != probe.layers.len() {
        return Err(PruneError::ProfileMismatch(format!(
            "{} layers vs {}",
            source.layers.len(),
            probe.layers.len()
        )));
    }
    let mut total = 0.0;
    for (s, p) in source.layers.iter().zip(&probe.layers) {
        if s.channel_means.len() != p.channel_means.len()
            || s.channel_vars.len() != p.channel_vars.len()
        {
            return Err(PruneError::ProfileMismatch(format!(
                "layer {} has {} channels vs {}",
                s.layer_id,
                s.channel_means.len(),
                p.channel_means.len()
            )));
        }
        for c in 0..s.channel_means.len() {
            let (ms, vs) = (s.channel_means[c], s.channel_vars[c]);
            let (mp, vp) = (p.channel_means[c], p.channel_vars[c]);
            total += match metric {
                DivergenceMetric::Kl => match direction {
                    KlDirection::SourceFirst => gaussian_kl(ms, vs, mp, vp)?,
                    KlDirection::TargetFirst => gaussian_kl(mp, vp, ms, vs)?,
                },
                DivergenceMetric::L1 => (ms - mp).abs() + (vs - vp).abs(),
                DivergenceMetric::L2 => (ms - mp).powi(2) + (vs - vp).powi(2),
            };
        }
    }
    if metric == DivergenceMetric::L2 {
        total = total.sqrt();
    }
    if !total.is_finite() {
        return Err(PruneError::NonFinite);
    }
    Ok(total)
}

/// `max(min_selected, ceil(K·B/100))`, capped at B. Zero for an empty batch.
pub fn selection_count(k: f64, batch: usize, min_selected: usize) -> usize {
    if batch == 0 {
        return 0;
    }
    // The epsilon keeps e.g. 10% of 10 at exactly 1 despite rounding noise.
    let raw = (k * batch as f64 / 100.0 - 1e-9).ceil().max(0.0) as usize;
    raw.max(min_selected).min(batch)
}

/// Scores every image on an augmented copy and keeps the top K%.
///
/// `seed` salts the per-image augmentation seed, which otherwise depends
/// only on the image identity.
pub fn prune_batch(
    model: &Model<f32>,
    batch: &[SliceImage],
    config: &PruneConfig,
    seed: u64,
) -> Result<PruneOutcome, PruneError> {
    if !(config.k > 0.0 && config.k <= 100.0) {
        return Err(PruneError::InvalidK(config.k));
    }
    let source = model.source_stats();
    let mut scores = Vec::with_capacity(batch.len());
    for (i, img) in batch.iter().enumerate() {
        let aug = augment(img, &config.augmentation, augment_seed(img, seed));
        let probe = model.probe_bn_stats(&aug)?;
        scores.push(DivergenceScore {
            image_index: i,
            score: batch_divergence(&source, &probe, config.metric, config.direction)?,
        });
    }
    let n = selection_count(config.k, batch.len(), config.min_selected);
    let selected = match config.mode {
        PruningMode::Proposed => top_indices(&scores, n),
        PruningMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, batch.len(), n).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    Ok(PruneOutcome { selected, scores })
}

/// Indices of the `n` largest scores, descending, ties to the lower index.
pub fn top_indices(scores: &[DivergenceScore], n: usize) -> Vec<usize> {
    let mut order: Vec<&DivergenceScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image_index.cmp(&b.image_index))
    });
    order.into_iter().take(n).map(|s| s.image_index).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    #[default]
    Constant,
    ExpDecay,
}

/// Fraction of the stream after which exponential decay stops annotation.
pub const DECAY_CUTOFF: f64 = 0.6;

/// Effective K for the batch at 0-based position `batch_index`.
///
/// `exp_decay` uses `K0·exp(−γt)` with `γ = ln(2·K0) / (0.6·T)`, so K has
/// fallen to 0.5 when annotation stops, and returns 0 from `t ≥ 0.6·T` on.
pub fn decay_schedule(
    k0: f64,
    batch_index: usize,
    total_batches: Option<usize>,
    mode: DecayMode,
) -> Result<f64, PruneError> {
    if !(k0 > 0.0 && k0 <= 100.0) {
        return Err(PruneError::InvalidK(k0));
    }
    match mode {
        DecayMode::Constant => Ok(k0),
        DecayMode::ExpDecay => {
            let total = total_batches.filter(|&t| t > 0).ok_or(PruneError::MissingHorizon)?;
            let stop = DECAY_CUTOFF * total as f64;
            let t = batch_index as f64;
            if t >= stop {
                return Ok(0.0);
            }
            let gamma = (2.0 * k0).ln() / stop;
            Ok(k0 * (-gamma * t).exp())
        }
    }
}
