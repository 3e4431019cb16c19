//! Encoder-decoder segmentation network with instrumented BN layers.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    maxpool2, maxpool2_backward, relu_backward, relu_inplace, upsample2, upsample2_backward,
    BatchNorm2d, BnCache, BnMode, ChannelStats, Conv2d, VARIANCE_FLOOR,
};
use super::tensor::{Real, Tensor};
use super::{BnStatsProfile, LayerStats, ProbMap, SegError, SliceImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Uniform in `±1/sqrt(fan_in)`.
    #[default]
    Uniform,
    /// All-zero head: every pixel starts at the uniform distribution.
    Zero,
}

/// Architecture of the encoder-decoder.
///
/// `widths[s]` is the channel count of encoder stage `s`; the last stage is
/// the bottleneck. Every stage but the bottleneck has a mirrored decoder
/// stage fed by a skip connection. Each conv is followed by BN and ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub head_init: HeadInit,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            classes: 5,
            widths: vec![16, 32, 32, 64],
            convs_per_stage: 1,
            head_init: HeadInit::Uniform,
        }
    }
}

impl ArchConfig {
    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.widths.len().saturating_sub(1)
    }

    pub fn bn_layer_count(&self) -> usize {
        (2 * self.widths.len()).saturating_sub(1) * self.convs_per_stage
    }

    pub fn validate(&self) -> Result<(), SegError> {
        if self.classes < 2 {
            return Err(SegError::Config("need ≥2 classes".into()));
        }
        if self.in_channels == 0 {
            return Err(SegError::Config("need ≥1 input channel".into()));
        }
        if self.widths.is_empty() || self.convs_per_stage == 0 {
            return Err(SegError::Config(
                "need ≥1 BN layer: widths and convs_per_stage must be non-empty".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(SegError::Config("stage widths must be positive".into()));
        }
        Ok(())
    }
}

/// Conv + BN + ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

/// Identifies one trainable parameter tensor of a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamId {
    ConvWeight(usize),
    BnScale(usize),
    BnShift(usize),
    HeadWeight,
    HeadBias,
}

/// BN affine parameters versus everything else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    pub bn_params: BTreeSet<ParamId>,
    pub frozen_params: BTreeSet<ParamId>,
}

/// Gradients for every parameter tensor, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub conv_weight: Vec<Vec<T>>,
    pub bn_scale: Vec<Vec<T>>,
    pub bn_shift: Vec<Vec<T>>,
    pub head_weight: Vec<T>,
    pub head_bias: Vec<T>,
    pub includes_weights: bool,
}

impl<T: Real> ModelGrads<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        match id {
            ParamId::ConvWeight(i) => &self.conv_weight[i],
            ParamId::BnScale(i) => &self.bn_scale[i],
            ParamId::BnShift(i) => &self.bn_shift[i],
            ParamId::HeadWeight => &self.head_weight,
            ParamId::HeadBias => &self.head_bias,
        }
    }
}

struct BlockTrace<T> {
    input: Tensor<T>,
    output: Tensor<T>,
    bn: BnCache<T>,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardTrace<T> {
    blocks: Vec<BlockTrace<T>>,
    pools: Vec<(Tensor<T>, Vec<usize>)>,
    head_input: Tensor<T>,
    skip_channels: Vec<usize>,
}

/// Result of a forward pass.
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    /// Per BN layer, statistics of its input over the batch.
    pub bn_inputs: Vec<ChannelStats>,
    pub trace: Option<ForwardTrace<T>>,
}

/// The segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    arch: ArchConfig,
    blocks: Vec<ConvBlock<T>>,
    head: Conv2d<T>,
    trained: bool,
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized network; identical `(arch, seed)` pairs
    /// produce identical parameters.
    pub fn build(arch: &ArchConfig, seed: u64) -> Result<Self, SegError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(arch.bn_layer_count());
        let conv = |cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
            let fan_in = (cin * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            ConvBlock {
                conv: Conv2d {
                    cin,
                    cout,
                    k: 3,
                    weight: (0..cout * cin * 9)
                        .map(|_| T::from_f64_lossy(normal.sample(rng)))
                        .collect(),
                    bias: None,
                },
                bn: BatchNorm2d::new(cout),
            }
        };
        let mut cin = arch.in_channels;
        for &w in &arch.widths {
            for _ in 0..arch.convs_per_stage {
                blocks.push(conv(cin, w, &mut rng));
                cin = w;
            }
        }
        for s in (0..arch.widths.len() - 1).rev() {
            let mut c = cin + arch.widths[s];
            for _ in 0..arch.convs_per_stage {
                blocks.push(conv(c, arch.widths[s], &mut rng));
                c = arch.widths[s];
            }
            cin = arch.widths[s];
        }
        let fan_in = cin as f64;
        let head = match arch.head_init {
            HeadInit::Uniform => {
                let bound = 1.0 / fan_in.sqrt();
                let u = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                Conv2d {
                    cin,
                    cout: arch.classes,
                    k: 1,
                    weight: (0..arch.classes * cin)
                        .map(|_| T::from_f64_lossy(u.sample(&mut rng)))
                        .collect(),
                    bias: Some(
                        (0..arch.classes)
                            .map(|_| T::from_f64_lossy(u.sample(&mut rng)))
                            .collect(),
                    ),
                }
            }
            HeadInit::Zero => Conv2d {
                cin,
                cout: arch.classes,
                k: 1,
                weight: vec![T::zero(); arch.classes * cin],
                bias: Some(vec![T::zero(); arch.classes]),
            },
        };
        Ok(Self {
            arch: arch.clone(),
            blocks,
            head,
            trained: false,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn bn_layer_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[ConvBlock<T>] {
        &self.blocks
    }

    pub fn head(&self) -> &Conv2d<T> {
        &self.head
    }

    /// Whether running statistics come from source training.
    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub(crate) fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub(crate) fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [ConvBlock<T>] {
        &mut self.blocks
    }

    pub(crate) fn head_mut(&mut self) -> &mut Conv2d<T> {
        &mut self.head
    }

    pub fn partition(&self) -> ParamPartition {
        let mut bn_params = BTreeSet::new();
        let mut frozen_params = BTreeSet::new();
        for i in 0..self.blocks.len() {
            bn_params.insert(ParamId::BnScale(i));
            bn_params.insert(ParamId::BnShift(i));
            frozen_params.insert(ParamId::ConvWeight(i));
        }
        frozen_params.insert(ParamId::HeadWeight);
        frozen_params.insert(ParamId::HeadBias);
        ParamPartition {
            bn_params,
            frozen_params,
        }
    }

    pub fn param(&self, id: ParamId) -> &[T] {
        match id {
            ParamId::ConvWeight(i) => &self.blocks[i].conv.weight,
            ParamId::BnScale(i) => &self.blocks[i].bn.gamma,
            ParamId::BnShift(i) => &self.blocks[i].bn.beta,
            ParamId::HeadWeight => &self.head.weight,
            ParamId::HeadBias => self.head.bias.as_deref().unwrap_or(&[]),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut [T] {
        match id {
            ParamId::ConvWeight(i) => &mut self.blocks[i].conv.weight,
            ParamId::BnScale(i) => &mut self.blocks[i].bn.gamma,
            ParamId::BnShift(i) => &mut self.blocks[i].bn.beta,
            ParamId::HeadWeight => &mut self.head.weight,
            ParamId::HeadBias => self.head.bias.as_deref_mut().unwrap_or(&mut []),
        }
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        let p = self.partition();
        p.bn_params.union(&p.frozen_params).copied().collect()
    }

    fn digest_params<'a>(&self, ids: impl Iterator<Item = &'a ParamId>) -> String {
        let mut h = Sha256::new();
        for &id in ids {
            for v in self.param(id) {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every non-BN parameter.
    pub fn frozen_checksum(&self) -> String {
        self.digest_params(self.partition().frozen_params.iter())
    }

    /// SHA-256 over the BN scale/shift parameters.
    pub fn bn_checksum(&self) -> String {
        self.digest_params(self.partition().bn_params.iter())
    }

    /// SHA-256 over the running statistics of every BN layer.
    pub fn running_stats_checksum(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.blocks {
            for v in b.bn.running_mean.iter().chain(&b.bn.running_var) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), SegError> {
        let m = self.arch.size_multiple();
        if x.c != self.arch.in_channels {
            return Err(SegError::Shape(format!(
                "expected {} input channels, got {}",
                self.arch.in_channels, x.c
            )));
        }
        if x.n == 0 {
            return Err(SegError::EmptyBatch);
        }
        if x.h % m != 0 || x.w % m != 0 {
            return Err(SegError::Shape(format!(
                "image size {}x{} is not a multiple of {m}",
                x.h, x.w
            )));
        }
        Ok(())
    }

    /// Runs the network. Never mutates the model; `BnMode::Train` only
    /// differs from `Batch` in what the caller does with `bn_inputs`.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        mode: BnMode,
        keep_trace: bool,
    ) -> Result<ForwardOutput<T>, SegError> {
        self.check_input(x)?;
        let stages = self.arch.widths.len();
        let cps = self.arch.convs_per_stage;
        let mut traces = Vec::new();
        let mut stats = Vec::with_capacity(self.blocks.len());
        let mut pools = Vec::new();
        let mut skips: Vec<Tensor<T>> = Vec::new();
        let mut bi = 0;

        let mut run_block = |bi: usize, input: Tensor<T>, traces: &mut Vec<BlockTrace<T>>| {
            let block = &self.blocks[bi];
            let z = block.conv.forward(&input);
            let (mut y, cache, s) = block.bn.forward(&z, mode);
            relu_inplace(&mut y);
            stats.push(s);
            if keep_trace {
                traces.push(BlockTrace {
                    input,
                    output: y.clone(),
                    bn: cache,
                });
            }
            y
        };

        let mut h = x.clone();
        for s in 0..stages {
            for _ in 0..cps {
                h = run_block(bi, h, &mut traces);
                bi += 1;
            }
            if s + 1 < stages {
                let (p, arg) = maxpool2(&h);
                skips.push(h);
                if keep_trace {
                    pools.push((skips.last().expect("pushed").clone(), arg));
                }
                h = p;
            }
        }
        let skip_channels: Vec<usize> = skips.iter().map(|t| t.c).collect();
        for s in (0..stages - 1).rev() {
            let up = upsample2(&h);
            h = Tensor::concat_channels(&up, &skips[s]);
            for _ in 0..cps {
                h = run_block(bi, h, &mut traces);
                bi += 1;
            }
        }
        let logits = self.head.forward(&h);
        let trace = keep_trace.then(|| ForwardTrace {
            blocks: traces,
            pools,
            head_input: h,
            skip_channels,
        });
        Ok(ForwardOutput {
            logits,
            bn_inputs: stats,
            trace,
        })
    }

    /// Backpropagates `dlogits` through a traced forward pass.
    ///
    /// With `weights = false` only BN scale/shift gradients are produced,
    /// which skips the weight-gradient GEMMs entirely.
    pub fn backward(&self, trace: &ForwardTrace<T>, dlogits: &Tensor<T>, weights: bool) -> ModelGrads<T> {
        let nb = self.blocks.len();
        let mut grads = ModelGrads {
            conv_weight: self
                .blocks
                .iter()
                .map(|b| {
                    if weights {
                        vec![T::zero(); b.conv.weight.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
            bn_scale: self.blocks.iter().map(|b| vec![T::zero(); b.bn.channels]).collect(),
            bn_shift: self.blocks.iter().map(|b| vec![T::zero(); b.bn.channels]).collect(),
            head_weight: vec![T::zero(); if weights { self.head.weight.len() } else { 0 }],
            head_bias: vec![T::zero(); if weights { self.arch.classes } else { 0 }],
            includes_weights: weights,
        };
        let stages = self.arch.widths.len();
        let cps = self.arch.convs_per_stage;

        let (hw, hb) = if weights {
            (
                Some(grads.head_weight.as_mut_slice()),
                Some(grads.head_bias.as_mut_slice()),
            )
        } else {
            (None, None)
        };
        let mut d = self.head.backward(&trace.head_input, dlogits, hw, hb);

        let block_back = |bi: usize, mut d: Tensor<T>, grads: &mut ModelGrads<T>| {
            let t = &trace.blocks[bi];
            let block = &self.blocks[bi];
            relu_backward(&t.output, &mut d);
            let dz = block
                .bn
                .backward(&t.bn, &d, &mut grads.bn_scale[bi], &mut grads.bn_shift[bi]);
            let dw = if weights {
                Some(grads.conv_weight[bi].as_mut_slice())
            } else {
                None
            };
            block.conv.backward(&t.input, &dz, dw, None)
        };

        let mut bi = nb;
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; stages.saturating_sub(1)];
        for s in 0..stages - 1 {
            for _ in 0..cps {
                bi -= 1;
                d = block_back(bi, d, &mut grads);
            }
            let up_c = d.c - trace.skip_channels[s];
            let (dup, dskip) = d.split_channels(up_c);
            dskips[s] = Some(dskip);
            d = upsample2_backward(&dup);
        }
        for s in (0..stages).rev() {
            if s + 1 < stages {
                let (input, arg) = &trace.pools[s];
                let mut ds = maxpool2_backward(input, arg, &d);
                if let Some(extra) = dskips[s].take() {
                    for (a, b) in ds.data.iter_mut().zip(extra.data) {
                        *a = *a + b;
                    }
                }
                d = ds;
            }
            for _ in 0..cps {
                bi -= 1;
                d = block_back(bi, d, &mut grads);
            }
        }
        debug_assert_eq!(bi, 0);
        grads
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running estimates.
    pub fn update_running_stats(&mut self, bn_inputs: &[ChannelStats], count: usize) {
        for (b, s) in self.blocks.iter_mut().zip(bn_inputs) {
            b.bn.update_running(s, count);
        }
    }

    /// Stacks images into an input tensor; all images must share one shape.
    pub fn stack(&self, batch: &[SliceImage]) -> Result<Tensor<T>, SegError> {
        let first = batch.first().ok_or(SegError::EmptyBatch)?;
        let (h, w) = (first.height(), first.width());
        let mut t = Tensor::zeros(batch.len(), 1, h, w);
        for (i, img) in batch.iter().enumerate() {
            if img.height() != h || img.width() != w {
                return Err(SegError::Shape(format!(
                    "image {i} is {}x{}, batch is {h}x{w}",
                    img.height(),
                    img.width()
                )));
            }
            for (d, &s) in t.image_mut(i).iter_mut().zip(img.pixels()) {
                *d = T::from_f32(s).expect("finite pixel");
            }
        }
        Ok(t)
    }

    /// Class probabilities for every image of the batch.
    pub fn infer(&self, batch: &[SliceImage], mode: BnMode) -> Result<Vec<ProbMap>, SegError> {
        let x = self.stack(batch)?;
        let out = self.forward(&x, mode, false)?;
        Ok(softmax_maps(&out.logits))
    }

    /// Per-layer, per-channel statistics of the activations entering each BN
    /// layer for a single image. The forward pass normalizes with the frozen
    /// running statistics so that a shift in early layers propagates to later
    /// ones, as it would in the source model.
    pub fn probe_bn_stats(&self, image: &SliceImage) -> Result<BnStatsProfile, SegError> {
        self.probe_batch_stats(std::slice::from_ref(image))
    }

    /// Like [`Model::probe_bn_stats`], pooled over every pixel of `images`.
    pub fn probe_batch_stats(&self, images: &[SliceImage]) -> Result<BnStatsProfile, SegError> {
        let x = self.stack(images)?;
        let out = self.forward(&x, BnMode::Running, false)?;
        Ok(BnStatsProfile::from_stats(
            out.bn_inputs
                .into_iter()
                .map(|s| (s.mean, s.var))
                .collect(),
            !self.trained,
        ))
    }

    /// The frozen source profile held in the running statistics.
    pub fn source_stats(&self) -> BnStatsProfile {
        BnStatsProfile::from_stats(
            self.blocks
                .iter()
                .map(|b| (b.bn.running_mean.clone(), b.bn.running_var.clone()))
                .collect(),
            !self.trained,
        )
    }

    /// Converts between scalar types, e.g. for an `f64` gradient check of an
    /// `f32` model.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect::<Vec<U>>();
        let conv = |c: &Conv2d<T>| Conv2d {
            cin: c.cin,
            cout: c.cout,
            k: c.k,
            weight: cv(&c.weight),
            bias: c.bias.as_deref().map(cv),
        };
        Model {
            arch: self.arch.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    conv: conv(&b.conv),
                    bn: BatchNorm2d {
                        channels: b.bn.channels,
                        gamma: cv(&b.bn.gamma),
                        beta: cv(&b.bn.beta),
                        running_mean: b.bn.running_mean.clone(),
                        running_var: b.bn.running_var.clone(),
                        momentum: b.bn.momentum,
                    },
                })
                .collect(),
            head: conv(&self.head),
            trained: self.trained,
        }
    }
}

/// Numerically stable per-pixel softmax over channels.
pub fn softmax_tensor<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    let plane = logits.plane();
    for i in 0..logits.n {
        let img = out.image_mut(i);
        for p in 0..plane {
            let mut mx = T::neg_infinity();
            for c in 0..logits.c {
                mx = mx.max(img[c * plane + p]);
            }
            let mut sum = T::zero();
            for c in 0..logits.c {
                let e = (img[c * plane + p] - mx).exp();
                img[c * plane + p] = e;
                sum = sum + e;
            }
            for c in 0..logits.c {
                img[c * plane + p] = img[c * plane + p] / sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_maps<T: Real>(logits: &Tensor<T>) -> Vec<ProbMap> {
    let probs = softmax_tensor(logits);
    (0..probs.n)
        .map(|i| {
            ProbMap::from_raw(
                probs.c,
                probs.h,
                probs.w,
                probs.image(i).iter().map(|v| v.as_f64() as f32).collect(),
            )
            .expect("softmax output is a valid probability map")
        })
        .collect()
}

pub(crate) fn floor_var(v: f64) -> f64 {
    v.max(VARIANCE_FLOOR)
}

impl BnStatsProfile {
    fn from_stats(layers: Vec<(Vec<f64>, Vec<f64>)>, untrained: bool) -> Self {
        Self {
            layers: layers
                .into_iter()
                .enumerate()
                .map(|(i, (mean, var))| LayerStats {
                    layer_id: i,
                    channel_means: mean,
                    channel_vars: var.into_iter().map(floor_var).collect(),
                })
                .collect(),
            untrained,
        }
    }
}
