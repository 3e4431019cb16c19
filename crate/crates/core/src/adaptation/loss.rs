//! Adaptation objectives and their gradients with respect to the logits.

use serde::{Deserialize, Serialize};

use super::AdaptError;
use crate::acquisition::AnnotationRecord;
use crate::segcore::{softmax_tensor, BnMode, Model, ModelGrads, ProbMap, Real, SegError, Tensor};

/// Clamp applied before taking logs of probabilities supplied by callers.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum ContinuityTarget {
    /// Argmax of the next slice, treated as a constant.
    #[default]
    Hard,
    /// Probabilities of the next slice, treated as a constant.
    Soft,
}

/// Loss values of one update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct LossBreakdown {
    /// Absent when no pixel of the batch was annotated.
    pub sup_loss: Option<f64>,
    pub cont_loss: f64,
    pub total: f64,
    pub lambda: f64,
    pub annotated_pixel_count: usize,
}

/// `sup + λ·cont`.
pub fn total_loss(sup: f64, cont: f64, lambda: f64) -> f64 {
    sup + lambda * cont
}

/// Dense per-image label masks built from annotation records. A pixel
/// annotated twice keeps its last label.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationMasks {
    height: usize,
    width: usize,
    masks: Vec<Vec<Option<u8>>>,
}

impl AnnotationMasks {
    pub fn empty(images: usize, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            masks: vec![vec![None; height * width]; images],
        }
    }

    pub fn from_records(
        records: &[AnnotationRecord],
        images: usize,
        height: usize,
        width: usize,
        classes: usize,
    ) -> Result<Self, AdaptError> {
        let mut m = Self::empty(images, height, width);
        for r in records {
            let mask = m
                .masks
                .get_mut(r.image_index)
                .ok_or(AdaptError::UnknownImage(r.image_index))?;
            for &[x, y, c] in &r.entries {
                if x >= width || y >= height || c >= classes {
                    return Err(AdaptError::Annotation {
                        image_index: r.image_index,
                        offending: vec![[x, y]],
                        reason: "coordinate or class out of range".into(),
                    });
                }
                mask[y * width + x] = Some(c as u8);
            }
        }
        Ok(m)
    }

    pub fn count(&self) -> usize {
        self.masks.iter().flatten().filter(|v| v.is_some()).count()
    }

    pub fn image(&self, i: usize) -> &[Option<u8>] {
        &self.masks[i]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Mean negative log-probability of the annotated class over every
/// annotated pixel of the batch.
pub fn supervised_loss(probs: &[ProbMap], annotations: &[AnnotationRecord]) -> Result<f64, AdaptError> {
    let first = probs.first().ok_or(AdaptError::Seg(SegError::EmptyBatch))?;
    let masks = AnnotationMasks::from_records(
        annotations,
        probs.len(),
        first.height(),
        first.width(),
        first.classes(),
    )?;
    let n = masks.count();
    if n == 0 {
        return Err(AdaptError::NoAnnotations);
    }
    let w = first.width();
    let mut sum = 0.0;
    for (i, pm) in probs.iter().enumerate() {
        for (px, label) in masks.image(i).iter().enumerate() {
            if let Some(c) = label {
                let p = pm.get(px % w, px / w, *c as usize) as f64;
                sum -= p.max(PROB_FLOOR).ln();
            }
        }
    }
    Ok(sum / n as f64)
}

/// Indices `j` such that images `j` and `j + 1` come from one patient.
pub fn adjacent_pairs<S: AsRef<str>>(patient_ids: &[S]) -> Vec<usize> {
    patient_ids
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0].as_ref() == w[1].as_ref())
        .map(|(j, _)| j)
        .collect()
}

/// Sum over the given adjacent pairs of the pixel-mean cross-entropy of
/// slice `j` against the (detached) prediction of slice `j + 1`.
pub fn continuity_loss(probs: &[ProbMap], pairs: &[usize], target: ContinuityTarget) -> f64 {
    let mut total = 0.0;
    for &j in pairs {
        let (a, b) = (&probs[j], &probs[j + 1]);
        let (h, w) = (a.height(), a.width());
        let labels = b.argmax();
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                match target {
                    ContinuityTarget::Hard => {
                        let c = labels.at(x, y) as usize;
                        s -= (a.get(x, y, c) as f64).max(PROB_FLOOR).ln();
                    }
                    ContinuityTarget::Soft => {
                        for c in 0..a.classes() {
                            let q = b.get(x, y, c) as f64;
                            s -= q * (a.get(x, y, c) as f64).max(PROB_FLOOR).ln();
                        }
                    }
                }
            }
        }
        total += s / (h * w) as f64;
    }
    total
}

/// What a single update minimizes.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// `L_sup + λ·L_cont`; `L_sup` is dropped when `masks` is empty.
    Odes {
        masks: AnnotationMasks,
        pairs: Vec<usize>,
        lambda: f64,
        target: ContinuityTarget,
    },
    /// Mean per-pixel prediction entropy over the batch.
    Entropy,
}

/// Loss values from [`objective_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveValue {
    Odes(LossBreakdown),
    Entropy(f64),
}

impl ObjectiveValue {
    pub fn total(&self) -> f64 {
        match self {
            Self::Odes(l) => l.total,
            Self::Entropy(e) => *e,
        }
    }
}

fn log_softmax_at<T: Real>(logits: &[T], classes: usize, plane: usize, px: usize) -> Vec<f64> {
    let z: Vec<f64> = (0..classes).map(|c| logits[c * plane + px].as_f64()).collect();
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    z.into_iter().map(|v| v - lse).collect()
}

fn argmax_at<T: Real>(p: &[T], classes: usize, plane: usize, px: usize) -> usize {
    let mut best = 0;
    for c in 1..classes {
        if p[c * plane + px] > p[best * plane + px] {
            best = c;
        }
    }
    best
}

/// Loss value and its gradient with respect to the logits.
pub fn objective_and_dlogits<T: Real>(logits: &Tensor<T>, objective: &Objective) -> (ObjectiveValue, Tensor<T>) {
    let probs = softmax_tensor(logits);
    let (n, classes, plane) = (logits.n, logits.c, logits.plane());
    let mut grad = vec![0.0f64; logits.data.len()];
    let len = classes * plane;
    let value = match objective {
        Objective::Odes {
            masks,
            pairs,
            lambda,
            target,
        } => {
            let count = masks.count();
            let mut sup = 0.0;
            if count > 0 {
                let scale = 1.0 / count as f64;
                for i in 0..n {
                    let (z, p) = (logits.image(i), probs.image(i));
                    for (px, label) in masks.image(i).iter().enumerate() {
                        let Some(l) = label.map(usize::from) else { continue };
                        sup -= log_softmax_at(z, classes, plane, px)[l];
                        for c in 0..classes {
                            let onehot = if c == l { 1.0 } else { 0.0 };
                            grad[i * len + c * plane + px] += scale * (p[c * plane + px].as_f64() - onehot);
                        }
                    }
                }
                sup *= scale;
            }
            let mut cont = 0.0;
            let scale = lambda / plane as f64;
            for &j in pairs {
                let (z, p, q) = (logits.image(j), probs.image(j), probs.image(j + 1));
                let mut s = 0.0;
                for px in 0..plane {
                    let lp = log_softmax_at(z, classes, plane, px);
                    match target {
                        ContinuityTarget::Hard => {
                            let t = argmax_at(q, classes, plane, px);
                            s -= lp[t];
                            for c in 0..classes {
                                let onehot = if c == t { 1.0 } else { 0.0 };
                                grad[j * len + c * plane + px] += scale * (p[c * plane + px].as_f64() - onehot);
                            }
                        }
                        ContinuityTarget::Soft => {
                            for c in 0..classes {
                                let qc = q[c * plane + px].as_f64();
                                s -= qc * lp[c];
                                grad[j * len + c * plane + px] += scale * (p[c * plane + px].as_f64() - qc);
                            }
                        }
                    }
                }
                cont += s / plane as f64;
            }
            let sup_loss = (count > 0).then_some(sup);
            ObjectiveValue::Odes(LossBreakdown {
                sup_loss,
                cont_loss: cont,
                total: total_loss(sup_loss.unwrap_or(0.0), cont, *lambda),
                lambda: *lambda,
                annotated_pixel_count: count,
            })
        }
        Objective::Entropy => {
            let scale = 1.0 / (n * plane) as f64;
            let mut total = 0.0;
            for i in 0..n {
                let z = logits.image(i);
                for px in 0..plane {
                    let lp = log_softmax_at(z, classes, plane, px);
                    let h: f64 = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
                    total += h;
                    for c in 0..classes {
                        let pc = lp[c].exp();
                        grad[i * len + c * plane + px] -= scale * pc * (lp[c] + h);
                    }
                }
            }
            ObjectiveValue::Entropy(total * scale)
        }
    };
    let mut d = Tensor::zeros(logits.n, logits.c, logits.h, logits.w);
    for (o, g) in d.data.iter_mut().zip(grad) {
        *o = T::from_f64_lossy(g);
    }
    (value, d)
}

/// One forward pass with batch statistics, then the gradient of the
/// objective with respect to the BN scale and shift parameters only.
pub fn objective_gradients<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    objective: &Objective,
) -> Result<(ObjectiveValue, ModelGrads<T>), SegError> {
    let out = model.forward(x, BnMode::Batch, true)?;
    let (value, dlogits) = objective_and_dlogits(&out.logits, objective);
    let trace = out.trace.as_ref().expect("trace requested");
    Ok((value, model.backward(trace, &dlogits, false)))
}
