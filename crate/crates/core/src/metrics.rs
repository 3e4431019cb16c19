//! Dice similarity.

use serde::{Deserialize, Serialize};

use crate::segcore::LabelMap;

/// Per-class Dice `2|A∩B| / (|A| + |B|)`; both-empty is 1, one-empty is 0.
pub fn dsc(pred: &LabelMap, truth: &LabelMap, class_id: u8) -> f64 {
    assert_eq!(pred.labels.len(), truth.labels.len(), "dsc shape mismatch");
    let mut acc = DiceAccumulator::new(class_id as usize + 1);
    acc.add(pred, truth);
    acc.class_dsc(class_id as usize)
}

/// Pools intersection and set sizes over many slices, so that Dice is
/// computed per volume or per batch rather than averaged per slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct DiceAccumulator {
    pub inter: Vec<u64>,
    pub pred: Vec<u64>,
    pub truth: Vec<u64>,
}

impl DiceAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            inter: vec![0; classes],
            pred: vec![0; classes],
            truth: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) {
        assert_eq!(pred.labels.len(), truth.labels.len(), "dsc shape mismatch");
        let k = self.inter.len();
        for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
            let (p, t) = (p as usize, t as usize);
            if p < k {
                self.pred[p] += 1;
            }
            if t < k {
                self.truth[t] += 1;
            }
            if p == t && p < k {
                self.inter[p] += 1;
            }
        }
    }

    /// Adds another accumulator's counts; class counts must match.
    pub fn merge(&mut self, other: &DiceAccumulator) {
        assert_eq!(self.inter.len(), other.inter.len(), "class count mismatch");
        for (a, b) in [
            (&mut self.inter, &other.inter),
            (&mut self.pred, &other.pred),
            (&mut self.truth, &other.truth),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn class_dsc(&self, c: usize) -> f64 {
        let denom = self.pred[c] + self.truth[c];
        if denom == 0 {
            1.0
        } else {
            2.0 * self.inter[c] as f64 / denom as f64
        }
    }

    pub fn per_class(&self) -> Vec<f64> {
        (0..self.inter.len()).map(|c| self.class_dsc(c)).collect()
    }
}

/// Mean over classes `1..C`, i.e. excluding background.
pub fn foreground_mean(per_class: &[f64]) -> f64 {
    let fg = &per_class[1.min(per_class.len())..];
    if fg.is_empty() {
        return per_class.first().copied().unwrap_or(0.0);
    }
    fg.iter().sum::<f64>() / fg.len() as f64
}
