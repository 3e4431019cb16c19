use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VolumeRecord;
use crate::segcore::{normalize, LabelMap, SliceImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum BatchPolicy {
    /// Windows of consecutive slices from one patient.
    #[default]
    PerPatient,
    /// Patients are concatenated before windowing, so a batch may straddle two.
    Contiguous,
}

/// One unit of the stream: normalized slices in slice order.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// 1-based position in the stream.
    pub batch_id: u64,
    pub images: Vec<SliceImage>,
    pub truth: Option<Vec<LabelMap>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Cuts volumes into batches after shuffling patient order with `order_seed`.
/// Every slice is normalized to zero mean and unit variance.
pub fn make_stream(
    volumes: &[VolumeRecord],
    batch_size: usize,
    order_seed: u64,
    policy: BatchPolicy,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be ≥ 1");
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));

    let items = |v: &VolumeRecord| -> Vec<(SliceImage, Option<LabelMap>)> {
        v.slices
            .iter()
            .enumerate()
            .map(|(k, s)| (normalize(s).0, v.truth.as_ref().map(|t| t[k].clone())))
            .collect()
    };
    let groups: Vec<Vec<(SliceImage, Option<LabelMap>)>> = match policy {
        BatchPolicy::PerPatient => order.iter().map(|&i| items(&volumes[i])).collect(),
        BatchPolicy::Contiguous => vec![order.iter().flat_map(|&i| items(&volumes[i])).collect()],
    };

    let mut out = Vec::new();
    for group in groups {
        for chunk in group.chunks(batch_size) {
            let images = chunk.iter().map(|(s, _)| s.clone()).collect();
            let truth = chunk
                .iter()
                .map(|(_, t)| t.clone())
                .collect::<Option<Vec<_>>>();
            out.push(Batch {
                batch_id: out.len() as u64 + 1,
                images,
                truth,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_cohort, GenConfig};

    fn cohort(n: usize, slices: usize) -> Vec<VolumeRecord> {
        let cfg = GenConfig {
            height: 16,
            width: 16,
            slices,
            ..GenConfig::default()
        };
        synthetic_cohort(&cfg, n, 1, "p", None).unwrap()
    }

    #[test]
    fn windows_preserve_slice_order() {
        let stream = make_stream(&cohort(1, 24), 8, 0, BatchPolicy::PerPatient);
        assert_eq!(stream.len(), 3);
        for (b, batch) in stream.iter().enumerate() {
            assert_eq!(batch.batch_id, b as u64 + 1);
            let idx: Vec<_> = batch.images.iter().map(|s| s.slice_index).collect();
            assert_eq!(idx, (b * 8..b * 8 + 8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn never_mixes_patients_and_covers_everything() {
        let vols = cohort(3, 7);
        let stream = make_stream(&vols, 3, 5, BatchPolicy::PerPatient);
        let mut seen = std::collections::BTreeSet::new();
        for b in &stream {
            let p = &b.images[0].patient_id;
            assert!(b.images.iter().all(|s| &s.patient_id == p));
            for s in &b.images {
                assert!(seen.insert((s.patient_id.clone(), s.slice_index)));
            }
        }
        assert_eq!(seen.len(), 21);
        assert_eq!(stream, make_stream(&vols, 3, 5, BatchPolicy::PerPatient));
    }

    #[test]
    fn contiguous_policy_may_straddle() {
        let stream = make_stream(&cohort(2, 5), 4, 0, BatchPolicy::Contiguous);
        assert_eq!(stream.len(), 3);
        assert!(stream[1].images.iter().any(|s| s.patient_id != stream[1].images[0].patient_id));
    }
}
