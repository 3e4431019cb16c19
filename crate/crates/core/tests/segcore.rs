mod common;

use std::collections::BTreeSet;

use odes_core::adaptation::{AdaptConfig, Adapter};
use odes_core::data::{make_stream, synthetic_cohort, BatchPolicy, ShiftSpec};
use odes_core::segcore::{
    build_model, load_checkpoint, pretrain_source, save_checkpoint, BnMode, ParamId, TrainConfig,
};

#[test]
fn pretraining_is_bit_reproducible() {
    let vols = synthetic_cohort(&common::small_gen(), 2, 5, "r", None).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = build_model(&common::small_arch(), 4).unwrap();
        let log = pretrain_source(&mut m, &vols, &vols, &cfg).unwrap();
        (m, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(a.running_stats_checksum(), b.running_stats_checksum());
}

#[test]
fn zero_epochs_leave_the_model_untouched() {
    let vols = synthetic_cohort(&common::small_gen(), 1, 5, "z", None).unwrap();
    let fresh = build_model(&common::small_arch(), 4).unwrap();
    let mut m = fresh.clone();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    pretrain_source(&mut m, &vols, &[], &cfg).unwrap();
    assert_eq!(m, fresh);
    assert!(!m.is_trained());
}

#[test]
fn partition_covers_every_parameter_once() {
    let m = common::pretrained();
    let p = m.partition();
    let all: BTreeSet<ParamId> = m.all_params().into_iter().collect();
    assert_eq!(all.len(), m.all_params().len());
    assert!(p.bn_params.is_disjoint(&p.frozen_params));
    assert_eq!(&p.bn_params | &p.frozen_params, all);
    assert_eq!(p.bn_params.len(), 2 * m.bn_layer_count());
    assert!(p.bn_params.iter().all(|id| matches!(id, ParamId::BnScale(_) | ParamId::BnShift(_))));
}

#[test]
fn fixture_segments_its_source_domain() {
    let holdout = synthetic_cohort(&common::small_gen(), 2, 99, "h", None).unwrap();
    let per_class = odes_core::segcore::evaluate(common::pretrained(), &holdout, BnMode::Running).unwrap();
    let mean = odes_core::metrics::foreground_mean(&per_class);
    assert!(mean > 0.6, "held-out source Dice {mean}");
}

#[test]
fn adapted_models_still_emit_distributions() {
    let vols = synthetic_cohort(&common::small_gen(), 2, 8, "t", Some(&ShiftSpec::strong(3))).unwrap();
    let stream = make_stream(&vols, 4, 0, BatchPolicy::PerPatient);
    let cfg = AdaptConfig {
        lr: 0.05,
        ..AdaptConfig::default()
    };
    let mut adapter = Adapter::new(common::pretrained().clone(), cfg, Some(stream.len())).unwrap();
    for (i, b) in stream.iter().enumerate() {
        adapter.adapt_batch(i as u64 + 1, b).unwrap();
        for mode in [BnMode::Batch, BnMode::Running, BnMode::PerImage] {
            for pm in adapter.model().infer(&b.images, mode).unwrap() {
                let (c, plane) = (pm.classes(), pm.height() * pm.width());
                for px in 0..plane {
                    let s: f32 = (0..c).map(|k| pm.raw()[k * plane + px]).sum();
                    assert!((s - 1.0).abs() <= 1e-5);
                    assert!((0..c).all(|k| pm.raw()[k * plane + px] >= 0.0));
                }
            }
        }
    }
}

#[test]
fn probing_mutates_nothing() {
    let m = common::pretrained().clone();
    let vols = synthetic_cohort(&common::small_gen(), 1, 8, "p", Some(&ShiftSpec::strong(3))).unwrap();
    let image = odes_core::segcore::normalize(&vols[0].slices[3]).0;
    let before = (m.frozen_checksum(), m.bn_checksum(), m.running_stats_checksum());
    let a = m.probe_bn_stats(&image).unwrap();
    let b = m.probe_bn_stats(&image).unwrap();
    assert_eq!(a, b);
    assert_eq!(before, (m.frozen_checksum(), m.bn_checksum(), m.running_stats_checksum()));
    assert_eq!(a.layers.len(), m.bn_layer_count());
}

#[test]
fn checkpoint_round_trip_preserves_adaptation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(common::pretrained(), &path, &[], 0).unwrap();
    let (loaded, _) = load_checkpoint(&path).unwrap();
    assert_eq!(&loaded, common::pretrained());
    assert!(loaded.is_trained());
    assert!(Adapter::new(loaded, AdaptConfig::default(), Some(1)).is_ok());
}
