//! A5: updates touch only BN scale and shift, their gradients agree with
//! finite differences, and every batch of every cycle takes one step.

use odes_core::acquisition::{AnnotationRecord, AnnotationSource};
use odes_core::adaptation::{
    objective_and_dlogits, objective_gradients, run_stream, AdaptConfig, Adapter, AnnotationMasks, ContinuityTarget,
    Method, Objective,
};
use odes_core::pruning::DecayMode;
use odes_core::acquisition::QueryMode;
use odes_core::segcore::{ArchConfig, BnMode, Model, SliceImage, Tensor};
use odes_harness::experiment::{adapt_config_for, target_stream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::benchmark::bench;
use crate::Verdict;

const STEP: f64 = 1e-5;

fn tiny_images(seed: u64, side: usize) -> Vec<SliceImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4)
        .map(|k| {
            let px: Vec<f32> = (0..side * side).map(|_| rng.random_range(-1.5..1.5)).collect();
            SliceImage::new(side, side, px, if k < 3 { "a" } else { "b" }, k).unwrap()
        })
        .collect()
}

fn objective_value(model: &Model<f64>, x: &Tensor<f64>, objective: &Objective) -> f64 {
    let out = model.forward(x, BnMode::Batch, false).unwrap();
    objective_and_dlogits(&out.logits, objective).0.total()
}

/// Largest relative error between analytic BN gradients and central
/// differences, over every BN parameter of a small f64 model.
fn worst_gradient_error(objective: &Objective, seed: u64) -> f64 {
    let arch = ArchConfig {
        widths: vec![4, 6],
        ..ArchConfig::default()
    };
    let mut model: Model<f64> = Model::build(&arch, seed).unwrap();
    let x = model.stack(&tiny_images(seed, 8)).unwrap();
    let (_, grads) = objective_gradients(&model, &x, objective).unwrap();
    let mut worst = 0f64;
    for id in model.partition().bn_params {
        let analytic = grads.get(id).to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = model.param(id)[k];
            model.param_mut(id)[k] = orig + STEP;
            let up = objective_value(&model, &x, objective);
            model.param_mut(id)[k] = orig - STEP;
            let down = objective_value(&model, &x, objective);
            model.param_mut(id)[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7));
        }
    }
    worst
}

fn variant(name: &str) -> AdaptConfig {
    let mut cfg = adapt_config_for(&bench().cfg, 0);
    match name {
        "odes pixel" => {}
        "odes patch" => {
            cfg.mode = QueryMode::Patch;
            cfg.b = 10.0;
        }
        "odes K=10" => cfg.k = 10.0,
        "exp-decay" => cfg.decay = DecayMode::ExpDecay,
        "continuity-only" => cfg.method = Method::ContinuityOnly,
        "entropy-min" => cfg.method = Method::EntropyMin,
        other => panic!("unknown variant {other}"),
    }
    cfg
}

const VARIANTS: [&str; 6] = ["odes pixel", "odes patch", "odes K=10", "exp-decay", "continuity-only", "entropy-min"];

#[test]
fn a5_bn_only_updates_and_gradients() {
    let mut v = Verdict::new("A5", "BN-only updates, gradient check, one step per batch");
    let b = bench();
    let stream = target_stream(&b.cfg, 0).unwrap();

    for name in VARIANTS {
        let mut adapter = Adapter::new(b.model.clone(), variant(name), Some(stream.len())).unwrap();
        let (frozen, running) = (b.model.frozen_checksum(), b.model.running_stats_checksum());
        let mut broken = 0;
        let mut bn_moved = 0;
        for (i, batch) in stream.iter().enumerate() {
            let bn = adapter.model().bn_checksum();
            adapter.adapt_batch(i as u64 + 1, batch).unwrap();
            if adapter.model().frozen_checksum() != frozen || adapter.model().running_stats_checksum() != running {
                broken += 1;
            }
            if adapter.model().bn_checksum() != bn {
                bn_moved += 1;
            }
        }
        v.check(
            broken == 0 && bn_moved == stream.len(),
            format!(
                "{name}: non-BN checksum unchanged after {} of {} batches, BN moved on {bn_moved}",
                stream.len() - broken,
                stream.len()
            ),
        );
    }

    let records = vec![
        AnnotationRecord {
            image_index: 0,
            entries: vec![[1, 2, 3], [4, 4, 0], [7, 0, 1]],
            source: AnnotationSource::Oracle,
        },
        AnnotationRecord {
            image_index: 2,
            entries: vec![[5, 6, 4], [0, 7, 2]],
            source: AnnotationSource::Oracle,
        },
    ];
    let odes = Objective::Odes {
        masks: AnnotationMasks::from_records(&records, 4, 8, 8, 5).unwrap(),
        pairs: vec![0, 1],
        lambda: 0.1,
        target: ContinuityTarget::Hard,
    };
    for (name, objective) in [("ODES objective", &odes), ("entropy objective", &Objective::Entropy)] {
        let worst = [1, 2].map(|s| worst_gradient_error(objective, s)).into_iter().fold(0.0, f64::max);
        v.check(worst <= 1e-3, format!("{name}: BN gradients vs central differences, max rel err {worst:.2e}"));
    }

    let short = &stream[..12];
    for name in VARIANTS {
        let cfg = AdaptConfig {
            cycles: 3,
            ..variant(name)
        };
        let out = run_stream(b.model.clone(), short, &cfg).unwrap();
        let sequential = out
            .events
            .iter()
            .enumerate()
            .all(|(i, e)| e.optimizer_steps == i as u64 + 1 && e.cycle == i / short.len() + 1);
        v.check(
            out.optimizer_steps == 3 * short.len() as u64 && sequential,
            format!("{name}: {} steps over 3 cycles of {} batches", out.optimizer_steps, short.len()),
        );
    }
    v.finish();
}
