#![allow(dead_code)]

use std::sync::OnceLock;

use odes_core::data::{synthetic_cohort, GenConfig, VolumeRecord};
use odes_core::segcore::{build_model, pretrain_source, ArchConfig, Model, TrainConfig};

pub fn small_gen() -> GenConfig {
    GenConfig {
        height: 32,
        width: 32,
        slices: 8,
        ..GenConfig::default()
    }
}

pub fn small_arch() -> ArchConfig {
    ArchConfig {
        widths: vec![8, 16, 16, 32],
        ..ArchConfig::default()
    }
}

pub fn source_volumes() -> Vec<VolumeRecord> {
    synthetic_cohort(&small_gen(), 6, 11, "src", None).unwrap()
}

/// A briefly pretrained 32x32 model, shared by the tests of one binary.
pub fn pretrained() -> &'static Model<f32> {
    static MODEL: OnceLock<Model<f32>> = OnceLock::new();
    MODEL.get_or_init(|| {
        let mut m = build_model(&small_arch(), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 15,
            ..TrainConfig::default()
        };
        pretrain_source(&mut m, &source_volumes(), &[], &cfg).unwrap();
        m
    })
}
