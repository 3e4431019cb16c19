//! A3, A4 and A6 on the synthetic benchmark: the default configuration, five
//! seeds, one shared pretrained checkpoint.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use odes_core::segcore::Model;
use odes_harness::experiment::{cmd_pretrain, load_model, run_experiment, Summary};
use odes_harness::manifest::{Manifest, MANIFEST_FILE};
use odes_harness::ExperimentConfig;
use serde_json::Value;

use crate::{pts, Verdict};

/// Ordering tolerance in Dice.
const TOL: f64 = 0.005;

pub struct Bench {
    pub cfg: ExperimentConfig,
    pub model: Model<f32>,
    pub pretrain_dsc: f64,
}

fn same_training(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    a.data == b.data && a.model == b.model && a.train == b.train
}

/// The default configuration with a pretrained checkpoint, trained on first
/// use and cached under the target directory.
pub fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-bench");
        let mut cfg = ExperimentConfig {
            label: "odes".into(),
            output_dir: dir.clone(),
            checkpoint: Some(dir.join("model.ckpt")),
            ..ExperimentConfig::default()
        };
        let cached = Manifest::read(&dir.join(MANIFEST_FILE))
            .ok()
            .filter(|m| same_training(&m.config, &cfg))
            .and_then(|_| std::fs::read_to_string(dir.join("pretrain_report.json")).ok())
            .and_then(|s| serde_json::from_str::<Value>(&s).ok())
            .and_then(|r| r["mean_dsc"].as_f64());
        let pretrain_dsc = match cached {
            Some(d) if dir.join("model.ckpt").is_file() => d,
            _ => cmd_pretrain(&cfg).expect("pretraining the benchmark model").mean_dsc,
        };
        let model = load_model(&cfg).expect("loading the benchmark checkpoint");
        cfg.adapt.cycles = 1;
        Bench { cfg, model, pretrain_dsc }
    })
}

/// Default config with dotted-key overrides.
pub fn config(overrides: &[&str]) -> ExperimentConfig {
    let mut cfg = bench().cfg.with_overrides(overrides).expect("valid overrides");
    cfg.label = if overrides.is_empty() { "odes".into() } else { overrides.join(" ") };
    cfg
}

/// Five-seed summary of one configuration, computed once per test binary.
pub fn summary(overrides: &[&str]) -> Summary {
    static MEMO: OnceLock<Mutex<HashMap<String, Arc<OnceLock<Summary>>>>> = OnceLock::new();
    let key = overrides.join(" ");
    let slot = MEMO
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry(key)
        .or_default()
        .clone();
    slot.get_or_init(|| {
        let cfg = config(overrides);
        run_experiment(&bench().model, &cfg).expect("benchmark run").summary
    })
    .clone()
}

fn mean(overrides: &[&str]) -> f64 {
    summary(overrides).mean_dsc.mean
}

#[test]
fn a3_end_to_end_gain() {
    let b = bench();
    let mut v = Verdict::new("A3", "ODES gains over source-only and continuity-only");
    v.check(b.pretrain_dsc >= 0.90, format!("pretrained held-out DSC {}", pts(b.pretrain_dsc)));
    let odes = mean(&[]);
    let source = mean(&["adapt.method=source_only"]);
    let cont = mean(&["adapt.method=continuity_only"]);
    v.check(
        odes >= source + 0.10,
        format!("ODES {} ≥ source-only {} + 10", pts(odes), pts(source)),
    );
    v.check(
        odes >= cont + 0.05,
        format!("ODES {} ≥ continuity-only {} + 5", pts(odes), pts(cont)),
    );
    v.finish();
}

/// `values[i] ≥ values[i+1] - TOL` for each neighbour pair.
fn ordered(v: &mut Verdict, what: &str, named: &[(&str, f64)]) {
    let ok = named.windows(2).all(|w| w[0].1 >= w[1].1 - TOL);
    let chain: Vec<String> = named.iter().map(|(n, d)| format!("{n} {}", pts(*d))).collect();
    v.check(ok, format!("{what}: {}", chain.join(" ≥ ")));
}

#[test]
fn a4_orderings() {
    let mut v = Verdict::new("A4", "ablation orderings within 0.5 points");
    let k100 = mean(&[]);
    ordered(
        &mut v,
        "selection rate",
        &[("K=100", k100), ("K=50", mean(&["adapt.K=50"])), ("K=10", mean(&["adapt.K=10"]))],
    );
    ordered(
        &mut v,
        "pruning at K=10",
        &[
            ("proposed", mean(&["adapt.K=10"])),
            ("random", mean(&["adapt.K=10", "adapt.pruning=random"])),
        ],
    );
    ordered(
        &mut v,
        "acquisition",
        &[
            ("ripu", k100),
            ("sconf", mean(&["adapt.strategy=sconf"])),
            ("ent", mean(&["adapt.strategy=ent"])),
            ("random", mean(&["adapt.strategy=random"])),
        ],
    );
    // At K=100 every image is kept, so the metric only matters below that.
    ordered(
        &mut v,
        "pruning metric at K=10",
        &[
            ("kl", mean(&["adapt.K=10"])),
            ("l2", mean(&["adapt.K=10", "adapt.metric=l2"])),
            ("l1", mean(&["adapt.K=10", "adapt.metric=l1"])),
        ],
    );
    let decay = mean(&["adapt.decay=exp_decay"]);
    v.check(
        (k100 - decay).abs() <= 0.015,
        format!("exp-decay {} within 1.5 of K=100 {}", pts(decay), pts(k100)),
    );
    ordered(
        &mut v,
        "query mode at b=2",
        &[
            ("pixel", mean(&["adapt.b=2"])),
            ("patch 5x5", mean(&["adapt.b=2", "adapt.mode=patch", "adapt.patch_side=5"])),
        ],
    );
    let sides: Vec<(String, f64)> = [3, 5, 7, 9, 11]
        .iter()
        .map(|s| {
            let side = format!("adapt.patch_side={s}");
            (format!("{s}x{s}"), mean(&["adapt.b=10", "adapt.mode=patch", side.as_str()]))
        })
        .collect();
    let named: Vec<(&str, f64)> = sides.iter().map(|(n, d)| (n.as_str(), *d)).collect();
    ordered(&mut v, "patch side at b=10", &named);
    v.finish();
}

#[test]
fn a6_no_forgetting_over_replay() {
    let mut v = Verdict::new("A6", "three-cycle replay does not lose accuracy");
    let s = summary(&["adapt.cycles=3"]);
    let cycles: Vec<f64> = s.cycle_mean_dsc.iter().map(|c| c.mean).collect();
    v.check(cycles.len() == 3, format!("{} cycles recorded", cycles.len()));
    let ok = cycles.windows(2).all(|w| w[1] >= w[0] - TOL);
    let shown: Vec<String> = cycles.iter().map(|&c| pts(c)).collect();
    v.check(ok, format!("cycle mean DSC non-decreasing: {}", shown.join(" → ")));
    v.finish();
}
