//! Pretraining and seeded headless stream runs.

use std::fs;
use std::path::{Path, PathBuf};

use odes_core::adaptation::{run_stream, save_events, AdaptConfig, AdaptationEvent, CycleSummary, StreamOutcome};
use odes_core::data::{
    load_volume, make_stream, save_volume, synthetic_cohort, Batch, ShiftSpec, VolumeRecord, CLASS_NAMES, META_FILE,
};
use odes_core::metrics::foreground_mean;
use odes_core::segcore::{build_model, load_checkpoint, pretrain_source, save_checkpoint, Model, TrainLog};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::manifest::Manifest;
use crate::{ExperimentConfig, HarnessError};

/// Every volume directory directly under `dir`, in name order.
pub fn load_dir(dir: &Path) -> Result<Vec<VolumeRecord>, HarnessError> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| HarnessError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(HarnessError::Config(format!("no volumes under {}", dir.display())));
    }
    subdirs.iter().map(|p| Ok(load_volume(p)?)).collect()
}

/// Training and held-out source volumes.
pub fn source_data(cfg: &ExperimentConfig) -> Result<(Vec<VolumeRecord>, Vec<VolumeRecord>), HarnessError> {
    let d = &cfg.data;
    let train = match &d.source_dir {
        Some(dir) => load_dir(dir)?,
        None => synthetic_cohort(&d.generator, d.source_volumes, d.source_seed, "src", None)?,
    };
    let holdout = match &d.holdout_dir {
        Some(dir) => load_dir(dir)?,
        None => synthetic_cohort(&d.generator, d.holdout_volumes, d.holdout_seed, "hold", None)?,
    };
    Ok((train, holdout))
}

/// The shift applied to run seed `seed`'s target cohort.
pub fn shift_for(cfg: &ExperimentConfig, seed: u64) -> ShiftSpec {
    ShiftSpec {
        seed: cfg.shift.seed.wrapping_add(seed),
        ..cfg.shift.clone()
    }
}

pub fn target_volumes(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<VolumeRecord>, HarnessError> {
    let d = &cfg.data;
    match &d.target_dir {
        Some(dir) => load_dir(dir),
        None => Ok(synthetic_cohort(
            &d.generator,
            d.target_volumes,
            d.target_seed.wrapping_add(seed),
            "tgt",
            Some(&shift_for(cfg, seed)),
        )?),
    }
}

/// Target stream of run seed `seed`; patient order is shuffled with `seed`.
pub fn target_stream(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Batch>, HarnessError> {
    let vols = target_volumes(cfg, seed)?;
    Ok(make_stream(&vols, cfg.stream.batch_size, seed, cfg.stream.policy))
}

/// Builds the configured network and trains it on the source split.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<(Model<f32>, TrainLog), HarnessError> {
    let (train, holdout) = source_data(cfg)?;
    let mut model = build_model(&cfg.model, cfg.train.seed)?;
    let log = pretrain_source(&mut model, &train, &holdout, &cfg.train)?;
    Ok((model, log))
}

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|c| CLASS_NAMES.get(c).map_or_else(|| format!("class_{c}"), |s| s.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PretrainReport {
    pub source_dsc_per_class: Vec<f64>,
    pub mean_dsc: f64,
    pub converged: bool,
    pub epoch_losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Trains, then writes the checkpoint, `pretrain_report.json` and a manifest
/// into the output directory. The checkpoint goes to `cfg.checkpoint` when
/// that is set.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainReport, HarnessError> {
    cfg.validate(false)?;
    let out = cfg.resolved_output_dir();
    fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
    let (model, log) = pretrain(cfg)?;
    let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"));
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    save_checkpoint(&model, &ckpt, &class_names(model.classes()), cfg.train.seed)?;
    let report = PretrainReport {
        source_dsc_per_class: log.source_dsc_per_class,
        mean_dsc: log.mean_dsc,
        converged: log.converged,
        epoch_losses: log.epoch_losses,
        checkpoint: ckpt.clone(),
    };
    write_json(&out.join("pretrain_report.json"), &report)?;
    Manifest::new("pretrain", cfg, Some(&ckpt))?.write(&out)?;
    Ok(report)
}

/// Loads `cfg.checkpoint` and checks it against `cfg.model`.
pub fn load_model(cfg: &ExperimentConfig) -> Result<Model<f32>, HarnessError> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| HarnessError::Config("a checkpoint path is required".into()))?;
    if !path.is_file() {
        return Err(HarnessError::MissingPath(path.clone()));
    }
    let (model, _) = load_checkpoint(path)?;
    if model.arch() != &cfg.model {
        return Err(HarnessError::ArchMismatch {
            path: path.clone(),
            detail: format!("checkpoint has {:?}, config asks for {:?}", model.arch(), cfg.model),
        });
    }
    Ok(model)
}

/// The adaptation config of one run seed.
pub fn adapt_config_for(cfg: &ExperimentConfig, seed: u64) -> AdaptConfig {
    AdaptConfig {
        seed,
        ..cfg.adapt.clone()
    }
}

pub fn run_seed(model: &Model<f32>, cfg: &ExperimentConfig, seed: u64) -> Result<StreamOutcome, HarnessError> {
    let stream = target_stream(cfg, seed)?;
    Ok(run_stream(model.clone(), &stream, &adapt_config_for(cfg, seed))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SeedResult {
    pub seed: u64,
    pub cycles: Vec<CycleSummary>,
    pub optimizer_steps: u64,
}

impl SeedResult {
    /// Mean foreground Dice of the last cycle.
    pub fn final_mean(&self) -> f64 {
        self.cycles.last().map_or(f64::NAN, |c| c.mean_dsc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ClassStat {
    pub class: String,
    #[serde(flatten)]
    pub stat: Stat,
}

/// Across-seed statistics of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Summary {
    pub label: String,
    pub seeds: Vec<u64>,
    /// Last cycle, background first.
    pub per_class: Vec<ClassStat>,
    /// Mean foreground Dice of the last cycle.
    pub mean_dsc: Stat,
    /// Mean foreground Dice per cycle.
    pub cycle_mean_dsc: Vec<Stat>,
}

impl Summary {
    pub fn from_results(label: &str, classes: usize, results: &[SeedResult]) -> Self {
        let names = class_names(classes);
        let last: Vec<&CycleSummary> = results.iter().filter_map(|r| r.cycles.last()).collect();
        let per_class = names
            .into_iter()
            .enumerate()
            .map(|(c, class)| ClassStat {
                class,
                stat: Stat::of(&last.iter().map(|s| s.per_class_dsc[c]).collect::<Vec<_>>()),
            })
            .collect();
        let n_cycles = results.iter().map(|r| r.cycles.len()).max().unwrap_or(0);
        let cycle_mean_dsc = (0..n_cycles)
            .map(|k| {
                Stat::of(
                    &results
                        .iter()
                        .filter_map(|r| r.cycles.get(k).map(|c| c.mean_dsc))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        Self {
            label: label.to_string(),
            seeds: results.iter().map(|r| r.seed).collect(),
            per_class,
            mean_dsc: Stat::of(&last.iter().map(|s| foreground_mean(&s.per_class_dsc)).collect::<Vec<_>>()),
            cycle_mean_dsc,
        }
    }

    /// Human-readable table in Dice points (×100).
    pub fn to_table(&self) -> String {
        let mut s = format!("{} (seeds {:?})\n", self.label, self.seeds);
        for c in &self.per_class {
            s += &format!("  {:<14} {:6.2} ± {:5.2}\n", c.class, 100.0 * c.stat.mean, 100.0 * c.stat.std);
        }
        s += &format!(
            "  {:<14} {:6.2} ± {:5.2}\n",
            "mean (fg)",
            100.0 * self.mean_dsc.mean,
            100.0 * self.mean_dsc.std
        );
        if self.cycle_mean_dsc.len() > 1 {
            let per: Vec<String> = self.cycle_mean_dsc.iter().map(|c| format!("{:.2}", 100.0 * c.mean)).collect();
            s += &format!("  per cycle      {}\n", per.join(" / "));
        }
        s
    }
}

pub struct ExperimentOutcome {
    pub summary: Summary,
    pub seeds: Vec<SeedResult>,
    /// Event log of each seed, in seed order.
    pub events: Vec<Vec<AdaptationEvent>>,
}

/// Runs every seed of `cfg` from the same starting model.
pub fn run_experiment(model: &Model<f32>, cfg: &ExperimentConfig) -> Result<ExperimentOutcome, HarnessError> {
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    let mut events = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let out = run_seed(model, cfg, seed)?;
        log::info!(
            "{} seed {seed}: mean DSC {:.4}",
            cfg.label,
            out.cycles.last().map_or(f64::NAN, |c| c.mean_dsc)
        );
        seeds.push(SeedResult {
            seed,
            cycles: out.cycles,
            optimizer_steps: out.optimizer_steps,
        });
        events.push(out.events);
    }
    Ok(ExperimentOutcome {
        summary: Summary::from_results(&cfg.label, model.classes(), &seeds),
        seeds,
        events,
    })
}

/// Event log file name of one seed.
pub fn event_file_name(seed: u64) -> String {
    format!("events_seed{seed}.jsonl")
}

/// Loads the checkpoint, runs every seed and writes, under
/// `<output_dir>/<label>/`, one event log per seed, `summary.json` and a
/// manifest.
pub fn cmd_adapt(cfg: &ExperimentConfig) -> Result<(ExperimentOutcome, PathBuf), HarnessError> {
    cfg.validate(true)?;
    let model = load_model(cfg)?;
    let dir = cfg.resolved_output_dir().join(&cfg.label);
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let outcome = run_experiment(&model, cfg)?;
    for (seed, events) in cfg.seeds.iter().zip(&outcome.events) {
        save_events(&dir.join(event_file_name(*seed)), events)?;
    }
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({ "summary": &outcome.summary, "seeds": &outcome.seeds }),
    )?;
    Manifest::new("adapt", cfg, cfg.checkpoint.as_deref())?.write(&dir)?;
    Ok((outcome, dir))
}

/// Writes the source, held-out and seed-`seed` target volumes as
/// `out/{source,holdout,target}/<patient_id>/`. Point `data.*_dir` at these
/// directories to run on them.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<Vec<PathBuf>, HarnessError> {
    let (train, holdout) = source_data(cfg)?;
    let target = target_volumes(cfg, seed)?;
    let mut dirs = Vec::new();
    for (split, vols) in [("source", train), ("holdout", holdout), ("target", target)] {
        for v in &vols {
            let dir = out.join(split).join(&v.patient_id);
            save_volume(v, &dir)?;
            dirs.push(dir);
        }
    }
    Manifest::new("gen-data", cfg, None)?.write(out)?;
    Ok(dirs)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}
