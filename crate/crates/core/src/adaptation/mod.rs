//! The online update: infer, prune, acquire labels, then one BN-only Adam
//! step on supervised plus continuity loss.
//!
//! A batch is handled in two phases so that an interactive annotator can sit
//! between them: [`Adapter::prepare`] produces predictions and queries
//! without touching the model, [`Adapter::finish`] consumes annotations and
//! performs the update. [`Adapter::adapt_batch`] chains the two with the
//! ground-truth oracle.

mod loss;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loss::{
    adjacent_pairs, continuity_loss, objective_and_dlogits, objective_gradients, supervised_loss, total_loss,
    AnnotationMasks, ContinuityTarget, LossBreakdown, Objective, ObjectiveValue,
};
pub use crate::metrics::dsc;

use crate::acquisition::{
    image_seed, oracle_annotate, score_image, select, AcqError, AnnotationRecord, QueryMode, QuerySet, Strategy,
};
use crate::data::Batch;
use crate::metrics::{foreground_mean, DiceAccumulator};
use crate::optim::{Adam, AdamConfig};
use crate::pruning::{
    decay_schedule, prune_batch, AugmentConfig, DecayMode, DivergenceMetric, KlDirection, PruneConfig, PruneError,
    PruningMode,
};
use crate::segcore::{BnMode, LabelMap, Model, ProbMap, SegError};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Acquisition(#[from] AcqError),
    #[error("annotation for image {0}, which is not in the batch")]
    UnknownImage(usize),
    #[error("image {image_index}: {reason}: {offending:?}")]
    Annotation {
        image_index: usize,
        offending: Vec<[usize; 2]>,
        reason: String,
    },
    #[error("no annotated pixels")]
    NoAnnotations,
    #[error("model has never been trained")]
    Untrained,
    #[error("prepared batch {prepared} does not match batch {given}")]
    BatchMismatch { prepared: u64, given: u64 },
    #[error("event log: {0}")]
    Io(#[from] std::io::Error),
    #[error("event log line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Pruning, acquisition, supervised plus continuity loss.
    #[default]
    Odes,
    /// No adaptation; evaluation-mode inference with the source statistics.
    SourceOnly,
    /// Continuity loss only, no labels.
    ContinuityOnly,
    /// Entropy minimization of BN parameters on every batch.
    EntropyMin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub method: Method,
    /// Image selection rate per batch, in percent.
    #[serde(rename = "K")]
    pub k: f64,
    /// Annotation budget per selected image, in percent of its pixels.
    pub b: f64,
    pub mode: QueryMode,
    /// Window side for impurity, patch averaging and patch queries.
    pub patch_side: usize,
    pub lambda: f64,
    pub lr: f64,
    pub metric: DivergenceMetric,
    pub kl_direction: KlDirection,
    pub strategy: Strategy,
    pub pruning: PruningMode,
    pub decay: DecayMode,
    pub seed: u64,
    pub cycles: usize,
    pub continuity_target: ContinuityTarget,
    pub augmentation: AugmentConfig,
    pub min_selected: usize,
    /// Also score predictions made right after each update.
    pub record_post_update_dsc: bool,
    /// Wall-clock phase timings make event logs non-reproducible, so they
    /// are opt-in.
    pub record_wall_times: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: Method::Odes,
            k: 100.0,
            b: 1.0,
            mode: QueryMode::Pixel,
            patch_side: 5,
            lambda: 0.1,
            lr: 0.01,
            metric: DivergenceMetric::Kl,
            kl_direction: KlDirection::SourceFirst,
            strategy: Strategy::Ripu,
            pruning: PruningMode::Proposed,
            decay: DecayMode::Constant,
            seed: 0,
            cycles: 1,
            continuity_target: ContinuityTarget::Hard,
            augmentation: AugmentConfig::default(),
            min_selected: 1,
            record_post_update_dsc: false,
            record_wall_times: false,
        }
    }
}

impl AdaptConfig {
    pub fn prune_config(&self, k: f64) -> PruneConfig {
        PruneConfig {
            k,
            metric: self.metric,
            direction: self.kl_direction,
            mode: self.pruning,
            augmentation: self.augmentation,
            min_selected: self.min_selected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ImageDivergence {
    pub index: usize,
    pub score: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct DivergenceLog {
    pub metric: DivergenceMetric,
    pub per_image: Vec<ImageDivergence>,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct AdaptationEvent {
    /// Position in the stream across all cycles, starting at 1.
    pub batch_id: u64,
    /// 1-based replay cycle.
    pub cycle: usize,
    pub method: Method,
    pub patient_ids: Vec<String>,
    #[serde(rename = "K_effective")]
    pub k_effective: f64,
    pub divergence: Option<DivergenceLog>,
    pub selected_indices: Vec<usize>,
    pub queries: Vec<QuerySet>,
    pub losses: Option<LossBreakdown>,
    /// Objective value of the entropy-minimization baseline.
    pub entropy_loss: Option<f64>,
    /// Dice of the predictions returned before the update, pooled over the
    /// batch, background first.
    pub per_class_dsc: Option<Vec<f64>>,
    pub dice_counts: Option<DiceAccumulator>,
    pub post_update_dsc: Option<Vec<f64>>,
    /// Optimizer steps taken so far in this session.
    pub optimizer_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_times: Option<BTreeMap<String, f64>>,
}

/// Output of [`Adapter::prepare`]: everything shown to an annotator.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub batch_id: u64,
    pub probs: Vec<ProbMap>,
    pub k_effective: f64,
    pub divergence: Option<DivergenceLog>,
    pub selected: Vec<usize>,
    pub queries: Vec<QuerySet>,
    wall_times: BTreeMap<String, f64>,
}

impl Prepared {
    pub fn predictions(&self) -> Vec<LabelMap> {
        self.probs.iter().map(ProbMap::argmax).collect()
    }

    pub fn query_for(&self, image_index: usize) -> Option<&QuerySet> {
        self.queries.iter().find(|q| q.image_index == image_index)
    }
}

/// A model plus the optimizer state of one adaptation session.
#[derive(Debug, Clone)]
pub struct Adapter {
    model: Model<f32>,
    optimizer: Adam,
    config: AdaptConfig,
    horizon: Option<usize>,
    position: usize,
    cycle: usize,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Adapter {
    /// `horizon` is the number of batches the session will see in total,
    /// needed by the decaying selection rate.
    pub fn new(model: Model<f32>, config: AdaptConfig, horizon: Option<usize>) -> Result<Self, AdaptError> {
        if !model.is_trained() {
            return Err(AdaptError::Untrained);
        }
        if config.method == Method::Odes {
            decay_schedule(config.k, 0, horizon, config.decay)?;
        }
        let optimizer = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            model.partition().bn_params,
        );
        Ok(Self {
            model,
            optimizer,
            config,
            horizon,
            position: 0,
            cycle: 1,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer.steps()
    }

    /// Number of batches finished so far.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn set_cycle(&mut self, cycle: usize) {
        self.cycle = cycle;
    }

    /// Selection rate for the next batch.
    pub fn k_effective(&self) -> Result<f64, AdaptError> {
        Ok(match self.config.method {
            Method::Odes => decay_schedule(self.config.k, self.position, self.horizon, self.config.decay)?,
            _ => 0.0,
        })
    }

    fn eval_mode(&self) -> BnMode {
        match self.config.method {
            Method::SourceOnly => BnMode::Running,
            _ => BnMode::Batch,
        }
    }

    /// Inference, pruning and query selection. Leaves the model untouched.
    pub fn prepare(&self, batch_id: u64, images: &[crate::segcore::SliceImage]) -> Result<Prepared, AdaptError> {
        let mut wall_times = BTreeMap::new();
        let t = Instant::now();
        let probs = self.model.infer(images, self.eval_mode())?;
        wall_times.insert("infer".to_string(), elapsed_ms(t));
        let k_effective = self.k_effective()?;
        let mut prepared = Prepared {
            batch_id,
            probs,
            k_effective,
            divergence: None,
            selected: Vec::new(),
            queries: Vec::new(),
            wall_times,
        };
        if k_effective <= 0.0 {
            return Ok(prepared);
        }
        let cfg = &self.config;
        let t = Instant::now();
        let salt = image_seed(cfg.seed, batch_id, usize::MAX);
        let outcome = prune_batch(&self.model, images, &cfg.prune_config(k_effective), salt)?;
        prepared.wall_times.insert("prune".to_string(), elapsed_ms(t));
        prepared.divergence = Some(DivergenceLog {
            metric: cfg.metric,
            per_image: outcome
                .scores
                .iter()
                .map(|s| ImageDivergence {
                    index: s.image_index,
                    score: s.score,
                    selected: outcome.selected.contains(&s.image_index),
                })
                .collect(),
        });
        let t = Instant::now();
        for &i in &outcome.selected {
            let score = score_image(
                &prepared.probs[i],
                cfg.strategy,
                cfg.mode,
                cfg.patch_side,
                image_seed(cfg.seed, batch_id, i),
            )?;
            prepared
                .queries
                .push(select(&score, cfg.mode, cfg.b, cfg.patch_side, i)?);
        }
        prepared.wall_times.insert("acquire".to_string(), elapsed_ms(t));
        prepared.selected = outcome.selected;
        Ok(prepared)
    }

    /// Checks that every record targets a selected image and only covers
    /// queried locations.
    pub fn validate_annotations(prepared: &Prepared, records: &[AnnotationRecord]) -> Result<(), AdaptError> {
        for r in records {
            let q = prepared
                .query_for(r.image_index)
                .ok_or(AdaptError::UnknownImage(r.image_index))?;
            let allowed: std::collections::BTreeSet<[usize; 2]> = q.coverage().into_iter().collect();
            let offending: Vec<[usize; 2]> = r
                .entries
                .iter()
                .map(|&[x, y, _]| [x, y])
                .filter(|p| !allowed.contains(p))
                .collect();
            if !offending.is_empty() {
                return Err(AdaptError::Annotation {
                    image_index: r.image_index,
                    offending,
                    reason: "outside the query set".into(),
                });
            }
        }
        Ok(())
    }

    /// Scores the returned predictions, performs the update and builds the
    /// event. Selected images without a record only contribute to the
    /// continuity term.
    pub fn finish(
        &mut self,
        images: &[crate::segcore::SliceImage],
        truth: Option<&[LabelMap]>,
        prepared: Prepared,
        records: &[AnnotationRecord],
    ) -> Result<AdaptationEvent, AdaptError> {
        Self::validate_annotations(&prepared, records)?;
        let mut wall_times = prepared.wall_times.clone();
        let classes = self.model.classes();
        let dice_counts = truth.map(|t| {
            let mut acc = DiceAccumulator::new(classes);
            for (pm, l) in prepared.probs.iter().zip(t) {
                acc.add(&pm.argmax(), l);
            }
            acc
        });
        let (h, w) = (images[0].height(), images[0].width());
        let t = Instant::now();
        let objective = match self.config.method {
            Method::SourceOnly => None,
            Method::EntropyMin => Some(Objective::Entropy),
            Method::Odes | Method::ContinuityOnly => {
                let ids: Vec<&str> = images.iter().map(|s| s.patient_id.as_str()).collect();
                Some(Objective::Odes {
                    masks: AnnotationMasks::from_records(records, images.len(), h, w, classes)?,
                    pairs: adjacent_pairs(&ids),
                    lambda: self.config.lambda,
                    target: self.config.continuity_target,
                })
            }
        };
        let mut losses = None;
        let mut entropy_loss = None;
        if let Some(objective) = objective {
            let x = self.model.stack(images)?;
            let (value, grads) = objective_gradients(&self.model, &x, &objective)?;
            self.optimizer.step(&mut self.model, &grads);
            match value {
                ObjectiveValue::Odes(l) => losses = Some(l),
                ObjectiveValue::Entropy(e) => entropy_loss = Some(e),
            }
        }
        wall_times.insert("update".to_string(), elapsed_ms(t));
        let post_update_dsc = match (self.config.record_post_update_dsc, truth) {
            (true, Some(t)) => {
                let mut acc = DiceAccumulator::new(classes);
                for (pm, l) in self.model.infer(images, self.eval_mode())?.iter().zip(t) {
                    acc.add(&pm.argmax(), l);
                }
                Some(acc.per_class())
            }
            _ => None,
        };
        let mut patient_ids: Vec<String> = Vec::new();
        for s in images {
            if patient_ids.last() != Some(&s.patient_id) {
                patient_ids.push(s.patient_id.clone());
            }
        }
        self.position += 1;
        Ok(AdaptationEvent {
            batch_id: prepared.batch_id,
            cycle: self.cycle,
            method: self.config.method,
            patient_ids,
            k_effective: prepared.k_effective,
            divergence: prepared.divergence,
            selected_indices: prepared.selected,
            queries: prepared.queries,
            losses,
            entropy_loss,
            per_class_dsc: dice_counts.as_ref().map(DiceAccumulator::per_class),
            dice_counts,
            post_update_dsc,
            optimizer_steps: self.optimizer.steps(),
            wall_times: self.config.record_wall_times.then_some(wall_times),
        })
    }

    /// One full step with ground-truth annotations. Without truth the
    /// selected images get no labels and only the continuity term acts.
    pub fn adapt_batch(&mut self, batch_id: u64, batch: &Batch) -> Result<AdaptationEvent, AdaptError> {
        let prepared = self.prepare(batch_id, &batch.images)?;
        let mut records = Vec::new();
        if let Some(truth) = &batch.truth {
            for q in &prepared.queries {
                records.push(oracle_annotate(q, &truth[q.image_index])?);
            }
        }
        self.finish(&batch.images, batch.truth.as_deref(), prepared, &records)
    }
}

/// Per-cycle summary of a stream run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CycleSummary {
    pub cycle: usize,
    /// Mean over patients of per-patient Dice, background first.
    pub per_class_dsc: Vec<f64>,
    /// Foreground mean of `per_class_dsc`.
    pub mean_dsc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutcome {
    pub events: Vec<AdaptationEvent>,
    pub cycles: Vec<CycleSummary>,
    pub optimizer_steps: u64,
    pub model: Model<f32>,
}

/// Per-patient Dice averaged over patients, from the events of one cycle.
pub fn summarize_cycle(events: &[AdaptationEvent], cycle: usize, classes: usize) -> Option<CycleSummary> {
    let mut per_patient: BTreeMap<&str, DiceAccumulator> = BTreeMap::new();
    for e in events.iter().filter(|e| e.cycle == cycle) {
        let (Some(counts), Some(pid)) = (&e.dice_counts, e.patient_ids.first()) else {
            continue;
        };
        per_patient
            .entry(pid.as_str())
            .or_insert_with(|| DiceAccumulator::new(classes))
            .merge(counts);
    }
    if per_patient.is_empty() {
        return None;
    }
    let n = per_patient.len() as f64;
    let mut per_class = vec![0.0; classes];
    for acc in per_patient.values() {
        for (s, d) in per_class.iter_mut().zip(acc.per_class()) {
            *s += d / n;
        }
    }
    Some(CycleSummary {
        cycle,
        mean_dsc: foreground_mean(&per_class),
        per_class_dsc: per_class,
    })
}

/// Visits every batch once per cycle, reporting the pre-update predictions
/// and then adapting. Batch ids keep increasing across cycles.
pub fn run_stream(model: Model<f32>, stream: &[Batch], config: &AdaptConfig) -> Result<StreamOutcome, AdaptError> {
    let cycles = config.cycles.max(1);
    let classes = model.classes();
    if stream.is_empty() {
        return Ok(StreamOutcome {
            events: Vec::new(),
            cycles: Vec::new(),
            optimizer_steps: 0,
            model,
        });
    }
    let mut adapter = Adapter::new(model, config.clone(), Some(stream.len() * cycles))?;
    let mut events = Vec::with_capacity(stream.len() * cycles);
    for cycle in 1..=cycles {
        adapter.set_cycle(cycle);
        for batch in stream {
            let batch_id = events.len() as u64 + 1;
            events.push(adapter.adapt_batch(batch_id, batch)?);
        }
        log::debug!("cycle {cycle} done after {} batches", events.len());
    }
    let summaries = (1..=cycles)
        .filter_map(|c| summarize_cycle(&events, c, classes))
        .collect();
    Ok(StreamOutcome {
        events,
        cycles: summaries,
        optimizer_steps: adapter.optimizer_steps(),
        model: adapter.into_model(),
    })
}

/// Writes one JSON object per line.
pub fn write_events<W: Write>(mut out: W, events: &[AdaptationEvent]) -> Result<(), AdaptError> {
    for e in events {
        serde_json::to_writer(&mut out, e).map_err(|source| AdaptError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_events(path: &Path, events: &[AdaptationEvent]) -> Result<(), AdaptError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_events(&mut f, events)?;
    f.flush()?;
    Ok(())
}

/// Parses an event log; malformed lines are returned as errors with their
/// 1-based line number instead of aborting the whole read.
pub fn read_events<R: BufRead>(input: R) -> Result<(Vec<AdaptationEvent>, Vec<AdaptError>), AdaptError> {
    let mut events = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(e) => events.push(e),
            Err(source) => bad.push(AdaptError::Json { line: i + 1, source }),
        }
    }
    Ok((events, bad))
}
