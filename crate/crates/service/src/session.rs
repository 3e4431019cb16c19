//! One adaptation session and its state machine.
//!
//! All mutation goes through the `inner` mutex, so at most one
//! `Adapter::finish` can run per session. Readers use the `view` snapshot,
//! which is only write-locked for the instant it is replaced.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use base64::Engine;
use odes_core::acquisition::AnnotationRecord;
use odes_core::adaptation::{AdaptError, AdaptationEvent, Adapter, Prepared};
use odes_core::data::Batch;
use odes_harness::experiment::{adapt_config_for, load_model, target_stream};
use odes_harness::ExperimentConfig;

use crate::api::{
    AnnotationAck, AnnotationPending, BatchPayload, Metrics, Offending, PaletteEntry, SessionCreated, SessionState,
    SessionStatus, SliceView,
};
use crate::render;
use crate::ServiceError;

/// Rendered files of the batch currently on screen.
#[derive(Debug)]
pub struct Rendered {
    pub batch_id: u64,
    pub images: Vec<Vec<u8>>,
    pub predictions: Vec<Vec<u8>>,
    pub raw: Vec<Vec<u8>>,
    pub truth: Option<Vec<Vec<u8>>>,
}

#[derive(Debug, Clone)]
struct View {
    state: SessionState,
    current_batch_id: Option<u64>,
    events: Arc<Vec<AdaptationEvent>>,
    rendered: Option<Arc<Rendered>>,
}

struct Current {
    batch_id: u64,
    index: usize,
    prepared: Prepared,
    records: BTreeMap<usize, AnnotationRecord>,
}

struct Inner {
    state: SessionState,
    adapter: Adapter,
    stream: Vec<Batch>,
    cursor: usize,
    current: Option<Current>,
    events: Vec<AdaptationEvent>,
}

pub enum Submitted {
    Done(AnnotationAck),
    Pending(AnnotationPending),
}

pub struct Session {
    pub id: String,
    pub seed: u64,
    pub total_batches: usize,
    pub palette: Vec<PaletteEntry>,
    demo: bool,
    inner: Mutex<Inner>,
    view: RwLock<View>,
    in_update: AtomicUsize,
    peak_in_update: AtomicUsize,
}

impl Session {
    /// Loads the checkpoint and builds the target stream of `seed`.
    pub fn create(id: String, cfg: &ExperimentConfig, seed: Option<u64>, demo: bool) -> Result<Self, ServiceError> {
        cfg.validate(true)?;
        let model = load_model(cfg)?;
        let seed = seed.unwrap_or(cfg.seeds[0]);
        let stream = target_stream(cfg, seed)?;
        if stream.is_empty() {
            return Err(ServiceError::BadRequest("the target stream is empty".into()));
        }
        let total_batches = stream.len() * cfg.adapt.cycles.max(1);
        let palette = render::palette(model.classes());
        let adapter = Adapter::new(model, adapt_config_for(cfg, seed), Some(total_batches))
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        Ok(Self {
            id,
            seed,
            total_batches,
            palette,
            demo,
            inner: Mutex::new(Inner {
                state: SessionState::AwaitingBatch,
                adapter,
                stream,
                cursor: 0,
                current: None,
                events: Vec::new(),
            }),
            view: RwLock::new(View {
                state: SessionState::AwaitingBatch,
                current_batch_id: None,
                events: Arc::new(Vec::new()),
                rendered: None,
            }),
            in_update: AtomicUsize::new(0),
            peak_in_update: AtomicUsize::new(0),
        })
    }

    pub fn created(&self) -> SessionCreated {
        SessionCreated {
            session_id: self.id.clone(),
            state: self.state(),
            seed: self.seed,
            total_batches: self.total_batches,
            palette: self.palette.clone(),
        }
    }

    fn view(&self) -> View {
        self.view.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Publishes the state of `inner` to readers.
    fn publish(&self, inner: &Inner, rendered: Option<Option<Arc<Rendered>>>) {
        let mut view = self.view.write().unwrap_or_else(|e| e.into_inner());
        view.state = inner.state;
        view.current_batch_id = inner.current.as_ref().map(|c| c.batch_id);
        if view.events.len() != inner.events.len() {
            view.events = Arc::new(inner.events.clone());
        }
        if let Some(r) = rendered {
            view.rendered = r;
        }
    }

    pub fn state(&self) -> SessionState {
        self.view().state
    }

    pub fn status(&self) -> SessionStatus {
        let v = self.view();
        SessionStatus {
            session_id: self.id.clone(),
            state: v.state,
            current_batch_id: v.current_batch_id,
            completed_batches: v.events.len(),
            total_batches: self.total_batches,
        }
    }

    pub fn metrics(&self) -> Metrics {
        let v = self.view();
        Metrics {
            session_id: self.id.clone(),
            state: v.state,
            events: v.events.as_ref().clone(),
        }
    }

    pub fn rendered(&self) -> Option<Arc<Rendered>> {
        self.view().rendered
    }

    /// Largest number of updates ever observed running at once.
    pub fn peak_concurrent_updates(&self) -> usize {
        self.peak_in_update.load(Ordering::SeqCst)
    }

    fn refuse_while_adapting(&self) -> Result<(), ServiceError> {
        match self.state() {
            SessionState::Adapting => Err(ServiceError::Conflict {
                state: SessionState::Adapting,
                message: "the previous batch is still being adapted".into(),
            }),
            _ => Ok(()),
        }
    }

    /// Serves the next batch. The flag is set when nothing was queried and
    /// the caller must run [`Session::run_pending_update`].
    pub fn next_batch(&self) -> Result<(BatchPayload, bool), ServiceError> {
        self.refuse_while_adapting()?;
        let mut guard = self.lock();
        let inner = &mut *guard;
        match inner.state {
            SessionState::AwaitingBatch => {}
            SessionState::Finished => return Err(ServiceError::Finished),
            state => {
                return Err(ServiceError::Conflict {
                    state,
                    message: format!("next-batch is not allowed while {}", state_name(state)),
                })
            }
        }
        if inner.cursor == self.total_batches {
            inner.state = SessionState::Finished;
            self.publish(inner, Some(None));
            return Err(ServiceError::Finished);
        }
        let len = inner.stream.len();
        let (index, cycle, batch_id) = (inner.cursor % len, inner.cursor / len + 1, inner.cursor as u64 + 1);
        inner.adapter.set_cycle(cycle);
        let batch = &inner.stream[index];
        let prepared = inner.adapter.prepare(batch_id, &batch.images)?;
        let rendered = self.render(batch_id, batch, &prepared);
        let payload = self.payload(batch, &prepared, &rendered, cycle);
        let needs_update = prepared.queries.is_empty();
        inner.state = if needs_update {
            SessionState::Adapting
        } else {
            SessionState::AwaitingAnnotations
        };
        inner.current = Some(Current {
            batch_id,
            index,
            prepared,
            records: BTreeMap::new(),
        });
        self.publish(inner, Some(Some(Arc::new(rendered))));
        Ok((
            BatchPayload {
                state: inner.state,
                ..payload
            },
            needs_update,
        ))
    }

    fn render(&self, batch_id: u64, batch: &Batch, prepared: &Prepared) -> Rendered {
        let windows = batch.images.iter().map(render::default_window);
        Rendered {
            batch_id,
            images: batch
                .images
                .iter()
                .zip(windows)
                .map(|(img, w)| render::grayscale_png(img, w))
                .collect(),
            predictions: prepared
                .predictions()
                .iter()
                .map(|l| render::label_png(l, &self.palette))
                .collect(),
            raw: batch.images.iter().map(render::raw_f32).collect(),
            truth: batch
                .truth
                .as_ref()
                .filter(|_| self.demo)
                .map(|t| t.iter().map(|l| render::label_png(l, &self.palette)).collect()),
        }
    }

    fn payload(&self, batch: &Batch, prepared: &Prepared, rendered: &Rendered, cycle: usize) -> BatchPayload {
        let b64 = base64::engine::general_purpose::STANDARD;
        let bid = prepared.batch_id;
        let url = |file: String| format!("/sessions/{}/slices/{bid}/{file}", self.id);
        let slices = batch
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| SliceView {
                index: i,
                patient_id: img.patient_id.clone(),
                slice_index: img.slice_index,
                height: img.height(),
                width: img.width(),
                window: render::default_window(img),
                image_png: b64.encode(&rendered.images[i]),
                prediction_png: b64.encode(&rendered.predictions[i]),
                image_url: url(format!("{i}.png")),
                prediction_url: url(format!("{i}.prediction.png")),
                raw_url: url(format!("{i}.f32")),
                truth_url: rendered.truth.as_ref().map(|_| url(format!("{i}.truth.png"))),
            })
            .collect();
        BatchPayload {
            session_id: self.id.clone(),
            batch_id: bid,
            cycle,
            state: SessionState::AwaitingAnnotations,
            k_effective: prepared.k_effective,
            slices,
            querysets: prepared.queries.clone(),
        }
    }

    /// Stores annotations for the current batch and runs the update once
    /// every queried location has a label or `finalize` is set. Records for
    /// the same image accumulate across requests.
    pub fn submit(&self, batch_id: u64, records: Vec<AnnotationRecord>, finalize: bool) -> Result<Submitted, ServiceError> {
        self.refuse_while_adapting()?;
        let mut guard = self.lock();
        let inner = &mut *guard;
        if inner.state != SessionState::AwaitingAnnotations {
            return Err(ServiceError::Conflict {
                state: inner.state,
                message: format!("annotations are not accepted while {}", state_name(inner.state)),
            });
        }
        let classes = inner.adapter.model().classes();
        let current = inner.current.as_mut().expect("awaiting annotations implies a current batch");
        if batch_id != current.batch_id {
            return Err(ServiceError::Conflict {
                state: SessionState::AwaitingAnnotations,
                message: format!("batch {batch_id} is not the current batch {}", current.batch_id),
            });
        }
        Adapter::validate_annotations(&current.prepared, &records).map_err(|e| match e {
            AdaptError::Annotation {
                image_index,
                offending,
                reason,
            } => ServiceError::Rejected {
                message: format!("image {image_index}: {reason}"),
                offending: vec![Offending {
                    image_index,
                    coordinates: offending,
                }],
            },
            other => ServiceError::Rejected {
                message: other.to_string(),
                offending: Vec::new(),
            },
        })?;
        if let Some((r, e)) = records
            .iter()
            .find_map(|r| r.entries.iter().find(|e| e[2] >= classes).map(|e| (r, e)))
        {
            return Err(ServiceError::Rejected {
                message: format!("image {}: class {} at ({}, {}) is not below {classes}", r.image_index, e[2], e[0], e[1]),
                offending: vec![Offending {
                    image_index: r.image_index,
                    coordinates: vec![[e[0], e[1]]],
                }],
            });
        }
        for r in records {
            match current.records.get_mut(&r.image_index) {
                Some(existing) => existing.entries.extend(r.entries),
                None => {
                    current.records.insert(r.image_index, r);
                }
            }
        }
        let pending: Vec<usize> = current
            .prepared
            .queries
            .iter()
            .filter(|q| {
                current.records.get(&q.image_index).is_none_or(|r| {
                    let done: BTreeSet<[usize; 2]> = r.entries.iter().map(|&[x, y, _]| [x, y]).collect();
                    q.coverage().iter().any(|c| !done.contains(c))
                })
            })
            .map(|q| q.image_index)
            .collect();
        if !pending.is_empty() && !finalize {
            return Ok(Submitted::Pending(AnnotationPending {
                session_id: self.id.clone(),
                batch_id,
                state: inner.state,
                annotated: current.records.keys().copied().collect(),
                pending,
            }));
        }
        let event = self.update(inner)?;
        Ok(Submitted::Done(AnnotationAck {
            session_id: self.id.clone(),
            batch_id,
            state: inner.state,
            losses: event.losses,
            per_class_dsc: event.per_class_dsc,
            optimizer_steps: event.optimizer_steps,
        }))
    }

    /// Runs the update of a batch that needed no annotations.
    pub fn run_pending_update(&self) -> Result<(), ServiceError> {
        let mut inner = self.lock();
        if inner.state != SessionState::Adapting {
            return Ok(());
        }
        self.update(&mut inner).map(|_| ())
    }

    fn update(&self, inner: &mut Inner) -> Result<AdaptationEvent, ServiceError> {
        inner.state = SessionState::Adapting;
        self.publish(inner, None);
        let running = self.in_update.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_update.fetch_max(running, Ordering::SeqCst);
        let current = inner.current.take().expect("an update needs a current batch");
        let records: Vec<AnnotationRecord> = current.records.into_values().collect();
        let batch = &inner.stream[current.index];
        let result = inner
            .adapter
            .finish(&batch.images, batch.truth.as_deref(), current.prepared, &records);
        self.in_update.fetch_sub(1, Ordering::SeqCst);
        let event = match result {
            Ok(e) => e,
            Err(e) => {
                // Records were validated up front, so this is an internal
                // failure; the batch is dropped and the stream moves on.
                log::error!("session {}: update of batch {} failed: {e}", self.id, current.batch_id);
                inner.cursor += 1;
                inner.state = SessionState::AwaitingBatch;
                self.publish(inner, None);
                return Err(e.into());
            }
        };
        inner.cursor += 1;
        inner.events.push(event.clone());
        inner.state = SessionState::AwaitingBatch;
        self.publish(inner, None);
        Ok(event)
    }
}

fn state_name(state: SessionState) -> &'static str {
    match state {
        SessionState::AwaitingBatch => "awaiting a batch request",
        SessionState::AwaitingAnnotations => "awaiting annotations",
        SessionState::Adapting => "adapting",
        SessionState::Finished => "finished",
    }
}
