//! Wire types. Every request and response body is one of these, and each
//! has a JSON schema published under `/schemas`.

use odes_core::acquisition::{AnnotationRecord, QuerySet};
use odes_core::adaptation::{AdaptationEvent, LossBreakdown};
use odes_harness::ExperimentConfig;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    AwaitingBatch,
    AwaitingAnnotations,
    /// The update of the current batch is running; every mutating request
    /// is refused until it completes.
    Adapting,
    Finished,
}

/// Body of `POST /sessions`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Replaces the server's default configuration when present.
    #[serde(default)]
    pub config: Option<ExperimentConfig>,
    /// Run seed selecting the target stream; defaults to the first
    /// configured seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Also serve ground-truth overlays, when the stream has them.
    #[serde(default)]
    pub demo: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PaletteEntry {
    pub class: u8,
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SessionCreated {
    pub session_id: String,
    pub state: SessionState,
    pub seed: u64,
    /// Batches the session will serve, over all cycles.
    pub total_batches: usize,
    pub palette: Vec<PaletteEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SessionStatus {
    pub session_id: String,
    pub state: SessionState,
    pub current_batch_id: Option<u64>,
    pub completed_batches: usize,
    pub total_batches: usize,
}

/// Intensity window used to render a slice: `center ± width / 2` maps to
/// black..white. Clients may re-window from the raw download.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Window {
    pub center: f32,
    pub width: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SliceView {
    /// Position in the batch; query sets refer to it.
    pub index: usize,
    pub patient_id: String,
    pub slice_index: usize,
    pub height: usize,
    pub width: usize,
    pub window: Window,
    /// Base64 8-bit grayscale PNG.
    pub image_png: String,
    /// Base64 indexed-colour PNG of the prediction; background is
    /// transparent.
    pub prediction_png: String,
    pub image_url: String,
    pub prediction_url: String,
    /// Little-endian f32 pixels, row-major.
    pub raw_url: String,
    pub truth_url: Option<String>,
}

/// Response of `GET /sessions/{id}/next-batch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct BatchPayload {
    pub session_id: String,
    pub batch_id: u64,
    pub cycle: usize,
    /// `awaiting_annotations`, or `adapting` when nothing was queried.
    pub state: SessionState,
    #[serde(rename = "K_effective")]
    pub k_effective: f64,
    pub slices: Vec<SliceView>,
    pub querysets: Vec<QuerySet>,
}

/// Body of `POST /sessions/{id}/batches/{bid}/annotations`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSubmission {
    #[serde(default)]
    pub records: Vec<AnnotationRecord>,
    /// Run the update now; selected images without a record only
    /// contribute to the continuity term.
    #[serde(default)]
    pub finalize: bool,
}

/// The batch was consumed by an update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AnnotationAck {
    pub session_id: String,
    pub batch_id: u64,
    pub state: SessionState,
    pub losses: Option<LossBreakdown>,
    pub per_class_dsc: Option<Vec<f64>>,
    pub optimizer_steps: u64,
}

/// Records were stored; some queried locations are still unlabelled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AnnotationPending {
    pub session_id: String,
    pub batch_id: u64,
    pub state: SessionState,
    /// Images with at least one record.
    pub annotated: Vec<usize>,
    /// Images with queried locations still unlabelled.
    pub pending: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Metrics {
    pub session_id: String,
    pub state: SessionState,
    pub events: Vec<AdaptationEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Offending {
    pub image_index: usize,
    /// `[x, y]` pairs outside the query set.
    pub coordinates: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ErrorBody {
    /// Stable machine-readable code.
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offending: Vec<Offending>,
}
