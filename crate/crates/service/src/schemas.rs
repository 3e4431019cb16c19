//! Published JSON schemas of the wire types.

use odes_core::acquisition::{AnnotationRecord, QuerySet};
use odes_core::adaptation::AdaptationEvent;
use schemars::schema_for;
use serde_json::{json, Value};

use crate::api::*;

/// Bumped on any incompatible change of a wire type.
pub const VERSION: &str = "v1";

pub const NAMES: [&str; 14] = [
    "create_session",
    "session_created",
    "session_status",
    "batch_payload",
    "annotation_submission",
    "annotation_ack",
    "annotation_pending",
    "metrics",
    "error",
    "query_set",
    "annotation_record",
    "adaptation_event",
    "experiment_config",
    "session_state",
];

pub fn schema(name: &str) -> Option<Value> {
    let s = match name {
        "create_session" => schema_for!(CreateSession),
        "session_created" => schema_for!(SessionCreated),
        "session_status" => schema_for!(SessionStatus),
        "batch_payload" => schema_for!(BatchPayload),
        "annotation_submission" => schema_for!(AnnotationSubmission),
        "annotation_ack" => schema_for!(AnnotationAck),
        "annotation_pending" => schema_for!(AnnotationPending),
        "metrics" => schema_for!(Metrics),
        "error" => schema_for!(ErrorBody),
        "query_set" => schema_for!(QuerySet),
        "annotation_record" => schema_for!(AnnotationRecord),
        "adaptation_event" => schema_for!(AdaptationEvent),
        "experiment_config" => schema_for!(odes_harness::ExperimentConfig),
        "session_state" => schema_for!(SessionState),
        _ => return None,
    };
    Some(serde_json::to_value(s).expect("schemas serialize"))
}

pub fn index() -> Value {
    let urls: serde_json::Map<String, Value> = NAMES
        .iter()
        .map(|n| (n.to_string(), json!(format!("/schemas/{VERSION}/{n}.json"))))
        .collect();
    json!({ "version": VERSION, "schemas": urls })
}
