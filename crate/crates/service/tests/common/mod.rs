#![allow(dead_code)]

use std::sync::OnceLock;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use odes_core::acquisition::{oracle_annotate, AnnotationRecord, QuerySet};
use odes_core::data::{Batch, GenConfig};
use odes_core::segcore::{ArchConfig, TrainConfig};
use odes_harness::experiment::{cmd_pretrain, target_stream};
use odes_harness::{DataConfig, ExperimentConfig};
use odes_service::{router, AppState};
use serde_json::Value;
use tower::ServiceExt;

pub struct Fixture {
    _dir: tempfile::TempDir,
    pub cfg: ExperimentConfig,
}

/// A briefly pretrained 32x32 model; the target stream has 4 batches of 2.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig {
            data: DataConfig {
                generator: GenConfig {
                    height: 32,
                    width: 32,
                    slices: 4,
                    ..GenConfig::default()
                },
                source_volumes: 3,
                holdout_volumes: 1,
                target_volumes: 2,
                ..DataConfig::default()
            },
            model: ArchConfig {
                widths: vec![8, 16, 16, 32],
                ..ArchConfig::default()
            },
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            seeds: vec![0],
            output_dir: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        cfg.adapt.cycles = 1;
        cfg.checkpoint = Some(cmd_pretrain(&cfg).unwrap().checkpoint);
        Fixture { _dir: dir, cfg }
    })
}

pub fn app() -> (AppState, Router) {
    let state = AppState::new(fixture().cfg.clone());
    (state.clone(), router(state))
}

pub async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = send(app, method, uri, body).await;
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{method} {uri}: {e}: {bytes:?}"));
    (status, value)
}

pub async fn create(app: &Router, body: Value) -> String {
    let (status, v) = call(app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

/// Polls until the session leaves `adapting`.
pub async fn wait_idle(app: &Router, id: &str) -> Value {
    for _ in 0..2000 {
        let (_, v) = call(app, "GET", &format!("/sessions/{id}"), None).await;
        if v["state"] != "adapting" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    panic!("session {id} stayed in adapting");
}

pub fn stream(cfg: &ExperimentConfig, seed: u64) -> Vec<Batch> {
    target_stream(cfg, seed).unwrap()
}

/// Ground-truth answers to every query set of a payload.
pub fn oracle_records(payload: &Value, batch: &Batch) -> Vec<AnnotationRecord> {
    let truth = batch.truth.as_ref().unwrap();
    payload["querysets"]
        .as_array()
        .unwrap()
        .iter()
        .map(|q| {
            let q: QuerySet = serde_json::from_value(q.clone()).unwrap();
            oracle_annotate(&q, &truth[q.image_index]).unwrap()
        })
        .collect()
}

pub fn annotations_uri(id: &str, bid: u64) -> String {
    format!("/sessions/{id}/batches/{bid}/annotations")
}
