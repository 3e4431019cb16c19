//! A7: reproducible event logs, lossless volume files and parity between a
//! scripted client of the annotation service and the headless harness.

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use odes_core::acquisition::{oracle_annotate, AnnotationRecord, QuerySet};
use odes_core::adaptation::AdaptationEvent;
use odes_core::data::{load_volume, save_volume, synthetic_cohort, Batch};
use odes_harness::experiment::{cmd_adapt, event_file_name, run_seed, target_stream};
use odes_service::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

use crate::benchmark::{bench, config};
use crate::Verdict;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn oracle_records(payload: &Value, batch: &Batch) -> Vec<AnnotationRecord> {
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

/// Answers every query of one session from ground truth and returns the
/// served event log.
async fn scripted_session(app: &Router, cfg: &odes_harness::ExperimentConfig, seed: u64) -> Vec<AdaptationEvent> {
    let (status, created) = call(app, "POST", "/sessions", Some(json!({ "config": cfg, "seed": seed }))).await;
    assert_eq!(status, StatusCode::CREATED, "{created}");
    let id = created["session_id"].as_str().unwrap().to_string();
    let batches = target_stream(cfg, seed).unwrap();
    for batch in &batches {
        let (status, payload) = call(app, "GET", &format!("/sessions/{id}/next-batch"), None).await;
        assert_eq!(status, StatusCode::OK, "{payload}");
        let bid = payload["batch_id"].as_u64().unwrap();
        let body = json!({ "records": oracle_records(&payload, batch), "finalize": true });
        let (status, ack) = call(app, "POST", &format!("/sessions/{id}/batches/{bid}/annotations"), Some(body)).await;
        assert_eq!(status, StatusCode::OK, "{ack}");
    }
    let (status, _) = call(app, "GET", &format!("/sessions/{id}/next-batch"), None).await;
    assert_eq!(status, StatusCode::GONE);
    let (_, metrics) = call(app, "GET", &format!("/sessions/{id}/metrics"), None).await;
    serde_json::from_value(metrics["events"].clone()).unwrap()
}

#[test]
fn a7_determinism_and_formats() {
    let mut v = Verdict::new("A7", "determinism, volume round-trip, service parity");
    let seeds = [0u64, 1];

    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = odes_harness::ExperimentConfig {
                seeds: seeds.to_vec(),
                output_dir: dir.path().to_path_buf(),
                ..config(&[])
            };
            let (_, out) = cmd_adapt(&cfg).unwrap();
            (dir, out)
        })
        .collect();
    for file in seeds.iter().map(|&s| event_file_name(s)).chain(["summary.json".to_string()]) {
        let a = std::fs::read(runs[0].1.join(&file)).unwrap();
        let b = std::fs::read(runs[1].1.join(&file)).unwrap();
        v.check(a == b && !a.is_empty(), format!("{file}: two runs give identical bytes ({} bytes)", a.len()));
    }

    let cfg = &bench().cfg;
    let dir = tempfile::tempdir().unwrap();
    let mut cohort = synthetic_cohort(&cfg.data.generator, 2, 11, "src", None).unwrap();
    cohort.extend(synthetic_cohort(&cfg.data.generator, 2, 12, "tgt", Some(&cfg.shift)).unwrap());
    let mut lossless = true;
    for vol in &cohort {
        let path = dir.path().join(&vol.patient_id);
        save_volume(vol, &path).unwrap();
        let back = load_volume(&path).unwrap();
        let bits = |v: &odes_core::data::VolumeRecord| -> Vec<u32> {
            v.slices.iter().flat_map(|s| s.pixels().iter().map(|p| p.to_bits())).collect()
        };
        lossless &= back == *vol && bits(&back) == bits(vol);
    }
    v.check(lossless, format!("{} volumes reload bit-for-bit", cohort.len()));

    let rt = tokio::runtime::Runtime::new().unwrap();
    let app = router(AppState::new(cfg.clone()));
    for seed in seeds {
        let headless = run_seed(&bench().model, cfg, seed).unwrap().events;
        let served = rt.block_on(scripted_session(&app, cfg, seed));
        v.check(
            served == headless,
            format!("seed {seed}: service events equal headless events ({} batches)", headless.len()),
        );
    }
    v.finish();
}
