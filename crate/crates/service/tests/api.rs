use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use slotdisc::encoder::ReferenceEncoderConfig;
use slotdisc::synthgen::{generate, SynthSpec};
use slotdisc::{ActiveLearner, Corpus, LearnerConfig, SelectionConfig, SlotCatalog, TrainingConfig};
use slotdisc_service::{LoopPhase, Service, ServiceConfig};
use tower::ServiceExt;

fn corpus() -> Corpus {
    generate(&SynthSpec::with_spans(60)).unwrap()
}

fn learner(corpus: Corpus) -> ActiveLearner {
    let config = LearnerConfig {
        model: slotdisc::classifier::ModelConfig {
            encoder: ReferenceEncoderConfig {
                buckets: 128,
                dim: 8,
                ..Default::default()
            },
            repr_dim: 8,
            seed: 0,
        },
        training: TrainingConfig {
            max_initial_epochs: 2,
            epochs_per_iteration: 1,
            ..Default::default()
        },
        selection: SelectionConfig {
            batch_fraction: 0.1,
            ..Default::default()
        },
        budget_fraction: None,
        patience: None,
        ..Default::default()
    };
    ActiveLearner::new(corpus, &SlotCatalog::new(Vec::<String>::new()).unwrap(), config).unwrap()
}

struct Harness {
    service: Service,
    router: Router,
    clock: Arc<AtomicU64>,
}

fn harness(dir: &std::path::Path) -> Harness {
    let clock = Arc::new(AtomicU64::new(0));
    let c = Arc::clone(&clock);
    let mut cfg = ServiceConfig::new(dir);
    cfg.lease_ms = 1000;
    let service = Service::start_with_clock(learner(corpus()), cfg, Arc::new(move || c.load(Ordering::SeqCst))).unwrap();
    let router = service.router();
    Harness { service, router, clock }
}

async fn call(router: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v: Value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

fn wait_idle(service: &Service) {
    let start = Instant::now();
    while service.shared().phase() == LoopPhase::Retraining {
        assert!(start.elapsed() < Duration::from_secs(120), "retraining did not finish");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[tokio::test]
async fn full_batch_with_new_slot_advances_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let h = harness(dir.path());
    let gold = corpus();

    let (s, before) = call(&h.router, "GET", "/api/progress", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(before["schema"], "1");
    assert_eq!(before["phase"], "annotating");

    let (s, batch) = call(&h.router, "GET", "/api/batch?annotator=ann&max=100", None).await;
    assert_eq!(s, StatusCode::OK);
    let tasks = batch["tasks"].as_array().unwrap().clone();
    assert_eq!(tasks.len(), 5);

    for (i, t) in tasks.iter().enumerate() {
        let id = t["task_id"].as_str().unwrap();
        let uri = format!("/api/tasks/{id}/label");
        let body = if i == 0 {
            json!({"annotator": "ann", "new_slot": {"name": "roomtype", "description": "kind of room"}})
        } else {
            let span = slotdisc::SpanId(t["span_id"].as_str().unwrap().to_owned());
            let label = gold.gold_label(&span).unwrap();
            let (_, slots) = call(&h.router, "GET", "/api/slots", None).await;
            let known = slots["slots"].as_array().unwrap().iter().any(|s| s["name"] == label);
            if known {
                json!({"annotator": "ann", "slot": label})
            } else {
                json!({"annotator": "ann", "new_slot": {"name": label}})
            }
        };
        let (s, v) = call(&h.router, "POST", &uri, Some(body)).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        assert_eq!(v["status"], "completed");
    }

    wait_idle(&h.service);
    let (_, after) = call(&h.router, "GET", "/api/progress", None).await;
    assert_eq!(after["iteration"], before["iteration"].as_u64().unwrap() + 1);
    assert!(after["labeled_fraction"].as_f64().unwrap() > before["labeled_fraction"].as_f64().unwrap());

    let (_, slots) = call(&h.router, "GET", "/api/slots", None).await;
    let room = slots["slots"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["name"] == "roomtype")
        .unwrap()
        .clone();
    assert_eq!(room["known"], true);
    assert_eq!(room["description"], "kind of room");
    assert_eq!(room["discovered_iteration"], 1);

    let (_, curve) = call(&h.router, "GET", "/api/curve", None).await;
    assert_eq!(curve["start"]["iteration"], 0);
    assert_eq!(curve["points"].as_array().unwrap().len(), 1);
    assert!(dir.path().join("state.ckpt").exists());
    assert!(dir.path().join("board.json").exists());
}

#[tokio::test]
async fn error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let h = harness(dir.path());
    let (s, _) = call(&h.router, "GET", "/api/batch", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (_, batch) = call(&h.router, "GET", "/api/batch?annotator=a&max=2", None).await;
    let id = batch["tasks"][0]["task_id"].as_str().unwrap().to_owned();
    let uri = format!("/api/tasks/{id}/label");

    let (s, v) = call(&h.router, "POST", "/api/tasks/nope/label", Some(json!({"annotator": "a", "skip": true}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["schema"], "1");
    let (s, _) = call(&h.router, "POST", &uri, Some(json!({"annotator": "b", "skip": true}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&h.router, "POST", &uri, Some(json!({"annotator": "a"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&h.router, "POST", &uri, Some(json!({"annotator": "a", "slot": "x", "skip": true}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&h.router, "POST", &uri, Some(json!({"annotator": "a", "slot": "never_declared"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&h.router, "POST", &uri, Some(json!({"annotator": "a", "new_slot": {"name": " "}}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&h.router, "POST", &uri, Some(json!("garbage"))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _) = call(&h.router, "POST", &uri, Some(json!({"annotator": "a", "skip": true}))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = call(&h.router, "POST", &uri, Some(json!({"annotator": "a", "skip": true}))).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, v) = call(&h.router, "POST", "/api/slots", Some(json!({"name": "roomtype", "description": "d"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["created"], true);
    let (_, v) = call(&h.router, "POST", "/api/slots", Some(json!({"name": "roomtype"}))).await;
    assert_eq!(v["created"], false);
    let (s, _) = call(&h.router, "POST", "/api/slots", Some(json!({"name": ""}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn leases_expire_and_move_between_annotators() {
    let dir = tempfile::tempdir().unwrap();
    let h = harness(dir.path());
    let (_, a) = call(&h.router, "GET", "/api/batch?annotator=a&max=5", None).await;
    assert_eq!(a["tasks"].as_array().unwrap().len(), 5);
    let (_, b) = call(&h.router, "GET", "/api/batch?annotator=b&max=5", None).await;
    assert!(b["tasks"].as_array().unwrap().is_empty());

    h.clock.store(5000, Ordering::SeqCst);
    let (_, b) = call(&h.router, "GET", "/api/batch?annotator=b&max=5", None).await;
    assert_eq!(b["tasks"].as_array().unwrap().len(), 5);
    let id = a["tasks"][0]["task_id"].as_str().unwrap();
    let (s, _) = call(&h.router, "POST", &format!("/api/tasks/{id}/label"), Some(json!({"annotator": "a", "skip": true}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn restart_keeps_labels_and_releases_leases() {
    let dir = tempfile::tempdir().unwrap();
    let h = harness(dir.path());
    let (_, batch) = call(&h.router, "GET", "/api/batch?annotator=a&max=5", None).await;
    let tasks = batch["tasks"].as_array().unwrap().clone();
    let first = tasks[0]["task_id"].as_str().unwrap().to_owned();
    let (s, _) = call(&h.router, "POST", "/api/slots", Some(json!({"name": "roomtype"}))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = call(&h.router, "POST", &format!("/api/tasks/{first}/label"), Some(json!({"annotator": "a", "slot": "roomtype"}))).await;
    assert_eq!(s, StatusCode::OK);
    drop(h);

    let service = Service::resume(corpus(), ServiceConfig::new(dir.path())).unwrap();
    let router = service.router();
    let (_, batch) = call(&router, "GET", "/api/batch?annotator=b&max=10", None).await;
    let ids: Vec<&str> = batch["tasks"].as_array().unwrap().iter().map(|t| t["task_id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 4);
    assert!(!ids.contains(&first.as_str()));
    let (_, progress) = call(&router, "GET", "/api/progress", None).await;
    assert!((progress["batch_completion"].as_f64().unwrap() - 0.2).abs() < 1e-12);

    for id in &ids {
        let (s, _) = call(&router, "POST", &format!("/api/tasks/{id}/label"), Some(json!({"annotator": "b", "skip": true}))).await;
        assert_eq!(s, StatusCode::OK);
    }
    wait_idle(&service);
    let (_, slots) = call(&router, "GET", "/api/slots", None).await;
    assert!(slots["slots"].as_array().unwrap().iter().any(|s| s["name"] == "roomtype" && s["known"] == true));
}

#[tokio::test]
async fn resume_retrains_a_batch_completed_before_shutdown() {
    let dir = tempfile::tempdir().unwrap();
    let h = harness(dir.path());
    let (_, batch) = call(&h.router, "GET", "/api/batch?annotator=a&max=5", None).await;
    let mut board: Value = serde_json::from_slice(&std::fs::read(dir.path().join("board.json")).unwrap()).unwrap();
    for t in board["board"]["tasks"].as_array_mut().unwrap() {
        t["status"] = json!("skipped");
    }
    assert_eq!(batch["tasks"].as_array().unwrap().len(), 5);
    drop(h);
    std::fs::write(dir.path().join("board.json"), board.to_string()).unwrap();

    let service = Service::resume(corpus(), ServiceConfig::new(dir.path())).unwrap();
    wait_idle(&service);
    assert_eq!(service.shared().progress().iteration, 1);
}
