#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use apt_core::dataset::{load_manifest, partition_prompt_subset, select_prompt_subset, Cohort, DatasetManifest};
use apt_core::engine::AptState;
use apt_core::fixtures::StudyFixture;
use apt_core::gateway::{Gateway, Matcher, RateLimitPolicy, Reply, ScriptEntry, ScriptedProvider};
use apt_core::label::ClassLabel;
use apt_core::prompt::{Caption, ImageCaptionPair, Provenance};
use apt_core::runstate::RunState;
use apt_review::{router, ReviewService, ServiceConfig};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const RUN: &str = "run1";
pub const TOKEN: &str = "review-secret";

pub struct Harness {
    pub dir: tempfile::TempDir,
    pub manifest: DatasetManifest,
    pub run_state_path: PathBuf,
    pub truth: HashMap<String, ClassLabel>,
    pub active: Vec<String>,
    pub provider: Arc<ScriptedProvider>,
    pub service: Arc<ReviewService>,
    pub app: Router,
}

/// Six prompt-pool animals with four images each and two test animals. The
/// prompt subset is 12 images, half of them initial.
pub fn manifest(dir: &std::path::Path) -> DatasetManifest {
    let path = StudyFixture::new(dir)
        .animal("P01", "Lurcher", 4, None)
        .animal("P02", "Lurcher", 4, None)
        .animal("P03", "Lurcher", 4, None)
        .animal("P04", "Wild", 4, None)
        .animal("P05", "Wild", 4, None)
        .animal("P06", "Wild", 4, None)
        .animal("T01", "Lurcher", 5, Some(Cohort::Test))
        .animal("T02", "Wild", 5, Some(Cohort::Test))
        .write();
    load_manifest(path).unwrap()
}

pub fn flip(label: &ClassLabel) -> String {
    if label.as_str() == "Lurcher" { "Wild".into() } else { "Lurcher".into() }
}

/// `script_for` gets the active ids and their classes and returns the
/// provider script.
pub fn harness(round_cap: u32, script_for: impl FnOnce(&[String], &HashMap<String, ClassLabel>) -> Vec<ScriptEntry>) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let manifest = manifest(dir.path());
    let subset = select_prompt_subset(&manifest, 3, 2, 7).unwrap();
    let (initial, active) = partition_prompt_subset(&subset, 0.5, 7).unwrap();
    let truth = subset.ground_truth();
    let pairs = initial
        .iter()
        .map(|image| ImageCaptionPair {
            image: image.clone(),
            caption: Caption::new(
                truth[&image.image_id].clone(),
                format!("Expert caption for {}.", image.image_id),
                Provenance::ExpertAuthored,
            )
            .unwrap(),
            verified: true,
        })
        .collect();
    let active_ids: Vec<String> = active.iter().map(|i| i.image_id.clone()).collect();
    let apt = AptState::init(pairs, active, &truth, round_cap).unwrap();
    let mut state = RunState::new(RUN, 7, subset, "Classify each query image.".into(), "v1".into(), apt);
    let run_state_path = dir.path().join("run_state.json");
    state.save(&run_state_path).unwrap();

    let provider = Arc::new(ScriptedProvider::new("scripted", script_for(&active_ids, &truth)).unwrap());
    let service = Arc::new(open(&run_state_path, &manifest, provider.clone()));
    Harness {
        app: router(service.clone()),
        service,
        provider,
        active: active_ids,
        truth,
        run_state_path,
        manifest,
        dir,
    }
}

pub fn open(path: &std::path::Path, manifest: &DatasetManifest, provider: Arc<ScriptedProvider>) -> ReviewService {
    let policy = RateLimitPolicy {
        retry_max: 0,
        max_requests_per_window: 100,
        ..RateLimitPolicy::default()
    };
    ReviewService::open(ServiceConfig {
        run_state_path: path.to_path_buf(),
        manifest: manifest.clone(),
        gateway: Gateway::new(provider, policy).unwrap(),
        batch_size: None,
        token: Some(TOKEN.into()),
        reviewer: "expert".into(),
    })
    .unwrap()
}

/// Labels map answering every id correctly except those in `wrong`; ids in
/// `silent` get no block.
pub fn answers(ids: &[String], truth: &HashMap<String, ClassLabel>, wrong: &[usize], silent: &[usize]) -> Reply {
    let labels: BTreeMap<String, String> = ids
        .iter()
        .enumerate()
        .filter(|(i, _)| !silent.contains(i))
        .map(|(i, id)| {
            let label = if wrong.contains(&i) { flip(&truth[id]) } else { truth[id].to_string() };
            (id.clone(), label)
        })
        .collect();
    Reply::Labels(labels)
}

pub fn always(reply: Reply) -> ScriptEntry {
    ScriptEntry::always(Matcher::Any, reply)
}

pub fn once(reply: Reply) -> ScriptEntry {
    ScriptEntry::once(Matcher::Any, reply)
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, _, bytes) = call_raw(app, method, uri, body, Some(TOKEN)).await;
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

pub async fn call_raw(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> (StatusCode, Option<String>, Vec<u8>) {
    let mut builder = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        builder = builder.header("authorization", format!("Bearer {t}"));
    }
    let request = match body {
        Some(v) => builder
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let content_type = response
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, content_type, bytes)
}

pub fn review(image_id: &str, decision: &str, nonce: &str) -> Value {
    serde_json::json!({"image_id": image_id, "decision": decision, "nonce": nonce})
}

pub fn edit(image_id: &str, text: &str, nonce: &str) -> Value {
    serde_json::json!({"image_id": image_id, "decision": "edit", "explanation": text, "nonce": nonce})
}

pub fn advance(nonce: &str) -> Value {
    serde_json::json!({ "nonce": nonce })
}
