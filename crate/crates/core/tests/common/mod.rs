#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use apt_core::dataset::{load_manifest, DatasetManifest};
use apt_core::engine::AptState;
use apt_core::fixtures::{finalized_reference_state, table1_manifest};
use apt_core::gateway::{Gateway, RateLimitPolicy, ScriptedProvider};
use apt_core::inference::{
    plan_batches, run_inference, BatchPlan, InferenceControl, InferenceError, InferenceJob,
    InferenceSummary,
};
use apt_core::payload::ImageStore;
use apt_core::prompt::{render_system_prompt, DatasetContext, SystemPromptSpec, SystemPromptTemplate};

pub struct Study {
    pub dir: tempfile::TempDir,
    pub manifest: DatasetManifest,
    pub state: AptState,
    pub system_prompt: String,
    pub system_prompt_version: String,
    pub store: ImageStore,
    pub plan: BatchPlan,
}

impl Study {
    pub fn results_path(&self) -> PathBuf {
        self.dir.path().join("results.jsonl")
    }

    pub fn progress_path(&self) -> PathBuf {
        self.dir.path().join("progress.jsonl")
    }
}

pub fn system_prompt(manifest: &DatasetManifest) -> String {
    let study = &manifest.study;
    let spec = SystemPromptSpec::with_defaults(
        &study.classes,
        DatasetContext {
            magnification: study.magnification.clone(),
            stain: study.stain.clone(),
            anatomy: study.anatomy.clone(),
        },
        &BTreeMap::new(),
    )
    .unwrap();
    render_system_prompt(&spec).unwrap()
}

/// Table 1 study with a finalized 36-image effective set.
pub fn table1_study(batch_size: usize) -> Study {
    let dir = tempfile::tempdir().unwrap();
    let manifest = load_manifest(table1_manifest(dir.path())).unwrap();
    study_from(dir, manifest, batch_size)
}

pub fn study_from(dir: tempfile::TempDir, manifest: DatasetManifest, batch_size: usize) -> Study {
    let (_, state) = finalized_reference_state(&manifest, 3, 6, 7);
    let plan = plan_batches(&manifest, batch_size).unwrap();
    Study {
        system_prompt: system_prompt(&manifest),
        system_prompt_version: SystemPromptTemplate::default().version(),
        store: ImageStore::new(manifest.root.clone()),
        state,
        plan,
        manifest,
        dir,
    }
}

pub fn fast_policy() -> RateLimitPolicy {
    RateLimitPolicy {
        backoff_base: Duration::from_millis(10),
        ..RateLimitPolicy::default()
    }
}

pub async fn infer(
    study: &Study,
    provider: Arc<ScriptedProvider>,
    policy: RateLimitPolicy,
    control: InferenceControl,
) -> Result<InferenceSummary, InferenceError> {
    let gateway = Gateway::new(provider, policy).unwrap();
    let results = study.results_path();
    let progress = study.progress_path();
    let job = InferenceJob {
        run_id: "replay",
        state: &study.state,
        system_prompt: &study.system_prompt,
        system_prompt_version: &study.system_prompt_version,
        classes: &study.manifest.study.classes,
        store: &study.store,
        gateway: &gateway,
        plan: &study.plan,
        results_path: &results,
        progress_path: &progress,
    };
    run_inference(&job, &control, |_| {}).await
}

pub mod sim;

/// Source files that build or send requests, or parse responses. None of
/// them may name a type or field that carries per-animal class labels.
pub fn request_path_sources() -> Vec<PathBuf> {
    let src = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("src");
    let mut files = vec![src.join("prompt.rs"), src.join("parser.rs"), src.join("payload.rs")];
    let mut gateway: Vec<PathBuf> = std::fs::read_dir(src.join("gateway"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "rs"))
        .collect();
    gateway.sort();
    files.extend(gateway);
    files
}

pub const LABEL_CARRIERS: [&str; 7] = [
    "AnimalRecord",
    "DatasetManifest",
    "PromptSubset",
    "ground_truth",
    "AptState",
    "ReviewItem",
    "fixtures",
];

/// `(file, line number, offending symbol)` for every reference found.
pub fn isolation_violations() -> Vec<(String, usize, String)> {
    let mut found = Vec::new();
    for path in request_path_sources() {
        let text = std::fs::read_to_string(&path).unwrap();
        // Unit-test modules sit at the bottom of each file and may use fixtures.
        let shipped = text.split("#[cfg(test)]").next().unwrap_or_default();
        for (i, line) in shipped.lines().enumerate() {
            for symbol in LABEL_CARRIERS {
                if line.contains(symbol) {
                    found.push((path.display().to_string(), i + 1, symbol.to_string()));
                }
            }
            let trimmed = line.trim_start();
            if trimmed.starts_with("use crate::dataset::") && trimmed != "use crate::dataset::ImageRecord;" {
                found.push((path.display().to_string(), i + 1, trimmed.to_string()));
            }
        }
    }
    found
}
