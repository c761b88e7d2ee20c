//! Batched inference of the effective prompt set over the test cohort.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetManifest, ImageRecord};
use crate::engine::AptState;
use crate::gateway::{Gateway, GatewayError, VlmResponse};
use crate::label::ClassSet;
use crate::parser::parse_batch_response;
use crate::payload::ImageStore;
use crate::prompt::{assemble_request, PromptError, VlmRequest};
use crate::results::{
    RecordFailure, ResultsError, ResultsFile, ResultsHeader, ResultsWriter, VerdictRecord,
};

pub const DEFAULT_BATCH_SIZE: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("test cohort has no images")]
    EmptyTestCohort,
    #[error("prompt set not finalized")]
    NotFinalized,
    #[error("provider rejected the credentials: {0}")]
    Auth(#[source] GatewayError),
    #[error("checkpoint {0} belongs to a different batch plan")]
    PlanMismatch(String),
    #[error(transparent)]
    Results(#[from] ResultsError),
    #[error("cannot write progress file: {0}")]
    Progress(#[source] std::io::Error),
}

/// Test images split into request-sized batches, ordered by animal then image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub total_images: usize,
    pub batches: Vec<Vec<ImageRecord>>,
}

impl BatchPlan {
    pub fn from_images(mut images: Vec<ImageRecord>, batch_size: usize) -> Result<Self, InferenceError> {
        if batch_size == 0 {
            return Err(InferenceError::InvalidBatchSize);
        }
        if images.is_empty() {
            return Err(InferenceError::EmptyTestCohort);
        }
        images.sort_by(|a, b| (&a.animal_id, &a.image_id).cmp(&(&b.animal_id, &b.image_id)));
        Ok(Self {
            batch_size,
            total_images: images.len(),
            batches: images.chunks(batch_size).map(<[_]>::to_vec).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn batch_ids(&self, index: usize) -> Vec<String> {
        self.batches[index].iter().map(|i| i.image_id.clone()).collect()
    }

    /// Hash of the batch layout, used to refuse resuming under another plan.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.batch_size.to_le_bytes());
        for batch in &self.batches {
            for image in batch {
                hasher.update(image.image_id.as_bytes());
                hasher.update([0u8]);
            }
            hasher.update([1u8]);
        }
        hasher
            .finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn plan_batches(manifest: &DatasetManifest, batch_size: usize) -> Result<BatchPlan, InferenceError> {
    BatchPlan::from_images(manifest.test_images().into_iter().cloned().collect(), batch_size)
}

/// Checkpoint line appended to the progress file after every batch. The
/// last line describes the current state of the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub run_id: String,
    pub plan_fingerprint: String,
    pub batches_total: usize,
    /// Batch just completed; `None` on the line written at start-up.
    pub batch: Option<usize>,
    pub batches_done: usize,
    pub verdicts: usize,
    pub failures: usize,
    pub reasked: usize,
    pub updated_at: DateTime<Utc>,
}

impl Progress {
    /// Latest checkpoint in the progress file, if any.
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Option<Self>> {
        let text = match std::fs::read_to_string(path.as_ref()) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        // A torn last line is skipped; the line before it still holds.
        Ok(text
            .lines()
            .rev()
            .find_map(|line| serde_json::from_str(line).ok()))
    }

    fn append(&self, path: &Path) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(self).expect("progress serializes");
        line.push(b'\n');
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?
            .write_all(&line)
    }
}

pub struct InferenceJob<'a> {
    pub run_id: &'a str,
    /// Must be finalized; its prompt set is the effective set.
    pub state: &'a AptState,
    pub system_prompt: &'a str,
    pub system_prompt_version: &'a str,
    pub classes: &'a ClassSet,
    pub store: &'a ImageStore,
    pub gateway: &'a Gateway,
    pub plan: &'a BatchPlan,
    pub results_path: &'a Path,
    pub progress_path: &'a Path,
}

/// Operator controls for a run.
#[derive(Debug, Clone, Default)]
pub struct InferenceControl {
    /// Stop after sending this many batches in this invocation.
    pub stop_after: Option<usize>,
    /// Checked between waves of batches.
    pub cancel: Option<Arc<AtomicBool>>,
}

impl InferenceControl {
    fn cancelled(&self) -> bool {
        self.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceSummary {
    pub batches_total: usize,
    pub batches_done: usize,
    /// Batches dispatched by this invocation.
    pub batches_sent: usize,
    pub verdicts: usize,
    pub failures: usize,
    pub reasked: usize,
    pub interrupted: bool,
}

impl InferenceSummary {
    pub fn is_complete(&self) -> bool {
        self.batches_done == self.batches_total
    }
}

fn batch_request_id(run_id: &str, batch: usize) -> String {
    format!("{run_id}-b{batch:04}")
}

/// Runs (or resumes) inference. Batches already recorded in the results file
/// are skipped. Each image ends with exactly one record: a verdict or a
/// failure. Only an authentication failure or the operator stops the run.
pub async fn run_inference(
    job: &InferenceJob<'_>,
    control: &InferenceControl,
    mut on_progress: impl FnMut(&Progress),
) -> Result<InferenceSummary, InferenceError> {
    if !job.state.is_finalized() {
        return Err(InferenceError::NotFinalized);
    }
    let effective = job.state.prompt_set();
    let header = ResultsHeader {
        run_id: job.run_id.to_string(),
        prompt_set_version: effective.version(),
        system_prompt_version: job.system_prompt_version.to_string(),
        model: job.gateway.model_name().to_string(),
    };
    let fingerprint = job.plan.fingerprint();
    if let Some(previous) = Progress::load(job.progress_path).map_err(InferenceError::Progress)? {
        if previous.plan_fingerprint != fingerprint || previous.run_id != job.run_id {
            return Err(InferenceError::PlanMismatch(job.progress_path.display().to_string()));
        }
    }

    let mut writer = ResultsWriter::open(job.results_path, &header)?;
    let existing = ResultsFile::read(job.results_path)?;
    let mut completed = existing.completed_batches.clone();
    let mut progress = Progress {
        run_id: job.run_id.to_string(),
        plan_fingerprint: fingerprint,
        batches_total: job.plan.len(),
        batch: None,
        batches_done: completed.len(),
        verdicts: existing.verdict_count(),
        failures: existing.failure_count(),
        reasked: existing.records.iter().filter(|r| r.reasked).count(),
        updated_at: Utc::now(),
    };
    save_progress(job.progress_path, &progress)?;

    let remaining: Vec<usize> = (0..job.plan.len())
        .filter(|i| !completed.contains(i))
        .collect();
    let wave_size = job.gateway.policy().max_concurrent.max(1) as usize;
    let budget = control.stop_after.unwrap_or(usize::MAX);
    let mut sent = 0usize;
    let mut interrupted = false;

    for wave in remaining.chunks(wave_size) {
        if control.cancelled() || sent >= budget {
            interrupted = true;
            break;
        }
        let wave = &wave[..wave.len().min(budget - sent)];
        sent += wave.len();

        let mut requests: Vec<VlmRequest> = Vec::with_capacity(wave.len());
        let mut unreadable: Vec<(usize, PromptError)> = Vec::new();
        for &batch in wave {
            match assemble_request(
                job.system_prompt,
                effective,
                &job.plan.batches[batch],
                job.store,
                batch_request_id(job.run_id, batch),
            ) {
                Ok(r) => requests.push(r),
                Err(e) => unreadable.push((batch, e)),
            }
        }
        let responses = job.gateway.dispatch_batch(&requests).await;
        let mut responses = requests.iter().zip(responses);

        for &batch in wave {
            let records = match unreadable.iter().find(|(b, _)| *b == batch) {
                Some((_, e)) => fail_all(&job.plan.batches[batch], batch, RecordFailure::Unreadable(e.to_string())),
                None => {
                    let (request, response) = responses.next().expect("one response per request");
                    fold_batch(job, batch, request, response).await?
                }
            };
            writer.append_batch(batch, &records)?;
            completed.insert(batch);
            progress.batch = Some(batch);
            progress.batches_done = completed.len();
            for r in &records {
                if r.is_failure() {
                    progress.failures += 1;
                } else {
                    progress.verdicts += 1;
                }
                if r.reasked {
                    progress.reasked += 1;
                }
            }
            progress.updated_at = Utc::now();
            save_progress(job.progress_path, &progress)?;
            on_progress(&progress);
        }
    }
    if !interrupted && completed.len() < job.plan.len() {
        interrupted = true;
    }

    Ok(InferenceSummary {
        batches_total: job.plan.len(),
        batches_done: completed.len(),
        batches_sent: sent,
        verdicts: progress.verdicts,
        failures: progress.failures,
        reasked: progress.reasked,
        interrupted,
    })
}

fn save_progress(path: &Path, progress: &Progress) -> Result<(), InferenceError> {
    progress.append(path).map_err(InferenceError::Progress)
}

fn fail_all(images: &[ImageRecord], batch: usize, failure: RecordFailure) -> Vec<VerdictRecord> {
    images
        .iter()
        .map(|image| VerdictRecord {
            image_id: image.image_id.clone(),
            animal_id: image.animal_id.clone(),
            predicted: None,
            explanation: None,
            round_or_batch: batch,
            timestamp: Utc::now(),
            reasked: false,
            failure: Some(failure.clone()),
        })
        .collect()
}

/// Turns one batch response into records, re-asking once for each image
/// whose block could not be used.
async fn fold_batch(
    job: &InferenceJob<'_>,
    batch: usize,
    request: &VlmRequest,
    response: Result<VlmResponse, GatewayError>,
) -> Result<Vec<VerdictRecord>, InferenceError> {
    let images = &job.plan.batches[batch];
    let response = match response {
        Ok(r) => r,
        Err(e) if e.is_auth() => return Err(InferenceError::Auth(e)),
        Err(e) => return Ok(fail_all(images, batch, RecordFailure::Provider(e.to_string()))),
    };
    let parsed = parse_batch_response(&response.raw_text, &request.query_ids(), job.classes);
    for warning in &parsed.warnings {
        tracing::warn!(request = %request.request_id, ?warning, "unmatched response content");
    }

    let mut records = Vec::with_capacity(images.len());
    let mut reasks = Vec::new();
    for (image, (id, outcome)) in images.iter().zip(parsed.outcomes) {
        debug_assert_eq!(image.image_id, id);
        match outcome {
            Ok(v) => records.push(Some(verdict_record(image, batch, v.label, v.explanation, false))),
            Err(_) => {
                reasks.push((records.len(), image));
                records.push(None);
            }
        }
    }

    if !reasks.is_empty() {
        let mut requests = Vec::with_capacity(reasks.len());
        for (slot, image) in &reasks {
            match assemble_request(
                job.system_prompt,
                job.state.prompt_set(),
                std::slice::from_ref(*image),
                job.store,
                format!("{}-reask-{}", request.request_id, image.image_id),
            ) {
                Ok(r) => requests.push((*slot, *image, r)),
                Err(e) => {
                    records[*slot] = Some(failure_record(image, batch, RecordFailure::Unreadable(e.to_string()), true))
                }
            }
        }
        let plain: Vec<VlmRequest> = requests.iter().map(|(_, _, r)| r.clone()).collect();
        let answers = job.gateway.dispatch_batch(&plain).await;
        for ((slot, image, req), answer) in requests.into_iter().zip(answers) {
            let record = match answer {
                Err(e) if e.is_auth() => return Err(InferenceError::Auth(e)),
                Err(e) => failure_record(image, batch, RecordFailure::Provider(e.to_string()), true),
                Ok(resp) => {
                    let mut again = parse_batch_response(&resp.raw_text, &req.query_ids(), job.classes);
                    match again.outcomes.pop().map(|(_, o)| o) {
                        Some(Ok(v)) => verdict_record(image, batch, v.label, v.explanation, true),
                        Some(Err(f)) => failure_record(image, batch, RecordFailure::Parse(f.kind), true),
                        None => unreachable!("one outcome per expected id"),
                    }
                }
            };
            records[slot] = Some(record);
        }
    }
    Ok(records.into_iter().map(|r| r.expect("every slot filled")).collect())
}

fn verdict_record(
    image: &ImageRecord,
    batch: usize,
    label: crate::label::ClassLabel,
    explanation: String,
    reasked: bool,
) -> VerdictRecord {
    VerdictRecord {
        image_id: image.image_id.clone(),
        animal_id: image.animal_id.clone(),
        predicted: Some(label),
        explanation: Some(explanation),
        round_or_batch: batch,
        timestamp: Utc::now(),
        reasked,
        failure: None,
    }
}

fn failure_record(image: &ImageRecord, batch: usize, failure: RecordFailure, reasked: bool) -> VerdictRecord {
    VerdictRecord {
        reasked,
        ..fail_all(std::slice::from_ref(image), batch, failure).remove(0)
    }
}
