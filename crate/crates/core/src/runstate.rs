//! Durable run state and the expert captions file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageRecord, PromptSubset};
use crate::engine::AptState;
use crate::label::ClassLabel;
use crate::prompt::{Caption, ImageCaptionPair, PromptError, Provenance};

pub const RUN_STATE_VERSION: u32 = 1;

/// Writes `bytes` to `path` via a temporary file in the same directory, so
/// readers see either the old or the new content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum RunStateError {
    #[error("cannot access run state {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run state {path} is not valid: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("run state format {found} is not supported (expected {RUN_STATE_VERSION})")]
    UnsupportedVersion { found: u32 },
}

/// A mutation already applied under a client nonce: the request that was
/// made and the response that was returned for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonceEntry {
    pub request: serde_json::Value,
    pub response: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub format_version: u32,
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub seed: u64,
    pub subset: PromptSubset,
    pub system_prompt: String,
    pub system_prompt_version: String,
    pub apt: AptState,
    #[serde(default)]
    pub nonces: BTreeMap<String, NonceEntry>,
}

impl RunState {
    pub fn new(
        run_id: impl Into<String>,
        seed: u64,
        subset: PromptSubset,
        system_prompt: String,
        system_prompt_version: String,
        apt: AptState,
    ) -> Self {
        let now = Utc::now();
        Self {
            format_version: RUN_STATE_VERSION,
            run_id: run_id.into(),
            created_at: now,
            updated_at: now,
            seed,
            subset,
            system_prompt,
            system_prompt_version,
            apt,
            nonces: BTreeMap::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunStateError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| RunStateError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| RunStateError::Invalid {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .unwrap_or(0) as u32;
        if found != RUN_STATE_VERSION {
            return Err(RunStateError::UnsupportedVersion { found });
        }
        serde_json::from_value(value).map_err(|e| RunStateError::Invalid {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<(), RunStateError> {
        let path = path.as_ref();
        self.updated_at = Utc::now();
        let bytes = serde_json::to_vec_pretty(self).expect("run state serializes");
        write_atomic(path, &bytes).map_err(|source| RunStateError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CaptionFileError {
    #[error("cannot read captions file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("captions file line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("no caption for initial image {0}")]
    Missing(String),
    #[error("caption for {0}, which is not an initial image")]
    Unexpected(String),
    #[error("caption for {image_id} says {given} but the image is {expected}")]
    LabelMismatch {
        image_id: String,
        given: String,
        expected: String,
    },
    #[error("caption for {image_id}: {source}")]
    Caption {
        image_id: String,
        #[source]
        source: PromptError,
    },
}

/// One line of the expert captions file. `label` is optional; when given it
/// must agree with the image's class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionLine {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub explanation: String,
}

/// Reads expert-authored captions for the initial prompt images.
pub fn load_expert_captions(
    path: impl AsRef<Path>,
    initial: &[ImageRecord],
    ground_truth: &HashMap<String, ClassLabel>,
) -> Result<Vec<ImageCaptionPair>, CaptionFileError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CaptionFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let wanted: HashSet<&str> = initial.iter().map(|i| i.image_id.as_str()).collect();
    let mut captions: HashMap<String, CaptionLine> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: CaptionLine = serde_json::from_str(line).map_err(|e| CaptionFileError::Schema {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !wanted.contains(entry.image_id.as_str()) {
            return Err(CaptionFileError::Unexpected(entry.image_id));
        }
        if captions.contains_key(&entry.image_id) {
            return Err(CaptionFileError::Schema {
                line: i + 1,
                message: format!("second caption for {}", entry.image_id),
            });
        }
        captions.insert(entry.image_id.clone(), entry);
    }

    initial
        .iter()
        .map(|image| {
            let entry = captions
                .remove(&image.image_id)
                .ok_or_else(|| CaptionFileError::Missing(image.image_id.clone()))?;
            let truth = ground_truth
                .get(&image.image_id)
                .ok_or_else(|| CaptionFileError::Unexpected(image.image_id.clone()))?;
            if let Some(given) = &entry.label {
                if !given.trim().eq_ignore_ascii_case(truth.as_str()) {
                    return Err(CaptionFileError::LabelMismatch {
                        image_id: image.image_id.clone(),
                        given: given.clone(),
                        expected: truth.to_string(),
                    });
                }
            }
            let caption = Caption::new(truth.clone(), entry.explanation, Provenance::ExpertAuthored).map_err(
                |source| CaptionFileError::Caption {
                    image_id: image.image_id.clone(),
                    source,
                },
            )?;
            Ok(ImageCaptionPair {
                image: image.clone(),
                caption,
                verified: true,
            })
        })
        .collect()
}

/// Writes a captions file with the label filled in and an empty explanation
/// for every initial image, for the expert to complete.
pub fn write_caption_template(
    path: impl AsRef<Path>,
    initial: &[ImageRecord],
    ground_truth: &HashMap<String, ClassLabel>,
) -> std::io::Result<()> {
    let mut text = String::new();
    for image in initial {
        let line = CaptionLine {
            image_id: image.image_id.clone(),
            label: ground_truth.get(&image.image_id).map(ToString::to_string),
            explanation: String::new(),
        };
        text.push_str(&serde_json::to_string(&line).expect("caption line serializes"));
        text.push('\n');
    }
    write_atomic(path.as_ref(), text.as_bytes())
}
