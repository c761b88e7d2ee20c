//! System prompt rendering, the prompt set of verified image-caption pairs,
//! and ordered multimodal request assembly.
//!
//! Request construction only ever sees [`ImageRecord`]s and verified
//! captions; it has no access to the manifest's per-animal class labels.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::ImageRecord;
use crate::label::{ClassLabel, ClassSet};
use crate::parser::{render_expected_format, render_verdict, ModelVerdict};
use crate::payload::{ImagePayload, ImageStore, PayloadError};

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("system prompt field {0} is empty")]
    EmptyField(String),
    #[error("template is missing placeholder {{{0}}}")]
    MissingPlaceholder(&'static str),
    #[error("template placeholders out of order: {{{0}}} must come before {{{1}}}")]
    PlaceholderOrder(&'static str, &'static str),
    #[error("caption must have 1-3 sentences, found {0}")]
    CaptionLength(usize),
    #[error("image {0} is already in the prompt set")]
    Overlap(String),
    #[error("request batch is empty")]
    EmptyBatch,
    #[error("prompt set pairs must be verified ({0} is not)")]
    Unverified(String),
    #[error(transparent)]
    Payload(#[from] PayloadError),
}

/// Counts sentences by terminal punctuation (`.`, `!`, `?`) followed by
/// whitespace or end of text. Abbreviations are not special-cased; trailing
/// text without punctuation counts as a sentence.
pub fn sentence_count(text: &str) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0;
    let mut open = false;
    for (i, c) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let boundary = chars.get(i + 1).is_none_or(|n| n.is_whitespace());
            if open && boundary {
                count += 1;
                open = false;
            }
        } else if c.is_alphanumeric() {
            open = true;
        }
    }
    if open {
        count += 1;
    }
    count
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ExpertAuthored,
    /// Produced by the model and accepted unchanged by the expert.
    ModelGenerated,
    ExpertCorrected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub label: ClassLabel,
    pub explanation: String,
    pub provenance: Provenance,
}

impl Caption {
    pub fn new(
        label: ClassLabel,
        explanation: impl Into<String>,
        provenance: Provenance,
    ) -> Result<Self, PromptError> {
        let explanation = explanation.into().trim().to_string();
        if explanation.is_empty() {
            return Err(PromptError::EmptyField("explanation".into()));
        }
        let n = sentence_count(&explanation);
        if !(1..=3).contains(&n) {
            return Err(PromptError::CaptionLength(n));
        }
        Ok(Self {
            label,
            explanation,
            provenance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCaptionPair {
    pub image: ImageRecord,
    pub caption: Caption,
    pub verified: bool,
}

impl ImageCaptionPair {
    /// Caption text as shown to the model after the image: the same block
    /// syntax the model is asked to produce.
    pub fn caption_text(&self) -> String {
        render_verdict(&ModelVerdict {
            image_id: self.image.image_id.clone(),
            label: self.caption.label.clone(),
            explanation: self.caption.explanation.clone(),
        })
    }
}

/// Append-only list of verified pairs. `version` increases on every push.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pairs: Vec<ImageCaptionPair>,
    version: u64,
}

impl PromptSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, pair: ImageCaptionPair) -> Result<(), PromptError> {
        if !pair.verified {
            return Err(PromptError::Unverified(pair.image.image_id));
        }
        if self.contains(&pair.image.image_id) {
            return Err(PromptError::Overlap(pair.image.image_id));
        }
        self.pairs.push(pair);
        self.version += 1;
        Ok(())
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.pairs.iter().any(|p| p.image.image_id == image_id)
    }

    pub fn pairs(&self) -> &[ImageCaptionPair] {
        &self.pairs
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.image.image_id.as_str())
    }
}

pub const DEFAULT_ROLE: &str = "Role-play as an expert neuroscientist specializing in the morphological analysis of histological microscopy images of the mouse brain. Apply the same criteria to every image and base each decision only on what is visible.";

/// Built-in visual criteria for the default study classes.
pub fn default_class_criteria(label: &str) -> Option<&'static str> {
    match label.to_ascii_lowercase().as_str() {
        "lurcher" => Some(
            "Lurcher mutant cerebellum: a sparse or absent Purkinje cell layer, a thinned and \
             cell-poor granule cell layer, and reduced, less elaborate folia.",
        ),
        "wild" => Some(
            "Wild-type control cerebellum: a continuous Purkinje cell monolayer, a dense and \
             uniformly stained granule cell layer, and normal foliation.",
        ),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetContext {
    pub magnification: String,
    pub stain: String,
    pub anatomy: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemPromptSpec {
    pub role_text: String,
    pub dataset_context: DatasetContext,
    pub class_definitions: Vec<(ClassLabel, String)>,
    pub format_instruction: String,
}

impl SystemPromptSpec {
    /// Default role, built-in class criteria and the standard output grammar.
    /// Classes without built-in criteria must be supplied in `criteria`.
    pub fn with_defaults(
        classes: &ClassSet,
        dataset_context: DatasetContext,
        criteria: &BTreeMap<String, String>,
    ) -> Result<Self, PromptError> {
        let class_definitions = classes
            .iter()
            .map(|label| {
                let text = criteria
                    .iter()
                    .find(|(k, _)| k.eq_ignore_ascii_case(label.as_str()))
                    .map(|(_, v)| v.clone())
                    .or_else(|| default_class_criteria(label.as_str()).map(str::to_string))
                    .ok_or_else(|| PromptError::EmptyField(format!("class_definitions.{label}")))?;
                Ok((label.clone(), text))
            })
            .collect::<Result<Vec<_>, PromptError>>()?;
        let spec = Self {
            role_text: DEFAULT_ROLE.to_string(),
            dataset_context,
            class_definitions,
            format_instruction: render_expected_format(classes),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let empty = |s: &str| s.trim().is_empty();
        if empty(&self.role_text) {
            return Err(PromptError::EmptyField("role_text".into()));
        }
        let ctx = &self.dataset_context;
        for (name, value) in [
            ("dataset_context.magnification", &ctx.magnification),
            ("dataset_context.stain", &ctx.stain),
            ("dataset_context.anatomy", &ctx.anatomy),
        ] {
            if empty(value) {
                return Err(PromptError::EmptyField(name.into()));
            }
        }
        if self.class_definitions.is_empty() {
            return Err(PromptError::EmptyField("class_definitions".into()));
        }
        for (label, text) in &self.class_definitions {
            if empty(text) {
                return Err(PromptError::EmptyField(format!("class_definitions.{label}")));
            }
        }
        if empty(&self.format_instruction) {
            return Err(PromptError::EmptyField("format_instruction".into()));
        }
        Ok(())
    }
}

const PLACEHOLDERS: [&str; 6] = [
    "role",
    "magnification",
    "stain",
    "anatomy",
    "class_criteria",
    "format_instruction",
];

/// System prompt template with named placeholders. The version is derived
/// from the template text, so any edit yields a new version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemPromptTemplate {
    text: String,
}

impl Default for SystemPromptTemplate {
    fn default() -> Self {
        Self {
            text: include_str!("../assets/system_prompt.txt").to_string(),
        }
    }
}

impl SystemPromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, PromptError> {
        let text = text.into();
        let position = |name: &'static str| {
            text.find(&format!("{{{name}}}"))
                .ok_or(PromptError::MissingPlaceholder(name))
        };
        let role = position("role")?;
        let context = [
            ("magnification", position("magnification")?),
            ("stain", position("stain")?),
            ("anatomy", position("anatomy")?),
        ];
        let criteria = position("class_criteria")?;
        let format = position("format_instruction")?;
        for (name, pos) in context {
            if pos < role {
                return Err(PromptError::PlaceholderOrder("role", name));
            }
            if pos > criteria {
                return Err(PromptError::PlaceholderOrder(name, "class_criteria"));
            }
        }
        if criteria > format {
            return Err(PromptError::PlaceholderOrder("class_criteria", "format_instruction"));
        }
        Ok(Self { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn version(&self) -> String {
        let digest = Sha256::digest(self.text.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn render(&self, spec: &SystemPromptSpec) -> Result<String, PromptError> {
        spec.validate()?;
        let criteria = spec
            .class_definitions
            .iter()
            .map(|(label, text)| format!("- {label}: {}", text.trim()))
            .collect::<Vec<_>>()
            .join("\n");
        let value = |name: &str| -> &str {
            match name {
                "role" => spec.role_text.trim(),
                "magnification" => spec.dataset_context.magnification.trim(),
                "stain" => spec.dataset_context.stain.trim(),
                "anatomy" => spec.dataset_context.anatomy.trim(),
                "class_criteria" => &criteria,
                "format_instruction" => spec.format_instruction.trim(),
                _ => unreachable!(),
            }
        };
        // Single left-to-right pass so substituted text is never re-scanned.
        let mut out = String::with_capacity(self.text.len() + 1024);
        let mut rest = self.text.as_str();
        'scan: while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let tail = &rest[open + 1..];
            for name in PLACEHOLDERS {
                if let Some(after) = tail.strip_prefix(name).and_then(|t| t.strip_prefix('}')) {
                    out.push_str(value(name));
                    rest = after;
                    continue 'scan;
                }
            }
            out.push('{');
            rest = tail;
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Renders with the built-in template.
pub fn render_system_prompt(spec: &SystemPromptSpec) -> Result<String, PromptError> {
    SystemPromptTemplate::default().render(spec)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextPair {
    pub image_id: String,
    pub image: Arc<ImagePayload>,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryImage {
    pub image_id: String,
    pub image: Arc<ImagePayload>,
    /// Identifier token shown with the image so answers can be matched.
    pub text: String,
}

pub fn query_text(image_id: &str) -> String {
    format!("Query image id: {image_id}")
}

/// One provider call: system prompt, then context pairs, then queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmRequest {
    pub request_id: String,
    pub system: String,
    pub context_pairs: Vec<ContextPair>,
    pub queries: Vec<QueryImage>,
}

impl VlmRequest {
    pub fn query_ids(&self) -> Vec<String> {
        self.queries.iter().map(|q| q.image_id.clone()).collect()
    }

    /// Image ids in message order.
    pub fn image_ids(&self) -> Vec<&str> {
        self.context_pairs
            .iter()
            .map(|p| p.image_id.as_str())
            .chain(self.queries.iter().map(|q| q.image_id.as_str()))
            .collect()
    }

    /// Request content with the request id blanked, for byte-level
    /// comparisons across runs.
    pub fn content_bytes(&self) -> Vec<u8> {
        let mut copy = self.clone();
        copy.request_id.clear();
        serde_json::to_vec(&copy).expect("request serializes")
    }
}

pub fn assemble_request(
    system: &str,
    prompt_set: &PromptSet,
    batch: &[ImageRecord],
    store: &ImageStore,
    request_id: impl Into<String>,
) -> Result<VlmRequest, PromptError> {
    if batch.is_empty() {
        return Err(PromptError::EmptyBatch);
    }
    let in_set: HashSet<&str> = prompt_set.image_ids().collect();
    if let Some(clash) = batch.iter().find(|i| in_set.contains(i.image_id.as_str())) {
        return Err(PromptError::Overlap(clash.image_id.clone()));
    }

    let context_pairs = prompt_set
        .pairs()
        .iter()
        .map(|pair| {
            Ok(ContextPair {
                image_id: pair.image.image_id.clone(),
                image: store.payload(&pair.image)?,
                caption: pair.caption_text(),
            })
        })
        .collect::<Result<Vec<_>, PromptError>>()?;
    let queries = batch
        .iter()
        .map(|image| {
            Ok(QueryImage {
                image_id: image.image_id.clone(),
                image: store.payload(image)?,
                text: query_text(&image.image_id),
            })
        })
        .collect::<Result<Vec<_>, PromptError>>()?;

    Ok(VlmRequest {
        request_id: request_id.into(),
        system: system.to_string(),
        context_pairs,
        queries,
    })
}
