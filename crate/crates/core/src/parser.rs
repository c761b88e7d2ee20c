//! Strict keyword grammar for model verdicts.
//!
//! ```text
//! IMAGE: <image_id>
//! CLASSIFICATION: <class>
//! EXPLANATION: <text>
//! ```
//!
//! Keys and class names match case-insensitively and whitespace around them
//! is ignored. The explanation is kept verbatim (trimmed); it may continue on
//! following lines until the next key line. Nothing in this module knows the
//! true class of any image.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::label::{ClassLabel, ClassSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVerdict {
    pub image_id: String,
    pub label: ClassLabel,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VerdictError {
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("missing field {0}")]
    MissingField(&'static str),
    #[error("malformed block: {0}")]
    MalformedBlock(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Key {
    Image,
    Classification,
    Explanation,
}

impl Key {
    fn name(self) -> &'static str {
        match self {
            Key::Image => "IMAGE",
            Key::Classification => "CLASSIFICATION",
            Key::Explanation => "EXPLANATION",
        }
    }
}

fn split_key(line: &str) -> Option<(Key, &str)> {
    let (key, value) = line.split_once(':')?;
    let key = match key.trim().to_ascii_lowercase().as_str() {
        "image" => Key::Image,
        "classification" => Key::Classification,
        "explanation" => Key::Explanation,
        _ => return None,
    };
    Some((key, value.trim()))
}

pub fn render_verdict(verdict: &ModelVerdict) -> String {
    format!(
        "IMAGE: {}\nCLASSIFICATION: {}\nEXPLANATION: {}",
        verdict.image_id, verdict.label, verdict.explanation
    )
}

pub fn parse_verdict(block: &str, expected_classes: &ClassSet) -> Result<ModelVerdict, VerdictError> {
    let mut image: Option<String> = None;
    let mut class: Option<String> = None;
    let mut explanation: Option<Vec<&str>> = None;
    let mut current: Option<Key> = None;

    for line in block.lines() {
        match split_key(line) {
            Some((key, value)) => {
                let slot_taken = match key {
                    Key::Image => image.is_some(),
                    Key::Classification => class.is_some(),
                    Key::Explanation => explanation.is_some(),
                };
                if slot_taken {
                    return Err(VerdictError::MalformedBlock(format!(
                        "{} appears more than once",
                        key.name()
                    )));
                }
                match key {
                    Key::Image => image = Some(value.to_string()),
                    Key::Classification => class = Some(value.to_string()),
                    Key::Explanation => explanation = Some(vec![value]),
                }
                current = Some(key);
            }
            None if line.trim().is_empty() => {
                if let (Some(Key::Explanation), Some(lines)) = (current, explanation.as_mut()) {
                    lines.push("");
                }
            }
            None => match (current, explanation.as_mut()) {
                (Some(Key::Explanation), Some(lines)) => lines.push(line.trim_end()),
                _ => {
                    return Err(VerdictError::MalformedBlock(format!(
                        "unexpected line {:?}",
                        line.trim()
                    )))
                }
            },
        }
    }

    let label = match class.as_deref() {
        Some("") | None => None,
        Some(token) => Some(
            expected_classes
                .resolve(token)
                .cloned()
                .ok_or_else(|| VerdictError::UnknownClass(token.to_string()))?,
        ),
    };
    let image_id = image
        .filter(|s| !s.is_empty())
        .ok_or(VerdictError::MissingField("IMAGE"))?;
    let label = label.ok_or(VerdictError::MissingField("CLASSIFICATION"))?;
    let explanation = explanation
        .map(|lines| lines.join("\n").trim().to_string())
        .filter(|s| !s.is_empty())
        .ok_or(VerdictError::MissingField("EXPLANATION"))?;

    Ok(ModelVerdict {
        image_id,
        label,
        explanation,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum FailureKind {
    MissingVerdict,
    Duplicate,
    UnknownClass(String),
    MissingField(String),
    Malformed(String),
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureKind::MissingVerdict => f.write_str("no verdict block"),
            FailureKind::Duplicate => f.write_str("more than one verdict block"),
            FailureKind::UnknownClass(c) => write!(f, "unknown class {c:?}"),
            FailureKind::MissingField(k) => write!(f, "missing field {k}"),
            FailureKind::Malformed(m) => write!(f, "malformed block: {m}"),
        }
    }
}

impl From<VerdictError> for FailureKind {
    fn from(e: VerdictError) -> Self {
        match e {
            VerdictError::UnknownClass(c) => FailureKind::UnknownClass(c),
            VerdictError::MissingField(k) => FailureKind::MissingField(k.to_string()),
            VerdictError::MalformedBlock(m) => FailureKind::Malformed(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub image_id: String,
    pub kind: FailureKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseWarning {
    /// Non-blank text outside any verdict block.
    UnattributedText { line: usize },
    /// A block for an image that was not in the request.
    UnexpectedImage { image_id: String, line: usize },
    /// A block whose IMAGE value is empty.
    UnidentifiedBlock { line: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchParse {
    /// One entry per expected id, in expected order.
    pub outcomes: Vec<(String, Result<ModelVerdict, ParseFailure>)>,
    pub warnings: Vec<ParseWarning>,
}

impl BatchParse {
    pub fn verdict_count(&self) -> usize {
        self.outcomes.iter().filter(|(_, r)| r.is_ok()).count()
    }

    pub fn failure_count(&self) -> usize {
        self.outcomes.len() - self.verdict_count()
    }
}

/// Splits a multi-image response into blocks and maps every expected id to
/// exactly one verdict or failure.
pub fn parse_batch_response(raw: &str, expected_ids: &[String], expected_classes: &ClassSet) -> BatchParse {
    let mut warnings = Vec::new();

    // (first line number, block text)
    let mut blocks: Vec<(usize, String)> = Vec::new();
    let mut preamble_warned = false;
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if matches!(split_key(line), Some((Key::Image, _))) {
            blocks.push((line_no, String::new()));
        }
        match blocks.last_mut() {
            Some((_, text)) => {
                text.push_str(line);
                text.push('\n');
            }
            None if !line.trim().is_empty() && !preamble_warned => {
                warnings.push(ParseWarning::UnattributedText { line: line_no });
                preamble_warned = true;
            }
            None => {}
        }
    }

    let expected: HashMap<&str, usize> = expected_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut by_id: Vec<Vec<&str>> = vec![Vec::new(); expected_ids.len()];
    for (line_no, text) in &blocks {
        let id = text
            .lines()
            .next()
            .and_then(split_key)
            .map(|(_, v)| v)
            .unwrap_or("");
        if id.is_empty() {
            warnings.push(ParseWarning::UnidentifiedBlock { line: *line_no });
            continue;
        }
        match expected.get(id) {
            Some(&slot) => by_id[slot].push(text.as_str()),
            None => warnings.push(ParseWarning::UnexpectedImage {
                image_id: id.to_string(),
                line: *line_no,
            }),
        }
    }

    let outcomes = expected_ids
        .iter()
        .zip(by_id)
        .map(|(id, found)| {
            let failure = |kind| ParseFailure {
                image_id: id.clone(),
                kind,
            };
            let outcome = match found.as_slice() {
                [] => Err(failure(FailureKind::MissingVerdict)),
                [block] => parse_verdict(block, expected_classes).map_err(|e| failure(e.into())),
                _ => Err(failure(FailureKind::Duplicate)),
            };
            (id.clone(), outcome)
        })
        .collect();

    BatchParse { outcomes, warnings }
}

/// A sample block that satisfies the grammar, used inside the format
/// instruction.
pub fn format_example(expected_classes: &ClassSet) -> ModelVerdict {
    let label = expected_classes.labels()[0].clone();
    ModelVerdict {
        image_id: "example_001".to_string(),
        explanation: format!(
            "The visible cellular morphology matches the criteria described for {label}."
        ),
        label,
    }
}

/// Marker line that precedes the worked example in the format instruction.
pub const EXAMPLE_MARKER: &str = "Example of one block:";

/// Output-format instruction embedded in the system prompt.
pub fn render_expected_format(expected_classes: &ClassSet) -> String {
    let allowed = expected_classes
        .iter()
        .map(ClassLabel::as_str)
        .collect::<Vec<_>>()
        .join(", ");
    let class_rule = if expected_classes.len() == 1 {
        format!("the only allowed class is {allowed}")
    } else {
        format!("exactly one of: {allowed}")
    };
    format!(
        "Answer with one block per query image, in the order the images were given, and nothing else.\n\
         Each block has exactly these three lines:\n\
         IMAGE: <the image id exactly as given with the image>\n\
         CLASSIFICATION: <{class_rule}>\n\
         EXPLANATION: <1-3 sentences naming the visible features that support the classification>\n\
         Separate blocks with one blank line. Do not add headings, numbering or markdown.\n\
         {EXAMPLE_MARKER}\n{}",
        render_verdict(&format_example(expected_classes))
    )
}
