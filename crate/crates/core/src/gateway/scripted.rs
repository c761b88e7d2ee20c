//! Scripted provider: a deterministic test double that replays an ordered
//! list of replies. Each request consumes the first unexhausted entry whose
//! matcher accepts it; if none does, the request fails with a script gap.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{ProviderError, VlmProvider};
use crate::parser::{render_verdict, ModelVerdict};
use crate::label::ClassLabel;
use crate::prompt::VlmRequest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Any,
    /// The request queries this image id.
    QueryImage(String),
    /// The system prompt or any query text contains this string.
    Contains(String),
    /// The request queries exactly this many images.
    QueryCount(usize),
}

impl Matcher {
    pub fn matches(&self, request: &VlmRequest) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::QueryImage(id) => request.queries.iter().any(|q| &q.image_id == id),
            Matcher::Contains(needle) => {
                request.system.contains(needle.as_str())
                    || request.queries.iter().any(|q| q.text.contains(needle.as_str()))
            }
            Matcher::QueryCount(n) => request.queries.len() == *n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFailure {
    Timeout,
    Throttle,
    Server,
    Auth,
    PayloadTooLarge,
}

impl From<ScriptedFailure> for ProviderError {
    fn from(f: ScriptedFailure) -> Self {
        match f {
            ScriptedFailure::Timeout => ProviderError::Timeout,
            ScriptedFailure::Throttle => ProviderError::Throttled,
            ScriptedFailure::Server => ProviderError::Server {
                status: 503,
                message: "scripted outage".into(),
            },
            ScriptedFailure::Auth => ProviderError::Auth("scripted rejection".into()),
            ScriptedFailure::PayloadTooLarge => ProviderError::PayloadTooLarge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reply {
    /// Verbatim response text.
    Text(String),
    Fail(ScriptedFailure),
    /// One well-formed verdict block per queried image found in the map,
    /// in query order. Queried images absent from the map get no block.
    Labels(BTreeMap<String, String>),
}

impl Reply {
    fn render(&self, request: &VlmRequest) -> Result<String, ProviderError> {
        match self {
            Reply::Text(t) => Ok(t.clone()),
            Reply::Fail(kind) => Err((*kind).into()),
            Reply::Labels(labels) => {
                let blocks: Vec<String> = request
                    .queries
                    .iter()
                    .filter_map(|q| {
                        labels.get(&q.image_id).map(|label| {
                            render_verdict(&ModelVerdict {
                                image_id: q.image_id.clone(),
                                label: ClassLabel::new_unchecked(label.clone()),
                                explanation: format!("Scripted verdict for {}.", q.image_id),
                            })
                        })
                    })
                    .collect();
                Ok(blocks.join("\n\n"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub reply: Reply,
    /// How many requests this entry may serve; `None` means unlimited.
    #[serde(default = "one")]
    pub times: Option<usize>,
    /// Simulated provider latency.
    #[serde(default)]
    pub latency_ms: u64,
}

fn one() -> Option<usize> {
    Some(1)
}

impl ScriptEntry {
    pub fn once(matcher: Matcher, reply: Reply) -> Self {
        Self {
            matcher,
            reply,
            times: Some(1),
            latency_ms: 0,
        }
    }

    pub fn always(matcher: Matcher, reply: Reply) -> Self {
        Self {
            times: None,
            ..Self::once(matcher, reply)
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency_ms = latency.as_millis() as u64;
        self
    }
}

#[derive(Debug)]
pub struct ScriptedProvider {
    model: String,
    entries: Mutex<Vec<ScriptEntry>>,
    seen: Mutex<Vec<VlmRequest>>,
}

/// Builds a scripted provider handle. The script must not be empty.
pub fn scripted_provider(script: Vec<ScriptEntry>) -> Result<Arc<ScriptedProvider>, ProviderError> {
    ScriptedProvider::new("scripted", script).map(Arc::new)
}

impl ScriptedProvider {
    pub fn new(model: impl Into<String>, script: Vec<ScriptEntry>) -> Result<Self, ProviderError> {
        if script.is_empty() {
            return Err(ProviderError::ScriptGap("script is empty".into()));
        }
        Ok(Self {
            model: model.into(),
            entries: Mutex::new(script),
            seen: Mutex::new(Vec::new()),
        })
    }

    /// Loads a script from a JSON Lines file, one [`ScriptEntry`] per line.
    pub fn from_jsonl(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::ScriptGap(format!("cannot read {}: {e}", path.display())))?;
        let mut script = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line).map_err(|e| {
                ProviderError::ScriptGap(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            script.push(entry);
        }
        Self::new("scripted", script)
    }

    /// Every request received, in arrival order.
    pub fn requests(&self) -> Vec<VlmRequest> {
        self.seen.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.seen.lock().unwrap().len()
    }
}

#[async_trait]
impl VlmProvider for ScriptedProvider {
    fn model_name(&self) -> &str {
        &self.model
    }

    async fn complete(&self, request: &VlmRequest) -> Result<String, ProviderError> {
        self.seen.lock().unwrap().push(request.clone());
        let picked = {
            let mut entries = self.entries.lock().unwrap();
            entries
                .iter_mut()
                .find(|e| e.times != Some(0) && e.matcher.matches(request))
                .map(|e| {
                    if let Some(n) = e.times.as_mut() {
                        *n -= 1;
                    }
                    (e.reply.clone(), e.latency_ms)
                })
        };
        let Some((reply, latency_ms)) = picked else {
            return Err(ProviderError::ScriptGap(request.request_id.clone()));
        };
        if latency_ms > 0 {
            tokio::time::sleep(Duration::from_millis(latency_ms)).await;
        }
        reply.render(request)
    }
}
