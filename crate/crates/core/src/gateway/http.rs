//! Generic chat-completion adapter.
//!
//! Request body:
//!
//! ```json
//! {"model": "...", "messages": [
//!   {"role": "system", "content": "<system prompt>"},
//!   {"role": "user", "content": [
//!     {"type": "image_url", "image_url": {"url": "data:image/png;base64,..."}},
//!     {"type": "text", "text": "IMAGE: ...\nCLASSIFICATION: ...\nEXPLANATION: ..."}]},
//!   ...one user message per context pair...,
//!   {"role": "user", "content": [
//!     {"type": "text", "text": "Query image id: ..."},
//!     {"type": "image_url", "image_url": {"url": "data:..."}}, ...]}
//! ]}
//! ```
//!
//! The reply text is read from `choices[0].message.content`. The API key is
//! sent as a bearer token and read from the environment variable named in
//! [`ProviderConfig::credential`].

use std::fmt;

use async_trait::async_trait;
use serde_json::{json, Value};

use super::{ProviderConfig, ProviderError, VlmProvider};
use crate::prompt::VlmRequest;

/// A credential that never prints.
#[derive(Clone)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(<redacted>)")
    }
}

fn image_part(url: String) -> Value {
    json!({"type": "image_url", "image_url": {"url": url}})
}

fn text_part(text: &str) -> Value {
    json!({"type": "text", "text": text})
}

pub fn wire_body(model: &str, request: &VlmRequest) -> Value {
    let mut messages = vec![json!({"role": "system", "content": request.system})];
    for pair in &request.context_pairs {
        messages.push(json!({
            "role": "user",
            "content": [image_part(pair.image.data_url()), text_part(&pair.caption)],
        }));
    }
    let mut query_content = Vec::with_capacity(request.queries.len() * 2);
    for query in &request.queries {
        query_content.push(text_part(&query.text));
        query_content.push(image_part(query.image.data_url()));
    }
    messages.push(json!({"role": "user", "content": query_content}));
    json!({"model": model, "messages": messages})
}

#[derive(Debug)]
pub struct ChatCompletionProvider {
    client: reqwest::Client,
    endpoint: String,
    model: String,
    key: Secret,
}

impl ChatCompletionProvider {
    /// Reads the API key from the configured environment variable.
    pub fn from_env(config: &ProviderConfig) -> Result<Self, ProviderError> {
        let key = std::env::var(&config.credential).map_err(|_| {
            ProviderError::Auth(format!(
                "environment variable {} is not set",
                config.credential
            ))
        })?;
        Self::new(config, Secret::new(key))
    }

    pub fn new(config: &ProviderConfig, key: Secret) -> Result<Self, ProviderError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: config.endpoint.clone(),
            model: config.model_name.clone(),
            key,
        })
    }
}

fn classify_status(status: u16, body: String) -> ProviderError {
    match status {
        401 | 403 => ProviderError::Auth(format!("status {status}")),
        413 => ProviderError::PayloadTooLarge,
        408 => ProviderError::Timeout,
        429 => ProviderError::Throttled,
        500..=599 => ProviderError::Server {
            status,
            message: body.chars().take(200).collect(),
        },
        _ => ProviderError::BadResponse(format!("status {status}: {}", body.chars().take(200).collect::<String>())),
    }
}

#[async_trait]
impl VlmProvider for ChatCompletionProvider {
    fn model_name(&self) -> &str {
        &self.model
    }

    async fn complete(&self, request: &VlmRequest) -> Result<String, ProviderError> {
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(self.key.expose())
            .json(&wire_body(&self.model, request))
            .send()
            .await
            .map_err(|e| {
                if e.is_timeout() {
                    ProviderError::Timeout
                } else {
                    ProviderError::Transport(e.to_string())
                }
            })?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let body = response.text().await.unwrap_or_default();
            return Err(classify_status(status, body));
        }
        let body: Value = response.json().await.map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout
            } else {
                ProviderError::BadResponse(e.to_string())
            }
        })?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ProviderError::BadResponse("missing choices[0].message.content".into()))
    }
}
