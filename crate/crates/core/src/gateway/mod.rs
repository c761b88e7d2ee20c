//! Provider-agnostic dispatch of [`VlmRequest`]s with rate limiting,
//! bounded concurrency and retries.
//!
//! All timing goes through `tokio::time`. Tests and scripted replays run the
//! runtime with a paused clock, which makes every wait instantaneous while
//! keeping the same virtual timestamps the wall clock would produce.

mod http;
mod limiter;
mod scripted;

use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tokio::time::Instant;

use crate::prompt::VlmRequest;

pub use http::{wire_body, ChatCompletionProvider, Secret};
pub use limiter::WindowLimiter;
pub use scripted::{
    scripted_provider, Matcher, Reply, ScriptEntry, ScriptedFailure, ScriptedProvider,
};

pub(crate) mod serde_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateLimitPolicy {
    pub max_requests_per_window: u32,
    #[serde(with = "serde_secs", rename = "window_secs")]
    pub window: Duration,
    pub max_concurrent: u32,
    pub retry_max: u32,
    #[serde(with = "serde_secs", rename = "backoff_base_secs")]
    pub backoff_base: Duration,
}

impl Default for RateLimitPolicy {
    fn default() -> Self {
        Self {
            max_requests_per_window: 3,
            window: Duration::from_secs(60),
            max_concurrent: 2,
            retry_max: 3,
            backoff_base: Duration::from_secs(2),
        }
    }
}

impl RateLimitPolicy {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_requests_per_window == 0 || self.max_concurrent == 0 {
            return Err(GatewayError::InvalidPolicy(
                "request and concurrency limits must be at least 1".into(),
            ));
        }
        if self.window.is_zero() {
            return Err(GatewayError::InvalidPolicy("window must be positive".into()));
        }
        Ok(())
    }

    /// Delay before retry number `retry` (1-based): `backoff_base * 2^(retry-1)`.
    pub fn backoff(&self, retry: u32) -> Duration {
        self.backoff_base
            .saturating_mul(1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX))
    }
}

/// Where and how to reach a chat-completion endpoint. `credential` names an
/// environment variable; the key itself never appears in configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model_name: String,
    pub credential: String,
    #[serde(with = "serde_secs", rename = "timeout_secs")]
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("request timed out")]
    Timeout,
    #[error("provider throttled the request")]
    Throttled,
    #[error("provider server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("payload too large")]
    PayloadTooLarge,
    #[error("unusable provider response: {0}")]
    BadResponse(String),
    #[error("no scripted reply matches request {0}")]
    ScriptGap(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProviderError::Timeout
                | ProviderError::Throttled
                | ProviderError::Server { .. }
                | ProviderError::Transport(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("retries exhausted after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: ProviderError },
    #[error("authentication failed: {message}")]
    Auth { attempts: u32, message: String },
    #[error("payload too large")]
    PayloadTooLarge { attempts: u32 },
    #[error("request rejected: {cause}")]
    Rejected { attempts: u32, cause: ProviderError },
    #[error("invalid rate-limit policy: {0}")]
    InvalidPolicy(String),
}

impl GatewayError {
    pub fn attempt_count(&self) -> u32 {
        match self {
            GatewayError::Exhausted { attempts, .. }
            | GatewayError::Auth { attempts, .. }
            | GatewayError::PayloadTooLarge { attempts }
            | GatewayError::Rejected { attempts, .. } => *attempts,
            GatewayError::InvalidPolicy(_) => 0,
        }
    }

    pub fn is_auth(&self) -> bool {
        matches!(self, GatewayError::Auth { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmResponse {
    pub request_id: String,
    pub raw_text: String,
    /// Time from the first attempt's start to the successful reply.
    pub latency: Duration,
    pub attempt_count: u32,
}

#[async_trait]
pub trait VlmProvider: Send + Sync {
    fn model_name(&self) -> &str;

    async fn complete(&self, request: &VlmRequest) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttemptRecord {
    pub request_id: String,
    pub attempt: u32,
    /// Offsets from gateway creation.
    pub started: Duration,
    pub finished: Duration,
    pub ok: bool,
}

pub struct Gateway {
    provider: Arc<dyn VlmProvider>,
    policy: RateLimitPolicy,
    limiter: WindowLimiter,
    slots: Semaphore,
    jitter: Mutex<ChaCha8Rng>,
    epoch: Instant,
    attempts: Mutex<Vec<AttemptRecord>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("model", &self.provider.model_name())
            .field("policy", &self.policy)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn VlmProvider>, policy: RateLimitPolicy) -> Result<Self, GatewayError> {
        Self::with_seed(provider, policy, 0)
    }

    /// `seed` drives the retry jitter.
    pub fn with_seed(
        provider: Arc<dyn VlmProvider>,
        policy: RateLimitPolicy,
        seed: u64,
    ) -> Result<Self, GatewayError> {
        policy.validate()?;
        Ok(Self {
            limiter: WindowLimiter::new(policy.max_requests_per_window as usize, policy.window),
            slots: Semaphore::new(policy.max_concurrent as usize),
            jitter: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            epoch: Instant::now(),
            attempts: Mutex::new(Vec::new()),
            provider,
            policy,
        })
    }

    pub fn policy(&self) -> &RateLimitPolicy {
        &self.policy
    }

    pub fn model_name(&self) -> &str {
        self.provider.model_name()
    }

    /// Every provider attempt made so far, in start order.
    pub fn attempts(&self) -> Vec<AttemptRecord> {
        let mut out = self.attempts.lock().unwrap().clone();
        out.sort_by_key(|a| a.started);
        out
    }

    fn jitter(&self) -> Duration {
        let base = self.policy.backoff_base;
        if base.is_zero() {
            return Duration::ZERO;
        }
        let frac: f64 = self.jitter.lock().unwrap().random_range(0.0..1.0);
        base.mul_f64(frac)
    }

    pub async fn dispatch(&self, request: &VlmRequest) -> Result<VlmResponse, GatewayError> {
        let first_start = Instant::now();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = {
                let _slot = self.slots.acquire().await.expect("semaphore never closed");
                let started = self.limiter.acquire().await;
                let result = self.provider.complete(request).await;
                self.attempts.lock().unwrap().push(AttemptRecord {
                    request_id: request.request_id.clone(),
                    attempt,
                    started: started - self.epoch,
                    finished: Instant::now() - self.epoch,
                    ok: result.is_ok(),
                });
                result
            };
            match result {
                Ok(raw_text) => {
                    return Ok(VlmResponse {
                        request_id: request.request_id.clone(),
                        raw_text,
                        latency: Instant::now() - first_start,
                        attempt_count: attempt,
                    })
                }
                Err(e) if e.is_retryable() => {
                    if attempt > self.policy.retry_max {
                        return Err(GatewayError::Exhausted {
                            attempts: attempt,
                            last: e,
                        });
                    }
                    tracing::debug!(request = %request.request_id, attempt, error = %e, "retrying");
                    let delay = self.policy.backoff(attempt) + self.jitter();
                    tokio::time::sleep(delay).await;
                }
                Err(ProviderError::Auth(message)) => {
                    return Err(GatewayError::Auth {
                        attempts: attempt,
                        message,
                    })
                }
                Err(ProviderError::PayloadTooLarge) => {
                    return Err(GatewayError::PayloadTooLarge { attempts: attempt })
                }
                Err(cause) => {
                    return Err(GatewayError::Rejected {
                        attempts: attempt,
                        cause,
                    })
                }
            }
        }
    }

    /// Dispatches all requests concurrently under the policy. Results come
    /// back in request order; failures stay in their slot.
    pub async fn dispatch_batch(&self, requests: &[VlmRequest]) -> Vec<Result<VlmResponse, GatewayError>> {
        futures::future::join_all(requests.iter().map(|r| self.dispatch(r))).await
    }
}
