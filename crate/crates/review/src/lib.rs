//! HTTP review queue for a tuning run.
//!
//! One service instance serves one run. Mutations (review decisions and
//! round advances) are serialized behind a single lock, applied to a copy of
//! the run state, written to disk, and only then published to readers.
//! Reads clone the published snapshot.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use apt_core::dataset::DatasetManifest;
use apt_core::engine::{run_round, AptError, ReviewStatus, RoundContext};
use apt_core::gateway::Gateway;
use apt_core::payload::{ImageStore, MediaType};
use apt_core::runstate::{NonceEntry, RunState, RunStateError};
use apt_core::ReviewDecision;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::{Mutex, RwLock};

pub const DEFAULT_BIND: &str = "127.0.0.1:8765";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual: Option<Vec<String>>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            residual: None,
        }
    }

    fn unknown_run(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_run", format!("no run {id} on this service"))
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_error", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<AptError> for ApiError {
    fn from(e: AptError) -> Self {
        let message = e.to_string();
        match e {
            AptError::PendingReviewsExist(_) => Self::new(StatusCode::CONFLICT, "pending_reviews_exist", message),
            AptError::RoundCapReached { residual, .. } => Self {
                residual: Some(residual),
                ..Self::new(StatusCode::CONFLICT, "round_cap_reached", message)
            },
            AptError::NoSuchPending(_) => Self::new(StatusCode::NOT_FOUND, "not_pending", message),
            AptError::AlreadyDecided(_) | AptError::IncorrectItemPromotion(_) | AptError::AlreadyFinalized => {
                Self::new(StatusCode::CONFLICT, "conflict", message)
            }
            AptError::Prompt(_) => Self::validation(message),
            AptError::GatewayFailure(_) => Self::new(StatusCode::BAD_GATEWAY, "provider_failure", message),
            AptError::NotFinalizable { .. } | AptError::NotAtRoundCap | AptError::ActiveSetEmpty => {
                Self::new(StatusCode::CONFLICT, "state_order", message)
            }
            _ => Self::internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingItem {
    pub image_id: String,
    pub animal_id: String,
    pub round: u32,
    pub proposed_label: String,
    pub proposed_explanation: String,
    pub ground_truth_label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecidedCounts {
    pub accepted: usize,
    pub edited: usize,
    pub rejected: usize,
}

/// Bookkeeping for the expert's session with this service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub run_id: String,
    pub reviewer: String,
    pub started_at: DateTime<Utc>,
    pub decided: DecidedCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub round: u32,
    pub round_cap: u32,
    pub prompt_set_size: usize,
    pub active_remaining: usize,
    pub pending: usize,
    pub finalized: bool,
    /// Images still active once the round cap is reached, plus exclusions.
    pub residual: Vec<String>,
    pub session: ReviewSession,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Accept,
    Edit,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRequest {
    pub image_id: String,
    pub decision: DecisionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    pub nonce: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewResponse {
    pub image_id: String,
    pub decision: DecisionKind,
    pub status: ReviewStatus,
    pub remaining_pending: usize,
    pub round_complete: bool,
    pub prompt_set_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvanceRequest {
    pub nonce: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvanceResponse {
    pub round: u32,
    pub active_remaining: usize,
    pub pending: usize,
    pub auto_rejected: usize,
    pub failed: usize,
    pub finalized: bool,
    pub prompt_set_size: usize,
}

pub struct ServiceConfig {
    pub run_state_path: PathBuf,
    pub manifest: DatasetManifest,
    pub gateway: Gateway,
    /// Images per model request during a round; `None` sends the active set at once.
    pub batch_size: Option<usize>,
    /// Required bearer token. `None` disables the check (loopback only).
    pub token: Option<String>,
    pub reviewer: String,
}

pub struct ReviewService {
    run_state_path: PathBuf,
    manifest: DatasetManifest,
    store: ImageStore,
    gateway: Gateway,
    batch_size: Option<usize>,
    token: Option<String>,
    published: RwLock<RunState>,
    session: std::sync::Mutex<ReviewSession>,
    writer: Mutex<()>,
}

impl ReviewService {
    pub fn open(config: ServiceConfig) -> Result<Self, RunStateError> {
        let state = RunState::load(&config.run_state_path)?;
        let session = ReviewSession {
            run_id: state.run_id.clone(),
            reviewer: config.reviewer,
            started_at: Utc::now(),
            decided: DecidedCounts::default(),
        };
        Ok(Self {
            store: ImageStore::new(config.manifest.root.clone()),
            run_state_path: config.run_state_path,
            manifest: config.manifest,
            gateway: config.gateway,
            batch_size: config.batch_size,
            token: config.token,
            published: RwLock::new(state),
            session: std::sync::Mutex::new(session),
            writer: Mutex::new(()),
        })
    }

    pub async fn snapshot(&self) -> RunState {
        self.published.read().await.clone()
    }

    async fn checked_snapshot(&self, run_id: &str) -> Result<RunState, ApiError> {
        let state = self.snapshot().await;
        if state.run_id != run_id {
            return Err(ApiError::unknown_run(run_id));
        }
        Ok(state)
    }

    async fn persist_and_publish(&self, mut state: RunState) -> Result<RunState, ApiError> {
        let path = self.run_state_path.clone();
        let state = tokio::task::spawn_blocking(move || state.save(&path).map(|_| state))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
            .map_err(|e| ApiError::internal(e.to_string()))?;
        *self.published.write().await = state.clone();
        Ok(state)
    }

    /// Returns the stored response when `nonce` was already used for the
    /// same request, and a conflict when it was used for a different one.
    fn replayed(state: &RunState, nonce: &str, request: &Value) -> Result<Option<Value>, ApiError> {
        if nonce.trim().is_empty() {
            return Err(ApiError::validation("nonce must not be empty"));
        }
        match state.nonces.get(nonce) {
            Some(entry) if &entry.request == request => Ok(Some(entry.response.clone())),
            Some(_) => Err(ApiError::new(
                StatusCode::CONFLICT,
                "nonce_reused",
                format!("nonce {nonce} was already used for a different request"),
            )),
            None => Ok(None),
        }
    }

    pub async fn list_pending(&self, run_id: &str) -> Result<Vec<PendingItem>, ApiError> {
        let state = self.checked_snapshot(run_id).await?;
        Ok(state
            .apt
            .pending()
            .map(|r| PendingItem {
                image_id: r.image.image_id.clone(),
                animal_id: r.image.animal_id.clone(),
                round: r.round,
                proposed_label: r.proposed.label.to_string(),
                proposed_explanation: r.proposed.explanation.clone(),
                ground_truth_label: r.ground_truth.to_string(),
            })
            .collect())
    }

    pub async fn status(&self, run_id: &str) -> Result<RunStatus, ApiError> {
        let state = self.checked_snapshot(run_id).await?;
        let apt = &state.apt;
        let at_cap = apt.round() >= apt.round_cap() || apt.is_finalized();
        let residual = apt
            .active_set()
            .iter()
            .filter(|_| at_cap)
            .map(|i| i.image_id.clone())
            .chain(apt.excluded().iter().map(|e| e.image.image_id.clone()))
            .collect();
        Ok(RunStatus {
            run_id: state.run_id.clone(),
            round: apt.round(),
            round_cap: apt.round_cap(),
            prompt_set_size: apt.prompt_set().len(),
            active_remaining: apt.active_set().len(),
            pending: apt.pending_count(),
            finalized: apt.is_finalized(),
            residual,
            session: self.session.lock().unwrap().clone(),
        })
    }

    pub async fn submit_review(&self, run_id: &str, request: ReviewRequest) -> Result<ReviewResponse, ApiError> {
        let _turn = self.writer.lock().await;
        let mut state = self.checked_snapshot(run_id).await?;
        let fingerprint = serde_json::json!({
            "op": "review",
            "image_id": request.image_id,
            "decision": request.decision,
            "explanation": request.explanation,
        });
        if let Some(previous) = Self::replayed(&state, &request.nonce, &fingerprint)? {
            return serde_json::from_value(previous).map_err(|e| ApiError::internal(e.to_string()));
        }

        let decision = match request.decision {
            DecisionKind::Accept => ReviewDecision::Accept,
            DecisionKind::Reject => ReviewDecision::Reject,
            DecisionKind::Edit => match request.explanation.as_deref().map(str::trim) {
                Some(text) if !text.is_empty() => ReviewDecision::Edit {
                    explanation: text.to_string(),
                },
                _ => return Err(ApiError::validation("edit requires a non-empty explanation")),
            },
        };
        state.apt.apply_review(&request.image_id, decision)?;

        let status = state
            .apt
            .reviews()
            .iter()
            .find(|r| r.image.image_id == request.image_id)
            .map(|r| r.status)
            .ok_or_else(|| ApiError::internal("decided item vanished"))?;
        let remaining = state.apt.pending_count();
        let response = ReviewResponse {
            image_id: request.image_id.clone(),
            decision: request.decision,
            status,
            remaining_pending: remaining,
            round_complete: remaining == 0,
            prompt_set_size: state.apt.prompt_set().len(),
        };
        state.nonces.insert(
            request.nonce.clone(),
            NonceEntry {
                request: fingerprint,
                response: serde_json::to_value(&response).expect("response serializes"),
            },
        );
        self.persist_and_publish(state).await?;
        let mut session = self.session.lock().unwrap();
        match request.decision {
            DecisionKind::Accept => session.decided.accepted += 1,
            DecisionKind::Edit => session.decided.edited += 1,
            DecisionKind::Reject => session.decided.rejected += 1,
        }
        Ok(response)
    }

    /// Starts the next round, or finalizes once nothing is left to tune.
    pub async fn advance(&self, run_id: &str, request: AdvanceRequest) -> Result<AdvanceResponse, ApiError> {
        let _turn = self.writer.lock().await;
        let mut state = self.checked_snapshot(run_id).await?;
        let fingerprint = serde_json::json!({ "op": "advance" });
        if let Some(previous) = Self::replayed(&state, &request.nonce, &fingerprint)? {
            return serde_json::from_value(previous).map_err(|e| ApiError::internal(e.to_string()));
        }

        let pending = state.apt.pending_count();
        if pending > 0 {
            return Err(AptError::PendingReviewsExist(pending).into());
        }
        let mut response = AdvanceResponse {
            round: state.apt.round(),
            active_remaining: state.apt.active_set().len(),
            pending: 0,
            auto_rejected: 0,
            failed: 0,
            finalized: false,
            prompt_set_size: state.apt.prompt_set().len(),
        };
        if state.apt.is_finalized() || state.apt.active_set().is_empty() {
            state.apt.finalize()?;
            response.finalized = true;
        } else {
            state.apt.ensure_round_ready()?;
            let classes = state.subset.classes.clone();
            let system_prompt = state.system_prompt.clone();
            let ctx = RoundContext {
                gateway: &self.gateway,
                store: &self.store,
                system_prompt: &system_prompt,
                classes: &classes,
                batch_size: self.batch_size,
                request_prefix: &state.run_id.clone(),
            };
            match run_round(&mut state.apt, &ctx).await {
                Ok(summary) => {
                    response.round = summary.round;
                    response.pending = summary.pending;
                    response.auto_rejected = summary.auto_rejected;
                    response.failed = summary.failed;
                }
                Err(e) => {
                    // Keep the failure in the history so the operator can see it.
                    self.persist_and_publish(state).await?;
                    return Err(e.into());
                }
            }
        }
        response.active_remaining = state.apt.active_set().len();
        state.nonces.insert(
            request.nonce,
            NonceEntry {
                request: fingerprint,
                response: serde_json::to_value(&response).expect("response serializes"),
            },
        );
        self.persist_and_publish(state).await?;
        Ok(response)
    }

    /// Bytes and media type of any image in the manifest.
    pub async fn image(&self, image_id: &str) -> Result<(&'static str, Vec<u8>), ApiError> {
        let record = self
            .manifest
            .image(image_id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no image {image_id}")))?;
        let bytes = tokio::fs::read(self.store.path_of(record))
            .await
            .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("image {image_id}: {e}")))?;
        let media_type = MediaType::sniff(&bytes).map_or("application/octet-stream", MediaType::as_str);
        Ok((media_type, bytes))
    }
}

async fn require_token(State(service): State<Arc<ReviewService>>, headers: HeaderMap, request: Request, next: Next) -> Response {
    if let Some(token) = &service.token {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(request).await
}

async fn pending_handler(
    State(service): State<Arc<ReviewService>>,
    Path(run_id): Path<String>,
) -> Result<Json<Vec<PendingItem>>, ApiError> {
    service.list_pending(&run_id).await.map(Json)
}

async fn status_handler(
    State(service): State<Arc<ReviewService>>,
    Path(run_id): Path<String>,
) -> Result<Json<RunStatus>, ApiError> {
    service.status(&run_id).await.map(Json)
}

async fn review_handler(
    State(service): State<Arc<ReviewService>>,
    Path(run_id): Path<String>,
    body: Result<Json<ReviewRequest>, JsonRejection>,
) -> Result<Json<ReviewResponse>, ApiError> {
    let Json(request) = body?;
    service.submit_review(&run_id, request).await.map(Json)
}

async fn advance_handler(
    State(service): State<Arc<ReviewService>>,
    Path(run_id): Path<String>,
    body: Result<Json<AdvanceRequest>, JsonRejection>,
) -> Result<Json<AdvanceResponse>, ApiError> {
    let Json(request) = body?;
    service.advance(&run_id, request).await.map(Json)
}

async fn image_handler(
    State(service): State<Arc<ReviewService>>,
    Path(image_id): Path<String>,
) -> Result<Response, ApiError> {
    let (media_type, bytes) = service.image(&image_id).await?;
    Ok(([(header::CONTENT_TYPE, media_type)], bytes).into_response())
}

pub fn router(service: Arc<ReviewService>) -> Router {
    Router::new()
        .route("/runs/{id}/pending", get(pending_handler))
        .route("/runs/{id}/status", get(status_handler))
        .route("/runs/{id}/reviews", post(review_handler))
        .route("/runs/{id}/advance", post(advance_handler))
        .route("/images/{image_id}", get(image_handler))
        .layer(middleware::from_fn_with_state(service.clone(), require_token))
        .with_state(service)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("refusing to listen on non-loopback address {0} without a bearer token")]
    OpenBind(SocketAddr),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Serve(#[source] std::io::Error),
}

/// A service without a token may only listen on loopback.
pub fn check_bind(addr: SocketAddr, token: Option<&str>) -> Result<(), ServeError> {
    if token.is_none() && !addr.ip().is_loopback() {
        return Err(ServeError::OpenBind(addr));
    }
    Ok(())
}

pub async fn serve(service: Arc<ReviewService>, addr: SocketAddr) -> Result<(), ServeError> {
    let listener = bind(&service, addr).await?;
    serve_on(service, listener, std::future::pending()).await
}

/// Binds `addr` after checking that an open address carries a token.
pub async fn bind(service: &ReviewService, addr: SocketAddr) -> Result<tokio::net::TcpListener, ServeError> {
    check_bind(addr, service.token.as_deref())?;
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })
}

/// Serves on an already bound listener until `shutdown` resolves.
pub async fn serve_on(
    service: Arc<ReviewService>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, "review service listening");
    }
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(ServeError::Serve)
}
