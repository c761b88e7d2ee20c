//! Active prompt tuning state machine.
//!
//! The prompt set starts from expert-authored pairs. Each round the model
//! classifies every remaining active image using the current prompt set;
//! correctly classified images are queued for expert review and, once
//! accepted or edited, join the prompt set. Incorrect ones stay active for
//! the next round. After `round_cap` rounds any remaining images are either
//! captioned by the expert or excluded, and the prompt set is finalized.
//!
//! All transitions go through `&mut AptState` and either fully apply or
//! leave the state untouched (apart from a history entry on gateway failure).

use std::collections::{BTreeSet, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::dataset::ImageRecord;
use crate::gateway::{Gateway, GatewayError};
use crate::label::{ClassLabel, ClassSet};
use crate::parser::{parse_batch_response, ModelVerdict};
use crate::payload::ImageStore;
use crate::prompt::{assemble_request, Caption, ImageCaptionPair, PromptError, PromptSet, Provenance};

pub const DEFAULT_ROUND_CAP: u32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum AptError {
    #[error("initial prompt set is empty")]
    EmptyInitial,
    #[error("image {0} appears in both the initial prompt set and the active set")]
    Overlap(String),
    #[error("initial caption for {0} is not a verified expert-authored caption")]
    UnverifiedInitialCaption(String),
    #[error("no ground truth for prompt image {0}")]
    MissingGroundTruth(String),
    #[error("round cap of {round_cap} reached; {} image(s) never promoted", residual.len())]
    RoundCapReached { round_cap: u32, residual: Vec<String> },
    #[error("active set is empty")]
    ActiveSetEmpty,
    #[error("{0} review(s) still pending")]
    PendingReviewsExist(usize),
    #[error("gateway failure: {0}")]
    GatewayFailure(#[source] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no pending review for image {0}")]
    NoSuchPending(String),
    #[error("review for image {0} was already decided")]
    AlreadyDecided(String),
    #[error("image {0} was classified incorrectly and cannot be promoted")]
    IncorrectItemPromotion(String),
    #[error("cannot finalize: {active_remaining} active image(s) left at round {round} of {round_cap}")]
    NotFinalizable {
        active_remaining: usize,
        round: u32,
        round_cap: u32,
    },
    #[error("residual handling requires the round cap to be reached with no pending reviews")]
    NotAtRoundCap,
    #[error("image {0} is not in the active set")]
    NotActive(String),
    #[error("run is already finalized")]
    AlreadyFinalized,
    #[error("round outcomes do not match the active set: {0}")]
    OutcomeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Accepted,
    Edited,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub image: ImageRecord,
    pub proposed: ModelVerdict,
    pub ground_truth: ClassLabel,
    pub correct: bool,
    pub status: ReviewStatus,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum ReviewDecision {
    Accept,
    Edit { explanation: String },
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub image: ImageRecord,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Initialized {
        initial: Vec<String>,
        active: Vec<String>,
        round_cap: u32,
    },
    RoundStarted {
        round: u32,
    },
    VerdictProduced {
        image_id: String,
        label: ClassLabel,
        explanation: String,
        correct: bool,
    },
    VerdictFailed {
        image_id: String,
        reason: String,
    },
    RoundFailed {
        round: u32,
        reason: String,
    },
    ReviewDecided {
        image_id: String,
        #[serde(flatten)]
        decision: ReviewDecision,
    },
    PairPromoted {
        image_id: String,
        provenance: Provenance,
    },
    ResidualCaptioned {
        image_id: String,
        explanation: String,
    },
    ResidualExcluded {
        image_id: String,
        reason: String,
    },
    Finalized {
        effective: usize,
        residual: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub pending: usize,
    pub auto_rejected: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AptState {
    prompt_set: PromptSet,
    active_set: Vec<ImageRecord>,
    excluded: Vec<Exclusion>,
    round: u32,
    round_cap: u32,
    /// Review items produced by the latest round.
    reviews: Vec<ReviewItem>,
    /// Class of every prompt-cohort image that can still be classified.
    ground_truth: HashMap<String, ClassLabel>,
    history: Vec<HistoryEntry>,
    finalized: bool,
}

impl AptState {
    /// Starts a run at round 0 from expert-authored pairs and the active set.
    pub fn init(
        initial: Vec<ImageCaptionPair>,
        active: Vec<ImageRecord>,
        ground_truth: &HashMap<String, ClassLabel>,
        round_cap: u32,
    ) -> Result<Self, AptError> {
        if initial.is_empty() {
            return Err(AptError::EmptyInitial);
        }
        let mut prompt_set = PromptSet::new();
        for pair in initial {
            if !pair.verified || pair.caption.provenance != Provenance::ExpertAuthored {
                return Err(AptError::UnverifiedInitialCaption(pair.image.image_id));
            }
            prompt_set.push(pair)?;
        }
        let mut seen = BTreeSet::new();
        let mut truth = HashMap::new();
        for image in &active {
            if prompt_set.contains(&image.image_id) || !seen.insert(image.image_id.as_str()) {
                return Err(AptError::Overlap(image.image_id.clone()));
            }
            let label = ground_truth
                .get(&image.image_id)
                .ok_or_else(|| AptError::MissingGroundTruth(image.image_id.clone()))?;
            truth.insert(image.image_id.clone(), label.clone());
        }
        let mut state = Self {
            prompt_set,
            active_set: active,
            excluded: Vec::new(),
            round: 0,
            round_cap,
            reviews: Vec::new(),
            ground_truth: truth,
            history: Vec::new(),
            finalized: false,
        };
        state.log(Event::Initialized {
            initial: state.prompt_set.image_ids().map(str::to_string).collect(),
            active: state.active_set.iter().map(|i| i.image_id.clone()).collect(),
            round_cap,
        });
        Ok(state)
    }

    fn log(&mut self, event: Event) {
        self.history.push(HistoryEntry { at: Utc::now(), event });
    }

    pub fn prompt_set(&self) -> &PromptSet {
        &self.prompt_set
    }

    pub fn active_set(&self) -> &[ImageRecord] {
        &self.active_set
    }

    pub fn excluded(&self) -> &[Exclusion] {
        &self.excluded
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn round_cap(&self) -> u32 {
        self.round_cap
    }

    pub fn reviews(&self) -> &[ReviewItem] {
        &self.reviews
    }

    pub fn pending(&self) -> impl Iterator<Item = &ReviewItem> {
        self.reviews.iter().filter(|r| r.status == ReviewStatus::Pending)
    }

    pub fn pending_count(&self) -> usize {
        self.pending().count()
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    fn residual_ids(&self) -> Vec<String> {
        self.active_set
            .iter()
            .map(|i| i.image_id.clone())
            .chain(self.excluded.iter().map(|e| e.image.image_id.clone()))
            .collect()
    }

    /// Checks the preconditions for starting a round.
    pub fn ensure_round_ready(&self) -> Result<(), AptError> {
        if self.finalized {
            return Err(AptError::AlreadyFinalized);
        }
        let pending = self.pending_count();
        if pending > 0 {
            return Err(AptError::PendingReviewsExist(pending));
        }
        if self.active_set.is_empty() {
            return Err(AptError::ActiveSetEmpty);
        }
        if self.round >= self.round_cap {
            return Err(AptError::RoundCapReached {
                round_cap: self.round_cap,
                residual: self.residual_ids(),
            });
        }
        Ok(())
    }

    /// Folds one round of model outcomes into the state. `outcomes` must
    /// cover the active set exactly; they are applied in active-set order.
    pub fn record_round(
        &mut self,
        outcomes: Vec<(String, Result<ModelVerdict, String>)>,
    ) -> Result<RoundSummary, AptError> {
        self.ensure_round_ready()?;
        let mut by_id: HashMap<String, Result<ModelVerdict, String>> = HashMap::new();
        for (id, outcome) in outcomes {
            if by_id.insert(id.clone(), outcome).is_some() {
                return Err(AptError::OutcomeMismatch(format!("duplicate outcome for {id}")));
            }
        }
        if by_id.len() != self.active_set.len()
            || self.active_set.iter().any(|i| !by_id.contains_key(&i.image_id))
        {
            return Err(AptError::OutcomeMismatch(format!(
                "{} outcomes for {} active images",
                by_id.len(),
                self.active_set.len()
            )));
        }

        self.round += 1;
        self.reviews.clear();
        let round = self.round;
        self.log(Event::RoundStarted { round });

        let mut summary = RoundSummary {
            round,
            pending: 0,
            auto_rejected: 0,
            failed: 0,
        };
        for image in self.active_set.clone() {
            match by_id.remove(&image.image_id).expect("checked above") {
                Ok(verdict) => {
                    let truth = self.ground_truth[&image.image_id].clone();
                    let correct = verdict.label == truth;
                    self.log(Event::VerdictProduced {
                        image_id: image.image_id.clone(),
                        label: verdict.label.clone(),
                        explanation: verdict.explanation.clone(),
                        correct,
                    });
                    if correct {
                        summary.pending += 1;
                    } else {
                        summary.auto_rejected += 1;
                    }
                    self.reviews.push(ReviewItem {
                        image,
                        proposed: verdict,
                        ground_truth: truth,
                        correct,
                        status: if correct {
                            ReviewStatus::Pending
                        } else {
                            ReviewStatus::Rejected
                        },
                        round,
                    });
                }
                Err(reason) => {
                    summary.failed += 1;
                    self.log(Event::VerdictFailed {
                        image_id: image.image_id.clone(),
                        reason,
                    });
                }
            }
        }
        Ok(summary)
    }

    /// Records a round that could not be dispatched; nothing else changes.
    pub fn record_round_failure(&mut self, reason: impl Into<String>) {
        let round = self.round + 1;
        self.log(Event::RoundFailed {
            round,
            reason: reason.into(),
        });
    }

    fn promote(&mut self, image_id: &str, caption: Caption) -> Result<(), AptError> {
        let pos = self
            .active_set
            .iter()
            .position(|i| i.image_id == image_id)
            .ok_or_else(|| AptError::NotActive(image_id.to_string()))?;
        let provenance = caption.provenance;
        self.prompt_set.push(ImageCaptionPair {
            image: self.active_set[pos].clone(),
            caption,
            verified: true,
        })?;
        self.active_set.remove(pos);
        self.ground_truth.remove(image_id);
        self.log(Event::PairPromoted {
            image_id: image_id.to_string(),
            provenance,
        });
        Ok(())
    }

    pub fn apply_review(&mut self, image_id: &str, decision: ReviewDecision) -> Result<(), AptError> {
        if self.finalized {
            return Err(AptError::AlreadyFinalized);
        }
        let idx = self
            .reviews
            .iter()
            .position(|r| r.image.image_id == image_id)
            .ok_or_else(|| AptError::NoSuchPending(image_id.to_string()))?;
        let item = &self.reviews[idx];
        if !item.correct {
            return match decision {
                ReviewDecision::Reject => Err(AptError::NoSuchPending(image_id.to_string())),
                _ => Err(AptError::IncorrectItemPromotion(image_id.to_string())),
            };
        }
        if item.status != ReviewStatus::Pending {
            return Err(AptError::AlreadyDecided(image_id.to_string()));
        }

        let (status, caption) = match &decision {
            ReviewDecision::Accept => (
                ReviewStatus::Accepted,
                Some(Caption::new(
                    item.proposed.label.clone(),
                    item.proposed.explanation.clone(),
                    Provenance::ModelGenerated,
                )?),
            ),
            ReviewDecision::Edit { explanation } => (
                ReviewStatus::Edited,
                Some(Caption::new(
                    item.ground_truth.clone(),
                    explanation.clone(),
                    Provenance::ExpertCorrected,
                )?),
            ),
            ReviewDecision::Reject => (ReviewStatus::Rejected, None),
        };

        self.reviews[idx].status = status;
        self.log(Event::ReviewDecided {
            image_id: image_id.to_string(),
            decision,
        });
        if let Some(caption) = caption {
            self.promote(image_id, caption)?;
        }
        Ok(())
    }

    fn ensure_residual_phase(&self, image_id: &str) -> Result<(), AptError> {
        if self.finalized {
            return Err(AptError::AlreadyFinalized);
        }
        if self.round < self.round_cap || self.pending_count() > 0 {
            return Err(AptError::NotAtRoundCap);
        }
        if !self.active_set.iter().any(|i| i.image_id == image_id) {
            return Err(AptError::NotActive(image_id.to_string()));
        }
        Ok(())
    }

    /// Expert writes the caption for an image the model never got right.
    pub fn caption_residual(&mut self, image_id: &str, explanation: &str) -> Result<(), AptError> {
        self.ensure_residual_phase(image_id)?;
        let caption = Caption::new(
            self.ground_truth[image_id].clone(),
            explanation,
            Provenance::ExpertAuthored,
        )?;
        self.log(Event::ResidualCaptioned {
            image_id: image_id.to_string(),
            explanation: caption.explanation.clone(),
        });
        self.promote(image_id, caption)
    }

    pub fn exclude_residual(&mut self, image_id: &str, reason: &str) -> Result<(), AptError> {
        self.ensure_residual_phase(image_id)?;
        let pos = self
            .active_set
            .iter()
            .position(|i| i.image_id == image_id)
            .expect("checked above");
        let image = self.active_set.remove(pos);
        self.ground_truth.remove(image_id);
        self.excluded.push(Exclusion {
            image,
            reason: reason.to_string(),
        });
        self.log(Event::ResidualExcluded {
            image_id: image_id.to_string(),
            reason: reason.to_string(),
        });
        Ok(())
    }

    /// Freezes the prompt set. Returns the effective set and the images that
    /// never made it in (still active or excluded). Finalizing twice returns
    /// the same result.
    pub fn finalize(&mut self) -> Result<(PromptSet, Vec<ImageRecord>), AptError> {
        let residual_images = || {
            self.active_set
                .iter()
                .cloned()
                .chain(self.excluded.iter().map(|e| e.image.clone()))
                .collect::<Vec<_>>()
        };
        if self.finalized {
            return Ok((self.prompt_set.clone(), residual_images()));
        }
        let pending = self.pending_count();
        if pending > 0 {
            return Err(AptError::PendingReviewsExist(pending));
        }
        if !self.active_set.is_empty() && self.round < self.round_cap {
            return Err(AptError::NotFinalizable {
                active_remaining: self.active_set.len(),
                round: self.round,
                round_cap: self.round_cap,
            });
        }
        let residual = residual_images();
        self.log(Event::Finalized {
            effective: self.prompt_set.len(),
            residual: residual.iter().map(|i| i.image_id.clone()).collect(),
        });
        self.finalized = true;
        Ok((self.prompt_set.clone(), residual))
    }

    /// Checks the structural invariants against the full prompt-image
    /// universe. Used by property tests and on resume.
    pub fn check_invariants(&self, universe: &BTreeSet<String>) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        let ids = self
            .prompt_set
            .image_ids()
            .map(str::to_string)
            .chain(self.active_set.iter().map(|i| i.image_id.clone()))
            .chain(self.excluded.iter().map(|e| e.image.image_id.clone()));
        for id in ids {
            if !seen.insert(id.clone()) {
                return Err(format!("image {id} appears twice"));
            }
        }
        if &seen != universe {
            return Err("prompt, active and excluded sets do not cover the universe".into());
        }
        if self.round > self.round_cap {
            return Err(format!("round {} exceeds cap {}", self.round, self.round_cap));
        }
        if let Some(p) = self.prompt_set.pairs().iter().find(|p| !p.verified) {
            return Err(format!("unverified pair {}", p.image.image_id));
        }
        Ok(())
    }

    /// Rebuilds a state by re-applying a recorded event log to the same
    /// starting inputs. Timestamps are fresh; events are identical.
    pub fn replay(
        initial: Vec<ImageCaptionPair>,
        active: Vec<ImageRecord>,
        ground_truth: &HashMap<String, ClassLabel>,
        round_cap: u32,
        events: &[Event],
    ) -> Result<Self, AptError> {
        let mut state = Self::init(initial, active, ground_truth, round_cap)?;
        let mut i = 0;
        while i < events.len() {
            match &events[i] {
                Event::RoundStarted { .. } => {
                    let mut outcomes = Vec::new();
                    i += 1;
                    while i < events.len() {
                        match &events[i] {
                            Event::VerdictProduced {
                                image_id,
                                label,
                                explanation,
                                ..
                            } => outcomes.push((
                                image_id.clone(),
                                Ok(ModelVerdict {
                                    image_id: image_id.clone(),
                                    label: label.clone(),
                                    explanation: explanation.clone(),
                                }),
                            )),
                            Event::VerdictFailed { image_id, reason } => {
                                outcomes.push((image_id.clone(), Err(reason.clone())))
                            }
                            _ => break,
                        }
                        i += 1;
                    }
                    state.record_round(outcomes)?;
                    continue;
                }
                Event::RoundFailed { reason, .. } => state.record_round_failure(reason.clone()),
                Event::ReviewDecided { image_id, decision } => {
                    state.apply_review(image_id, decision.clone())?
                }
                Event::ResidualCaptioned {
                    image_id,
                    explanation,
                } => state.caption_residual(image_id, explanation)?,
                Event::ResidualExcluded { image_id, reason } => {
                    state.exclude_residual(image_id, reason)?
                }
                Event::Finalized { .. } => {
                    state.finalize()?;
                }
                Event::Initialized { .. }
                | Event::VerdictProduced { .. }
                | Event::VerdictFailed { .. }
                | Event::PairPromoted { .. } => {}
            }
            i += 1;
        }
        Ok(state)
    }
}

/// What a round needs to talk to the model.
pub struct RoundContext<'a> {
    pub gateway: &'a Gateway,
    pub store: &'a ImageStore,
    pub system_prompt: &'a str,
    pub classes: &'a ClassSet,
    /// Images per request; `None` sends the whole active set at once.
    pub batch_size: Option<usize>,
    /// Prefix for request ids, normally the run id.
    pub request_prefix: &'a str,
}

/// Runs one round: classify every active image with the current prompt set,
/// then fold the verdicts into review items.
pub async fn run_round(state: &mut AptState, ctx: &RoundContext<'_>) -> Result<RoundSummary, AptError> {
    state.ensure_round_ready()?;
    let round = state.round() + 1;
    let size = ctx.batch_size.unwrap_or(state.active_set.len()).max(1);
    let requests = state
        .active_set
        .chunks(size)
        .enumerate()
        .map(|(i, batch)| {
            assemble_request(
                ctx.system_prompt,
                &state.prompt_set,
                batch,
                ctx.store,
                format!("{}-round{round}-b{i}", ctx.request_prefix),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let responses = ctx.gateway.dispatch_batch(&requests).await;
    let mut outcomes = Vec::with_capacity(state.active_set.len());
    for (request, response) in requests.iter().zip(responses) {
        let response = match response {
            Ok(r) => r,
            Err(e) => {
                state.record_round_failure(e.to_string());
                return Err(AptError::GatewayFailure(e));
            }
        };
        let parsed = parse_batch_response(&response.raw_text, &request.query_ids(), ctx.classes);
        for warning in &parsed.warnings {
            tracing::warn!(request = %request.request_id, ?warning, "unmatched response content");
        }
        outcomes.extend(
            parsed
                .outcomes
                .into_iter()
                .map(|(id, r)| (id, r.map_err(|f| f.kind.to_string()))),
        );
    }
    state.record_round(outcomes)
}
