//! Active prompt tuning for vision-language image classification.

pub mod aggregate;
pub mod dataset;
pub mod engine;
pub mod fixtures;
pub mod gateway;
pub mod inference;
pub mod label;
pub mod parser;
pub mod payload;
pub mod prompt;
pub mod results;
pub mod runstate;

pub use aggregate::{AnimalTally, StudyReport, Vote};
pub use dataset::{load_manifest, DatasetError, DatasetManifest, ImageRecord};
pub use engine::{AptError, AptState, ReviewDecision};
pub use gateway::{Gateway, GatewayError, RateLimitPolicy, VlmProvider};
pub use inference::{plan_batches, run_inference, BatchPlan};
pub use label::{ClassLabel, ClassSet};
pub use parser::{parse_batch_response, ModelVerdict};
pub use prompt::{PromptSet, VlmRequest};
pub use results::ResultsFile;
pub use runstate::RunState;
