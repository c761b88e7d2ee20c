//! Run configuration: one TOML file plus command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use apt_core::engine::DEFAULT_ROUND_CAP;
use apt_core::gateway::{ProviderConfig, RateLimitPolicy};
use clap::Args;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSection {
    /// OpenAI-style chat-completion endpoint. `credential` names the
    /// environment variable holding the API key.
    ChatCompletion {
        endpoint: String,
        model_name: String,
        credential: String,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
    /// Replays a JSON Lines script; runs on a virtual clock.
    Scripted { script: PathBuf },
}

fn default_timeout() -> f64 {
    120.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    pub method_minutes: f64,
    pub baseline_minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewConfig {
    pub bind: String,
    /// Environment variable holding the bearer token, if any.
    pub token_env: String,
    pub reviewer: String,
    /// Images per request during rounds started from the review service.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        Self {
            bind: apt_review::DEFAULT_BIND.to_string(),
            token_env: "APT_REVIEW_TOKEN".into(),
            reviewer: "expert".into(),
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Defaults to the output directory's name.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub seed: u64,
    pub animals_per_class: usize,
    pub images_per_animal: usize,
    pub initial_fraction: f64,
    pub round_cap: u32,
    /// Test images per inference request; also used for tuning rounds.
    pub batch_size: usize,
    /// Expert captions for the initial images; defaults to `captions.jsonl`
    /// in the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub captions: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_template: Option<PathBuf>,
    pub class_criteria: BTreeMap<String, String>,
    pub rate_limit: RateLimitPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provider: Option<ProviderSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingConfig>,
    pub review: ReviewConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            output_dir: None,
            run_id: None,
            seed: 0,
            animals_per_class: 3,
            images_per_animal: 6,
            initial_fraction: 0.5,
            round_cap: DEFAULT_ROUND_CAP,
            batch_size: 10,
            captions: None,
            prompt_template: None,
            class_criteria: BTreeMap::new(),
            rate_limit: RateLimitPolicy::default(),
            provider: None,
            timing: None,
            review: ReviewConfig::default(),
        }
    }
}

/// Flags that override config file fields. Paths given here are relative
/// to the working directory; paths in the file are relative to the file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub animals_per_class: Option<usize>,
    #[arg(long, global = true)]
    pub images_per_animal: Option<usize>,
    #[arg(long, global = true)]
    pub initial_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub round_cap: Option<u32>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub captions: Option<PathBuf>,
    /// Use a scripted provider instead of the configured one.
    #[arg(long, global = true)]
    pub script: Option<PathBuf>,
    #[arg(long, global = true)]
    pub max_requests_per_window: Option<u32>,
    #[arg(long, global = true)]
    pub window_secs: Option<f64>,
    #[arg(long, global = true)]
    pub max_concurrent: Option<u32>,
    #[arg(long, global = true)]
    pub retry_max: Option<u32>,
    #[arg(long, global = true)]
    pub method_minutes: Option<f64>,
    #[arg(long, global = true)]
    pub baseline_minutes: Option<f64>,
    #[arg(long, global = true)]
    pub bind: Option<String>,
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            config.manifest.as_mut(),
            config.output_dir.as_mut(),
            config.captions.as_mut(),
            config.prompt_template.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        if let Some(ProviderSection::Scripted { script }) = config.provider.as_mut() {
            resolve(base, script);
        }
        Ok(config)
    }

    /// Reads the config file named in `overrides` (if any), applies the
    /// remaining flags and validates the result.
    pub fn load(overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut config = match &overrides.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                Self::from_toml(&text, path)?
            }
            None => Self::default(),
        };
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &o.$field {
                    self.$field = Some(v.clone());
                }
            )*};
        }
        set!(manifest, output_dir, run_id, captions);
        macro_rules! set_plain {
            ($($field:ident),*) => {$(
                if let Some(v) = o.$field {
                    self.$field = v;
                }
            )*};
        }
        set_plain!(seed, animals_per_class, images_per_animal, initial_fraction, round_cap, batch_size);
        if let Some(script) = &o.script {
            self.provider = Some(ProviderSection::Scripted { script: script.clone() });
        }
        let rl = &mut self.rate_limit;
        if let Some(v) = o.max_requests_per_window {
            rl.max_requests_per_window = v;
        }
        if let Some(v) = o.window_secs {
            rl.window = Duration::try_from_secs_f64(v).unwrap_or(Duration::ZERO);
        }
        if let Some(v) = o.max_concurrent {
            rl.max_concurrent = v;
        }
        if let Some(v) = o.retry_max {
            rl.retry_max = v;
        }
        match (o.method_minutes, o.baseline_minutes, &mut self.timing) {
            (None, None, _) => {}
            (m, b, Some(t)) => {
                t.method_minutes = m.unwrap_or(t.method_minutes);
                t.baseline_minutes = b.unwrap_or(t.baseline_minutes);
            }
            (m, b, timing @ None) => {
                *timing = Some(TimingConfig {
                    method_minutes: m.unwrap_or(f64::NAN),
                    baseline_minutes: b.unwrap_or(f64::NAN),
                })
            }
        }
        if let Some(bind) = &o.bind {
            self.review.bind = bind.clone();
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.animals_per_class == 0 {
            return bad("animals_per_class must be at least 1".into());
        }
        if self.images_per_animal == 0 {
            return bad("images_per_animal must be at least 1".into());
        }
        if !(self.initial_fraction > 0.0 && self.initial_fraction < 1.0) {
            return bad(format!(
                "initial_fraction must lie strictly between 0 and 1, got {}",
                self.initial_fraction
            ));
        }
        if self.round_cap == 0 {
            return bad("round_cap must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.review.batch_size == Some(0) {
            return bad("review.batch_size must be at least 1".into());
        }
        if let Err(e) = self.rate_limit.validate() {
            return bad(format!("rate_limit: {e}"));
        }
        if let Some(t) = &self.timing {
            if t.method_minutes.is_nan() || t.baseline_minutes.is_nan() {
                return bad("timing needs both method_minutes and baseline_minutes".into());
            }
            if t.baseline_minutes <= 0.0 || t.method_minutes < 0.0 {
                return bad("timing: baseline must be positive and method time non-negative".into());
            }
        }
        if let Some(ProviderSection::ChatCompletion { timeout_secs, .. }) = &self.provider {
            if !(*timeout_secs > 0.0 && timeout_secs.is_finite()) {
                return bad("provider.timeout_secs must be positive".into());
            }
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                return bad(format!("run_id {id:?} may only use letters, digits, '-', '_' and '.'"));
            }
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> Result<&Path, ConfigError> {
        self.manifest
            .as_deref()
            .ok_or_else(|| ConfigError::Invalid("no manifest given: set `manifest` or pass --manifest".into()))
    }

    pub fn output_dir(&self) -> Result<&Path, ConfigError> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| ConfigError::Invalid("no output directory given: set `output_dir` or pass --output-dir".into()))
    }

    pub fn run_id(&self) -> Result<String, ConfigError> {
        if let Some(id) = &self.run_id {
            return Ok(id.clone());
        }
        let dir = self.output_dir()?;
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .filter(|n| n.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)))
            .ok_or_else(|| {
                ConfigError::Invalid(format!(
                    "cannot derive a run id from {}; set `run_id`",
                    dir.display()
                ))
            })?;
        Ok(name.to_string())
    }

    pub fn provider_config(&self) -> Option<ProviderConfig> {
        match &self.provider {
            Some(ProviderSection::ChatCompletion {
                endpoint,
                model_name,
                credential,
                timeout_secs,
            }) => Some(ProviderConfig {
                endpoint: endpoint.clone(),
                model_name: model_name.clone(),
                credential: credential.clone(),
                timeout: Duration::from_secs_f64(*timeout_secs),
            }),
            _ => None,
        }
    }

    pub fn is_scripted(&self) -> bool {
        matches!(self.provider, Some(ProviderSection::Scripted { .. }))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
