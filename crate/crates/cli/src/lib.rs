//! Operator entry point: validate, select, tune, review-serve, infer, report.

pub mod config;

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use apt_core::aggregate::{render_report, tally_predictions, AggregateError, StudyReport, Timing};
use apt_core::dataset::{
    load_manifest, partition_prompt_subset, select_prompt_subset, DatasetError, DatasetManifest, PromptSubset,
};
use apt_core::engine::{run_round, AptError, RoundContext};
use apt_core::gateway::{ChatCompletionProvider, Gateway, ScriptedProvider, VlmProvider};
use apt_core::inference::{plan_batches, run_inference, InferenceControl, InferenceError, InferenceJob};
use apt_core::label::ClassLabel;
use apt_core::payload::ImageStore;
use apt_core::prompt::{DatasetContext, SystemPromptSpec, SystemPromptTemplate};
use apt_core::results::ResultsFile;
use apt_core::runstate::{load_expert_captions, write_atomic, write_caption_template, RunState, RunStateError};
use apt_core::AptState;
use apt_review::{ReviewService, ServeError, ServiceConfig};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ProviderSection, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "apt", version, about = "Active prompt tuning for vision-language image classification")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: config::Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the manifest and print per-class counts.
    Validate,
    /// Choose the prompt subset and write the caption template.
    Select {
        /// Replace an existing, different selection.
        #[arg(long)]
        force: bool,
    },
    /// Start or resume tuning; runs rounds until reviews are pending.
    Tune {
        /// Captions or exclusions for images left at the round cap.
        #[arg(long)]
        residuals: Option<PathBuf>,
    },
    /// Serve the review API for the current run.
    ReviewServe,
    /// Classify the test cohort with the finalized prompt set.
    Infer {
        /// Discard existing results and start over.
        #[arg(long)]
        force: bool,
        /// Send at most this many batches, then stop.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Tally results into the per-animal report.
    Report,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    StateOrder(String),
    #[error("{0}")]
    Provider(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::StateOrder(_) => 3,
            CliError::Provider(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Other(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<RunStateError> for CliError {
    fn from(e: RunStateError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<AptError> for CliError {
    fn from(e: AptError) -> Self {
        match e {
            AptError::GatewayFailure(_) => CliError::Provider(format!("{e}; the round was logged as failed, rerun to retry")),
            AptError::Prompt(_) | AptError::NotActive(_) | AptError::NoSuchPending(_) => CliError::Validation(e.to_string()),
            _ => CliError::StateOrder(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::NotFinalized => CliError::StateOrder(e.to_string()),
            InferenceError::PlanMismatch(_) => {
                CliError::StateOrder(format!("{e}; pass --force to discard the old results"))
            }
            InferenceError::Auth(_) => CliError::Provider(format!("{e}; check the credential variable and rerun")),
            InferenceError::InvalidBatchSize | InferenceError::EmptyTestCohort => CliError::Validation(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<AggregateError> for CliError {
    fn from(e: AggregateError) -> Self {
        match e {
            AggregateError::IncompleteResults { .. } => {
                CliError::StateOrder(format!("{e}; finish `apt infer` first"))
            }
            AggregateError::NonpositiveBaseline | AggregateError::NegativeMethodTime => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

/// Files of one run, all under the output directory.
struct RunDir {
    root: PathBuf,
    captions: PathBuf,
}

impl RunDir {
    fn open(config: &RunConfig) -> Result<Self, CliError> {
        let root = config.output_dir()?.to_path_buf();
        std::fs::create_dir_all(&root).map_err(|e| io_error(&root, e))?;
        let captions = config.captions.clone().unwrap_or_else(|| root.join("captions.jsonl"));
        let dir = Self { root, captions };
        let snapshot = dir.file("effective_config.toml");
        write_atomic(&snapshot, config.to_toml().as_bytes()).map_err(|e| io_error(&snapshot, e))?;
        Ok(dir)
    }

    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run_state(&self) -> PathBuf {
        self.file("run_state.json")
    }

    fn load_state(&self, run_id: &str) -> Result<Option<RunState>, CliError> {
        let path = self.run_state();
        if !path.exists() {
            return Ok(None);
        }
        let state = RunState::load(&path)?;
        if state.run_id != run_id {
            return Err(CliError::StateOrder(format!(
                "{} belongs to run {}, not {run_id}",
                path.display(),
                state.run_id
            )));
        }
        Ok(Some(state))
    }
}

/// The prompt subset and its split, as chosen by `select`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Selection {
    animals_per_class: usize,
    images_per_animal: usize,
    initial_fraction: f64,
    subset: PromptSubset,
    initial: Vec<String>,
    active: Vec<String>,
}

impl Selection {
    fn compute(config: &RunConfig, manifest: &DatasetManifest) -> Result<Self, CliError> {
        let subset = select_prompt_subset(manifest, config.animals_per_class, config.images_per_animal, config.seed)?;
        let (initial, active) = partition_prompt_subset(&subset, config.initial_fraction, config.seed)?;
        Ok(Self {
            animals_per_class: config.animals_per_class,
            images_per_animal: config.images_per_animal,
            initial_fraction: config.initial_fraction,
            subset,
            initial: initial.into_iter().map(|i| i.image_id).collect(),
            active: active.into_iter().map(|i| i.image_id).collect(),
        })
    }

    fn records(&self, ids: &[String]) -> Vec<apt_core::ImageRecord> {
        let by_id: HashMap<&str, &apt_core::ImageRecord> =
            self.subset.images().map(|i| (i.image_id.as_str(), i)).collect();
        ids.iter().map(|id| by_id[id.as_str()].clone()).collect()
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = RunConfig::load(&cli.overrides)?;
    match cli.command {
        Command::Validate => validate(&config),
        Command::Select { force } => select(&config, force),
        Command::Tune { residuals } => tune(&config, residuals.as_deref()),
        Command::ReviewServe => review_serve(&config),
        Command::Infer { force, stop_after } => infer(&config, force, stop_after),
        Command::Report => report(&config),
    }
}

fn manifest(config: &RunConfig) -> Result<DatasetManifest, CliError> {
    Ok(load_manifest(config.manifest_path()?)?)
}

fn validate(config: &RunConfig) -> Result<(), CliError> {
    let manifest = manifest(config)?;
    let summary = manifest.summary();
    println!("{}", summary.headline());
    let per_class = summary
        .images_per_class
        .iter()
        .map(|(c, n)| format!("{n} {c}"))
        .collect::<Vec<_>>()
        .join(" / ");
    println!(
        "{} images ({per_class}), {} in the test cohort",
        summary.total_images, summary.test_images
    );
    Ok(())
}

fn select(config: &RunConfig, force: bool) -> Result<(), CliError> {
    let manifest = manifest(config)?;
    let dir = RunDir::open(config)?;
    let selection = ensure_selection(config, &manifest, &dir, force)?;
    println!(
        "selected {} animals, {} images: {} initial / {} active",
        selection.subset.animals.len(),
        selection.subset.image_count(),
        selection.initial.len(),
        selection.active.len()
    );
    if !dir.captions.exists() {
        write_captions_template(&dir, &selection)?;
    }
    println!("expert captions for the initial images: {}", dir.captions.display());
    Ok(())
}

fn write_captions_template(dir: &RunDir, selection: &Selection) -> Result<(), CliError> {
    write_caption_template(
        &dir.captions,
        &selection.records(&selection.initial),
        &selection.subset.ground_truth(),
    )
    .map_err(|e| io_error(&dir.captions, e))
}

fn ensure_selection(
    config: &RunConfig,
    manifest: &DatasetManifest,
    dir: &RunDir,
    force: bool,
) -> Result<Selection, CliError> {
    let path = dir.file("selection.json");
    let fresh = Selection::compute(config, manifest)?;
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
        let existing: Selection = serde_json::from_str(&text)
            .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
        if existing == fresh {
            return Ok(existing);
        }
        if dir.run_state().exists() {
            return Err(CliError::StateOrder(format!(
                "the configured selection differs from {} and a tuning run already uses it; \
                 use a new output directory",
                path.display()
            )));
        }
        if !force {
            return Err(CliError::StateOrder(format!(
                "the configured selection differs from {}; pass --force to replace it",
                path.display()
            )));
        }
    }
    let bytes = serde_json::to_vec_pretty(&fresh).expect("selection serializes");
    write_atomic(&path, &bytes).map_err(|e| io_error(&path, e))?;
    Ok(fresh)
}

fn system_prompt(config: &RunConfig, manifest: &DatasetManifest) -> Result<(String, String), CliError> {
    let template = match &config.prompt_template {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            SystemPromptTemplate::new(text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => SystemPromptTemplate::default(),
    };
    let study = &manifest.study;
    let spec = SystemPromptSpec::with_defaults(
        &study.classes,
        DatasetContext {
            magnification: study.magnification.clone(),
            stain: study.stain.clone(),
            anatomy: study.anatomy.clone(),
        },
        &config.class_criteria,
    )
    .map_err(|e| CliError::Validation(format!("system prompt: {e}")))?;
    let text = template
        .render(&spec)
        .map_err(|e| CliError::Validation(format!("system prompt: {e}")))?;
    Ok((text, template.version()))
}

fn gateway(config: &RunConfig) -> Result<Gateway, CliError> {
    let provider: Arc<dyn VlmProvider> = match &config.provider {
        None => {
            return Err(CliError::Validation(
                "no provider configured: add a [provider] table or pass --script".into(),
            ))
        }
        Some(ProviderSection::Scripted { script }) => Arc::new(
            ScriptedProvider::from_jsonl(script).map_err(|e| CliError::Validation(format!("provider script: {e}")))?,
        ),
        Some(ProviderSection::ChatCompletion { .. }) => {
            let cfg = config.provider_config().expect("chat completion section");
            Arc::new(ChatCompletionProvider::from_env(&cfg).map_err(|e| CliError::Provider(e.to_string()))?)
        }
    };
    Gateway::with_seed(provider, config.rate_limit.clone(), config.seed).map_err(|e| CliError::Validation(e.to_string()))
}

/// Scripted providers run on a paused clock so rate-limit waits cost nothing.
fn runtime(config: &RunConfig) -> Result<tokio::runtime::Runtime, CliError> {
    let mut builder = tokio::runtime::Builder::new_current_thread();
    builder.enable_all();
    if config.is_scripted() {
        builder.start_paused(true);
    }
    builder.build().map_err(|e| CliError::Other(format!("cannot start runtime: {e}")))
}

fn review_url(config: &RunConfig, run_id: &str) -> String {
    format!("http://{}/runs/{run_id}/pending", config.review.bind)
}

fn init_run(config: &RunConfig, manifest: &DatasetManifest, dir: &RunDir, run_id: &str) -> Result<RunState, CliError> {
    let selection = ensure_selection(config, manifest, dir, false)?;
    if !dir.captions.exists() {
        write_captions_template(dir, &selection)?;
        return Err(CliError::Validation(format!(
            "no expert captions yet: a template for the {} initial images was written to {}; \
             fill in each explanation and rerun `apt tune`",
            selection.initial.len(),
            dir.captions.display()
        )));
    }
    let truth = selection.subset.ground_truth();
    let pairs = load_expert_captions(&dir.captions, &selection.records(&selection.initial), &truth)
        .map_err(|e| CliError::Validation(format!("{}: {e}", dir.captions.display())))?;
    let apt = AptState::init(pairs, selection.records(&selection.active), &truth, config.round_cap)?;
    let (prompt, version) = system_prompt(config, manifest)?;
    let mut state = RunState::new(run_id, config.seed, selection.subset, prompt, version, apt);
    state.save(dir.run_state())?;
    println!("initialized run {run_id}: {} initial pairs, {} active images", state.apt.prompt_set().len(), state.apt.active_set().len());
    Ok(state)
}

/// One line of a residuals file: either a caption or an exclusion reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResidualLine {
    image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exclude: Option<String>,
}

fn apply_residuals(apt: &AptState, path: &Path) -> Result<AptState, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let mut next = apt.clone();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{} line {}", path.display(), i + 1);
        let entry: ResidualLine =
            serde_json::from_str(line).map_err(|e| CliError::Validation(format!("{}: {e}", at())))?;
        let explanation = entry.explanation.as_deref().map(str::trim).filter(|s| !s.is_empty());
        let exclude = entry.exclude.as_deref().map(str::trim).filter(|s| !s.is_empty());
        match (explanation, exclude) {
            (Some(text), None) => next.caption_residual(&entry.image_id, text),
            (None, Some(reason)) => next.exclude_residual(&entry.image_id, reason),
            _ => {
                return Err(CliError::Validation(format!(
                    "{}: give exactly one of `explanation` or `exclude` for {}",
                    at(),
                    entry.image_id
                )))
            }
        }
        .map_err(|e| match CliError::from(e) {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", at())),
            other => other,
        })?;
    }
    next.finalize()?;
    Ok(next)
}

fn write_residual_template(path: &Path, state: &RunState) -> Result<(), CliError> {
    let truth = state.subset.ground_truth();
    let mut text = String::new();
    for image in state.apt.active_set() {
        let line = ResidualLine {
            image_id: image.image_id.clone(),
            label: truth.get(&image.image_id).map(ClassLabel::to_string),
            explanation: Some(String::new()),
            exclude: None,
        };
        text.push_str(&serde_json::to_string(&line).expect("residual line serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes()).map_err(|e| io_error(path, e))
}

fn tune(config: &RunConfig, residuals: Option<&Path>) -> Result<(), CliError> {
    let manifest = manifest(config)?;
    let dir = RunDir::open(config)?;
    let run_id = config.run_id()?;
    let state_path = dir.run_state();
    let mut state = match dir.load_state(&run_id)? {
        Some(s) => s,
        None => init_run(config, &manifest, &dir, &run_id)?,
    };

    if let Some(path) = residuals {
        if state.apt.is_finalized() {
            return Err(CliError::StateOrder("prompt set already finalized".into()));
        }
        state.apt = apply_residuals(&state.apt, path)?;
        state.save(&state_path)?;
    }

    let store = ImageStore::new(manifest.root.clone());
    let mut driver: Option<(tokio::runtime::Runtime, Gateway)> = None;
    loop {
        let apt = &state.apt;
        if apt.is_finalized() {
            println!(
                "prompt set finalized: {} pairs, {} excluded; next: `apt infer`",
                apt.prompt_set().len(),
                apt.excluded().len()
            );
            return Ok(());
        }
        let pending = apt.pending_count();
        if pending > 0 {
            println!("round {}: {pending} review(s) pending", apt.round());
            println!("review at {} (start the service with `apt review-serve`)", review_url(config, &run_id));
            return Ok(());
        }
        if apt.active_set().is_empty() {
            state.apt.finalize()?;
            state.save(&state_path)?;
            continue;
        }
        if apt.round() >= apt.round_cap() {
            let template = dir.file("residuals.jsonl");
            if !template.exists() {
                write_residual_template(&template, &state)?;
            }
            let ids: Vec<&str> = apt.active_set().iter().map(|i| i.image_id.as_str()).collect();
            println!("round cap {} reached; {} image(s) never classified correctly:", apt.round_cap(), ids.len());
            for id in &ids {
                println!("  {id}");
            }
            println!(
                "caption each one (or set \"exclude\" to a reason) in {} and run `apt tune --residuals {}`",
                template.display(),
                template.display()
            );
            return Ok(());
        }

        if driver.is_none() {
            driver = Some((runtime(config)?, gateway(config)?));
        }
        let (rt, gw) = driver.as_ref().expect("set above");
        let ctx = RoundContext {
            gateway: gw,
            store: &store,
            system_prompt: &state.system_prompt,
            classes: &manifest.study.classes,
            batch_size: Some(config.batch_size),
            request_prefix: &run_id,
        };
        let outcome = rt.block_on(run_round(&mut state.apt, &ctx));
        state.save(&state_path)?;
        let summary = outcome?;
        println!(
            "round {}: {} pending, {} auto-rejected, {} failed",
            summary.round, summary.pending, summary.auto_rejected, summary.failed
        );
    }
}

fn review_serve(config: &RunConfig) -> Result<(), CliError> {
    let manifest = manifest(config)?;
    let dir = RunDir::open(config)?;
    let run_id = config.run_id()?;
    if dir.load_state(&run_id)?.is_none() {
        return Err(CliError::StateOrder("no tuning run yet; start one with `apt tune`".into()));
    }
    let addr: SocketAddr = config
        .review
        .bind
        .parse()
        .map_err(|e| CliError::Validation(format!("review bind address {:?}: {e}", config.review.bind)))?;
    let token = std::env::var(&config.review.token_env).ok().filter(|t| !t.is_empty());
    let service = ReviewService::open(ServiceConfig {
        run_state_path: dir.run_state(),
        manifest,
        gateway: gateway(config)?,
        batch_size: config.review.batch_size,
        token,
        reviewer: config.review.reviewer.clone(),
    })?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Other(format!("cannot start runtime: {e}")))?;
    rt.block_on(async {
        let listener = apt_review::bind(&service, addr).await.map_err(serve_error)?;
        let local = listener.local_addr().map_err(|e| CliError::Other(e.to_string()))?;
        println!("review service listening on http://{local}/runs/{run_id}/pending");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        apt_review::serve_on(Arc::new(service), listener, shutdown)
            .await
            .map_err(serve_error)
    })
}

fn serve_error(e: ServeError) -> CliError {
    match e {
        ServeError::OpenBind(_) => CliError::Validation(e.to_string()),
        _ => CliError::Other(e.to_string()),
    }
}

fn finalized_state(dir: &RunDir, run_id: &str) -> Result<RunState, CliError> {
    match dir.load_state(run_id)? {
        Some(s) if s.apt.is_finalized() => Ok(s),
        Some(_) => Err(CliError::StateOrder(
            "prompt set not finalized; finish tuning with `apt tune` first".into(),
        )),
        None => Err(CliError::StateOrder(
            "prompt set not finalized: no tuning run yet, start one with `apt tune`".into(),
        )),
    }
}

fn infer(config: &RunConfig, force: bool, stop_after: Option<usize>) -> Result<(), CliError> {
    let manifest = manifest(config)?;
    let dir = RunDir::open(config)?;
    let run_id = config.run_id()?;
    let state = finalized_state(&dir, &run_id)?;
    let plan = plan_batches(&manifest, config.batch_size)?;
    let results_path = dir.file("results.jsonl");
    let progress_path = dir.file("progress.jsonl");
    if force {
        for path in [&results_path, &progress_path] {
            match std::fs::remove_file(path) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(io_error(path, e)),
                _ => {}
            }
        }
    }
    let gateway = gateway(config)?;
    let store = ImageStore::new(manifest.root.clone());
    let job = InferenceJob {
        run_id: &run_id,
        state: &state.apt,
        system_prompt: &state.system_prompt,
        system_prompt_version: &state.system_prompt_version,
        classes: &manifest.study.classes,
        store: &store,
        gateway: &gateway,
        plan: &plan,
        results_path: &results_path,
        progress_path: &progress_path,
    };
    let cancel = Arc::new(AtomicBool::new(false));
    let control = InferenceControl {
        stop_after,
        cancel: Some(cancel.clone()),
    };
    let summary = runtime(config)?.block_on(async {
        let flag = cancel.clone();
        tokio::spawn(async move {
            if tokio::signal::ctrl_c().await.is_ok() {
                eprintln!("interrupt received; stopping after the current batches");
                flag.store(true, Ordering::SeqCst);
            }
        });
        run_inference(&job, &control, |p| {
            eprintln!("batch {}/{} done, {} failure(s) so far", p.batches_done, p.batches_total, p.failures);
        })
        .await
    })?;

    if summary.is_complete() && summary.batches_sent == 0 {
        println!(
            "results already complete in {} ({} batches); pass --force to redo",
            results_path.display(),
            summary.batches_total
        );
    } else if summary.is_complete() {
        println!(
            "inference complete: {} verdicts, {} failures, {} re-asked; results in {}",
            summary.verdicts,
            summary.failures,
            summary.reasked,
            results_path.display()
        );
    } else {
        println!(
            "stopped after {}/{} batches; rerun `apt infer` to resume",
            summary.batches_done, summary.batches_total
        );
    }
    Ok(())
}

fn report(config: &RunConfig) -> Result<(), CliError> {
    let manifest = manifest(config)?;
    let dir = RunDir::open(config)?;
    let run_id = config.run_id()?;
    let state = finalized_state(&dir, &run_id)?;
    let results_path = dir.file("results.jsonl");
    if !results_path.exists() {
        return Err(CliError::StateOrder(format!(
            "no results at {}; run `apt infer` first",
            results_path.display()
        )));
    }
    let results = ResultsFile::read(&results_path).map_err(|e| CliError::Other(e.to_string()))?;
    if results.header.run_id != run_id || results.header.prompt_set_version != state.apt.prompt_set().version() {
        return Err(CliError::StateOrder(format!(
            "{} was produced by a different run or prompt set; rerun `apt infer --force`",
            results_path.display()
        )));
    }
    let tallies = tally_predictions(&results, &manifest)?;
    let timing = config
        .timing
        .as_ref()
        .map(|t| Timing::new(t.baseline_minutes, t.method_minutes))
        .transpose()?;
    let report = StudyReport::new(tallies, state.apt.prompt_set().len(), timing)?;
    let text = render_report(&report)?;
    print!("{text}");
    let txt = dir.file("report.txt");
    write_atomic(&txt, text.as_bytes()).map_err(|e| io_error(&txt, e))?;
    let json = dir.file("report.json");
    report.write_json(&json).map_err(|e| io_error(&json, e))?;
    let unparsed: usize = report.tallies.iter().map(|t| t.unparsed).sum();
    if unparsed > 0 {
        let animals: BTreeSet<&str> = report
            .tallies
            .iter()
            .filter(|t| t.unparsed > 0)
            .map(|t| t.animal_id.as_str())
            .collect();
        eprintln!("note: {unparsed} image(s) had no usable verdict ({} animal(s))", animals.len());
    }
    Ok(())
}
