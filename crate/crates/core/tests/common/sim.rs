//! Seeded generators and checkers shared by the property tests and the
//! acceptance runner. Every checker returns `Err(description)` on the first
//! violation so callers can either assert or print it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use apt_core::dataset::ImageRecord;
use apt_core::engine::{run_round, AptError, AptState, Event, ReviewDecision, ReviewStatus, RoundContext};
use apt_core::fixtures::TINY_PNG;
use apt_core::gateway::{
    Gateway, Matcher, ProviderError, RateLimitPolicy, Reply, ScriptEntry, ScriptedFailure, ScriptedProvider,
    VlmProvider,
};
use apt_core::label::{ClassLabel, ClassSet};
use apt_core::parser::{parse_batch_response, parse_verdict, render_verdict, FailureKind, ModelVerdict};
use apt_core::payload::{ImagePayload, ImageStore};
use apt_core::prompt::{Caption, ImageCaptionPair, Provenance, QueryImage, VlmRequest};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn classes() -> ClassSet {
    ClassSet::new(["Lurcher", "Wild"]).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn paused_runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_time()
        .start_paused(true)
        .build()
        .unwrap()
}

// ---------------------------------------------------------------- parser

const ID_CHARS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789_.-";

const WORDS: &[&str] = &[
    "Purkinje", "cells", "are", "sparse", "dense", "granule", "layer", "molecular", "thin",
    "intact", "(10x)", "40µm", "naïve", "Größe", "cerebellar", "folia", "normal,", "reduced;",
    "clear", "«lobule»", "ectopic", "soma", "dendrites", "50%", "x/y", "Ø", "layer-wise",
    "\"quoted\"", "cellularity", "Crus", "I/II", "vermis", "neurons", "loss",
];

pub fn gen_id(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..=20);
    (0..len)
        .map(|_| ID_CHARS[rng.random_range(0..ID_CHARS.len())] as char)
        .collect()
}

fn gen_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..=9);
    let words: Vec<&str> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
    let end = [".", "!", "?"][rng.random_range(0..3)];
    format!("{}{end}", words.join(" "))
}

/// One to three sentences on one line, or occasionally split over two lines.
pub fn gen_explanation(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=3);
    let sentences: Vec<String> = (0..n).map(|_| gen_sentence(rng)).collect();
    if n > 1 && rng.random_bool(0.2) {
        let split = rng.random_range(1..n);
        format!("{}\n{}", sentences[..split].join(" "), sentences[split..].join(" "))
    } else {
        sentences.join(" ")
    }
}

pub fn gen_verdict(rng: &mut ChaCha8Rng, image_id: String) -> ModelVerdict {
    let label = classes().labels()[rng.random_range(0..2)].clone();
    ModelVerdict {
        image_id,
        label,
        explanation: gen_explanation(rng),
    }
}

fn random_case(rng: &mut ChaCha8Rng, s: &str) -> String {
    match rng.random_range(0..3) {
        0 => s.to_uppercase(),
        1 => s.to_lowercase(),
        _ => s
            .chars()
            .map(|c| if rng.random_bool(0.5) { c.to_ascii_uppercase() } else { c.to_ascii_lowercase() })
            .collect(),
    }
}

fn pad(rng: &mut ChaCha8Rng) -> &'static str {
    ["", " ", "  ", "\t"][rng.random_range(0..4)]
}

/// Same content as `render_verdict` with random key/class case and spacing.
pub fn render_noisy(rng: &mut ChaCha8Rng, v: &ModelVerdict) -> String {
    fn line(rng: &mut ChaCha8Rng, key: &str, value: &str) -> String {
        format!("{}{}{}:{}{}{}", pad(rng), random_case(rng, key), pad(rng), pad(rng), value, pad(rng))
    }
    let image = line(rng, "image", &v.image_id);
    let label = random_case(rng, v.label.as_str());
    let class = line(rng, "classification", &label);
    let explanation = line(rng, "explanation", &v.explanation);
    format!("{image}\n{class}\n{explanation}")
}

pub fn check_round_trip(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let classes = classes();
    let id = gen_id(&mut rng);
    let verdict = gen_verdict(&mut rng, id);
    let plain = render_verdict(&verdict);
    let parsed = parse_verdict(&plain, &classes).map_err(|e| format!("seed {seed}: {e} on {plain:?}"))?;
    if parsed != verdict {
        return Err(format!("seed {seed}: {parsed:?} != {verdict:?}"));
    }
    let noisy = render_noisy(&mut rng, &verdict);
    let parsed = parse_verdict(&noisy, &classes).map_err(|e| format!("seed {seed}: {e} on {noisy:?}"))?;
    if parsed != verdict {
        return Err(format!("seed {seed}: noisy {parsed:?} != {verdict:?}"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
enum Expect {
    Verdict(ModelVerdict),
    UnknownClass,
    Malformed,
    MissingExplanation,
    /// Damaged by truncation; any per-image failure or verdict is allowed.
    Anything,
}

#[derive(Debug, Clone)]
struct Block {
    id: String,
    text: String,
    expect: Expect,
}

fn prefix_free(ids: &[String]) -> bool {
    ids.iter()
        .all(|a| ids.iter().all(|b| a == b || !b.starts_with(a.as_str())))
}

/// Independent oracle: counts lines whose text before the first colon is
/// the word IMAGE and whose value is `id`.
fn header_count(raw: &str, id: &str) -> usize {
    raw.lines()
        .filter(|line| match line.find(':') {
            Some(i) => line[..i].trim().eq_ignore_ascii_case("image") && line[i + 1..].trim() == id,
            None => false,
        })
        .count()
}

/// Builds a batch response for random ids, damages it, and checks that the
/// parser maps every expected id to exactly one outcome that agrees with the
/// oracle.
pub fn check_mutilated_batch(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let classes = classes();
    let n = rng.random_range(1..=8);
    let ids: Vec<String> = loop {
        let ids: Vec<String> = (0..n).map(|_| gen_id(&mut rng)).collect();
        let unique: BTreeSet<&String> = ids.iter().collect();
        if unique.len() == n && prefix_free(&ids) {
            break ids;
        }
    };

    let mut blocks: Vec<Block> = ids
        .iter()
        .map(|id| {
            let v = gen_verdict(&mut rng, id.clone());
            Block {
                id: id.clone(),
                text: render_noisy(&mut rng, &v),
                expect: Expect::Verdict(v),
            }
        })
        .collect();
    let mut preamble = String::new();
    let mut ops = Vec::new();

    for _ in 0..rng.random_range(0..=3) {
        let op = rng.random_range(0..8);
        ops.push(op);
        if blocks.is_empty() {
            continue;
        }
        let i = rng.random_range(0..blocks.len());
        let pristine = matches!(blocks[i].expect, Expect::Verdict(_));
        match op {
            2..=4 if !pristine => {}
            0 => {
                blocks.remove(i);
            }
            1 => {
                let copy = blocks[i].clone();
                blocks.insert(rng.random_range(0..=blocks.len()), copy);
            }
            2 => {
                let b = &mut blocks[i];
                let lines: Vec<&str> = b.text.lines().collect();
                b.text = format!("{}\nCLASSIFICATION: Heterozygous\n{}", lines[0], lines[2..].join("\n"));
                b.expect = Expect::UnknownClass;
            }
            3 => {
                let b = &mut blocks[i];
                let lines: Vec<&str> = b.text.lines().collect();
                b.text = format!("{}\n{}\nthe model adds a stray remark\n{}", lines[0], lines[1], lines[2..].join("\n"));
                b.expect = Expect::Malformed;
            }
            4 => {
                let b = &mut blocks[i];
                let lines: Vec<&str> = b.text.lines().collect();
                b.text = format!("{}\n{}", lines[0], lines[1]);
                b.expect = Expect::MissingExplanation;
            }
            5 => {
                // '~' is outside the id alphabet, so no prefix clashes.
                let stranger = format!("~{}", gen_id(&mut rng));
                let v = gen_verdict(&mut rng, stranger.clone());
                blocks.insert(
                    i,
                    Block {
                        id: stranger,
                        text: render_verdict(&v),
                        expect: Expect::Verdict(v),
                    },
                );
            }
            6 => blocks.shuffle(&mut rng),
            _ => preamble = "Here are my answers for the requested images".to_string(),
        }
    }

    let separator = "\n\n";
    let mut raw = String::new();
    if !preamble.is_empty() {
        raw.push_str(&preamble);
        raw.push_str(separator);
    }
    let mut spans = Vec::new();
    for (k, b) in blocks.iter().enumerate() {
        if k > 0 {
            raw.push_str(separator);
        }
        let start = raw.len();
        raw.push_str(&b.text);
        spans.push((start, raw.len()));
    }
    if rng.random_bool(0.25) && !raw.is_empty() {
        let boundaries: Vec<usize> = raw.char_indices().map(|(i, _)| i).collect();
        let cut = boundaries[rng.random_range(0..boundaries.len())];
        raw.truncate(cut);
        ops.push(9);
        let mut kept: Vec<Block> = Vec::new();
        for (b, (start, end)) in blocks.into_iter().zip(spans) {
            if end <= cut {
                kept.push(b);
            } else if start < cut {
                // A partial header line would read as a continuation of the
                // previous explanation.
                if let Some(prev) = kept.last_mut() {
                    prev.expect = Expect::Anything;
                }
                kept.push(Block {
                    expect: Expect::Anything,
                    ..b
                });
            }
        }
        blocks = kept;
    }

    let parse = parse_batch_response(&raw, &ids, &classes);
    let ctx = || format!("seed {seed} ops {ops:?} raw {raw:?}");
    if parse.outcomes.len() != ids.len() {
        return Err(format!("{} outcomes for {} ids; {}", parse.outcomes.len(), ids.len(), ctx()));
    }
    for ((got_id, outcome), id) in parse.outcomes.iter().zip(&ids) {
        if got_id != id {
            return Err(format!("outcome order {got_id} vs {id}; {}", ctx()));
        }
        let count = header_count(&raw, id);
        let surviving: Vec<&Block> = blocks.iter().filter(|b| &b.id == id).collect();
        // A truncated header may lose its id entirely; otherwise the text and
        // the block list agree.
        let complete = surviving
            .iter()
            .filter(|b| b.expect != Expect::Anything)
            .count();
        if count < complete || count > surviving.len() {
            return Err(format!("oracle disagrees with generator for {id}; {}", ctx()));
        }
        let kind = outcome.as_ref().err().map(|f| &f.kind);
        match count {
            0 => {
                if kind != Some(&FailureKind::MissingVerdict) {
                    return Err(format!("{id}: expected missing, got {outcome:?}; {}", ctx()));
                }
            }
            1 => {
                if matches!(kind, Some(FailureKind::MissingVerdict | FailureKind::Duplicate)) {
                    return Err(format!("{id}: one block but {outcome:?}; {}", ctx()));
                }
                let expect = if surviving.len() == 1 { &surviving[0].expect } else { &Expect::Anything };
                let ok = match (expect, outcome) {
                    (Expect::Verdict(v), Ok(got)) => got == v,
                    (Expect::UnknownClass, Err(f)) => matches!(f.kind, FailureKind::UnknownClass(_)),
                    (Expect::Malformed, Err(f)) => matches!(f.kind, FailureKind::Malformed(_)),
                    (Expect::MissingExplanation, Err(f)) => {
                        f.kind == FailureKind::MissingField("EXPLANATION".into())
                    }
                    (Expect::Anything, _) => true,
                    _ => false,
                };
                if !ok {
                    return Err(format!("{id}: expected {expect:?}, got {outcome:?}; {}", ctx()));
                }
            }
            _ => {
                if kind != Some(&FailureKind::Duplicate) {
                    return Err(format!("{id}: {count} blocks but {outcome:?}; {}", ctx()));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- rate limit

fn bare_request(id: &str) -> VlmRequest {
    let image = Arc::new(ImagePayload::from_bytes(&TINY_PNG).unwrap());
    VlmRequest {
        request_id: id.to_string(),
        system: "S".into(),
        context_pairs: vec![],
        queries: vec![QueryImage {
            image_id: id.to_string(),
            image,
            text: format!("Query image id: {id}"),
        }],
    }
}

/// Tracks how many provider calls overlap.
struct Counting {
    inner: ScriptedProvider,
    live: AtomicUsize,
    peak: AtomicUsize,
}

#[async_trait::async_trait]
impl VlmProvider for Counting {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    async fn complete(&self, request: &VlmRequest) -> Result<String, ProviderError> {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let result = self.inner.complete(request).await;
        self.live.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

/// Random policy, request count, latencies and transient failures on the
/// virtual clock. Checks the window bound, the concurrency bound and that
/// responses come back in request order.
pub fn check_rate_limit_trial(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let policy = RateLimitPolicy {
        max_requests_per_window: rng.random_range(1..=4),
        window: Duration::from_secs(rng.random_range(1..=120)),
        max_concurrent: rng.random_range(1..=3),
        retry_max: rng.random_range(0..=2),
        backoff_base: Duration::from_millis(rng.random_range(0..=3000)),
    };
    let n = rng.random_range(1..=12);
    let ids: Vec<String> = (0..n).map(|i| format!("req{i:02}")).collect();
    let mut script = Vec::new();
    for id in &ids {
        if rng.random_bool(0.2) {
            script.push(ScriptEntry::once(
                Matcher::QueryImage(id.clone()),
                Reply::Fail(ScriptedFailure::Throttle),
            ));
        }
        let latency = Duration::from_millis(rng.random_range(0..=90_000));
        script.push(
            ScriptEntry::once(Matcher::QueryImage(id.clone()), Reply::Text(format!("answer {id}")))
                .with_latency(latency),
        );
    }
    let provider = Arc::new(Counting {
        inner: ScriptedProvider::new("scripted", script).unwrap(),
        live: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
    });
    let gateway = Gateway::with_seed(provider.clone(), policy.clone(), seed).unwrap();
    let requests: Vec<VlmRequest> = ids.iter().map(|id| bare_request(id)).collect();
    let responses = paused_runtime().block_on(gateway.dispatch_batch(&requests));

    let ctx = || format!("seed {seed} policy {policy:?} n {n}");
    if responses.len() != n {
        return Err(format!("{} responses; {}", responses.len(), ctx()));
    }
    for (id, response) in ids.iter().zip(&responses) {
        match response {
            Ok(r) if r.request_id == *id && r.raw_text == format!("answer {id}") => {}
            Ok(r) => return Err(format!("slot {id} got {}; {}", r.request_id, ctx())),
            Err(e) if policy.retry_max == 0 => {
                if !matches!(e, apt_core::gateway::GatewayError::Exhausted { attempts: 1, .. }) {
                    return Err(format!("slot {id}: {e}; {}", ctx()));
                }
            }
            Err(e) => return Err(format!("slot {id}: {e}; {}", ctx())),
        }
    }

    let attempts = gateway.attempts();
    for a in &attempts {
        let in_window = attempts
            .iter()
            .filter(|b| b.started >= a.started && b.started < a.started + policy.window)
            .count();
        if in_window > policy.max_requests_per_window as usize {
            return Err(format!("{in_window} starts within one window from {:?}; {}", a.started, ctx()));
        }
    }
    let peak = provider.peak.load(Ordering::SeqCst);
    if peak > policy.max_concurrent as usize {
        return Err(format!("{peak} calls in flight at once; {}", ctx()));
    }
    Ok(())
}

// ---------------------------------------------------------------- APT

fn lurcher() -> ClassLabel {
    ClassLabel::new_unchecked("Lurcher")
}

fn wild() -> ClassLabel {
    ClassLabel::new_unchecked("Wild")
}

fn other(label: &ClassLabel) -> ClassLabel {
    if *label == lurcher() {
        wild()
    } else {
        lurcher()
    }
}

pub fn sim_image(id: &str) -> ImageRecord {
    ImageRecord {
        image_id: id.into(),
        animal_id: format!("A{}", &id[..2]),
        file_path: format!("{id}.png").into(),
        magnification: "10x".into(),
        stain: "cresyl violet".into(),
    }
}

fn expert_pair(id: &str, label: ClassLabel) -> ImageCaptionPair {
    ImageCaptionPair {
        image: sim_image(id),
        caption: Caption::new(label, format!("Expert caption for {id}."), Provenance::ExpertAuthored).unwrap(),
        verified: true,
    }
}

/// Writes a tiny image for every id the simulations can use.
pub fn image_dir(max_images: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..max_images {
        std::fs::write(dir.path().join(format!("{}.png", sim_id(i))), TINY_PNG).unwrap();
    }
    dir
}

fn sim_id(i: usize) -> String {
    format!("{i:02}img")
}

struct Setup {
    initial: Vec<ImageCaptionPair>,
    active: Vec<ImageRecord>,
    truth: HashMap<String, ClassLabel>,
    universe: BTreeSet<String>,
    cap: u32,
}

fn setup(n_initial: usize, n_active: usize, cap: u32, rng: &mut ChaCha8Rng) -> Setup {
    let mut truth = HashMap::new();
    let mut universe = BTreeSet::new();
    let mut initial = Vec::new();
    let mut active = Vec::new();
    for i in 0..n_initial + n_active {
        let id = sim_id(i);
        let label = if rng.random_bool(0.5) { lurcher() } else { wild() };
        universe.insert(id.clone());
        if i < n_initial {
            initial.push(expert_pair(&id, label));
        } else {
            truth.insert(id.clone(), label);
            active.push(sim_image(&id));
        }
    }
    Setup {
        initial,
        active,
        truth,
        universe,
        cap,
    }
}

fn events(state: &AptState) -> Vec<Event> {
    state.history().iter().map(|h| h.event.clone()).collect()
}

/// Checks the invariants that must hold between any two observed states.
fn check_step(before: &AptState, after: &AptState, universe: &BTreeSet<String>) -> Result<(), String> {
    after.check_invariants(universe)?;
    let old: Vec<&str> = before.prompt_set().image_ids().collect();
    let new: Vec<&str> = after.prompt_set().image_ids().collect();
    if new.len() < old.len() || new[..old.len()] != old[..] {
        return Err("prompt set shrank or reordered".into());
    }
    if after.prompt_set().pairs()[..old.len()] != before.prompt_set().pairs()[..] {
        return Err("existing prompt pair changed".into());
    }
    if after.history().len() < before.history().len()
        || after.history()[..before.history().len()] != before.history()[..]
    {
        return Err("history is not append-only".into());
    }
    if after.round() < before.round() || after.round() > after.round_cap() {
        return Err(format!("round went {} -> {}", before.round(), after.round()));
    }
    Ok(())
}

fn check_replay(setup: &Setup, state: &AptState) -> Result<(), String> {
    let replayed = AptState::replay(
        setup.initial.clone(),
        setup.active.clone(),
        &setup.truth,
        setup.cap,
        &events(state),
    )
    .map_err(|e| format!("replay failed: {e}"))?;
    if replayed.prompt_set() != state.prompt_set()
        || replayed.active_set() != state.active_set()
        || replayed.excluded() != state.excluded()
        || replayed.round() != state.round()
        || events(&replayed) != events(state)
    {
        return Err("replay diverged".into());
    }
    Ok(())
}

fn finish_residuals(state: &mut AptState, rng: &mut ChaCha8Rng, universe: &BTreeSet<String>) -> Result<(), String> {
    let residual: Vec<String> = state.active_set().iter().map(|i| i.image_id.clone()).collect();
    for id in residual {
        let before = state.clone();
        if rng.random_bool(0.5) {
            state
                .caption_residual(&id, "Expert wrote this one. It shows the class features.")
                .map_err(|e| format!("caption residual {id}: {e}"))?;
        } else {
            state
                .exclude_residual(&id, "ambiguous section")
                .map_err(|e| format!("exclude residual {id}: {e}"))?;
        }
        check_step(&before, state, universe)?;
    }
    Ok(())
}

fn check_final(state: &mut AptState, setup: &Setup) -> Result<(), String> {
    let before = state.clone();
    let (effective, residual) = state.finalize().map_err(|e| format!("finalize: {e}"))?;
    check_step(&before, state, &setup.universe)?;
    let mut covered: BTreeSet<String> = effective.image_ids().map(str::to_string).collect();
    covered.extend(residual.iter().map(|i| i.image_id.clone()));
    if covered != setup.universe || effective.len() + residual.len() != setup.universe.len() {
        return Err("final effective and residual sets do not partition the images".into());
    }
    for pair in effective.pairs().iter().skip(setup.initial.len()) {
        if setup.truth[&pair.image.image_id] != pair.caption.label {
            return Err(format!("promoted pair {} carries the wrong class", pair.image.image_id));
        }
    }
    match state.finalize() {
        Ok((again, _)) if again == effective => {}
        other => return Err(format!("second finalize differs: {other:?}")),
    }
    if !state.is_finalized() || state.ensure_round_ready().is_ok() {
        return Err("finalized state still accepts rounds".into());
    }
    Ok(())
}

/// One randomized run through `run_round` with a scripted model that answers
/// each image correctly, incorrectly, or not at all.
pub async fn apt_random_run(seed: u64, store: &ImageStore, max_images: usize) -> Result<(), String> {
    let mut rng = rng(seed);
    let n_initial = rng.random_range(1..=max_images.min(18));
    let n_active = rng.random_range(0..=max_images - n_initial);
    let cap = rng.random_range(1..=5);
    let setup = setup(n_initial, n_active, cap, &mut rng);
    let classes = classes();
    let mut state = AptState::init(setup.initial.clone(), setup.active.clone(), &setup.truth, cap)
        .map_err(|e| format!("seed {seed}: init {e}"))?;
    state.check_invariants(&setup.universe).map_err(|e| format!("seed {seed}: {e}"))?;
    let policy = RateLimitPolicy {
        max_requests_per_window: 1000,
        retry_max: 0,
        ..RateLimitPolicy::default()
    };
    let p_correct = rng.random_range(0.0..1.0);

    let mut steps = 0;
    while !state.active_set().is_empty() && state.round() < cap {
        steps += 1;
        if steps > 4 * cap as usize {
            return Err(format!("seed {seed}: no progress after {steps} attempts"));
        }
        let mut answers = BTreeMap::new();
        let mut expect_correct = BTreeSet::new();
        let mut expect_failed = BTreeSet::new();
        for image in state.active_set() {
            let truth = &setup.truth[&image.image_id];
            let roll: f64 = rng.random_range(0.0..1.0);
            if roll < 0.1 {
                expect_failed.insert(image.image_id.clone());
            } else if roll < 0.1 + 0.9 * p_correct {
                answers.insert(image.image_id.clone(), truth.to_string());
                expect_correct.insert(image.image_id.clone());
            } else {
                answers.insert(image.image_id.clone(), other(truth).to_string());
            }
        }
        let outage = rng.random_bool(0.05);
        let reply = if outage {
            Reply::Fail(ScriptedFailure::Server)
        } else {
            Reply::Labels(answers)
        };
        let provider = Arc::new(
            ScriptedProvider::new("scripted", vec![ScriptEntry::always(Matcher::Any, reply)]).unwrap(),
        );
        let gateway = Gateway::new(provider, policy.clone()).unwrap();
        let ctx = RoundContext {
            gateway: &gateway,
            store,
            system_prompt: "Classify each query image.",
            classes: &classes,
            batch_size: Some(rng.random_range(1..=12)),
            request_prefix: "sim",
        };
        let before = state.clone();
        match run_round(&mut state, &ctx).await {
            Ok(summary) => {
                let pending: BTreeSet<String> = state.pending().map(|r| r.image.image_id.clone()).collect();
                if pending != expect_correct || summary.failed != expect_failed.len() {
                    return Err(format!("seed {seed}: round {} pending {pending:?} expected {expect_correct:?}", summary.round));
                }
                if state.reviews().iter().any(|r| !r.correct && r.status != ReviewStatus::Rejected) {
                    return Err(format!("seed {seed}: incorrect item left pending"));
                }
            }
            Err(AptError::GatewayFailure(_)) if outage => {
                if state.round() != before.round() || state.active_set() != before.active_set() {
                    return Err(format!("seed {seed}: failed round changed state"));
                }
            }
            Err(e) => return Err(format!("seed {seed}: round failed: {e}")),
        }
        check_step(&before, &state, &setup.universe).map_err(|e| format!("seed {seed}: {e}"))?;

        let pending: Vec<String> = state.pending().map(|r| r.image.image_id.clone()).collect();
        for id in pending {
            let before = state.clone();
            let decision = match rng.random_range(0..3) {
                0 => ReviewDecision::Accept,
                1 => ReviewDecision::Edit {
                    explanation: "Expert revised this caption.".into(),
                },
                _ => ReviewDecision::Reject,
            };
            let promotes = !matches!(decision, ReviewDecision::Reject);
            state
                .apply_review(&id, decision.clone())
                .map_err(|e| format!("seed {seed}: review {id}: {e}"))?;
            check_step(&before, &state, &setup.universe).map_err(|e| format!("seed {seed}: {e}"))?;
            if state.prompt_set().contains(&id) != promotes {
                return Err(format!("seed {seed}: {decision:?} on {id} misapplied"));
            }
            if state.apply_review(&id, ReviewDecision::Accept).is_ok() {
                return Err(format!("seed {seed}: {id} decided twice"));
            }
        }
    }
    if state.round() > cap {
        return Err(format!("seed {seed}: exceeded round cap"));
    }
    if !state.active_set().is_empty() {
        if !matches!(state.ensure_round_ready(), Err(AptError::RoundCapReached { .. })) {
            return Err(format!("seed {seed}: round cap not enforced"));
        }
        finish_residuals(&mut state, &mut rng, &setup.universe).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    check_final(&mut state, &setup).map_err(|e| format!("seed {seed}: {e}"))?;
    check_replay(&setup, &state).map_err(|e| format!("seed {seed}: {e}"))
}

/// Runs `count` random APT runs starting at `first_seed` on a paused clock.
pub fn apt_random_runs(first_seed: u64, count: u64) -> Result<(), String> {
    const MAX_IMAGES: usize = 36;
    let dir = image_dir(MAX_IMAGES);
    let store = ImageStore::new(dir.path());
    paused_runtime().block_on(async {
        for seed in first_seed..first_seed + count {
            apt_random_run(seed, &store, MAX_IMAGES).await?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Copy)]
enum Fate {
    Incorrect,
    Accept,
    Reject,
}

const FATES: [Fate; 3] = [Fate::Incorrect, Fate::Accept, Fate::Reject];

struct Enumeration<'a> {
    setup: &'a Setup,
    leaves: usize,
}

impl Enumeration<'_> {
    fn explore(&mut self, state: &AptState, accepted: usize) -> Result<(), String> {
        if state.active_set().is_empty() || state.round() == state.round_cap() {
            return self.leaf(state, accepted);
        }
        let active: Vec<String> = state.active_set().iter().map(|i| i.image_id.clone()).collect();
        let combos = 3usize.pow(active.len() as u32);
        for code in 0..combos {
            let fates: Vec<Fate> = (0..active.len())
                .map(|k| FATES[(code / 3usize.pow(k as u32)) % 3])
                .collect();
            let mut next = state.clone();
            let outcomes = active
                .iter()
                .zip(&fates)
                .map(|(id, fate)| {
                    let truth = &self.setup.truth[id];
                    let label = match fate {
                        Fate::Incorrect => other(truth),
                        _ => truth.clone(),
                    };
                    (
                        id.clone(),
                        Ok(ModelVerdict {
                            image_id: id.clone(),
                            label,
                            explanation: format!("Model view of {id}."),
                        }),
                    )
                })
                .collect();
            next.record_round(outcomes).map_err(|e| e.to_string())?;
            check_step(state, &next, &self.setup.universe)?;
            let mut promoted = 0;
            for (id, fate) in active.iter().zip(&fates) {
                let before = next.clone();
                match fate {
                    Fate::Incorrect => {
                        if next.apply_review(id, ReviewDecision::Accept).is_ok() {
                            return Err(format!("incorrect {id} was promoted"));
                        }
                        continue;
                    }
                    Fate::Accept => {
                        next.apply_review(id, ReviewDecision::Accept).map_err(|e| e.to_string())?;
                        promoted += 1;
                    }
                    Fate::Reject => next.apply_review(id, ReviewDecision::Reject).map_err(|e| e.to_string())?,
                }
                check_step(&before, &next, &self.setup.universe)?;
            }
            if next.active_set().len() != active.len() - promoted {
                return Err("active set size disagrees with accepted count".into());
            }
            self.explore(&next, accepted + promoted)?;
        }
        Ok(())
    }

    fn leaf(&mut self, state: &AptState, accepted: usize) -> Result<(), String> {
        self.leaves += 1;
        let mut state = state.clone();
        if state.prompt_set().len() != self.setup.initial.len() + accepted {
            return Err("prompt set size disagrees with accepted count".into());
        }
        let residual: Vec<String> = state.active_set().iter().map(|i| i.image_id.clone()).collect();
        for (k, id) in residual.iter().enumerate() {
            let before = state.clone();
            if (self.leaves + k).is_multiple_of(2) {
                state
                    .caption_residual(id, "Expert caption for a residual image.")
                    .map_err(|e| e.to_string())?;
            } else {
                state.exclude_residual(id, "excluded").map_err(|e| e.to_string())?;
            }
            check_step(&before, &state, &self.setup.universe)?;
        }
        check_final(&mut state, self.setup)?;
        if self.leaves.is_multiple_of(97) {
            check_replay(self.setup, &state)?;
        }
        Ok(())
    }
}

/// Every outcome sequence for up to `max_images` active images and up to
/// `max_rounds` rounds. Returns the number of terminal paths checked.
pub fn apt_exhaustive(max_images: usize, max_rounds: u32) -> Result<usize, String> {
    let mut total = 0;
    let mut rng = rng(0);
    for n in 1..=max_images {
        for cap in 1..=max_rounds {
            let setup = setup(2, n, cap, &mut rng);
            let state = AptState::init(setup.initial.clone(), setup.active.clone(), &setup.truth, cap)
                .map_err(|e| e.to_string())?;
            let mut walk = Enumeration { setup: &setup, leaves: 0 };
            walk.explore(&state, 0)
                .map_err(|e| format!("{n} images, cap {cap}: {e}"))?;
            total += walk.leaves;
        }
    }
    Ok(total)
}
