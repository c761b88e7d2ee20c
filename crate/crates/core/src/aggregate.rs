//! Per-animal majority vote, accuracy, time improvement and the study report.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::label::{ClassLabel, ClassSet};
use crate::results::ResultsFile;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AggregateError {
    #[error("results are incomplete: {missing} test image(s) without a record (first: {first})")]
    IncompleteResults { missing: usize, first: String },
    #[error("results contain image {0}, which is not a test image")]
    UnexpectedImage(String),
    #[error("baseline time must be positive")]
    NonpositiveBaseline,
    #[error("method time must not be negative")]
    NegativeMethodTime,
    #[error("report has no animals")]
    EmptyReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Class(ClassLabel),
    Inconclusive,
}

impl Vote {
    pub fn label(&self) -> Option<&ClassLabel> {
        match self {
            Vote::Class(c) => Some(c),
            Vote::Inconclusive => None,
        }
    }
}

impl std::fmt::Display for Vote {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Vote::Class(c) => write!(f, "{c}"),
            Vote::Inconclusive => f.write_str("Inconclusive"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub label: ClassLabel,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnimalTally {
    pub animal_id: String,
    /// One entry per study class, in class order.
    pub counts: Vec<ClassCount>,
    pub unparsed: usize,
    pub ground_truth: ClassLabel,
    pub predicted: Vote,
}

impl AnimalTally {
    /// Builds a tally and fills in its vote.
    pub fn new(animal_id: impl Into<String>, counts: Vec<ClassCount>, unparsed: usize, ground_truth: ClassLabel) -> Self {
        let mut tally = Self {
            animal_id: animal_id.into(),
            counts,
            unparsed,
            ground_truth,
            predicted: Vote::Inconclusive,
        };
        tally.predicted = majority_vote(&tally);
        tally
    }

    pub fn count_of(&self, label: &ClassLabel) -> usize {
        self.counts
            .iter()
            .find(|c| &c.label == label)
            .map_or(0, |c| c.count)
    }

    pub fn parsed(&self) -> usize {
        self.counts.iter().map(|c| c.count).sum()
    }

    pub fn total(&self) -> usize {
        self.parsed() + self.unparsed
    }

    pub fn is_correct(&self) -> bool {
        self.predicted.label() == Some(&self.ground_truth)
    }

    /// Counts joined in class order, e.g. `48/2`.
    pub fn counts_cell(&self) -> String {
        self.counts
            .iter()
            .map(|c| c.count.to_string())
            .collect::<Vec<_>>()
            .join("/")
    }
}

/// Folds a complete results file into one tally per test animal, in
/// manifest order. Failure records count as unparsed.
pub fn tally_predictions(results: &ResultsFile, manifest: &DatasetManifest) -> Result<Vec<AnimalTally>, AggregateError> {
    let classes: &ClassSet = &manifest.study.classes;
    let test_images = manifest.test_images();
    let owner: HashMap<&str, &str> = test_images
        .iter()
        .map(|i| (i.image_id.as_str(), i.animal_id.as_str()))
        .collect();
    let mut seen: HashMap<&str, ()> = HashMap::new();
    let mut counts: HashMap<&str, (HashMap<ClassLabel, usize>, usize)> = HashMap::new();

    for record in &results.records {
        let Some(animal) = owner.get(record.image_id.as_str()) else {
            return Err(AggregateError::UnexpectedImage(record.image_id.clone()));
        };
        seen.insert(record.image_id.as_str(), ());
        let entry = counts.entry(animal).or_default();
        match (&record.predicted, &record.failure) {
            (Some(label), None) => *entry.0.entry(label.clone()).or_default() += 1,
            _ => entry.1 += 1,
        }
    }
    let missing: Vec<&str> = test_images
        .iter()
        .map(|i| i.image_id.as_str())
        .filter(|id| !seen.contains_key(id))
        .collect();
    if let Some(first) = missing.first() {
        return Err(AggregateError::IncompleteResults {
            missing: missing.len(),
            first: first.to_string(),
        });
    }

    Ok(manifest
        .test_animals()
        .map(|animal| {
            let (by_label, unparsed) = counts.remove(animal.animal_id.as_str()).unwrap_or_default();
            let counts = classes
                .iter()
                .map(|label| ClassCount {
                    label: label.clone(),
                    count: by_label.get(label).copied().unwrap_or(0),
                })
                .collect();
            AnimalTally::new(animal.animal_id.clone(), counts, unparsed, animal.ground_truth.clone())
        })
        .collect())
}

/// Class with the most parsed verdicts; a tie for the top or no parsed
/// verdicts at all is inconclusive.
pub fn majority_vote(tally: &AnimalTally) -> Vote {
    let best = tally.counts.iter().map(|c| c.count).max().unwrap_or(0);
    if best == 0 {
        return Vote::Inconclusive;
    }
    let mut top = tally.counts.iter().filter(|c| c.count == best);
    match (top.next(), top.next()) {
        (Some(c), None) => Vote::Class(c.label.clone()),
        _ => Vote::Inconclusive,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub percent: u32,
}

/// `round_half_up(100 * numerator / denominator)` in exact integer arithmetic.
pub fn percent_half_up(numerator: usize, denominator: usize) -> u32 {
    assert!(denominator > 0, "percentage of an empty total");
    ((200 * numerator as u128 + denominator as u128) / (2 * denominator as u128)) as u32
}

pub fn compute_accuracy(tallies: &[AnimalTally]) -> Result<Accuracy, AggregateError> {
    if tallies.is_empty() {
        return Err(AggregateError::EmptyReport);
    }
    let correct = tallies.iter().filter(|t| t.is_correct()).count();
    Ok(Accuracy {
        correct,
        total: tallies.len(),
        percent: percent_half_up(correct, tallies.len()),
    })
}

/// `(baseline - method) / baseline * 100`, rounded half up.
pub fn compute_time_improvement(baseline_minutes: f64, method_minutes: f64) -> Result<i64, AggregateError> {
    if baseline_minutes.is_nan() || baseline_minutes <= 0.0 {
        return Err(AggregateError::NonpositiveBaseline);
    }
    if method_minutes.is_nan() || method_minutes < 0.0 {
        return Err(AggregateError::NegativeMethodTime);
    }
    let raw = (baseline_minutes - method_minutes) / baseline_minutes * 100.0;
    // Guard against 86.4999999 style representation error before rounding.
    Ok((raw + 0.5 + 1e-9).floor() as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptFraction {
    pub effective_images: usize,
    pub test_images: usize,
    /// Share of all used images that served as prompt examples, one decimal.
    pub percent: f64,
}

pub fn prompt_fraction(effective_images: usize, test_images: usize) -> PromptFraction {
    let total = (effective_images + test_images).max(1) as u128;
    let tenths = (2000 * effective_images as u128 + total) / (2 * total);
    PromptFraction {
        effective_images,
        test_images,
        percent: tenths as f64 / 10.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub method_minutes: f64,
    pub baseline_minutes: f64,
    pub improvement_percent: i64,
}

impl Timing {
    pub fn new(baseline_minutes: f64, method_minutes: f64) -> Result<Self, AggregateError> {
        Ok(Self {
            method_minutes,
            baseline_minutes,
            improvement_percent: compute_time_improvement(baseline_minutes, method_minutes)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub tallies: Vec<AnimalTally>,
    pub accuracy: Accuracy,
    pub prompt_fraction: PromptFraction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl StudyReport {
    pub fn new(
        tallies: Vec<AnimalTally>,
        effective_images: usize,
        timing: Option<Timing>,
    ) -> Result<Self, AggregateError> {
        let accuracy = compute_accuracy(&tallies)?;
        let test_images = tallies.iter().map(AnimalTally::total).sum();
        Ok(Self {
            accuracy,
            prompt_fraction: prompt_fraction(effective_images, test_images),
            timing,
            tallies,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let bytes = serde_json::to_vec_pretty(self).expect("report serializes");
        crate::runstate::write_atomic(path.as_ref(), &bytes)
    }
}

fn trim_float(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

/// Fixed-column text table, one row per animal, followed by summary lines.
/// Misclassified rows are marked with `*`.
pub fn render_report(report: &StudyReport) -> Result<String, AggregateError> {
    let first = report.tallies.first().ok_or(AggregateError::EmptyReport)?;
    let counts_header = first
        .counts
        .iter()
        .map(|c| c.label.as_str())
        .collect::<Vec<_>>()
        .join("/");
    let counts_width = report
        .tallies
        .iter()
        .map(|t| t.counts_cell().len())
        .chain([counts_header.len()])
        .max()
        .unwrap_or(0);
    let id_width = report
        .tallies
        .iter()
        .map(|t| t.animal_id.len())
        .chain(["Animal".len()])
        .max()
        .unwrap_or(0);
    let gt_width = report
        .tallies
        .iter()
        .map(|t| t.ground_truth.as_str().len())
        .chain(["Ground truth".len()])
        .max()
        .unwrap_or(0);

    let mut out = String::new();
    writeln!(
        out,
        "  {:<id_width$}  {:<gt_width$}  {:>counts_width$}   {:<12}  Unparsed",
        "Animal", "Ground truth", counts_header, "Predicted"
    )
    .unwrap();
    for t in &report.tallies {
        let mark = if t.is_correct() { ' ' } else { '*' };
        writeln!(
            out,
            "{mark} {:<id_width$}  {:<gt_width$}  {:>counts_width$} → {:<12}  {}",
            t.animal_id,
            t.ground_truth.as_str(),
            t.counts_cell(),
            t.predicted.to_string(),
            t.unparsed
        )
        .unwrap();
    }
    writeln!(out).unwrap();
    let a = report.accuracy;
    writeln!(out, "Accuracy: {}/{} animals correct ({}%)", a.correct, a.total, a.percent).unwrap();
    let p = report.prompt_fraction;
    writeln!(
        out,
        "Prompt fraction: {} prompt images of {} total ({:.1}%)",
        p.effective_images,
        p.effective_images + p.test_images,
        p.percent
    )
    .unwrap();
    if let Some(t) = report.timing {
        writeln!(
            out,
            "Annotation time: {} min vs {} min baseline, improvement {}%",
            trim_float(t.method_minutes),
            trim_float(t.baseline_minutes),
            t.improvement_percent
        )
        .unwrap();
    }
    Ok(out)
}
