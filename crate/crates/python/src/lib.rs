//! Python bindings: manifest loading, verdict parsing, voting and the
//! study metrics.

use std::collections::BTreeMap;
use std::path::PathBuf;

use apt_core::aggregate::{self, AnimalTally, ClassCount, StudyReport, Timing, Vote};
use apt_core::dataset::{self, DatasetError, DatasetManifest};
use apt_core::label::{ClassLabel, ClassSet};
use apt_core::parser::{self, FailureKind, ModelVerdict, ParseWarning};
use apt_core::results::ResultsFile;
use apt_core::runstate::RunState;
use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn dataset_error(e: DatasetError) -> PyErr {
    match e {
        DatasetError::MissingFile(_) => PyFileNotFoundError::new_err(e.to_string()),
        DatasetError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => value_error(e),
    }
}

fn class_set(classes: Vec<String>) -> PyResult<ClassSet> {
    ClassSet::new(classes).map_err(value_error)
}

/// One parsed model verdict.
#[pyclass(name = "Verdict", frozen, eq, from_py_object)]
#[derive(Debug, Clone, PartialEq)]
pub struct PyVerdict {
    #[pyo3(get)]
    image_id: String,
    #[pyo3(get)]
    label: String,
    #[pyo3(get)]
    explanation: String,
}

impl From<ModelVerdict> for PyVerdict {
    fn from(v: ModelVerdict) -> Self {
        Self {
            image_id: v.image_id,
            label: v.label.to_string(),
            explanation: v.explanation,
        }
    }
}

#[pymethods]
impl PyVerdict {
    #[new]
    fn new(image_id: String, label: String, explanation: String) -> Self {
        Self {
            image_id,
            label,
            explanation,
        }
    }

    /// The block a well-behaved model would emit for this verdict.
    fn render(&self) -> String {
        parser::render_verdict(&ModelVerdict {
            image_id: self.image_id.clone(),
            label: ClassLabel::new_unchecked(self.label.clone()),
            explanation: self.explanation.clone(),
        })
    }

    fn __repr__(&self) -> String {
        format!("Verdict(image_id={:?}, label={:?})", self.image_id, self.label)
    }
}

/// An expected image with no usable verdict.
#[pyclass(name = "ParseFailure", frozen, skip_from_py_object)]
#[derive(Debug, Clone)]
pub struct PyParseFailure {
    #[pyo3(get)]
    image_id: String,
    /// `missing_verdict`, `duplicate`, `unknown_class`, `missing_field` or `malformed`.
    #[pyo3(get)]
    kind: &'static str,
    #[pyo3(get)]
    message: String,
}

#[pymethods]
impl PyParseFailure {
    fn __repr__(&self) -> String {
        format!("ParseFailure(image_id={:?}, kind={:?})", self.image_id, self.kind)
    }
}

fn failure_kind(kind: &FailureKind) -> &'static str {
    match kind {
        FailureKind::MissingVerdict => "missing_verdict",
        FailureKind::Duplicate => "duplicate",
        FailureKind::UnknownClass(_) => "unknown_class",
        FailureKind::MissingField(_) => "missing_field",
        FailureKind::Malformed(_) => "malformed",
    }
}

fn warning_text(w: &ParseWarning) -> String {
    match w {
        ParseWarning::UnattributedText { line } => format!("line {line}: text outside any verdict"),
        ParseWarning::UnexpectedImage { image_id, line } => format!("line {line}: verdict for unrequested image {image_id}"),
        ParseWarning::UnidentifiedBlock { line } => format!("line {line}: verdict without an image id"),
    }
}

/// Parses a single verdict block; raises ValueError when it is unusable.
#[pyfunction]
fn parse_verdict(block: &str, classes: Vec<String>) -> PyResult<PyVerdict> {
    let classes = class_set(classes)?;
    parser::parse_verdict(block, &classes).map(Into::into).map_err(value_error)
}

/// Parses a multi-image response. Returns `(outcomes, warnings)`: one
/// `Verdict` or `ParseFailure` per expected id, in order, and warning text.
#[pyfunction]
fn parse_batch(
    py: Python<'_>,
    text: &str,
    expected_ids: Vec<String>,
    classes: Vec<String>,
) -> PyResult<(Vec<Py<PyAny>>, Vec<String>)> {
    let classes = class_set(classes)?;
    let parsed = parser::parse_batch_response(text, &expected_ids, &classes);
    let outcomes = parsed
        .outcomes
        .into_iter()
        .map(|(image_id, outcome)| match outcome {
            Ok(v) => Ok(Py::new(py, PyVerdict::from(v))?.into_any()),
            Err(f) => Ok(Py::new(
                py,
                PyParseFailure {
                    image_id,
                    kind: failure_kind(&f.kind),
                    message: f.kind.to_string(),
                },
            )?
            .into_any()),
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((outcomes, parsed.warnings.iter().map(warning_text).collect()))
}

#[pyfunction]
fn render_verdict(image_id: String, label: String, explanation: String) -> String {
    PyVerdict::new(image_id, label, explanation).render()
}

/// Percent reduction of annotation time, rounded half up.
#[pyfunction]
fn time_improvement(baseline_minutes: f64, method_minutes: f64) -> PyResult<i64> {
    aggregate::compute_time_improvement(baseline_minutes, method_minutes).map_err(value_error)
}

/// Prompt-set share as a percentage with one decimal.
#[pyfunction]
fn prompt_fraction(effective_images: usize, test_images: usize) -> f64 {
    aggregate::prompt_fraction(effective_images, test_images).percent
}

#[pyfunction]
fn accuracy_percent(correct: usize, total: usize) -> PyResult<u32> {
    if total == 0 {
        return Err(PyValueError::new_err("total must be positive"));
    }
    Ok(aggregate::percent_half_up(correct, total))
}

/// Majority class over per-class image counts, or None on a tie or when
/// nothing parsed.
#[pyfunction]
#[pyo3(signature = (counts, unparsed = 0))]
fn majority_vote(counts: BTreeMap<String, usize>, unparsed: usize) -> PyResult<Option<String>> {
    let first = counts
        .keys()
        .next()
        .ok_or_else(|| PyValueError::new_err("counts must name at least one class"))?
        .clone();
    let counts = counts
        .into_iter()
        .map(|(label, count)| ClassCount {
            label: ClassLabel::new_unchecked(label),
            count,
        })
        .collect();
    let tally = AnimalTally::new("animal", counts, unparsed, ClassLabel::new_unchecked(first));
    Ok(match aggregate::majority_vote(&tally) {
        Vote::Class(c) => Some(c.to_string()),
        Vote::Inconclusive => None,
    })
}

/// A validated dataset manifest.
#[pyclass(name = "Manifest", frozen, skip_from_py_object)]
pub struct PyManifest {
    inner: DatasetManifest,
}

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        dataset::load_manifest(path)
            .map(|inner| Self { inner })
            .map_err(dataset_error)
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.study.classes.iter().map(ToString::to_string).collect()
    }

    #[getter]
    fn image_count(&self) -> usize {
        self.inner.images.len()
    }

    fn animal_ids(&self) -> Vec<String> {
        self.inner.animals.iter().map(|a| a.animal_id.clone()).collect()
    }

    fn test_image_ids(&self) -> Vec<String> {
        self.inner.test_images().iter().map(|i| i.image_id.clone()).collect()
    }

    /// e.g. `9 Lurcher / 9 Wild, 6 prompt / 12 test`
    fn headline(&self) -> String {
        self.inner.summary().headline()
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = self.inner.summary();
        let d = PyDict::new(py);
        let per_class = |m: &BTreeMap<ClassLabel, usize>| -> BTreeMap<String, usize> {
            m.iter().map(|(k, v)| (k.to_string(), *v)).collect()
        };
        d.set_item("animals_per_class", per_class(&s.animals_per_class))?;
        d.set_item("images_per_class", per_class(&s.images_per_class))?;
        d.set_item("prompt_animals", s.prompt_animals)?;
        d.set_item("test_animals", s.test_animals)?;
        d.set_item("unassigned_animals", s.unassigned_animals)?;
        d.set_item("test_images", s.test_images)?;
        d.set_item("total_images", s.total_images)?;
        Ok(d)
    }

    /// Seeded prompt subset: `[(animal_id, class, [image_id, ...]), ...]`.
    fn select_prompt_subset(
        &self,
        animals_per_class: usize,
        images_per_animal: usize,
        seed: u64,
    ) -> PyResult<Vec<(String, String, Vec<String>)>> {
        let subset = dataset::select_prompt_subset(&self.inner, animals_per_class, images_per_animal, seed)
            .map_err(dataset_error)?;
        Ok(subset
            .animals
            .into_iter()
            .map(|a| {
                let ids = a.images.into_iter().map(|i| i.image_id).collect();
                (a.animal_id, a.ground_truth.to_string(), ids)
            })
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Manifest({})", self.headline())
    }
}

/// Where a tuning run stands.
#[pyclass(name = "RunStatus", frozen, get_all, skip_from_py_object)]
pub struct PyRunStatus {
    run_id: String,
    round: u32,
    round_cap: u32,
    pending: usize,
    active: usize,
    prompt_set_size: usize,
    finalized: bool,
}

#[pyfunction]
fn load_run_status(path: PathBuf) -> PyResult<PyRunStatus> {
    let state = RunState::load(&path).map_err(|e| PyOSError::new_err(e.to_string()))?;
    let apt = &state.apt;
    Ok(PyRunStatus {
        run_id: state.run_id.clone(),
        round: apt.round(),
        round_cap: apt.round_cap(),
        pending: apt.pending_count(),
        active: apt.active_set().len(),
        prompt_set_size: apt.prompt_set().len(),
        finalized: apt.is_finalized(),
    })
}

/// Per-animal tallies and study metrics built from a results file.
#[pyclass(name = "Report", frozen, skip_from_py_object)]
pub struct PyReport {
    inner: StudyReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn accuracy_percent(&self) -> u32 {
        self.inner.accuracy.percent
    }

    #[getter]
    fn correct(&self) -> usize {
        self.inner.accuracy.correct
    }

    #[getter]
    fn total(&self) -> usize {
        self.inner.accuracy.total
    }

    #[getter]
    fn prompt_fraction(&self) -> f64 {
        self.inner.prompt_fraction.percent
    }

    #[getter]
    fn improvement_percent(&self) -> Option<i64> {
        self.inner.timing.map(|t| t.improvement_percent)
    }

    /// `[(animal_id, ground_truth, {class: count}, predicted or None, unparsed)]`
    #[allow(clippy::type_complexity)]
    fn rows(&self) -> Vec<(String, String, BTreeMap<String, usize>, Option<String>, usize)> {
        self.inner
            .tallies
            .iter()
            .map(|t| {
                let counts = t.counts.iter().map(|c| (c.label.to_string(), c.count)).collect();
                (
                    t.animal_id.clone(),
                    t.ground_truth.to_string(),
                    counts,
                    t.predicted.label().map(ToString::to_string),
                    t.unparsed,
                )
            })
            .collect()
    }

    fn render(&self) -> PyResult<String> {
        aggregate::render_report(&self.inner).map_err(value_error)
    }
}

#[pyfunction]
#[pyo3(signature = (manifest, results_path, effective_images, baseline_minutes = None, method_minutes = None))]
fn study_report(
    manifest: &PyManifest,
    results_path: PathBuf,
    effective_images: usize,
    baseline_minutes: Option<f64>,
    method_minutes: Option<f64>,
) -> PyResult<PyReport> {
    let results = ResultsFile::read(&results_path).map_err(|e| PyOSError::new_err(e.to_string()))?;
    let tallies = aggregate::tally_predictions(&results, &manifest.inner).map_err(value_error)?;
    let timing = match (baseline_minutes, method_minutes) {
        (Some(b), Some(m)) => Some(Timing::new(b, m).map_err(value_error)?),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("give both baseline_minutes and method_minutes")),
    };
    StudyReport::new(tallies, effective_images, timing)
        .map(|inner| PyReport { inner })
        .map_err(value_error)
}

#[pymodule]
pub fn apt_tuning(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVerdict>()?;
    m.add_class::<PyParseFailure>()?;
    m.add_class::<PyManifest>()?;
    m.add_class::<PyRunStatus>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(parse_verdict, m)?)?;
    m.add_function(wrap_pyfunction!(parse_batch, m)?)?;
    m.add_function(wrap_pyfunction!(render_verdict, m)?)?;
    m.add_function(wrap_pyfunction!(time_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(prompt_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy_percent, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(load_run_status, m)?)?;
    m.add_function(wrap_pyfunction!(study_report, m)?)?;
    Ok(())
}
