//! Append-only results file.
//!
//! One JSON object per line. The first line is a header naming the run, the
//! prompt set version and the model. Each batch is written as a `batch`
//! line, one record per image, then a `batch_done` marker; a batch without
//! its marker is treated as never written, so a crash mid-batch is
//! harmless and the batch is simply redone on resume.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::label::ClassLabel;
use crate::parser::FailureKind;

#[derive(Debug, thiserror::Error)]
pub enum ResultsError {
    #[error("cannot access results file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("results file {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("results file {path} was written by a different run or prompt set")]
    HeaderMismatch { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultsHeader {
    pub run_id: String,
    pub prompt_set_version: u64,
    pub system_prompt_version: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum RecordFailure {
    /// The model answered but no usable verdict could be read, even after
    /// the re-ask.
    Parse(FailureKind),
    /// The request carrying this image failed at the gateway.
    Provider(String),
    /// The image file could not be read when the request was built.
    Unreadable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub image_id: String,
    pub animal_id: String,
    pub predicted: Option<ClassLabel>,
    pub explanation: Option<String>,
    pub round_or_batch: usize,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub reasked: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<RecordFailure>,
}

impl VerdictRecord {
    pub fn is_failure(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(ResultsHeader),
    Batch { batch: usize, image_ids: Vec<String> },
    Record(VerdictRecord),
    BatchDone { batch: usize },
}

/// Contents of a results file, restricted to completed batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultsFile {
    pub header: ResultsHeader,
    /// One record per image, from the latest completed batch that covered it.
    pub records: Vec<VerdictRecord>,
    pub completed_batches: BTreeSet<usize>,
}

impl ResultsFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, ResultsError> {
        let path = path.as_ref();
        let io = |source| ResultsError::Io {
            path: path.to_path_buf(),
            source,
        };
        let text = std::fs::read_to_string(path).map_err(io)?;
        let corrupt = |line: usize, message: String| ResultsError::Corrupt {
            path: path.to_path_buf(),
            line,
            message,
        };
        let torn_tail = !text.ends_with('\n');
        let raw: Vec<&str> = text.lines().collect();

        let mut lines = Vec::new();
        for (i, line) in raw.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Line>(line) {
                Ok(parsed) => lines.push((i + 1, parsed)),
                // A torn final line from an interrupted write.
                Err(_) if torn_tail && i + 1 == raw.len() && !lines.is_empty() => break,
                Err(e) => return Err(corrupt(i + 1, e.to_string())),
            }
        }

        let mut iter = lines.into_iter();
        let header = match iter.next() {
            Some((_, Line::Header(h))) => h,
            Some((n, _)) => return Err(corrupt(n, "first line is not a header".into())),
            None => return Err(corrupt(1, "empty results file".into())),
        };

        let mut open: Option<(usize, Vec<VerdictRecord>)> = None;
        let mut by_image: BTreeMap<String, (usize, VerdictRecord)> = BTreeMap::new();
        let mut completed = BTreeSet::new();
        let mut order = 0usize;
        for (n, line) in iter {
            match line {
                Line::Header(_) => return Err(corrupt(n, "second header".into())),
                Line::Batch { batch, .. } => open = Some((batch, Vec::new())),
                Line::Record(r) => match open.as_mut() {
                    Some((_, records)) => records.push(r),
                    None => return Err(corrupt(n, "record outside a batch".into())),
                },
                Line::BatchDone { batch } => match open.take() {
                    Some((b, records)) if b == batch => {
                        completed.insert(batch);
                        for r in records {
                            order += 1;
                            by_image.insert(r.image_id.clone(), (order, r));
                        }
                    }
                    _ => return Err(corrupt(n, format!("batch_done {batch} without its batch"))),
                },
            }
        }

        let mut records: Vec<(usize, VerdictRecord)> = by_image.into_values().collect();
        records.sort_by_key(|(o, _)| *o);
        Ok(Self {
            header,
            records: records.into_iter().map(|(_, r)| r).collect(),
            completed_batches: completed,
        })
    }

    pub fn verdict_count(&self) -> usize {
        self.records.iter().filter(|r| !r.is_failure()).count()
    }

    pub fn failure_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_failure()).count()
    }
}

/// Appends batches to a results file, creating it with a header if needed.
#[derive(Debug)]
pub struct ResultsWriter {
    path: PathBuf,
    file: File,
}

impl ResultsWriter {
    /// Opens `path` for appending. An existing file must carry the same header.
    pub fn open(path: impl AsRef<Path>, header: &ResultsHeader) -> Result<Self, ResultsError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| ResultsError::Io {
            path: path.clone(),
            source,
        };
        let exists = path.exists() && std::fs::metadata(&path).map_err(io)?.len() > 0;
        if exists {
            let existing = ResultsFile::read(&path)?;
            if existing.header != *header {
                return Err(ResultsError::HeaderMismatch { path });
            }
            truncate_torn_line(&path).map_err(io)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        if !exists {
            write_line(&mut file, &Line::Header(header.clone())).map_err(io)?;
            file.sync_data().map_err(io)?;
        }
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one complete batch and syncs it to disk.
    pub fn append_batch(&mut self, batch: usize, records: &[VerdictRecord]) -> Result<(), ResultsError> {
        let mut buf = Vec::new();
        let lines = std::iter::once(Line::Batch {
            batch,
            image_ids: records.iter().map(|r| r.image_id.clone()).collect(),
        })
        .chain(records.iter().cloned().map(Line::Record))
        .chain(std::iter::once(Line::BatchDone { batch }));
        for line in lines {
            write_line(&mut buf, &line).expect("writing to a Vec cannot fail");
        }
        let io = |source| ResultsError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(&buf).map_err(io)?;
        self.file.sync_data().map_err(io)
    }
}

fn write_line(out: &mut impl Write, line: &Line) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, line)?;
    out.write_all(b"\n")
}

/// Drops a partial last line left by an interrupted write.
fn truncate_torn_line(path: &Path) -> std::io::Result<()> {
    let bytes = std::fs::read(path)?;
    if bytes.last().is_some_and(|b| *b != b'\n') {
        let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    }
    Ok(())
}
