//! Study class vocabulary.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A class name in its canonical (study-configured) spelling.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(String);

impl ClassLabel {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Builds a label without checking it against a class set. Callers should
    /// normally go through [`ClassSet::resolve`].
    pub fn new_unchecked(name: impl Into<String>) -> Self {
        Self(name.into())
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClassSetError {
    #[error("class set is empty")]
    Empty,
    #[error("class name is empty")]
    EmptyName,
    #[error("class name {0:?} appears more than once (names compare case-insensitively)")]
    Duplicate(String),
}

/// Ordered, non-empty set of class names. Lookups are case-insensitive and
/// always return the canonical spelling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassSet {
    labels: Vec<ClassLabel>,
}

impl ClassSet {
    pub fn new<I, S>(names: I) -> Result<Self, ClassSetError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut labels: Vec<ClassLabel> = Vec::new();
        for name in names {
            let name = name.as_ref().trim();
            if name.is_empty() {
                return Err(ClassSetError::EmptyName);
            }
            if labels.iter().any(|l| l.0.to_lowercase() == name.to_lowercase()) {
                return Err(ClassSetError::Duplicate(name.to_string()));
            }
            labels.push(ClassLabel(name.to_string()));
        }
        if labels.is_empty() {
            return Err(ClassSetError::Empty);
        }
        Ok(Self { labels })
    }

    /// Maps a raw token to its canonical label, ignoring case and surrounding
    /// whitespace.
    pub fn resolve(&self, token: &str) -> Option<&ClassLabel> {
        let token = token.trim();
        let lowered = token.to_lowercase();
        self.labels.iter().find(|l| l.0.to_lowercase() == lowered)
    }

    pub fn contains(&self, label: &ClassLabel) -> bool {
        self.labels.contains(label)
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassLabel> {
        self.labels.iter()
    }
}

impl TryFrom<Vec<String>> for ClassSet {
    type Error = ClassSetError;

    fn try_from(value: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ClassSet> for Vec<String> {
    fn from(value: ClassSet) -> Self {
        value.labels.into_iter().map(|l| l.0).collect()
    }
}
