//! Image corpus: manifest ingestion, prompt-animal selection and the
//! initial/active split.
//!
//! The manifest is line-delimited JSON. The first record is the study header
//! (`"kind": "study"`); every later record is either an `"animal"` or an
//! `"image"`. Image paths are relative to the manifest's directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::label::{ClassLabel, ClassSet};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("manifest file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("i/o error reading {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("class {class} has {available} eligible prompt animals, {requested} requested")]
    InsufficientAnimals {
        class: ClassLabel,
        available: usize,
        requested: usize,
    },
    #[error("animal {animal_id} has {available} images, {requested} requested")]
    InsufficientImages {
        animal_id: String,
        available: usize,
        requested: usize,
    },
    #[error("initial partition would contain no examples of class {0}")]
    DegeneratePartition(ClassLabel),
    #[error("invalid partition request: {0}")]
    InvalidPartition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Prompt,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub classes: ClassSet,
    pub magnification: String,
    pub stain: String,
    pub anatomy: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnimalRecord {
    pub animal_id: String,
    pub ground_truth: ClassLabel,
    /// `None` until a prompt subset has been selected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort: Option<Cohort>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub animal_id: String,
    pub file_path: PathBuf,
    pub magnification: String,
    pub stain: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub study: StudyConfig,
    pub animals: Vec<AnimalRecord>,
    pub images: Vec<ImageRecord>,
    /// Directory image paths are resolved against.
    pub root: PathBuf,
}

// Wire records. Image magnification and stain fall back to the study header.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum ManifestLine {
    Study {
        classes: Vec<String>,
        magnification: String,
        stain: String,
        anatomy: String,
    },
    Animal {
        animal_id: String,
        ground_truth: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cohort: Option<Cohort>,
    },
    Image {
        image_id: String,
        animal_id: String,
        file_path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        magnification: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stain: Option<String>,
    },
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, DatasetError> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut study: Option<StudyConfig> = None;
    let mut raw_animals: Vec<(usize, String, String, Option<Cohort>)> = Vec::new();
    let mut images = Vec::new();

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestLine =
            serde_json::from_str(&line).map_err(|e| DatasetError::Schema {
                line: line_no,
                message: e.to_string(),
            })?;
        match record {
            ManifestLine::Study {
                classes,
                magnification,
                stain,
                anatomy,
            } => {
                if study.is_some() {
                    return Err(schema(line_no, "duplicate study header"));
                }
                if !raw_animals.is_empty() || !images.is_empty() {
                    return Err(schema(line_no, "study header must be the first record"));
                }
                let classes =
                    ClassSet::new(&classes).map_err(|e| schema(line_no, &e.to_string()))?;
                if classes.len() != 2 {
                    return Err(schema(
                        line_no,
                        &format!("study must define exactly two classes, found {}", classes.len()),
                    ));
                }
                study = Some(StudyConfig {
                    classes,
                    magnification,
                    stain,
                    anatomy,
                });
            }
            ManifestLine::Animal {
                animal_id,
                ground_truth,
                cohort,
            } => {
                if study.is_none() {
                    return Err(schema(line_no, "study header must be the first record"));
                }
                if animal_id.trim().is_empty() {
                    return Err(schema(line_no, "empty animal_id"));
                }
                raw_animals.push((line_no, animal_id, ground_truth, cohort));
            }
            ManifestLine::Image {
                image_id,
                animal_id,
                file_path,
                magnification,
                stain,
            } => {
                let Some(study) = study.as_ref() else {
                    return Err(schema(line_no, "study header must be the first record"));
                };
                if image_id.trim().is_empty() {
                    return Err(schema(line_no, "empty image_id"));
                }
                images.push((
                    line_no,
                    ImageRecord {
                        image_id,
                        animal_id,
                        file_path,
                        magnification: magnification.unwrap_or_else(|| study.magnification.clone()),
                        stain: stain.unwrap_or_else(|| study.stain.clone()),
                    },
                ));
            }
        }
    }

    let study = study.ok_or_else(|| schema(1, "missing study header"))?;

    let mut animals = Vec::with_capacity(raw_animals.len());
    for (line_no, animal_id, ground_truth, cohort) in raw_animals {
        let label = study.classes.resolve(&ground_truth).cloned().ok_or_else(|| {
            DatasetError::Integrity(format!(
                "animal {animal_id} (line {line_no}) has unknown ground truth class {ground_truth:?}"
            ))
        })?;
        animals.push(AnimalRecord {
            animal_id,
            ground_truth: label,
            cohort,
        });
    }

    let manifest = DatasetManifest {
        study,
        animals,
        images: images.into_iter().map(|(_, img)| img).collect(),
        root,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn schema(line: usize, message: &str) -> DatasetError {
    DatasetError::Schema {
        line,
        message: message.to_string(),
    }
}

impl DatasetManifest {
    /// Checks referential integrity, id uniqueness and that every image file
    /// can be opened.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.animals.is_empty() {
            return Err(DatasetError::Integrity("manifest lists no animals".into()));
        }
        let mut animal_ids = HashSet::new();
        for animal in &self.animals {
            if !animal_ids.insert(animal.animal_id.as_str()) {
                return Err(DatasetError::Integrity(format!(
                    "duplicate animal_id {}",
                    animal.animal_id
                )));
            }
            if !self.study.classes.contains(&animal.ground_truth) {
                return Err(DatasetError::Integrity(format!(
                    "animal {} has ground truth {} outside the study classes",
                    animal.animal_id, animal.ground_truth
                )));
            }
        }
        let mut image_ids = HashSet::new();
        let mut per_animal: HashMap<&str, usize> = HashMap::new();
        for image in &self.images {
            if !image_ids.insert(image.image_id.as_str()) {
                return Err(DatasetError::Integrity(format!(
                    "duplicate image_id {}",
                    image.image_id
                )));
            }
            if !animal_ids.contains(image.animal_id.as_str()) {
                return Err(DatasetError::Integrity(format!(
                    "image {} references unknown animal {}",
                    image.image_id, image.animal_id
                )));
            }
            let resolved = self.resolve_path(image);
            if let Err(e) = File::open(&resolved) {
                return Err(DatasetError::Integrity(format!(
                    "image {} file {} is not readable: {e}",
                    image.image_id,
                    resolved.display()
                )));
            }
            *per_animal.entry(image.animal_id.as_str()).or_default() += 1;
        }
        for animal in &self.animals {
            if !per_animal.contains_key(animal.animal_id.as_str()) {
                return Err(DatasetError::Integrity(format!(
                    "animal {} has no images",
                    animal.animal_id
                )));
            }
        }
        Ok(())
    }

    pub fn resolve_path(&self, image: &ImageRecord) -> PathBuf {
        self.root.join(&image.file_path)
    }

    pub fn animal(&self, animal_id: &str) -> Option<&AnimalRecord> {
        self.animals.iter().find(|a| a.animal_id == animal_id)
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn images_of<'a>(&'a self, animal_id: &'a str) -> impl Iterator<Item = &'a ImageRecord> + 'a {
        self.images.iter().filter(move |i| i.animal_id == animal_id)
    }

    pub fn test_animals(&self) -> impl Iterator<Item = &AnimalRecord> {
        self.animals
            .iter()
            .filter(|a| a.cohort == Some(Cohort::Test))
    }

    /// Images belonging to test-cohort animals.
    pub fn test_images(&self) -> Vec<&ImageRecord> {
        let test: HashSet<&str> = self.test_animals().map(|a| a.animal_id.as_str()).collect();
        self.images
            .iter()
            .filter(|i| test.contains(i.animal_id.as_str()))
            .collect()
    }

    /// Returns a copy where the subset's animals are `Prompt` and everything
    /// else is `Test`.
    pub fn assign_cohorts(&self, subset: &PromptSubset) -> DatasetManifest {
        let selected: HashSet<&str> = subset.animals.iter().map(|a| a.animal_id.as_str()).collect();
        let mut out = self.clone();
        for animal in &mut out.animals {
            animal.cohort = Some(if selected.contains(animal.animal_id.as_str()) {
                Cohort::Prompt
            } else {
                Cohort::Test
            });
        }
        out
    }

    pub fn summary(&self) -> ManifestSummary {
        let mut animals_per_class = BTreeMap::new();
        let mut images_per_class = BTreeMap::new();
        for class in self.study.classes.iter() {
            animals_per_class.insert(class.clone(), 0);
            images_per_class.insert(class.clone(), 0);
        }
        let mut class_of = HashMap::new();
        let (mut prompt, mut test, mut unassigned) = (0, 0, 0);
        for animal in &self.animals {
            *animals_per_class.entry(animal.ground_truth.clone()).or_insert(0) += 1;
            class_of.insert(animal.animal_id.as_str(), &animal.ground_truth);
            match animal.cohort {
                Some(Cohort::Prompt) => prompt += 1,
                Some(Cohort::Test) => test += 1,
                None => unassigned += 1,
            }
        }
        for image in &self.images {
            if let Some(class) = class_of.get(image.animal_id.as_str()) {
                *images_per_class.entry((*class).clone()).or_insert(0) += 1;
            }
        }
        ManifestSummary {
            classes: self.study.classes.labels().to_vec(),
            animals_per_class,
            images_per_class,
            prompt_animals: prompt,
            test_animals: test,
            unassigned_animals: unassigned,
            test_images: self.test_images().len(),
            total_images: self.images.len(),
        }
    }

    /// Writes the manifest back out in its line-delimited form.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        let header = ManifestLine::Study {
            classes: self.study.classes.clone().into(),
            magnification: self.study.magnification.clone(),
            stain: self.study.stain.clone(),
            anatomy: self.study.anatomy.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for animal in &self.animals {
            let line = ManifestLine::Animal {
                animal_id: animal.animal_id.clone(),
                ground_truth: animal.ground_truth.to_string(),
                cohort: animal.cohort,
            };
            writeln!(out, "{}", serde_json::to_string(&line)?)?;
        }
        for image in &self.images {
            let line = ManifestLine::Image {
                image_id: image.image_id.clone(),
                animal_id: image.animal_id.clone(),
                file_path: image.file_path.clone(),
                magnification: Some(image.magnification.clone()),
                stain: Some(image.stain.clone()),
            };
            writeln!(out, "{}", serde_json::to_string(&line)?)?;
        }
        out.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestSummary {
    pub classes: Vec<ClassLabel>,
    pub animals_per_class: BTreeMap<ClassLabel, usize>,
    pub images_per_class: BTreeMap<ClassLabel, usize>,
    pub prompt_animals: usize,
    pub test_animals: usize,
    pub unassigned_animals: usize,
    pub test_images: usize,
    pub total_images: usize,
}

impl ManifestSummary {
    /// One-line health summary, e.g. `9 Lurcher / 9 Wild, 6 prompt / 12 test`.
    pub fn headline(&self) -> String {
        let classes = self
            .classes
            .iter()
            .map(|c| format!("{} {}", self.animals_per_class.get(c).copied().unwrap_or(0), c))
            .collect::<Vec<_>>()
            .join(" / ");
        let mut cohorts = format!("{} prompt / {} test", self.prompt_animals, self.test_animals);
        if self.unassigned_animals > 0 {
            cohorts.push_str(&format!(" / {} unassigned", self.unassigned_animals));
        }
        format!("{classes}, {cohorts}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAnimal {
    pub animal_id: String,
    pub ground_truth: ClassLabel,
    pub images: Vec<ImageRecord>,
}

/// Animals and images chosen for prompt construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSubset {
    pub seed: u64,
    /// Study classes, every one of which must reach the initial partition.
    pub classes: ClassSet,
    pub animals: Vec<PromptAnimal>,
}

impl PromptSubset {
    pub fn images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.animals.iter().flat_map(|a| a.images.iter())
    }

    pub fn image_count(&self) -> usize {
        self.animals.iter().map(|a| a.images.len()).sum()
    }

    /// Ground-truth class for every prompt-cohort image, keyed by image id.
    pub fn ground_truth(&self) -> HashMap<String, ClassLabel> {
        self.animals
            .iter()
            .flat_map(|a| a.images.iter().map(|i| (i.image_id.clone(), a.ground_truth.clone())))
            .collect()
    }
}

/// Picks `animals_per_class` animals per class and `images_per_animal` images
/// from each. Animals explicitly marked `test` in the manifest are not
/// eligible. Selection is a pure function of the inputs and `seed`.
pub fn select_prompt_subset(
    manifest: &DatasetManifest,
    animals_per_class: usize,
    images_per_animal: usize,
    seed: u64,
) -> Result<PromptSubset, DatasetError> {
    if animals_per_class == 0 || images_per_animal == 0 {
        return Err(DatasetError::InvalidPartition(
            "animals_per_class and images_per_animal must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::new();

    for class in manifest.study.classes.iter() {
        let mut pool: Vec<&AnimalRecord> = manifest
            .animals
            .iter()
            .filter(|a| &a.ground_truth == class && a.cohort != Some(Cohort::Test))
            .collect();
        pool.sort_by(|a, b| a.animal_id.cmp(&b.animal_id));
        if pool.len() < animals_per_class {
            return Err(DatasetError::InsufficientAnimals {
                class: class.clone(),
                available: pool.len(),
                requested: animals_per_class,
            });
        }
        let mut chosen: Vec<&AnimalRecord> =
            pool.choose_multiple(&mut rng, animals_per_class).copied().collect();
        chosen.sort_by(|a, b| a.animal_id.cmp(&b.animal_id));

        for animal in chosen {
            let mut images: Vec<&ImageRecord> = manifest.images_of(&animal.animal_id).collect();
            images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            if images.len() < images_per_animal {
                return Err(DatasetError::InsufficientImages {
                    animal_id: animal.animal_id.clone(),
                    available: images.len(),
                    requested: images_per_animal,
                });
            }
            let mut picked: Vec<ImageRecord> = images
                .choose_multiple(&mut rng, images_per_animal)
                .map(|i| (*i).clone())
                .collect();
            picked.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            selected.push(PromptAnimal {
                animal_id: animal.animal_id.clone(),
                ground_truth: animal.ground_truth.clone(),
                images: picked,
            });
        }
    }

    Ok(PromptSubset {
        seed,
        classes: manifest.study.classes.clone(),
        animals: selected,
    })
}

/// Number of images placed in the initial partition: `floor(fraction * n)`
/// clamped so both parts keep at least one image.
pub fn initial_partition_size(total: usize, initial_fraction: f64) -> usize {
    let raw = (initial_fraction * total as f64).floor() as usize;
    raw.clamp(1, total.saturating_sub(1).max(1))
}

/// Splits the subset into the initial prompt partition and the active set.
/// Both lists keep the subset's order.
pub fn partition_prompt_subset(
    subset: &PromptSubset,
    initial_fraction: f64,
    seed: u64,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>), DatasetError> {
    if !(initial_fraction > 0.0 && initial_fraction < 1.0) {
        return Err(DatasetError::InvalidPartition(format!(
            "initial_fraction must lie strictly between 0 and 1, got {initial_fraction}"
        )));
    }
    let all: Vec<(&ImageRecord, &ClassLabel)> = subset
        .animals
        .iter()
        .flat_map(|a| a.images.iter().map(move |i| (i, &a.ground_truth)))
        .collect();
    if all.len() < 2 {
        return Err(DatasetError::InvalidPartition(format!(
            "need at least two images to partition, got {}",
            all.len()
        )));
    }

    let k = initial_partition_size(all.len(), initial_fraction);
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let initial_idx: HashSet<usize> = order[..k].iter().copied().collect();

    for class in subset.classes.iter() {
        let covered = all
            .iter()
            .enumerate()
            .any(|(i, (_, label))| *label == class && initial_idx.contains(&i));
        if !covered {
            return Err(DatasetError::DegeneratePartition(class.clone()));
        }
    }

    let mut initial = Vec::with_capacity(k);
    let mut active = Vec::with_capacity(all.len() - k);
    for (i, (image, _)) in all.into_iter().enumerate() {
        if initial_idx.contains(&i) {
            initial.push(image.clone());
        } else {
            active.push(image.clone());
        }
    }
    Ok((initial, active))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::*;

    fn write_study(dir: &Path, animals: &[(&str, &str, usize)]) -> PathBuf {
        let mut f = StudyFixture::new(dir);
        for (id, class, n) in animals {
            f = f.animal(id, class, *n, None);
        }
        f.write()
    }

    fn study_manifest(dir: &Path) -> PathBuf {
        table1_manifest(dir)
    }

    #[test]
    fn loads_a_generated_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_study(dir.path(), &[("a1", "Lurcher", 3), ("a2", "wild", 2)]);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.animals.len(), 2);
        assert_eq!(m.images.len(), 5);
        // Case is normalized to the study's spelling.
        assert_eq!(m.animals[1].ground_truth.as_str(), "Wild");
    }

    #[test]
    fn missing_file() {
        let err = load_manifest("/nonexistent/manifest.jsonl").unwrap_err();
        assert!(matches!(err, DatasetError::MissingFile(_)));
    }

    #[test]
    fn empty_animals_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, format!("{}\n", STUDY_HEADER)).unwrap();
        assert!(matches!(load_manifest(&path).unwrap_err(), DatasetError::Integrity(_)));
    }

    #[test]
    fn dangling_animal_reference_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_study(dir.path(), &[("a1", "Lurcher", 1)]);
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str(
            r#"{"kind":"image","image_id":"orphan","animal_id":"X9","file_path":"images/a1_000.png"}"#,
        );
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        match load_manifest(&path).unwrap_err() {
            DatasetError::Integrity(msg) => assert!(msg.contains("X9"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_study(dir.path(), &[("a1", "Lurcher", 1)]);
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"kind\":\"image\",\"image_id\":\n");
        let line = text.lines().count();
        std::fs::write(&path, text).unwrap();
        match load_manifest(&path).unwrap_err() {
            DatasetError::Schema { line: l, .. } => assert_eq!(l, line),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_study(dir.path(), &[("a1", "Lurcher", 1), ("a1", "Wild", 1)]);
        assert!(matches!(load_manifest(&path).unwrap_err(), DatasetError::Integrity(_)));
    }

    #[test]
    fn unreadable_image_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_study(dir.path(), &[("a1", "Lurcher", 2)]);
        std::fs::remove_file(dir.path().join("images/a1_001.png")).unwrap();
        assert!(matches!(load_manifest(&path).unwrap_err(), DatasetError::Integrity(_)));
    }

    #[test]
    fn study_scale_selection() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(study_manifest(dir.path())).unwrap();
        assert_eq!(m.summary().headline(), "9 Lurcher / 9 Wild, 0 prompt / 12 test / 6 unassigned");
        assert_eq!(m.summary().test_images, 1471);
        let subset = select_prompt_subset(&m, 3, 6, 42).unwrap();
        assert_eq!(subset.animals.len(), 6);
        assert_eq!(subset.image_count(), 36);
        assert_eq!(subset, select_prompt_subset(&m, 3, 6, 42).unwrap());

        let assigned = m.assign_cohorts(&subset);
        let summary = assigned.summary();
        assert_eq!(summary.headline(), "9 Lurcher / 9 Wild, 6 prompt / 12 test");
    }

    #[test]
    fn insufficient_animals_and_images() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(study_manifest(dir.path())).unwrap();
        assert!(matches!(
            select_prompt_subset(&m, 10, 6, 1).unwrap_err(),
            DatasetError::InsufficientAnimals { requested: 10, available: 3, .. }
        ));
        match select_prompt_subset(&m, 3, 10_000, 1).unwrap_err() {
            DatasetError::InsufficientImages { animal_id, .. } => assert!(!animal_id.is_empty()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn test_marked_animals_are_not_eligible() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = load_manifest(study_manifest(dir.path())).unwrap();
        for a in m.animals.iter_mut().take(3) {
            a.cohort = Some(Cohort::Test);
        }
        assert!(matches!(
            select_prompt_subset(&m, 1, 1, 0).unwrap_err(),
            DatasetError::InsufficientAnimals { .. }
        ));
    }

    #[test]
    fn partition_sizes() {
        assert_eq!(initial_partition_size(36, 0.5), 18);
        assert_eq!(initial_partition_size(36, 0.99), 35);
        assert_eq!(initial_partition_size(36, 0.01), 1);
        assert_eq!(initial_partition_size(2, 0.5), 1);
    }

    #[test]
    fn partition_of_study_subset() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(study_manifest(dir.path())).unwrap();
        let subset = select_prompt_subset(&m, 3, 6, 42).unwrap();
        let (initial, active) = partition_prompt_subset(&subset, 0.5, 7).unwrap();
        assert_eq!((initial.len(), active.len()), (18, 18));
        let (i2, a2) = partition_prompt_subset(&subset, 0.5, 7).unwrap();
        assert_eq!((initial.clone(), active.clone()), (i2, a2));

        let (initial, active) = partition_prompt_subset(&subset, 0.99, 7).unwrap();
        assert_eq!((initial.len(), active.len()), (35, 1));
    }

    #[test]
    fn single_class_subset_is_degenerate() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(study_manifest(dir.path())).unwrap();
        let mut subset = select_prompt_subset(&m, 3, 6, 42).unwrap();
        let first = subset.animals[0].ground_truth.clone();
        subset.animals.retain(|a| a.ground_truth == first);
        assert!(matches!(
            partition_prompt_subset(&subset, 0.5, 3).unwrap_err(),
            DatasetError::DegeneratePartition(_)
        ));
    }

    #[test]
    fn fraction_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(study_manifest(dir.path())).unwrap();
        let subset = select_prompt_subset(&m, 1, 2, 0).unwrap();
        assert!(partition_prompt_subset(&subset, 0.0, 0).is_err());
        assert!(partition_prompt_subset(&subset, 1.0, 0).is_err());
    }

    #[test]
    fn write_then_load_preserves_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(study_manifest(dir.path())).unwrap();
        let subset = select_prompt_subset(&m, 3, 6, 42).unwrap();
        let assigned = m.assign_cohorts(&subset);
        let out = dir.path().join("assigned.jsonl");
        assigned.write_jsonl(&out).unwrap();
        assert_eq!(load_manifest(&out).unwrap(), assigned);
    }
}
