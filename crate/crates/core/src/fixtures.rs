//! Synthetic study fixtures for tests, demos and replay runs.
//!
//! Images are all the same 1x1 grayscale PNG; only the manifest structure
//! matters to the pipeline.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use crate::dataset::{select_prompt_subset, Cohort, DatasetManifest, PromptSubset};
use crate::engine::{AptState, DEFAULT_ROUND_CAP};
use crate::gateway::{Matcher, Reply, ScriptEntry};
use crate::prompt::{Caption, ImageCaptionPair, Provenance};

/// A valid 1x1 grayscale PNG.
pub const TINY_PNG: [u8; 67] = [
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44,
    0x52, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x00, 0x00, 0x00, 0x00, 0x3a,
    0x7e, 0x9b, 0x55, 0x00, 0x00, 0x00, 0x0a, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0x68,
    0x00, 0x00, 0x00, 0x82, 0x00, 0x81, 0x77, 0xcd, 0x72, 0xb6, 0x00, 0x00, 0x00, 0x00, 0x49,
    0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
];

pub const STUDY_HEADER: &str = r#"{"kind":"study","classes":["Lurcher","Wild"],"magnification":"10x","stain":"cresyl violet","anatomy":"sagittal sections through the mouse cerebellum showing the Purkinje and granule cell layers"}"#;

/// Published per-animal test results: (animal id, ground truth, images
/// predicted Lurcher, images predicted Wild, predicted class).
pub const TABLE1: [(&str, &str, usize, usize, &str); 12] = [
    ("5917", "Lurcher", 48, 2, "Lurcher"),
    ("6323", "Lurcher", 39, 6, "Lurcher"),
    ("6350", "Lurcher", 24, 50, "Wild"),
    ("6480", "Lurcher", 50, 0, "Lurcher"),
    ("6481", "Lurcher", 38, 0, "Lurcher"),
    ("6509", "Lurcher", 61, 0, "Lurcher"),
    ("5973", "Wild", 1, 171, "Wild"),
    ("6132", "Wild", 0, 202, "Wild"),
    ("6134", "Wild", 4, 171, "Wild"),
    ("6349", "Wild", 5, 251, "Wild"),
    ("6353", "Wild", 2, 135, "Wild"),
    ("6483", "Wild", 16, 195, "Wild"),
];

/// Prompt-pool animals used alongside [`TABLE1`]; ids are synthetic.
pub const PROMPT_POOL: [(&str, &str); 6] = [
    ("P01", "Lurcher"),
    ("P02", "Lurcher"),
    ("P03", "Lurcher"),
    ("P04", "Wild"),
    ("P05", "Wild"),
    ("P06", "Wild"),
];

pub const PROMPT_POOL_IMAGES: usize = 12;

/// Builder for a manifest directory: `manifest.jsonl` plus `images/`.
pub struct StudyFixture {
    dir: PathBuf,
    animals: Vec<(String, String, usize, Option<Cohort>)>,
}

impl StudyFixture {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        Self {
            dir: dir.as_ref().to_path_buf(),
            animals: Vec::new(),
        }
    }

    pub fn animal(mut self, id: &str, class: &str, images: usize, cohort: Option<Cohort>) -> Self {
        self.animals.push((id.to_string(), class.to_string(), images, cohort));
        self
    }

    pub fn image_id(animal_id: &str, index: usize) -> String {
        format!("{animal_id}_{index:03}")
    }

    pub fn write(self) -> PathBuf {
        let images_dir = self.dir.join("images");
        std::fs::create_dir_all(&images_dir).expect("create images dir");
        let mut text = String::from(STUDY_HEADER);
        text.push('\n');
        for (id, class, _, cohort) in &self.animals {
            let mut record = serde_json::json!({
                "kind": "animal",
                "animal_id": id,
                "ground_truth": class,
            });
            if let Some(c) = cohort {
                record["cohort"] = serde_json::to_value(c).unwrap();
            }
            text.push_str(&record.to_string());
            text.push('\n');
        }
        for (id, _, count, _) in &self.animals {
            for i in 0..*count {
                let image_id = Self::image_id(id, i);
                let rel = format!("images/{image_id}.png");
                std::fs::write(self.dir.join(&rel), TINY_PNG).expect("write image");
                let record = serde_json::json!({
                    "kind": "image",
                    "image_id": image_id,
                    "animal_id": id,
                    "file_path": rel,
                });
                text.push_str(&record.to_string());
                text.push('\n');
            }
        }
        let path = self.dir.join("manifest.jsonl");
        std::fs::write(&path, text).expect("write manifest");
        path
    }
}

/// 18-animal study: six unassigned prompt-pool animals and the twelve
/// published test animals (cohort `test`, 1471 images) with their published
/// image counts.
pub fn table1_manifest(dir: impl AsRef<Path>) -> PathBuf {
    let mut fixture = StudyFixture::new(dir);
    for (id, class) in PROMPT_POOL {
        fixture = fixture.animal(id, class, PROMPT_POOL_IMAGES, None);
    }
    for (id, class, lurcher, wild, _) in TABLE1 {
        fixture = fixture.animal(id, class, lurcher + wild, Some(Cohort::Test));
    }
    fixture.write()
}

/// Scripted label for every Table 1 test image: the first `lurcher` images
/// of each animal are answered Lurcher, the rest Wild.
pub fn table1_labels() -> BTreeMap<String, String> {
    let mut labels = BTreeMap::new();
    for (id, _, lurcher, wild, _) in TABLE1 {
        for i in 0..lurcher + wild {
            let label = if i < lurcher { "Lurcher" } else { "Wild" };
            labels.insert(StudyFixture::image_id(id, i), label.to_string());
        }
    }
    labels
}

/// Provider script that answers every request with the Table 1 labels.
pub fn table1_script() -> Vec<ScriptEntry> {
    vec![ScriptEntry::always(Matcher::Any, Reply::Labels(table1_labels()))]
}

/// A finalized run whose effective set is the whole prompt subset with
/// reference captions, as if every image had been promoted.
pub fn finalized_reference_state(
    manifest: &DatasetManifest,
    animals_per_class: usize,
    images_per_animal: usize,
    seed: u64,
) -> (PromptSubset, AptState) {
    let subset = select_prompt_subset(manifest, animals_per_class, images_per_animal, seed)
        .expect("fixture manifest has enough prompt animals");
    let pairs = subset
        .animals
        .iter()
        .flat_map(|animal| {
            animal.images.iter().map(|image| ImageCaptionPair {
                image: image.clone(),
                caption: Caption::new(
                    animal.ground_truth.clone(),
                    format!("Reference caption for {}.", image.image_id),
                    Provenance::ExpertAuthored,
                )
                .expect("one sentence"),
                verified: true,
            })
        })
        .collect();
    let mut state = AptState::init(pairs, Vec::new(), &HashMap::new(), DEFAULT_ROUND_CAP)
        .expect("reference pairs are valid");
    state.finalize().expect("nothing active");
    (subset, state)
}
