//! Corpus generation, on-disk layout, and loading.
//!
//! A corpus directory holds:
//!
//! * `train.jsonl`, `val.jsonl`, `test.jsonl`: one JSON record per line.
//! * `images/<id>.ppm`: the rendered scenes, binary PPM.
//! * `vocab.txt`: token table built from training captions only.
//! * `relations.txt`: relation classes with training counts, one
//!   `word<TAB>count` per line, ordered by count descending then word.
//! * `groundable.txt`: words with box annotations in the training split.
//! * `corpus_hash.txt`: SHA-256 over every generated file, for
//!   reproducibility checks.
//!
//! Per-sample seeds are mixed from the root seed, the split, and the
//! sample index, so each sample is independent of corpus size and of the
//! other splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scene::{generate_scene, SceneSpec, TruthBox};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::pixmap::Image;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Words rarer than this in training captions fall out of the vocabulary.
const VOCAB_MIN_COUNT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CorpusCounts {
    fn default() -> Self {
        CorpusCounts {
            train: 2000,
            val: 200,
            test: 200,
        }
    }
}

impl CorpusCounts {
    fn of(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            "test" => self.test,
            other => panic!("unknown split {other}"),
        }
    }
}

/// One manifest line. The image path is relative to the corpus root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: String,
    pub caption: Vec<String>,
    pub truth: Vec<TruthBox>,
    pub relations: Vec<String>,
    pub seed: u64,
}

/// A manifest record with its image decoded into memory.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub image: Image,
    pub caption: Vec<String>,
    pub truth: Vec<TruthBox>,
    pub relations: Vec<String>,
}

/// What `generate_corpus` produced, for logging and verification.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub counts: CorpusCounts,
    pub vocab_size: usize,
    pub relation_classes: Vec<String>,
    pub groundable: Vec<String>,
    pub hash: String,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one sample, independent of every other sample.
fn sample_seed(root: u64, split: u64, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ splitmix64(split.wrapping_add(1))) ^ index)
}

/// Generates all three splits plus the derived metadata files into `dir`.
pub fn generate_corpus(
    dir: &Path,
    spec: &SceneSpec,
    counts: &CorpusCounts,
    seed: u64,
) -> Result<CorpusSummary> {
    if counts.train == 0 {
        return Err(Error::EmptyCorpus);
    }
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut train_captions: Vec<Vec<String>> = Vec::new();
    let mut relation_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut groundable: BTreeSet<String> = BTreeSet::new();

    let mut combined = String::new();
    for (split_id, split) in SPLITS.iter().enumerate() {
        let mut manifest = String::new();
        for index in 0..counts.of(split) {
            let scene = generate_scene(spec, sample_seed(seed, split_id as u64, index as u64))?;
            let id = format!("{split}_{index:06}");
            let image_rel = format!("images/{id}.ppm");
            scene.image.write_ppm(&dir.join(&image_rel))?;
            let record = SampleRecord {
                id,
                image: image_rel,
                caption: scene.caption.clone(),
                truth: scene.truth.clone(),
                relations: scene.relations.clone(),
                seed: scene.seed,
            };
            manifest.push_str(&serde_json::to_string(&record)?);
            manifest.push('\n');
            if *split == "train" {
                train_captions.push(scene.caption);
                for r in &scene.relations {
                    *relation_counts.entry(r.clone()).or_insert(0) += 1;
                }
                for t in &scene.truth {
                    groundable.insert(t.word.clone());
                }
            }
        }
        combined.push_str(&manifest);
        let manifest_path = dir.join(format!("{split}.jsonl"));
        fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    }
    // The whole corpus as one record stream, split order train/val/test;
    // the per-split files carry the same records for direct loading.
    let combined_path = dir.join("manifest.jsonl");
    fs::write(&combined_path, combined).map_err(|e| Error::io(&combined_path, e))?;

    let vocab = Vocabulary::build(train_captions.iter().map(Vec::as_slice), VOCAB_MIN_COUNT);
    vocab.save(&dir.join("vocab.txt"))?;

    let mut classes: Vec<(String, usize)> = relation_counts.into_iter().collect();
    classes.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut relations_text = String::new();
    for (word, count) in &classes {
        relations_text.push_str(&format!("{word}\t{count}\n"));
    }
    let relations_path = dir.join("relations.txt");
    fs::write(&relations_path, relations_text).map_err(|e| Error::io(&relations_path, e))?;

    let mut groundable_text = String::new();
    for word in &groundable {
        groundable_text.push_str(word);
        groundable_text.push('\n');
    }
    let groundable_path = dir.join("groundable.txt");
    fs::write(&groundable_path, groundable_text).map_err(|e| Error::io(&groundable_path, e))?;

    let hash = corpus_hash(dir)?;
    let hash_path = dir.join("corpus_hash.txt");
    fs::write(&hash_path, format!("{hash}\n")).map_err(|e| Error::io(&hash_path, e))?;

    Ok(CorpusSummary {
        counts: *counts,
        vocab_size: vocab.len(),
        relation_classes: classes.into_iter().map(|(w, _)| w).collect(),
        groundable: groundable.into_iter().collect(),
        hash,
    })
}

/// SHA-256 over every corpus file except the hash file itself, in sorted
/// relative-path order, with each path mixed in ahead of its bytes.
pub fn corpus_hash(dir: &Path) -> Result<String> {
    let mut files: Vec<String> = Vec::new();
    for split in SPLITS {
        files.push(format!("{split}.jsonl"));
    }
    files.extend(
        ["manifest.jsonl", "vocab.txt", "relations.txt", "groundable.txt"]
            .iter()
            .map(|s| s.to_string()),
    );
    let images_dir = dir.join("images");
    let entries = fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&images_dir, e))?;
        files.push(format!("images/{}", entry.file_name().to_string_lossy()));
    }
    files.sort();

    let mut hasher = Sha256::new();
    for rel in &files {
        let path = dir.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        hasher.update(&bytes);
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Reads one split's manifest and decodes every image.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<LoadedSample>> {
    let path = dir.join(format!("{split}.jsonl"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(line).map_err(|e| {
            Error::Corpus(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let image = Image::read_ppm(&dir.join(&record.image))?;
        samples.push(LoadedSample {
            id: record.id,
            image,
            caption: record.caption,
            truth: record.truth,
            relations: record.relations,
        });
    }
    if samples.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok(samples)
}

/// Relation class names in classification-head order.
pub fn relation_class_set(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join("relations.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut classes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let word = line.split('\t').next().unwrap_or("");
        if word.is_empty() {
            return Err(Error::Corpus(format!(
                "{}:{}: empty relation entry",
                path.display(),
                lineno + 1
            )));
        }
        classes.push(word.to_string());
    }
    if classes.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok(classes)
}

/// Words eligible for box extraction at evaluation time.
pub fn groundable_words(dir: &Path) -> Result<BTreeSet<String>> {
    let path = dir.join("groundable.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text.lines().map(String::from).collect())
}
