//! Training corpora built from interaction logs, and JSON Lines persistence.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, validation, Error, Result};
use crate::world::{Image, InteractionRecord, Prompt, World};
use crate::{exec, seed};

/// A user prompt and the image that best satisfied it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub record_id: u64,
    pub user_prompt: Prompt,
    pub target_image: Image,
    pub target_score: f64,
}

/// A system prompt paired with one of its images, with both admission scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderExample {
    pub system_prompt: Prompt,
    pub image: Image,
    pub relevance: f64,
    pub quality: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<PreferencePair>,
    /// Records with no images.
    pub skipped: usize,
}

fn check_aligned(rec: &InteractionRecord) -> Result<()> {
    if rec.images.len() != rec.scores.len() {
        return Err(validation(format!(
            "record {}: {} images but {} scores",
            rec.record_id,
            rec.images.len(),
            rec.scores.len()
        )));
    }
    Ok(())
}

fn user_prompt_of(rec: &InteractionRecord, world: &World) -> Result<Prompt> {
    rec.prompt
        .concept_projection(world.vocab())
        .ok_or_else(|| validation(format!("record {}: prompt has no concept token", rec.record_id)))
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// One pair per record: the concept-only user prompt and its best image.
pub fn build_preference_pairs(log: &[InteractionRecord], world: &World) -> Result<PairSet> {
    build_pairs_with(log, world, |rec| Ok(argmax_first(&rec.scores)))
}

/// Like [`build_preference_pairs`] but the target is a uniformly chosen image
/// of the same record rather than the best one.
pub fn build_random_target_pairs(log: &[InteractionRecord], world: &World, seed: u64) -> Result<PairSet> {
    build_pairs_with(log, world, |rec| {
        if rec.images.is_empty() {
            return Ok(None);
        }
        let mut rng = seed::rng(seed, "random-target", rec.record_id);
        Ok(Some(rng.random_range(0..rec.images.len())))
    })
}

fn build_pairs_with<F>(log: &[InteractionRecord], world: &World, pick: F) -> Result<PairSet>
where
    F: Fn(&InteractionRecord) -> Result<Option<usize>> + Sync,
{
    let picked = exec::try_map(log, |rec| -> Result<Option<PreferencePair>> {
        check_aligned(rec)?;
        let Some(i) = pick(rec)? else {
            return Ok(None);
        };
        Ok(Some(PreferencePair {
            record_id: rec.record_id,
            user_prompt: user_prompt_of(rec, world)?,
            target_image: rec.images[i].clone(),
            target_score: rec.scores[i],
        }))
    })?;
    let skipped = picked.iter().filter(|p| p.is_none()).count();
    Ok(PairSet {
        pairs: picked.into_iter().flatten().collect(),
        skipped,
    })
}

/// Every (prompt, image) whose relevance and quality both clear the thresholds.
pub fn build_decoder_corpus(log: &[InteractionRecord], theta_rel: f64, theta_q: f64, world: &World) -> Result<Vec<DecoderExample>> {
    check_thresholds(theta_rel, theta_q)?;
    let per_record = exec::try_map(log, |rec| -> Result<Vec<DecoderExample>> {
        check_aligned(rec)?;
        let user = user_prompt_of(rec, world)?;
        Ok(rec
            .images
            .iter()
            .filter_map(|img| {
                let relevance = world.relevance(img, &user);
                let quality = world.quality(img);
                (relevance >= theta_rel && quality >= theta_q).then(|| DecoderExample {
                    system_prompt: rec.prompt.clone(),
                    image: img.clone(),
                    relevance,
                    quality,
                })
            })
            .collect::<Vec<_>>())
    })?;
    Ok(per_record.into_iter().flatten().collect())
}

fn check_thresholds(theta_rel: f64, theta_q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&theta_rel) || !(0.0..=1.0).contains(&theta_q) {
        return Err(invalid(format!(
            "thresholds must lie in [0, 1], got relevance {theta_rel} and quality {theta_q}"
        )));
    }
    Ok(())
}

/// Concept-only prompts of 1-3 distinct concepts, independent of the log.
pub fn novice_prompts(world: &World, n: usize, seed: u64) -> Vec<Prompt> {
    let vocab = *world.vocab();
    exec::map_range(n, |i| {
        let mut rng = seed::rng(seed, "novice-prompt", i as u64);
        let mut concepts: Vec<usize> = (0..vocab.n_concepts()).collect();
        rand::seq::SliceRandom::shuffle(concepts.as_mut_slice(), &mut rng);
        let k = rng.random_range(1..=3.min(vocab.n_concepts()));
        Prompt::new(concepts[..k].iter().map(|&j| vocab.concept(j)).collect(), &vocab, world.max_len())
            .expect("short concept prompts are valid")
    })
}

fn check_image(img: &Image, world: &World) -> Result<()> {
    if img.dim() != world.config().d_img || !img.is_finite() {
        return Err(validation("malformed image vector"));
    }
    Ok(())
}

impl PreferencePair {
    pub fn validate(&self, world: &World) -> Result<()> {
        world.check_prompt(&self.user_prompt)?;
        if self.user_prompt.has_style(world.vocab()) {
            return Err(validation("user prompt contains a style token"));
        }
        check_image(&self.target_image, world)?;
        if !(0.0..=1.0).contains(&self.target_score) {
            return Err(validation("target score outside [0, 1]"));
        }
        Ok(())
    }
}

impl DecoderExample {
    pub fn validate(&self, world: &World, theta_rel: f64, theta_q: f64) -> Result<()> {
        world.check_prompt(&self.system_prompt)?;
        check_image(&self.image, world)?;
        if !(self.relevance >= theta_rel && self.relevance <= 1.0) || !(self.quality >= theta_q && self.quality <= 1.0) {
            return Err(validation(format!(
                "example scores ({}, {}) below admission thresholds ({theta_rel}, {theta_q})",
                self.relevance, self.quality
            )));
        }
        Ok(())
    }
}

/// One JSON document per line. An empty slice gives an empty file.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parse a JSON Lines file, validating each item. Errors carry the 1-based line.
pub fn read_jsonl<T, F>(path: &Path, check: F) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    F: Fn(&T) -> Result<()>,
{
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        check(&item).map_err(|e| validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn load_preference_pairs(path: &Path, world: &World) -> Result<Vec<PreferencePair>> {
    read_jsonl(path, |p: &PreferencePair| p.validate(world))
}

pub fn load_decoder_corpus(path: &Path, world: &World, theta_rel: f64, theta_q: f64) -> Result<Vec<DecoderExample>> {
    check_thresholds(theta_rel, theta_q)?;
    read_jsonl(path, |e: &DecoderExample| e.validate(world, theta_rel, theta_q))
}

/// Written next to each dataset file as `<file>.manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub kind: String,
    pub count: usize,
    pub skipped: usize,
    pub theta_rel: Option<f64>,
    pub theta_q: Option<f64>,
    pub world_seed: u64,
    pub world_hash: String,
    /// SHA-256 of the dataset file bytes.
    pub content_sha256: String,
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    dataset.with_file_name(name)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write `items` and the accompanying manifest; returns the manifest.
pub fn persist_dataset<T: Serialize>(
    path: &Path,
    items: &[T],
    kind: &str,
    skipped: usize,
    thresholds: Option<(f64, f64)>,
    world: &World,
) -> Result<DatasetManifest> {
    write_jsonl(path, items)?;
    let manifest = DatasetManifest {
        kind: kind.to_string(),
        count: items.len(),
        skipped,
        theta_rel: thresholds.map(|t| t.0),
        theta_q: thresholds.map(|t| t.1),
        world_seed: world.config().seed,
        world_hash: world.hash(),
        content_sha256: file_sha256(path)?,
    };
    let mp = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{sample_log, WorldConfig};

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    fn record(id: u64, scores: Vec<f64>, w: &World) -> InteractionRecord {
        let prompt = w.vocab().parse_prompt("c1 c3 s2", 12).unwrap();
        let images = (0..scores.len()).map(|k| Image(vec![k as f64; 16])).collect();
        InteractionRecord {
            record_id: id,
            prompt,
            images,
            scores,
        }
    }

    #[test]
    fn argmax_with_ties() {
        assert_eq!(argmax_first(&[0.2, 0.9, 0.5]), Some(1));
        assert_eq!(argmax_first(&[0.7, 0.7]), Some(0));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn pairs_skip_empty_and_reject_misaligned() {
        let w = world();
        let log = vec![record(0, vec![0.2, 0.9, 0.5], &w), record(1, vec![], &w)];
        let set = build_preference_pairs(&log, &w).unwrap();
        assert_eq!(set.skipped, 1);
        assert_eq!(set.pairs.len(), 1);
        assert_eq!(set.pairs[0].target_image, Image(vec![1.0; 16]));
        assert_eq!(set.pairs[0].user_prompt, w.vocab().parse_prompt("c1 c3", 12).unwrap());
        let mut bad = record(5, vec![0.1, 0.2], &w);
        bad.scores.pop();
        let err = build_preference_pairs(&[bad], &w).unwrap_err().to_string();
        assert!(err.contains("record 5"), "{err}");
    }

    #[test]
    fn vacuous_thresholds_keep_everything() {
        let w = world();
        let log = sample_log(&w, 30, 4, 0.5, 3).unwrap();
        assert_eq!(build_decoder_corpus(&log, 0.0, 0.0, &w).unwrap().len(), 120);
        assert!(build_decoder_corpus(&log, 1.5, 0.0, &w).is_err());
    }

    #[test]
    fn random_targets_come_from_the_record() {
        let w = world();
        let log = sample_log(&w, 40, 4, 0.5, 3).unwrap();
        let set = build_random_target_pairs(&log, &w, 9).unwrap();
        for (p, rec) in set.pairs.iter().zip(&log) {
            assert!(rec.images.contains(&p.target_image));
        }
        assert_eq!(set, build_random_target_pairs(&log, &w, 9).unwrap());
    }

    #[test]
    fn manifest_sits_next_to_dataset() {
        assert_eq!(manifest_path(Path::new("/a/b/pairs.jsonl")), PathBuf::from("/a/b/pairs.jsonl.manifest.json"));
    }
}
