use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Image, Prompt, World};
use crate::error::{invalid, validation, Error, Result};
use crate::{exec, seed};

/// One logged generation: a prompt, its images, and their preference scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionRecord {
    pub record_id: u64,
    pub prompt: Prompt,
    pub images: Vec<Image>,
    pub scores: Vec<f64>,
}

impl InteractionRecord {
    pub fn validate(&self, world: &World) -> Result<()> {
        world
            .check_prompt(&self.prompt)
            .map_err(|e| validation(format!("record {}: {e}", self.record_id)))?;
        if self.images.len() != self.scores.len() {
            return Err(validation(format!(
                "record {}: {} images but {} scores",
                self.record_id,
                self.images.len(),
                self.scores.len()
            )));
        }
        for img in &self.images {
            if img.dim() != world.config().d_img || !img.is_finite() {
                return Err(validation(format!(
                    "record {}: malformed image vector",
                    self.record_id
                )));
            }
        }
        if self.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(validation(format!(
                "record {}: score outside [0, 1]",
                self.record_id
            )));
        }
        Ok(())
    }
}

/// Draw a synthetic interaction log.
///
/// Every record has 1-3 distinct concepts in random order; with probability
/// `expert_fraction` it is an expert prompt and gets 1-3 distinct style tokens
/// appended. Images are noisy generations scored against the prompt's
/// concept-only projection. Record `r` depends only on `(seed, r)`.
pub fn sample_log(
    world: &World,
    n_records: usize,
    images_per_prompt: usize,
    expert_fraction: f64,
    seed: u64,
) -> Result<Vec<InteractionRecord>> {
    if n_records == 0 || images_per_prompt == 0 {
        return Err(invalid("sample_log needs positive counts"));
    }
    if !(0.0..=1.0).contains(&expert_fraction) {
        return Err(invalid("expert_fraction must lie in [0, 1]"));
    }
    let vocab = *world.vocab();
    let nc = vocab.n_concepts();
    let ns = vocab.n_styles();
    exec::map_range(n_records, |r| {
        let mut rng = seed::rng(seed, "log-record", r as u64);
        let mut concepts: Vec<usize> = (0..nc).collect();
        concepts.shuffle(&mut rng);
        let k = rng.random_range(1..=3.min(nc));
        let mut tokens: Vec<u32> = concepts[..k].iter().map(|&j| vocab.concept(j)).collect();
        if rng.random::<f64>() < expert_fraction {
            let mut styles: Vec<usize> = (0..ns).collect();
            styles.shuffle(&mut rng);
            let m = rng.random_range(1..=3.min(ns));
            tokens.extend(styles[..m].iter().map(|&j| vocab.style(j)));
        }
        let prompt = Prompt::new(tokens, &vocab, world.max_len())?;
        let user = prompt
            .concept_projection(&vocab)
            .expect("sampled prompts contain a concept");
        let images = world.generate(&prompt, images_per_prompt, seed::derive(seed, "log-noise", r as u64))?;
        let scores = images.iter().map(|i| world.preference(i, &user)).collect();
        Ok(InteractionRecord {
            record_id: r as u64,
            prompt,
            images,
            scores,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_log(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    crate::data::write_jsonl(path, records)
}

/// Read a JSON Lines log and validate every record against `world`.
pub fn load_log(path: &Path, world: &World) -> Result<Vec<InteractionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InteractionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate(world)?;
        out.push(rec);
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    #[test]
    fn shape_contract() {
        let log = sample_log(&world(), 10, 4, 0.5, 3).unwrap();
        assert_eq!(log.len(), 10);
        for r in &log {
            assert_eq!(r.images.len(), 4);
            assert_eq!(r.scores.len(), 4);
        }
    }

    #[test]
    fn same_seed_same_log() {
        let w = world();
        assert_eq!(sample_log(&w, 20, 3, 0.5, 9).unwrap(), sample_log(&w, 20, 3, 0.5, 9).unwrap());
        assert_ne!(sample_log(&w, 20, 3, 0.5, 9).unwrap(), sample_log(&w, 20, 3, 0.5, 10).unwrap());
    }

    #[test]
    fn expert_and_novice_fractions() {
        let w = world();
        let v = *w.vocab();
        assert!(sample_log(&w, 50, 1, 1.0, 1).unwrap().iter().all(|r| r.prompt.has_style(&v)));
        assert!(sample_log(&w, 50, 1, 0.0, 1).unwrap().iter().all(|r| !r.prompt.has_style(&v)));
    }

    #[test]
    fn jsonl_round_trip() {
        let w = world();
        let log = sample_log(&w, 5, 2, 0.5, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_log(&path, &log).unwrap();
        assert_eq!(load_log(&path, &w).unwrap(), log);
    }
}
