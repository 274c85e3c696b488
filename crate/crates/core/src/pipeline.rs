//! Experiment stages over an output directory. Each stage reads the
//! artifacts of earlier stages, writes its own, and returns a JSON summary.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{load_bundle, load_decoder, load_encoder, save_bundle, save_decoder, save_encoder, store_hash};
use crate::config::RunConfig;
use crate::data::{
    build_decoder_corpus, build_preference_pairs, build_random_target_pairs, load_decoder_corpus, load_preference_pairs, novice_prompts,
    persist_dataset, file_sha256,
};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate, run_ablation, AblationConfig, AblationData};
use crate::models::{pipeline_refine, RefinerBundle};
use crate::rl::rl_train;
use crate::train::{style_recovery, train_decoder_warmup, train_encoder_warmup};
use crate::world::{load_log, sample_log, write_log, World};
use crate::{oracles, seed};

/// File layout under the output directory.
#[derive(Clone, Debug)]
pub struct Paths {
    root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Paths { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }
    pub fn pairs(&self) -> PathBuf {
        self.root.join("pairs.jsonl")
    }
    pub fn random_pairs(&self) -> PathBuf {
        self.root.join("pairs_random.jsonl")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }
    pub fn heldout_corpus(&self) -> PathBuf {
        self.root.join("corpus_heldout.jsonl")
    }
    pub fn encoder(&self) -> PathBuf {
        self.root.join("encoder")
    }
    pub fn decoder(&self) -> PathBuf {
        self.root.join("decoder")
    }
    pub fn bundle_warm(&self) -> PathBuf {
        self.root.join("bundle_warm")
    }
    pub fn bundle(&self) -> PathBuf {
        self.root.join("bundle")
    }
    pub fn encoder_curve(&self) -> PathBuf {
        self.root.join("encoder").join("loss_curve.json")
    }
    pub fn decoder_curve(&self) -> PathBuf {
        self.root.join("decoder").join("loss_curve.json")
    }
    pub fn reward_curve(&self) -> PathBuf {
        self.root.join("bundle").join("reward_curve.json")
    }
    pub fn rl_manifest(&self) -> PathBuf {
        self.root.join("bundle").join("rl_manifest.json")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval_report.json")
    }
    pub fn eval_warm_report(&self) -> PathBuf {
        self.root.join("eval_warm_report.json")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.json")
    }
    pub fn ablation_table(&self) -> PathBuf {
        self.root.join("ablation.txt")
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// A resolved config, its world, and where artifacts go.
pub struct Experiment {
    pub cfg: RunConfig,
    pub world: World,
    pub paths: Paths,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl Experiment {
    pub fn new(cfg: &RunConfig, out: &Path) -> Result<Self> {
        let cfg = cfg.resolved()?;
        let world = World::new(cfg.world.clone())?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Experiment {
            cfg,
            world,
            paths: Paths::new(out),
        })
    }

    fn init_seed(&self, tag: &str) -> u64 {
        seed::derive(self.cfg.train.seed, tag, 0)
    }

    pub fn world_log(&self) -> Result<Value> {
        let d = &self.cfg.data;
        let log = sample_log(&self.world, d.n_records, d.images_per_prompt, d.expert_fraction, self.cfg.log_seed())?;
        write_log(&self.paths.log(), &log)?;
        Ok(json!({
            "stage": "world-log",
            "records": log.len(),
            "images": log.iter().map(|r| r.images.len()).sum::<usize>(),
            "world_hash": self.world.hash(),
            "log_sha256": file_sha256(&self.paths.log())?,
        }))
    }

    pub fn data_build(&self) -> Result<Value> {
        let d = &self.cfg.data;
        let log = load_log(&self.paths.log(), &self.world)?;
        let mut pairs = build_preference_pairs(&log, &self.world)?;
        let mut random = build_random_target_pairs(&log, &self.world, self.cfg.random_target_seed())?;
        if let Some(cap) = d.max_preference_pairs {
            pairs.pairs.truncate(cap);
            random.pairs.truncate(cap);
        }
        let mut corpus = build_decoder_corpus(&log, d.theta_rel, d.theta_q, &self.world)?;
        let admitted = corpus.len();
        if let Some(cap) = d.max_decoder_examples {
            corpus.truncate(cap);
        }
        let heldout_log = sample_log(&self.world, d.heldout_records, d.images_per_prompt, d.expert_fraction, self.cfg.heldout_seed())?;
        let heldout = build_decoder_corpus(&heldout_log, d.theta_rel, d.theta_q, &self.world)?;
        let th = Some((d.theta_rel, d.theta_q));
        let m_pairs = persist_dataset(&self.paths.pairs(), &pairs.pairs, "preference-pairs", pairs.skipped, None, &self.world)?;
        let m_random = persist_dataset(&self.paths.random_pairs(), &random.pairs, "random-target-pairs", random.skipped, None, &self.world)?;
        let m_corpus = persist_dataset(&self.paths.corpus(), &corpus, "decoder-corpus", 0, th, &self.world)?;
        let m_held = persist_dataset(&self.paths.heldout_corpus(), &heldout, "decoder-corpus-heldout", 0, th, &self.world)?;
        let total_images: usize = log.iter().map(|r| r.images.len()).sum();
        Ok(json!({
            "stage": "data-build",
            "pairs": m_pairs.count,
            "skipped_records": m_pairs.skipped,
            "mean_target_score": mean(&pairs.pairs.iter().map(|p| p.target_score).collect::<Vec<_>>()),
            "random_pairs": m_random.count,
            "admitted": admitted,
            "admission_rate": admitted as f64 / total_images as f64,
            "corpus": m_corpus.count,
            "heldout_corpus": m_held.count,
            "pairs_sha256": m_pairs.content_sha256,
            "corpus_sha256": m_corpus.content_sha256,
        }))
    }

    fn load_pairs(&self) -> Result<Vec<crate::data::PreferencePair>> {
        load_preference_pairs(&self.paths.pairs(), &self.world)
    }

    fn load_corpus(&self, path: &Path) -> Result<Vec<crate::data::DecoderExample>> {
        load_decoder_corpus(path, &self.world, self.cfg.data.theta_rel, self.cfg.data.theta_q)
    }

    pub fn train_encoder(&self) -> Result<Value> {
        let pairs = self.load_pairs()?;
        let t = train_encoder_warmup(&pairs, &self.world, &self.cfg.model, &self.cfg.train)?;
        save_encoder(&self.paths.encoder(), &t.params, &self.cfg.world, self.init_seed("encoder"))?;
        write_json(&self.paths.encoder_curve(), &t.curve)?;
        let (first, last) = (t.curve[0], *t.curve.last().expect("curve has the initial loss"));
        Ok(json!({
            "stage": "train-encoder",
            "pairs": pairs.len(),
            "epochs": self.cfg.train.epochs_enc,
            "initial_loss": first,
            "final_loss": last,
            "final_over_initial": last / first,
            "params_sha256": store_hash(t.params.store()),
        }))
    }

    pub fn train_decoder(&self) -> Result<Value> {
        let corpus = self.load_corpus(&self.paths.corpus())?;
        let t = train_decoder_warmup(&corpus, &self.world, &self.cfg.model, &self.cfg.train, true)?;
        save_decoder(&self.paths.decoder(), &t.params, &self.cfg.world, self.init_seed("decoder"))?;
        write_json(&self.paths.decoder_curve(), &t.curve)?;
        let heldout = self.load_corpus(&self.paths.heldout_corpus())?;
        let recovery = style_recovery(&t.params, &self.world, &heldout)?;
        let last = *t.curve.last().expect("curve has the initial loss");
        let ln_v = (self.world.vocab().size() as f64).ln();
        Ok(json!({
            "stage": "train-decoder",
            "examples": corpus.len(),
            "epochs": self.cfg.train.epochs_dec,
            "initial_loss": t.curve[0],
            "final_loss": last,
            "final_over_ln_vocab": last / ln_v,
            "heldout_style_recovery": recovery,
            "params_sha256": store_hash(t.params.store()),
        }))
    }

    pub fn train_rl(&self) -> Result<Value> {
        let enc = load_encoder(&self.paths.encoder(), &self.cfg.world)?;
        let dec = load_decoder(&self.paths.decoder(), &self.cfg.world)?;
        let warm = RefinerBundle::new(enc, dec, true, &self.cfg.world)?;
        save_bundle(&self.paths.bundle_warm(), &warm, self.init_seed("bundle"))?;
        let prompts: Vec<_> = self.load_pairs()?.into_iter().map(|p| p.user_prompt).collect();
        let run = rl_train(&warm, &prompts, &self.world, &self.cfg.rl)?;
        save_bundle(&self.paths.bundle(), &run.bundle, self.init_seed("bundle"))?;
        write_json(&self.paths.reward_curve(), &run.reward_curve)?;
        let dec_before = store_hash(warm.decoder.store());
        let dec_after = store_hash(run.bundle.decoder.store());
        let c = &run.reward_curve;
        let w = 50.min(c.len());
        let (first, last) = (mean(&c[..w]), mean(&c[c.len() - w..]));
        write_json(
            &self.paths.rl_manifest(),
            &json!({
                "config": self.cfg.rl,
                "prompts": prompts.len(),
                "initial_encoder_sha256": store_hash(warm.encoder.store()),
                "final_encoder_sha256": store_hash(run.bundle.encoder.store()),
                "decoder_sha256_before": dec_before,
                "decoder_sha256_after": dec_after,
            }),
        )?;
        Ok(json!({
            "stage": "train-rl",
            "steps": c.len(),
            "first_window_reward": first,
            "last_window_reward": last,
            "decoder_unchanged": dec_before == dec_after,
            "encoder_sha256": store_hash(run.bundle.encoder.store()),
        }))
    }

    pub fn heldout_prompts(&self) -> Vec<crate::world::Prompt> {
        novice_prompts(&self.world, self.cfg.eval.n_prompts, self.cfg.heldout_seed())
    }

    pub fn eval(&self) -> Result<Value> {
        let bundle = load_bundle(&self.paths.bundle(), &self.cfg.world)?;
        let warm = load_bundle(&self.paths.bundle_warm(), &self.cfg.world)?;
        let prompts = self.heldout_prompts();
        let report = evaluate(&bundle, &prompts, &self.world, &self.cfg.eval)?;
        let warm_report = evaluate(&warm, &prompts, &self.world, &self.cfg.eval)?;
        write_json(&self.paths.eval_report(), &report)?;
        write_json(&self.paths.eval_warm_report(), &warm_report)?;
        Ok(json!({
            "stage": "eval",
            "prompts": prompts.len(),
            "mean_baseline": report.mean_baseline,
            "mean_refined": report.mean_refined,
            "mean_refined_warmup_only": warm_report.mean_refined,
            "win_pct": report.win_pct,
            "tie_pct": report.tie_pct,
            "loss_pct": report.loss_pct,
            "oracle_gap_ratio": report.oracle_gap_ratio,
            "prefix_violations": report.prefix_violations,
        }))
    }

    pub fn ablate(&self) -> Result<Value> {
        let best = self.load_pairs()?;
        let random = load_preference_pairs(&self.paths.random_pairs(), &self.world)?;
        let corpus = self.load_corpus(&self.paths.corpus())?;
        let rl_prompts: Vec<_> = best.iter().map(|p| p.user_prompt.clone()).collect();
        let eval_prompts = self.heldout_prompts();
        let data = AblationData {
            best_pairs: &best,
            random_pairs: &random,
            corpus: &corpus,
            rl_prompts: &rl_prompts,
            eval_prompts: &eval_prompts,
        };
        let cfg = AblationConfig {
            model: &self.cfg.model,
            train: &self.cfg.train,
            rl: &self.cfg.rl,
            eval: &self.cfg.eval,
        };
        let table = run_ablation(&data, &self.world, &cfg).map_err(|f| f.error)?;
        write_json(&self.paths.ablation(), &table)?;
        let text = table.render();
        std::fs::write(self.paths.ablation_table(), &text).map_err(|e| Error::io(self.paths.ablation_table(), e))?;
        let cells: Vec<Value> = table
            .cells
            .iter()
            .map(|c| json!({"variant": c.variant, "rl": c.with_rl, "mean_refined": c.report.mean_refined, "win_pct": c.report.win_pct}))
            .collect();
        Ok(json!({
            "stage": "ablate",
            "cells": cells,
            "ordering_without_rl": table.ordering_without_rl,
            "ordering_with_rl": table.ordering_with_rl,
        }))
    }

    pub fn refine(&self, prompt: &str) -> Result<Value> {
        let bundle = load_bundle(&self.paths.bundle(), &self.cfg.world)?;
        let u = self.world.vocab().parse_prompt(prompt, self.world.max_len())?;
        if u.has_style(self.world.vocab()) {
            return Err(invalid("user prompts contain concept tokens only"));
        }
        let s = pipeline_refine(&bundle, &u)?;
        Ok(json!({
            "stage": "refine",
            "prompt": self.world.vocab().render(u.tokens()),
            "refined": self.world.vocab().render(s.tokens()),
        }))
    }

    /// World log through evaluation, in order.
    pub fn run_all(&self) -> Result<Vec<Value>> {
        Ok(vec![
            self.world_log()?,
            self.data_build()?,
            self.train_encoder()?,
            self.train_decoder()?,
            self.train_rl()?,
            self.eval()?,
        ])
    }
}

/// Exact-algebra sweep over seeded discrete instances.
pub fn oracle_check(instances: usize, seed: u64) -> Result<(bool, Value)> {
    if instances == 0 {
        return Err(invalid("need at least one instance"));
    }
    let r = oracles::sweep(seed, instances)?;
    let ok = r.passed();
    Ok((
        ok,
        json!({
            "stage": "oracle-check",
            "passed": ok,
            "report": r,
        }),
    ))
}
