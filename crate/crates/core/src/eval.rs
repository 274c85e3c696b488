//! Refinement quality metrics and the ablation grid.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{DecoderExample, PreferencePair};
use crate::error::{invalid, Result};
use crate::models::{pipeline_refine, ModelConfig, RefinerBundle};
use crate::rl::{rl_train, RLConfig};
use crate::train::{train_decoder_warmup, train_encoder_warmup, TrainConfig};
use crate::world::{oracle_best_prompt, Prompt, World, DEFAULT_CANDIDATE_CAP};
use crate::{exec, seed};

/// Differences at or below this are ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Anything that turns a user prompt into a system prompt.
pub trait Refiner: Sync {
    fn name(&self) -> String;
    fn refine(&self, user_prompt: &Prompt) -> Result<Prompt>;
}

/// Leaves prompts unchanged.
pub struct Identity;

impl Refiner for Identity {
    fn name(&self) -> String {
        "identity".into()
    }

    fn refine(&self, user_prompt: &Prompt) -> Result<Prompt> {
        Ok(user_prompt.clone())
    }
}

/// Exhaustive search over prompt extensions.
pub struct OracleRefiner<'a> {
    pub world: &'a World,
    pub max_extra_tokens: usize,
}

impl Refiner for OracleRefiner<'_> {
    fn name(&self) -> String {
        format!("oracle(+{})", self.max_extra_tokens)
    }

    fn refine(&self, user_prompt: &Prompt) -> Result<Prompt> {
        Ok(oracle_best_prompt(self.world, user_prompt, self.max_extra_tokens, DEFAULT_CANDIDATE_CAP)?.prompt)
    }
}

impl Refiner for RefinerBundle {
    fn name(&self) -> String {
        "bundle".into()
    }

    fn refine(&self, user_prompt: &Prompt) -> Result<Prompt> {
        pipeline_refine(self, user_prompt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out novice prompts drawn for evaluation.
    pub n_prompts: usize,
    pub n_images: usize,
    /// Extension budget of the oracle used for the gap ratio; `None` skips it.
    pub oracle_max_extra: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_prompts: 200,
            n_images: 4,
            oracle_max_extra: Some(4),
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Tie,
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEval {
    pub user_prompt: Prompt,
    pub refined: Option<Prompt>,
    pub baseline_score: f64,
    pub refined_score: f64,
    /// Synthetic relevance of the refined images. Not comparable to human
    /// relevance ratings.
    pub refined_relevance: f64,
    pub oracle_score: Option<f64>,
    pub outcome: Outcome,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub refiner: String,
    pub world_hash: String,
    pub n_images: usize,
    pub seed: u64,
    pub prompts: Vec<PromptEval>,
    pub mean_baseline: f64,
    pub mean_refined: f64,
    pub mean_differential: f64,
    pub win_pct: f64,
    pub tie_pct: f64,
    pub loss_pct: f64,
    pub oracle_mean: Option<f64>,
    pub oracle_gap_ratio: Option<f64>,
    pub prefix_violations: usize,
}

/// Per-prompt noise seed: a function of the prompt, not of its position.
fn prompt_seed(seed: u64, u: &Prompt) -> u64 {
    seed::derive(seed, &format!("eval{:?}", u.tokens()), 0)
}

fn mean_images(world: &World, p: &Prompt, user: &Prompt, n: usize, noise: u64) -> Result<(f64, f64)> {
    let imgs = world.generate(p, n, noise)?;
    let pref = imgs.iter().map(|i| world.preference(i, user)).sum::<f64>() / n as f64;
    let rel = imgs.iter().map(|i| world.relevance(i, user)).sum::<f64>() / n as f64;
    Ok((pref, rel))
}

/// Order-independent mean.
fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Compare refined against unrefined generations prompt by prompt.
///
/// Both sides of a prompt share noise seeds. A refinement error counts as a
/// loss with refined score 0 and is noted on the prompt.
pub fn evaluate(refiner: &dyn Refiner, prompts: &[Prompt], world: &World, cfg: &EvalConfig) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(invalid("no evaluation prompts"));
    }
    if cfg.n_images == 0 {
        return Err(invalid("n_images must be positive"));
    }
    let oracle = cfg.oracle_max_extra.map(|m| OracleRefiner { world, max_extra_tokens: m });
    let rows = exec::try_map(prompts, |u| {
        world.check_prompt(u)?;
        let noise = prompt_seed(cfg.seed, u);
        let (baseline_score, _) = mean_images(world, u, u, cfg.n_images, noise)?;
        let oracle_score = match &oracle {
            Some(o) => match o.refine(u) {
                Ok(best) => Some(mean_images(world, &best, u, cfg.n_images, noise)?.0),
                Err(e) if e.is_resource() => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        let row = match refiner.refine(u).and_then(|s| world.check_prompt(&s).map(|_| s)) {
            Ok(s) => {
                let (refined_score, refined_relevance) = mean_images(world, &s, u, cfg.n_images, noise)?;
                let diff = refined_score - baseline_score;
                let outcome = if diff.abs() <= TIE_TOLERANCE {
                    Outcome::Tie
                } else if diff > 0.0 {
                    Outcome::Win
                } else {
                    Outcome::Loss
                };
                PromptEval {
                    user_prompt: u.clone(),
                    refined: Some(s),
                    baseline_score,
                    refined_score,
                    refined_relevance,
                    oracle_score,
                    outcome,
                    error: None,
                }
            }
            Err(e) => PromptEval {
                user_prompt: u.clone(),
                refined: None,
                baseline_score,
                refined_score: 0.0,
                refined_relevance: 0.0,
                oracle_score,
                outcome: Outcome::Loss,
                error: Some(e.to_string()),
            },
        };
        Ok(row)
    })?;
    let n = rows.len() as f64;
    let count = |o: Outcome| rows.iter().filter(|r| r.outcome == o).count() as f64;
    let mean_baseline = sorted_mean(rows.iter().map(|r| r.baseline_score).collect());
    let mean_refined = sorted_mean(rows.iter().map(|r| r.refined_score).collect());
    let oracle_mean = rows
        .iter()
        .map(|r| r.oracle_score)
        .collect::<Option<Vec<_>>>()
        .map(sorted_mean);
    let win_pct = 100.0 * count(Outcome::Win) / n;
    let tie_pct = 100.0 * count(Outcome::Tie) / n;
    let prefix_violations = rows
        .iter()
        .filter(|r| r.refined.as_ref().is_some_and(|s| !s.starts_with(&r.user_prompt)))
        .count();
    Ok(EvalReport {
        refiner: refiner.name(),
        world_hash: world.hash(),
        n_images: cfg.n_images,
        seed: cfg.seed,
        mean_differential: sorted_mean(rows.iter().map(|r| r.refined_score - r.baseline_score).collect()),
        prompts: rows,
        mean_baseline,
        mean_refined,
        win_pct,
        tie_pct,
        loss_pct: 100.0 - win_pct - tie_pct,
        oracle_gap_ratio: oracle_mean.filter(|m| *m > 0.0).map(|m| mean_refined / m),
        oracle_mean,
        prefix_violations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Best-image encoder targets, image-conditioned decoder.
    Full,
    /// Encoder targets are a random image of each record.
    NoUserPivot,
    /// Decoder never sees an image.
    NoPivotSystem,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoUserPivot, Variant::NoPivotSystem];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoUserPivot => "without user-pivot",
            Variant::NoPivotSystem => "without pivot-system",
        }
    }
}

/// Training material shared by every ablation cell.
pub struct AblationData<'a> {
    pub best_pairs: &'a [PreferencePair],
    pub random_pairs: &'a [PreferencePair],
    pub corpus: &'a [DecoderExample],
    pub rl_prompts: &'a [Prompt],
    pub eval_prompts: &'a [Prompt],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub with_rl: bool,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
    /// Per block (without RL, with RL): full >= without user-pivot >= without pivot-system.
    pub ordering_without_rl: bool,
    pub ordering_with_rl: bool,
}

impl AblationTable {
    pub fn cell(&self, variant: Variant, with_rl: bool) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.variant == variant && c.with_rl == with_rl)
    }

    fn ordered(cells: &[AblationCell], with_rl: bool) -> bool {
        let m: Vec<f64> = Variant::ALL
            .iter()
            .filter_map(|v| cells.iter().find(|c| c.variant == *v && c.with_rl == with_rl))
            .map(|c| c.report.mean_refined)
            .collect();
        m.len() == 3 && m[0] >= m[1] && m[1] >= m[2]
    }

    /// Plain-text table: one row per variant, one column pair per block.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} | {:>10} {:>7} | {:>10} {:>7}", "variant", "pref", "win%", "pref+RL", "win%+RL");
        let _ = writeln!(out, "{}", "-".repeat(64));
        for v in Variant::ALL {
            let fmt = |rl: bool| match self.cell(v, rl) {
                Some(c) => format!("{:>10.4} {:>7.1}", c.report.mean_refined, c.report.win_pct),
                None => format!("{:>10} {:>7}", "-", "-"),
            };
            let _ = writeln!(out, "{:<22} | {} | {}", v.label(), fmt(false), fmt(true));
        }
        out
    }
}

/// Partial results when a cell fails.
#[derive(Debug)]
pub struct AblationFailure {
    pub completed: Vec<AblationCell>,
    pub error: crate::Error,
}

impl std::fmt::Display for AblationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ablation stopped after {} cells: {}", self.completed.len(), self.error)
    }
}

impl std::error::Error for AblationFailure {}

pub struct AblationConfig<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub rl: &'a RLConfig,
    pub eval: &'a EvalConfig,
}

/// Train and evaluate the three variants with and without RL. All cells share
/// seeds, so they differ only in their training data and conditioning.
pub fn run_ablation(data: &AblationData, world: &World, cfg: &AblationConfig) -> std::result::Result<AblationTable, AblationFailure> {
    let mut cells = Vec::new();
    let mut enc_best = None;
    let mut dec_cond = None;
    for variant in Variant::ALL {
        let result = (|| -> Result<Vec<AblationCell>> {
            let pairs = if variant == Variant::NoUserPivot { data.random_pairs } else { data.best_pairs };
            let conditioned = variant != Variant::NoPivotSystem;
            let enc = match (variant, &enc_best) {
                (Variant::NoUserPivot, _) | (_, None) => train_encoder_warmup(pairs, world, cfg.model, cfg.train)?.params,
                (_, Some(e)) => Clone::clone(e),
            };
            let dec = match (conditioned, &dec_cond) {
                (true, Some(d)) => Clone::clone(d),
                _ => train_decoder_warmup(data.corpus, world, cfg.model, cfg.train, conditioned)?.params,
            };
            if variant == Variant::Full {
                enc_best = Some(enc.clone());
                dec_cond = Some(dec.clone());
            }
            let warm = RefinerBundle::new(enc, dec, conditioned, world.config())?;
            let tuned = rl_train(&warm, data.rl_prompts, world, cfg.rl)?.bundle;
            let mut out = Vec::new();
            for (with_rl, b) in [(false, &warm), (true, &tuned)] {
                out.push(AblationCell {
                    variant,
                    with_rl,
                    report: evaluate(b, data.eval_prompts, world, cfg.eval)?,
                });
            }
            Ok(out)
        })();
        match result {
            Ok(c) => cells.extend(c),
            Err(error) => return Err(AblationFailure { completed: cells, error }),
        }
    }
    Ok(AblationTable {
        ordering_without_rl: AblationTable::ordered(&cells, false),
        ordering_with_rl: AblationTable::ordered(&cells, true),
        cells,
    })
}
