//! End-to-end policy optimization of the encoder through the frozen decoder.
//!
//! The policy samples a refinement token by token from the decoder,
//! conditioned on the encoder's pivot. Log-probabilities are differentiated
//! through the pivot into encoder parameters only.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{invalid, Error, Result};
use crate::models::{decoder_logits, sample_allowed, RefinerBundle};
use crate::tensor::Tensor;
use crate::world::{Generator, PreferenceModel, Prompt, TokenId, World};
use crate::{exec, seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RLConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_epsilon: f64,
    /// Monte-Carlo images per side of the reward differential.
    pub images_per_prompt: usize,
    /// Sampling temperature of the policy.
    pub temperature: f64,
    /// Gradient passes over each rollout batch.
    pub ppo_epochs: usize,
    /// Weight of the previous baseline in the running mean of batch rewards.
    pub baseline_momentum: f64,
    pub seed: u64,
}

impl Default for RLConfig {
    fn default() -> Self {
        RLConfig {
            steps: 300,
            batch_size: 64,
            lr: 1e-3,
            clip_epsilon: 0.2,
            images_per_prompt: 4,
            temperature: 1.0,
            ppo_epochs: 2,
            baseline_momentum: 0.9,
            seed: 7,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.images_per_prompt == 0 || self.ppo_epochs == 0 {
            return Err(invalid("RL counts must be positive"));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(invalid("clip_epsilon must lie in (0, 1)"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(invalid("lr and temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.baseline_momentum) {
            return Err(invalid("baseline_momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One sampled refinement and what the update needs to know about it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_prompt: Prompt,
    pub refined: Prompt,
    /// Sampled actions: generated tokens, then EOS if it was drawn.
    pub actions: Vec<TokenId>,
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub reward: f64,
    pub advantage: f64,
}

/// Mean preference of images from `refined` minus that of images from
/// `user_prompt`, both scored against `user_prompt`, with image `k` of both
/// sides drawn from the same noise stream.
pub fn compute_reward<G, P>(generator: &G, preference: &P, user_prompt: &Prompt, refined: &Prompt, n_r: usize, seed: u64) -> Result<f64>
where
    G: Generator + ?Sized,
    P: PreferenceModel + ?Sized,
{
    if n_r == 0 {
        return Err(invalid("need at least one image per side"));
    }
    let mean = |p: &Prompt| -> Result<f64> {
        let imgs = generator.generate(p, n_r, seed)?;
        Ok(imgs.iter().map(|i| preference.preference(i, user_prompt)).sum::<f64>() / n_r as f64)
    };
    Ok(mean(refined)? - mean(user_prompt)?)
}

/// Negated clipped surrogate averaged over every action in the batch.
pub fn ppo_objective(batch: &[Trajectory], clip_epsilon: f64) -> Result<f64> {
    Ok(ppo_objective_grad(batch, clip_epsilon)?.0)
}

/// [`ppo_objective`] and its gradient with respect to each `logp_new`.
pub fn ppo_objective_grad(batch: &[Trajectory], clip_epsilon: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let (lp, old, adv) = flatten_batch(batch)?;
    let n = lp.len();
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(n, 1, lp));
    let loss = g.ppo_clip(x, &old, &adv, clip_epsilon, n as f64);
    let grads = g.backward(loss);
    let flat = grads.get(x).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let mut out = Vec::with_capacity(batch.len());
    let mut off = 0;
    for t in batch {
        out.push(flat[off..off + t.logp_new.len()].to_vec());
        off += t.logp_new.len();
    }
    Ok((g.value(loss).item(), out))
}

fn flatten_batch(batch: &[Trajectory]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (mut lp, mut old, mut adv) = (Vec::new(), Vec::new(), Vec::new());
    for t in batch {
        if t.logp_new.len() != t.logp_old.len() {
            return Err(invalid("trajectory log-probability lengths differ"));
        }
        if !t.advantage.is_finite() || t.logp_new.iter().chain(&t.logp_old).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory".into()));
        }
        lp.extend(&t.logp_new);
        old.extend(&t.logp_old);
        adv.extend(std::iter::repeat_n(t.advantage, t.logp_new.len()));
    }
    if lp.is_empty() {
        return Err(invalid("empty trajectory batch"));
    }
    Ok((lp, old, adv))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlRun {
    pub bundle: RefinerBundle,
    /// Mean sampled reward per step.
    pub reward_curve: Vec<f64>,
}

/// Sample one refinement of `u` at the policy temperature.
fn rollout(bundle: &RefinerBundle, u: &Prompt, temperature: f64, rng: &mut seed::Rng) -> Result<(Prompt, Vec<TokenId>)> {
    let max_len = bundle.dims().max_len;
    if u.len() >= max_len {
        return Err(invalid(format!("prompt of length {} leaves no room to refine", u.len())));
    }
    let pivot = bundle.pivot(u)?;
    let allowed = bundle.dims().emit_mask();
    let eos = bundle.dims().vocab().eos();
    let mut tokens = u.tokens().to_vec();
    let mut actions = Vec::new();
    while tokens.len() < max_len {
        let logits = decoder_logits(&bundle.decoder, &pivot, &tokens)?;
        let next = sample_allowed(&logits, &allowed, temperature, rng.random::<f64>()) as TokenId;
        actions.push(next);
        if next == eos {
            break;
        }
        tokens.push(next);
    }
    Ok((Prompt::new(tokens, &bundle.dims().vocab(), max_len)?, actions))
}

/// Policy log-probabilities of a trajectory's actions and, when `grad` is
/// set, their weighted sum's gradient with respect to encoder parameters.
fn policy_logp(bundle: &RefinerBundle, t: &Trajectory, temperature: f64, weights: Option<(&[f64], &[f64], f64, f64)>) -> Result<(Vec<f64>, Option<Vec<Tensor>>)> {
    let mut g = Graph::new();
    let pe = g.bind(bundle.encoder.store().tensors(), weights.is_some());
    let pd = g.bind(bundle.decoder.store().tensors(), false);
    let pivot = if bundle.pivot_conditioned {
        bundle.encoder.forward_graph(&mut g, pe, t.user_prompt.tokens())?
    } else {
        let d = bundle.dims();
        g.constant(Tensor::zeros(d.pivot_slots, d.pivot_dim))
    };
    let logits = bundle.decoder.forward_graph(&mut g, pd, pivot, t.refined.tokens())?;
    let start = t.user_prompt.len();
    let picks: Vec<(usize, usize)> = t.actions.iter().enumerate().map(|(j, &a)| (start + j, a as usize)).collect();
    let allowed = bundle.dims().emit_mask();
    let lp = g.token_log_probs(logits, &picks, 1.0 / temperature, Some(&allowed));
    let values = g.value(lp).data().to_vec();
    let grads = match weights {
        Some((old, adv, eps, norm)) => {
            let loss = g.ppo_clip(lp, old, adv, eps, norm);
            Some(g.backward(loss).collect(pe, bundle.encoder.store().tensors()))
        }
        None => None,
    };
    Ok((values, grads))
}

/// PPO on the encoder with the decoder frozen.
pub fn rl_train(bundle: &RefinerBundle, prompts: &[Prompt], world: &World, cfg: &RLConfig) -> Result<RlRun> {
    cfg.validate()?;
    if bundle.world_hash != world.hash() {
        return Err(Error::HashMismatch {
            stored: bundle.world_hash.clone(),
            expected: world.hash(),
        });
    }
    let mut bundle = bundle.clone();
    if cfg.steps == 0 {
        return Ok(RlRun { bundle, reward_curve: Vec::new() });
    }
    if prompts.is_empty() {
        return Err(invalid("no training prompts"));
    }
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut baseline: Option<f64> = None;
    for step in 0..cfg.steps {
        let step_seed = seed::derive(cfg.seed, "rl-step", step as u64);
        let mut pick = seed::rng(step_seed, "rl-batch", 0);
        let batch: Vec<Prompt> = (0..cfg.batch_size).map(|_| prompts[pick.random_range(0..prompts.len())].clone()).collect();
        let current = &bundle;
        let mut trajs = exec::try_map(&(0..batch.len()).collect::<Vec<_>>(), |&b| {
            let u = &batch[b];
            let mut rng = seed::rng(step_seed, "rollout", b as u64);
            let (refined, actions) = rollout(current, u, cfg.temperature, &mut rng)?;
            let reward = compute_reward(world, world, u, &refined, cfg.images_per_prompt, seed::derive(step_seed, "reward", b as u64))?;
            let mut t = Trajectory {
                user_prompt: u.clone(),
                refined,
                actions,
                logp_new: Vec::new(),
                logp_old: Vec::new(),
                reward,
                advantage: 0.0,
            };
            t.logp_old = policy_logp(current, &t, cfg.temperature, None)?.0;
            t.logp_new = t.logp_old.clone();
            Ok::<_, Error>(t)
        })?;
        let mean_reward = trajs.iter().map(|t| t.reward).sum::<f64>() / trajs.len() as f64;
        let b = baseline.unwrap_or(mean_reward);
        for t in &mut trajs {
            t.advantage = t.reward - b;
        }
        baseline = Some(cfg.baseline_momentum * b + (1.0 - cfg.baseline_momentum) * mean_reward);
        curve.push(mean_reward);

        let norm = trajs.iter().map(|t| t.actions.len()).sum::<usize>() as f64;
        for _ in 0..cfg.ppo_epochs {
            let current = &bundle;
            let per = exec::try_map(&trajs, |t| {
                let adv = vec![t.advantage; t.actions.len()];
                let (_, grads) = policy_logp(current, t, cfg.temperature, Some((&t.logp_old, &adv, cfg.clip_epsilon, norm)))?;
                Ok::<_, Error>(grads.expect("gradients requested"))
            })?;
            let mut acc: Vec<Tensor> = bundle.encoder.store().tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
            for grads in &per {
                for (a, g) in acc.iter_mut().zip(grads) {
                    a.add_assign(g);
                }
            }
            bundle.encoder.store_mut().sgd_step(&acc, cfg.lr);
        }
        if !bundle.encoder.store().is_finite() {
            return Err(Error::NonFinite(format!("encoder parameters after RL step {step}")));
        }
    }
    Ok(RlRun { bundle, reward_curve: curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Image, WorldConfig};

    struct Stub;

    impl Generator for Stub {
        fn generate(&self, prompt: &Prompt, n: usize, _: u64) -> Result<Vec<Image>> {
            Ok(vec![Image(vec![prompt.len() as f64]); n])
        }
    }

    impl PreferenceModel for Stub {
        fn preference(&self, image: &Image, user_prompt: &Prompt) -> f64 {
            if image.0[0] > user_prompt.len() as f64 {
                1.0
            } else {
                0.0
            }
        }
    }

    fn traj(lp: f64, old: f64, adv: f64) -> Trajectory {
        let u = Prompt::from_raw(vec![0]);
        Trajectory {
            user_prompt: u.clone(),
            refined: u,
            actions: vec![14],
            logp_new: vec![lp],
            logp_old: vec![old],
            reward: adv,
            advantage: adv,
        }
    }

    #[test]
    fn reward_bounds() {
        let u = Prompt::from_raw(vec![0]);
        let s = Prompt::from_raw(vec![0, 9]);
        assert_eq!(compute_reward(&Stub, &Stub, &u, &s, 4, 1).unwrap(), 1.0);
        assert_eq!(compute_reward(&Stub, &Stub, &u, &u, 4, 1).unwrap(), 0.0);
        let w = World::new(WorldConfig::default()).unwrap();
        assert_eq!(compute_reward(&w, &w, &s, &s, 4, 9).unwrap(), 0.0);
    }

    #[test]
    fn surrogate_cases() {
        let eps = 0.2;
        let at_one = [traj(-1.0, -1.0, 0.3), traj(-2.0, -2.0, -0.1)];
        let v = ppo_objective(&at_one, eps).unwrap();
        assert!((v + 0.1).abs() < 1e-15);
        let up = [traj((1.0 + 2.0 * eps).ln(), 0.0, 0.5)];
        assert!((ppo_objective(&up, eps).unwrap() + 1.2 * 0.5).abs() < 1e-12);
        let down = [traj((1.0 - 2.0 * eps).ln(), 0.0, -0.5)];
        assert!((ppo_objective(&down, eps).unwrap() - 0.8 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn clipped_batch_has_zero_gradient() {
        let eps = 0.2;
        let batch = [traj(0.5, 0.0, 1.0), traj(-0.5, 0.0, -2.0), traj(0.3, 0.0, 0.7)];
        let (_, grads) = ppo_objective_grad(&batch, eps).unwrap();
        assert!(grads.iter().flatten().all(|&g| g == 0.0));
        let live = [traj(0.0, 0.0, 1.0)];
        assert!(ppo_objective_grad(&live, eps).unwrap().1[0][0] < 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(ppo_objective(&[traj(f64::NAN, 0.0, 1.0)], 0.2).is_err());
        assert!(ppo_objective(&[], 0.2).is_err());
    }
}
