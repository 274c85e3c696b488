//! Supervised warm-up: user prompt to pivot regression, and pivot-conditioned
//! language modeling of system prompts.

mod gradcheck;
mod losses;

pub use gradcheck::{
    decoder_batch_loss, decoder_grad_check, encoder_batch_loss, encoder_grad_check, grad_check, GradCheck, FD_STEP, MAX_COORDS,
};
pub use losses::{lm_loss, lm_loss_from_logits, mse_loss};
pub(crate) use losses::lm_loss_graph;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Graph, Var};
use crate::data::{DecoderExample, PreferencePair};
use crate::error::{invalid, Error, Result};
use crate::models::{DecoderParams, EncoderParams, ModelConfig, ModelDims, ParamStore, PivotRep};
use crate::tensor::Tensor;
use crate::world::{Prompt, World};
use crate::{exec, seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_enc: usize,
    pub lr_enc: f64,
    pub epochs_dec: usize,
    pub lr_dec: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_enc: 3,
            lr_enc: 0.1,
            epochs_dec: 2,
            lr_dec: 0.05,
            batch_size: 16,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        for lr in [self.lr_enc, self.lr_dec] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(invalid("learning rates must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained<P> {
    pub params: P,
    /// Mean loss over the whole dataset; entry 0 is before any update,
    /// entry `e` after epoch `e`.
    pub curve: Vec<f64>,
}

/// Sum of per-item losses and of their parameter gradients, in item order.
pub(crate) fn batch_grads<T, F>(store: &ParamStore, items: &[T], loss: F) -> Result<(f64, Vec<Tensor>)>
where
    T: Sync,
    F: Fn(&mut Graph, Bound, &T) -> Result<Var> + Sync,
{
    let per_item = exec::try_map(items, |item| {
        let mut g = Graph::new();
        let p = g.bind(store.tensors(), true);
        let l = loss(&mut g, p, item)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok((v, g.backward(l).collect(p, store.tensors())))
    })?;
    let mut total = 0.0;
    let mut acc: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
    for (v, grads) in per_item {
        total += v;
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.add_assign(g);
        }
    }
    Ok((total, acc))
}

/// Plain minibatch SGD over a shuffled dataset. `loss` maps one example to a
/// scalar node; `full_loss` evaluates the dataset mean after each epoch.
#[allow(clippy::too_many_arguments)]
fn sgd_fit<T, F, L>(store: &mut ParamStore, data: &[T], epochs: usize, lr: f64, batch_size: usize, seed: u64, tag: &str, loss: F, full_loss: L) -> Result<Vec<f64>>
where
    T: Sync,
    F: Fn(&ParamStore, &mut Graph, Bound, &T) -> Result<Var> + Sync,
    L: Fn(&ParamStore) -> Result<f64>,
{
    let mut curve = vec![full_loss(store)?];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut seed::rng(seed, tag, epoch as u64));
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&T> = chunk.iter().map(|&i| &data[i]).collect();
            let snapshot = &*store;
            let (_, mut grads) = batch_grads(snapshot, &batch, |g, p, item| loss(snapshot, g, p, item))?;
            let n = batch.len() as f64;
            grads.iter_mut().for_each(|t| t.scale(1.0 / n));
            store.sgd_step(&grads, lr);
        }
        if !store.is_finite() {
            return Err(Error::NonFinite(format!("{tag} parameters after epoch {epoch}")));
        }
        curve.push(full_loss(store)?);
    }
    Ok(curve)
}

fn mean_over<T: Sync>(items: &[T], f: impl Fn(&T) -> Result<f64> + Sync + Send) -> Result<f64> {
    let v = exec::try_map(items, f)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Regress encoder outputs onto fixed pivot targets.
pub fn fit_encoder(mut enc: EncoderParams, data: &[(Prompt, PivotRep)], epochs: usize, lr: f64, batch_size: usize, seed: u64) -> Result<Trained<EncoderParams>> {
    if data.is_empty() {
        return Err(invalid("encoder training set is empty"));
    }
    let template = enc.clone();
    let curve = sgd_fit(
        enc.store_mut(),
        data,
        epochs,
        lr,
        batch_size,
        seed,
        "encoder-epoch",
        |_, g, p, (u, target)| {
            let pred = template.forward_graph(g, p, u.tokens())?;
            let t = g.constant(target.as_tensor().clone());
            Ok(g.mse(pred, t))
        },
        |store| {
            let mut e = template.clone();
            *e.store_mut() = store.clone();
            mean_over(data, |(u, target)| mse_loss(&crate::models::encoder_forward(&e, u.tokens())?, target))
        },
    )?;
    Ok(Trained { params: enc, curve })
}

/// Teacher-forced language modeling of prompts given fixed pivots.
pub fn fit_decoder(mut dec: DecoderParams, data: &[(PivotRep, Prompt)], epochs: usize, lr: f64, batch_size: usize, seed: u64) -> Result<Trained<DecoderParams>> {
    if data.is_empty() {
        return Err(invalid("decoder training set is empty"));
    }
    let template = dec.clone();
    let curve = sgd_fit(
        dec.store_mut(),
        data,
        epochs,
        lr,
        batch_size,
        seed,
        "decoder-epoch",
        |_, g, p, (pivot, s)| {
            let pv = g.constant(pivot.as_tensor().clone());
            lm_loss_graph(g, p, &template, pv, s)
        },
        |store| {
            let mut d = template.clone();
            *d.store_mut() = store.clone();
            mean_over(data, |(pivot, s)| lm_loss(&d, pivot, s))
        },
    )?;
    Ok(Trained { params: dec, curve })
}

/// Encoder warm-up: fit `encoder(u)` to the frozen image encoding of the
/// preferred image.
pub fn train_encoder_warmup(pairs: &[PreferencePair], world: &World, model: &ModelConfig, cfg: &TrainConfig) -> Result<Trained<EncoderParams>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(invalid("no preference pairs"));
    }
    let data = exec::try_map(pairs, |p| Ok::<_, Error>((p.user_prompt.clone(), world.encode_image(&p.target_image)?)))?;
    let enc = EncoderParams::init(model, ModelDims::from_world(world.config()), seed::derive(cfg.seed, "encoder", 0))?;
    fit_encoder(enc, &data, cfg.epochs_enc, cfg.lr_enc, cfg.batch_size, seed::derive(cfg.seed, "encoder-train", 0))
}

/// Decoder pivots for a corpus: frozen image encodings, or zeros when the
/// decoder is trained without image input.
pub fn decoder_pairs(corpus: &[DecoderExample], world: &World, pivot_conditioned: bool) -> Result<Vec<(PivotRep, Prompt)>> {
    let (k, d) = world.pivot_shape();
    exec::try_map(corpus, |e| {
        let pivot = if pivot_conditioned {
            world.encode_image(&e.image)?
        } else {
            PivotRep::zeros(k, d)
        };
        Ok((pivot, e.system_prompt.clone()))
    })
}

/// Decoder warm-up on an admitted corpus.
pub fn train_decoder_warmup(corpus: &[DecoderExample], world: &World, model: &ModelConfig, cfg: &TrainConfig, pivot_conditioned: bool) -> Result<Trained<DecoderParams>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(invalid("decoder corpus is empty"));
    }
    let data = decoder_pairs(corpus, world, pivot_conditioned)?;
    let dec = DecoderParams::init(model, ModelDims::from_world(world.config()), seed::derive(cfg.seed, "decoder", 0))?;
    fit_decoder(dec, &data, cfg.epochs_dec, cfg.lr_dec, cfg.batch_size, seed::derive(cfg.seed, "decoder-train", 0))
}

/// Fraction of true style tokens that greedy decoding recovers, pooled over
/// examples that have any. The prefix is each prompt's concept projection.
pub fn style_recovery(dec: &DecoderParams, world: &World, corpus: &[DecoderExample]) -> Result<f64> {
    let vocab = *world.vocab();
    let counts = exec::try_map(corpus, |e| {
        let styles: Vec<_> = e.system_prompt.tokens().iter().copied().filter(|&t| vocab.is_style(t)).collect();
        if styles.is_empty() {
            return Ok((0, 0));
        }
        let prefix = e.system_prompt.concept_projection(&vocab).expect("corpus prompts have concepts");
        let pivot = world.encode_image(&e.image)?;
        let out = crate::models::decode(dec, &pivot, &prefix, crate::models::DecodeMode::Greedy, world.max_len())?;
        let hit = styles.iter().filter(|t| out.tokens().contains(t)).count();
        Ok::<_, Error>((hit, styles.len()))
    })?;
    let (hit, total) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        return Err(invalid("no style tokens to recover"));
    }
    Ok(hit as f64 / total as f64)
}
