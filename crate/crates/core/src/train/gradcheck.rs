use rand::seq::index;

use crate::error::{invalid, Error, Result};
use crate::models::{encoder_forward, DecoderParams, EncoderParams, ParamStore, PivotRep};
use crate::seed;
use crate::world::Prompt;

use super::losses::lm_loss_graph;

pub const MAX_COORDS: usize = 200;
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub coords: usize,
    pub max_rel_error: f64,
}

/// Compare `analytic` with central differences of `loss` at up to
/// [`MAX_COORDS`] seeded coordinates of `theta`.
///
/// The relative error of one coordinate is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(loss: F, theta: &[f64], analytic: &[f64], n_coords: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if theta.len() != analytic.len() {
        return Err(invalid("gradient and parameter vectors differ in length"));
    }
    if n_coords == 0 || n_coords > MAX_COORDS {
        return Err(invalid(format!("coordinate count must be in 1..={MAX_COORDS}")));
    }
    let k = n_coords.min(theta.len());
    let mut rng = seed::rng(seed, "grad-check", 0);
    let mut coords = index::sample(&mut rng, theta.len(), k).into_vec();
    coords.sort_unstable();
    let errs = crate::exec::try_map(&coords, |&i| {
        let mut t = theta.to_vec();
        t[i] = theta[i] + FD_STEP;
        let up = loss(&t)?;
        t[i] = theta[i] - FD_STEP;
        let down = loss(&t)?;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        Ok((a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR))
    })?;
    Ok(GradCheck {
        coords: k,
        max_rel_error: errs.into_iter().fold(0.0, f64::max),
    })
}

fn with_flat(store: &ParamStore, theta: &[f64]) -> Result<ParamStore> {
    let mut s = store.clone();
    s.assign_flat(theta)?;
    Ok(s)
}

/// Mean MSE of the encoder over `batch`, with its flat gradient.
pub fn encoder_batch_loss(enc: &EncoderParams, batch: &[(Prompt, PivotRep)]) -> Result<(f64, Vec<f64>)> {
    let (loss, grads) = super::batch_grads(enc.store(), batch, |g, p, (u, target)| {
        let pred = enc.forward_graph(g, p, u.tokens())?;
        let t = g.constant(target.as_tensor().clone());
        Ok(g.mse(pred, t))
    })?;
    let n = batch.len() as f64;
    Ok((loss / n, grads.iter().flat_map(|t| t.data().iter().map(move |v| v / n)).collect()))
}

/// Mean per-token LM loss of the decoder over `batch`, with its flat gradient.
pub fn decoder_batch_loss(dec: &DecoderParams, batch: &[(PivotRep, Prompt)]) -> Result<(f64, Vec<f64>)> {
    let (loss, grads) = super::batch_grads(dec.store(), batch, |g, p, (pivot, s)| {
        let pv = g.constant(pivot.as_tensor().clone());
        lm_loss_graph(g, p, dec, pv, s)
    })?;
    let n = batch.len() as f64;
    Ok((loss / n, grads.iter().flat_map(|t| t.data().iter().map(move |v| v / n)).collect()))
}

pub fn encoder_grad_check(enc: &EncoderParams, batch: &[(Prompt, PivotRep)], n_coords: usize, seed: u64) -> Result<GradCheck> {
    if batch.is_empty() {
        return Err(invalid("gradient check needs a nonempty batch"));
    }
    let (_, analytic) = encoder_batch_loss(enc, batch)?;
    let theta = enc.store().flatten();
    grad_check(
        |t| {
            let mut e = enc.clone();
            *e.store_mut() = with_flat(enc.store(), t)?;
            let mut total = 0.0;
            for (u, target) in batch {
                total += super::mse_loss(&encoder_forward(&e, u.tokens())?, target)?;
            }
            Ok(total / batch.len() as f64)
        },
        &theta,
        &analytic,
        n_coords,
        seed,
    )
}

pub fn decoder_grad_check(dec: &DecoderParams, batch: &[(PivotRep, Prompt)], n_coords: usize, seed: u64) -> Result<GradCheck> {
    if batch.is_empty() {
        return Err(invalid("gradient check needs a nonempty batch"));
    }
    let (_, analytic) = decoder_batch_loss(dec, batch)?;
    let theta = dec.store().flatten();
    grad_check(
        |t| {
            let mut d = dec.clone();
            *d.store_mut() = with_flat(dec.store(), t)?;
            let mut total = 0.0;
            for (pivot, s) in batch {
                total += super::lm_loss(&d, pivot, s)?;
            }
            Ok(total / batch.len() as f64)
        },
        &theta,
        &analytic,
        n_coords,
        seed,
    )
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_probe() {
        let theta: Vec<f64> = (0..8).map(|i| 1.0 + 0.125 * i as f64).collect();
        let loss = |t: &[f64]| Ok(t.iter().enumerate().map(|(i, v)| (1.0 + 0.5 * i as f64) * v * v).sum::<f64>());
        let grad: Vec<f64> = theta.iter().enumerate().map(|(i, v)| 2.0 * (1.0 + 0.5 * i as f64) * v).collect();
        let r = grad_check(loss, &theta, &grad, 8, 1).unwrap();
        assert_eq!(r.coords, 8);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let theta = vec![1.0, 2.0];
        let loss = |t: &[f64]| Ok(t[0] * t[0] + t[1]);
        let r = grad_check(loss, &theta, &[2.0, 0.5], 2, 1).unwrap();
        assert!(r.max_rel_error > 0.4);
        assert!(grad_check(loss, &theta, &[2.0, 1.0], 201, 1).is_err());
        assert!(grad_check(|_: &[f64]| Ok(f64::NAN), &theta, &[0.0, 0.0], 2, 1).is_err());
    }
}
