use crate::autograd::{Bound, Graph, Var};
use crate::error::{invalid, Result};
use crate::models::{DecoderParams, PivotRep};
use crate::world::Prompt;

/// Mean squared entrywise difference.
pub fn mse_loss(pred: &PivotRep, target: &PivotRep) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(invalid(format!("mse shapes differ: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let (p, t) = (pred.as_tensor().data(), target.as_tensor().data());
    Ok(p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64)
}

/// Targets for teacher forcing: every prompt token, then EOS.
fn lm_picks(dec: &DecoderParams, prompt: &Prompt) -> Vec<(usize, usize)> {
    let eos = dec.dims().vocab().eos();
    prompt
        .tokens()
        .iter()
        .chain(std::iter::once(&eos))
        .enumerate()
        .map(|(r, &t)| (r, t as usize))
        .collect()
}

/// Mean negative log-likelihood per predicted token (EOS included) as a graph node.
pub(crate) fn lm_loss_graph(g: &mut Graph, p: Bound, dec: &DecoderParams, pivot: Var, prompt: &Prompt) -> Result<Var> {
    if prompt.is_empty() {
        return Err(invalid("language-model target is empty"));
    }
    let logits = dec.forward_graph(g, p, pivot, prompt.tokens())?;
    let lp = g.token_log_probs(logits, &lm_picks(dec, prompt), 1.0, None);
    let m = g.mean(lp);
    Ok(g.scale(m, -1.0))
}

/// Mean per-token negative log-likelihood of `prompt` (plus EOS) given the pivot.
pub fn lm_loss(dec: &DecoderParams, pivot: &PivotRep, prompt: &Prompt) -> Result<f64> {
    if pivot.shape() != (dec.dims().pivot_slots, dec.dims().pivot_dim) {
        return Err(invalid("pivot shape does not match the decoder"));
    }
    let mut g = Graph::new();
    let p = g.bind(dec.store().tensors(), false);
    let pv = g.constant(pivot.as_tensor().clone());
    let loss = lm_loss_graph(&mut g, p, dec, pv, prompt)?;
    Ok(g.value(loss).item())
}

/// The same quantity from precomputed logit rows (row `j` predicts target `j`).
pub fn lm_loss_from_logits(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if logits.len() != targets.len() || targets.is_empty() {
        return Err(invalid("need one logit row per target"));
    }
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn mse_conventions() {
        let a = PivotRep::new(Tensor::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]));
        let b = PivotRep::new(Tensor::from_vec(2, 2, vec![1.25, -1.75, 0.75, 3.25]));
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert!((mse_loss(&a, &b).unwrap() - 0.0625).abs() < 1e-15);
        assert!(mse_loss(&a, &PivotRep::zeros(1, 4)).is_err());
    }

    #[test]
    fn saturated_logits() {
        let mut rows = vec![vec![0.0; 15]; 3];
        let targets = [2, 7, 13];
        for (r, &t) in rows.iter_mut().zip(&targets) {
            r[t] = 30.0;
        }
        assert!(lm_loss_from_logits(&rows, &targets).unwrap() < 1e-9);
        let flat = vec![vec![0.0; 15]; 3];
        assert!((lm_loss_from_logits(&flat, &targets).unwrap() - 15f64.ln()).abs() < 1e-15);
    }
}
