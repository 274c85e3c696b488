use crate::autograd::{Bound, Graph, Var};

use super::{Init, ModelConfig, ParamStore};

/// Indices of one pre-norm attention + feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl BlockIdx {
    pub(crate) fn init(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, n_layers: usize, init: &mut Init) -> Self {
        let dm = cfg.d_model;
        let std = 1.0 / (dm as f64).sqrt();
        let resid = std / (2.0 * n_layers.max(1) as f64).sqrt();
        let mut add = |name: &str, t| store.add(format!("{prefix}.{name}"), t);
        BlockIdx {
            ln1_g: add("ln1.gain", init.ones(1, dm)),
            ln1_b: add("ln1.bias", init.zeros(1, dm)),
            wq: add("attn.wq", init.normal(dm, dm, std)),
            bq: add("attn.bq", init.zeros(1, dm)),
            wk: add("attn.wk", init.normal(dm, dm, std)),
            bk: add("attn.bk", init.zeros(1, dm)),
            wv: add("attn.wv", init.normal(dm, dm, std)),
            bv: add("attn.bv", init.zeros(1, dm)),
            wo: add("attn.wo", init.normal(dm, dm, resid)),
            bo: add("attn.bo", init.zeros(1, dm)),
            ln2_g: add("ln2.gain", init.ones(1, dm)),
            ln2_b: add("ln2.bias", init.zeros(1, dm)),
            w1: add("ff.w1", init.normal(dm, cfg.d_ff, std)),
            b1: add("ff.b1", init.zeros(1, cfg.d_ff)),
            w2: add("ff.w2", init.normal(cfg.d_ff, dm, resid / 2f64.sqrt())),
            b2: add("ff.b2", init.zeros(1, dm)),
        }
    }

    /// `x + Attn(LN(x), kv) ; x + FF(LN(x))`. Self-attention when `kv` is `None`.
    pub(crate) fn forward(&self, g: &mut Graph, p: Bound, x: Var, kv: Option<Var>, mask: &[Vec<bool>], heads: usize) -> Var {
        let h = g.layer_norm(x, p.at(self.ln1_g), p.at(self.ln1_b));
        let source = kv.unwrap_or(h);
        let a = self.attention(g, p, h, source, mask, heads);
        let x = g.add(x, a);
        let h = g.layer_norm(x, p.at(self.ln2_g), p.at(self.ln2_b));
        let f = g.matmul(h, p.at(self.w1));
        let f = g.add_row(f, p.at(self.b1));
        let f = g.gelu(f);
        let f = g.matmul(f, p.at(self.w2));
        let f = g.add_row(f, p.at(self.b2));
        g.add(x, f)
    }

    fn attention(&self, g: &mut Graph, p: Bound, q_in: Var, kv_in: Var, mask: &[Vec<bool>], heads: usize) -> Var {
        let linear = |g: &mut Graph, x: Var, w: usize, b: usize| {
            let y = g.matmul(x, p.at(w));
            g.add_row(y, p.at(b))
        };
        let q = linear(g, q_in, self.wq, self.bq);
        let k = linear(g, kv_in, self.wk, self.bk);
        let v = linear(g, kv_in, self.wv, self.bv);
        let dm = g.value(q).cols();
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, scale);
                let probs = g.softmax(scores, Some(mask));
                g.matmul(probs, vh)
            })
            .collect();
        let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        linear(g, o, self.wo, self.bo)
    }
}
