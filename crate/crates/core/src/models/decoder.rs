use rand::Rng as _;

use crate::autograd::{Bound, Graph, Var};
use crate::error::{invalid, Result};
use crate::seed;
use crate::world::{Prompt, TokenId};

use super::layers::BlockIdx;
use super::{Init, ModelConfig, ModelDims, ParamStore, PivotRep};

#[derive(Clone, Debug, PartialEq)]
struct DecoderLayout {
    proj_w: usize,
    proj_b: usize,
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

/// Prompt decoder: the pivot slots, linearly projected to the model width,
/// form a prefix followed by `BOS` and the prompt tokens; a causal
/// transformer predicts each next token.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    config: ModelConfig,
    dims: ModelDims,
    store: ParamStore,
    layout: DecoderLayout,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

impl DecoderParams {
    pub fn init(config: &ModelConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed, "decoder-init");
        let mut store = ParamStore::new();
        let dm = config.d_model;
        let proj_w = store.add("decoder.proj.w", init.normal(dims.pivot_dim, dm, 1.0 / (dims.pivot_dim as f64).sqrt()));
        let proj_b = store.add("decoder.proj.b", init.zeros(1, dm));
        let tok_emb = store.add("decoder.tok_emb", init.normal(dims.vocab_size(), dm, 0.5));
        let positions = dims.pivot_slots + 1 + dims.max_len;
        let pos_emb = store.add("decoder.pos_emb", init.normal(positions, dm, 0.1));
        let blocks = (0..config.decoder_layers)
            .map(|l| BlockIdx::init(&mut store, &format!("decoder.block{l}"), config, config.decoder_layers, &mut init))
            .collect();
        let lnf_g = store.add("decoder.ln_f.gain", init.ones(1, dm));
        let lnf_b = store.add("decoder.ln_f.bias", init.zeros(1, dm));
        let head_w = store.add("decoder.head.w", init.normal(dm, dims.vocab_size(), 1.0 / (dm as f64).sqrt()));
        let head_b = store.add("decoder.head.b", init.zeros(1, dims.vocab_size()));
        Ok(DecoderParams {
            config: config.clone(),
            dims,
            store,
            layout: DecoderLayout {
                proj_w,
                proj_b,
                tok_emb,
                pos_emb,
                blocks,
                lnf_g,
                lnf_b,
                head_w,
                head_b,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Zero the output head so every position has uniform logits.
    pub fn zero_output_head(&mut self) {
        let (w, b) = (self.layout.head_w, self.layout.head_b);
        self.store.tensors_mut()[w].data_mut().fill(0.0);
        self.store.tensors_mut()[b].data_mut().fill(0.0);
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        let vocab = self.dims.vocab();
        if tokens.len() > self.dims.max_len {
            return Err(invalid(format!(
                "decoder input length {} exceeds max_len {}",
                tokens.len(),
                self.dims.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| !vocab.is_content(t)) {
            return Err(invalid(format!("decoder input has non-content token id {bad}")));
        }
        Ok(())
    }

    /// Logits for every prediction position: row `j` predicts the token after
    /// `tokens[..j]`, so the result has `tokens.len() + 1` rows.
    pub(crate) fn forward_graph(&self, g: &mut Graph, p: Bound, pivot: Var, tokens: &[TokenId]) -> Result<Var> {
        self.check_tokens(tokens)?;
        if g.value(pivot).shape() != (self.dims.pivot_slots, self.dims.pivot_dim) {
            return Err(invalid(format!(
                "pivot has shape {:?}, expected {:?}",
                g.value(pivot).shape(),
                (self.dims.pivot_slots, self.dims.pivot_dim)
            )));
        }
        let l = &self.layout;
        let k = self.dims.pivot_slots;
        let slots = g.matmul(pivot, p.at(l.proj_w));
        let slots = g.add_row(slots, p.at(l.proj_b));
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(self.dims.vocab().bos() as usize);
        ids.extend(tokens.iter().map(|&t| t as usize));
        let emb = g.gather(p.at(l.tok_emb), &ids);
        let seq = g.concat_rows(&[slots, emb]);
        let total = k + ids.len();
        let pos = g.gather(p.at(l.pos_emb), &(0..total).collect::<Vec<_>>());
        let mut x = g.add(seq, pos);
        let causal: Vec<Vec<bool>> = (0..total).map(|r| (0..total).map(|c| c <= r).collect()).collect();
        for b in &l.blocks {
            x = b.forward(g, p, x, None, &causal, self.config.heads);
        }
        let h = g.gather(x, &(k..total).collect::<Vec<_>>());
        let h = g.layer_norm(h, p.at(l.lnf_g), p.at(l.lnf_b));
        let logits = g.matmul(h, p.at(l.head_w));
        Ok(g.add_row(logits, p.at(l.head_b)))
    }
}

/// Logits at every prediction position, one row per position.
pub fn decoder_all_logits(params: &DecoderParams, pivot: &PivotRep, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
    params.dims.check_pivot(pivot)?;
    let mut g = Graph::new();
    let p = g.bind(params.store.tensors(), false);
    let pv = g.constant(pivot.as_tensor().clone());
    let out = params.forward_graph(&mut g, p, pv, tokens)?;
    let t = g.value(out);
    Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
}

/// Next-token logits after `tokens_so_far`.
pub fn decoder_logits(params: &DecoderParams, pivot: &PivotRep, tokens_so_far: &[TokenId]) -> Result<Vec<f64>> {
    Ok(decoder_all_logits(params, pivot, tokens_so_far)?
        .pop()
        .expect("at least one prediction row"))
}

/// Lowest index among the maxima of allowed entries.
pub(crate) fn argmax_allowed(logits: &[f64], allowed: &[bool]) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (j, &v) in logits.iter().enumerate() {
        if allowed[j] && (best.0 == usize::MAX || v > best.1) {
            best = (j, v);
        }
    }
    best.0
}

/// Draw from `softmax(logits / temperature)` over allowed entries using one
/// uniform variate `u` in `[0, 1)`.
pub(crate) fn sample_allowed(logits: &[f64], allowed: &[bool], temperature: f64, u: f64) -> usize {
    let max = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(v, _)| *v / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .zip(allowed)
        .map(|(v, &a)| if a { (v / temperature - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let target = u * total;
    let mut last = 0;
    for (j, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            acc += w;
            last = j;
            if target < acc {
                return j;
            }
        }
    }
    last
}

/// Expand `prefix` token by token until `EOS` or `max_len` tokens.
/// Never emits `BOS` or `PAD`.
pub fn decode(params: &DecoderParams, pivot: &PivotRep, prefix: &Prompt, mode: DecodeMode, max_len: usize) -> Result<Prompt> {
    params.dims.check_pivot(pivot)?;
    if prefix.len() >= max_len {
        return Err(invalid(format!(
            "prefix length {} leaves no room under max_len {max_len}",
            prefix.len()
        )));
    }
    if max_len > params.dims.max_len {
        return Err(invalid(format!("max_len {max_len} exceeds model limit {}", params.dims.max_len)));
    }
    params.check_tokens(prefix.tokens())?;
    if let DecodeMode::Sample { temperature, .. } = mode {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(invalid("sampling temperature must be positive"));
        }
    }
    let allowed = params.dims.emit_mask();
    let eos = params.dims.vocab().eos();
    let mut rng = match mode {
        DecodeMode::Sample { seed: s, .. } => Some(seed::rng(s, "decode-sample", 0)),
        DecodeMode::Greedy => None,
    };
    let mut tokens = prefix.tokens().to_vec();
    while tokens.len() < max_len {
        let logits = decoder_logits(params, pivot, &tokens)?;
        let next = match (mode, rng.as_mut()) {
            (DecodeMode::Sample { temperature, .. }, Some(r)) => sample_allowed(&logits, &allowed, temperature, r.random::<f64>()),
            _ => argmax_allowed(&logits, &allowed),
        } as TokenId;
        if next == eos {
            break;
        }
        tokens.push(next);
    }
    Ok(Prompt::from_raw(tokens))
}
