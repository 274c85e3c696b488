use crate::autograd::{Bound, Graph, Var};
use crate::error::{invalid, Result};
use crate::world::TokenId;

use super::layers::BlockIdx;
use super::{Init, ModelConfig, ModelDims, ParamStore, PivotRep};

#[derive(Clone, Debug, PartialEq)]
struct EncoderLayout {
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    queries: usize,
    pivot_blocks: Vec<BlockIdx>,
    lno_g: usize,
    lno_b: usize,
    head_w: usize,
    head_b: usize,
}

/// Preference encoder: a bidirectional transformer over the user prompt,
/// then learned queries that cross-attend to the token states and are
/// projected to the pivot shape with a per-slot bias.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: ModelConfig,
    dims: ModelDims,
    store: ParamStore,
    layout: EncoderLayout,
}

impl EncoderParams {
    pub fn init(config: &ModelConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed, "encoder-init");
        let mut store = ParamStore::new();
        let dm = config.d_model;
        let tok_emb = store.add("encoder.tok_emb", init.normal(dims.vocab_size(), dm, 0.5));
        let pos_emb = store.add("encoder.pos_emb", init.normal(dims.max_len, dm, 0.1));
        let blocks = (0..config.encoder_layers)
            .map(|l| BlockIdx::init(&mut store, &format!("encoder.block{l}"), config, config.encoder_layers, &mut init))
            .collect();
        let lnf_g = store.add("encoder.ln_f.gain", init.ones(1, dm));
        let lnf_b = store.add("encoder.ln_f.bias", init.zeros(1, dm));
        let queries = store.add("encoder.queries", init.normal(dims.pivot_slots, dm, 0.5));
        let pivot_blocks = (0..config.pivot_layers)
            .map(|l| BlockIdx::init(&mut store, &format!("encoder.pivot{l}"), config, config.pivot_layers, &mut init))
            .collect();
        let lno_g = store.add("encoder.ln_out.gain", init.ones(1, dm));
        let lno_b = store.add("encoder.ln_out.bias", init.zeros(1, dm));
        let head_w = store.add("encoder.head.w", init.normal(dm, dims.pivot_dim, 1.0 / (dm as f64).sqrt()));
        let head_b = store.add("encoder.head.b", init.zeros(dims.pivot_slots, dims.pivot_dim));
        Ok(EncoderParams {
            config: config.clone(),
            dims,
            store,
            layout: EncoderLayout {
                tok_emb,
                pos_emb,
                blocks,
                lnf_g,
                lnf_b,
                queries,
                pivot_blocks,
                lno_g,
                lno_b,
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

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<Vec<bool>> {
        let vocab = self.dims.vocab();
        if tokens.is_empty() {
            return Err(invalid("encoder input is empty"));
        }
        if tokens.len() > self.dims.max_len {
            return Err(invalid(format!(
                "encoder input length {} exceeds max_len {}",
                tokens.len(),
                self.dims.max_len
            )));
        }
        let pad: Vec<bool> = tokens.iter().map(|&t| t == vocab.pad()).collect();
        if let Some(&bad) = tokens.iter().find(|&&t| !(vocab.is_content(t) || t == vocab.pad())) {
            return Err(invalid(format!("encoder input has invalid token id {bad}")));
        }
        if pad.iter().all(|&p| p) {
            return Err(invalid("encoder input is all padding"));
        }
        Ok(pad)
    }

    /// Build the forward pass on `g` with parameters already bound as `p`.
    pub(crate) fn forward_graph(&self, g: &mut Graph, p: Bound, tokens: &[TokenId]) -> Result<Var> {
        let pad = self.check_tokens(tokens)?;
        let l = &self.layout;
        let n = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = g.gather(p.at(l.tok_emb), &ids);
        let pos = g.gather(p.at(l.pos_emb), &(0..n).collect::<Vec<_>>());
        let mut x = g.add(tok, pos);

        let key_mask: Vec<Vec<bool>> = (0..n).map(|_| pad.iter().map(|p| !p).collect()).collect();
        for b in &l.blocks {
            x = b.forward(g, p, x, None, &key_mask, self.config.heads);
        }
        let memory = g.layer_norm(x, p.at(l.lnf_g), p.at(l.lnf_b));

        let cross_mask: Vec<Vec<bool>> = (0..self.dims.pivot_slots).map(|_| pad.iter().map(|p| !p).collect()).collect();
        let mut q = p.at(l.queries);
        for b in &l.pivot_blocks {
            q = b.forward(g, p, q, Some(memory), &cross_mask, self.config.heads);
        }
        let h = g.layer_norm(q, p.at(l.lno_g), p.at(l.lno_b));
        let out = g.matmul(h, p.at(l.head_w));
        Ok(g.add(out, p.at(l.head_b)))
    }
}

/// User prompt tokens (optionally PAD-terminated) to a pivot.
pub fn encoder_forward(params: &EncoderParams, tokens: &[TokenId]) -> Result<PivotRep> {
    let mut g = Graph::new();
    let p = g.bind(params.store.tensors(), false);
    let out = params.forward_graph(&mut g, p, tokens)?;
    Ok(PivotRep::new(g.value(out).clone()))
}
