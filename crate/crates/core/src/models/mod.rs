//! Preference encoder (tokens -> pivot) and prompt decoder (pivot prefix ->
//! tokens), their parameters, and decoding.

mod bundle;
mod decoder;
mod encoder;
mod layers;

pub use bundle::{pipeline_refine, RefinerBundle};
pub use decoder::{decode, decoder_all_logits, decoder_logits, DecodeMode, DecoderParams};
pub(crate) use decoder::sample_allowed;
pub use encoder::{encoder_forward, EncoderParams};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seed;
use crate::tensor::Tensor;
use crate::world::{TokenId, Vocab, WorldConfig};

/// A `slots x dim` pivot image representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PivotRep(Tensor);

impl PivotRep {
    pub fn new(t: Tensor) -> Self {
        PivotRep(t)
    }

    pub fn zeros(slots: usize, dim: usize) -> Self {
        PivotRep(Tensor::zeros(slots, dim))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

/// Transformer sizes shared by both components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    /// Cross-attention blocks turning learned queries into pivot slots.
    pub pivot_layers: usize,
    pub decoder_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            heads: 2,
            d_ff: 64,
            encoder_layers: 2,
            pivot_layers: 1,
            decoder_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(invalid("model sizes must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(invalid("d_model must be divisible by heads"));
        }
        if self.pivot_layers == 0 {
            return Err(invalid("need at least one pivot cross-attention layer"));
        }
        Ok(())
    }
}

/// Sizes the models take from the world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_concepts: usize,
    pub n_styles: usize,
    pub max_len: usize,
    pub pivot_slots: usize,
    pub pivot_dim: usize,
}

impl ModelDims {
    pub fn from_world(w: &WorldConfig) -> Self {
        ModelDims {
            n_concepts: w.n_concepts,
            n_styles: w.n_styles,
            max_len: w.max_len,
            pivot_slots: w.pivot_slots,
            pivot_dim: w.pivot_dim,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.n_concepts, self.n_styles)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab().size()
    }

    fn check_pivot(&self, pivot: &PivotRep) -> Result<()> {
        if pivot.shape() != (self.pivot_slots, self.pivot_dim) {
            return Err(invalid(format!(
                "pivot has shape {:?}, expected {:?}",
                pivot.shape(),
                (self.pivot_slots, self.pivot_dim)
            )));
        }
        if !pivot.is_finite() {
            return Err(invalid("pivot has non-finite entries"));
        }
        Ok(())
    }

    /// Tokens the decoder may emit: content tokens and EOS.
    pub fn emit_mask(&self) -> Vec<bool> {
        let v = self.vocab();
        (0..v.size() as TokenId).map(|t| v.is_content(t) || t == v.eos()).collect()
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// `θ -= lr · g`, then round to `f32` so checkpoints round-trip exactly.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), self.tensors.len());
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            t.axpy(-lr, g);
            t.quantize_f32();
        }
    }

    /// Flat view in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrite from a flat vector in store order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(invalid(format!(
                "flat parameter vector has {} entries, store has {}",
                flat.len(),
                self.n_scalars()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

pub(crate) struct Init {
    rng: seed::Rng,
}

impl Init {
    pub(crate) fn new(seed: u64, tag: &str) -> Self {
        Init {
            rng: seed::rng(seed, tag, 0),
        }
    }

    pub(crate) fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let mut t = Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| self.rng.sample::<f64, _>(StandardNormal) * std).collect(),
        );
        t.quantize_f32();
        t
    }

    pub(crate) fn zeros(&self, rows: usize, cols: usize) -> Tensor {
        Tensor::zeros(rows, cols)
    }

    pub(crate) fn ones(&self, rows: usize, cols: usize) -> Tensor {
        Tensor::filled(rows, cols, 1.0)
    }
}
