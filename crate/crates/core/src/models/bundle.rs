use crate::error::{invalid, Result};
use crate::world::{Prompt, WorldConfig};

use super::{decode, encoder_forward, DecodeMode, DecoderParams, EncoderParams, ModelConfig, ModelDims, PivotRep};

/// The deployable pipeline: encoder, decoder, and the world they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerBundle {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    /// When false the decoder always sees a zero pivot (unconditioned decoder).
    pub pivot_conditioned: bool,
    pub world_hash: String,
}

impl RefinerBundle {
    pub fn new(encoder: EncoderParams, decoder: DecoderParams, pivot_conditioned: bool, world: &WorldConfig) -> Result<Self> {
        if encoder.dims() != decoder.dims() {
            return Err(invalid("encoder and decoder were built for different shapes"));
        }
        if encoder.dims() != ModelDims::from_world(world) {
            return Err(invalid("bundle shapes do not match the world"));
        }
        Ok(RefinerBundle {
            encoder,
            decoder,
            pivot_conditioned,
            world_hash: world.hash(),
        })
    }

    /// Freshly initialized (untrained) bundle.
    pub fn init(config: &ModelConfig, world: &WorldConfig, seed: u64) -> Result<Self> {
        let dims = ModelDims::from_world(world);
        let encoder = EncoderParams::init(config, dims, crate::seed::derive(seed, "encoder", 0))?;
        let decoder = DecoderParams::init(config, dims, crate::seed::derive(seed, "decoder", 0))?;
        Self::new(encoder, decoder, true, world)
    }

    pub fn dims(&self) -> ModelDims {
        self.encoder.dims()
    }

    /// The pivot the decoder is conditioned on for `user_prompt`.
    pub fn pivot(&self, user_prompt: &Prompt) -> Result<PivotRep> {
        if self.pivot_conditioned {
            encoder_forward(&self.encoder, user_prompt.tokens())
        } else {
            let d = self.dims();
            Ok(PivotRep::zeros(d.pivot_slots, d.pivot_dim))
        }
    }
}

/// Encode, then greedily expand the user prompt as a decoder prefix.
pub fn pipeline_refine(bundle: &RefinerBundle, user_prompt: &Prompt) -> Result<Prompt> {
    let pivot = bundle.pivot(user_prompt)?;
    decode(&bundle.decoder, &pivot, user_prompt, DecodeMode::Greedy, bundle.dims().max_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_bundle_keeps_prefix() {
        let world = WorldConfig::default();
        let b = RefinerBundle::init(&ModelConfig::default(), &world, 1).unwrap();
        let u = world.vocab().parse_prompt("c4 c0", 12).unwrap();
        let out = pipeline_refine(&b, &u).unwrap();
        assert!(out.starts_with(&u));
        assert_eq!(out, pipeline_refine(&b, &u).unwrap());
    }

    #[test]
    fn full_length_prompt_cannot_be_refined() {
        let world = WorldConfig::default();
        let b = RefinerBundle::init(&ModelConfig::default(), &world, 1).unwrap();
        let u = Prompt::new(vec![0; 12], &world.vocab(), 12).unwrap();
        assert!(pipeline_refine(&b, &u).is_err());
    }
}
