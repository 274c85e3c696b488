//! Checkpoint directories: `manifest.json` plus `params.bin`, a blob of
//! little-endian `f32` values concatenated in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{validation, Error, Result};
use crate::models::{DecoderParams, EncoderParams, ModelConfig, ModelDims, ParamStore, RefinerBundle};
use crate::world::WorldConfig;

const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset into the blob, in `f32` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub kind: String,
    pub world_hash: String,
    pub model: ModelConfig,
    pub model_hash: String,
    pub init_seed: u64,
    pub pivot_conditioned: Option<bool>,
    pub params: Vec<ParamEntry>,
    pub blob_sha256: String,
}

fn model_hash(cfg: &ModelConfig) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(cfg).expect("model config serializes")))
}

fn save(dir: &Path, kind: &str, model: &ModelConfig, world_hash: &str, init_seed: u64, pivot_conditioned: Option<bool>, stores: &[&ParamStore]) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut params = Vec::new();
    let mut offset = 0;
    for store in stores {
        for (name, t) in store.names().iter().zip(store.tensors()) {
            params.push(ParamEntry {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
                offset,
            });
            offset += t.len();
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        world_hash: world_hash.to_string(),
        model: model.clone(),
        model_hash: model_hash(model),
        init_seed,
        pivot_conditioned,
        params,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let bp = dir.join(BLOB);
    std::fs::write(&bp, &blob).map_err(|e| Error::io(&bp, e))?;
    let mp = dir.join(MANIFEST);
    std::fs::write(&mp, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mp = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: mp,
        line: e.line(),
        message: e.to_string(),
    })
}

/// Read and verify a checkpoint against the world it is loaded into.
fn open(dir: &Path, kind: &str, world: &WorldConfig) -> Result<(CheckpointManifest, Vec<f32>)> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != kind {
        return Err(validation(format!("{} holds a {} checkpoint, expected {kind}", dir.display(), manifest.kind)));
    }
    let expected = world.hash();
    if manifest.world_hash != expected {
        return Err(Error::HashMismatch {
            stored: manifest.world_hash,
            expected,
        });
    }
    if manifest.model_hash != model_hash(&manifest.model) {
        return Err(validation("model config does not match its recorded hash"));
    }
    let bp = dir.join(BLOB);
    let bytes = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let actual = hex::encode(Sha256::digest(&bytes));
    if actual != manifest.blob_sha256 {
        return Err(Error::HashMismatch {
            stored: manifest.blob_sha256,
            expected: actual,
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((manifest, values))
}

/// Fill `store` from the manifest entries with matching names.
fn fill(store: &mut ParamStore, manifest: &CheckpointManifest, blob: &[f32]) -> Result<()> {
    let names = store.names().to_vec();
    for (name, t) in names.iter().zip(store.tensors_mut()) {
        let entry = manifest
            .params
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| validation(format!("checkpoint lacks parameter {name}")))?;
        if entry.shape != [t.rows(), t.cols()] {
            return Err(validation(format!(
                "parameter {name} has shape {:?} in checkpoint, model expects {:?}",
                entry.shape,
                [t.rows(), t.cols()]
            )));
        }
        let src = blob
            .get(entry.offset..entry.offset + t.len())
            .ok_or_else(|| validation(format!("parameter {name} runs past the end of the blob")))?;
        for (d, &s) in t.data_mut().iter_mut().zip(src) {
            *d = s as f64;
        }
    }
    if !store.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(())
}

pub fn save_encoder(dir: &Path, enc: &EncoderParams, world: &WorldConfig, init_seed: u64) -> Result<CheckpointManifest> {
    save(dir, "encoder", enc.config(), &world.hash(), init_seed, None, &[enc.store()])
}

pub fn load_encoder(dir: &Path, world: &WorldConfig) -> Result<EncoderParams> {
    let (m, blob) = open(dir, "encoder", world)?;
    let mut enc = EncoderParams::init(&m.model, ModelDims::from_world(world), m.init_seed)?;
    fill(enc.store_mut(), &m, &blob)?;
    Ok(enc)
}

pub fn save_decoder(dir: &Path, dec: &DecoderParams, world: &WorldConfig, init_seed: u64) -> Result<CheckpointManifest> {
    save(dir, "decoder", dec.config(), &world.hash(), init_seed, None, &[dec.store()])
}

pub fn load_decoder(dir: &Path, world: &WorldConfig) -> Result<DecoderParams> {
    let (m, blob) = open(dir, "decoder", world)?;
    let mut dec = DecoderParams::init(&m.model, ModelDims::from_world(world), m.init_seed)?;
    fill(dec.store_mut(), &m, &blob)?;
    Ok(dec)
}

pub fn save_bundle(dir: &Path, bundle: &RefinerBundle, init_seed: u64) -> Result<CheckpointManifest> {
    save(
        dir,
        "bundle",
        bundle.encoder.config(),
        &bundle.world_hash,
        init_seed,
        Some(bundle.pivot_conditioned),
        &[bundle.encoder.store(), bundle.decoder.store()],
    )
}

pub fn load_bundle(dir: &Path, world: &WorldConfig) -> Result<RefinerBundle> {
    let (m, blob) = open(dir, "bundle", world)?;
    let dims = ModelDims::from_world(world);
    let mut enc = EncoderParams::init(&m.model, dims, m.init_seed)?;
    let mut dec = DecoderParams::init(&m.model, dims, m.init_seed)?;
    fill(enc.store_mut(), &m, &blob)?;
    fill(dec.store_mut(), &m, &blob)?;
    RefinerBundle::new(enc, dec, m.pivot_conditioned.unwrap_or(true), world)
}

/// SHA-256 of a parameter store's `f32` blob; equal iff checkpoints would be.
pub fn store_hash(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for t in store.tensors() {
        for &v in t.data() {
            h.update((v as f32).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{encoder_forward, pipeline_refine};

    #[test]
    fn bundle_round_trip_is_exact() {
        let world = WorldConfig::default();
        let mut b = RefinerBundle::init(&ModelConfig::default(), &world, 4).unwrap();
        b.pivot_conditioned = false;
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &b, 4).unwrap();
        let back = load_bundle(dir.path(), &world).unwrap();
        assert_eq!(back, b);
        let u = world.vocab().parse_prompt("c3", 12).unwrap();
        assert_eq!(pipeline_refine(&back, &u).unwrap(), pipeline_refine(&b, &u).unwrap());
        assert_eq!(
            encoder_forward(&back.encoder, u.tokens()).unwrap(),
            encoder_forward(&b.encoder, u.tokens()).unwrap()
        );
    }

    #[test]
    fn foreign_world_is_refused() {
        let world = WorldConfig::default();
        let b = RefinerBundle::init(&ModelConfig::default(), &world, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &b, 4).unwrap();
        let other = WorldConfig { seed: 8, ..WorldConfig::default() };
        let err = load_bundle(dir.path(), &other).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::HashMismatch { .. }));
        assert!(msg.contains(&world.hash()) && msg.contains(&other.hash()), "{msg}");
    }

    #[test]
    fn corrupt_blob_is_refused() {
        let world = WorldConfig::default();
        let dims = ModelDims::from_world(&world);
        let enc = EncoderParams::init(&ModelConfig::default(), dims, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_encoder(dir.path(), &enc, &world, 2).unwrap();
        assert_eq!(load_encoder(dir.path(), &world).unwrap(), enc);
        let bp = dir.path().join(BLOB);
        let mut bytes = std::fs::read(&bp).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&bp, bytes).unwrap();
        assert!(load_encoder(dir.path(), &world).is_err());
        assert!(load_decoder(dir.path(), &world).is_err());
    }
}
