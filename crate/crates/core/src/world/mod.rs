//! The synthetic text-to-image world.
//!
//! A closed vocabulary of concept and style tokens, a linear generation
//! system with Gaussian noise, a closed-form preference function, a frozen
//! affine image encoder, an interaction-log sampler, and a brute-force
//! search for the best prompt extension. All matrices are regenerated from
//! [`WorldConfig::seed`]; only the config is ever serialized.

mod log;
mod oracle;
mod vocab;

pub use log::{load_log, sample_log, write_log, InteractionRecord};
pub use oracle::{candidate_count, oracle_best_prompt, OracleResult, DEFAULT_CANDIDATE_CAP};
pub use vocab::{Prompt, TokenId, TokenKind, Vocab};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, validation, Result};
use crate::models::PivotRep;
use crate::seed;
use crate::tensor::{dot, Tensor};

/// A generated image: a point in `d_img`-dimensional feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Image(pub Vec<f64>);

impl Image {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub d_img: usize,
    pub n_concepts: usize,
    pub n_styles: usize,
    /// Generation noise scale.
    pub sigma: f64,
    /// Per-style gain along the quality direction.
    pub style_gains: Vec<f64>,
    /// Pivot rows (slots) produced by the image encoder.
    pub pivot_slots: usize,
    /// Pivot columns per slot.
    pub pivot_dim: usize,
    pub max_len: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 7,
            d_img: 16,
            n_concepts: 8,
            n_styles: 4,
            sigma: 0.05,
            style_gains: vec![0.5, 1.0, 1.5, 2.0],
            pivot_slots: 4,
            pivot_dim: 8,
            max_len: 12,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_img == 0 || self.n_concepts == 0 || self.n_styles == 0 {
            return Err(invalid("world dimensions must be positive"));
        }
        if self.pivot_slots == 0 || self.pivot_dim == 0 || self.max_len == 0 {
            return Err(invalid("pivot shape and max_len must be positive"));
        }
        if self.style_gains.len() != self.n_styles {
            return Err(invalid(format!(
                "style_gains has {} entries, expected {}",
                self.style_gains.len(),
                self.n_styles
            )));
        }
        if self.style_gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(invalid("style gains must be positive and finite"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(invalid("sigma must be finite and nonnegative"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("world config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.n_concepts, self.n_styles)
    }
}

/// Text-to-image generation system.
pub trait Generator {
    fn generate(&self, prompt: &Prompt, n: usize, noise_seed: u64) -> Result<Vec<Image>>;
}

/// User-satisfaction score of an image for a user prompt, in `[0, 1]`.
pub trait PreferenceModel {
    fn preference(&self, image: &Image, user_prompt: &Prompt) -> f64;
}

/// A materialized world: the config plus every seeded matrix.
#[derive(Clone, Debug)]
pub struct World {
    config: WorldConfig,
    vocab: Vocab,
    /// `d_img x n_concepts`
    concepts: Tensor,
    /// `d_img x n_styles`, quality gains already folded in.
    styles: Tensor,
    quality_dir: Vec<f64>,
    /// One `pivot_dim x d_img` map per slot.
    encoder_maps: Vec<Tensor>,
    /// `pivot_slots x pivot_dim`
    encoder_offsets: Tensor,
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut seed::Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    Tensor::from_vec(rows, cols, data)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl World {
    /// Build the world, rejecting seeds where some style lowers quality.
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_img;
        let scale = 1.0 / (d as f64).sqrt();

        let concepts = normal_matrix(d, config.n_concepts, scale, &mut seed::rng(config.seed, "concept-matrix", 0));
        let mut styles = normal_matrix(d, config.n_styles, scale, &mut seed::rng(config.seed, "style-matrix", 0));

        let mut qrng = seed::rng(config.seed, "quality-direction", 0);
        let mut quality_dir: Vec<f64> = (0..d).map(|_| qrng.sample(StandardNormal)).collect();
        let norm = dot(&quality_dir, &quality_dir).sqrt();
        if norm == 0.0 {
            return Err(validation("degenerate quality direction"));
        }
        quality_dir.iter_mut().for_each(|v| *v /= norm);

        for (j, gain) in config.style_gains.iter().enumerate() {
            for (r, q) in quality_dir.iter().enumerate() {
                styles.set(r, j, styles.get(r, j) + gain * q);
            }
        }

        for j in 0..config.n_styles {
            let along: f64 = (0..d).map(|r| styles.get(r, j) * quality_dir[r]).sum();
            if along < 0.0 {
                return Err(validation(format!(
                    "world seed {} rejected: style s{j} lowers quality (projection {along:.4})",
                    config.seed
                )));
            }
        }

        let encoder_maps = (0..config.pivot_slots)
            .map(|k| {
                normal_matrix(config.pivot_dim, d, scale, &mut seed::rng(config.seed, "image-encoder-map", k as u64))
            })
            .collect();
        let encoder_offsets = normal_matrix(
            config.pivot_slots,
            config.pivot_dim,
            0.1,
            &mut seed::rng(config.seed, "image-encoder-offset", 0),
        );

        Ok(World {
            vocab: config.vocab(),
            config,
            concepts,
            styles,
            quality_dir,
            encoder_maps,
            encoder_offsets,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn hash(&self) -> String {
        self.config.hash()
    }

    pub fn concept_matrix(&self) -> &Tensor {
        &self.concepts
    }

    pub fn style_matrix(&self) -> &Tensor {
        &self.styles
    }

    pub fn quality_dir(&self) -> &[f64] {
        &self.quality_dir
    }

    pub fn pivot_shape(&self) -> (usize, usize) {
        (self.config.pivot_slots, self.config.pivot_dim)
    }

    pub fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        prompt.validate(&self.vocab, self.config.max_len)
    }

    /// Noise-free image of a prompt: `A·bow_c + B·bow_s`.
    pub fn render(&self, prompt: &Prompt) -> Result<Image> {
        self.check_prompt(prompt)?;
        Ok(self.render_unchecked(prompt))
    }

    pub(crate) fn render_unchecked(&self, prompt: &Prompt) -> Image {
        let (bc, bs) = prompt.bags(&self.vocab);
        let d = self.config.d_img;
        let mut v = vec![0.0; d];
        for (j, &b) in bc.iter().enumerate() {
            if b != 0.0 {
                for (r, x) in v.iter_mut().enumerate() {
                    *x += self.concepts.get(r, j);
                }
            }
        }
        for (j, &b) in bs.iter().enumerate() {
            if b != 0.0 {
                for (r, x) in v.iter_mut().enumerate() {
                    *x += self.styles.get(r, j);
                }
            }
        }
        Image(v)
    }

    /// `n` noisy images; sample `k` draws its noise from `(noise_seed, k)`.
    pub fn generate(&self, prompt: &Prompt, n: usize, noise_seed: u64) -> Result<Vec<Image>> {
        if n == 0 {
            return Err(invalid("generate needs n >= 1"));
        }
        let mean = self.render(prompt)?;
        let sigma = self.config.sigma;
        Ok((0..n)
            .map(|k| {
                if sigma == 0.0 {
                    return mean.clone();
                }
                let mut rng = seed::rng(noise_seed, "image-noise", k as u64);
                Image(
                    mean.0
                        .iter()
                        .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            })
            .collect())
    }

    /// Clipped cosine between `Aᵀ·image` and the prompt's concept bag.
    pub fn relevance(&self, image: &Image, user_prompt: &Prompt) -> f64 {
        let (bc, _) = user_prompt.bags(&self.vocab);
        let projected: Vec<f64> = (0..self.config.n_concepts)
            .map(|j| (0..self.config.d_img).map(|r| self.concepts.get(r, j) * image.0[r]).sum())
            .collect();
        let np = dot(&projected, &projected).sqrt();
        let nb = dot(&bc, &bc).sqrt();
        if np == 0.0 || nb == 0.0 {
            return 0.0;
        }
        (dot(&projected, &bc) / (np * nb)).clamp(0.0, 1.0)
    }

    /// Logistic of the image's coordinate along the quality direction.
    pub fn quality(&self, image: &Image) -> f64 {
        logistic(dot(&self.quality_dir, &image.0))
    }

    pub fn preference(&self, image: &Image, user_prompt: &Prompt) -> f64 {
        self.relevance(image, user_prompt) * self.quality(image)
    }

    /// Frozen affine image encoder: slot `k` is `M_k·image + p_k`.
    pub fn encode_image(&self, image: &Image) -> Result<PivotRep> {
        if image.dim() != self.config.d_img {
            return Err(invalid(format!(
                "image has dimension {}, world expects {}",
                image.dim(),
                self.config.d_img
            )));
        }
        let (k, d) = self.pivot_shape();
        let mut out = Tensor::zeros(k, d);
        for (slot, map) in self.encoder_maps.iter().enumerate() {
            for c in 0..d {
                out.set(slot, c, dot(map.row(c), &image.0) + self.encoder_offsets.get(slot, c));
            }
        }
        Ok(PivotRep::new(out))
    }
}

impl Generator for World {
    fn generate(&self, prompt: &Prompt, n: usize, noise_seed: u64) -> Result<Vec<Image>> {
        World::generate(self, prompt, n, noise_seed)
    }
}

impl PreferenceModel for World {
    fn preference(&self, image: &Image, user_prompt: &Prompt) -> f64 {
        World::preference(self, image, user_prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(sigma: f64) -> World {
        World::new(WorldConfig {
            sigma,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn prompt(w: &World, s: &str) -> Prompt {
        w.vocab().parse_prompt(s, w.max_len()).unwrap()
    }

    #[test]
    fn generation_is_order_invariant_without_noise() {
        let w = world(0.0);
        let a = w.generate(&prompt(&w, "c1 c2"), 1, 3).unwrap();
        let b = w.generate(&prompt(&w, "c2 c1"), 1, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, w.generate(&prompt(&w, "c1 c2"), 1, 3).unwrap());
    }

    #[test]
    fn single_concept_image_is_its_column() {
        let w = world(0.0);
        let img = w.render(&prompt(&w, "c0")).unwrap();
        let col: Vec<f64> = (0..16).map(|r| w.concept_matrix().get(r, 0)).collect();
        assert_eq!(img.0, col);
    }

    #[test]
    fn noisy_generation_is_seeded() {
        let w = world(0.05);
        let p = prompt(&w, "c3 s1");
        let a = w.generate(&p, 4, 11).unwrap();
        assert_eq!(a, w.generate(&p, 4, 11).unwrap());
        assert_ne!(a, w.generate(&p, 4, 12).unwrap());
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn generate_rejects_bad_input() {
        let w = world(0.0);
        assert!(w.generate(&Prompt::from_raw(vec![]), 1, 0).is_err());
        assert!(w.generate(&Prompt::from_raw(vec![40]), 1, 0).is_err());
        assert!(w.generate(&prompt(&w, "c0"), 0, 0).is_err());
    }

    #[test]
    fn zero_image_scores_zero() {
        let w = world(0.0);
        assert_eq!(w.preference(&Image(vec![0.0; 16]), &prompt(&w, "c0 c1")), 0.0);
    }

    #[test]
    fn parallel_relevance_with_neutral_quality_scores_half() {
        // Build an image whose concept projection is parallel to bow(c0,c1) and
        // which is orthogonal to the quality direction: solve in the span of A.
        let w = world(0.0);
        let a = w.concept_matrix();
        let q = w.quality_dir();
        // Least-squares solve A^T x = t with x ⊥ q via normal equations on the
        // basis {A columns} projected off q.
        let mut basis: Vec<Vec<f64>> = (0..8)
            .map(|j| {
                let col: Vec<f64> = (0..16).map(|r| a.get(r, j)).collect();
                let along = dot(&col, q);
                col.iter().zip(q).map(|(c, qi)| c - along * qi).collect()
            })
            .collect();
        // x = Σ_j α_j basis_j; need (A^T x)_i = t_i, i.e. G α = t with G_ij = <A_i, basis_j>.
        let target = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut g = vec![vec![0.0; 9]; 8];
        for i in 0..8 {
            let ai: Vec<f64> = (0..16).map(|r| a.get(r, i)).collect();
            for j in 0..8 {
                g[i][j] = dot(&ai, &basis[j]);
            }
            g[i][8] = target[i];
        }
        for col in 0..8 {
            let piv = (col..8).max_by(|&x, &y| g[x][col].abs().total_cmp(&g[y][col].abs())).unwrap();
            g.swap(col, piv);
            for row in 0..8 {
                if row != col {
                    let f = g[row][col] / g[col][col];
                    for k in col..9 {
                        g[row][k] -= f * g[col][k];
                    }
                }
            }
        }
        let alpha: Vec<f64> = (0..8).map(|i| g[i][8] / g[i][i]).collect();
        let mut x = vec![0.0; 16];
        for (j, b) in basis.iter_mut().enumerate() {
            for r in 0..16 {
                x[r] += alpha[j] * b[r];
            }
        }
        let img = Image(x);
        assert!(dot(q, &img.0).abs() < 1e-12);
        let score = w.preference(&img, &prompt(&w, "c0 c1"));
        assert!((score - 0.5).abs() < 1e-9, "score {score}");
    }

    #[test]
    fn preference_stays_in_unit_interval() {
        let w = world(0.05);
        let log = sample_log(&w, 50, 4, 0.5, 1).unwrap();
        for r in &log {
            for s in &r.scores {
                assert!((0.0..=1.0).contains(s));
            }
        }
    }

    #[test]
    fn image_encoder_is_affine() {
        let w = world(0.0);
        let zero = w.encode_image(&Image(vec![0.0; 16])).unwrap();
        let i1 = w.render(&prompt(&w, "c0 s2")).unwrap();
        let i2 = w.render(&prompt(&w, "c5 c6")).unwrap();
        let sum = Image(i1.0.iter().zip(&i2.0).map(|(a, b)| a + b).collect());
        let e = |i: &Image| {
            let mut t = w.encode_image(i).unwrap().into_tensor();
            t.axpy(-1.0, zero.as_tensor());
            t
        };
        let mut lhs = e(&i1);
        lhs.add_assign(&e(&i2));
        assert!(lhs.max_abs_diff(&e(&sum)) <= 1e-12);
        assert!(w.encode_image(&Image(vec![0.0; 3])).is_err());
    }

    #[test]
    fn styles_never_lower_quality_of_small_concept_prompts() {
        let w = world(0.0);
        let v = *w.vocab();
        let mut sets: Vec<Vec<u32>> = Vec::new();
        for a in 0..8u32 {
            sets.push(vec![a]);
            for b in a + 1..8 {
                sets.push(vec![a, b]);
                for c in b + 1..8 {
                    sets.push(vec![a, b, c]);
                }
            }
        }
        for u in sets {
            let base = w.quality(&w.render(&Prompt::from_raw(u.clone())).unwrap());
            for j in 0..4 {
                let mut t = u.clone();
                t.push(v.style(j));
                let q = w.quality(&w.render(&Prompt::from_raw(t)).unwrap());
                assert!(q >= base, "style s{j} lowers quality of {u:?}");
            }
        }
    }

    #[test]
    fn config_hash_tracks_seed() {
        let a = WorldConfig::default();
        let b = WorldConfig { seed: 8, ..a.clone() };
        assert_eq!(a.hash(), WorldConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
