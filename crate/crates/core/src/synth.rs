//! Paired synthetic data with a controllable shared latent.
//!
//! Every sample draws one latent `z`; the brain recording, the five
//! visual channels and the four textual channels are all (noisy) linear
//! views of that same `z`, so cross-modal retrieval has a well-defined
//! ceiling. Per-sample RNG streams derive from `(seed, sample index)`,
//! which makes generation order-free and bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{BrainRecording, Dataset, Embedding, Modality, SemanticStack, StackKind};
use crate::error::{Error, Result};
use crate::numerics::DenseArray;
use crate::scalar::{real, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Shared latent dimension.
    pub latent_dim: usize,
    /// Semantic channel dimension K.
    pub k: usize,
    pub channels: usize,
    pub timesteps: usize,
    pub sigma_brain: f64,
    pub sigma_sem: f64,
    pub modality: Modality,
    /// 0 keeps latents i.i.d.; >0 mixes in per-category means so
    /// similarity matrices show block structure.
    pub n_categories: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_train: 512,
            n_test: 64,
            latent_dim: 16,
            k: 32,
            channels: 17,
            timesteps: 100,
            sigma_brain: 0.1,
            sigma_sem: 0.1,
            modality: Modality::Eeg,
            n_categories: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_train == 0 {
            problems.push("n_train must be >= 1".to_string());
        }
        if self.n_test < 2 {
            problems.push("n_test must be >= 2".to_string());
        }
        if self.latent_dim == 0 || self.latent_dim > self.k {
            problems.push(format!(
                "latent_dim must be in 1..=k, got {} with k = {}",
                self.latent_dim, self.k
            ));
        }
        if self.channels == 0 || self.timesteps == 0 || self.k == 0 {
            problems.push("channels, timesteps and k must be positive".to_string());
        }
        if self.modality == Modality::Fmri && self.timesteps != 1 {
            problems.push("fmri requires timesteps = 1".to_string());
        }
        if self.sigma_brain < 0.0 || self.sigma_sem < 0.0 {
            problems.push("noise levels must be >= 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent RNG stream keyed by (seed, domain, index).
pub(crate) fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ domain.rotate_left(17)) ^ index))
}

const DOM_LATENT: u64 = 0x4C41_5445;
const DOM_SEM_MAP: u64 = 0x5345_4D41;
const DOM_SEM_NOISE: u64 = 0x5345_4E4F;
const DOM_BRAIN_MAP: u64 = 0x4252_4D41;
const DOM_BRAIN_NOISE: u64 = 0x4252_4E4F;
const DOM_CATEGORY: u64 = 0x4341_5445;

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Generate all `n_train + n_test` samples of a paired dataset.
///
/// The brain map depends on the modality tag, so two modalities built
/// from the same seed share latents (and semantic stacks) while reading
/// them through different linear maps.
pub fn gen_dataset<T: Real>(cfg: &SynthConfig) -> Result<Dataset<T>> {
    cfg.validate()?;
    let n = cfg.n_train + cfg.n_test;
    let (lz, k, c, t) = (cfg.latent_dim, cfg.k, cfg.channels, cfg.timesteps);
    let n_sem = StackKind::Visual.channel_count() + StackKind::Textual.channel_count();

    // fixed maps, one stream each
    let scale = 1.0 / (lz as f64).sqrt();
    let sem_maps: Vec<Vec<f64>> = (0..n_sem)
        .map(|ci| {
            let mut rng = stream(cfg.seed, DOM_SEM_MAP, ci as u64);
            normals(&mut rng, k * lz).into_iter().map(|v| v * scale).collect()
        })
        .collect();
    let brain_map: Vec<f64> = {
        let mut rng = stream(cfg.seed, DOM_BRAIN_MAP, cfg.modality as u64);
        normals(&mut rng, c * t * lz).into_iter().map(|v| v * scale).collect()
    };
    let cat_means: Vec<Vec<f64>> = (0..cfg.n_categories)
        .map(|ci| {
            let mut rng = stream(cfg.seed, DOM_CATEGORY, ci as u64);
            normals(&mut rng, lz)
        })
        .collect();

    let mut latent = Vec::with_capacity(n * lz);
    let mut brain = Vec::with_capacity(n * c * t);
    let mut vis = Vec::with_capacity(n * 5 * k);
    let mut txt = Vec::with_capacity(n * 4 * k);
    let mut labels = Vec::with_capacity(n);

    for i in 0..n {
        let mut zrng = stream(cfg.seed, DOM_LATENT, i as u64);
        let mut z = normals(&mut zrng, lz);
        if cfg.n_categories > 0 {
            let cat = i % cfg.n_categories;
            labels.push(cat);
            let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
            for (zv, &mv) in z.iter_mut().zip(&cat_means[cat]) {
                *zv = (*zv + mv) * inv_sqrt2;
            }
        }
        latent.extend(z.iter().map(|&v| real::<T>(v)));

        // semantic channels: normalize(A_c z + sigma_sem * noise)
        let mut sem_noise = stream(cfg.seed, DOM_SEM_NOISE, i as u64);
        for (ci, map) in sem_maps.iter().enumerate() {
            let mut chan = vec![0.0f64; k];
            for (row, cv) in chan.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (col, &zv) in z.iter().enumerate() {
                    acc += map[row * lz + col] * zv;
                }
                *cv = acc;
            }
            for cv in chan.iter_mut() {
                let e: f64 = sem_noise.sample(StandardNormal);
                *cv += cfg.sigma_sem * e;
            }
            let norm = chan.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let dst = if ci < 5 { &mut vis } else { &mut txt };
            dst.extend(chan.iter().map(|&v| real::<T>(v / norm)));
        }

        // brain: reshape(W z) + sigma_brain * noise
        let mut brain_noise = stream(cfg.seed, DOM_BRAIN_NOISE, i as u64);
        for row in 0..c * t {
            let mut acc = 0.0;
            for (col, &zv) in z.iter().enumerate() {
                acc += brain_map[row * lz + col] * zv;
            }
            let e: f64 = brain_noise.sample(StandardNormal);
            brain.push(real::<T>(acc + cfg.sigma_brain * e));
        }
    }

    let ds = Dataset {
        brain: BrainRecording::new(DenseArray::from_vec(&[n, c, t], brain)?, cfg.modality)?,
        vision: SemanticStack::new(DenseArray::from_vec(&[n, 5, k], vis)?, StackKind::Visual)?,
        text: SemanticStack::new(DenseArray::from_vec(&[n, 4, k], txt)?, StackKind::Textual)?,
        latent: Some(Embedding::new(DenseArray::from_vec(&[n, lz], latent)?)?),
        labels: if cfg.n_categories > 0 { Some(labels) } else { None },
    };
    ds.validate()?;
    Ok(ds)
}

/// Generate and split into (train, test).
pub fn gen_split<T: Real>(cfg: &SynthConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    let all = gen_dataset::<T>(cfg)?;
    let train = all.slice(0, cfg.n_train)?;
    let test = all.slice(cfg.n_train, cfg.n_train + cfg.n_test)?;
    Ok((train, test))
}
