//! Synthetic input domains: Gaussian samples under a per-channel affine map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seed offset for the held-out split of a domain.
const HELD_OUT_SALT: u64 = 0x5eed_0f_e7a1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub seed: u64,
    /// Per-channel mean; its length is the channel count.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Samples per channel (time steps).
    pub length: usize,
    pub count: usize,
}

impl DomainSpec {
    /// Zero-mean domain with every channel scaled by `scale`.
    pub fn scaled(channels: usize, length: usize, count: usize, scale: f64, seed: u64) -> Self {
        Self {
            seed,
            mean: vec![0.0; channels],
            scale: vec![scale; channels],
            length,
            count,
        }
    }

    /// The same distribution with an independent seed, for evaluation.
    pub fn held_out(&self) -> Self {
        Self {
            seed: self.seed.wrapping_add(HELD_OUT_SALT),
            ..self.clone()
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || self.mean.len() != self.scale.len() {
            return Err(Error::Config(format!(
                "domain needs matching non-empty mean and scale vectors, got {} and {}",
                self.mean.len(),
                self.scale.len()
            )));
        }
        if let Some(s) = self.scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!("domain scales must be positive, got {s}")));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("domain means must be finite".into()));
        }
        if self.length == 0 || self.count == 0 {
            return Err(Error::Config("domain length and count must be positive".into()));
        }
        Ok(())
    }
}

/// `count` tensors of shape `[channels, length]`, `x = mean_c + scale_c·z`.
pub fn make_domain(spec: &DomainSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|_| {
            let mut data = Vec::with_capacity(spec.channels() * spec.length);
            for (m, s) in spec.mean.iter().zip(&spec.scale) {
                for _ in 0..spec.length {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(m + s * z);
                }
            }
            Tensor::new(vec![spec.channels(), spec.length], data)
        })
        .collect()
}
