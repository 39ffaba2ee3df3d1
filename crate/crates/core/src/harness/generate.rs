//! Seeded synthetic activation generators.
//!
//! Generated tensors are `[samples x channels]`, row-major. The generators
//! are meant to look like post-ReLU activations: mass concentrated near zero
//! with a thin tail of large values.

use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use super::tensor_file::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    /// `|N(0, sigma^2)|`.
    HalfNormal { sigma: f64 },
    /// `max(0, N(0, sigma^2))`; exactly zero half of the time.
    ReluNormal { sigma: f64 },
    /// Each element draws from one component, chosen with probability
    /// proportional to its weight.
    Mixture {
        components: Vec<(f64, Distribution)>,
    },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            Distribution::HalfNormal { sigma } | Distribution::ReluNormal { sigma } => {
                if sigma.is_finite() && *sigma > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!(
                        "sigma must be positive, got {sigma}"
                    )))
                }
            }
            Distribution::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::InvalidConfig("mixture has no components".into()));
                }
                for (w, d) in components {
                    if !(w.is_finite() && *w > 0.0) {
                        return Err(Error::InvalidConfig(format!(
                            "mixture weight must be positive, got {w}"
                        )));
                    }
                    d.validate()?;
                }
                Ok(())
            }
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Distribution::HalfNormal { sigma } => Normal::new(0.0, *sigma)
                .expect("validated sigma")
                .sample(rng)
                .abs(),
            Distribution::ReluNormal { sigma } => Normal::new(0.0, *sigma)
                .expect("validated sigma")
                .sample(rng)
                .max(0.0),
            Distribution::Mixture { components } => {
                let total: f64 = components.iter().map(|(w, _)| w).sum();
                let mut u = rng.gen::<f64>() * total;
                for (w, d) in components {
                    if u < *w {
                        return d.draw(rng);
                    }
                    u -= w;
                }
                components.last().expect("non-empty mixture").1.draw(rng)
            }
        }
    }
}

impl FromStr for Distribution {
    type Err = Error;

    /// `half-normal:<sigma>`, `relu-normal:<sigma>`, or
    /// `mixture:<w>*<dist>,<w>*<dist>,...`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidConfig(format!("cannot parse distribution {s:?}"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let sigma = || arg.trim().parse::<f64>().map_err(|_| bad());
        let d = match kind.trim() {
            "half-normal" | "half_normal" => Distribution::HalfNormal { sigma: sigma()? },
            "relu-normal" | "relu_normal" => Distribution::ReluNormal { sigma: sigma()? },
            "mixture" => Distribution::Mixture {
                components: arg
                    .split(',')
                    .map(|part| {
                        let (w, d) = part.split_once('*').ok_or_else(bad)?;
                        Ok((w.trim().parse::<f64>().map_err(|_| bad())?, d.parse()?))
                    })
                    .collect::<Result<_>>()?,
            },
            _ => return Err(bad()),
        };
        d.validate()?;
        Ok(d)
    }
}

pub fn gen_activations(
    dist: &Distribution,
    channels: usize,
    samples: usize,
    seed: u64,
) -> Result<Tensor> {
    dist.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..channels * samples)
        .map(|_| dist.draw(&mut rng) as f32)
        .collect();
    Tensor::new(vec![samples, channels], data)
}

/// Layer whose channels come from `dist`, with `high_channels` of them (a
/// seeded random subset) multiplied by `scale`.
pub fn gen_two_scale_layer(
    dist: &Distribution,
    channels: usize,
    samples: usize,
    high_channels: usize,
    scale: f64,
    seed: u64,
) -> Result<Tensor> {
    if high_channels > channels {
        return Err(Error::InvalidConfig(format!(
            "{high_channels} high channels requested out of {channels}"
        )));
    }
    let mut t = gen_activations(dist, channels, samples, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut factor = vec![1.0f32; channels];
    for c in sample(&mut rng, channels, high_channels) {
        factor[c] = scale as f32;
    }
    if channels > 0 {
        for row in t.data.chunks_exact_mut(channels) {
            for (v, f) in row.iter_mut().zip(&factor) {
                *v *= f;
            }
        }
    }
    Ok(t)
}
