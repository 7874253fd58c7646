//! Dataset plumbing: synthetic generation with controllable semantic
//! structure, CSV ingestion, and binary checkpoints.

pub mod checkpoint;
pub mod csvio;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tokenizer::ItemVectors;

/// Synthetic dataset knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub dim: usize,
    pub n_categories: usize,
    /// Within-category scatter of item vectors (0 collapses a category to
    /// identical vectors, which exercises dedup downstream).
    pub cluster_spread: f64,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    /// Softmax temperature of the interaction sampler; large values
    /// approach uniform choice.
    pub preference_temperature: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 512,
            n_users: 1000,
            dim: 32,
            n_categories: 8,
            cluster_spread: 0.35,
            seq_len_min: 5,
            seq_len_max: 20,
            preference_temperature: 0.5,
            seed: 42,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_users == 0 || self.dim == 0 || self.n_categories == 0 {
            return Err(Error::invalid("counts must be >= 1"));
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return Err(Error::invalid("need 1 <= seq_len_min <= seq_len_max"));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::invalid("cluster_spread must be finite and >= 0"));
        }
        if !(self.preference_temperature > 0.0) {
            return Err(Error::invalid("preference_temperature must be > 0"));
        }
        Ok(())
    }
}

/// Generated items, their categories, and per-user interaction sequences.
#[derive(Debug, Clone)]
pub struct SynthData<F> {
    pub items: ItemVectors<F>,
    pub categories: Vec<usize>,
    pub interactions: Vec<Vec<usize>>,
}

fn normal_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

const PREFERENCE_DRIFT: f64 = 0.1;

/// Items are category-cluster centers plus Gaussian spread; users carry a
/// latent preference that drifts mildly toward consumed items; choices are
/// temperature-softmax over preference/item affinity. Every entity draws
/// from its own `(seed, tag, index)` stream, so generation is
/// order-independent and reproducible.
pub fn generate_synthetic<F: Scalar>(cfg: &SynthConfig) -> Result<SynthData<F>> {
    cfg.validate()?;
    let centers: Vec<Vec<f64>> = (0..cfg.n_categories)
        .map(|c| normal_vec(&mut stream(cfg.seed, "category", c as u64), cfg.dim))
        .collect();

    let mut categories = Vec::with_capacity(cfg.n_items);
    let mut item_vecs: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let cat = i % cfg.n_categories;
        categories.push(cat);
        let noise = normal_vec(&mut stream(cfg.seed, "item", i as u64), cfg.dim);
        item_vecs.push(
            centers[cat]
                .iter()
                .zip(&noise)
                .map(|(&c, &n)| c + cfg.cluster_spread * n)
                .collect(),
        );
    }

    let mut interactions = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let mut rng = stream(cfg.seed, "user", u as u64);
        let cat: usize = rng.gen_range(0..cfg.n_categories);
        let noise = normal_vec(&mut rng, cfg.dim);
        let mut pref: Vec<f64> = centers[cat]
            .iter()
            .zip(&noise)
            .map(|(&c, &n)| c + 0.5 * n)
            .collect();
        let len = rng.gen_range(cfg.seq_len_min..=cfg.seq_len_max);
        let mut seq = Vec::with_capacity(len);
        for _ in 0..len {
            let mut scores: Vec<f64> = item_vecs
                .iter()
                .map(|v| {
                    v.iter().zip(&pref).map(|(a, b)| a * b).sum::<f64>()
                        / cfg.preference_temperature
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in &mut scores {
                *s = (*s - m).exp();
                total += *s;
            }
            let draw: f64 = rng.gen_range(0.0..1.0) * total;
            let mut acc = 0.0;
            let mut chosen = cfg.n_items - 1;
            for (i, &s) in scores.iter().enumerate() {
                acc += s;
                if draw < acc {
                    chosen = i;
                    break;
                }
            }
            seq.push(chosen);
            for (p, &v) in pref.iter_mut().zip(&item_vecs[chosen]) {
                *p += PREFERENCE_DRIFT * (v - *p);
            }
        }
        interactions.push(seq);
    }

    let flat: Vec<F> = item_vecs
        .iter()
        .flat_map(|v| v.iter().map(|&x| F::of(x)))
        .collect();
    Ok(SynthData {
        items: ItemVectors::new(cfg.n_items, cfg.dim, flat)?,
        categories,
        interactions,
    })
}
