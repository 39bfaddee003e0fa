//! Synthetic Zipf/Markov token streams.
//!
//! Each sequence starts with a Zipf-distributed token. Every following token is
//! the image of its predecessor under a fixed seeded permutation with
//! probability `copy_prob`, otherwise a fresh Zipf draw. Token frequencies are
//! therefore heavy-tailed, and the copy rule gives the model something
//! learnable beyond unigram statistics.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataConfig {
    pub vocab: usize,
    pub zipf_exponent: f64,
    pub copy_prob: f64,
    pub permutation_seed: u64,
}

impl Default for SyntheticDataConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            zipf_exponent: 1.0,
            copy_prob: 0.5,
            permutation_seed: 0,
        }
    }
}

impl SyntheticDataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config(format!("data vocab must be >= 2, got {}", self.vocab)));
        }
        if !(self.zipf_exponent >= 0.0) || !self.zipf_exponent.is_finite() {
            return Err(Error::Config(format!(
                "zipf_exponent must be finite and >= 0, got {}",
                self.zipf_exponent
            )));
        }
        if !(0.0..=1.0).contains(&self.copy_prob) {
            return Err(Error::Config(format!(
                "copy_prob must lie in [0, 1], got {}",
                self.copy_prob
            )));
        }
        Ok(())
    }

    /// Unigram sampling law `p_k ∝ (k + 1)^(-s)`, normalized.
    pub fn zipf_probabilities(&self) -> Vec<f64> {
        let w: Vec<f64> = (0..self.vocab)
            .map(|k| libm::pow((k + 1) as f64, -self.zipf_exponent))
            .collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }
}

/// Row-major `[rows, cols]` block of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub rows: usize,
    pub cols: usize,
    pub tokens: Vec<usize>,
}

impl TokenBatch {
    pub fn new(rows: usize, cols: usize, tokens: Vec<usize>) -> Result<Self> {
        if rows * cols != tokens.len() || rows == 0 || cols == 0 {
            return Err(Error::shape(
                "token_batch",
                format!("{rows}x{cols} batch with {} tokens", tokens.len()),
            ));
        }
        Ok(Self { rows, cols, tokens })
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.tokens[r * self.cols..(r + 1) * self.cols]
    }
}

/// Sampler for a [`SyntheticDataConfig`]; holds the Zipf table and the
/// permutation, draws randomness from a caller-supplied [`Rng`].
#[derive(Clone, Debug)]
pub struct SyntheticData {
    cfg: SyntheticDataConfig,
    zipf: WeightedIndex<f64>,
    perm: Vec<usize>,
}

impl SyntheticData {
    pub fn new(cfg: SyntheticDataConfig) -> Result<Self> {
        cfg.validate()?;
        let zipf =
            WeightedIndex::new(cfg.zipf_probabilities()).map_err(|e| Error::Config(format!("zipf table: {e}")))?;
        let mut perm: Vec<usize> = (0..cfg.vocab).collect();
        perm.shuffle(Rng::new(cfg.permutation_seed).inner_mut());
        Ok(Self { cfg, zipf, perm })
    }

    pub fn config(&self) -> &SyntheticDataConfig {
        &self.cfg
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn sample_token(&self, rng: &mut Rng) -> usize {
        self.zipf.sample(rng.inner_mut())
    }

    pub fn sample_batch(&self, rng: &mut Rng, rows: usize, cols: usize) -> TokenBatch {
        let mut tokens = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let mut tok = self.sample_token(rng);
            tokens.push(tok);
            for _ in 1..cols {
                tok = if rng.uniform() < self.cfg.copy_prob {
                    self.perm[tok]
                } else {
                    self.sample_token(rng)
                };
                tokens.push(tok);
            }
        }
        TokenBatch { rows, cols, tokens }
    }
}

/// Free-function form of [`SyntheticData::sample_batch`].
pub fn sample_batch(cfg: &SyntheticDataConfig, rng: &mut Rng, rows: usize, cols: usize) -> Result<TokenBatch> {
    Ok(SyntheticData::new(cfg.clone())?.sample_batch(rng, rows, cols))
}
