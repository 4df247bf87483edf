//! Synthetic corpus with known durations.
//!
//! Token `v` lasts `1 + (v mod 4)` frames. Within-token frame `p` of token `v`
//! has component `d` equal to `sin(2π(v+1)(d+1)/(20V)) + 0.1p` plus Gaussian
//! noise, so both token identity and position inside the token are
//! recoverable from the features.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::duration::DurationSeq;
use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::frames::{AcousticFrames, FEAT_DIM};
use crate::rng::{RngStream, StreamKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub n_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            n_utterances: 64,
            min_tokens: 4,
            max_tokens: 10,
            noise_sigma: 0.01,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.min_tokens < 1 || self.max_tokens < self.min_tokens {
            return Err(Error::Config(format!(
                "token range {}..={} is empty or starts below 1",
                self.min_tokens, self.max_tokens
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// One training pair. `durations` is absent until extracted or supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tokens: TokenSequence,
    pub frames: AcousticFrames,
    pub durations: Option<DurationSeq>,
}

pub fn true_duration(token: usize) -> usize {
    1 + token % 4
}

/// Noise-free frame for within-token position `p`.
pub fn clean_frame(token: usize, p: usize, vocab_size: usize) -> [f64; FEAT_DIM] {
    let mut x = [0.0; FEAT_DIM];
    for (d, v) in x.iter_mut().enumerate() {
        let phase = 2.0 * core::f64::consts::PI * ((token + 1) * (d + 1)) as f64 / (vocab_size * FEAT_DIM) as f64;
        *v = libm::sin(phase) + 0.1 * p as f64;
    }
    x
}

/// Expected `|ε|` for `ε ~ N(0, σ)`: `σ·√(2/π)`.
pub fn noise_floor(sigma: f64) -> f64 {
    sigma * libm::sqrt(2.0 / core::f64::consts::PI)
}

pub fn utterance_id(i: usize) -> String {
    format!("utt{i:04}")
}

pub fn generate_toy_corpus(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_utterances);
    for i in 0..spec.n_utterances {
        let mut trng = RngStream::substream(spec.seed, StreamKind::Corpus, i as u64);
        let mut nrng = RngStream::substream(spec.seed, StreamKind::Data, i as u64);
        let n = trng.int_inclusive(spec.min_tokens, spec.max_tokens);
        let ids: Vec<usize> = (0..n).map(|_| trng.int_inclusive(0, spec.vocab_size - 1)).collect();
        let durations: Vec<usize> = ids.iter().map(|&v| true_duration(v)).collect();
        let total: usize = durations.iter().sum();
        let mut data = Vec::with_capacity(total * FEAT_DIM);
        for (&v, &dur) in ids.iter().zip(&durations) {
            for p in 0..dur {
                for x in clean_frame(v, p, spec.vocab_size) {
                    let eps = if spec.noise_sigma > 0.0 {
                        nrng.normal(0.0, spec.noise_sigma)
                    } else {
                        0.0
                    };
                    data.push(x + eps);
                }
            }
        }
        out.push(Utterance {
            id: utterance_id(i),
            tokens: TokenSequence::new(ids, spec.vocab_size)?,
            frames: AcousticFrames::new(Tensor::new(&[total, FEAT_DIM], data)?)?,
            durations: Some(DurationSeq::from_frames(durations)),
        });
    }
    Ok(out)
}
