//! The complete acoustic model: encoder, detached duration predictor, length
//! regulator, recurrent decoder and postnet.

use alloc::format;

use crate::decoder::{DecodeStats, Decoder, DecoderConfig, DecoderMode};
use crate::duration::{length_regulate, DurationPredictor, DurationPredictorConfig, DurationSeq};
use crate::encoder::{DenseFuseEncoder, EncoderConfig, FusionMode, HiddenTextRepr, TokenSequence};
use crate::error::{Error, Result};
use crate::frames::AcousticFrames;
use crate::graph::{Graph, Var};
use crate::params::{ParamBuilder, ParamStore};
use crate::postnet::{Cbhg, PostnetConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub duration: DurationPredictorConfig,
    pub decoder: DecoderConfig,
    pub postnet: PostnetConfig,
}

impl ModelConfig {
    /// Full-size configuration.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            encoder: EncoderConfig::full(vocab_size),
            duration: DurationPredictorConfig::default(),
            decoder: DecoderConfig::default(),
            postnet: PostnetConfig::default(),
        }
    }

    /// Same topology at a width that trains in minutes on one CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                d_model: 64,
                d_ff: 256,
                ..EncoderConfig::full(vocab_size)
            },
            duration: DurationPredictorConfig {
                conv_dim: 64,
                rnn_dim: 32,
                ..DurationPredictorConfig::default()
            },
            decoder: DecoderConfig {
                rnn_dim: 128,
                prenet_dim: 128,
                ..DecoderConfig::default()
            },
            postnet: PostnetConfig {
                bank_channels: 16,
                proj_dim: 64,
                highway_dim: 32,
                rnn_dim: 32,
                ..PostnetConfig::default()
            },
        }
    }

    pub fn with_fusion(mut self, fusion: FusionMode) -> Self {
        self.encoder.fusion = fusion;
        self
    }

    pub fn with_decoder_mode(mut self, mode: DecoderMode) -> Self {
        self.decoder.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.duration.validate()?;
        self.decoder.validate()?;
        self.postnet.validate()?;
        if self.decoder.feat_dim != self.postnet.feat_dim {
            return Err(Error::Config(format!(
                "decoder width {} differs from postnet width {}",
                self.decoder.feat_dim, self.postnet.feat_dim
            )));
        }
        Ok(())
    }
}

/// Which durations drove the length regulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DurationSource {
    Target,
    Predicted,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hidden: HiddenTextRepr,
    pub dur_raw: Var,
    pub before: Var,
    pub after: Var,
    pub stats: DecodeStats,
    pub duration_source: DurationSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub durations: DurationSeq,
    pub before: Tensor,
    pub after: Tensor,
    pub stats: DecodeStats,
    pub duration_source: DurationSource,
}

#[derive(Debug, Clone)]
pub struct AcousticModel {
    pub config: ModelConfig,
    pub encoder: DenseFuseEncoder,
    pub duration: DurationPredictor,
    pub decoder: Decoder,
    pub postnet: Cbhg,
}

impl AcousticModel {
    pub fn new(pb: &mut ParamBuilder<'_>, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.d_model;
        Ok(Self {
            encoder: DenseFuseEncoder::new(pb, "encoder", config.encoder.clone())?,
            duration: DurationPredictor::new(pb, "duration", d, config.duration.clone())?,
            decoder: Decoder::new(pb, "decoder", d, config.decoder.clone())?,
            postnet: Cbhg::new(pb, "postnet", config.postnet.clone())?,
            config,
        })
    }

    pub fn feat_dim(&self) -> usize {
        self.config.decoder.feat_dim
    }

    /// Training forward pass: the target durations drive the length
    /// regulator; the predictor runs alongside on the detached encoding.
    pub fn forward_train(
        &self,
        g: &mut Graph<'_>,
        tokens: &TokenSequence,
        target: &AcousticFrames,
        durations: &[usize],
    ) -> Result<ForwardOutput> {
        if durations.len() != tokens.len() {
            return Err(Error::Contract(format!(
                "{} durations for {} tokens",
                durations.len(),
                tokens.len()
            )));
        }
        let total: usize = durations.iter().sum();
        if total != target.len() {
            return Err(Error::Contract(format!(
                "durations sum to {total} but the target has {} frames",
                target.len()
            )));
        }
        let hidden = self.encoder.encode(g, tokens)?;
        let dur_raw = self.duration.forward(g, hidden.matrix)?;
        let expanded = length_regulate(g, hidden.matrix, durations)?;
        let (before, stats) = self.decoder.forward(g, expanded, Some(target))?;
        let after = self.postnet.forward(g, before)?;
        Ok(ForwardOutput {
            hidden,
            dur_raw,
            before,
            after,
            stats,
            duration_source: DurationSource::Target,
        })
    }

    /// Inference: predicted, rounded durations; dropout off; no targets.
    pub fn synthesize(&self, params: &ParamStore, tokens: &TokenSequence) -> Result<Synthesis> {
        let mut g = Graph::new(params);
        let hidden = self.encoder.encode(&mut g, tokens)?;
        let raw = self.duration.forward(&mut g, hidden.matrix)?;
        let durations = DurationSeq::from_raw(g.value(raw).to_vec());
        let expanded = length_regulate(&mut g, hidden.matrix, &durations.frames)?;
        let (before, stats) = self.decoder.forward(&mut g, expanded, None)?;
        let after = self.postnet.forward(&mut g, before)?;
        Ok(Synthesis {
            durations,
            before: g.tensor(before),
            after: g.tensor(after),
            stats,
            duration_source: DurationSource::Predicted,
        })
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full(16)
    }
}
