//! Recurrent acoustic decoder.
//!
//! The default decoder is non-autoregressive: a single unidirectional GRU runs
//! over the length-regulated text representation and never sees a predicted
//! or target frame. The autoregressive variant (ablation) additionally feeds
//! the previous frame through a prenet.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::frames::{AcousticFrames, FEAT_DIM};
use crate::graph::{Graph, Var};
use crate::nn::{Gru, Linear, Prenet};
use crate::params::ParamBuilder;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum DecoderMode {
    NonAutoregressive,
    Autoregressive,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DecoderConfig {
    pub rnn_dim: usize,
    pub feat_dim: usize,
    pub mode: DecoderMode,
    /// Feedback prenet, autoregressive mode only.
    pub prenet_dim: usize,
    pub prenet_dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            rnn_dim: 512,
            feat_dim: FEAT_DIM,
            mode: DecoderMode::NonAutoregressive,
            prenet_dim: 128,
            prenet_dropout: 0.5,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rnn_dim == 0 || self.feat_dim == 0 || self.prenet_dim == 0 {
            return Err(Error::Config("decoder extents must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.prenet_dropout)));
        }
        Ok(())
    }
}

/// Operation counters for one decode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeStats {
    pub recurrence_steps: usize,
    pub feedback_projections: usize,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub gru: Gru,
    pub head: Linear,
    pub prenet: Option<Prenet>,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, text_dim: usize, config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut s = pb.scope(name);
        let (gru_in, prenet) = match config.mode {
            DecoderMode::NonAutoregressive => (text_dim, None),
            DecoderMode::Autoregressive => (
                text_dim + config.prenet_dim,
                Some(Prenet::new(
                    &mut s,
                    "prenet",
                    config.feat_dim,
                    config.prenet_dim,
                    config.prenet_dropout,
                )?),
            ),
        };
        let gru = Gru::new(&mut s, "gru", gru_in, config.rnn_dim)?;
        let head = Linear::new(&mut s, "head", config.rnn_dim + text_dim, config.feat_dim)?;
        Ok(Self {
            config,
            gru,
            head,
            prenet,
        })
    }

    /// Dispatches on the configured mode. `teacher` is ignored by the
    /// non-autoregressive decoder; the autoregressive one uses it for teacher
    /// forcing when present and its own outputs otherwise.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        expanded: Var,
        teacher: Option<&AcousticFrames>,
    ) -> Result<(Var, DecodeStats)> {
        match self.config.mode {
            DecoderMode::NonAutoregressive => self.decode(g, expanded),
            DecoderMode::Autoregressive => self.decode_autoregressive(g, expanded, teacher),
        }
    }

    /// `[T'×d] → [T'×feat]` from the expanded text alone.
    pub fn decode(&self, g: &mut Graph<'_>, expanded: Var) -> Result<(Var, DecodeStats)> {
        if self.prenet.is_some() {
            return Err(Error::Config("decoder was built in autoregressive mode".into()));
        }
        let t = g.dims(expanded).0;
        let hs = self.gru.run(g, expanded, false)?;
        let cat = g.concat_cols(&[hs, expanded])?;
        let out = self.head.forward(g, cat)?;
        Ok((
            out,
            DecodeStats {
                recurrence_steps: t,
                feedback_projections: 0,
            },
        ))
    }

    pub fn decode_autoregressive(
        &self,
        g: &mut Graph<'_>,
        expanded: Var,
        teacher: Option<&AcousticFrames>,
    ) -> Result<(Var, DecodeStats)> {
        let prenet = self
            .prenet
            .as_ref()
            .ok_or_else(|| Error::Config("decoder was built in non-autoregressive mode".into()))?;
        let t = g.dims(expanded).0;
        let f = self.config.feat_dim;
        let stats = DecodeStats {
            recurrence_steps: t,
            feedback_projections: t,
        };
        if let Some(teacher) = teacher {
            if teacher.len() != t || teacher.dim() != f {
                return Err(Error::Contract(format!(
                    "teacher frames [{}×{}] do not match decoder output [{t}×{f}]",
                    teacher.len(),
                    teacher.dim()
                )));
            }
            let mut shifted = alloc::vec![0.0; f];
            shifted.extend_from_slice(&teacher.tensor().data()[..(t - 1) * f]);
            let shifted = g.input(Tensor::new(&[t, f], shifted)?);
            let fb = prenet.forward(g, shifted)?;
            let xs = g.concat_cols(&[expanded, fb])?;
            let hs = self.gru.run(g, xs, false)?;
            let cat = g.concat_cols(&[hs, expanded])?;
            return Ok((self.head.forward(g, cat)?, stats));
        }
        let mut prev = g.zeros(&[1, f]);
        let mut h = g.zeros(&[1, self.config.rnn_dim]);
        let mut outs = Vec::with_capacity(t);
        for i in 0..t {
            let e = g.row(expanded, i)?;
            let fb = prenet.forward(g, prev)?;
            let x = g.concat_cols(&[e, fb])?;
            let xp = self.gru.project_inputs(g, x)?;
            h = self.gru.step(g, xp, h)?;
            let cat = g.concat_cols(&[h, e])?;
            prev = self.head.forward(g, cat)?;
            outs.push(prev);
        }
        Ok((g.concat_rows(&outs)?, stats))
    }
}
