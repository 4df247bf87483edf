//! Duration predictor, rounding policy and length regulator.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BiGru, Conv1d, LayerNorm, Linear};
use crate::params::ParamBuilder;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DurationPredictorConfig {
    pub conv_layers: usize,
    pub conv_dim: usize,
    pub kernel: usize,
    pub rnn_dim: usize,
    pub dropout: f64,
}

impl Default for DurationPredictorConfig {
    /// Three 256-wide kernel-3 convolutions and a 64-unit bidirectional GRU.
    fn default() -> Self {
        Self {
            conv_layers: 3,
            conv_dim: 256,
            kernel: 3,
            rnn_dim: 64,
            dropout: 0.1,
        }
    }
}

impl DurationPredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers == 0 || self.conv_dim == 0 || self.rnn_dim == 0 {
            return Err(Error::Config("duration predictor extents must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "duration predictor kernel must be odd, got {}",
                self.kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-token durations: the predictor's raw outputs (if any) and integer
/// frame counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationSeq {
    pub raw: Vec<f64>,
    pub frames: Vec<usize>,
}

impl DurationSeq {
    /// Integer durations with no predictor output behind them (targets).
    pub fn from_frames(frames: Vec<usize>) -> Self {
        Self {
            raw: frames.iter().map(|&f| f as f64).collect(),
            frames,
        }
    }

    pub fn from_raw(raw: Vec<f64>) -> Self {
        let frames = round_durations(&raw);
        Self { raw, frames }
    }

    pub fn total(&self) -> usize {
        self.frames.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Half-up rounding clamped at zero; if everything rounds to zero the
/// largest raw value (lowest index on ties) gets one frame.
pub fn round_durations(raw: &[f64]) -> Vec<usize> {
    let mut frames: Vec<usize> = raw
        .iter()
        .map(|&r| {
            let v = libm::floor(r + 0.5);
            if v.is_finite() && v > 0.0 {
                v as usize
            } else {
                0
            }
        })
        .collect();
    if !frames.is_empty() && frames.iter().all(|&f| f == 0) {
        let mut best: Option<usize> = None;
        for (i, &r) in raw.iter().enumerate() {
            if !r.is_nan() && best.map_or(true, |b| r > raw[b]) {
                best = Some(i);
            }
        }
        frames[best.unwrap_or(0)] = 1;
    }
    frames
}

/// Row indices that repeat row `i` `frames[i]` times, in order.
pub fn expansion_index(frames: &[usize]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(frames.iter().sum());
    for (i, &f) in frames.iter().enumerate() {
        idx.extend(core::iter::repeat(i).take(f));
    }
    idx
}

/// Upsamples `[T_text×d]` to `[Σframes×d]`.
pub fn length_regulate(g: &mut Graph<'_>, hidden: Var, frames: &[usize]) -> Result<Var> {
    let rows = g.dims(hidden).0;
    if frames.len() != rows {
        return Err(Error::Contract(format!(
            "{} durations for {} text positions",
            frames.len(),
            rows
        )));
    }
    let idx = expansion_index(frames);
    if idx.is_empty() {
        return Err(Error::Contract("durations sum to zero frames".into()));
    }
    g.gather_rows(hidden, &idx)
}

#[derive(Debug, Clone)]
pub struct DurationPredictor {
    pub config: DurationPredictorConfig,
    pub convs: Vec<(Conv1d, LayerNorm)>,
    pub rnn: BiGru,
    pub out: Linear,
}

impl DurationPredictor {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        input_dim: usize,
        config: DurationPredictorConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mut s = pb.scope(name);
        let mut convs = Vec::with_capacity(config.conv_layers);
        let mut c_in = input_dim;
        for i in 0..config.conv_layers {
            let mut l = s.scope(&format!("conv{i}"));
            convs.push((
                Conv1d::same(&mut l, "conv", config.kernel, c_in, config.conv_dim)?,
                LayerNorm::new(&mut l, "ln", config.conv_dim)?,
            ));
            c_in = config.conv_dim;
        }
        let rnn = BiGru::new(&mut s, "rnn", c_in, config.rnn_dim)?;
        let out = Linear::new(&mut s, "out", 2 * config.rnn_dim, 1)?;
        Ok(Self {
            config,
            convs,
            rnn,
            out,
        })
    }

    /// Raw durations `[T×1]`. The input is detached first, so no gradient
    /// from this branch reaches whatever produced `hidden`.
    pub fn forward(&self, g: &mut Graph<'_>, hidden: Var) -> Result<Var> {
        let mut x = g.stop_gradient(hidden);
        for (conv, ln) in &self.convs {
            x = conv.forward(g, x)?;
            x = g.relu(x);
            x = ln.forward(g, x)?;
            x = g.dropout(x, self.config.dropout);
        }
        let r = self.rnn.forward(g, x)?;
        self.out.forward(g, r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::{RngStream, StreamKind};
    use crate::tensor::Tensor;

    #[test]
    fn rounding_examples() {
        assert_eq!(round_durations(&[1.4, 2.6]), [1, 3]);
        assert_eq!(round_durations(&[-0.3]), [1]);
        assert_eq!(round_durations(&[2.5]), [3]);
        assert_eq!(round_durations(&[0.2, 0.4, -1.0]), [0, 1, 0]);
        assert_eq!(round_durations(&[0.3, 0.3]), [1, 0]);
        assert_eq!(round_durations(&[f64::NAN, 0.1]), [0, 1]);
    }

    #[test]
    fn regulator_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let h = g.input(
            Tensor::from_rows(&[alloc::vec![1.0, 10.0], alloc::vec![2.0, 20.0], alloc::vec![3.0, 30.0]]).unwrap(),
        );
        let e = length_regulate(&mut g, h, &[2, 1, 3]).unwrap();
        assert_eq!(
            g.value(e),
            &[1.0, 10.0, 1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 3.0, 30.0, 3.0, 30.0]
        );
        let e = length_regulate(&mut g, h, &[1, 1, 1]).unwrap();
        assert_eq!(g.value(e), g.value(h));
        let e = length_regulate(&mut g, h, &[0, 2, 0]).unwrap();
        assert_eq!(g.value(e), &[2.0, 20.0, 2.0, 20.0]);
        assert!(matches!(
            length_regulate(&mut g, h, &[0, 0, 0]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(length_regulate(&mut g, h, &[1, 1]), Err(Error::Contract(_))));
    }

    fn small() -> DurationPredictorConfig {
        DurationPredictorConfig {
            conv_layers: 3,
            conv_dim: 6,
            kernel: 3,
            rnn_dim: 4,
            dropout: 0.1,
        }
    }

    #[test]
    fn constant_head_gives_bias() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1, StreamKind::ParamInit);
        let p = DurationPredictor::new(&mut ParamBuilder::new(&mut store, &mut rng), "dur", 8, small()).unwrap();
        store.get_mut(p.out.w).data_mut().iter_mut().for_each(|x| *x = 0.0);
        store.get_mut(p.out.b.unwrap()).data_mut()[0] = 2.25;
        let mut g = Graph::new(&store);
        let h = g.input(Tensor::new(&[5, 8], (0..40).map(|i| i as f64 * 0.1).collect()).unwrap());
        let d = p.forward(&mut g, h).unwrap();
        assert_eq!(g.shape(d), &[5, 1]);
        assert!(g.value(d).iter().all(|&x| x == 2.25));
    }

    #[test]
    fn predictor_input_is_detached() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(2, StreamKind::ParamInit);
        let p = DurationPredictor::new(&mut ParamBuilder::new(&mut store, &mut rng), "dur", 8, small()).unwrap();
        let mut g = Graph::new(&store);
        let h = g.leaf(Tensor::new(&[3, 8], (0..24).map(|i| libm::sin(i as f64)).collect()).unwrap());
        let d = p.forward(&mut g, h).unwrap();
        let l = g.sum(d);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(h).map_or(true, |gr| gr.iter().all(|&x| x == 0.0)));
        assert!(grads.param(p.out.w).unwrap().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn even_kernel_rejected() {
        let mut c = small();
        c.kernel = 4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
