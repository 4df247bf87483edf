//! Attention-based duration extractor.
//!
//! An encoder, a two-layer LSTM decoder with GMM attention and a CBHG postnet,
//! trained teacher-forced to reconstruct the target frames. The first LSTM
//! queries the attention; the second reads the fresh context. Durations are
//! read off the attention argmax path in ground-truth-aligned mode.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::{GmmAttention, GmmConfig};
use crate::duration::DurationSeq;
use crate::encoder::{DenseFuseEncoder, EncoderConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::frames::{AcousticFrames, FEAT_DIM};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, Lstm, Prenet};
use crate::params::{ParamBuilder, ParamStore};
use crate::postnet::{Cbhg, PostnetConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ExtractorConfig {
    pub encoder: EncoderConfig,
    pub feat_dim: usize,
    pub prenet_dim: usize,
    pub prenet_dropout: f64,
    pub lstm_dim: usize,
    pub attention: GmmConfig,
    pub postnet: PostnetConfig,
}

impl ExtractorConfig {
    pub fn full(vocab_size: usize) -> Self {
        Self {
            encoder: EncoderConfig::full(vocab_size),
            feat_dim: FEAT_DIM,
            prenet_dim: 128,
            prenet_dropout: 0.5,
            lstm_dim: 1024,
            attention: GmmConfig::default(),
            postnet: PostnetConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.attention.validate()?;
        self.postnet.validate()?;
        if self.postnet.feat_dim != self.feat_dim {
            return Err(Error::Config(format!(
                "postnet width {} differs from feature width {}",
                self.postnet.feat_dim, self.feat_dim
            )));
        }
        if self.prenet_dim == 0 || self.lstm_dim == 0 || self.feat_dim == 0 {
            return Err(Error::Config("extractor extents must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.prenet_dropout)));
        }
        Ok(())
    }
}

/// Attention weights `[T_dec×T_text]`, one row per decoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    weights: Tensor,
}

impl AlignmentMatrix {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::Contract("alignment must be a matrix".into()));
        }
        if !weights.data().iter().all(|&w| w.is_finite() && w >= 0.0) {
            return Err(Error::Numeric(
                "alignment weights must be finite and non-negative".into(),
            ));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn decoder_steps(&self) -> usize {
        self.weights.rows()
    }

    pub fn text_len(&self) -> usize {
        self.weights.cols()
    }

    /// Most-attended token per decoder step; ties go to the lower index.
    pub fn argmax_path(&self) -> Vec<usize> {
        (0..self.decoder_steps())
            .map(|t| {
                let row = self.weights.row(t);
                let mut best = 0;
                for (j, &w) in row.iter().enumerate() {
                    if w > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Decoder steps per token along the argmax path; sums to `T_dec`.
    pub fn durations(&self) -> Vec<usize> {
        let mut d = alloc::vec![0; self.text_len()];
        for j in self.argmax_path() {
            d[j] += 1;
        }
        d
    }

    /// Fraction of consecutive step pairs whose argmax does not move back.
    pub fn monotonic_fraction(&self) -> f64 {
        let path = self.argmax_path();
        if path.len() < 2 {
            return 1.0;
        }
        let ok = path.windows(2).filter(|w| w[1] >= w[0]).count();
        ok as f64 / (path.len() - 1) as f64
    }

    /// Mean entropy (nats) of the row-normalised weights; rows with zero mass
    /// count as uniform.
    pub fn mean_entropy(&self) -> f64 {
        let n = self.text_len();
        let mut total = 0.0;
        for t in 0..self.decoder_steps() {
            let row = self.weights.row(t);
            let mass: f64 = row.iter().sum();
            if !(mass > 0.0) {
                total += libm::log(n as f64);
                continue;
            }
            let mut h = 0.0;
            for &w in row {
                let p = w / mass;
                if p > 0.0 {
                    h -= p * libm::log(p);
                }
            }
            total += h;
        }
        total / self.decoder_steps() as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractorOutput {
    pub before: Var,
    pub after: Var,
    pub alignment: Var,
}

#[derive(Debug, Clone)]
pub struct DurationExtractor {
    pub config: ExtractorConfig,
    pub encoder: DenseFuseEncoder,
    pub prenet: Prenet,
    pub lstm1: Lstm,
    pub lstm2: Lstm,
    pub attention: GmmAttention,
    pub frame_proj: Linear,
    pub postnet: Cbhg,
}

impl DurationExtractor {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, config: ExtractorConfig) -> Result<Self> {
        config.validate()?;
        let mut s = pb.scope(name);
        let d = config.encoder.d_model;
        let encoder = DenseFuseEncoder::new(&mut s, "encoder", config.encoder.clone())?;
        let prenet = Prenet::new(
            &mut s,
            "prenet",
            config.feat_dim,
            config.prenet_dim,
            config.prenet_dropout,
        )?;
        let lstm1 = Lstm::new(&mut s, "lstm1", config.prenet_dim + d, config.lstm_dim)?;
        let lstm2 = Lstm::new(&mut s, "lstm2", config.lstm_dim + d, config.lstm_dim)?;
        let attention = GmmAttention::new(&mut s, "attention", config.lstm_dim, config.attention.clone())?;
        let frame_proj = Linear::new(&mut s, "frame_proj", config.lstm_dim + d, config.feat_dim)?;
        // context rows start at zero
        let w = s.store_mut().get_mut(frame_proj.w).data_mut();
        w[config.lstm_dim * config.feat_dim..].iter_mut().for_each(|x| *x = 0.0);
        let postnet = Cbhg::new(&mut s, "postnet", config.postnet.clone())?;
        Ok(Self {
            config,
            encoder,
            prenet,
            lstm1,
            lstm2,
            attention,
            frame_proj,
            postnet,
        })
    }

    /// Runs exactly `target.len()` decoder steps, feeding the previous target
    /// frame (zeros at the first step).
    pub fn forward_teacher_forced(
        &self,
        g: &mut Graph<'_>,
        tokens: &TokenSequence,
        target: &AcousticFrames,
    ) -> Result<ExtractorOutput> {
        let tf = target.len();
        if target.dim() != self.config.feat_dim {
            return Err(Error::Contract(format!(
                "target width {} but extractor predicts {}",
                target.dim(),
                self.config.feat_dim
            )));
        }
        let memory = self.encoder.encode(g, tokens)?.matrix;
        let d = self.config.encoder.d_model;
        let h_dim = self.config.lstm_dim;

        let mut shifted = Vec::with_capacity(tf * self.config.feat_dim);
        shifted.resize(self.config.feat_dim, 0.0);
        shifted.extend_from_slice(&target.tensor().data()[..(tf - 1) * self.config.feat_dim]);
        let shifted = g.input(Tensor::new(&[tf, self.config.feat_dim], shifted)?);
        let pre = self.prenet.forward(g, shifted)?;

        let mut h1 = g.zeros(&[1, h_dim]);
        let mut c1 = g.zeros(&[1, h_dim]);
        let mut h2 = g.zeros(&[1, h_dim]);
        let mut c2 = g.zeros(&[1, h_dim]);
        let mut state = self.attention.initial_state(g, d);
        // decoding starts on the first token
        state.context = g.row(memory, 0)?;
        let mut outs = Vec::with_capacity(tf);
        let mut contexts = Vec::with_capacity(tf);
        let mut rows = Vec::with_capacity(tf);
        for t in 0..tf {
            let p = g.row(pre, t)?;
            let x = g.concat_cols(&[p, state.context])?;
            (h1, c1) = self.lstm1.step(g, x, h1, c1)?;
            let st = self.attention.step(g, h1, memory, &state, t)?;
            let x2 = g.concat_cols(&[h1, st.context])?;
            (h2, c2) = self.lstm2.step(g, x2, h2, c2)?;
            state = st.state;
            outs.push(h2);
            contexts.push(st.context);
            rows.push(st.weights);
        }
        let hs = g.concat_rows(&outs)?;
        let cs = g.concat_rows(&contexts)?;
        let both = g.concat_cols(&[hs, cs])?;
        let before = self.frame_proj.forward(g, both)?;
        let after = self.postnet.forward(g, before)?;
        let alignment = g.concat_rows(&rows)?;
        Ok(ExtractorOutput {
            before,
            after,
            alignment,
        })
    }

    /// L1 on the pre- and post-postnet frames.
    pub fn loss(&self, g: &mut Graph<'_>, out: &ExtractorOutput, target: &AcousticFrames) -> Result<Var> {
        let tv = g.input(target.tensor().clone());
        let a = g.l1(out.before, tv)?;
        let b = g.l1(out.after, tv)?;
        g.add(a, b)
    }

    pub fn align(
        &self,
        params: &ParamStore,
        tokens: &TokenSequence,
        target: &AcousticFrames,
    ) -> Result<AlignmentMatrix> {
        let mut g = Graph::new(params);
        let out = self.forward_teacher_forced(&mut g, tokens, target)?;
        AlignmentMatrix::new(g.tensor(out.alignment))
    }

    /// Ground-truth-aligned extraction: durations from the argmax path.
    pub fn extract_durations_gta(
        &self,
        params: &ParamStore,
        tokens: &TokenSequence,
        target: &AcousticFrames,
    ) -> Result<DurationSeq> {
        Ok(DurationSeq::from_frames(
            self.align(params, tokens, target)?.durations(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FusionMode;
    use crate::rng::{RngStream, StreamKind};

    pub(crate) fn tiny() -> ExtractorConfig {
        ExtractorConfig {
            encoder: EncoderConfig {
                vocab_size: 6,
                d_model: 8,
                n_blocks: 2,
                n_heads_block: 2,
                n_heads_fusion: 2,
                conv_layers: 1,
                kernel: 3,
                d_ff: 8,
                dropout: 0.1,
                fusion: FusionMode::DenseFuse,
            },
            feat_dim: 4,
            prenet_dim: 6,
            prenet_dropout: 0.5,
            lstm_dim: 5,
            attention: GmmConfig::default(),
            postnet: PostnetConfig {
                feat_dim: 4,
                bank_size: 3,
                bank_channels: 2,
                proj_dim: 4,
                highway_layers: 1,
                highway_dim: 4,
                rnn_dim: 2,
            },
        }
    }

    fn target(t: usize, dim: usize) -> AcousticFrames {
        AcousticFrames::new(Tensor::new(&[t, dim], (0..t * dim).map(|i| libm::sin(0.7 * i as f64)).collect()).unwrap())
            .unwrap()
    }

    #[test]
    fn shapes_follow_target_and_text() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1, StreamKind::ParamInit);
        let ex = DurationExtractor::new(&mut ParamBuilder::new(&mut store, &mut rng), "ex", tiny()).unwrap();
        let toks = TokenSequence::new(alloc::vec![1, 2, 3], 6).unwrap();
        let tgt = target(7, 4);
        let mut g = Graph::new(&store);
        let out = ex.forward_teacher_forced(&mut g, &toks, &tgt).unwrap();
        assert_eq!(g.shape(out.before), &[7, 4]);
        assert_eq!(g.shape(out.after), &[7, 4]);
        assert_eq!(g.shape(out.alignment), &[7, 3]);
        assert!(g.value(out.alignment).iter().all(|&w| w >= 0.0));
        let d = ex.extract_durations_gta(&store, &toks, &tgt).unwrap();
        assert_eq!(d.total(), 7);
    }

    #[test]
    fn zero_projection_gives_zero_frames() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(2, StreamKind::ParamInit);
        let ex = DurationExtractor::new(&mut ParamBuilder::new(&mut store, &mut rng), "ex", tiny()).unwrap();
        store
            .get_mut(ex.frame_proj.w)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let toks = TokenSequence::new(alloc::vec![0, 5], 6).unwrap();
        let mut g = Graph::new(&store);
        let out = ex.forward_teacher_forced(&mut g, &toks, &target(3, 4)).unwrap();
        assert!(g.value(out.before).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn context_rows_of_projection_start_at_zero() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(4, StreamKind::ParamInit);
        let cfg = tiny();
        let ex = DurationExtractor::new(&mut ParamBuilder::new(&mut store, &mut rng), "ex", cfg.clone()).unwrap();
        let w = store.get(ex.frame_proj.w).data();
        let split = cfg.lstm_dim * cfg.feat_dim;
        assert!(w[split..].iter().all(|&x| x == 0.0));
        assert!(w[..split].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn first_query_sees_first_token() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(5, StreamKind::ParamInit);
        let ex = DurationExtractor::new(&mut ParamBuilder::new(&mut store, &mut rng), "ex", tiny()).unwrap();
        let first_row = |ids: alloc::vec::Vec<usize>| {
            let a = ex
                .align(&store, &TokenSequence::new(ids, 6).unwrap(), &target(4, 4))
                .unwrap();
            a.weights().row(0).to_vec()
        };
        assert_ne!(first_row(alloc::vec![1, 2, 3]), first_row(alloc::vec![4, 2, 3]));
    }

    #[test]
    fn wrong_width_target_rejected() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(3, StreamKind::ParamInit);
        let ex = DurationExtractor::new(&mut ParamBuilder::new(&mut store, &mut rng), "ex", tiny()).unwrap();
        let toks = TokenSequence::new(alloc::vec![0], 6).unwrap();
        let mut g = Graph::new(&store);
        assert!(matches!(
            ex.forward_teacher_forced(&mut g, &toks, &target(3, 5)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn diagonal_alignment_gives_unit_durations() {
        let mut w = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
        let a = AlignmentMatrix::new(w).unwrap();
        assert_eq!(a.durations(), [1, 1, 1, 1]);
        assert_eq!(a.monotonic_fraction(), 1.0);
        assert!(a.mean_entropy().abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lower_index_and_backtracks_counted() {
        let a = AlignmentMatrix::new(
            Tensor::from_rows(&[
                alloc::vec![0.5, 0.5, 0.0],
                alloc::vec![0.0, 0.2, 0.9],
                alloc::vec![0.1, 0.8, 0.1],
            ])
            .unwrap(),
        )
        .unwrap();
        assert_eq!(a.argmax_path(), [0, 2, 1]);
        assert_eq!(a.durations(), [1, 1, 1]);
        assert!((a.monotonic_fraction() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(AlignmentMatrix::new(Tensor::new(&[1, 2], alloc::vec![0.1, -0.1]).unwrap()).is_err());
    }
}
