//! Finite-difference suites over every trainable component, at sizes small
//! enough to check each parameter element individually.

use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{GmmAttention, GmmConfig};
use crate::decoder::{Decoder, DecoderConfig, DecoderMode};
use crate::duration::{DurationPredictor, DurationPredictorConfig};
use crate::encoder::{DenseFuseEncoder, EncoderConfig, FusionMode, TokenSequence};
use crate::error::Result;
use crate::extractor::{DurationExtractor, ExtractorConfig};
use crate::frames::AcousticFrames;
use crate::gradcheck::{check_params, probe_loss, CheckEntry};
use crate::graph::{Graph, Var};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::postnet::{Cbhg, PostnetConfig};
use crate::rng::{RngStream, StreamKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Encoder,
    Duration,
    Attention,
    Decoder,
    Postnet,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Encoder,
        Suite::Duration,
        Suite::Attention,
        Suite::Decoder,
        Suite::Postnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Encoder => "encoder",
            Suite::Duration => "duration",
            Suite::Attention => "attention",
            Suite::Decoder => "decoder",
            Suite::Postnet => "postnet",
        }
    }

    pub fn from_name(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub entries: Vec<CheckEntry>,
}

impl SuiteReport {
    pub fn worst(&self) -> f64 {
        crate::gradcheck::worst(&self.entries)
    }
}

const MICRO_VOCAB: usize = 6;
const MICRO_D: usize = 8;

fn micro_encoder(fusion: FusionMode) -> EncoderConfig {
    EncoderConfig {
        vocab_size: MICRO_VOCAB,
        d_model: MICRO_D,
        n_blocks: 2,
        n_heads_block: 2,
        n_heads_fusion: 2,
        conv_layers: 2,
        kernel: 3,
        d_ff: 12,
        dropout: 0.1,
        fusion,
    }
}

fn micro_postnet(feat: usize) -> PostnetConfig {
    PostnetConfig {
        feat_dim: feat,
        bank_size: 4,
        bank_channels: 2,
        proj_dim: 4,
        highway_layers: 2,
        highway_dim: 4,
        rnn_dim: 3,
    }
}

/// Moves every parameter off its structured initial value (zero biases,
/// unit gains, zero output layers) so no gradient is trivially zero.
fn perturb(store: &mut ParamStore, seed: u64) {
    let mut rng = RngStream::new(seed, StreamKind::Check);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x += rng.uniform(-0.3, 0.3);
        }
    }
}

fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = RngStream::substream(seed, StreamKind::Check, 1);
    Tensor::new(
        &[rows, cols],
        (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .expect("non-empty extents")
}

fn probe(g: &mut Graph<'_>, outs: &[Var], seed: u64) -> Result<Var> {
    let mut rng = RngStream::substream(seed, StreamKind::Check, 2);
    let terms: Vec<Var> = outs
        .iter()
        .map(|&o| probe_loss(g, o, &mut rng))
        .collect::<Result<_>>()?;
    g.add_all(&terms)
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.sorted_ids()
}

/// Runs one suite. `fault` corrupts the named operation's backward rule in
/// the analytic pass (negative control).
pub fn run_suite(suite: Suite, step: f64, fault: Option<&'static str>, seed: u64) -> Result<SuiteReport> {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(seed, StreamKind::ParamInit);
    let entries = match suite {
        Suite::Encoder => {
            let enc = DenseFuseEncoder::new(
                &mut ParamBuilder::new(&mut store, &mut rng),
                "encoder",
                micro_encoder(FusionMode::DenseFuse),
            )?;
            perturb(&mut store, seed);
            let toks = TokenSequence::new(alloc::vec![1, 4, 2], MICRO_VOCAB)?;
            check_params(&store, &all_ids(&store), step, fault, |g| {
                let h = enc.encode(g, &toks)?;
                probe(g, &[h.matrix], seed)
            })?
        }
        Suite::Duration => {
            let cfg = DurationPredictorConfig {
                conv_layers: 3,
                conv_dim: 6,
                kernel: 3,
                rnn_dim: 4,
                dropout: 0.1,
            };
            let pred = DurationPredictor::new(&mut ParamBuilder::new(&mut store, &mut rng), "duration", MICRO_D, cfg)?;
            perturb(&mut store, seed);
            let hidden = random_input(3, MICRO_D, seed);
            check_params(&store, &all_ids(&store), step, fault, |g| {
                let h = g.input(hidden.clone());
                let d = pred.forward(g, h)?;
                probe(g, &[d], seed)
            })?
        }
        Suite::Attention => {
            let cfg = ExtractorConfig {
                encoder: micro_encoder(FusionMode::DenseFuse),
                feat_dim: 4,
                prenet_dim: 5,
                prenet_dropout: 0.5,
                lstm_dim: 4,
                attention: GmmConfig {
                    mixtures: 2,
                    ..GmmConfig::default()
                },
                postnet: micro_postnet(4),
            };
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            let att = GmmAttention::new(&mut pb, "gmm", 5, GmmConfig::default())?;
            let ex = DurationExtractor::new(&mut pb, "extractor", cfg)?;
            perturb(&mut store, seed);
            let memory = random_input(4, 3, seed);
            let query = random_input(3, 5, seed ^ 1);
            let toks = TokenSequence::new(alloc::vec![3, 0, 5], MICRO_VOCAB)?;
            let target = AcousticFrames::new(random_input(5, 4, seed ^ 2))?;
            let ids = all_ids(&store);
            check_params(&store, &ids, step, fault, |g| {
                // three chained attention steps on their own
                let mem = g.input(memory.clone());
                let qs = g.input(query.clone());
                let mut state = att.initial_state(g, 3);
                let mut outs = Vec::new();
                for t in 0..3 {
                    let q = g.row(qs, t)?;
                    let st = att.step(g, q, mem, &state, t)?;
                    outs.push(st.weights);
                    outs.push(st.context);
                    state = st.state;
                }
                // and inside the teacher-forced extractor
                let o = ex.forward_teacher_forced(g, &toks, &target)?;
                outs.extend([o.before, o.after, o.alignment]);
                probe(g, &outs, seed)
            })?
        }
        Suite::Decoder => {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            let nar_cfg = DecoderConfig {
                rnn_dim: 5,
                feat_dim: 4,
                mode: DecoderMode::NonAutoregressive,
                prenet_dim: 3,
                prenet_dropout: 0.5,
            };
            let nar = Decoder::new(&mut pb, "decoder", MICRO_D, nar_cfg.clone())?;
            let ar = Decoder::new(
                &mut pb,
                "decoder_ar",
                MICRO_D,
                DecoderConfig {
                    mode: DecoderMode::Autoregressive,
                    ..nar_cfg
                },
            )?;
            perturb(&mut store, seed);
            let expanded = random_input(4, MICRO_D, seed);
            let teacher = AcousticFrames::new(random_input(4, 4, seed ^ 3))?;
            check_params(&store, &all_ids(&store), step, fault, |g| {
                let e = g.input(expanded.clone());
                let (a, _) = nar.decode(g, e)?;
                let (b, _) = ar.decode_autoregressive(g, e, Some(&teacher))?;
                let (c, _) = ar.decode_autoregressive(g, e, None)?;
                probe(g, &[a, b, c], seed)
            })?
        }
        Suite::Postnet => {
            let post = Cbhg::new(
                &mut ParamBuilder::new(&mut store, &mut rng),
                "postnet",
                micro_postnet(3),
            )?;
            perturb(&mut store, seed);
            let before = random_input(4, 3, seed);
            check_params(&store, &all_ids(&store), step, fault, |g| {
                let b = g.input(before.clone());
                let a = post.forward(g, b)?;
                probe(g, &[a], seed)
            })?
        }
    };
    Ok(SuiteReport { suite, entries })
}

/// Prefixes each entry with its suite name.
pub fn qualified(report: &SuiteReport) -> Vec<(String, f64)> {
    report
        .entries
        .iter()
        .map(|e| (alloc::format!("{}/{}", report.suite.name(), e.name), e.max_rel_err))
        .collect()
}
