//! Dense-fuse text encoder.
//!
//! Token embeddings pass through a convolutional processor (which stands in
//! for positional encoding), then a stack of Transformer blocks. Each block
//! reads the element-wise sum of every earlier output (coarse fusion), and a
//! multi-head attention layer whose query is the coarse feature and whose
//! head `i` attends over block `i`'s output refines the result (fine fusion).

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{attend_head, Conv1d, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::Tensor;

/// Token ids of one utterance; never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Contract("token sequence must not be empty".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Vocabulary { id, vocab_size });
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How block outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum FusionMode {
    /// Dense bypass sums plus attention-based fine fusion.
    DenseFuse,
    /// Dense bypass sums only; the coarse feature is the output.
    CoarseOnly,
    /// Plain sequential stack, output of the last block (no fusion at all).
    Sequential,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads_block: usize,
    pub n_heads_fusion: usize,
    pub conv_layers: usize,
    pub kernel: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub fusion: FusionMode,
}

impl EncoderConfig {
    /// Full-size configuration: width 256, four 4-head blocks, 4-head fusion,
    /// three kernel-3 processor convolutions.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 256,
            n_blocks: 4,
            n_heads_block: 4,
            n_heads_fusion: 4,
            conv_layers: 3,
            kernel: 3,
            d_ff: 1024,
            dropout: 0.1,
            fusion: FusionMode::DenseFuse,
        }
    }

    pub fn fusion_enabled(&self) -> bool {
        self.fusion == FusionMode::DenseFuse
    }

    /// `true` selects dense-fuse, `false` the fusion-free sequential stack.
    pub fn with_fusion_enabled(mut self, enabled: bool) -> Self {
        self.fusion = if enabled {
            FusionMode::DenseFuse
        } else {
            FusionMode::Sequential
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_blocks == 0 || self.d_ff == 0 {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if self.n_heads_block == 0 || self.d_model % self.n_heads_block != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} block heads",
                self.d_model, self.n_heads_block
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "processor kernel must be odd, got {}",
                self.kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.fusion_enabled() {
            if self.n_heads_fusion != self.n_blocks {
                return Err(Error::Config(format!(
                    "fine fusion binds one head per block: {} heads for {} blocks",
                    self.n_heads_fusion, self.n_blocks
                )));
            }
            if self.d_model % self.n_heads_fusion != 0 {
                return Err(Error::Config(format!(
                    "d_model {} not divisible by {} fusion heads",
                    self.d_model, self.n_heads_fusion
                )));
            }
        }
        Ok(())
    }
}

/// Encoder output. `matrix` is the hidden text representation; the other
/// nodes are kept for fusion diagnostics and tests.
#[derive(Debug, Clone)]
pub struct HiddenTextRepr {
    pub matrix: Var,
    pub processor_output: Var,
    pub block_outputs: Vec<Var>,
    pub coarse: Var,
    /// One `[T×T]` attention matrix per fusion head (empty without fine fusion).
    pub fusion_weights: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub ln_attn: LayerNorm,
    pub ffn_in: Conv1d,
    pub ffn_out: Conv1d,
    pub ln_ffn: LayerNorm,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let mut s = pb.scope(name);
        let d = cfg.d_model;
        Ok(Self {
            attn: MultiHeadAttention::new(&mut s, "attn", d, cfg.n_heads_block)?,
            ln_attn: LayerNorm::new(&mut s, "ln_attn", d)?,
            ffn_in: Conv1d::same(&mut s, "ffn_in", 3, d, cfg.d_ff)?,
            ffn_out: Conv1d::same(&mut s, "ffn_out", 3, cfg.d_ff, d)?,
            ln_ffn: LayerNorm::new(&mut s, "ln_ffn", d)?,
            dropout: cfg.dropout,
        })
    }

    /// `y1 = LN(x + drop(MHA(x)))`, `y = LN(y1 + drop(FFN(y1)))`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let a = self.attn.forward(g, x)?;
        let a = g.dropout(a, self.dropout);
        let y1 = g.add(x, a)?;
        let y1 = self.ln_attn.forward(g, y1)?;
        let f = self.ffn_in.forward(g, y1)?;
        let f = g.relu(f);
        let f = self.ffn_out.forward(g, f)?;
        let f = g.dropout(f, self.dropout);
        let y = g.add(y1, f)?;
        self.ln_ffn.forward(g, y)
    }
}

#[derive(Debug, Clone)]
pub struct FusionHead {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

/// Multi-head fine fusion: head `i` queries with the coarse feature and reads
/// keys/values from block `i`.
#[derive(Debug, Clone)]
pub struct FineFusion {
    pub heads: Vec<FusionHead>,
    pub out: Linear,
    pub head_dim: usize,
}

impl FineFusion {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by {heads} fusion heads"
            )));
        }
        let mut s = pb.scope(name);
        let dh = d_model / heads;
        let mut hs = Vec::with_capacity(heads);
        for i in 0..heads {
            let mut h = s.scope(&format!("head{i}"));
            hs.push(FusionHead {
                q: Linear::no_bias(&mut h, "q", d_model, dh)?,
                k: Linear::no_bias(&mut h, "k", d_model, dh)?,
                v: Linear::no_bias(&mut h, "v", d_model, dh)?,
            });
        }
        Ok(Self {
            heads: hs,
            out: Linear::no_bias(&mut s, "out", d_model, d_model)?,
            head_dim: dh,
        })
    }

    /// `coarse + concat_i(softmax(Q_i K_iᵀ/√d_h) V_i) · W_O`; also returns the
    /// per-head attention matrices.
    pub fn forward(&self, g: &mut Graph<'_>, coarse: Var, blocks: &[Var]) -> Result<(Var, Vec<Var>)> {
        if blocks.len() != self.heads.len() {
            return Err(Error::Config(format!(
                "fine fusion has {} heads but received {} block outputs",
                self.heads.len(),
                blocks.len()
            )));
        }
        let scale = 1.0 / libm::sqrt(self.head_dim as f64);
        let mut outs = Vec::with_capacity(blocks.len());
        let mut weights = Vec::with_capacity(blocks.len());
        for (head, &block) in self.heads.iter().zip(blocks) {
            let q = head.q.forward(g, coarse)?;
            let k = head.k.forward(g, block)?;
            let v = head.v.forward(g, block)?;
            let (o, p) = attend_head(g, q, k, v, scale)?;
            outs.push(o);
            weights.push(p);
        }
        let cat = g.concat_cols(&outs)?;
        let adj = self.out.forward(g, cat)?;
        Ok((g.add(coarse, adj)?, weights))
    }
}

#[derive(Debug, Clone)]
pub struct DenseFuseEncoder {
    pub config: EncoderConfig,
    pub embedding: ParamId,
    pub processor: Vec<(Conv1d, LayerNorm)>,
    pub blocks: Vec<TransformerBlock>,
    pub fusion: Option<FineFusion>,
}

impl DenseFuseEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut s = pb.scope(name);
        let d = config.d_model;
        let embedding = s.glorot("embedding", &[config.vocab_size, d], config.vocab_size, d)?;
        let mut processor = Vec::with_capacity(config.conv_layers);
        for i in 0..config.conv_layers {
            let mut l = s.scope(&format!("processor{i}"));
            processor.push((
                Conv1d::same(&mut l, "conv", config.kernel, d, d)?,
                LayerNorm::new(&mut l, "ln", d)?,
            ));
        }
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            blocks.push(TransformerBlock::new(&mut s, &format!("block{i}"), &config)?);
        }
        let fusion = if config.fusion_enabled() {
            Some(FineFusion::new(&mut s, "fusion", d, config.n_heads_fusion)?)
        } else {
            None
        };
        Ok(Self {
            config,
            embedding,
            processor,
            blocks,
            fusion,
        })
    }

    pub fn embed_tokens(&self, g: &mut Graph<'_>, tokens: &TokenSequence) -> Result<Var> {
        if let Some(&id) = tokens.ids().iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        let table = g.param(self.embedding);
        g.gather_rows(table, tokens.ids())
    }

    /// conv → ReLU → dropout → layer norm, per processor layer.
    pub fn conv_processor(&self, g: &mut Graph<'_>, emb: Var) -> Result<Var> {
        let mut x = emb;
        for (conv, ln) in &self.processor {
            x = conv.forward(g, x)?;
            x = g.relu(x);
            x = g.dropout(x, self.config.dropout);
            x = ln.forward(g, x)?;
        }
        Ok(x)
    }

    pub fn encode(&self, g: &mut Graph<'_>, tokens: &TokenSequence) -> Result<HiddenTextRepr> {
        let emb = self.embed_tokens(g, tokens)?;
        let h0 = self.conv_processor(g, emb)?;
        let mut outputs: Vec<Var> = alloc::vec![h0];
        for block in &self.blocks {
            let input = match self.config.fusion {
                FusionMode::Sequential => *outputs.last().expect("h0 present"),
                FusionMode::DenseFuse | FusionMode::CoarseOnly => g.add_all(&outputs)?,
            };
            outputs.push(block.forward(g, input)?);
        }
        let block_outputs = outputs[1..].to_vec();
        let (coarse, matrix, fusion_weights) = match self.config.fusion {
            FusionMode::Sequential => {
                let last = *outputs.last().expect("at least one block");
                (last, last, Vec::new())
            }
            FusionMode::CoarseOnly => {
                let c = g.add_all(&outputs)?;
                (c, c, Vec::new())
            }
            FusionMode::DenseFuse => {
                let c = g.add_all(&outputs)?;
                let fusion = self.fusion.as_ref().expect("built with fusion");
                let (fused, w) = fusion.forward(g, c, &block_outputs)?;
                (c, fused, w)
            }
        };
        Ok(HiddenTextRepr {
            matrix,
            processor_output: h0,
            block_outputs,
            coarse,
            fusion_weights,
        })
    }
}

/// Convenience for tests and tools: encode in evaluation mode and return the
/// hidden representation as a plain tensor.
pub fn encode_eval(
    enc: &DenseFuseEncoder,
    params: &crate::params::ParamStore,
    tokens: &TokenSequence,
) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let h = enc.encode(&mut g, tokens)?;
    Ok(g.tensor(h.matrix))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input, probe_loss, DEFAULT_STEP};
    use crate::params::ParamStore;
    use crate::rng::{RngStream, StreamKind};

    fn small(fusion: FusionMode, blocks: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 10,
            d_model: 8,
            n_blocks: blocks,
            n_heads_block: 2,
            n_heads_fusion: blocks,
            conv_layers: 3,
            kernel: 3,
            d_ff: 16,
            dropout: 0.1,
            fusion,
        }
    }

    fn build(cfg: EncoderConfig, seed: u64) -> (DenseFuseEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed, StreamKind::ParamInit);
        let enc = DenseFuseEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng), "enc", cfg).unwrap();
        (enc, store)
    }

    fn zero_prefix(store: &mut ParamStore, prefix: &str, skip_norms: bool) {
        let ids: Vec<_> = store.ids_with_prefix(prefix).collect();
        for id in ids {
            if skip_norms && (store.name(id).contains("ln_")) {
                continue;
            }
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn embedding_lookup() {
        let (enc, store) = build(small(FusionMode::DenseFuse, 2), 1);
        let mut g = Graph::new(&store);
        let toks = TokenSequence::new(alloc::vec![3, 0, 0], 10).unwrap();
        let e = enc.embed_tokens(&mut g, &toks).unwrap();
        let table = store.get(enc.embedding);
        assert_eq!(&g.value(e)[0..8], table.row(3));
        assert_eq!(&g.value(e)[8..16], &g.value(e)[16..24]);
    }

    #[test]
    fn out_of_range_token_rejected() {
        assert!(matches!(
            TokenSequence::new(alloc::vec![1, 10], 10),
            Err(Error::Vocabulary { id: 10, vocab_size: 10 })
        ));
        assert!(TokenSequence::new(alloc::vec![], 10).is_err());
    }

    #[test]
    fn full_width_shapes() {
        let (enc, store) = build(EncoderConfig::full(12), 2);
        let mut g = Graph::new(&store);
        let toks = TokenSequence::new((0..7).collect(), 12).unwrap();
        let emb = enc.embed_tokens(&mut g, &toks).unwrap();
        assert_eq!(g.shape(emb), &[7, 256]);
        let h = enc.encode(&mut g, &toks).unwrap();
        assert_eq!(g.shape(h.matrix), &[7, 256]);
        assert_eq!(h.block_outputs.len(), 4);
        for &b in &h.block_outputs {
            assert_eq!(g.shape(b), &[7, 256]);
        }
    }

    #[test]
    fn processor_accepts_long_sequences() {
        let (enc, store) = build(small(FusionMode::DenseFuse, 2), 3);
        let mut g = Graph::new(&store);
        let toks = TokenSequence::new((0..2048).map(|i| i % 10).collect(), 10).unwrap();
        let emb = enc.embed_tokens(&mut g, &toks).unwrap();
        let p = enc.conv_processor(&mut g, emb).unwrap();
        assert_eq!(g.shape(p), &[2048, 8]);
    }

    #[test]
    fn eval_encoding_is_bitwise_repeatable() {
        let (enc, store) = build(small(FusionMode::DenseFuse, 4), 4);
        let toks = TokenSequence::new(alloc::vec![1, 5, 2, 9], 10).unwrap();
        let a = encode_eval(&enc, &store, &toks).unwrap();
        let b = encode_eval(&enc, &store, &toks).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn zero_block_collapses_to_double_norm() {
        let (enc, mut store) = build(small(FusionMode::Sequential, 1), 5);
        zero_prefix(&mut store, "enc.block0", true);
        // distinct gammas/betas so the two norms are distinguishable
        let blk = &enc.blocks[0];
        for (i, id) in [blk.ln_attn.gamma, blk.ln_attn.beta, blk.ln_ffn.gamma, blk.ln_ffn.beta]
            .into_iter()
            .enumerate()
        {
            for (j, x) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                *x = 0.5 + 0.1 * i as f64 + 0.01 * j as f64;
            }
        }
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(&[3, 8], (0..24).map(|i| libm::sin(i as f64)).collect()).unwrap());
        let y = blk.forward(&mut g, x).unwrap();
        let ln1 = blk.ln_attn.forward(&mut g, x).unwrap();
        let ln2 = blk.ln_ffn.forward(&mut g, ln1).unwrap();
        assert!(g.tensor(y).bitwise_eq(&g.tensor(ln2)));
    }

    #[test]
    fn coarse_only_single_zero_block() {
        let (enc, mut store) = build(small(FusionMode::CoarseOnly, 1), 6);
        zero_prefix(&mut store, "enc.block0", true);
        let toks = TokenSequence::new(alloc::vec![4, 4, 7], 10).unwrap();
        let mut g = Graph::new(&store);
        let h = enc.encode(&mut g, &toks).unwrap();
        let blk = &enc.blocks[0];
        let ln1 = blk.ln_attn.forward(&mut g, h.processor_output).unwrap();
        let ln2 = blk.ln_ffn.forward(&mut g, ln1).unwrap();
        let expect = g.add(h.processor_output, ln2).unwrap();
        assert!(g.tensor(h.matrix).bitwise_eq(&g.tensor(expect)));
    }

    #[test]
    fn fusion_rows_are_distributions() {
        let (enc, store) = build(small(FusionMode::DenseFuse, 4), 7);
        let toks = TokenSequence::new(alloc::vec![1, 2, 3, 4, 5], 10).unwrap();
        let mut g = Graph::new(&store);
        let h = enc.encode(&mut g, &toks).unwrap();
        assert_eq!(h.fusion_weights.len(), 4);
        for &w in &h.fusion_weights {
            for row in g.value(w).chunks(5) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn zero_output_projection_returns_coarse() {
        let (enc, mut store) = build(small(FusionMode::DenseFuse, 2), 8);
        zero_prefix(&mut store, "enc.fusion.out", false);
        let toks = TokenSequence::new(alloc::vec![0, 9, 3], 10).unwrap();
        let mut g = Graph::new(&store);
        let h = enc.encode(&mut g, &toks).unwrap();
        assert!(g.tensor(h.matrix).bitwise_eq(&g.tensor(h.coarse)));
    }

    #[test]
    fn constant_block_gives_constant_head_output() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(9, StreamKind::ParamInit);
        let fusion = FineFusion::new(&mut ParamBuilder::new(&mut store, &mut rng), "f", 8, 2).unwrap();
        let mut g = Graph::new(&store);
        let coarse = g.input(Tensor::new(&[4, 8], (0..32).map(|i| libm::cos(i as f64 * 0.3)).collect()).unwrap());
        let row: Vec<f64> = (0..8).map(|j| 0.1 * j as f64 - 0.3).collect();
        let block = g.input(Tensor::from_rows(&alloc::vec![row.clone(); 4]).unwrap());
        let head = &fusion.heads[0];
        let q = head.q.forward(&mut g, coarse).unwrap();
        let k = head.k.forward(&mut g, block).unwrap();
        let v = head.v.forward(&mut g, block).unwrap();
        let (a, _) = attend_head(&mut g, q, k, v, 0.5).unwrap();
        let vrow = g.value(v)[0..4].to_vec();
        for r in g.value(a).chunks(4) {
            for (x, y) in r.iter().zip(&vrow) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_head_count_must_match_blocks() {
        let mut cfg = small(FusionMode::DenseFuse, 3);
        cfg.n_heads_fusion = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(9, StreamKind::ParamInit);
        let fusion = FineFusion::new(&mut ParamBuilder::new(&mut store, &mut rng), "f", 8, 2).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[2, 8]));
        assert!(matches!(fusion.forward(&mut g, x, &[x, x, x]), Err(Error::Config(_))));
    }

    #[test]
    fn sequential_mode_has_no_fusion_parameters() {
        let (_, dense) = build(small(FusionMode::DenseFuse, 4), 1);
        let (_, seq) = build(small(FusionMode::Sequential, 4), 1);
        assert!(seq.ids_with_prefix("enc.fusion").next().is_none());
        let fusion_params: usize = dense
            .ids_with_prefix("enc.fusion")
            .map(|id| dense.get(id).numel())
            .sum();
        // 4 heads × (q, k, v of 8×2) + output 8×8
        assert_eq!(fusion_params, 4 * 3 * 16 + 64);
        assert_eq!(dense.num_elements() - seq.num_elements(), fusion_params);
    }

    /// With position-independent attention and centre-only convolution taps,
    /// changing one token changes only that token's output row.
    #[test]
    fn rigged_weights_make_positions_independent() {
        let (enc, mut store) = build(small(FusionMode::DenseFuse, 2), 10);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_owned();
            let t = store.get_mut(id);
            if name.ends_with("attn.v.w") || name.ends_with(".v.w") {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            } else if name.ends_with("conv.w") || name.ends_with("ffn_in.w") || name.ends_with("ffn_out.w") {
                let shape = t.shape().to_vec();
                let per_tap = shape[1] * shape[2];
                let centre = shape[0] / 2;
                for (i, x) in t.data_mut().iter_mut().enumerate() {
                    if i / per_tap != centre {
                        *x = 0.0;
                    }
                }
            }
        }
        let a = TokenSequence::new(alloc::vec![1, 2, 3, 4], 10).unwrap();
        let b = TokenSequence::new(alloc::vec![1, 2, 7, 4], 10).unwrap();
        let ha = encode_eval(&enc, &store, &a).unwrap();
        let hb = encode_eval(&enc, &store, &b).unwrap();
        for r in 0..4 {
            let same = ha.row(r) == hb.row(r);
            assert_eq!(same, r != 2, "row {r}");
        }
    }

    #[test]
    fn block_input_gradient_matches_differences() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(12, StreamKind::ParamInit);
        let cfg = small(FusionMode::DenseFuse, 1);
        let blk = TransformerBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), "b", &cfg).unwrap();
        let x = Tensor::new(&[3, 8], (0..24).map(|i| libm::sin(1.3 * i as f64)).collect()).unwrap();
        let e = check_input(&store, &x, DEFAULT_STEP, |g, xv| {
            let y = blk.forward(g, xv)?;
            let mut pr = RngStream::new(1, StreamKind::Check);
            probe_loss(g, y, &mut pr)
        })
        .unwrap();
        assert!(e.max_rel_err <= 1e-4, "{e:?}");
    }

    #[test]
    fn gradients_reach_embedding_table() {
        let (enc, store) = build(small(FusionMode::DenseFuse, 2), 13);
        let toks = TokenSequence::new(alloc::vec![1, 2, 3], 10).unwrap();
        let mut g = Graph::new(&store);
        let h = enc.encode(&mut g, &toks).unwrap();
        let mut pr = RngStream::new(2, StreamKind::Check);
        let l = probe_loss(&mut g, h.matrix, &mut pr).unwrap();
        let grads = g.backward(l).unwrap();
        let ge = grads.param(enc.embedding).unwrap();
        assert!(ge.iter().any(|&x| x != 0.0));
    }
}
