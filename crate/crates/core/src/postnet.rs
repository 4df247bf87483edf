//! CBHG post-processing network: convolution bank, max pooling, projection
//! convolutions, highway stack and a bidirectional GRU, applied as a
//! residual correction to the decoder output.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BiGru, Conv1d, Highway, Linear};
use crate::params::ParamBuilder;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PostnetConfig {
    pub feat_dim: usize,
    pub bank_size: usize,
    pub bank_channels: usize,
    pub proj_dim: usize,
    pub highway_layers: usize,
    pub highway_dim: usize,
    pub rnn_dim: usize,
}

impl Default for PostnetConfig {
    fn default() -> Self {
        Self {
            feat_dim: 20,
            bank_size: 8,
            bank_channels: 128,
            proj_dim: 256,
            highway_layers: 4,
            highway_dim: 128,
            rnn_dim: 128,
        }
    }
}

impl PostnetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feat_dim,
            self.bank_size,
            self.bank_channels,
            self.proj_dim,
            self.highway_dim,
            self.rnn_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("postnet extents must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Cbhg {
    pub config: PostnetConfig,
    pub bank: Vec<Conv1d>,
    pub proj1: Conv1d,
    pub proj2: Conv1d,
    pub pre_highway: Linear,
    pub highways: Vec<Highway>,
    pub rnn: BiGru,
    pub out: Linear,
}

impl Cbhg {
    /// The output layer starts at zero, so a fresh postnet is the identity.
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, config: PostnetConfig) -> Result<Self> {
        config.validate()?;
        let mut s = pb.scope(name);
        let f = config.feat_dim;
        let c = config.bank_channels;
        let mut bank = Vec::with_capacity(config.bank_size);
        for k in 1..=config.bank_size {
            bank.push(Conv1d::padded(&mut s, &format!("bank{k}"), k, f, c, k / 2)?);
        }
        let proj1 = Conv1d::same(&mut s, "proj1", 3, config.bank_size * c, config.proj_dim)?;
        let proj2 = Conv1d::same(&mut s, "proj2", 3, config.proj_dim, f)?;
        let pre_highway = Linear::no_bias(&mut s, "pre_highway", f, config.highway_dim)?;
        let mut highways = Vec::with_capacity(config.highway_layers);
        for i in 0..config.highway_layers {
            highways.push(Highway::new(&mut s, &format!("highway{i}"), config.highway_dim)?);
        }
        let rnn = BiGru::new(&mut s, "rnn", config.highway_dim, config.rnn_dim)?;
        let mut os = s.scope("out");
        let out = Linear {
            w: os.constant("w", &[2 * config.rnn_dim, f], 0.0)?,
            b: Some(os.constant("b", &[f], 0.0)?),
            in_dim: 2 * config.rnn_dim,
            out_dim: f,
        };
        Ok(Self {
            config,
            bank,
            proj1,
            proj2,
            pre_highway,
            highways,
            rnn,
            out,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, before: Var) -> Result<Var> {
        let mut banks = Vec::with_capacity(self.bank.len());
        for conv in &self.bank {
            let y = conv.forward(g, before)?;
            banks.push(g.relu(y));
        }
        let stacked = g.concat_cols(&banks)?;
        let pooled = g.max_pool_prev(stacked);
        let p = self.proj1.forward(g, pooled)?;
        let p = g.relu(p);
        let p = self.proj2.forward(g, p)?;
        let res = g.add(p, before)?;
        let mut x = self.pre_highway.forward(g, res)?;
        for hw in &self.highways {
            x = hw.forward(g, x)?;
        }
        let r = self.rnn.forward(g, x)?;
        let correction = self.out.forward(g, r)?;
        g.add(before, correction)
    }
}
