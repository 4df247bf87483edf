//! TOML run configuration. The same text is embedded in checkpoints.

use std::path::Path;

use nartts_core::attention::GmmConfig;
use nartts_core::corpus::CorpusSpec;
use nartts_core::extractor::ExtractorConfig;
use nartts_core::model::ModelConfig;
use nartts_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which network a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    Model,
    Extractor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<NetworkKind>,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub extractor: ExtractorConfig,
    pub train: TrainConfig,
    pub extractor_train: TrainConfig,
}

/// Desk-scale extractor: the desk encoder and postnet, 128-unit LSTMs.
pub fn desk_extractor(vocab_size: usize) -> ExtractorConfig {
    let model = ModelConfig::desk(vocab_size);
    ExtractorConfig {
        encoder: model.encoder,
        feat_dim: model.postnet.feat_dim,
        prenet_dim: 128,
        prenet_dropout: 0.5,
        lstm_dim: 64,
        attention: GmmConfig {
            mixtures: 1,
            ..GmmConfig::default()
        },
        postnet: model.postnet,
    }
}

impl Default for RunConfig {
    /// Desk-scale presets with the desk learning rate and batch size.
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        let desk = |t: TrainConfig| TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            max_steps: 2000,
            ..t
        };
        Self {
            kind: None,
            model: ModelConfig::desk(corpus.vocab_size),
            extractor: desk_extractor(corpus.vocab_size),
            train: desk(TrainConfig::main(corpus.seed)),
            extractor_train: TrainConfig {
                max_steps: 8000,
                ..desk(TrainConfig::extractor(corpus.seed))
            },
            corpus,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialise to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.extractor.validate()?;
        self.train.validate()?;
        self.extractor_train.validate()?;
        Ok(())
    }
}
