use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{KonError, Result};
use crate::kgdata::{synthetic, DatasetFiles, KnowledgeGraph, QueryTemplates, SyntheticConfig};
use crate::konhead::{AggWeights, Aggregation, KonConfig};
use crate::objectives::{LossWeights, SftMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    Files(DatasetFiles),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticConfig::default())
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<KnowledgeGraph> {
        match self {
            DatasetConfig::Synthetic(c) => synthetic::generate(c),
            DatasetConfig::Files(f) => KnowledgeGraph::load(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { vocab_size: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub sft_mode: SftMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            sft_mode: SftMode::Literal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Queries per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub accumulation: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 12,
            accumulation: 8,
            epochs: 50,
            max_steps: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub dtype: Dtype,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        CheckpointConfig { dtype: Dtype::F64 }
    }
}

/// Complete description of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Negative entities per query.
    pub negatives: usize,
    pub dataset: DatasetConfig,
    pub tokenizer: TokenizerConfig,
    pub templates: QueryTemplates,
    pub backbone: BackboneConfig,
    pub kon: KonConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub checkpoint: CheckpointConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            negatives: 128,
            dataset: DatasetConfig::default(),
            tokenizer: TokenizerConfig::default(),
            templates: QueryTemplates::default(),
            backbone: BackboneConfig::default(),
            kon: KonConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            checkpoint: CheckpointConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small model on the 50-entity synthetic graph; trains in about a minute
    /// on one core. Uses unweighted product aggregation: with a weighted sum the
    /// contrastive loss drives shared name tokens to zero probability on a
    /// graph this small.
    pub fn synthetic_small() -> Self {
        RunConfig {
            seed: 7,
            negatives: 32,
            dataset: DatasetConfig::Synthetic(SyntheticConfig::default()),
            tokenizer: TokenizerConfig { vocab_size: 96 },
            templates: QueryTemplates::default(),
            backbone: BackboneConfig {
                d: 32,
                layers: 2,
                heads: 2,
                d_ff: 64,
                max_seq: 32,
                frozen: false,
                lora_rank: 4,
            },
            kon: KonConfig {
                k: 4,
                rank: 4,
                aggregation: Aggregation::Product,
                weights: AggWeights::Constant,
                ..KonConfig::default()
            },
            loss: LossConfig::default(),
            optim: OptimConfig {
                lr: 3e-3,
                weight_decay: 0.0,
                batch_size: 8,
                accumulation: 2,
                epochs: 200,
                ..OptimConfig::default()
            },
            checkpoint: CheckpointConfig::default(),
        }
    }

    /// The small model on a synthetic graph of more than 1024 entities, capped
    /// at a fixed number of optimizer steps; sized for negative-count sweeps.
    pub fn synthetic_large() -> Self {
        let mut cfg = Self::synthetic_small();
        cfg.dataset = DatasetConfig::Synthetic(SyntheticConfig::with_at_least(1100, 17));
        cfg.tokenizer.vocab_size = 160;
        cfg.optim.epochs = 1;
        cfg.optim.max_steps = Some(40);
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| KonError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KonError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            KonError::Config(msg) => KonError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| KonError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.kon.validate(self.backbone.d)?;
        self.templates.validate()?;
        let o = &self.optim;
        if o.batch_size == 0 || o.accumulation == 0 || o.epochs == 0 {
            return Err(KonError::Config(
                "batch_size, accumulation and epochs must be positive".into(),
            ));
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(KonError::Config(format!("learning rate {} is not positive", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(KonError::Config("invalid adaptive-moment settings".into()));
        }
        if o.weight_decay < 0.0 {
            return Err(KonError::Config("weight decay must be non-negative".into()));
        }
        if self.negatives == 0 {
            return Err(KonError::Config("negatives must be at least 1".into()));
        }
        let w = &self.loss.weights;
        if [w.nce, w.sft, w.tdt].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(KonError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}
