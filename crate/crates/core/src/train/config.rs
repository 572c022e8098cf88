use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::AdamConfig;
use crate::corpus::CorpusSpec;
use crate::losses::LossWeights;
use crate::mixup::{MixConfig, Modality};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub corpus_dir: PathBuf,
    pub model: ModelConfig,
    pub loss_weights: LossWeights,
    pub mix: MixConfig,
    pub optimizer: AdamConfig,
    pub stage1_steps: u64,
    pub stage1_warmup_fraction: f64,
    pub stage2_steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    /// Validation utterances decoded at each periodic evaluation; all when unset.
    pub eval_limit: Option<usize>,
    pub seed: u64,
    pub stage2_modality: Modality,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            corpus_dir: PathBuf::from("corpus"),
            model: ModelConfig::default(),
            loss_weights: LossWeights::default(),
            mix: MixConfig::default(),
            optimizer: AdamConfig::default(),
            stage1_steps: 4000,
            stage1_warmup_fraction: 0.1,
            stage2_steps: 2000,
            batch_size: 16,
            eval_every: 250,
            eval_limit: None,
            seed: 1,
            stage2_modality: Modality::Visual,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let config: Self = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.stage1_warmup_fraction) {
            return bad(format!("stage1_warmup_fraction {} outside [0, 1]", self.stage1_warmup_fraction));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad(format!("optimizer.lr must be positive, got {}", self.optimizer.lr));
        }
        self.loss_weights.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.mix.validate().map_err(|e| TrainError::Config(format!("mix: {e}")))?;
        self.model.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    /// The model must read the corpus' feature width and emit its vocabulary.
    pub fn check_corpus(&self, spec: &CorpusSpec) -> Result<(), TrainError> {
        if self.model.feature_dim != spec.feature_dim || self.model.tgt_vocab != spec.tgt_vocab {
            return Err(TrainError::Config(format!(
                "model expects feature_dim {} / tgt_vocab {}, corpus has {} / {}",
                self.model.feature_dim, self.model.tgt_vocab, spec.feature_dim, spec.tgt_vocab
            )));
        }
        if self.model.max_positions < spec.max_frames() + 1 {
            return Err(TrainError::Config(format!(
                "max_positions {} shorter than the longest utterance ({} frames)",
                self.model.max_positions,
                spec.max_frames()
            )));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.stage1_steps as f64 * self.stage1_warmup_fraction).round() as u64
    }
}

/// Longest hypothesis greedy decoding may emit for a corpus.
pub fn decode_limit(spec: &CorpusSpec) -> usize {
    spec.max_len + 4
}
