//! Two-stage training: audio pretraining, then visual self-learning with
//! mixed-stream regularization. Also evaluation and the ablation sweep.

mod ablation;
mod config;
mod eval;
mod run;
mod trainer;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use ablation::{median, run_ablation, AblationResult, AblationRow, ConfigSummary, ABLATION_CONFIGS};
pub use config::{decode_limit, TrainConfig};
pub use eval::{evaluate, EvalModality, EvalOptions};
pub use run::{
    pretrain_audio, read_metrics, selflearn, Observer, RunManifest, RunOutcome, MANIFEST_FILE, METRICS_FILE, SCHEDULER_IDLE,
    SNAPSHOT_FILE,
};
pub use trainer::Trainer;

use crate::autodiff::AutodiffError;
use crate::corpus::CorpusError;
use crate::losses::LossError;
use crate::metrics::MetricError;
use crate::mixup::MixError;
use crate::model::{CheckpointError, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite loss at step {step} ({stage:?})")]
    NonFinite {
        step: u64,
        stage: Stage,
        /// The diagnostic record for the failed step.
        record: Box<MetricsRecord>,
    },
    #[error("mixing ratio {phi} left [{min}, {max}] at step {step}")]
    PhiOutOfBounds { step: u64, phi: f64, min: f64, max: f64 },
    #[error("checkpoint metadata: {0}")]
    Meta(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Training ran and broke an invariant, as opposed to bad inputs.
    pub fn is_runtime_abort(&self) -> bool {
        matches!(self, TrainError::NonFinite { .. } | TrainError::PhiOutOfBounds { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Selflearn,
}

/// One line of `metrics.jsonl`. Losses are per-utterance means over the
/// batch and are measured before that step's update.
///
/// JSON has no NaN, so a non-finite loss is written as `null` and read back
/// as NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub ce_uni: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce_mix: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jsd: Option<f64>,
    #[serde(deserialize_with = "null_as_nan")]
    pub total: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub u_uni: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_mix: Option<f64>,
    /// Scheduler state after this step's update.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub streak: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_wer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_bleu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}
