use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{MetricsRecord, Stage, TrainConfig, TrainError};
use crate::autodiff::{warmup_lr, Adam, Graph};
use crate::corpus::Utterance;
use crate::losses::{cross_entropy, jsd_loss, total_loss, LossWeights};
use crate::mixup::{
    concat_unimodal, mix_streams, scheduler_update, uncertainty, MixState, Modality, UncertaintyReading,
};
use crate::model::{Checkpoint, FrameBatch, Model, TargetBatch};
use crate::seed::{derive_seed, rng_for};

fn all_finite(t: &crate::autodiff::Tensor) -> bool {
    t.data().iter().all(|v| v.is_finite())
}

/// What a checkpoint's `meta` field holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainMeta {
    stage: Stage,
    step: u64,
    mix: MixState,
}

/// Owns the parameters, optimizer and scheduler of one stage and advances
/// them one batch at a time. Every random draw is keyed by the step index,
/// so a trainer rebuilt from a checkpoint continues exactly.
pub struct Trainer<'a> {
    config: TrainConfig,
    stage: Stage,
    data: &'a [Utterance],
    model: Model,
    adam: Adam,
    mix: MixState,
    step: u64,
    order: Option<(u64, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    /// Fresh parameters from the `init` stream of the seed.
    pub fn pretrain(config: &TrainConfig, data: &'a [Utterance]) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::new(config.model, config.seed)?;
        Ok(Self::assemble(config, Stage::Pretrain, data, model))
    }

    /// Starts self-learning from pretrained parameters with a fresh optimizer.
    pub fn selflearn(config: &TrainConfig, data: &'a [Utterance], init: Model) -> Result<Self, TrainError> {
        config.validate()?;
        if *init.config() != config.model {
            return Err(TrainError::Config(
                "initial checkpoint was trained with a different model config".into(),
            ));
        }
        Ok(Self::assemble(config, Stage::Selflearn, data, init))
    }

    fn assemble(config: &TrainConfig, stage: Stage, data: &'a [Utterance], model: Model) -> Self {
        let adam = Adam::new(config.optimizer, model.params());
        Self {
            config: config.clone(),
            stage,
            data,
            model,
            adam,
            mix: MixState::new(config.mix),
            step: 0,
            order: None,
        }
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(config: &TrainConfig, data: &'a [Utterance], checkpoint: Checkpoint) -> Result<Self, TrainError> {
        config.validate()?;
        let meta: TrainMeta =
            serde_json::from_value(checkpoint.meta).map_err(|e| TrainError::Meta(e.to_string()))?;
        let adam = checkpoint
            .optimizer
            .ok_or_else(|| TrainError::Meta("checkpoint has no optimizer state".into()))?;
        Ok(Self {
            config: config.clone(),
            stage: meta.stage,
            data,
            model: checkpoint.model,
            adam,
            mix: meta.mix,
            step: meta.step,
            order: None,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), TrainError> {
        let meta = TrainMeta {
            stage: self.stage,
            step: self.step,
            mix: self.mix,
        };
        let meta = serde_json::to_value(meta).expect("meta serializes");
        crate::model::save_checkpoint(path, &self.model, Some(&self.adam), &meta)?;
        Ok(())
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Number of updates applied so far.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn mix_state(&self) -> MixState {
        self.mix
    }

    fn uni_modality(&self) -> Modality {
        match self.stage {
            Stage::Pretrain => Modality::Audio,
            Stage::Selflearn => self.config.stage2_modality,
        }
    }

    fn lr(&self) -> f64 {
        match self.stage {
            Stage::Pretrain => warmup_lr(self.config.optimizer.lr, self.step, self.config.warmup_steps()),
            Stage::Selflearn => self.config.optimizer.lr,
        }
    }

    /// Utterance indices of the batch for `step`: consecutive slices of a
    /// per-epoch shuffle.
    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.data.len() as u64;
        let b = self.config.batch_size as u64;
        let tag = match self.stage {
            Stage::Pretrain => "data/pretrain",
            Stage::Selflearn => "data/selflearn",
        };
        let mut out = Vec::with_capacity(b as usize);
        for j in 0..b {
            let global = step * b + j;
            let epoch = global / n;
            if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..self.data.len()).collect();
                perm.shuffle(&mut rng_for(self.config.seed, tag, epoch));
                self.order = Some((epoch, perm));
            }
            let perm = &self.order.as_ref().expect("just set").1;
            out.push(perm[(global % n) as usize]);
        }
        out
    }

    /// Error for a step whose forward pass produced non-finite values.
    fn abort(&self, step: u64, lr: f64, diagnostic: &str) -> TrainError {
        TrainError::NonFinite {
            step,
            stage: self.stage,
            record: Box::new(MetricsRecord {
                step,
                stage: self.stage,
                lr,
                ce_uni: f64::NAN,
                ce_mix: None,
                jsd: None,
                total: f64::NAN,
                u_uni: f64::NAN,
                u_mix: None,
                phi: None,
                streak: None,
                eval_wer: None,
                eval_bleu: None,
                diagnostic: Some(diagnostic.to_string()),
            }),
        }
    }

    /// One optimization step. Returns the record for the step just taken.
    pub fn step(&mut self) -> Result<MetricsRecord, TrainError> {
        if self.data.is_empty() {
            return Err(TrainError::Config("training split is empty".into()));
        }
        let step = self.step;
        let lr = self.lr();
        let batch = self.batch_indices(step);
        let utts: Vec<&Utterance> = batch.iter().map(|&i| &self.data[i]).collect();
        let inv_b = 1.0 / utts.len() as f64;
        let modality = self.uni_modality();

        let targets = TargetBatch::from_sequences(utts.iter().map(|u| u.tgt_tokens.as_slice()))?;
        let uni_inputs = utts
            .iter()
            .map(|u| {
                let stream = match modality {
                    Modality::Audio => &u.audio,
                    Modality::Visual => &u.visual,
                };
                concat_unimodal(stream, modality)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let uni_frames = FrameBatch::stack(&uni_inputs)?;

        let mut g = Graph::new();
        let p_uni = self.model.forward(&mut g, &uni_frames, &targets)?;
        if !all_finite(g.value(p_uni.var)) {
            return Err(self.abort(step, lr, "non-finite probabilities in the uni-modal branch"));
        }
        let ce = cross_entropy(&mut g, p_uni.var, &targets.targets)?;
        let ce_uni = g.scale(ce, inv_b);

        let weights = match self.stage {
            Stage::Pretrain => LossWeights::new(0.0, 0.0)?,
            Stage::Selflearn => self.config.loss_weights,
        };
        let mixing = !weights.uni_only();
        let (mut ce_mix, mut jsd, mut p_mix) = (None, None, None);
        if mixing {
            let step_seed = derive_seed(self.config.seed, "mix", step);
            let mixed = utts
                .iter()
                .enumerate()
                .map(|(j, u)| {
                    let seed = derive_seed(step_seed, "utterance", j as u64);
                    mix_streams(&u.audio, &u.visual, self.mix.phi, seed, self.mix.config.orientation).map(|m| m.0)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mixed = FrameBatch::stack(&mixed)?;
            let pm = self.model.forward(&mut g, &mixed, &targets)?;
            if !all_finite(g.value(pm.var)) {
                return Err(self.abort(step, lr, "non-finite probabilities in the mixed branch"));
            }
            let ce = cross_entropy(&mut g, pm.var, &targets.targets)?;
            ce_mix = Some(g.scale(ce, inv_b));
            let j = jsd_loss(&mut g, pm.var, p_uni.var)?;
            jsd = Some(g.scale(j, inv_b));
            p_mix = Some(pm.var);
        }
        let total = total_loss(&mut g, ce_uni, ce_mix, jsd, &weights)?;

        let value = |v: Option<_>| v.map(|v| g.value(v).item());
        let mut record = MetricsRecord {
            step,
            stage: self.stage,
            lr,
            ce_uni: g.value(ce_uni).item(),
            ce_mix: value(ce_mix),
            jsd: value(jsd),
            total: g.value(total).item(),
            u_uni: uncertainty(g.value(p_uni.var))?,
            u_mix: p_mix.map(|v| uncertainty(g.value(v))).transpose()?,
            phi: None,
            streak: None,
            eval_wer: None,
            eval_bleu: None,
            diagnostic: None,
        };
        if !record.total.is_finite() {
            record.diagnostic = Some(format!("non-finite loss {}", record.total));
            return Err(TrainError::NonFinite {
                step,
                stage: self.stage,
                record: Box::new(record),
            });
        }

        g.backward(total)?;
        let store = self.model.params_mut();
        store.zero_grads();
        g.accumulate_param_grads(store);
        self.adam.step(store, lr)?;

        if self.stage == Stage::Selflearn {
            if let Some(u_mix) = record.u_mix {
                let reading = UncertaintyReading::new(record.u_uni, u_mix)?;
                self.mix = scheduler_update(reading, self.mix);
                if !self.mix.in_bounds() {
                    return Err(TrainError::PhiOutOfBounds {
                        step,
                        phi: self.mix.phi,
                        min: self.mix.config.phi_min,
                        max: self.mix.config.phi_max,
                    });
                }
            }
            record.phi = Some(self.mix.phi);
            record.streak = Some(self.mix.streak);
        }
        self.step += 1;
        Ok(record)
    }
}
