//! Modality-missing concatenation, frame-level stream mixing, prediction
//! uncertainty and the curriculum scheduler for the mixing ratio.
//!
//! A fused frame has width `2D`: audio occupies the first `D` slots and
//! visual the last `D`; the absent modality is zero-filled.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::FeatureMatrix;
use crate::seed::rng_for;

/// Row sums of a probability matrix must be within this of 1.
pub const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MixError {
    #[error("streams out of sync: audio {audio:?}, visual {visual:?}")]
    ShapeMismatch { audio: (usize, usize), visual: (usize, usize) },
    #[error("empty stream")]
    Empty,
    #[error("mixing ratio {0} outside [0, 1]")]
    Ratio(f64),
    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },
    #[error("uncertainty reading must be finite and non-negative, got {0}")]
    BadReading(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
}

/// Which stream a uniform draw `p < phi` selects.
///
/// `Audio` reads `phi` as the audio proportion, which is what makes the
/// multiplicative growth rule raise the audio share over training. `Visual`
/// is the literal reading of the frame-selection rule and is kept for
/// comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiOrientation {
    #[default]
    Audio,
    Visual,
}

fn fused_row(out: &mut Vec<f64>, frame: &[f32], modality: Modality) {
    let d = frame.len();
    if modality == Modality::Visual {
        out.extend(std::iter::repeat_n(0.0, d));
    }
    out.extend(frame.iter().map(|&v| v as f64));
    if modality == Modality::Audio {
        out.extend(std::iter::repeat_n(0.0, d));
    }
}

/// Embeds a single stream into the fused `T x 2D` layout.
pub fn concat_unimodal(stream: &FeatureMatrix, modality: Modality) -> Result<Tensor, MixError> {
    if stream.is_empty() {
        return Err(MixError::Empty);
    }
    let mut out = Vec::with_capacity(stream.rows() * stream.cols() * 2);
    for t in 0..stream.rows() {
        fused_row(&mut out, stream.row(t), modality);
    }
    Ok(Tensor::matrix(stream.rows(), 2 * stream.cols(), out))
}

/// Per frame, draws `p ~ U[0,1)` and keeps that frame from one stream
/// according to `phi` and `orientation`. Returns the fused matrix and which
/// frames came from audio.
pub fn mix_streams(
    audio: &FeatureMatrix,
    visual: &FeatureMatrix,
    phi: f64,
    seed: u64,
    orientation: PhiOrientation,
) -> Result<(Tensor, Vec<bool>), MixError> {
    if audio.rows() != visual.rows() || audio.cols() != visual.cols() {
        return Err(MixError::ShapeMismatch {
            audio: (audio.rows(), audio.cols()),
            visual: (visual.rows(), visual.cols()),
        });
    }
    if audio.is_empty() {
        return Err(MixError::Empty);
    }
    if !(0.0..=1.0).contains(&phi) {
        return Err(MixError::Ratio(phi));
    }
    let mut rng = rng_for(seed, "mix", 0);
    let mut out = Vec::with_capacity(audio.rows() * audio.cols() * 2);
    let mut mask = Vec::with_capacity(audio.rows());
    for t in 0..audio.rows() {
        let p: f64 = rng.random();
        let below = p < phi;
        let take_audio = match orientation {
            PhiOrientation::Audio => below,
            PhiOrientation::Visual => !below,
        };
        if take_audio {
            fused_row(&mut out, audio.row(t), Modality::Audio);
        } else {
            fused_row(&mut out, visual.row(t), Modality::Visual);
        }
        mask.push(take_audio);
    }
    Ok((Tensor::matrix(audio.rows(), 2 * audio.cols(), out), mask))
}

pub fn check_stochastic(probs: &Tensor) -> Result<(), MixError> {
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(MixError::NotStochastic { row: r, sum });
        }
    }
    Ok(())
}

/// Mean Shannon entropy (nats) of the rows of an `S x V` distribution matrix.
pub fn uncertainty(probs: &Tensor) -> Result<f64, MixError> {
    check_stochastic(probs)?;
    let total: f64 = (0..probs.rows())
        .map(|r| {
            -probs
                .row(r)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .sum();
    Ok(total / probs.rows() as f64)
}

/// Curriculum hyperparameters and initial ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    pub phi_init: f64,
    pub alpha: f64,
    pub k: f64,
    pub n: u32,
    pub phi_min: f64,
    pub phi_max: f64,
    pub orientation: PhiOrientation,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            phi_init: 0.1,
            alpha: 1.2,
            k: 0.05,
            n: 20,
            phi_min: 0.1,
            phi_max: 0.9,
            orientation: PhiOrientation::Audio,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 1.0) {
            return Err(format!("alpha must exceed 1, got {}", self.alpha));
        }
        if !(0.0 <= self.phi_min && self.phi_min <= self.phi_max && self.phi_max <= 1.0) {
            return Err(format!("need 0 <= phi_min <= phi_max <= 1, got [{}, {}]", self.phi_min, self.phi_max));
        }
        if !(self.phi_min..=self.phi_max).contains(&self.phi_init) {
            return Err(format!("phi_init {} outside [{}, {}]", self.phi_init, self.phi_min, self.phi_max));
        }
        if self.n == 0 {
            return Err("n must be positive".into());
        }
        if !(self.k.is_finite() && self.k >= 0.0) {
            return Err(format!("k must be finite and non-negative, got {}", self.k));
        }
        Ok(())
    }
}

/// Scheduler state: the current ratio and the run of consecutive triggers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixState {
    pub phi: f64,
    pub streak: u32,
    pub config: MixConfig,
}

impl MixState {
    pub fn new(config: MixConfig) -> Self {
        Self {
            phi: config.phi_init,
            streak: 0,
            config,
        }
    }

    pub fn in_bounds(&self) -> bool {
        self.phi >= self.config.phi_min && self.phi <= self.config.phi_max && self.streak <= self.config.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReading {
    pub u_uni: f64,
    pub u_mix: f64,
}

impl UncertaintyReading {
    pub fn new(u_uni: f64, u_mix: f64) -> Result<Self, MixError> {
        for u in [u_uni, u_mix] {
            if !(u.is_finite() && u >= 0.0) {
                return Err(MixError::BadReading(u));
            }
        }
        Ok(Self { u_uni, u_mix })
    }

    /// Mixed speech is not sufficiently more confident than uni-modal speech.
    pub fn triggers(&self, k: f64) -> bool {
        self.u_uni - self.u_mix < k * self.u_uni
    }
}

/// One scheduler step. After `n` consecutive triggers the ratio grows by
/// `alpha`, clamped to `[phi_min, phi_max]`, and the streak restarts.
pub fn scheduler_update(reading: UncertaintyReading, state: MixState) -> MixState {
    let cfg = state.config;
    let mut next = state;
    if reading.triggers(cfg.k) {
        next.streak += 1;
    } else {
        next.streak = 0;
    }
    if next.streak >= cfg.n {
        next.phi = (cfg.alpha * next.phi).clamp(cfg.phi_min, cfg.phi_max);
        next.streak = 0;
    }
    next
}
