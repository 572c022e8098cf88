use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::corpus::{add_noise, Snr, Utterance, BOS, EOS};
use crate::metrics::Report;
use crate::mixup::{concat_unimodal, mix_streams, Modality, PhiOrientation};
use crate::model::Model;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "phi")]
pub enum EvalModality {
    Audio,
    Visual,
    Mixed(f64),
}

impl EvalModality {
    fn uses_audio(self) -> bool {
        !matches!(self, EvalModality::Visual)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub modality: EvalModality,
    pub snr: Snr,
    /// Keys the noise and mixing draws.
    pub seed: u64,
    pub max_len: usize,
    pub orientation: PhiOrientation,
}

impl EvalOptions {
    pub fn new(modality: EvalModality, max_len: usize) -> Self {
        Self {
            modality,
            snr: Snr::Clean,
            seed: 0,
            max_len,
            orientation: PhiOrientation::Audio,
        }
    }
}

fn strip_markers(tokens: &[usize]) -> Vec<usize> {
    let start = usize::from(tokens.first() == Some(&BOS));
    let end = if tokens.last() == Some(&EOS) { tokens.len() - 1 } else { tokens.len() };
    tokens[start..end.max(start)].to_vec()
}

/// Greedy-decodes every utterance under the requested input condition and
/// scores the hypotheses. Noise touches only the audio stream.
pub fn evaluate(model: &Model, utterances: &[Utterance], opts: &EvalOptions) -> Result<Report, TrainError> {
    let rows = utterances
        .par_iter()
        .enumerate()
        .map(|(i, u)| -> Result<_, TrainError> {
            let audio = if opts.modality.uses_audio() {
                add_noise(&u.audio, opts.snr, derive_seed(opts.seed, "noise", i as u64))?
            } else {
                u.audio.clone()
            };
            let input = match opts.modality {
                EvalModality::Audio => concat_unimodal(&audio, Modality::Audio)?,
                EvalModality::Visual => concat_unimodal(&u.visual, Modality::Visual)?,
                EvalModality::Mixed(phi) => {
                    let seed = derive_seed(opts.seed, "eval-mix", i as u64);
                    mix_streams(&audio, &u.visual, phi, seed, opts.orientation)?.0
                }
            };
            let encoded = model.encode_utterance(&input)?;
            let hyp = model.greedy_decode(&encoded, opts.max_len)?;
            Ok((u.id.clone(), strip_markers(&u.tgt_tokens), hyp))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let snr = if opts.modality.uses_audio() { opts.snr } else { Snr::Clean };
    let echo = serde_json::json!({
        "modality": opts.modality,
        "snr": snr.label(),
        "seed": opts.seed,
        "max_len": opts.max_len,
        "orientation": opts.orientation,
    });
    Ok(Report::build(rows, echo)?)
}
