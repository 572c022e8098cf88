use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CorpusError, FeatureMatrix};
use crate::seed::rng_for;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
/// Number of reserved target ids (BOS, EOS, PAD).
pub const RESERVED_TOKENS: usize = 3;

/// Parameters of the synthetic paired-stream generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_phonemes: usize,
    pub n_visemes: usize,
    /// Total target vocabulary including the reserved ids.
    pub tgt_vocab: usize,
    pub frames_per_token: usize,
    pub feature_dim: usize,
    pub sigma_audio: f64,
    pub sigma_visual: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub master_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_phonemes: 40,
            n_visemes: 12,
            tgt_vocab: 60,
            frames_per_token: 3,
            feature_dim: 16,
            sigma_audio: 0.1,
            sigma_visual: 0.5,
            min_len: 4,
            max_len: 16,
            n_train: 2000,
            n_valid: 200,
            n_test: 200,
            master_seed: 1234,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |field: &'static str, message: String| Err(CorpusError::InvalidSpec { field, message });
        if self.n_visemes == 0 {
            return fail("n_visemes", "must be at least 1".into());
        }
        if self.n_visemes >= self.n_phonemes {
            return fail(
                "n_visemes",
                format!(
                    "invariant n_visemes < n_phonemes violated ({} >= {})",
                    self.n_visemes, self.n_phonemes
                ),
            );
        }
        if !(self.sigma_visual > self.sigma_audio || self.n_visemes < self.n_phonemes) {
            return fail(
                "sigma_visual",
                "invariant sigma_visual > sigma_audio or n_visemes < n_phonemes violated".into(),
            );
        }
        if self.feature_dim < 2 {
            return fail("feature_dim", format!("must be >= 2, got {}", self.feature_dim));
        }
        if self.frames_per_token < 1 {
            return fail("frames_per_token", "must be >= 1".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(
                "min_len",
                format!("length range [{}, {}] is empty", self.min_len, self.max_len),
            );
        }
        if self.tgt_vocab <= RESERVED_TOKENS {
            return fail("tgt_vocab", format!("must exceed {RESERVED_TOKENS} reserved ids"));
        }
        if !(self.sigma_audio >= 0.0 && self.sigma_visual >= 0.0) {
            return fail("sigma_audio", "noise scales must be non-negative".into());
        }
        Ok(())
    }

    /// Longest utterance in frames.
    pub fn max_frames(&self) -> usize {
        self.max_len * self.frames_per_token
    }
}

/// Surjection from phoneme ids onto viseme ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisemeMap {
    map: Vec<usize>,
    n_visemes: usize,
}

impl VisemeMap {
    pub fn viseme(&self, phoneme: usize) -> usize {
        self.map[phoneme]
    }

    pub fn n_visemes(&self) -> usize {
        self.n_visemes
    }

    pub fn n_phonemes(&self) -> usize {
        self.map.len()
    }

    pub fn preimage(&self, viseme: usize) -> Vec<usize> {
        (0..self.map.len()).filter(|&p| self.map[p] == viseme).collect()
    }
}

/// Random balanced surjection: phonemes are shuffled and dealt round-robin
/// onto visemes, so preimage sizes differ by at most one.
pub fn build_viseme_map(n_phonemes: usize, n_visemes: usize, seed: u64) -> Result<VisemeMap, CorpusError> {
    if n_visemes == 0 || n_visemes > n_phonemes {
        return Err(CorpusError::InvalidSpec {
            field: "n_visemes",
            message: format!("need 1 <= n_visemes <= n_phonemes, got {n_visemes} and {n_phonemes}"),
        });
    }
    let mut order: Vec<usize> = (0..n_phonemes).collect();
    order.shuffle(&mut rng_for(seed, "viseme-map", 0));
    let mut map = vec![0; n_phonemes];
    for (slot, &phoneme) in order.iter().enumerate() {
        map[phoneme] = slot % n_visemes;
    }
    Ok(VisemeMap { map, n_visemes })
}

/// Per-class mean feature vectors for each stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub dim: usize,
    /// `n_phonemes x dim`
    pub audio: Vec<f64>,
    /// `n_visemes x dim`
    pub visual: Vec<f64>,
}

impl Codebooks {
    pub fn draw(spec: &CorpusSpec) -> Self {
        let mut rng = rng_for(spec.master_seed, "codebooks", 0);
        let d = spec.feature_dim;
        let audio = (0..spec.n_phonemes * d).map(|_| rng.sample(StandardNormal)).collect();
        let visual = (0..spec.n_visemes * d).map(|_| rng.sample(StandardNormal)).collect();
        Self { dim: d, audio, visual }
    }

    pub fn audio_row(&self, phoneme: usize) -> &[f64] {
        &self.audio[phoneme * self.dim..(phoneme + 1) * self.dim]
    }

    pub fn visual_row(&self, viseme: usize) -> &[f64] {
        &self.visual[viseme * self.dim..(viseme + 1) * self.dim]
    }
}

/// One paired sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio: FeatureMatrix,
    pub visual: FeatureMatrix,
    pub src_tokens: Vec<usize>,
    pub tgt_tokens: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.audio.rows()
    }
}

/// Token-level stand-in translation: an affine id map followed by swapping
/// adjacent pairs, wrapped in BOS/EOS.
pub fn translate_tokens(src: &[usize], spec: &CorpusSpec) -> Result<Vec<usize>, CorpusError> {
    let effective = spec.tgt_vocab - RESERVED_TOKENS;
    let mut mapped = Vec::with_capacity(src.len());
    for &id in src {
        if id >= spec.n_phonemes {
            return Err(CorpusError::TokenOutOfRange {
                token: id,
                bound: spec.n_phonemes,
            });
        }
        mapped.push(RESERVED_TOKENS + (7 * id) % effective);
    }
    for pair in mapped.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
    let mut out = Vec::with_capacity(src.len() + 2);
    out.push(BOS);
    out.extend(mapped);
    out.push(EOS);
    Ok(out)
}

/// Samples one utterance. Each source token spans `frames_per_token`
/// frames; audio frames sit around the phoneme's codebook entry and visual
/// frames around its viseme's entry.
pub fn synth_utterance(
    spec: &CorpusSpec,
    visemes: &VisemeMap,
    codebooks: &Codebooks,
    utterance_seed: u64,
    id: String,
) -> Result<Utterance, CorpusError> {
    let mut rng = rng_for(utterance_seed, "utterance", 0);
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.n_phonemes)).collect();
    let d = spec.feature_dim;
    let frames = len * spec.frames_per_token;
    let mut audio = Vec::with_capacity(frames * d);
    let mut visual = Vec::with_capacity(frames * d);
    for &phoneme in &src {
        let a_mean = codebooks.audio_row(phoneme);
        let v_mean = codebooks.visual_row(visemes.viseme(phoneme));
        for _ in 0..spec.frames_per_token {
            for &m in a_mean {
                let z: f64 = rng.sample(StandardNormal);
                audio.push((m + spec.sigma_audio * z) as f32);
            }
            for &m in v_mean {
                let z: f64 = rng.sample(StandardNormal);
                visual.push((m + spec.sigma_visual * z) as f32);
            }
        }
    }
    Ok(Utterance {
        id,
        audio: FeatureMatrix::new(frames, d, audio)?,
        visual: FeatureMatrix::new(frames, d, visual)?,
        tgt_tokens: translate_tokens(&src, spec)?,
        src_tokens: src,
    })
}

/// Noise level for [`add_noise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Clean,
    Db(f64),
}

impl Snr {
    pub fn parse(s: &str) -> Option<Self> {
        if s.eq_ignore_ascii_case("clean") {
            return Some(Snr::Clean);
        }
        s.parse::<f64>().ok().filter(|v| v.is_finite()).map(Snr::Db)
    }

    pub fn label(&self) -> String {
        match self {
            Snr::Clean => "clean".into(),
            Snr::Db(db) => format!("{db}"),
        }
    }
}

/// Adds white Gaussian noise with variance `P / 10^(snr/10)`, where `P` is
/// the mean squared value of `audio`.
pub fn add_noise(audio: &FeatureMatrix, snr: Snr, seed: u64) -> Result<FeatureMatrix, CorpusError> {
    if audio.is_empty() {
        return Err(CorpusError::Shape("cannot add noise to an empty stream".into()));
    }
    let Snr::Db(db) = snr else {
        return Ok(audio.clone());
    };
    let power = audio.power();
    if power == 0.0 {
        return Err(CorpusError::ZeroSignal);
    }
    let sigma = (power / 10f64.powf(db / 10.0)).sqrt();
    let mut rng = rng_for(seed, "noise", 0);
    let data = audio
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            (v as f64 + sigma * z) as f32
        })
        .collect();
    FeatureMatrix::new(audio.rows(), audio.cols(), data)
}

/// Draws `n` standard normal values; handy for tests that need raw noise.
pub fn standard_normals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rng_for(seed, "normals", 0);
    StandardNormal.sample_iter(&mut rng).take(n).collect()
}
