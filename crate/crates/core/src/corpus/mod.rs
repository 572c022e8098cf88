//! Synthetic paired audio/visual corpus: generation, noise injection and
//! on-disk layout (`manifest.{train,valid,test}.jsonl` plus `features/`).

mod features;
mod synth;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use features::{read_features, write_features, FeatureMatrix, FEATURE_HEADER_LEN, FEATURE_MAGIC, FEATURE_VERSION};
pub use synth::{
    add_noise, build_viseme_map, standard_normals, synth_utterance, translate_tokens, Codebooks, CorpusSpec, Snr,
    Utterance, VisemeMap, BOS, EOS, PAD, RESERVED_TOKENS,
};

use crate::seed::derive_seed;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid corpus spec field `{field}`: {message}")]
    InvalidSpec { field: &'static str, message: String },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated feature file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("source token {token} out of range (n_phonemes = {bound})")]
    TokenOutOfRange { token: usize, bound: usize },
    #[error("signal power is zero; SNR is undefined")]
    ZeroSignal,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("manifest {path}, line {line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn manifest_file(self) -> String {
        format!("manifest.{}.jsonl", self.name())
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub audio_path: String,
    pub visual_path: String,
    pub src_tokens: Vec<usize>,
    pub tgt_tokens: Vec<usize>,
}

/// A generated corpus held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Generates every split. Utterance `i` (counted across train, valid, test)
/// is seeded from `(master_seed, i)`, so the result does not depend on how
/// the work is scheduled.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let visemes = build_viseme_map(spec.n_phonemes, spec.n_visemes, spec.master_seed)?;
    let codebooks = Codebooks::draw(spec);
    let counts = [spec.n_train, spec.n_valid, spec.n_test];
    let mut offset = 0u64;
    let mut splits = Vec::with_capacity(3);
    for (split, &count) in Split::ALL.iter().zip(&counts) {
        let base = offset;
        let utts = (0..count)
            .into_par_iter()
            .map(|i| {
                let seed = derive_seed(spec.master_seed, "utterance", base + i as u64);
                synth_utterance(spec, &visemes, &codebooks, seed, format!("{}-{i:05}", split.name()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        offset += count as u64;
        splits.push(utts);
    }
    let test = splits.pop().expect("three splits");
    let valid = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Corpus {
        spec: spec.clone(),
        train,
        valid,
        test,
    })
}

pub const SPEC_FILE: &str = "corpus.spec.json";
pub const FEATURE_DIR: &str = "features";

/// Writes manifests, feature files and a copy of the corpus spec under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    let features = dir.join(FEATURE_DIR);
    fs::create_dir_all(&features).map_err(|e| CorpusError::io(&features, e))?;
    let spec_path = dir.join(SPEC_FILE);
    let spec_json = serde_json::to_string_pretty(&corpus.spec).expect("spec serializes");
    fs::write(&spec_path, spec_json + "\n").map_err(|e| CorpusError::io(&spec_path, e))?;
    for split in Split::ALL {
        let utts = corpus.split(split);
        utts.par_iter().try_for_each(|u| {
            write_features(&features.join(format!("{}.audio.avms", u.id)), &u.audio)?;
            write_features(&features.join(format!("{}.visual.avms", u.id)), &u.visual)
        })?;
        let path = dir.join(split.manifest_file());
        let mut out = String::new();
        for u in utts {
            let rec = ManifestRecord {
                id: u.id.clone(),
                audio_path: format!("{FEATURE_DIR}/{}.audio.avms", u.id),
                visual_path: format!("{FEATURE_DIR}/{}.visual.avms", u.id),
                src_tokens: u.src_tokens.clone(),
                tgt_tokens: u.tgt_tokens.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        let mut f = fs::File::create(&path).map_err(|e| CorpusError::io(&path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| CorpusError::io(&path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, CorpusError> {
    let f = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CorpusError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Loads every utterance listed in a manifest. Feature paths are resolved
/// relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>, CorpusError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let records = read_manifest(path)?;
    records
        .into_par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let audio = read_features(&base.join(&rec.audio_path))?;
            let visual = read_features(&base.join(&rec.visual_path))?;
            if audio.rows() != visual.rows() || audio.cols() != visual.cols() {
                return Err(CorpusError::Manifest {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!(
                        "streams out of sync: audio {}x{}, visual {}x{}",
                        audio.rows(),
                        audio.cols(),
                        visual.rows(),
                        visual.cols()
                    ),
                });
            }
            let bad_tgt = rec.tgt_tokens.len() < 2
                || rec.tgt_tokens.first() != Some(&BOS)
                || rec.tgt_tokens.last() != Some(&EOS);
            if bad_tgt {
                return Err(CorpusError::Manifest {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "tgt_tokens must start with BOS and end with EOS".into(),
                });
            }
            Ok(Utterance {
                id: rec.id,
                audio,
                visual,
                src_tokens: rec.src_tokens,
                tgt_tokens: rec.tgt_tokens,
            })
        })
        .collect()
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Utterance>, CorpusError> {
    load_manifest(&dir.join(split.manifest_file()))
}

pub fn read_spec(dir: &Path) -> Result<CorpusSpec, CorpusError> {
    let path = dir.join(SPEC_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CorpusError::Manifest {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

/// Loads all three splits from a corpus directory.
pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    Ok(Corpus {
        spec: read_spec(dir)?,
        train: load_split(dir, Split::Train)?,
        valid: load_split(dir, Split::Valid)?,
        test: load_split(dir, Split::Test)?,
    })
}
