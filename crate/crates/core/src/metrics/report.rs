use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{corpus_bleu_stats, wer, AlignmentCounts, MetricError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRow {
    pub id: String,
    pub ref_tokens: Vec<usize>,
    pub hyp_tokens: Vec<usize>,
    pub counts: AlignmentCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    /// Micro-averaged over the summed alignment counts.
    pub wer: f64,
    pub bleu: f64,
    pub counts: AlignmentCounts,
    pub utterances: Vec<UtteranceRow>,
    pub config: serde_json::Value,
}

impl Report {
    /// Scores `(id, reference, hypothesis)` triples.
    pub fn build(rows: Vec<(String, Vec<usize>, Vec<usize>)>, config: serde_json::Value) -> Result<Self, MetricError> {
        let refs: Vec<&[usize]> = rows.iter().map(|r| r.1.as_slice()).collect();
        let hyps: Vec<&[usize]> = rows.iter().map(|r| r.2.as_slice()).collect();
        let bleu = corpus_bleu_stats(&refs, &hyps)?.score();
        let mut total = AlignmentCounts::default();
        let mut utterances = Vec::with_capacity(rows.len());
        for (id, ref_tokens, hyp_tokens) in rows {
            let (_, counts) = wer(&ref_tokens, &hyp_tokens)?;
            total = total.merge(counts);
            utterances.push(UtteranceRow {
                id,
                ref_tokens,
                hyp_tokens,
                counts,
            });
        }
        Ok(Self {
            wer: total.wer(),
            bleu,
            counts: total,
            utterances,
            config,
        })
    }

    pub fn hypotheses(&self) -> Vec<HypothesisRecord> {
        self.utterances
            .iter()
            .map(|u| HypothesisRecord {
                id: u.id.clone(),
                ref_tokens: u.ref_tokens.clone(),
                hyp_tokens: u.hyp_tokens.clone(),
            })
            .collect()
    }
}

pub fn write_report(path: &Path, report: &Report) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    fs::write(path, json + "\n")
}

pub fn read_report(path: &Path) -> std::io::Result<Report> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisRecord {
    pub id: String,
    pub ref_tokens: Vec<usize>,
    pub hyp_tokens: Vec<usize>,
}

pub fn write_hypotheses(path: &Path, records: &[HypothesisRecord]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_hypotheses(path: &Path) -> std::io::Result<Vec<HypothesisRecord>> {
    BufReader::new(fs::File::open(path)?)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| {
            serde_json::from_str(&l?).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
        .collect()
}
