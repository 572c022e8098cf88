//! Word error rate and corpus BLEU over integer token sequences, plus the
//! JSON evaluation report.

mod report;

pub use report::{read_hypotheses, read_report, write_hypotheses, write_report, HypothesisRecord, Report, UtteranceRow};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("reference is empty; WER is undefined")]
    EmptyReference,
    #[error("{references} references but {hypotheses} hypotheses")]
    LengthMismatch { references: usize, hypotheses: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// Edit operation counts from one alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl AlignmentCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn matches(&self) -> usize {
        self.reference_len - self.substitutions - self.deletions
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.reference_len as f64
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            substitutions: self.substitutions + other.substitutions,
            deletions: self.deletions + other.deletions,
            insertions: self.insertions + other.insertions,
            reference_len: self.reference_len + other.reference_len,
        }
    }
}

/// Minimal unit-cost alignment. When several alignments are minimal the
/// backtrace prefers a substitution (or match), then an insertion, then a
/// deletion, so the counts are deterministic.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<(f64, AlignmentCounts), MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = sub.min(ins).min(del);
        }
    }
    let mut counts = AlignmentCounts {
        reference_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = reference[i - 1] != hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(mismatch) == here {
                counts.substitutions += usize::from(mismatch);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            counts.insertions += 1;
            j -= 1;
        } else {
            counts.deletions += 1;
            i -= 1;
        }
    }
    Ok((counts.wer(), counts))
}

/// Sufficient statistics for corpus BLEU; additive across sentences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn sentence<T: Eq + std::hash::Hash>(reference: &[T], hypothesis: &[T]) -> Self {
        let mut stats = Self {
            hyp_len: hypothesis.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let ref_counts = ngram_counts(reference, n);
            let hyp_counts = ngram_counts(hypothesis, n);
            stats.totals[n - 1] = hypothesis.len().saturating_sub(n - 1);
            stats.matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
        }
        stats
    }

    pub fn merge(mut self, other: Self) -> Self {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
        self
    }

    /// Unsmoothed BLEU on the 0..=100 scale.
    pub fn score(&self) -> f64 {
        if self.matches.contains(&0) {
            return 0.0;
        }
        let log_precision: f64 = self
            .matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| (m as f64 / t as f64).ln())
            .sum::<f64>()
            / MAX_ORDER as f64;
        let brevity = if self.hyp_len < self.ref_len {
            1.0 - self.ref_len as f64 / self.hyp_len as f64
        } else {
            0.0
        };
        100.0 * (log_precision + brevity).exp()
    }
}

fn ngram_counts<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

pub fn corpus_bleu_stats<T: Eq + std::hash::Hash, R: AsRef<[T]>>(
    references: &[R],
    hypotheses: &[R],
) -> Result<BleuStats, MetricError> {
    if references.len() != hypotheses.len() {
        return Err(MetricError::LengthMismatch {
            references: references.len(),
            hypotheses: hypotheses.len(),
        });
    }
    if references.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    Ok(references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| BleuStats::sentence(r.as_ref(), h.as_ref()))
        .fold(BleuStats::default(), BleuStats::merge))
}

pub fn corpus_bleu<T: Eq + std::hash::Hash, R: AsRef<[T]>>(references: &[R], hypotheses: &[R]) -> Result<f64, MetricError> {
    Ok(corpus_bleu_stats(references, hypotheses)?.score())
}

/// Micro-averaged WER: summed counts over the corpus.
pub fn corpus_wer<T: PartialEq, R: AsRef<[T]>>(
    references: &[R],
    hypotheses: &[R],
) -> Result<(f64, AlignmentCounts), MetricError> {
    if references.len() != hypotheses.len() {
        return Err(MetricError::LengthMismatch {
            references: references.len(),
            hypotheses: hypotheses.len(),
        });
    }
    if references.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut total = AlignmentCounts::default();
    for (r, h) in references.iter().zip(hypotheses) {
        total = total.merge(wer(r.as_ref(), h.as_ref())?.1);
    }
    Ok((total.wer(), total))
}
