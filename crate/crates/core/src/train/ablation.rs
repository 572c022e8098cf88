use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    decode_limit, evaluate, pretrain_audio, selflearn, EvalModality, EvalOptions, Observer, TrainConfig, TrainError,
};
use crate::corpus::Corpus;
use crate::losses::LossWeights;
use crate::metrics::write_report;
use crate::model::load_checkpoint;

/// `(id, lambda1, lambda2)` for the four loss combinations.
pub const ABLATION_CONFIGS: [(u8, f64, f64); 4] = [(1, 0.0, 0.0), (2, 1.0, 0.0), (3, 0.0, 1.0), (4, 1.0, 1.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: u8,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub test_bleu: f64,
    pub test_wer: f64,
    pub scheduler_firings: u32,
    pub final_phi: Option<f64>,
    pub warnings: Vec<String>,
    /// Wall time of the self-learning run alone.
    pub seconds: f64,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub config: u8,
    pub median_bleu: f64,
    pub median_wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub seeds: Vec<u64>,
    /// Visual test BLEU of each seed's pretrained model, before self-learning.
    pub pretrained_bleu: Vec<f64>,
    pub pretrain_seconds: Vec<f64>,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<ConfigSummary>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl AblationResult {
    pub fn median_bleu(&self, config: u8) -> Option<f64> {
        self.summary.iter().find(|s| s.config == config).map(|s| s.median_bleu)
    }

    /// Medians satisfy #4 >= #3 >= #2 >= #1.
    pub fn ordered(&self) -> bool {
        let m: Vec<f64> = [4, 3, 2, 1].iter().filter_map(|&c| self.median_bleu(c)).collect();
        m.len() == 4 && m.windows(2).all(|w| w[0] >= w[1])
    }

    /// Aligned text table of per-seed and median scores.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8}{:>8}{:>8}", "config", "lambda1", "lambda2");
        for s in &self.seeds {
            let _ = write!(out, "{:>12}", format!("seed {s}"));
        }
        let _ = writeln!(out, "{:>12}{:>12}", "median", "median WER");
        for &(id, l1, l2) in &ABLATION_CONFIGS {
            let _ = write!(out, "{:<8}{l1:>8.1}{l2:>8.1}", format!("#{id}"));
            for s in &self.seeds {
                let row = self.rows.iter().find(|r| r.config == id && r.seed == *s);
                let _ = write!(out, "{:>12}", row.map_or("-".into(), |r| format!("{:.2}", r.test_bleu)));
            }
            let sum = self.summary.iter().find(|x| x.config == id);
            let _ = writeln!(
                out,
                "{:>12}{:>12}",
                sum.map_or("-".into(), |x| format!("{:.2}", x.median_bleu)),
                sum.map_or("-".into(), |x| format!("{:.4}", x.median_wer))
            );
        }
        out
    }
}

struct Pretrained {
    seed: u64,
    checkpoint: PathBuf,
    bleu: f64,
    seconds: f64,
}

/// For each seed: one audio pretraining run, then the four self-learning
/// variants from that same checkpoint, each scored on the visual test split.
/// Data order depends only on the seed, never on the loss weights. Seeds
/// pretrain concurrently, then all self-learning runs share the pool.
pub fn run_ablation(
    base: &TrainConfig,
    corpus: &Corpus,
    seeds: &[u64],
    out: &Path,
    observer: Option<Observer<'_>>,
) -> Result<AblationResult, TrainError> {
    let max_len = decode_limit(&corpus.spec);
    let opts_for = |seed: u64| EvalOptions {
        seed,
        orientation: base.mix.orientation,
        ..EvalOptions::new(EvalModality::Visual, max_len)
    };
    let pretrained = seeds
        .par_iter()
        .map(|&seed| -> Result<Pretrained, TrainError> {
            let clock = Instant::now();
            let config = TrainConfig { seed, ..base.clone() };
            let dir = out.join(format!("seed-{seed}")).join("pretrain");
            let run = pretrain_audio(&config, corpus, &dir, observer)?;
            let seconds = clock.elapsed().as_secs_f64();
            let model = load_checkpoint(&run.final_checkpoint)?.model;
            let report = evaluate(&model, &corpus.test, &opts_for(seed))?;
            let path = dir.join("eval").join("test.visual.report.json");
            write_report(&path, &report).map_err(|e| TrainError::io(&path, e))?;
            Ok(Pretrained {
                seed,
                checkpoint: run.final_checkpoint,
                bleu: report.bleu,
                seconds,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let jobs: Vec<(&Pretrained, (u8, f64, f64))> =
        pretrained.iter().flat_map(|p| ABLATION_CONFIGS.iter().map(move |&c| (p, c))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(pre, (id, l1, l2))| -> Result<AblationRow, TrainError> {
            let clock = Instant::now();
            let cfg = TrainConfig {
                seed: pre.seed,
                loss_weights: LossWeights::new(l1, l2)?,
                ..base.clone()
            };
            let run_dir = out.join(format!("seed-{}", pre.seed)).join(format!("config-{id}"));
            let run = selflearn(&cfg, corpus, &pre.checkpoint, &run_dir, observer)?;
            let seconds = clock.elapsed().as_secs_f64();
            let model = load_checkpoint(&run.final_checkpoint)?.model;
            let report = evaluate(&model, &corpus.test, &opts_for(pre.seed))?;
            let path = run_dir.join("eval").join("test.report.json");
            write_report(&path, &report).map_err(|e| TrainError::io(&path, e))?;
            Ok(AblationRow {
                config: id,
                lambda1: l1,
                lambda2: l2,
                seed: pre.seed,
                test_bleu: report.bleu,
                test_wer: report.wer,
                scheduler_firings: run.manifest.scheduler_firings,
                final_phi: run.manifest.final_phi,
                warnings: run.manifest.warnings,
                seconds,
                run_dir,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let summary = ABLATION_CONFIGS
        .iter()
        .map(|&(id, _, _)| {
            let mut bleu: Vec<f64> = rows.iter().filter(|r| r.config == id).map(|r| r.test_bleu).collect();
            let mut wer: Vec<f64> = rows.iter().filter(|r| r.config == id).map(|r| r.test_wer).collect();
            ConfigSummary {
                config: id,
                median_bleu: median(&mut bleu),
                median_wer: median(&mut wer),
            }
        })
        .collect();
    let result = AblationResult {
        seeds: seeds.to_vec(),
        pretrained_bleu: pretrained.iter().map(|p| p.bleu).collect(),
        pretrain_seconds: pretrained.iter().map(|p| p.seconds).collect(),
        rows,
        summary,
    };
    let json_path = out.join("ablation.json");
    let json = serde_json::to_string_pretty(&result).expect("result serializes");
    fs::write(&json_path, json + "\n").map_err(|e| TrainError::io(&json_path, e))?;
    let txt_path = out.join("ablation.txt");
    fs::write(&txt_path, result.table()).map_err(|e| TrainError::io(&txt_path, e))?;
    Ok(result)
}
