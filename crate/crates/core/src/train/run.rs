use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{decode_limit, evaluate, EvalModality, EvalOptions, MetricsRecord, Stage, TrainConfig, TrainError, Trainer};
use crate::corpus::Corpus;
use crate::metrics::{write_hypotheses, write_report, Report};
use crate::mixup::Modality;
use crate::model::load_checkpoint;

pub const SNAPSHOT_FILE: &str = "config.snapshot.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "run.manifest.json";
pub const SCHEDULER_IDLE: &str = "scheduler never fired";

/// Provenance of one run directory. Timestamps live here and not in the
/// metrics log, which stays byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub stage: Stage,
    pub config: TrainConfig,
    pub init_checkpoint: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<PathBuf>,
    pub steps: u64,
    pub scheduler_firings: u32,
    pub final_phi: Option<f64>,
    pub warnings: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub manifest: RunManifest,
    /// Final evaluation on the (possibly limited) validation split.
    pub valid_report: Option<Report>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step-{step}.mxck"))
}

/// Called with every record that carries a periodic evaluation.
pub type Observer<'a> = &'a (dyn Fn(&MetricsRecord) + Sync);

/// Audio-only pretraining from fresh parameters.
pub fn pretrain_audio(
    config: &TrainConfig,
    corpus: &Corpus,
    run_dir: &Path,
    observer: Option<Observer<'_>>,
) -> Result<RunOutcome, TrainError> {
    config.check_corpus(&corpus.spec)?;
    let trainer = Trainer::pretrain(config, &corpus.train)?;
    run_stage(trainer, config, corpus, run_dir, None, config.stage1_steps, observer)
}

/// Self-learning from a pretrained checkpoint.
pub fn selflearn(
    config: &TrainConfig,
    corpus: &Corpus,
    init: &Path,
    run_dir: &Path,
    observer: Option<Observer<'_>>,
) -> Result<RunOutcome, TrainError> {
    config.check_corpus(&corpus.spec)?;
    let checkpoint = load_checkpoint(init)?;
    let trainer = Trainer::selflearn(config, &corpus.train, checkpoint.model)?;
    run_stage(trainer, config, corpus, run_dir, Some(init), config.stage2_steps, observer)
}

fn run_stage(
    mut trainer: Trainer<'_>,
    config: &TrainConfig,
    corpus: &Corpus,
    run_dir: &Path,
    init: Option<&Path>,
    total_steps: u64,
    observer: Option<Observer<'_>>,
) -> Result<RunOutcome, TrainError> {
    let started = unix_now();
    let stage = trainer.stage();
    for sub in ["checkpoints", "eval"] {
        fs::create_dir_all(run_dir.join(sub)).map_err(|e| TrainError::io(run_dir, e))?;
    }
    let snapshot = run_dir.join(SNAPSHOT_FILE);
    let json = serde_json::to_string_pretty(config).expect("config serializes");
    fs::write(&snapshot, json + "\n").map_err(|e| TrainError::io(&snapshot, e))?;

    let metrics_path = run_dir.join(METRICS_FILE);
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path).map_err(|e| TrainError::io(&metrics_path, e))?);
    let mut emit = |record: &MetricsRecord| -> Result<(), TrainError> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(metrics, "{line}")
            .and_then(|_| metrics.flush())
            .map_err(|e| TrainError::io(&metrics_path, e))
    };

    let modality = match (stage, config.stage2_modality) {
        (Stage::Pretrain, _) | (Stage::Selflearn, Modality::Audio) => EvalModality::Audio,
        (Stage::Selflearn, Modality::Visual) => EvalModality::Visual,
    };
    let eval_set = &corpus.valid[..config.eval_limit.unwrap_or(usize::MAX).min(corpus.valid.len())];
    let opts = EvalOptions {
        seed: config.seed,
        orientation: config.mix.orientation,
        ..EvalOptions::new(modality, decode_limit(&corpus.spec))
    };

    let mut checkpoints = Vec::new();
    let mut last_report = None;
    let mut firings = 0;
    let mut phi = (stage == Stage::Selflearn).then_some(config.mix.phi_init);
    if total_steps == 0 {
        let path = checkpoint_path(run_dir, 0);
        trainer.save(&path)?;
        checkpoints.push(path);
    }
    for _ in 0..total_steps {
        let mut record = match trainer.step() {
            Ok(r) => r,
            Err(TrainError::NonFinite { step, stage, record }) => {
                emit(&record)?;
                return Err(TrainError::NonFinite { step, stage, record });
            }
            Err(e) => return Err(e),
        };
        if record.phi.is_some() && record.phi != phi {
            firings += 1;
            phi = record.phi;
        }
        let done = trainer.steps_done();
        if done.is_multiple_of(config.eval_every) || done == total_steps {
            if !eval_set.is_empty() {
                let report = evaluate(trainer.model(), eval_set, &opts)?;
                record.eval_wer = Some(report.wer);
                record.eval_bleu = Some(report.bleu);
                last_report = Some(report);
            }
            if let Some(observe) = observer {
                observe(&record);
            }
            let path = checkpoint_path(run_dir, done);
            trainer.save(&path)?;
            checkpoints.push(path);
        }
        emit(&record)?;
    }

    let mut reports = Vec::new();
    if let Some(report) = &last_report {
        let path = run_dir.join("eval").join("valid.report.json");
        write_report(&path, report).map_err(|e| TrainError::io(&path, e))?;
        let dump = run_dir.join("eval").join("valid.hyp.jsonl");
        write_hypotheses(&dump, &report.hypotheses()).map_err(|e| TrainError::io(&dump, e))?;
        reports.push(path);
    }
    let mut warnings = Vec::new();
    let mixing = stage == Stage::Selflearn && !config.loss_weights.uni_only();
    if mixing && total_steps > 0 && firings == 0 {
        warnings.push(SCHEDULER_IDLE.to_string());
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        stage,
        config: config.clone(),
        init_checkpoint: init.map(Path::to_path_buf),
        checkpoints: checkpoints.clone(),
        reports,
        steps: trainer.steps_done(),
        scheduler_firings: firings,
        final_phi: (stage == Stage::Selflearn).then(|| trainer.mix_state().phi),
        warnings,
        started_unix: started,
        finished_unix: unix_now(),
    };
    let path = run_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| TrainError::io(&path, e))?;
    Ok(RunOutcome {
        run_dir: run_dir.to_path_buf(),
        final_checkpoint: checkpoints.last().cloned().expect("at least one checkpoint"),
        manifest,
        valid_report: last_report,
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, TrainError> {
    let file = fs::File::open(path).map_err(|e| TrainError::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| TrainError::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| TrainError::Meta(format!("{}: {e}", path.display())))
        })
        .collect()
}
