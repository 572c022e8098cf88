//! Command-line front end: `gen-corpus`, `pretrain`, `train`, `evaluate`
//! and `ablate`. Exit codes are 0 (success), 2 (usage or validation) and
//! 3 (training aborted).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::corpus::{generate_corpus, load_corpus, load_manifest, read_spec, write_corpus, CorpusSpec, Snr};
use crate::metrics::{write_hypotheses, write_report};
use crate::model::load_checkpoint;
use crate::train::{
    decode_limit, evaluate, pretrain_audio, run_ablation, selflearn, EvalModality, EvalOptions, MetricsRecord,
    TrainConfig, TrainError,
};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_ABORT: u8 = 3;
pub const THREADS_ENV: &str = "MIXSPEECH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mixspeech", version, about = "Audio-visual stream mixing for visual speech translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired audio/visual corpus.
    GenCorpus {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Stage 1: pretrain on audio.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Stage 2: self-learning on visual input with mixed-stream regularization.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Decode a manifest and score it.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        modality: ModalityArg,
        #[arg(long, required_if_eq("modality", "mixed"))]
        phi: Option<f64>,
        /// Audio SNR in dB, or `clean`.
        #[arg(long, value_parser = parse_snr, allow_hyphen_values = true)]
        snr: Option<Snr>,
        /// Keys the noise and mixing draws.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// The four loss combinations over three seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Audio,
    Visual,
    Mixed,
}

fn parse_snr(s: &str) -> Result<Snr, String> {
    Snr::parse(s).ok_or_else(|| format!("expected a number of dB or `clean`, got `{s}`"))
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Train(e) if e.is_runtime_abort() => EXIT_ABORT,
            _ => EXIT_USAGE,
        }
    }
}

impl From<crate::corpus::CorpusError> for CliError {
    fn from(e: crate::corpus::CorpusError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<crate::model::CheckpointError> for CliError {
    fn from(e: crate::model::CheckpointError) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// Refuses to reuse a non-empty directory unless forced.
fn claim_dir(path: &Path, force: bool) -> Result<(), CliError> {
    if path.is_file() {
        return Err(CliError::Usage(format!("{} is a file", path.display())));
    }
    let occupied = fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(CliError::Usage(format!(
                "{} exists and is not empty (use --force to overwrite)",
                path.display()
            )));
        }
        fs::remove_dir_all(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    fs::create_dir_all(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn claim_file(path: &Path, force: bool) -> Result<(), CliError> {
    if path.is_dir() {
        return Err(CliError::Usage(format!("{} is a directory", path.display())));
    }
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} exists (use --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<TrainConfig, CliError> {
    TrainConfig::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn log_progress(record: &MetricsRecord) {
    let mut line = format!("[{:?} step {}] total {:.4}", record.stage, record.step + 1, record.total);
    if let (Some(w), Some(b)) = (record.eval_wer, record.eval_bleu) {
        line.push_str(&format!(" valid WER {w:.4} BLEU {b:.2}"));
    }
    if let Some(phi) = record.phi {
        line.push_str(&format!(" phi {phi:.4}"));
    }
    eprintln!("{line}");
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

/// Runs one command and returns the single-line JSON summary for stdout.
pub fn execute(command: Command) -> Result<serde_json::Value, CliError> {
    configure_threads()?;
    match command {
        Command::GenCorpus { spec, out, force } => {
            let text = fs::read_to_string(&spec).map_err(|e| CliError::Usage(format!("{}: {e}", spec.display())))?;
            let spec: CorpusSpec =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", spec.display())))?;
            spec.validate()?;
            claim_dir(&out, force)?;
            let corpus = generate_corpus(&spec)?;
            write_corpus(&corpus, &out)?;
            eprintln!("wrote corpus to {}", out.display());
            Ok(json!({
                "out": out,
                "train": corpus.train.len(),
                "valid": corpus.valid.len(),
                "test": corpus.test.len(),
                "feature_dim": spec.feature_dim,
                "tgt_vocab": spec.tgt_vocab,
                "master_seed": spec.master_seed,
            }))
        }
        Command::Pretrain { config, out, force } => {
            let config = load_config(&config)?;
            let corpus = load_corpus(&config.corpus_dir)?;
            claim_dir(&out, force)?;
            let run = pretrain_audio(&config, &corpus, &out, Some(&log_progress))?;
            Ok(json!({
                "run_dir": run.run_dir,
                "checkpoint": run.final_checkpoint,
                "steps": run.manifest.steps,
                "valid_wer": run.valid_report.as_ref().map(|r| r.wer),
                "valid_bleu": run.valid_report.as_ref().map(|r| r.bleu),
            }))
        }
        Command::Train {
            config,
            init,
            out,
            force,
        } => {
            let config = load_config(&config)?;
            let corpus = load_corpus(&config.corpus_dir)?;
            load_checkpoint(&init)?;
            claim_dir(&out, force)?;
            let run = selflearn(&config, &corpus, &init, &out, Some(&log_progress))?;
            for w in &run.manifest.warnings {
                eprintln!("warning: {w}");
            }
            Ok(json!({
                "run_dir": run.run_dir,
                "checkpoint": run.final_checkpoint,
                "steps": run.manifest.steps,
                "final_phi": run.manifest.final_phi,
                "scheduler_firings": run.manifest.scheduler_firings,
                "warnings": run.manifest.warnings,
                "valid_wer": run.valid_report.as_ref().map(|r| r.wer),
                "valid_bleu": run.valid_report.as_ref().map(|r| r.bleu),
            }))
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            modality,
            phi,
            snr,
            seed,
            out,
            force,
        } => {
            let modality = match (modality, phi) {
                (ModalityArg::Audio, _) => EvalModality::Audio,
                (ModalityArg::Visual, _) => EvalModality::Visual,
                (ModalityArg::Mixed, Some(phi)) if (0.0..=1.0).contains(&phi) => EvalModality::Mixed(phi),
                (ModalityArg::Mixed, Some(phi)) => return Err(CliError::Usage(format!("--phi {phi} outside [0, 1]"))),
                (ModalityArg::Mixed, None) => return Err(CliError::Usage("--modality mixed requires --phi".into())),
            };
            claim_file(&out, force)?;
            let model = load_checkpoint(&checkpoint)?.model;
            let utterances = load_manifest(&manifest)?;
            let corpus_dir = manifest.parent().unwrap_or(Path::new("."));
            let spec = read_spec(corpus_dir)?;
            let opts = EvalOptions {
                snr: snr.unwrap_or(Snr::Clean),
                seed,
                ..EvalOptions::new(modality, decode_limit(&spec))
            };
            let report = evaluate(&model, &utterances, &opts)?;
            write_report(&out, &report).map_err(|e| CliError::Usage(format!("{}: {e}", out.display())))?;
            let dump = out.with_extension("hyp.jsonl");
            write_hypotheses(&dump, &report.hypotheses())
                .map_err(|e| CliError::Usage(format!("{}: {e}", dump.display())))?;
            Ok(json!({
                "report": out,
                "utterances": report.utterances.len(),
                "wer": report.wer,
                "bleu": report.bleu,
            }))
        }
        Command::Ablate {
            config,
            out,
            seeds,
            force,
        } => {
            let config = load_config(&config)?;
            if seeds == 0 {
                return Err(CliError::Usage("--seeds must be positive".into()));
            }
            let corpus = load_corpus(&config.corpus_dir)?;
            claim_dir(&out, force)?;
            let seeds: Vec<u64> = (0..seeds).map(|i| config.seed + i).collect();
            let result = run_ablation(&config, &corpus, &seeds, &out, Some(&log_progress))?;
            eprint!("{}", result.table());
            Ok(json!({
                "out": out,
                "runs": result.rows.len(),
                "median_bleu": result.summary.iter().map(|s| (format!("#{}", s.config), json!(s.median_bleu))).collect::<serde_json::Map<_, _>>(),
                "pretrained_bleu": result.pretrained_bleu,
                "ordered": result.ordered(),
            }))
        }
    }
}

/// Parses `args`, runs the command, prints the summary and maps errors to
/// exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_requires_phi() {
        let err = Cli::try_parse_from([
            "mixspeech",
            "evaluate",
            "--checkpoint",
            "c",
            "--manifest",
            "m",
            "--modality",
            "mixed",
            "--out",
            "r",
        ])
        .unwrap_err();
        assert!(err.use_stderr());
    }

    #[test]
    fn snr_accepts_negative_db_and_clean() {
        let cli = Cli::try_parse_from([
            "mixspeech",
            "evaluate",
            "--checkpoint",
            "c",
            "--manifest",
            "m",
            "--modality",
            "audio",
            "--snr",
            "-20",
            "--out",
            "r",
        ])
        .unwrap();
        let Command::Evaluate { snr, .. } = cli.command else {
            panic!("wrong command")
        };
        assert_eq!(snr, Some(Snr::Db(-20.0)));
        assert_eq!(parse_snr("clean"), Ok(Snr::Clean));
        assert!(parse_snr("loud").is_err());
    }

    #[test]
    fn train_requires_init() {
        assert!(Cli::try_parse_from(["mixspeech", "train", "--config", "c", "--out", "o"]).is_err());
    }

    #[test]
    fn occupied_directories_need_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "1").unwrap();
        assert!(matches!(claim_dir(dir.path(), false), Err(CliError::Usage(_))));
        claim_dir(dir.path(), true).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        claim_dir(&dir.path().join("fresh"), false).unwrap();
    }
}
