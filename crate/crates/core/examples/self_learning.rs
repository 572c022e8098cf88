//! Audio pretraining followed by visual self-learning with the mixed branch.
//! Run directories land in a temporary folder.
//!
//!     cargo run --release --example self_learning

use mixspeech::corpus::{generate_corpus, CorpusSpec};
use mixspeech::train::{pretrain_audio, read_metrics, selflearn, TrainConfig, METRICS_FILE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = generate_corpus(&CorpusSpec {
        n_train: 400,
        n_valid: 40,
        n_test: 40,
        ..CorpusSpec::default()
    })?;
    let config = TrainConfig {
        stage1_steps: 600,
        stage2_steps: 300,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let dir = std::env::temp_dir().join("mixspeech-self-learning");
    let _ = std::fs::remove_dir_all(&dir);

    let report = |r: &mixspeech::train::MetricsRecord| {
        println!(
            "[{:?} {:4}] total {:8.4}  valid BLEU {:6.2}",
            r.stage,
            r.step + 1,
            r.total,
            r.eval_bleu.unwrap_or(f64::NAN)
        );
    };
    let pre = pretrain_audio(&config, &corpus, &dir.join("pretrain"), Some(&report))?;
    let post = selflearn(&config, &corpus, &pre.final_checkpoint, &dir.join("selflearn"), Some(&report))?;

    for r in read_metrics(&post.run_dir.join(METRICS_FILE))?.iter().step_by(50) {
        println!(
            "step {:3}  u_uni {:.4}  u_mix {:.4}  streak {:2}  phi {:.4}",
            r.step,
            r.u_uni,
            r.u_mix.unwrap_or(f64::NAN),
            r.streak.unwrap_or(0),
            r.phi.unwrap_or(f64::NAN)
        );
    }
    println!("scheduler firings {}, warnings {:?}", post.manifest.scheduler_firings, post.manifest.warnings);
    println!("run directories under {}", dir.display());
    Ok(())
}
