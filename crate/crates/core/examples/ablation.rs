//! The four loss-weight combinations on a reduced corpus and schedule.
//!
//!     cargo run --release --example ablation

use mixspeech::corpus::{generate_corpus, CorpusSpec};
use mixspeech::train::{run_ablation, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = generate_corpus(&CorpusSpec {
        n_train: 300,
        n_valid: 30,
        n_test: 60,
        ..CorpusSpec::default()
    })?;
    let config = TrainConfig {
        stage1_steps: 400,
        stage2_steps: 150,
        eval_every: 150,
        eval_limit: Some(20),
        ..TrainConfig::default()
    };
    let out = std::env::temp_dir().join("mixspeech-ablation");
    let _ = std::fs::remove_dir_all(&out);
    let result = run_ablation(&config, &corpus, &[1, 2, 3], &out, None)?;
    print!("{}", result.table());
    println!("medians ordered #4 >= #3 >= #2 >= #1: {}", result.ordered());
    Ok(())
}
