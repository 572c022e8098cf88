//! Pretrains on audio and sweeps the evaluation SNR.
//!
//!     cargo run --release --example pretrain_eval -- [steps]

use mixspeech::corpus::{generate_corpus, CorpusSpec, Snr};
use mixspeech::train::{decode_limit, evaluate, EvalModality, EvalOptions, TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: u64 = std::env::args().nth(1).map_or(Ok(600), |s| s.parse())?;
    let spec = CorpusSpec {
        n_train: 400,
        n_valid: 40,
        n_test: 40,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec)?;
    let config = TrainConfig {
        stage1_steps: steps,
        ..TrainConfig::default()
    };

    let mut trainer = Trainer::pretrain(&config, &corpus.train)?;
    for _ in 0..steps {
        let record = trainer.step()?;
        if record.step % 100 == 0 {
            println!("step {:4}  lr {:.2e}  loss {:.4}", record.step, record.lr, record.total);
        }
    }
    let model = trainer.into_model();

    let max_len = decode_limit(&spec);
    for snr in [Snr::Clean, Snr::Db(20.0), Snr::Db(10.0), Snr::Db(0.0), Snr::Db(-10.0), Snr::Db(-20.0)] {
        let opts = EvalOptions {
            snr,
            ..EvalOptions::new(EvalModality::Audio, max_len)
        };
        let report = evaluate(&model, &corpus.test, &opts)?;
        println!("audio {:>6}: BLEU {:6.2}  WER {:.4}", snr.label(), report.bleu, report.wer);
    }
    let visual = evaluate(&model, &corpus.test, &EvalOptions::new(EvalModality::Visual, max_len))?;
    println!("visual       : BLEU {:6.2}  WER {:.4}", visual.bleu, visual.wer);
    Ok(())
}
