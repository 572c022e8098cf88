//! Saving a trainer mid-run and continuing from the file reproduces the
//! uninterrupted run step for step.

use mixspeech::corpus::{generate_corpus, CorpusSpec};
use mixspeech::model::{load_checkpoint, read_checkpoint_header};
use mixspeech::train::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = generate_corpus(&CorpusSpec {
        n_train: 64,
        n_valid: 8,
        n_test: 8,
        ..CorpusSpec::default()
    })?;
    let config = TrainConfig::default();
    let path = std::env::temp_dir().join("mixspeech-resume.mxck");

    let mut straight = Trainer::pretrain(&config, &corpus.train)?;
    let expected: Vec<f64> = (0..20).map(|_| straight.step().map(|r| r.total)).collect::<Result<_, _>>()?;

    let mut first = Trainer::pretrain(&config, &corpus.train)?;
    for _ in 0..10 {
        first.step()?;
    }
    first.save(&path)?;
    let (header, size) = read_checkpoint_header(&path)?;
    println!("checkpoint {} bytes: {header:?}", size);

    let mut resumed = Trainer::resume(&config, &corpus.train, load_checkpoint(&path)?)?;
    for want in &expected[10..] {
        let got = resumed.step()?;
        println!("step {:2}  resumed {:.12}  straight {want:.12}", got.step, got.total);
        assert_eq!(got.total, *want);
    }
    Ok(())
}
