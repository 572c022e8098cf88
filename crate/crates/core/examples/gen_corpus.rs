//! Generates the default synthetic corpus and writes it to disk.
//!
//!     cargo run --release --example gen_corpus -- /tmp/corpus

use std::path::PathBuf;

use mixspeech::corpus::{build_viseme_map, generate_corpus, load_corpus, write_corpus, CorpusSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("mixspeech-corpus"), PathBuf::from);
    let spec = CorpusSpec::default();
    let corpus = generate_corpus(&spec)?;
    write_corpus(&corpus, &out)?;

    let visemes = build_viseme_map(spec.n_phonemes, spec.n_visemes, spec.master_seed)?;
    for v in 0..visemes.n_visemes() {
        println!("viseme {v:2} <- phonemes {:?}", visemes.preimage(v));
    }

    let first = &corpus.train[0];
    println!("{}: {} frames x {} dims", first.id, first.frames(), first.audio.cols());
    println!("  source {:?}", first.src_tokens);
    println!("  target {:?}", first.tgt_tokens);

    // reading back gives the same utterances
    let reloaded = load_corpus(&out)?;
    assert_eq!(reloaded, corpus);
    println!(
        "wrote {} / {} / {} utterances to {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}
