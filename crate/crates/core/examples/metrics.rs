//! Word error rate and corpus BLEU on a few sentences.

use mixspeech::metrics::{corpus_bleu, corpus_bleu_stats, corpus_wer, wer};

fn main() {
    let refs = ["the cat sat on the mat", "there is a cat on the mat", "a b c d e f"];
    let hyps = ["the cat sat on a mat", "there is cat on the the mat", "a b c d e f"];
    let refs: Vec<Vec<&str>> = refs.iter().map(|s| s.split_whitespace().collect()).collect();
    let hyps: Vec<Vec<&str>> = hyps.iter().map(|s| s.split_whitespace().collect()).collect();

    for (r, h) in refs.iter().zip(&hyps) {
        let (w, c) = wer(r, h).unwrap();
        println!(
            "WER {w:.3}  S={} D={} I={}  | {} -> {}",
            c.substitutions,
            c.deletions,
            c.insertions,
            r.join(" "),
            h.join(" ")
        );
    }
    let (w, counts) = corpus_wer(&refs, &hyps).unwrap();
    println!("corpus WER {w:.4} over {} reference words", counts.reference_len);

    let stats = corpus_bleu_stats(&refs, &hyps).unwrap();
    println!("n-gram matches {:?} of {:?}", stats.matches, stats.totals);
    println!("corpus BLEU {:.2}", corpus_bleu(&refs, &hyps).unwrap());
}
