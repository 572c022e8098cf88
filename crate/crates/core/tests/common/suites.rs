//! Self-contained property suites. Each returns a one-line summary on
//! success and the first violated property otherwise.

use mixspeech::autodiff::{Graph, Tensor};
use mixspeech::corpus::FeatureMatrix;
use mixspeech::losses::jsd_loss;
use mixspeech::metrics::{corpus_bleu, corpus_bleu_stats, wer};
use mixspeech::mixup::{
    concat_unimodal, mix_streams, scheduler_update, uncertainty, MixConfig, MixState, Modality, PhiOrientation,
    UncertaintyReading,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{RandomGraph, OP_KINDS};

pub type SuiteResult = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

pub fn gradients(graphs: u64) -> SuiteResult {
    let mut seen = vec![false; OP_KINDS];
    let mut worst: f64 = 0.0;
    for seed in 0..graphs {
        let graph = RandomGraph::new(seed);
        for k in graph.kinds() {
            seen[k] = true;
        }
        let err = graph.max_rel_error();
        ensure!(err < 1e-4, "graph {seed} {:?}: relative error {err:e}", graph.kinds());
        worst = worst.max(err);
    }
    ensure!(seen.iter().all(|&s| s), "primitive coverage incomplete: {seen:?}");
    let model = super::tiny_model_max_rel_error(5);
    ensure!(model < 1e-3, "tiny model relative error {model:e}");
    Ok(format!("{graphs} graphs max {worst:.1e}, tiny model {model:.1e}"))
}

fn atanh_series(x: f64) -> f64 {
    let z = (x - 1.0) / (x + 1.0);
    let z2 = z * z;
    let mut term = z;
    let mut sum = 0.0;
    for k in 0..200 {
        sum += term / (2 * k + 1) as f64;
        term *= z2;
    }
    2.0 * sum
}

/// `ln x` from the atanh series after halving or doubling into
/// `[0.75, 1.5)`, independent of the library's logarithm.
pub fn ln_series(mut x: f64) -> f64 {
    let mut e = 0i32;
    while x >= 1.5 {
        x /= 2.0;
        e += 1;
    }
    while x < 0.75 {
        x *= 2.0;
        e -= 1;
    }
    e as f64 * atanh_series(2.0) + atanh_series(x)
}

/// JSD of two distributions evaluated term by term with [`ln_series`].
pub fn jsd_oracle(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * ln_series(x / y)).sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

/// Per-row JSD through the library's differentiable loss.
pub fn jsd_rows(p: &[f64], q: &[f64], cols: usize) -> f64 {
    let mut g = Graph::new();
    let a = g.input(Tensor::matrix(p.len() / cols, cols, p.to_vec()));
    let b = g.input(Tensor::matrix(q.len() / cols, cols, q.to_vec()));
    let j = jsd_loss(&mut g, a, b).unwrap();
    g.value(j).item()
}

pub fn random_distribution(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..v).map(|_| rng.random::<f64>().powi(3) + 1e-12).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

pub fn divergence() -> SuiteResult {
    let ln2 = std::f64::consts::LN_2;
    let hand = jsd_rows(&[0.8, 0.2], &[0.2, 0.8], 2);
    let oracle = jsd_oracle(&[0.8, 0.2], &[0.2, 0.8]);
    ensure!((hand - oracle).abs() < 1e-6, "JSD((0.8,0.2),(0.2,0.8)) = {hand}, oracle {oracle}");
    ensure!((oracle - 0.19274).abs() < 1e-5, "oracle itself drifted: {oracle}");
    ensure!((jsd_rows(&[1.0, 0.0], &[0.0, 1.0], 2) - ln2).abs() < 1e-12, "disjoint supports must give ln 2");

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_asym: f64 = 0.0;
    for _ in 0..500 {
        let v = rng.random_range(2..12);
        let p = random_distribution(&mut rng, v);
        let q = random_distribution(&mut rng, v);
        let pq = jsd_rows(&p, &q, v);
        let qp = jsd_rows(&q, &p, v);
        max_asym = max_asym.max((pq - qp).abs());
        ensure!((pq - qp).abs() <= 1e-12, "asymmetry {:e}", (pq - qp).abs());
        ensure!((0.0..=ln2 + 1e-12).contains(&pq), "JSD {pq} outside [0, ln 2]");
        ensure!((pq - jsd_oracle(&p, &q)).abs() < 1e-9, "JSD {pq} vs oracle {}", jsd_oracle(&p, &q));
        ensure!(pq > 1e-12 || p == q, "distinct rows gave zero JSD");
        ensure!(jsd_rows(&p, &p, v).abs() <= 1e-12, "JSD(P,P) != 0");

        let h = uncertainty(&Tensor::matrix(1, v, p.clone())).unwrap();
        ensure!((0.0..=(v as f64).ln() + 1e-12).contains(&h), "entropy {h} outside [0, ln {v}]");
        let mut shuffled = p.clone();
        shuffled.shuffle(&mut rng);
        let hs = uncertainty(&Tensor::matrix(1, v, shuffled)).unwrap();
        ensure!((h - hs).abs() < 1e-12, "entropy changed under vocabulary permutation");
    }
    for v in [2usize, 4, 40] {
        let uniform = uncertainty(&Tensor::matrix(1, v, vec![1.0 / v as f64; v])).unwrap();
        ensure!((uniform - ln_series(v as f64)).abs() < 1e-12, "uniform entropy {uniform} for V={v}");
        let mut one_hot = vec![0.0; v];
        one_hot[v - 1] = 1.0;
        ensure!(uncertainty(&Tensor::matrix(1, v, one_hot)).unwrap() == 0.0, "one-hot entropy nonzero");
    }
    Ok(format!("JSD(0.8/0.2) = {hand:.8} (oracle {oracle:.8}), max asymmetry {max_asym:.1e}"))
}

pub fn ramp(rows: usize, cols: usize, start: f32) -> FeatureMatrix {
    FeatureMatrix::new(rows, cols, (0..rows * cols).map(|i| start + i as f32).collect()).unwrap()
}

pub fn mixing() -> SuiteResult {
    const T: usize = 10_000;
    const D: usize = 3;
    let audio = ramp(T, D, 1.0);
    let visual = ramp(T, D, -1e6);
    let a_only = concat_unimodal(&audio, Modality::Audio).unwrap();
    let v_only = concat_unimodal(&visual, Modality::Visual).unwrap();
    let (zero, _) = mix_streams(&audio, &visual, 0.0, 11, PhiOrientation::Audio).unwrap();
    ensure!(zero == v_only, "phi = 0 is not all-visual");
    let (one, _) = mix_streams(&audio, &visual, 1.0, 11, PhiOrientation::Audio).unwrap();
    ensure!(one == a_only, "phi = 1 is not all-audio");

    let mut fractions = Vec::new();
    for (i, phi) in [0.1, 0.3, 0.5, 0.9].into_iter().enumerate() {
        let (mixed, mask) = mix_streams(&audio, &visual, phi, 100 + i as u64, PhiOrientation::Audio).unwrap();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / T as f64;
        let bound = 3.0 * (phi * (1.0 - phi) / T as f64).sqrt();
        ensure!((frac - phi).abs() <= bound, "phi {phi}: audio fraction {frac} outside +-{bound:.4}");
        fractions.push(frac);
        for t in 0..T {
            let row = mixed.row(t);
            let is_audio = row == a_only.row(t);
            let is_visual = row == v_only.row(t);
            ensure!(is_audio != is_visual, "frame {t} at phi {phi} matches {} patterns", is_audio as u8 + is_visual as u8);
            ensure!(is_audio == mask[t], "frame {t} disagrees with its mask");
        }
    }
    Ok(format!("audio fractions {fractions:?} at T={T}"))
}

pub fn scheduler() -> SuiteResult {
    let cfg = MixConfig::default();
    ensure!(cfg.k == 0.05 && cfg.n == 20, "defaults k={} n={}", cfg.k, cfg.n);
    let trig = UncertaintyReading::new(1.0, 0.96).unwrap();
    let calm = UncertaintyReading::new(1.0, 0.9).unwrap();
    ensure!(trig.triggers(cfg.k), "gap 0.04 < 0.05 must trigger");
    ensure!(!calm.triggers(cfg.k), "gap 0.1 must not trigger");

    let mut s = MixState::new(cfg);
    for i in 1..20 {
        s = scheduler_update(trig, s);
        ensure!(s.streak == i && s.phi == 0.1, "step {i}: streak {} phi {}", s.streak, s.phi);
    }
    let reset = scheduler_update(calm, s);
    ensure!(reset.streak == 0 && reset.phi == 0.1, "non-trigger must reset the streak");
    s = scheduler_update(trig, s);
    ensure!(s.streak == 0 && (s.phi - 0.12).abs() < 1e-15, "20th trigger gave phi {}", s.phi);
    let near_top = MixState { phi: 0.85, ..MixState::new(cfg) };
    let mut top = near_top;
    for _ in 0..20 {
        top = scheduler_update(trig, top);
    }
    ensure!(top.phi == 0.9, "clamp gave {}", top.phi);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fired = 0;
    for _ in 0..200 {
        let mut s = MixState::new(cfg);
        for _ in 0..400 {
            let u = rng.random_range(0.0..3.0);
            let r = UncertaintyReading::new(u, u * rng.random_range(0.9..1.1)).unwrap();
            let next = scheduler_update(r, s);
            ensure!(next == scheduler_update(r, s), "update is not pure");
            ensure!(next.phi >= s.phi, "phi decreased {} -> {}", s.phi, next.phi);
            ensure!((0.1..=0.9).contains(&next.phi), "phi {} out of bounds", next.phi);
            if next.phi != s.phi {
                fired += 1;
                ensure!(s.streak == cfg.n - 1 && r.triggers(cfg.k), "fired at streak {}", s.streak + 1);
                let expect = (s.phi * cfg.alpha).min(0.9);
                ensure!(next.phi == expect, "growth {} -> {}", s.phi, next.phi);
            }
            s = next;
        }
    }
    Ok(format!("{fired} firings across 80000 random readings"))
}

/// Levenshtein distance by plain recursion with memoization.
pub fn edit_distance(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(d) = memo[i][j] {
            return d;
        }
        let d = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else {
            let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
            let del = go(a, b, i + 1, j, memo) + 1;
            let ins = go(a, b, i, j + 1, memo) + 1;
            sub.min(del).min(ins)
        };
        memo[i][j] = Some(d);
        d
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}

pub fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize, alphabet: u8, min_len: usize) -> Vec<u8> {
    let n = rng.random_range(min_len..=max_len);
    (0..n).map(|_| rng.random_range(0..alphabet)).collect()
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

pub fn metrics() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000 {
        let r = random_tokens(&mut rng, 12, 4, 1);
        let h = random_tokens(&mut rng, 12, 4, 0);
        let (w, counts) = wer(&r, &h).unwrap();
        let d = edit_distance(&r, &h);
        ensure!(counts.errors() == d, "pair {i} {r:?} / {h:?}: {} edits, oracle {d}", counts.errors());
        ensure!(w == d as f64 / r.len() as f64, "pair {i}: WER {w}");
        ensure!(
            counts.substitutions + counts.deletions == r.len() - counts.matches(),
            "pair {i}: inconsistent counts {counts:?}"
        );
    }

    let sents: Vec<Vec<u8>> = (0..30).map(|_| random_tokens(&mut rng, 15, 6, 1)).collect();
    ensure!(corpus_bleu(&sents, &sents).unwrap() == 100.0, "identity BLEU is not 100");

    let r = vec![words("the cat sat on the mat")];
    let h = vec![words("the cat sat on a mat")];
    let stats = corpus_bleu_stats(&r, &h).unwrap();
    ensure!(stats.matches == [5, 3, 2, 1] && stats.totals == [6, 5, 4, 3], "counts {stats:?}");
    let expect = 100.0 * (5.0 / 6.0 * 3.0 / 5.0 * 2.0 / 4.0 * 1.0 / 3.0f64).powf(0.25);
    ensure!(stats.score() == expect, "score {} vs {expect}", stats.score());
    let clipped = corpus_bleu_stats(&r, &[words("the the the the the the the")]).unwrap();
    ensure!(clipped.matches[0] == 2 && clipped.totals[0] == 7, "clipping {clipped:?}");

    for _ in 0..50 {
        let refs: Vec<Vec<u8>> = (0..10).map(|_| random_tokens(&mut rng, 10, 3, 1)).collect();
        let hyps: Vec<Vec<u8>> = (0..10).map(|_| random_tokens(&mut rng, 10, 3, 0)).collect();
        let base = corpus_bleu(&refs, &hyps).unwrap();
        ensure!((0.0..=100.0).contains(&base), "BLEU {base} out of range");
        let mut idx: Vec<usize> = (0..10).collect();
        idx.shuffle(&mut rng);
        let pr: Vec<Vec<u8>> = idx.iter().map(|&i| refs[i].clone()).collect();
        let ph: Vec<Vec<u8>> = idx.iter().map(|&i| hyps[i].clone()).collect();
        ensure!(corpus_bleu(&pr, &ph).unwrap() == base, "BLEU changed under sentence permutation");
    }
    Ok(format!("1000 WER pairs exact, hand BLEU {expect:.4}"))
}
