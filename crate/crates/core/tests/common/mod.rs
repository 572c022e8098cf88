//! Independent oracles shared by the integration tests and the acceptance
//! harness: central finite differences, a randomized graph generator over
//! every primitive, and a tiny full-model loss.
#![allow(dead_code)]

pub mod suites;

use std::path::Path;

use mixspeech::autodiff::{AttentionSpec, Graph, Segment, Tensor, Var};
use mixspeech::corpus::{CorpusSpec, BOS, EOS};
use mixspeech::losses::{cross_entropy, jsd_loss, total_loss, LossWeights};
use mixspeech::model::{FrameBatch, Model, ModelConfig, TargetBatch};
use mixspeech::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` with respect to every coordinate of `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

const R: usize = 4;
const C: usize = 4;
const VOCAB: usize = 5;
pub const OP_KINDS: usize = 17;

/// A random composition of primitives over a fixed set of leaves.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    leaves: Vec<Tensor>,
    ops: Vec<(usize, usize, usize, usize)>,
    ids: Vec<usize>,
    picks: Vec<usize>,
    weights: Tensor,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            z * scale
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = vec![
            randn(&mut rng, &[R, C], 1.0),
            randn(&mut rng, &[R, C], 1.0),
            randn(&mut rng, &[R, C], 1.0),
            randn(&mut rng, &[C, C], 0.5),
            randn(&mut rng, &[2 * C, C], 0.5),
            randn(&mut rng, &[C], 1.0),
            randn(&mut rng, &[C], 1.0),
            randn(&mut rng, &[C], 0.3),
            randn(&mut rng, &[VOCAB, C], 1.0),
            randn(&mut rng, &[1, C], 1.0),
        ];
        let n_ops = rng.random_range(4..=8);
        // every kind appears across the suite: the first op cycles through them
        let mut ops = vec![((seed as usize) % OP_KINDS, 0, 1, 2)];
        for _ in 1..n_ops {
            ops.push((rng.random_range(0..OP_KINDS), rng.random_range(0..64), rng.random_range(0..64), rng.random_range(0..64)));
        }
        let ids = (0..R).map(|_| rng.random_range(0..VOCAB)).collect();
        let picks = (0..R).map(|_| rng.random_range(0..C)).collect();
        let weights = randn(&mut rng, &[R, C], 1.0);
        Self {
            leaves,
            ops,
            ids,
            picks,
            weights,
        }
    }

    pub fn leaves(&self) -> &[Tensor] {
        &self.leaves
    }

    pub fn kinds(&self) -> Vec<usize> {
        self.ops.iter().map(|o| o.0).collect()
    }

    /// Records the graph on `g` from the given leaf values and returns
    /// `(leaf vars, scalar loss)`.
    pub fn build(&self, g: &mut Graph, leaves: &[Tensor]) -> (Vec<Var>, Var) {
        let vars: Vec<Var> = leaves.iter().map(|t| g.input(t.clone())).collect();
        let (w, wc, bias, gain, ln_bias, table, proj) = (vars[3], vars[4], vars[5], vars[6], vars[7], vars[8], vars[9]);
        let mut pool = vec![vars[0], vars[1], vars[2]];
        for &(kind, a, b, c) in &self.ops {
            let n = pool.len();
            let (a, b, c) = (pool[a % n], pool[b % n], pool[c % n]);
            let out = match kind {
                0 => g.tanh(a),
                1 => g.relu(a),
                2 => {
                    let t = g.tanh(a);
                    let t = g.scale(t, 0.5);
                    g.exp(t)
                }
                3 => {
                    let s = g.softmax_rows(a);
                    g.log(s)
                }
                4 => g.softmax_rows(a),
                5 => g.add(a, b).unwrap(),
                6 => g.sub(a, b).unwrap(),
                7 => g.mul(a, b).unwrap(),
                8 => g.add(a, bias).unwrap(),
                9 => g.matmul(a, w).unwrap(),
                10 => {
                    let cat = g.concat_features(a, b).unwrap();
                    g.matmul(cat, wc).unwrap()
                }
                11 => g.layer_norm(a, gain, ln_bias).unwrap(),
                12 | 13 => {
                    let causal = kind == 13;
                    let segments = if causal {
                        vec![seg(0, 1, 0, 1), seg(1, 3, 1, 3)]
                    } else {
                        vec![seg(0, 2, 0, 3), seg(2, 2, 1, 3)]
                    };
                    let spec = AttentionSpec {
                        heads: 2,
                        causal,
                        segments,
                    };
                    g.attention(a, b, c, &spec).unwrap()
                }
                14 => {
                    let e = g.embed(table, &self.ids).unwrap();
                    g.mul(e, a).unwrap()
                }
                15 => {
                    let s = g.softmax_rows(a);
                    let p = g.pick(s, &self.picks).unwrap();
                    g.matmul(p, proj).unwrap()
                }
                _ => g.scale(a, -1.7),
            };
            pool.push(out);
        }
        let last = *pool.last().unwrap();
        let k = g.constant(self.weights.clone());
        let weighted = g.mul(last, k).unwrap();
        let main = g.sum_all(weighted);
        let sq = g.mul(pool[pool.len() - 2], pool[pool.len() - 2]).unwrap();
        let side = g.mean_all(sq);
        let loss = g.add(main, side).unwrap();
        (vars, loss)
    }

    pub fn loss_at(&self, leaves: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let (_, loss) = self.build(&mut g, leaves);
        g.value(loss).item()
    }

    /// Largest relative error between backprop and finite differences over
    /// every leaf coordinate.
    pub fn max_rel_error(&self) -> f64 {
        let mut g = Graph::new();
        let (vars, loss) = self.build(&mut g, &self.leaves);
        g.backward(loss).unwrap();
        let mut worst: f64 = 0.0;
        for (li, var) in vars.iter().enumerate() {
            let analytic = g.grad(*var).unwrap_or_else(|| Tensor::zeros(self.leaves[li].shape()));
            let numeric = numeric_grad(self.leaves[li].data(), |x| {
                let mut probe = self.leaves.clone();
                probe[li] = Tensor::new(self.leaves[li].shape().to_vec(), x.to_vec()).unwrap();
                self.loss_at(&probe)
            });
            for (a, n) in analytic.data().iter().zip(&numeric) {
                worst = worst.max(rel_error(*a, *n));
            }
        }
        worst
    }
}

fn seg(q_start: usize, q_len: usize, k_start: usize, k_len: usize) -> Segment {
    Segment {
        q_start,
        q_len,
        k_start,
        k_len,
    }
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 3,
        model_dim: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        attention_heads: 2,
        ffn_dim: 12,
        max_positions: 32,
        tgt_vocab: 11,
    }
}

/// Inputs for the full-model check: a two-utterance uni batch, a mixed
/// batch with the same lengths and the shared targets.
pub struct TinyBatch {
    pub uni: FrameBatch,
    pub mixed: FrameBatch,
    pub targets: TargetBatch,
}

pub fn tiny_batch(seed: u64) -> TinyBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = |rows: usize| randn(&mut rng, &[rows, 6], 1.0);
    let uni = FrameBatch::stack(&[frames(5), frames(3)]).unwrap();
    let mixed = FrameBatch::stack(&[frames(5), frames(3)]).unwrap();
    let targets = TargetBatch::from_sequences([[BOS, 3, 7, 4, EOS].as_slice(), [BOS, 9, EOS].as_slice()]).unwrap();
    TinyBatch { uni, mixed, targets }
}

/// `CE_uni + CE_mix + JSD` through the whole network.
pub fn tiny_model_loss(g: &mut Graph, model: &Model, batch: &TinyBatch) -> Var {
    let pu = model.forward(g, &batch.uni, &batch.targets).unwrap();
    let pm = model.forward(g, &batch.mixed, &batch.targets).unwrap();
    let ce_uni = cross_entropy(g, pu.var, &batch.targets.targets).unwrap();
    let ce_mix = cross_entropy(g, pm.var, &batch.targets.targets).unwrap();
    let jsd = jsd_loss(g, pm.var, pu.var).unwrap();
    total_loss(g, ce_uni, Some(ce_mix), Some(jsd), &LossWeights::default()).unwrap()
}

/// Max relative error over every parameter scalar of the tiny model.
pub fn tiny_model_max_rel_error(seed: u64) -> f64 {
    let mut model = Model::new(tiny_model_config(), seed).unwrap();
    let batch = tiny_batch(seed);
    let mut g = Graph::new();
    let loss = tiny_model_loss(&mut g, &model, &batch);
    g.backward(loss).unwrap();
    model.params_mut().zero_grads();
    g.accumulate_param_grads(model.params_mut());
    let ids: Vec<_> = model.params().ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = model.params().grad(id).unwrap().data().to_vec();
        let base = model.params().value(id).data().to_vec();
        let numeric = numeric_grad(&base, |x| {
            let mut probe = model.clone();
            probe.params_mut().value_mut(id).data_mut().copy_from_slice(x);
            let mut g = Graph::new();
            let loss = tiny_model_loss(&mut g, &probe, &batch);
            g.value(loss).item()
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_error(*a, *n));
        }
    }
    worst
}

/// A corpus small enough to train on in well under a second.
pub fn small_spec() -> CorpusSpec {
    CorpusSpec {
        n_phonemes: 8,
        n_visemes: 3,
        tgt_vocab: 14,
        frames_per_token: 2,
        feature_dim: 4,
        min_len: 2,
        max_len: 5,
        n_train: 24,
        n_valid: 6,
        n_test: 6,
        ..CorpusSpec::default()
    }
}

pub fn small_config(corpus_dir: &Path) -> TrainConfig {
    TrainConfig {
        corpus_dir: corpus_dir.to_path_buf(),
        model: ModelConfig {
            feature_dim: 4,
            model_dim: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            attention_heads: 2,
            ffn_dim: 24,
            max_positions: 16,
            tgt_vocab: 14,
        },
        stage1_steps: 30,
        stage2_steps: 20,
        batch_size: 4,
        eval_every: 10,
        ..TrainConfig::default()
    }
}

/// Every parameter value in store order.
pub fn param_values(model: &Model) -> Vec<Vec<f64>> {
    let p = model.params();
    p.ids().map(|id| p.value(id).data().to_vec()).collect()
}
