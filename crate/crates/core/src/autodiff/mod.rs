//! Reverse-mode automatic differentiation on dense `f64` tensors.

mod adam;
pub(crate) mod gemm;
mod graph;
mod params;
mod tensor;

pub use adam::{warmup_lr, Adam, AdamConfig};
pub use graph::{softmax_in_place, AttentionSpec, Graph, Segment, Var, LOG_FLOOR};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("attention: {0}")]
    InvalidAttention(String),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("optimizer state: {0}")]
    OptimizerState(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]));
        let out = g.matmul(i, m).unwrap();
        assert_eq!(g.value(out).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 4]));
        let s = g.softmax_rows(a);
        assert_eq!(g.value(s).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 3, vec![1000.0, 1000.0, -1000.0]));
        let s = g.softmax_rows(a);
        let v = g.value(s).data();
        assert!((v[0] - 0.5).abs() < 1e-12 && v[2] >= 0.0);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn independent_leaf_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(2.0));
        let q = store.add("q", Tensor::scalar(5.0));
        let mut g = Graph::new();
        let pv = g.param(&store, p);
        let _qv = g.param(&store, q);
        let loss = g.sum_all(pv);
        g.backward(loss).unwrap();
        store.zero_grads();
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.grad(q).unwrap().data(), &[0.0]);
        assert_eq!(store.grad(p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(AutodiffError::NotScalar { .. })));
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.5));
        let y = g.scale(x, 2.0);
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn log_is_floored() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 2, vec![0.0, 1.0]));
        let l = g.log(x);
        assert_eq!(g.value(l).data()[0], LOG_FLOOR.ln());
        let s = g.sum_all(l);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn add_broadcasts_over_leading_axes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[3, 2]));
        let b = g.input(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1., -1., 1., -1., 1., -1.]);
        let s = g.sum_all(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[3.0, 3.0]);
        let bad = g.input(Tensor::zeros(&[3]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let mut g = Graph::new();
        let t = g.input(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            g.embed(t, &[1, 4]),
            Err(AutodiffError::IndexOutOfRange { op: "embed", .. })
        ));
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut g = Graph::new();
        let q = g.input(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]));
        let k = g.input(Tensor::matrix(2, 2, vec![0.5, 0.5, 3.0, -1.0]));
        let v = g.input(Tensor::matrix(2, 2, vec![7., 8., 9., 10.]));
        let spec = AttentionSpec {
            heads: 1,
            causal: true,
            segments: vec![Segment {
                q_start: 0,
                q_len: 2,
                k_start: 0,
                k_len: 2,
            }],
        };
        let out = g.attention(q, k, v, &spec).unwrap();
        assert_eq!(g.value(out).row(0), &[7.0, 8.0]);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]));
        let mut opt = Adam::new(AdamConfig::default(), &store);
        store.zero_grads();
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.value(p).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m = 0.1, v = 0.02 * 1; bias-corrected mhat = 1, vhat = 1 => step = lr / (1 + eps)
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::scalar(1.0));
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut opt = Adam::new(cfg, &store);
        store.zero_grads();
        store.accumulate_grad(p, &[1.0]);
        opt.step(&mut store, cfg.lr).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((store.value(p).item() - expected).abs() < 1e-15);
        assert_eq!(store.grad(p).unwrap().data(), &[1.0]);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn adam_requires_gradients() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0));
        let mut opt = Adam::new(AdamConfig::default(), &store);
        assert!(matches!(opt.step(&mut store, 0.1), Err(AutodiffError::MissingGrad(_))));
    }

    #[test]
    fn warmup_ramps_linearly() {
        assert_eq!(warmup_lr(1.0, 0, 4), 0.25);
        assert_eq!(warmup_lr(1.0, 3, 4), 1.0);
        assert_eq!(warmup_lr(1.0, 10, 4), 1.0);
        assert_eq!(warmup_lr(1.0, 0, 0), 1.0);
    }
}
