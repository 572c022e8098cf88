//! Backprop against central differences on a small causal attention block.

use mixspeech::autodiff::{AttentionSpec, Graph, Segment, Tensor};

const H: f64 = 1e-5;

/// Loss value and its gradient with respect to `w`.
fn loss(x: &Tensor, w: &Tensor) -> (f64, Tensor) {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.input(w.clone());
    let q = g.matmul(xv, wv).unwrap();
    let spec = AttentionSpec {
        heads: 2,
        causal: true,
        segments: vec![Segment {
            q_start: 0,
            q_len: 3,
            k_start: 0,
            k_len: 3,
        }],
    };
    let att = g.attention(q, xv, xv, &spec).unwrap();
    let t = g.tanh(att);
    let l = g.mean_all(t);
    g.backward(l).unwrap();
    (g.value(l).item(), g.grad(wv).unwrap())
}

fn main() {
    let x = Tensor::matrix(3, 4, (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect());
    let w = Tensor::matrix(4, 4, (0..16).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.2).collect());
    let (_, analytic) = loss(&x, &w);

    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let mut up = w.clone();
        up.data_mut()[i] += H;
        let mut down = w.clone();
        down.data_mut()[i] -= H;
        let numeric = (loss(&x, &up).0 - loss(&x, &down).0) / (2.0 * H);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        println!("dL/dw[{i:2}]  backprop {a:+.8}  numeric {numeric:+.8}");
    }
    println!("max relative error {worst:.2e}");
}
