use std::sync::Arc;

use super::gemm::{gemm, View, ViewMut};
use super::{AutodiffError, ParamId, ParamStore, Tensor};

/// Inputs to `log` are clamped from below to this value.
pub const LOG_FLOOR: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention block: query rows `q_start..q_start+q_len` attend to key
/// rows `k_start..k_start+k_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Query `i` may only see keys `0..=i` of its segment.
    pub causal: bool,
    pub segments: Vec<Segment>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    Embed(Var, Vec<usize>),
    Concat(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    Pick(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. A graph is built for a single training step and then dropped.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
    param_lookup: Vec<Option<Var>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a parameter as a leaf. Repeated calls with the same id
    /// return the same node, so every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_lookup.get(id.index()) {
            return *v;
        }
        let var = self.push_shared(store.shared(id), Op::Leaf, true);
        if self.param_lookup.len() <= id.index() {
            self.param_lookup.resize(id.index() + 1, None);
        }
        self.param_lookup[id.index()] = Some(var);
        self.params.push((id, var));
        var
    }

    /// Parameters registered so far, in registration order.
    pub fn registered_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.iter().map(|(id, _)| *id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into `v` by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient shaped like value")
        })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let (x, y) = (self.value(a), self.value(b));
        let data: Vec<f64> = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::dense(self.value(a).data(), k),
            View::dense(self.value(b).data(), n),
            0.0,
            ViewMut::dense(&mut out, n),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    /// Elementwise sum. `b` may also match only the trailing axes of `a`,
    /// in which case it is broadcast over the leading ones.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return self.binary_same("add", a, b, Op::Add(a, b), |p, q| p + q);
        }
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(self.mismatch("add", a, b));
        }
        let x = self.value(a);
        let y = self.value(b).data();
        let w = y.len();
        let data: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + y[i % w])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same("sub", a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same("mul", a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log of `max(x, LOG_FLOOR)`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |v| v.max(LOG_FLOOR).ln())
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(AutodiffError::InvalidShape {
                shape: t.shape().to_vec(),
            });
        }
        if ids.is_empty() {
            return Err(AutodiffError::InvalidShape { shape: vec![0, t.cols()] });
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "embed",
                    index: id,
                    bound: vocab,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), dim, data),
            Op::Embed(table, ids.to_vec()),
            rg,
        ))
    }

    /// Concatenates along the last axis; all other axes must agree.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(self.mismatch("concat_features", a, b));
        }
        let (x, y) = (self.value(a), self.value(b));
        let (ca, cb) = (x.cols(), y.cols());
        let mut data = Vec::with_capacity(x.len() + y.len());
        for r in 0..x.rows() {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("non-empty") = ca + cb;
        let rg = self.rg(a) || self.rg(b);
        let out = Tensor::new(shape, data).expect("concat shape");
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Selects `x[r, ids[r]]` for every row, producing a `[rows, 1]` column.
    pub fn pick(&mut self, a: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        if ids.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "pick",
                left: x.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &id) in ids.iter().enumerate() {
            if id >= cols {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "pick",
                    index: id,
                    bound: cols,
                });
            }
            data.push(x.at(r, id));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(rows, 1, data), Op::Pick(a, ids.to_vec()), rg))
    }

    /// Row-wise layer normalization with learned gain and bias over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
        let cols = self.value(x).cols();
        if self.shape(gain) != [cols] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.shape(bias) != [cols] {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[c] + b[c]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over independent segments.
    ///
    /// `q` is `[nq, h]`; `k` and `v` are `[nk, h]`. Head `j` uses columns
    /// `j*h/heads..(j+1)*h/heads`. Query rows outside every segment produce
    /// zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
    ) -> Result<Var, AutodiffError> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
            return Err(self.mismatch("attention", q, k));
        }
        if sv != sk {
            return Err(self.mismatch("attention", k, v));
        }
        let (nq, h, nk) = (sq[0], sq[1], sk[0]);
        if spec.heads == 0 || h % spec.heads != 0 {
            return Err(AutodiffError::InvalidAttention(format!(
                "model dim {h} not divisible by {} heads",
                spec.heads
            )));
        }
        for s in &spec.segments {
            if s.q_len == 0 || s.k_len == 0 || s.q_start + s.q_len > nq || s.k_start + s.k_len > nk {
                return Err(AutodiffError::InvalidAttention(format!(
                    "segment {s:?} out of bounds for {nq} queries / {nk} keys"
                )));
            }
            if spec.causal && s.q_len != s.k_len {
                return Err(AutodiffError::InvalidAttention(
                    "causal segments need equal query and key lengths".into(),
                ));
            }
        }
        let dh = h / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; nq * h];
        let total: usize = spec.segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * spec.heads;
        let mut probs = vec![0.0; total];
        let mut off = 0;
        for s in &spec.segments {
            for head in 0..spec.heads {
                let p = &mut probs[off..off + s.q_len * s.k_len];
                gemm(
                    s.q_len,
                    dh,
                    s.k_len,
                    scale,
                    View::block(qd, s.q_start * h + head * dh, h),
                    View::block(kd, s.k_start * h + head * dh, h).t(),
                    0.0,
                    ViewMut::dense(p, s.k_len),
                );
                for (i, row) in p.chunks_mut(s.k_len).enumerate() {
                    if spec.causal {
                        softmax_in_place(&mut row[..=i]);
                        row[i + 1..].fill(0.0);
                    } else {
                        softmax_in_place(row);
                    }
                }
                gemm(
                    s.q_len,
                    s.k_len,
                    dh,
                    1.0,
                    View::dense(p, s.k_len),
                    View::block(vd, s.k_start * h + head * dh, h),
                    0.0,
                    ViewMut::block(&mut out, s.q_start * h + head * dh, h),
                );
                off += s.q_len * s.k_len;
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::matrix(nq, h, out),
            Op::Attention {
                q,
                k,
                v,
                spec: spec.clone(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        // Interior gradients are per-sweep; only leaves accumulate across calls.
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *grad = None;
            }
        }
        accumulate(&mut self.grads[loss.0], &[1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(idx, &g);
            self.grads[idx] = Some(g);
            for (var, delta) in contributions {
                if self.nodes[var.0].requires_grad {
                    accumulate(&mut self.grads[var.0], &delta);
                }
            }
        }
        Ok(())
    }

    /// Adds the gradient of every registered parameter into the store.
    /// Registered parameters the loss does not reach receive zeros.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            match &self.grads[var.0] {
                Some(g) => store.accumulate_grad(id, g),
                None => store.accumulate_grad(id, &vec![0.0; self.value(var).len()]),
            }
        }
    }

    fn node_backward(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut out = Vec::new();
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        View::dense(g, n),
                        View::dense(bv.data(), n).t(),
                        0.0,
                        ViewMut::dense(&mut da, k),
                    );
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        View::dense(av.data(), k).t(),
                        View::dense(g, n),
                        0.0,
                        ViewMut::dense(&mut db, n),
                    );
                    out.push((*b, db));
                }
                out
            }
            Op::Add(a, b) => {
                let mut out = vec![(*a, g.to_vec())];
                if self.rg(*b) {
                    let w = self.value(*b).len();
                    if w == g.len() {
                        out.push((*b, g.to_vec()));
                    } else {
                        let mut db = vec![0.0; w];
                        for chunk in g.chunks(w) {
                            for (d, x) in db.iter_mut().zip(chunk) {
                                *d += x;
                            }
                        }
                        out.push((*b, db));
                    }
                }
                out
            }
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(av).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::Tanh(a) => vec![(*a, g.iter().zip(y).map(|(d, t)| d * (1.0 - t * t)).collect())],
            Op::Relu(a) => {
                let x = self.value(*a).data();
                vec![(
                    *a,
                    g.iter().zip(x).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 }).collect(),
                )]
            }
            Op::Exp(a) => vec![(*a, g.iter().zip(y).map(|(d, e)| d * e).collect())],
            Op::Log(a) => {
                let x = self.value(*a).data();
                vec![(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(d, &v)| if v > LOG_FLOOR { d / v } else { 0.0 })
                        .collect(),
                )]
            }
            Op::SoftmaxRows(a) => {
                let cols = node.value.cols();
                let mut da = vec![0.0; g.len()];
                for ((dr, gr), yr) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![(*a, da)]
            }
            Op::Embed(table, ids) => {
                let t = self.value(*table);
                let dim = t.cols();
                let mut dt = vec![0.0; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (d, x) in dt[id * dim..(id + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                        *d += x;
                    }
                }
                vec![(*table, dt)]
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let mut da = Vec::with_capacity(self.value(*a).len());
                let mut db = Vec::with_capacity(self.value(*b).len());
                for row in g.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::SumAll(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Pick(a, ids) => {
                let x = self.value(*a);
                let cols = x.cols();
                let mut da = vec![0.0; x.len()];
                for (r, &id) in ids.iter().enumerate() {
                    da[r * cols + id] += g[r];
                }
                vec![(*a, da)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = node.value.cols();
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for c in 0..cols {
                        let d = gr[c] * gv[c];
                        mean_d += d;
                        mean_dh += d * hr[c];
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                    }
                    mean_d /= cols as f64;
                    mean_dh /= cols as f64;
                    for c in 0..cols {
                        let d = gr[c] * gv[c];
                        dx[r * cols + c] = is * (d - mean_d - hr[c] * mean_dh);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Attention { q, k, v, spec, probs } => self.attention_backward(*q, *k, *v, spec, probs, g),
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        g: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let h = self.value(q).cols();
        let dh = h / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut off = 0;
        for s in &spec.segments {
            let mut dp = vec![0.0; s.q_len * s.k_len];
            for head in 0..spec.heads {
                let p = &probs[off..off + s.q_len * s.k_len];
                let qo = s.q_start * h + head * dh;
                let ko = s.k_start * h + head * dh;
                // dP = dO V^T
                gemm(
                    s.q_len,
                    dh,
                    s.k_len,
                    1.0,
                    View::block(g, qo, h),
                    View::block(vd, ko, h).t(),
                    0.0,
                    ViewMut::dense(&mut dp, s.k_len),
                );
                // dV += P^T dO
                gemm(
                    s.k_len,
                    s.q_len,
                    dh,
                    1.0,
                    View::dense(p, s.k_len).t(),
                    View::block(g, qo, h),
                    1.0,
                    ViewMut::block(&mut dv, ko, h),
                );
                // dS = P * (dP - rowsum(dP * P))
                for (dr, pr) in dp.chunks_mut(s.k_len).zip(p.chunks(s.k_len)) {
                    let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (d, pi) in dr.iter_mut().zip(pr) {
                        *d = pi * (*d - dot);
                    }
                }
                gemm(
                    s.q_len,
                    s.k_len,
                    dh,
                    scale,
                    View::dense(&dp, s.k_len),
                    View::block(kd, ko, h),
                    1.0,
                    ViewMut::block(&mut dq, qo, h),
                );
                gemm(
                    s.k_len,
                    s.q_len,
                    dh,
                    scale,
                    View::dense(&dp, s.k_len).t(),
                    View::block(qd, qo, h),
                    1.0,
                    ViewMut::block(&mut dk, ko, h),
                );
                off += s.q_len * s.k_len;
            }
        }
        vec![(q, dq), (k, dk), (v, dv)]
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

/// Numerically stable softmax with row-max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
