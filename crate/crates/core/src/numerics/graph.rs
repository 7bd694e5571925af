//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly; [`Graph::backward`] then walks the tape in reverse and
//! applies each op's vector-Jacobian product. Graphs are cheap and meant to
//! be built per example and dropped.
//!
//! Shape errors inside the tape are programming errors and panic; the model
//! layers validate user-facing shapes before building graphs.

use std::collections::HashMap;

use super::linalg::{gemm, log_sum_exp, softmax_in_place};
use super::params::{GradBuffer, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::ctc;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Silu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    LogSoftmax(Var),
    Softmax(Var),
    Rope { x: Var, cos: Vec<f64>, sin: Vec<f64>, n_heads: usize },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, probs: Vec<f64> },
    Unfold { x: Var, kernel: usize, stride: usize, pad: usize },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    BroadcastRows(Var),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Ctc { x: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        let t = as_matrix(t);
        self.push(t, Op::Input, false)
    }

    /// Free variable whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let t = as_matrix(t);
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = as_matrix(self.params.get(id).clone());
        let v = self.push(t, Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(mat(m, n, out), Op::MatMul(a, b), rg)
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b);
        assert_eq!(
            (ta.rows(), ta.cols()),
            (tb.rows(), tb.cols()),
            "elementwise shape mismatch"
        );
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        mat(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.elementwise(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.elementwise(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.elementwise(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tr = self.value(row);
        assert_eq!(tr.len(), ta.cols(), "row broadcast width mismatch");
        let cols = ta.cols();
        let r = tr.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, r[i % cols]))
            .collect();
        mat(ta.rows(), cols, data)
    }

    /// `a[m, n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let t = self.row_broadcast(a, row, |x, y| x + y);
        let rg = self.rg(a) || self.rg(row);
        self.push(t, Op::AddRow(a, row), rg)
    }

    /// `a[m, n] * row[n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let t = self.row_broadcast(a, row, |x, y| x * y);
        let rg = self.rg(a) || self.rg(row);
        self.push(t, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddConst(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(t, Op::Silu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(t, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean squared difference between two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(ta.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in ta.iter_rows() {
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            out.extend(row.iter().map(|x| (x - mu) * r));
            rstd.push(r);
        }
        let rg = self.rg(a);
        self.push(mat(rows, cols, out), Op::LayerNorm { x: a, rstd }, rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(ta.len());
        for row in ta.iter_rows() {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|x| x - lse));
        }
        let rg = self.rg(a);
        self.push(mat(rows, cols, out), Op::LogSoftmax(a), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(mat(rows, cols, out), Op::Softmax(a), rg)
    }

    /// Rotary encoding applied independently to each of `n_heads` column
    /// blocks, row `i` rotated at `positions[i]`.
    pub fn rope(&mut self, a: Var, positions: &[f64], n_heads: usize, base: f64) -> Var {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        assert_eq!(positions.len(), rows, "one position per row");
        assert!(n_heads > 0 && cols % n_heads == 0, "cols divisible by heads");
        let head_dim = cols / n_heads;
        assert!(head_dim % 2 == 0, "rope needs an even head dimension");
        let (cos, sin) = super::rope::rope_tables(positions, head_dim, base);
        let half = head_dim / 2;
        let mut out = ta.data().to_vec();
        for r in 0..rows {
            for h in 0..n_heads {
                let base_col = r * cols + h * head_dim;
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let x0 = out[base_col + 2 * i];
                    let x1 = out[base_col + 2 * i + 1];
                    out[base_col + 2 * i] = x0 * c - x1 * s;
                    out[base_col + 2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
        let rg = self.rg(a);
        self.push(
            mat(rows, cols, out),
            Op::Rope {
                x: a,
                cos,
                sin,
                n_heads,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention, `softmax(QKᵀ/√d_head)·V`
    /// per head. Positional rotation is applied by the caller.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Var {
        let (lq, d) = self.shape(q);
        let (lk, dk) = self.shape(k);
        let (lv, dv) = self.shape(v);
        assert_eq!(d, dk, "query/key width");
        assert_eq!(lk, lv, "key/value length");
        assert!(lk > 0, "attention over an empty key sequence");
        assert!(d % n_heads == 0 && dv % n_heads == 0, "width divisible by heads");
        let dh = d / n_heads;
        let dvh = dv / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; n_heads * lq * lk];
        let mut out = vec![0.0; lq * dv];
        let mut oh = vec![0.0; lq * dvh];
        for h in 0..n_heads {
            let qh = take_cols(self.data(q), lq, d, h * dh, dh);
            let kh = take_cols(self.data(k), lk, d, h * dh, dh);
            let vh = take_cols(self.data(v), lk, dv, h * dvh, dvh);
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            gemm(lq, dh, lk, &qh, false, &kh, true, p, false);
            for row in p.chunks_mut(lk) {
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(row);
            }
            gemm(lq, lk, dvh, p, false, &vh, false, &mut oh, false);
            put_cols(&mut out, lq, dv, h * dvh, dvh, &oh, false);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            mat(lq, dv, out),
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                probs,
            },
            rg,
        )
    }

    /// Sliding windows of `kernel` rows with the given stride; row `j` of
    /// the output concatenates input rows `j·stride − pad + 0..kernel`
    /// (zeros outside the input). Produces `out_len` rows.
    pub fn unfold(&mut self, a: Var, kernel: usize, stride: usize, pad: usize, out_len: usize) -> Var {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; out_len * kernel * cols];
        for j in 0..out_len {
            for kk in 0..kernel {
                let src = (j * stride + kk) as isize - pad as isize;
                if src < 0 || src as usize >= rows {
                    continue;
                }
                let dst = j * kernel * cols + kk * cols;
                out[dst..dst + cols].copy_from_slice(ta.row(src as usize));
            }
        }
        let rg = self.rg(a);
        self.push(
            mat(out_len, kernel * cols, out),
            Op::Unfold {
                x: a,
                kernel,
                stride,
                pad,
            },
            rg,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ra, rb, "concat_cols row mismatch");
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(self.value(a).row(r));
            out.extend_from_slice(self.value(b).row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(mat(ra, ca + cb, out), Op::ConcatCols(a, b), rg)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, cb, "concat_rows col mismatch");
        let mut out = self.data(a).to_vec();
        out.extend_from_slice(self.data(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(mat(ra + rb, ca, out), Op::ConcatRows(a, b), rg)
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rows(), 1, "broadcast_rows expects one row");
        let cols = ta.cols();
        let out = ta.data().repeat(rows);
        let rg = self.rg(a);
        self.push(mat(rows, cols, out), Op::BroadcastRows(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(start + len <= cols, "slice_cols out of range");
        let out = take_cols(self.data(a), rows, cols, start, len);
        let rg = self.rg(a);
        self.push(mat(rows, len, out), Op::SliceCols { x: a, start }, rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a).clone().reshape(vec![rows, cols]).expect("reshape size");
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// CTC negative log-likelihood of `labels` under the per-frame
    /// log-probabilities `logp[T, V]`. Infeasible targets give `+inf`.
    pub fn ctc_loss(&mut self, logp: Var, labels: &[usize]) -> Var {
        let lattice = ctc::LogProbLattice::from_tensor_unchecked(self.value(logp).clone());
        let result = ctc::ctc_loss(&lattice, labels);
        let rg = self.rg(logp);
        self.push(
            Tensor::scalar(result.loss),
            Op::Ctc {
                x: logp,
                grad: result.gradient.into_data(),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let root = &self.nodes[out.0];
        if root.value.len() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        if !root.value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        let mut params: Vec<(ParamId, Var)> =
            self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort_by_key(|&(id, _)| id);
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match node.op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(a);
                let (_, n) = self.shape(b);
                if let Some(ga) = self.acc(grads, a) {
                    gemm(m, n, k, g, false, self.data(b), true, ga, true);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gemm(k, m, n, self.data(a), true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        axpy(gv, g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.acc(grads, b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(self.data(b)) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(self.data(a)) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, g, 1.0);
                }
                let cols = node.value.cols();
                if let Some(gr) = self.acc(grads, row) {
                    for chunk in g.chunks(cols) {
                        axpy(gr, chunk, 1.0);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let cols = node.value.cols();
                let r = self.data(row);
                if let Some(ga) = self.acc(grads, a) {
                    for (i, (o, gi)) in ga.iter_mut().zip(g).enumerate() {
                        *o += gi * r[i % cols];
                    }
                }
                let ad = self.data(a);
                if let Some(gr) = self.acc(grads, row) {
                    for (i, gi) in g.iter().enumerate() {
                        gr[i % cols] += gi * ad[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, g, c);
                }
            }
            Op::AddConst(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, g, 1.0);
                }
            }
            Op::Silu(a) => {
                let x = self.data(a);
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        let s = sigmoid(xi);
                        *o += gi * s * (1.0 + xi * (1.0 - s));
                    }
                }
            }
            Op::Square(a) => {
                let x = self.data(a);
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += 2.0 * gi * xi;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::LayerNorm { x, ref rstd } => {
                let cols = node.value.cols();
                if let Some(gx) = self.acc(grads, x) {
                    for (r, ((gy, yy), gxr)) in g
                        .chunks(cols)
                        .zip(y.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                        .enumerate()
                    {
                        let mean_g = gy.iter().sum::<f64>() / cols as f64;
                        let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for ((o, gi), yi) in gxr.iter_mut().zip(gy).zip(yy) {
                            *o += rstd[r] * (gi - mean_g - yi * mean_gy);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = node.value.cols();
                if let Some(ga) = self.acc(grads, a) {
                    for ((gy, yy), gar) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let total: f64 = gy.iter().sum();
                        for ((o, gi), yi) in gar.iter_mut().zip(gy).zip(yy) {
                            *o += gi - yi.exp() * total;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = node.value.cols();
                if let Some(ga) = self.acc(grads, a) {
                    for ((gy, yy), gar) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let d: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in gar.iter_mut().zip(gy).zip(yy) {
                            *o += yi * (gi - d);
                        }
                    }
                }
            }
            Op::Rope {
                x,
                ref cos,
                ref sin,
                n_heads,
            } => {
                let (rows, cols) = (node.value.rows(), node.value.cols());
                let head_dim = cols / n_heads;
                let half = head_dim / 2;
                if let Some(gx) = self.acc(grads, x) {
                    for r in 0..rows {
                        for h in 0..n_heads {
                            let bc = r * cols + h * head_dim;
                            for i in 0..half {
                                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                                let g0 = g[bc + 2 * i];
                                let g1 = g[bc + 2 * i + 1];
                                gx[bc + 2 * i] += g0 * c + g1 * s;
                                gx[bc + 2 * i + 1] += -g0 * s + g1 * c;
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                ref probs,
            } => self.attention_backward(q, k, v, n_heads, probs, g, grads),
            Op::Unfold {
                x,
                kernel,
                stride,
                pad,
            } => {
                let rows = self.value(x).rows();
                let cols = self.value(x).cols();
                let out_len = node.value.rows();
                if let Some(gx) = self.acc(grads, x) {
                    for j in 0..out_len {
                        for kk in 0..kernel {
                            let src = (j * stride + kk) as isize - pad as isize;
                            if src < 0 || src as usize >= rows {
                                continue;
                            }
                            let s = src as usize * cols;
                            let d = j * kernel * cols + kk * cols;
                            axpy(&mut gx[s..s + cols], &g[d..d + cols], 1.0);
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (rows, ca) = self.shape(a);
                let cb = self.shape(b).1;
                if let Some(ga) = self.acc(grads, a) {
                    for r in 0..rows {
                        axpy(&mut ga[r * ca..(r + 1) * ca], &g[r * (ca + cb)..r * (ca + cb) + ca], 1.0);
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for r in 0..rows {
                        axpy(
                            &mut gb[r * cb..(r + 1) * cb],
                            &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)],
                            1.0,
                        );
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(a).len();
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, &g[..na], 1.0);
                }
                if let Some(gb) = self.acc(grads, b) {
                    axpy(gb, &g[na..], 1.0);
                }
            }
            Op::BroadcastRows(a) => {
                let cols = node.value.cols();
                if let Some(ga) = self.acc(grads, a) {
                    for chunk in g.chunks(cols) {
                        axpy(ga, chunk, 1.0);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.shape(x);
                let len = node.value.cols();
                if let Some(gx) = self.acc(grads, x) {
                    put_cols(gx, rows, cols, start, len, g, true);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, g, 1.0);
                }
            }
            Op::Ctc { x, ref grad } => {
                if let Some(gx) = self.acc(grads, x) {
                    axpy(gx, grad, g[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (lq, d) = self.shape(q);
        let (lk, _) = self.shape(k);
        let dv = self.shape(v).1;
        let dh = d / n_heads;
        let dvh = dv / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (need_q, need_k, need_v) = (self.rg(q), self.rg(k), self.rg(v));
        let mut dq = vec![0.0; lq * d];
        let mut dk = vec![0.0; lk * d];
        let mut dvv = vec![0.0; lk * dv];
        let mut dp = vec![0.0; lq * lk];
        let mut tmp_q = vec![0.0; lq * dh];
        let mut tmp_k = vec![0.0; lk * dh];
        let mut tmp_v = vec![0.0; lk * dvh];
        for h in 0..n_heads {
            let p = &probs[h * lq * lk..(h + 1) * lq * lk];
            let goh = take_cols(g, lq, dv, h * dvh, dvh);
            if need_v {
                gemm(lk, lq, dvh, p, true, &goh, false, &mut tmp_v, false);
                put_cols(&mut dvv, lk, dv, h * dvh, dvh, &tmp_v, true);
            }
            if !(need_q || need_k) {
                continue;
            }
            let vh = take_cols(self.data(v), lk, dv, h * dvh, dvh);
            gemm(lq, dvh, lk, &goh, false, &vh, true, &mut dp, false);
            for (dpr, pr) in dp.chunks_mut(lk).zip(p.chunks(lk)) {
                let dotp: f64 = dpr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, pi) in dpr.iter_mut().zip(pr) {
                    *x = pi * (*x - dotp) * scale;
                }
            }
            if need_q {
                let kh = take_cols(self.data(k), lk, d, h * dh, dh);
                gemm(lq, lk, dh, &dp, false, &kh, false, &mut tmp_q, false);
                put_cols(&mut dq, lq, d, h * dh, dh, &tmp_q, true);
            }
            if need_k {
                let qh = take_cols(self.data(q), lq, d, h * dh, dh);
                gemm(lk, lq, dh, &dp, true, &qh, false, &mut tmp_k, false);
                put_cols(&mut dk, lk, d, h * dh, dh, &tmp_k, true);
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dvv)] {
            if let Some(gv) = self.acc(grads, var) {
                axpy(gv, &buf, 1.0);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf or parameter variable; `None` when
    /// the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.get(v))
    }

    pub fn accumulate_into(&self, buffer: &mut GradBuffer, scale: f64) {
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                buffer.add_scaled(id, g, scale);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("internal shape")
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.rank() == 2 {
        return t;
    }
    let (r, c) = (t.rows(), t.cols());
    t.reshape(vec![r, c]).expect("same size")
}

fn take_cols(src: &[f64], rows: usize, cols: usize, start: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
    }
    out
}

fn put_cols(dst: &mut [f64], rows: usize, cols: usize, start: usize, len: usize, src: &[f64], add: bool) {
    for r in 0..rows {
        let d = &mut dst[r * cols + start..r * cols + start + len];
        let s = &src[r * len..(r + 1) * len];
        if add {
            axpy(d, s, 1.0);
        } else {
            d.copy_from_slice(s);
        }
    }
}
