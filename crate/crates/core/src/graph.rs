//! Eager reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, and only parameters
//! flagged as trainable (plus explicit [`Graph::variable`] leaves) propagate
//! gradients. Backward passes run in strict reverse creation order, so
//! results are bit-reproducible.

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sqrt(Var),
    Recip(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    MaskedMeanRows {
        x: Var,
        keep: Vec<bool>,
        count: usize,
    },
    PickEntries {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    trainable: &'a [bool],
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl<'a> Graph<'a> {
    /// `trainable[i]` selects which parameters of `params` receive gradients.
    pub fn new(params: &'a ParamStore, trainable: &'a [bool]) -> Self {
        assert_eq!(params.len(), trainable.len(), "trainable mask length");
        Self {
            params,
            trainable,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).as_scalar()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Backprop::grad`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs = self.trainable[id.index()];
        self.push(Tensor::zeros(0, 0), Op::Param(id), needs)
    }

    pub fn param_named(&mut self, name: &str) -> Var {
        let id = self.params.expect(name);
        self.param(id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let n = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), n)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let n = self.needs(a);
        self.push(v, Op::Transpose(a), n)
    }

    /// Elementwise `a + b`; `b` may broadcast as `[1, c]`, `[r, 1]` or `[1, 1]`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        let n = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), n)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise `a * b` with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        let n = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), n)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let n = self.needs(a);
        self.push(v, Op::Scale(a, k), n)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let n = self.needs(a);
        self.push(v, Op::Relu(a), n)
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| {
            let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let n = self.needs(a);
        self.push(v, Op::Gelu(a), n)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let n = self.needs(a);
        self.push(v, Op::Exp(a), n)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let n = self.needs(a);
        self.push(v, Op::Log(a), n)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let n = self.needs(a);
        self.push(v, Op::Softplus(a), n)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let n = self.needs(a);
        self.push(v, Op::Sqrt(a), n)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        let n = self.needs(a);
        self.push(v, Op::Recip(a), n)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            softmax_into(x.row(r), out.row_mut(r));
        }
        let n = self.needs(a);
        self.push(out, Op::SoftmaxRows(a), n)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let lse = log_sum_exp(x.row(r));
            for (o, &xi) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                *o = xi - lse;
            }
        }
        let n = self.needs(a);
        self.push(out, Op::LogSoftmaxRows(a), n)
    }

    /// Row-wise log-sum-exp, `[r, c] -> [r, 1]`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::from_vec(x.rows(), 1, (0..x.rows()).map(|r| log_sum_exp(x.row(r))).collect());
        let n = self.needs(a);
        self.push(v, Op::LogSumExpRows(a), n)
    }

    /// Row-wise layer normalization with affine `[1, c]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        let n = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            n,
        )
    }

    /// Scales each row to unit Euclidean norm. Rows must be non-zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            for o in out.row_mut(r) {
                *o /= n;
            }
        }
        let n = self.needs(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, n)
    }

    /// Row gather: output row `i` is `src[idx[i]]`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let s = self.value(src);
        let mut out = Tensor::zeros(idx.len(), s.cols());
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(s.row(j));
        }
        let n = self.needs(src);
        self.push(out, Op::Gather { src, idx: idx.to_vec() }, n)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let n = self.needs(x);
        self.push(out, Op::SliceCols { x, start }, n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let n = parts.iter().any(|p| self.needs(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let n = parts.iter().any(|p| self.needs(*p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), n)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let n = self.needs(x);
        self.push(v, Op::SumAll(x), n)
    }

    /// Sums over rows, `[r, c] -> [1, c]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in out.row_mut(0).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let n = self.needs(x);
        self.push(out, Op::SumRows(x), n)
    }

    /// Sums over columns, `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Tensor::from_vec(xv.rows(), 1, (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect());
        let n = self.needs(x);
        self.push(v, Op::SumCols(x), n)
    }

    /// Mean of the rows with `keep[r] == true`, `[r, c] -> [1, c]`.
    pub fn masked_mean_rows(&mut self, x: Var, keep: &[bool]) -> Var {
        let xv = self.value(x);
        assert_eq!(keep.len(), xv.rows(), "mask length");
        let count = keep.iter().filter(|k| **k).count();
        assert!(count > 0, "masked mean over zero rows");
        let mut out = Tensor::zeros(1, xv.cols());
        for r in (0..xv.rows()).filter(|r| keep[*r]) {
            for (o, v) in out.row_mut(0).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / count as f64);
        let n = self.needs(x);
        self.push(
            out,
            Op::MaskedMeanRows {
                x,
                keep: keep.to_vec(),
                count,
            },
            n,
        )
    }

    /// Picks `x[i, j]` for each `(i, j)`, producing `[n, 1]`.
    pub fn pick(&mut self, x: Var, idx: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let v = Tensor::from_vec(idx.len(), 1, idx.iter().map(|&(i, j)| xv.get(i, j)).collect());
        let n = self.needs(x);
        self.push(v, Op::PickEntries { x, idx: idx.to_vec() }, n)
    }

    /// Reverse pass seeded with `d(objective)/d(var)` for each listed output.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Backprop {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape mismatch");
            if self.needs(*v) {
                acc(&mut grads[v.0], g.clone());
            }
        }
        let mut param_grads = Grads::new(self.params);
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(id) => {
                    param_grads.accumulate(*id, &g);
                    continue;
                }
                _ => {}
            }
            self.backward_op(i, &g, &mut grads);
        }
        Backprop {
            leaf_grads: grads,
            param_grads,
        }
    }

    /// Convenience for a scalar objective.
    pub fn backward_scalar(&self, loss: Var) -> Backprop {
        self.backward(&[(loss, Tensor::scalar(1.0))])
    }

    fn backward_op(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if self.needs(v) {
                acc(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    send(*a, g.matmul_nt(self.value(*b)), grads);
                }
                if self.needs(*b) {
                    send(*b, self.value(*a).matmul_tn(g), grads);
                }
            }
            Op::Transpose(a) => send(*a, g.transpose(), grads),
            Op::Add(a, b) => {
                if self.needs(*b) {
                    send(*b, reduce_to(g, self.value(*b).shape()), grads);
                }
                send(*a, g.clone(), grads);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    send(*a, broadcast_zip(g, bv, |x, y| x * y), grads);
                }
                if self.needs(*b) {
                    let full = zip_same(g, av, |x, y| x * y);
                    send(*b, reduce_to(&full, bv.shape()), grads);
                }
            }
            Op::Scale(a, k) => send(*a, g.map(|x| x * k), grads),
            Op::Relu(a) => {
                let x = self.value(*a);
                send(*a, zip_same(g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }), grads);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                send(*a, zip_same(g, x, |gi, xi| gi * gelu_grad(xi)), grads);
            }
            Op::Exp(a) => send(*a, zip_same(g, y, |gi, yi| gi * yi), grads),
            Op::Log(a) => {
                let x = self.value(*a);
                send(*a, zip_same(g, x, |gi, xi| gi / xi), grads);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                send(*a, zip_same(g, x, |gi, xi| gi * sigmoid(xi)), grads);
            }
            Op::Sqrt(a) => send(*a, zip_same(g, y, |gi, yi| gi * 0.5 / yi), grads),
            Op::Recip(a) => send(*a, zip_same(g, y, |gi, yi| -gi * yi * yi), grads),
            Op::SoftmaxRows(a) => {
                let mut out = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gy = dot(g.row(r), y.row(r));
                    for ((o, &gi), &yi) in out.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yi * (gi - gy);
                    }
                }
                send(*a, out, grads);
            }
            Op::LogSoftmaxRows(a) => {
                let mut out = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    for ((o, &gi), &yi) in out.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = gi - yi.exp() * gs;
                    }
                }
                send(*a, out, grads);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let lse = y.get(r, 0);
                    let gr = g.get(r, 0);
                    for (o, &xi) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                        *o = gr * (xi - lse).exp();
                    }
                }
                send(*a, out, grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                if self.needs(*gamma) {
                    let mut gg = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    send(*gamma, gg, grads);
                }
                if self.needs(*beta) {
                    send(*beta, reduce_to(g, (1, cols)), grads);
                }
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gv.get(0, c)).collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghx: f64 = gh.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            let v = rstd[r] / n * (n * gh[c] - sum_gh - xhat.get(r, c) * sum_ghx);
                            gx.set(r, c, v);
                        }
                    }
                    send(*x, gx, grads);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut out = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gy = dot(g.row(r), y.row(r));
                    for ((o, &gi), &yi) in out.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (gi - yi * gy) / norms[r];
                    }
                }
                send(*x, out, grads);
            }
            Op::Gather { src, idx } => {
                let s = self.value(*src);
                let mut out = Tensor::zeros(s.rows(), s.cols());
                for (i, &j) in idx.iter().enumerate() {
                    for (o, v) in out.row_mut(j).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                send(*src, out, grads);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut out = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    out.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                send(*x, out, grads);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.needs(*p) {
                        let mut out = Tensor::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            out.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        send(*p, out, grads);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.value(*p).shape();
                    if self.needs(*p) {
                        let data = g.data()[offset * c..(offset + r) * c].to_vec();
                        send(*p, Tensor::from_vec(r, c, data), grads);
                    }
                    offset += r;
                }
            }
            Op::SumAll(x) => {
                let (r, c) = self.value(*x).shape();
                send(*x, Tensor::full(r, c, g.as_scalar()), grads);
            }
            Op::SumRows(x) => {
                let (r, c) = self.value(*x).shape();
                let mut out = Tensor::zeros(r, c);
                for i in 0..r {
                    out.row_mut(i).copy_from_slice(g.row(0));
                }
                send(*x, out, grads);
            }
            Op::SumCols(x) => {
                let (r, c) = self.value(*x).shape();
                let mut out = Tensor::zeros(r, c);
                for i in 0..r {
                    out.row_mut(i).fill(g.get(i, 0));
                }
                send(*x, out, grads);
            }
            Op::MaskedMeanRows { x, keep, count } => {
                let (r, c) = self.value(*x).shape();
                let mut out = Tensor::zeros(r, c);
                let k = 1.0 / *count as f64;
                for i in (0..r).filter(|i| keep[*i]) {
                    for (o, v) in out.row_mut(i).iter_mut().zip(g.row(0)) {
                        *o = v * k;
                    }
                }
                send(*x, out, grads);
            }
            Op::PickEntries { x, idx } => {
                let (r, c) = self.value(*x).shape();
                let mut out = Tensor::zeros(r, c);
                for (n, &(i, j)) in idx.iter().enumerate() {
                    out.data_mut()[i * c + j] += g.get(n, 0);
                }
                send(*x, out, grads);
            }
        }
    }
}

/// Result of a reverse pass.
pub struct Backprop {
    leaf_grads: Vec<Option<Tensor>>,
    param_grads: Grads,
}

impl Backprop {
    /// Gradient reaching a [`Graph::variable`] leaf, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn param_grads(&self) -> &Grads {
        &self.param_grads
    }

    pub fn into_param_grads(self) -> Grads {
        self.param_grads
    }
}

fn acc(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = a.shape();
    let (br, bc) = b.shape();
    assert!(
        (br == r || br == 1) && (bc == c || bc == 1),
        "cannot broadcast [{br}, {bc}] onto [{r}, {c}]"
    );
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let bi = if br == 1 { 0 } else { i };
        for j in 0..c {
            let bj = if bc == 1 { 0 } else { j };
            out.set(i, j, f(a.get(i, j), b.get(bi, bj)));
        }
    }
    out
}

fn reduce_to(g: &Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let (br, bc) = shape;
    let mut out = Tensor::zeros(br, bc);
    for i in 0..g.rows() {
        let oi = if br == 1 { 0 } else { i };
        for j in 0..g.cols() {
            let oj = if bc == 1 { 0 } else { j };
            out.data_mut()[oi * bc + oj] += g.get(i, j);
        }
    }
    out
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(xs) {
        *o = (x - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
