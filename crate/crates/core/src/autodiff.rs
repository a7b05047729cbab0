//! A small reverse-mode autodiff tape over [`Matrix`] values.
//!
//! The graph is built eagerly: every op computes its value immediately and
//! records enough to replay the chain rule. Nodes are appended in
//! topological order, so `backward` is a single reverse sweep. Leaves borrow
//! their values where possible so registering model parameters is free.

use std::borrow::Cow;

use crate::tensor::{matmul, matmul_nt, matmul_tn, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'a> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<Matrix>,
    },
    ConcatRows(Var, Var),
    GatherRows(Var, Vec<usize>),
    Scatter {
        src: Var,
        fill: Var,
        map: Vec<Option<usize>>,
    },
    MaskedMse {
        pred: Var,
        target: Cow<'a, Matrix>,
        rows: Vec<usize>,
    },
    SquaredError {
        pred: Var,
        target: f64,
    },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op<'a>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op<'a>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Borrowed leaf (parameters, fixed inputs).
    pub fn leaf(&mut self, m: &'a Matrix, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, requires_grad)
    }

    pub fn leaf_owned(&mut self, m: Matrix, requires_grad: bool) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::MatMul(a, b), rg)
    }

    /// `x + b` with a `1 × cols` row broadcast over every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let mut v = self.value(x).clone();
        let bias = self.value(b);
        assert_eq!(bias.shape(), (1, v.cols()), "bias shape");
        for r in 0..v.rows() {
            for (o, bv) in v.row_mut(r).iter_mut().zip(bias.as_slice()) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(Cow::Owned(v), Op::AddBias(x, b), rg)
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.shape(), self.value(b).shape(), "add shapes");
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::Add(a, b), rg)
    }

    /// Layer normalization over each row (population variance).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).as_slice();
        let bt = self.value(beta).as_slice();
        assert_eq!(g.len(), cols, "layer norm gamma");
        assert_eq!(bt.len(), cols, "layer norm beta");
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(istd);
            let orow = out.row_mut(r);
            let hrow = xhat.row_mut(r);
            for c in 0..cols {
                let h = (row[c] - mean) * istd;
                hrow[c] = h;
                orow[c] = h * g[c] + bt[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::Gelu(x), rg)
    }

    /// Multi-head scaled dot-product self-attention over a fused `T × 3d`
    /// projection laid out as `[q | k | v]`, each block split into `heads`
    /// contiguous column groups. Output is `T × d`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let x = self.value(qkv);
        let (t, three_d) = x.shape();
        assert_eq!(three_d % 3, 0, "qkv width");
        let d = three_d / 3;
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(t, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = x.slice_cols(h * dh, dh);
            let k = x.slice_cols(d + h * dh, dh);
            let v = x.slice_cols(2 * d + h * dh, dh);
            let mut s = matmul_nt(&q, &k);
            for r in 0..t {
                softmax_in_place(s.row_mut(r), scale);
            }
            let o = matmul(&s, &v);
            for r in 0..t {
                out.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(o.row(r));
            }
            probs.push(s);
        }
        let rg = self.rg(qkv);
        self.push(Cow::Owned(out), Op::Attention { qkv, heads, probs }, rg)
    }

    /// Stack `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.cols(), bv.cols(), "concat widths");
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.as_slice());
        data.extend_from_slice(bv.as_slice());
        let m = Matrix::from_vec(av.rows() + bv.rows(), av.cols(), data).expect("concat shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(m), Op::ConcatRows(a, b), rg)
    }

    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Var {
        let m = self.value(x).gather_rows(&indices);
        let rg = self.rg(x);
        self.push(Cow::Owned(m), Op::GatherRows(x, indices), rg)
    }

    /// Row `i` of the output is `src[map[i]]`, or the single row of `fill`
    /// where `map[i]` is `None`.
    pub fn scatter_rows(&mut self, src: Var, fill: Var, map: Vec<Option<usize>>) -> Var {
        let s = self.value(src);
        let f = self.value(fill);
        assert_eq!(f.rows(), 1, "fill must be a single row");
        assert_eq!(s.cols(), f.cols(), "scatter widths");
        let cols = s.cols();
        let mut out = Matrix::zeros(map.len(), cols);
        for (i, m) in map.iter().enumerate() {
            let row = match m {
                Some(j) => s.row(*j),
                None => f.row(0),
            };
            out.row_mut(i).copy_from_slice(row);
        }
        let rg = self.rg(src) || self.rg(fill);
        self.push(Cow::Owned(out), Op::Scatter { src, fill, map }, rg)
    }

    /// Mean squared error over the listed rows only; a `1 × 1` result.
    pub fn masked_mse(&mut self, pred: Var, target: Cow<'a, Matrix>, rows: Vec<usize>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "masked mse shapes");
        let count = (rows.len() * p.cols()) as f64;
        let mut sum = 0.0;
        for &r in &rows {
            for (a, b) in p.row(r).iter().zip(target.row(r)) {
                sum += (a - b) * (a - b);
            }
        }
        let rg = self.rg(pred);
        self.push(
            Cow::Owned(Matrix::filled(1, 1, sum / count)),
            Op::MaskedMse { pred, target, rows },
            rg,
        )
    }

    /// `(pred - target)²` for a `1 × 1` prediction.
    pub fn squared_error(&mut self, pred: Var, target: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), (1, 1), "squared error expects a scalar");
        let e = p.get(0, 0) - target;
        let rg = self.rg(pred);
        self.push(
            Cow::Owned(Matrix::filled(1, 1, e * e)),
            Op::SquaredError { pred, target },
            rg,
        )
    }

    /// Reverse sweep from `root`, seeding its gradient with `seed`.
    pub fn backward(&self, root: Var, seed: f64) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.value(root).shape();
        grads[root.0] = Some(Matrix::filled(r, c, seed));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<'a>, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = matmul_nt(g, self.value(*b));
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = matmul_tn(self.value(*a), g);
                    accumulate(grads, *b, gb);
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(*b) {
                    accumulate(grads, *b, g.sum_rows());
                }
                if self.rg(*x) {
                    accumulate(grads, *x, g.clone());
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                if self.rg(*gamma) {
                    let mut gg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for ((o, gv), h) in gg.as_mut_slice().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gv * h;
                        }
                    }
                    accumulate(grads, *gamma, gg);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, g.sum_rows());
                }
                if self.rg(*x) {
                    let gamma_v = self.value(*gamma).as_slice();
                    let mut gx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for (r, &istd) in inv_std.iter().enumerate() {
                        let h = xhat.row(r);
                        for ((d, gv), gm) in dxhat.iter_mut().zip(g.row(r)).zip(gamma_v) {
                            *d = gv * gm;
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dh = dxhat.iter().zip(h).map(|(d, hv)| d * hv).sum::<f64>() / n;
                        for ((o, d), hv) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(h) {
                            *o = istd * (d - mean_d - hv * mean_dh);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, v) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    *o *= gelu_grad(*v);
                }
                accumulate(grads, *x, gx);
            }
            Op::Attention { qkv, heads, probs } => {
                let x = self.value(*qkv);
                let (t, three_d) = x.shape();
                let d = three_d / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gx = Matrix::zeros(t, three_d);
                for (h, p) in probs.iter().enumerate() {
                    let q = x.slice_cols(h * dh, dh);
                    let k = x.slice_cols(d + h * dh, dh);
                    let v = x.slice_cols(2 * d + h * dh, dh);
                    let go = g.slice_cols(h * dh, dh);
                    // dV = Pᵀ dO, dP = dO Vᵀ
                    let gv = matmul_tn(p, &go);
                    let mut gs = matmul_nt(&go, &v);
                    for r in 0..t {
                        let prow = p.row(r);
                        let srow = gs.row_mut(r);
                        let dot: f64 = srow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for (s, pv) in srow.iter_mut().zip(prow) {
                            *s = pv * (*s - dot) * scale;
                        }
                    }
                    let gq = matmul(&gs, &k);
                    let gk = matmul_tn(&gs, &q);
                    for r in 0..t {
                        let row = gx.row_mut(r);
                        row[h * dh..(h + 1) * dh].copy_from_slice(gq.row(r));
                        row[d + h * dh..d + (h + 1) * dh].copy_from_slice(gk.row(r));
                        row[2 * d + h * dh..2 * d + (h + 1) * dh].copy_from_slice(gv.row(r));
                    }
                }
                accumulate(grads, *qkv, gx);
            }
            Op::ConcatRows(a, b) => {
                let ar = self.value(*a).rows();
                let cols = g.cols();
                if self.rg(*a) {
                    let ga = Matrix::from_vec(ar, cols, g.as_slice()[..ar * cols].to_vec()).expect("concat grad");
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let br = self.value(*b).rows();
                    let gb = Matrix::from_vec(br, cols, g.as_slice()[ar * cols..].to_vec()).expect("concat grad");
                    accumulate(grads, *b, gb);
                }
            }
            Op::GatherRows(x, indices) => {
                let (rows, cols) = self.value(*x).shape();
                let mut gx = Matrix::zeros(rows, cols);
                for (i, &src) in indices.iter().enumerate() {
                    for (o, v) in gx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Scatter { src, fill, map } => {
                let (rows, cols) = self.value(*src).shape();
                let mut gs = Matrix::zeros(rows, cols);
                let mut gf = Matrix::zeros(1, cols);
                for (i, m) in map.iter().enumerate() {
                    let dst = match m {
                        Some(j) => gs.row_mut(*j),
                        None => gf.row_mut(0),
                    };
                    for (o, v) in dst.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                if self.rg(*src) {
                    accumulate(grads, *src, gs);
                }
                if self.rg(*fill) {
                    accumulate(grads, *fill, gf);
                }
            }
            Op::MaskedMse { pred, target, rows } => {
                let p = self.value(*pred);
                let count = (rows.len() * p.cols()) as f64;
                let seed = g.get(0, 0);
                let mut gp = Matrix::zeros(p.rows(), p.cols());
                for &r in rows {
                    let trow = target.row(r);
                    let prow = p.row(r);
                    for ((o, a), b) in gp.row_mut(r).iter_mut().zip(prow).zip(trow) {
                        *o = seed * 2.0 * (a - b) / count;
                    }
                }
                accumulate(grads, *pred, gp);
            }
            Op::SquaredError { pred, target } => {
                let p = self.value(*pred).get(0, 0);
                let gp = Matrix::filled(1, 1, g.get(0, 0) * 2.0 * (p - target));
                accumulate(grads, *pred, gp);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn softmax_in_place(row: &mut [f64], scale: f64) {
    let mut max = f64::NEG_INFINITY;
    for v in row.iter_mut() {
        *v *= scale;
        max = max.max(*v);
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
