//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] with seed gradients on any set of nodes walks the tape in
//! reverse and accumulates parameter gradients into a [`Grads`] buffer.
//!
//! Everything is `f64` so that central finite differences with `h = 1e-4`
//! resolve relative errors well below `1e-4`.

use std::collections::HashMap;

use crate::params::{Grads, Group, ParamId, ParamStore};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Matrix::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// `c += a · b` with optional transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: strides and dimensions describe in-bounds views of the slices,
    // checked by the callers' shape assertions; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a [m×k] · b [k×n]`
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm_acc(
        a.rows,
        a.cols,
        b.cols,
        &a.data,
        (a.cols as isize, 1),
        &b.data,
        (b.cols as isize, 1),
        &mut out.data,
    );
    out
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows(Vec<(Var, usize)>),
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Pick {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    Mean(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Operation recorder for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    frozen: Vec<Group>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Parameters in `groups` enter the tape as constants: no gradient is
    /// computed for them and none is propagated through ops that only they feed.
    pub fn with_frozen(groups: &[Group]) -> Self {
        let mut t = Tape::new();
        t.frozen = groups.to_vec();
        t
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let needs = !self.frozen.contains(&store.group(id));
        let v = self.push(store.value(id).clone(), Op::Param(id), needs);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols, bm.cols, "matmul_t inner dims");
        let mut out = Matrix::zeros(am.rows, bm.rows);
        gemm_acc(
            am.rows,
            am.cols,
            bm.rows,
            &am.data,
            (am.cols as isize, 1),
            &bm.data,
            (1, bm.cols as isize),
            &mut out.data,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!((am.rows, am.cols), (bm.rows, bm.cols), "add shapes");
        let data = am.data.iter().zip(&bm.data).map(|(x, y)| x + y).collect();
        let out = Matrix::from_vec(am.rows, am.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(row));
        assert_eq!(bm.rows, 1, "add_row expects a single row");
        assert_eq!(am.cols, bm.cols, "add_row width");
        let mut out = am.clone();
        for r in 0..out.rows {
            for (o, b) in out.data[r * out.cols..(r + 1) * out.cols]
                .iter_mut()
                .zip(&bm.data)
            {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!((am.rows, am.cols), (bm.rows, bm.cols), "mul shapes");
        let data = am.data.iter().zip(&bm.data).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(am.rows, am.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let am = self.value(a);
        let out = Matrix::from_vec(am.rows, am.cols, am.data.iter().map(|x| x * s).collect());
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let out = Matrix::from_vec(am.rows, am.cols, am.data.iter().map(|&x| gelu(x)).collect());
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let out = Matrix::from_vec(am.rows, am.cols, am.data.iter().map(|&x| x.max(0.0)).collect());
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (`1×n` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (rows, cols) = (xm.rows, xm.cols);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        assert_eq!(g.len(), cols, "layer_norm gamma width");
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut out = am.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * am.cols..(r + 1) * am.cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut out = am.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * am.cols..(r + 1) * am.cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        assert!(start + len <= am.cols, "slice_cols out of range");
        let mut out = Matrix::zeros(am.rows, len);
        for r in 0..am.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&am.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { x: a, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.rows, rows, "concat_cols rows");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + pm.cols].copy_from_slice(pm.row(r));
            }
            off += pm.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Builds a matrix whose i-th row is row `src[i].1` of node `src[i].0`.
    pub fn gather_rows(&mut self, src: &[(Var, usize)]) -> Var {
        let cols = self.value(src[0].0).cols;
        let mut out = Matrix::zeros(src.len(), cols);
        for (i, &(v, r)) in src.iter().enumerate() {
            let m = self.value(v);
            assert_eq!(m.cols, cols, "gather_rows width");
            out.data[i * cols..(i + 1) * cols].copy_from_slice(m.row(r));
        }
        let ng = src.iter().any(|&(v, _)| self.ng(v));
        self.push(out, Op::GatherRows(src.to_vec()), ng)
    }

    /// Column-wise max over rows, giving a `1×n` row. Ties go to the first row.
    pub fn max_pool_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        assert!(am.rows > 0, "max_pool_rows of empty matrix");
        let mut argmax = vec![0usize; am.cols];
        let mut out = Matrix::from_vec(1, am.cols, am.row(0).to_vec());
        for r in 1..am.rows {
            for (c, &v) in am.row(r).iter().enumerate() {
                if v > out.data[c] {
                    out.data[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MaxPoolRows { x: a, argmax }, ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let am = self.value(a);
        assert_eq!(am.len(), rows * cols, "reshape size");
        let out = Matrix::from_vec(rows, cols, am.data.clone());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Gathers the listed `(row, col)` entries into a `1×k` row.
    pub fn pick(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let am = self.value(a);
        let data = idx.iter().map(|&(r, c)| am.get(r, c)).collect();
        let out = Matrix::from_vec(1, idx.len(), data);
        let ng = self.ng(a);
        self.push(
            out,
            Op::Pick {
                x: a,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Mean of all entries as a `1×1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let m = am.data.iter().sum::<f64>() / am.len() as f64;
        let ng = self.ng(a);
        self.push(Matrix::scalar(m), Op::Mean(a), ng)
    }

    /// Back-propagates `seeds` (node, upstream gradient) and adds parameter
    /// gradients into `grads`.
    pub fn backward(&self, seeds: &[(Var, Matrix)], grads: &mut Grads) {
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, s) in seeds {
            let n = &self.nodes[v.0];
            assert_eq!((s.rows, s.cols), (n.value.rows, n.value.cols), "seed shape");
            acc(&mut g[v.0], &s.data);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &dy, &mut g, grads);
        }
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], g: &mut [Option<Vec<f64>>], grads: &mut Grads) {
        let y = &node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => grads.accumulate(*id, dy),
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let (m, k, n) = (am.rows, am.cols, bm.cols);
                if self.ng(*a) {
                    // dA = dY · Bᵀ
                    let buf = ensure(&mut g[a.0], m * k);
                    gemm_acc(m, n, k, dy, (n as isize, 1), &bm.data, (1, n as isize), buf);
                }
                if self.ng(*b) {
                    // dB = Aᵀ · dY
                    let buf = ensure(&mut g[b.0], k * n);
                    gemm_acc(k, m, n, &am.data, (1, k as isize), dy, (n as isize, 1), buf);
                }
            }
            Op::MatMulT(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let (m, k, n) = (am.rows, am.cols, bm.rows);
                if self.ng(*a) {
                    // dA = dY · B
                    let buf = ensure(&mut g[a.0], m * k);
                    gemm_acc(m, n, k, dy, (n as isize, 1), &bm.data, (k as isize, 1), buf);
                }
                if self.ng(*b) {
                    // dB = dYᵀ · A
                    let buf = ensure(&mut g[b.0], n * k);
                    gemm_acc(n, m, k, dy, (1, n as isize), &am.data, (k as isize, 1), buf);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    acc(&mut g[a.0], dy);
                }
                if self.ng(*b) {
                    acc(&mut g[b.0], dy);
                }
            }
            Op::AddRow(a, b) => {
                if self.ng(*a) {
                    acc(&mut g[a.0], dy);
                }
                if self.ng(*b) {
                    let cols = y.cols;
                    let buf = ensure(&mut g[b.0], cols);
                    for r in 0..y.rows {
                        for c in 0..cols {
                            buf[c] += dy[r * cols + c];
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let buf = ensure(&mut g[a.0], dy.len());
                    for ((o, d), bv) in buf.iter_mut().zip(dy).zip(&bm.data) {
                        *o += d * bv;
                    }
                }
                if self.ng(*b) {
                    let buf = ensure(&mut g[b.0], dy.len());
                    for ((o, d), av) in buf.iter_mut().zip(dy).zip(&am.data) {
                        *o += d * av;
                    }
                }
            }
            Op::Scale(a, s) => {
                let buf = ensure(&mut g[a.0], dy.len());
                for (o, d) in buf.iter_mut().zip(dy) {
                    *o += d * s;
                }
            }
            Op::Gelu(a) => {
                let x = &self.value(*a).data;
                let buf = ensure(&mut g[a.0], dy.len());
                for ((o, d), &xv) in buf.iter_mut().zip(dy).zip(x) {
                    *o += d * gelu_grad(xv);
                }
            }
            Op::Relu(a) => {
                let x = &self.value(*a).data;
                let buf = ensure(&mut g[a.0], dy.len());
                for ((o, d), &xv) in buf.iter_mut().zip(dy).zip(x) {
                    if xv > 0.0 {
                        *o += d;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = (y.rows, y.cols);
                let gm = &self.value(*gamma).data;
                if self.ng(*gamma) {
                    let buf = ensure(&mut g[gamma.0], cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[c] += dy[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if self.ng(*beta) {
                    let buf = ensure(&mut g[beta.0], cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[c] += dy[r * cols + c];
                        }
                    }
                }
                if self.ng(*x) {
                    let buf = ensure(&mut g[x.0], rows * cols);
                    let nf = cols as f64;
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dxh = dy[r * cols + c] * gm[c];
                            m1 += dxh;
                            m2 += dxh * xhat[r * cols + c];
                        }
                        m1 /= nf;
                        m2 /= nf;
                        for c in 0..cols {
                            let dxh = dy[r * cols + c] * gm[c];
                            buf[r * cols + c] += rstd[r] * (dxh - m1 - xhat[r * cols + c] * m2);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let cols = y.cols;
                let buf = ensure(&mut g[a.0], dy.len());
                for r in 0..y.rows {
                    let p = y.row(r);
                    let d = &dy[r * cols..(r + 1) * cols];
                    let dot: f64 = p.iter().zip(d).map(|(p, d)| p * d).sum();
                    for c in 0..cols {
                        buf[r * cols + c] += p[c] * (d[c] - dot);
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let cols = y.cols;
                let buf = ensure(&mut g[a.0], dy.len());
                for r in 0..y.rows {
                    let ly = y.row(r);
                    let d = &dy[r * cols..(r + 1) * cols];
                    let s: f64 = d.iter().sum();
                    for c in 0..cols {
                        buf[r * cols + c] += d[c] - ly[c].exp() * s;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let xc = self.value(*x).cols;
                let w = y.cols;
                let buf = ensure(&mut g[x.0], y.rows * xc);
                for r in 0..y.rows {
                    for c in 0..w {
                        buf[r * xc + start + c] += dy[r * w + c];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let cols = y.cols;
                let mut off = 0;
                for p in parts {
                    let pc = self.value(*p).cols;
                    if self.ng(*p) {
                        let buf = ensure(&mut g[p.0], y.rows * pc);
                        for r in 0..y.rows {
                            for c in 0..pc {
                                buf[r * pc + c] += dy[r * cols + off + c];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::GatherRows(src) => {
                let cols = y.cols;
                for (i, &(v, r)) in src.iter().enumerate() {
                    if !self.ng(v) {
                        continue;
                    }
                    let len = self.value(v).len();
                    let buf = ensure(&mut g[v.0], len);
                    for c in 0..cols {
                        buf[r * cols + c] += dy[i * cols + c];
                    }
                }
            }
            Op::MaxPoolRows { x, argmax } => {
                let xm = self.value(*x);
                let buf = ensure(&mut g[x.0], xm.len());
                for (c, &r) in argmax.iter().enumerate() {
                    buf[r * xm.cols + c] += dy[c];
                }
            }
            Op::Reshape(a) => acc(&mut g[a.0], dy),
            Op::Pick { x, idx } => {
                let xm = self.value(*x);
                let buf = ensure(&mut g[x.0], xm.len());
                for (k, &(r, c)) in idx.iter().enumerate() {
                    buf[r * xm.cols + c] += dy[k];
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let buf = ensure(&mut g[a.0], n);
                let d = dy[0] / n as f64;
                for o in buf.iter_mut() {
                    *o += d;
                }
            }
        }
    }
}

fn ensure(slot: &mut Option<Vec<f64>>, len: usize) -> &mut [f64] {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn acc(slot: &mut Option<Vec<f64>>, d: &[f64]) {
    match slot {
        Some(buf) => {
            for (o, v) in buf.iter_mut().zip(d) {
                *o += v;
            }
        }
        None => *slot = Some(d.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks every parameter entry of a scalar-valued graph against central
    /// differences.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Tape, &ParamStore) -> Var,
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, store);
        let mut grads = Grads::zeros_like(store);
        tape.backward(&[(out, Matrix::scalar(1.0))], &mut grads);
        let h = 1e-5;
        for id in store.ids() {
            for k in 0..store.value(id).len() {
                let orig = store.value(id).data[k];
                store.value_mut(id).data[k] = orig + h;
                let mut t = Tape::new();
                let o = f(&mut t, store);
                let fp = t.scalar(o);
                store.value_mut(id).data[k] = orig - h;
                let mut t = Tape::new();
                let o = f(&mut t, store);
                let fm = t.scalar(o);
                store.value_mut(id).data[k] = orig;
                let num = (fp - fm) / (2.0 * h);
                let ana = grads.get(id).data[k];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(err < 1e-5, "{}[{k}]: analytic {ana} numeric {num}", store.name(id));
            }
        }
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 4, 5);
        let c = matmul(&a, &b);
        for i in 0..3 {
            for j in 0..5 {
                let s: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_of_every_op_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let a = store.insert("a", Group::Lm, rand_matrix(&mut rng, 4, 6));
        let b = store.insert("b", Group::Lm, rand_matrix(&mut rng, 6, 6));
        let bias = store.insert("bias", Group::Lm, rand_matrix(&mut rng, 1, 6));
        let gamma = store.insert("gamma", Group::Lm, rand_matrix(&mut rng, 1, 6));
        let beta = store.insert("beta", Group::Lm, rand_matrix(&mut rng, 1, 6));
        check(&mut store, |t, s| {
            let av = t.param(s, a);
            let bv = t.param(s, b);
            let x = t.matmul(av, bv);
            let bi = t.param(s, bias);
            let x = t.add_row(x, bi);
            let g = t.param(s, gamma);
            let be = t.param(s, beta);
            let x = t.layer_norm(x, g, be);
            let x = t.gelu(x);
            let q = t.slice_cols(x, 0, 3);
            let k = t.slice_cols(x, 3, 3);
            let sc = t.matmul_t(q, k);
            let sc = t.scale(sc, 0.7);
            let p = t.softmax_rows(sc);
            let o = t.matmul(p, k);
            let o2 = t.mul(o, q);
            let cat = t.concat_cols(&[o2, q]);
            let pooled = t.max_pool_rows(cat);
            let rows = t.gather_rows(&[(cat, 1), (pooled, 0), (x, 2)]);
            let r = t.reshape(rows, 6, 3);
            let r = t.add(r, r);
            let ls = t.log_softmax_rows(r);
            let pk = t.pick(ls, &[(0, 1), (3, 2), (5, 0)]);
            t.mean(pk)
        });
    }

    #[test]
    fn frozen_groups_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.insert("a", Group::PointEncoder, rand_matrix(&mut rng, 2, 2));
        let b = store.insert("b", Group::Lm, rand_matrix(&mut rng, 2, 2));
        let mut tape = Tape::with_frozen(&[Group::PointEncoder]);
        let av = tape.param(&store, a);
        let bv = tape.param(&store, b);
        let c = tape.matmul(av, bv);
        let m = tape.mean(c);
        let mut grads = Grads::zeros_like(&store);
        tape.backward(&[(m, Matrix::scalar(1.0))], &mut grads);
        assert!(grads.get(a).data.iter().all(|&v| v == 0.0));
        assert!(grads.get(b).data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn softmax_with_masked_entries() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[vec![0.0, f64::NEG_INFINITY], vec![1.0, 1.0]]));
        let p = t.softmax_rows(x);
        assert_eq!(t.value(p).data, vec![1.0, 0.0, 0.5, 0.5]);
    }
}
