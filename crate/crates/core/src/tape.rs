//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! Everything that trains in this crate (the dual residual quantizer and the
//! recommender) builds its forward pass as a `Tape` of small matrix ops and
//! calls [`Tape::backward`] once per step. The op set is deliberately minimal:
//! just what the model forward passes need, each with a hand-written backward
//! that is unit-checked against central finite differences.
//!
//! Design notes:
//! - Nodes are appended in topological order, so backward is a single reverse
//!   sweep over the node list.
//! - All reductions run in a fixed sequential order; results are
//!   bit-deterministic for a given input on one machine.
//! - `stop_grad` is an identity on values that blocks the reverse sweep,
//!   which is how the quantizer's stop-gradient terms and the
//!   straight-through estimator are expressed.

use std::rc::Rc;

/// Dense row-major f64 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_row(row: &[f64]) -> Self {
        Mat { rows: 1, cols: row.len(), data: row.to_vec() }
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat { rows, cols, data: vec![v; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// self (m×k) · other (k×n)
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    /// self (m×k) · otherᵀ (k×n from n×k)
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt shape mismatch");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += arow[p] * brow[p];
                }
                out.data[i * n + j] = s;
            }
        }
        out
    }

    /// selfᵀ (m×k from k×m) · other (k×n)
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn shape mismatch");
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        for p in 0..k {
            for i in 0..m {
                let a = self.data[p * m + i];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse weighted adjacency used by [`Tape::spmm`]. Stored as, for every
/// output row, the list of (input row, coefficient) contributions, applied
/// in stored order so reductions stay deterministic.
#[derive(Clone, Debug)]
pub struct SparseMat {
    pub out_rows: usize,
    pub in_rows: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl SparseMat {
    pub fn new(out_rows: usize, in_rows: usize) -> Self {
        SparseMat { out_rows, in_rows, entries: vec![Vec::new(); out_rows] }
    }

    pub fn push(&mut self, out_row: usize, in_row: usize, coeff: f64) {
        self.entries[out_row].push((in_row, coeff));
    }

    /// out (out_rows×d) = self · x (in_rows×d)
    pub fn apply(&self, x: &Mat) -> Mat {
        assert_eq!(x.rows, self.in_rows);
        let d = x.cols;
        let mut out = Mat::zeros(self.out_rows, d);
        for (r, ents) in self.entries.iter().enumerate() {
            let orow = &mut out.data[r * d..(r + 1) * d];
            for &(src, w) in ents {
                let xrow = &x.data[src * d..(src + 1) * d];
                for j in 0..d {
                    orow[j] += w * xrow[j];
                }
            }
        }
        out
    }

    /// grad_x (in_rows×d) += selfᵀ · g (out_rows×d)
    fn apply_transpose_into(&self, g: &Mat, gx: &mut Mat) {
        let d = g.cols;
        for (r, ents) in self.entries.iter().enumerate() {
            let grow = &g.data[r * d..(r + 1) * d];
            for &(src, w) in ents {
                let xrow = &mut gx.data[src * d..(src + 1) * d];
                for j in 0..d {
                    xrow[j] += w * grow[j];
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBroadcast(Var, Var),
    MulColBroadcast(Var, Var),
    ScaleByVar(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Recip(Var),
    RsqrtEps(Var, f64),
    Clamp(Var, f64, f64),
    RowSum(Var),
    SumAll(Var),
    RowLse(Var),
    Diag(Var),
    /// Row softmax over the first `valid_cols` columns; rows at or beyond
    /// `dead_rows_from` produce all-zero output.
    SoftmaxRows { a: Var, valid_cols: usize, dead_rows_from: usize },
    LayerNorm { a: Var, gamma: Var, beta: Var },
    GatherRows { table: Var, idx: Rc<Vec<usize>> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize, len: usize },
    SpMM { mat: Rc<SparseMat>, x: Var },
    StopGrad,
}

struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-8;

/// A single forward computation; holds values during the forward build and
/// gradients after [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = &self.nodes[v.0].value;
        (m.rows, m.cols)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf (input data / constants).
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), out, g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "sub shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), out, g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), out, g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let out = Mat::from_vec(va.rows, va.cols, va.data.iter().map(|x| x * s).collect());
        let g = self.ng(a);
        self.push(Op::Scale(a, s), out, g)
    }

    /// a (r×c) + b (1×c) broadcast to every row.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(vb.rows, 1);
        assert_eq!(va.cols, vb.cols, "broadcast width mismatch");
        let mut out = va.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += vb.data[c];
            }
        }
        let g = self.ng(a) || self.ng(b);
        self.push(Op::AddRowBroadcast(a, b), out, g)
    }

    /// a (r×c) ∘ b (r×1) broadcast across columns.
    pub fn mul_col_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(vb.cols, 1);
        assert_eq!(va.rows, vb.rows, "broadcast height mismatch");
        let mut out = va.clone();
        for r in 0..out.rows {
            let s = vb.data[r];
            for c in 0..out.cols {
                out.data[r * out.cols + c] *= s;
            }
        }
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MulColBroadcast(a, b), out, g)
    }

    /// a scaled elementwise by a 1×1 variable.
    pub fn scale_by_var(&mut self, a: Var, s: Var) -> Var {
        let (va, vs) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        assert_eq!((vs.rows, vs.cols), (1, 1), "scale_by_var wants a scalar");
        let sv = vs.data[0];
        let out = Mat::from_vec(va.rows, va.cols, va.data.iter().map(|x| x * sv).collect());
        let g = self.ng(a) || self.ng(s);
        self.push(Op::ScaleByVar(a, s), out, g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), out, g)
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.nodes[a.0].value.matmul_nt(&self.nodes[b.0].value);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MatMulNT(a, b), out, g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.transpose();
        let g = self.ng(a);
        self.push(Op::Transpose(a), out, g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let out = Mat::from_vec(va.rows, va.cols, va.data.iter().map(|x| x.max(0.0)).collect());
        let g = self.ng(a);
        self.push(Op::Relu(a), out, g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let out = Mat::from_vec(
            va.rows,
            va.cols,
            va.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        );
        let g = self.ng(a);
        self.push(Op::Sigmoid(a), out, g)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let out = Mat::from_vec(va.rows, va.cols, va.data.iter().map(|x| x.ln()).collect());
        let g = self.ng(a);
        self.push(Op::Ln(a), out, g)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let out = Mat::from_vec(va.rows, va.cols, va.data.iter().map(|x| 1.0 / x).collect());
        let g = self.ng(a);
        self.push(Op::Recip(a), out, g)
    }

    /// Elementwise 1/sqrt(x + eps).
    pub fn rsqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let out = Mat::from_vec(
            va.rows,
            va.cols,
            va.data.iter().map(|x| 1.0 / (x + eps).sqrt()).collect(),
        );
        let g = self.ng(a);
        self.push(Op::RsqrtEps(a, eps), out, g)
    }

    /// Clamp values to [lo, hi]; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let out =
            Mat::from_vec(va.rows, va.cols, va.data.iter().map(|x| x.clamp(lo, hi)).collect());
        let g = self.ng(a);
        self.push(Op::Clamp(a, lo, hi), out, g)
    }

    /// Row sums: (r×c) → (r×1).
    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let mut out = Mat::zeros(va.rows, 1);
        for r in 0..va.rows {
            out.data[r] = va.row(r).iter().sum();
        }
        let g = self.ng(a);
        self.push(Op::RowSum(a), out, g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let out = Mat::scalar(va.data.iter().sum());
        let g = self.ng(a);
        self.push(Op::SumAll(a), out, g)
    }

    /// Row-wise log-sum-exp: (r×c) → (r×1), numerically stable.
    pub fn row_lse(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let mut out = Mat::zeros(va.rows, 1);
        for r in 0..va.rows {
            let row = va.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            out.data[r] = m + s.ln();
        }
        let g = self.ng(a);
        self.push(Op::RowLse(a), out, g)
    }

    /// Main diagonal of a square matrix as (n×1).
    pub fn diag(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rows, va.cols, "diag wants a square matrix");
        let mut out = Mat::zeros(va.rows, 1);
        for r in 0..va.rows {
            out.data[r] = va.at(r, r);
        }
        let g = self.ng(a);
        self.push(Op::Diag(a), out, g)
    }

    /// Row softmax over columns [0, valid_cols); rows ≥ dead_rows_from are
    /// emitted as zeros (fully padded queries).
    pub fn softmax_rows(&mut self, a: Var, valid_cols: usize, dead_rows_from: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert!(valid_cols >= 1 && valid_cols <= va.cols);
        assert!(dead_rows_from <= va.rows);
        let mut out = Mat::zeros(va.rows, va.cols);
        for r in 0..dead_rows_from {
            let row = &va.data[r * va.cols..r * va.cols + valid_cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for c in 0..valid_cols {
                let e = (row[c] - m).exp();
                out.data[r * va.cols + c] = e;
                s += e;
            }
            for c in 0..valid_cols {
                out.data[r * va.cols + c] /= s;
            }
        }
        let g = self.ng(a);
        self.push(Op::SoftmaxRows { a, valid_cols, dead_rows_from }, out, g)
    }

    /// Row-wise layer normalization with learnable gain/bias (each 1×c).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let (va, vg, vb) =
            (&self.nodes[a.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        assert_eq!(vg.rows, 1);
        assert_eq!(vb.rows, 1);
        assert_eq!(va.cols, vg.cols);
        assert_eq!(va.cols, vb.cols);
        let c = va.cols;
        let mut out = Mat::zeros(va.rows, c);
        for r in 0..va.rows {
            let row = va.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                out.data[r * c + j] = vg.data[j] * (row[j] - mean) * inv + vb.data[j];
            }
        }
        let g = self.ng(a) || self.ng(gamma) || self.ng(beta);
        self.push(Op::LayerNorm { a, gamma, beta }, out, g)
    }

    /// Select rows of `table` by index (duplicates allowed).
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let vt = &self.nodes[table.0].value;
        let c = vt.cols;
        let mut out = Mat::zeros(idx.len(), c);
        for (r, &i) in idx.iter().enumerate() {
            out.data[r * c..(r + 1) * c].copy_from_slice(vt.row(i));
        }
        let g = self.ng(table);
        self.push(Op::GatherRows { table, idx: Rc::new(idx) }, out, g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.nodes[parts[0].0].value.cols;
        let rows: usize = parts.iter().map(|p| self.nodes[p.0].value.rows).sum();
        let mut out = Mat::zeros(rows, c);
        let mut r0 = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.cols, c, "concat_rows width mismatch");
            out.data[r0 * c..r0 * c + v.data.len()].copy_from_slice(&v.data);
            r0 += v.rows;
        }
        let g = parts.iter().any(|p| self.ng(*p));
        self.push(Op::ConcatRows(parts.to_vec()), out, g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.nodes[parts[0].0].value.rows;
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut out = Mat::zeros(r, cols);
        let mut c0 = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.rows, r, "concat_cols height mismatch");
            for i in 0..r {
                out.data[i * cols + c0..i * cols + c0 + v.cols].copy_from_slice(v.row(i));
            }
            c0 += v.cols;
        }
        let g = parts.iter().any(|p| self.ng(*p));
        self.push(Op::ConcatCols(parts.to_vec()), out, g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert!(start + len <= va.cols);
        let mut out = Mat::zeros(va.rows, len);
        for r in 0..va.rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&va.data[r * va.cols + start..r * va.cols + start + len]);
        }
        let g = self.ng(a);
        self.push(Op::SliceCols { a, start, len }, out, g)
    }

    /// Sparse-matrix × dense product with a constant sparse structure.
    pub fn spmm(&mut self, mat: Rc<SparseMat>, x: Var) -> Var {
        let out = mat.apply(&self.nodes[x.0].value);
        let g = self.ng(x);
        self.push(Op::SpMM { mat, x }, out, g)
    }

    /// Identity on values; blocks gradient flow.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.clone();
        self.push(Op::StopGrad, out, false)
    }

    // ---- composites ----

    /// Sum of squared entries as a scalar node.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum_all(sq)
    }

    /// Rows L2-normalized with an epsilon guard (zero rows map to zero-ish).
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let sq = self.mul(a, a);
        let rs = self.row_sum(sq);
        let inv = self.rsqrt_eps(rs, eps);
        self.mul_col_broadcast(a, inv)
    }

    /// Pairwise cosine similarity: rows of a vs rows of b → (ra×rb).
    pub fn cosine_matrix(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let an = self.normalize_rows(a, eps);
        let bn = self.normalize_rows(b, eps);
        self.matmul_nt(an, bn)
    }

    /// Mean over the first `valid` rows: (n×d) → (1×d). `valid` must be ≥ 1.
    pub fn mean_rows_prefix(&mut self, a: Var, valid: usize) -> Var {
        let n = self.nodes[a.0].value.rows;
        assert!(valid >= 1 && valid <= n);
        let mut w = Mat::zeros(1, n);
        for j in 0..valid {
            w.data[j] = 1.0 / valid as f64;
        }
        let wv = self.constant(w);
        self.matmul(wv, a)
    }

    // ---- backward ----

    /// Run the reverse sweep from a scalar loss. Gradients are then
    /// available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) {
        let vl = &self.nodes[loss.0].value;
        assert_eq!((vl.rows, vl.cols), (1, 1), "backward wants a scalar loss");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Mat::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn accum(&mut self, v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &Mat) {
        // Values are read before mutation of grads; ops own no aliasing.
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                let neg = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|x| -x).collect());
                self.accum(b, neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let ga = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
                );
                let gb = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect(),
                );
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::Scale(a, s) => {
                let (a, s) = (*a, *s);
                let ga = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|x| x * s).collect());
                self.accum(a, ga);
            }
            Op::AddRowBroadcast(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                let mut gb = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        gb.data[c] += g.data[r * g.cols + c];
                    }
                }
                self.accum(b, gb);
            }
            Op::MulColBroadcast(a, b) => {
                let (a, b) = (*a, *b);
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let mut ga = Mat::zeros(g.rows, g.cols);
                let mut gb = Mat::zeros(g.rows, 1);
                for r in 0..g.rows {
                    let s = vb.data[r];
                    let mut acc = 0.0;
                    for c in 0..g.cols {
                        let gi = g.data[r * g.cols + c];
                        ga.data[r * g.cols + c] = gi * s;
                        acc += gi * va.data[r * g.cols + c];
                    }
                    gb.data[r] = acc;
                }
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::ScaleByVar(a, s) => {
                let (a, s) = (*a, *s);
                let va = self.nodes[a.0].value.clone();
                let sv = self.nodes[s.0].value.data[0];
                let ga = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|x| x * sv).collect());
                let gs: f64 = g.data.iter().zip(&va.data).map(|(x, y)| x * y).sum();
                self.accum(a, ga);
                self.accum(s, Mat::scalar(gs));
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let ga = g.matmul_nt(&vb);
                let gb = va.matmul_tn(g);
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::MatMulNT(a, b) => {
                let (a, b) = (*a, *b);
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let ga = g.matmul(&vb);
                let gb = g.matmul_tn(&va);
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::Transpose(a) => {
                let a = *a;
                self.accum(a, g.transpose());
            }
            Op::Relu(a) => {
                let a = *a;
                let va = self.nodes[a.0].value.clone();
                let ga = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&va.data).map(|(x, v)| if *v > 0.0 { *x } else { 0.0 }).collect(),
                );
                self.accum(a, ga);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let out = self.nodes[i].value.clone();
                let ga = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&out.data).map(|(x, s)| x * s * (1.0 - s)).collect(),
                );
                self.accum(a, ga);
            }
            Op::Ln(a) => {
                let a = *a;
                let va = self.nodes[a.0].value.clone();
                let ga = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&va.data).map(|(x, v)| x / v).collect(),
                );
                self.accum(a, ga);
            }
            Op::Recip(a) => {
                let a = *a;
                let va = self.nodes[a.0].value.clone();
                let ga = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&va.data).map(|(x, v)| -x / (v * v)).collect(),
                );
                self.accum(a, ga);
            }
            Op::RsqrtEps(a, eps) => {
                let (a, eps) = (*a, *eps);
                let va = self.nodes[a.0].value.clone();
                let ga = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&va.data)
                        .map(|(x, v)| x * (-0.5) * (v + eps).powf(-1.5))
                        .collect(),
                );
                self.accum(a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let va = self.nodes[a.0].value.clone();
                let ga = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&va.data)
                        .map(|(x, v)| if *v > lo && *v < hi { *x } else { 0.0 })
                        .collect(),
                );
                self.accum(a, ga);
            }
            Op::RowSum(a) => {
                let a = *a;
                let va_shape = (self.nodes[a.0].value.rows, self.nodes[a.0].value.cols);
                let mut ga = Mat::zeros(va_shape.0, va_shape.1);
                for r in 0..va_shape.0 {
                    for c in 0..va_shape.1 {
                        ga.data[r * va_shape.1 + c] = g.data[r];
                    }
                }
                self.accum(a, ga);
            }
            Op::SumAll(a) => {
                let a = *a;
                let va_shape = (self.nodes[a.0].value.rows, self.nodes[a.0].value.cols);
                let ga = Mat::filled(va_shape.0, va_shape.1, g.data[0]);
                self.accum(a, ga);
            }
            Op::RowLse(a) => {
                let a = *a;
                let va = self.nodes[a.0].value.clone();
                let out = self.nodes[i].value.clone();
                let mut ga = Mat::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    let lse = out.data[r];
                    for c in 0..va.cols {
                        ga.data[r * va.cols + c] = g.data[r] * (va.at(r, c) - lse).exp();
                    }
                }
                self.accum(a, ga);
            }
            Op::Diag(a) => {
                let a = *a;
                let n = self.nodes[a.0].value.rows;
                let mut ga = Mat::zeros(n, n);
                for r in 0..n {
                    ga.data[r * n + r] = g.data[r];
                }
                self.accum(a, ga);
            }
            Op::SoftmaxRows { a, valid_cols, dead_rows_from } => {
                let (a, vc, dr) = (*a, *valid_cols, *dead_rows_from);
                let out = self.nodes[i].value.clone();
                let mut ga = Mat::zeros(out.rows, out.cols);
                for r in 0..dr {
                    let mut dot = 0.0;
                    for c in 0..vc {
                        dot += g.data[r * out.cols + c] * out.data[r * out.cols + c];
                    }
                    for c in 0..vc {
                        let p = out.data[r * out.cols + c];
                        ga.data[r * out.cols + c] = p * (g.data[r * out.cols + c] - dot);
                    }
                }
                self.accum(a, ga);
            }
            Op::LayerNorm { a, gamma, beta } => {
                let (a, gamma, beta) = (*a, *gamma, *beta);
                let va = self.nodes[a.0].value.clone();
                let vg = self.nodes[gamma.0].value.clone();
                let c = va.cols;
                let cf = c as f64;
                let mut ga = Mat::zeros(va.rows, c);
                let mut ggamma = Mat::zeros(1, c);
                let mut gbeta = Mat::zeros(1, c);
                for r in 0..va.rows {
                    let row = va.row(r);
                    let mean = row.iter().sum::<f64>() / cf;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cf;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv).collect();
                    let grow = &g.data[r * c..(r + 1) * c];
                    let mut m1 = 0.0; // mean(γ∘g)
                    let mut m2 = 0.0; // mean(γ∘g∘x̂)
                    for j in 0..c {
                        let gg = vg.data[j] * grow[j];
                        m1 += gg;
                        m2 += gg * xhat[j];
                        ggamma.data[j] += grow[j] * xhat[j];
                        gbeta.data[j] += grow[j];
                    }
                    m1 /= cf;
                    m2 /= cf;
                    for j in 0..c {
                        let gg = vg.data[j] * grow[j];
                        ga.data[r * c + j] = (gg - m1 - xhat[j] * m2) * inv;
                    }
                }
                self.accum(a, ga);
                self.accum(gamma, ggamma);
                self.accum(beta, gbeta);
            }
            Op::GatherRows { table, idx } => {
                let table = *table;
                let idx = Rc::clone(idx);
                let (tr, tc) = (self.nodes[table.0].value.rows, self.nodes[table.0].value.cols);
                let mut gt = Mat::zeros(tr, tc);
                for (r, &i_row) in idx.iter().enumerate() {
                    for c in 0..tc {
                        gt.data[i_row * tc + c] += g.data[r * tc + c];
                    }
                }
                self.accum(table, gt);
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let c = g.cols;
                let mut r0 = 0;
                for p in parts {
                    let pr = self.nodes[p.0].value.rows;
                    let mut gp = Mat::zeros(pr, c);
                    gp.data.copy_from_slice(&g.data[r0 * c..(r0 + pr) * c]);
                    r0 += pr;
                    self.accum(p, gp);
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let rows = g.rows;
                let total = g.cols;
                let mut c0 = 0;
                for p in parts {
                    let pc = self.nodes[p.0].value.cols;
                    let mut gp = Mat::zeros(rows, pc);
                    for r in 0..rows {
                        gp.data[r * pc..(r + 1) * pc]
                            .copy_from_slice(&g.data[r * total + c0..r * total + c0 + pc]);
                    }
                    c0 += pc;
                    self.accum(p, gp);
                }
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                let (ar, ac) = (self.nodes[a.0].value.rows, self.nodes[a.0].value.cols);
                let mut ga = Mat::zeros(ar, ac);
                for r in 0..ar {
                    ga.data[r * ac + start..r * ac + start + len]
                        .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                }
                self.accum(a, ga);
            }
            Op::SpMM { mat, x } => {
                let x = *x;
                let mat = Rc::clone(mat);
                let (xr, xc) = (self.nodes[x.0].value.rows, self.nodes[x.0].value.cols);
                let mut gx = Mat::zeros(xr, xc);
                mat.apply_transpose_into(g, &mut gx);
                self.accum(x, gx);
            }
        }
    }

    /// Gradient of the last backward pass w.r.t. `v` (zeros if untouched).
    pub fn grad(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let m = &self.nodes[v.0].value;
                Mat::zeros(m.rows, m.cols)
            }
        }
    }

    /// Gradient if the reverse sweep reached `v`, None otherwise.
    pub fn grad_opt(&self, v: Var) -> Option<Mat> {
        self.grads[v.0].clone()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam state for one tensor.
#[derive(Clone, Debug)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameter tensors plus Adam optimizer state.
#[derive(Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    slots: Vec<AdamSlot>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), slots: Vec::new(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, value: Mat) -> usize {
        debug_assert!(!self.names.iter().any(|n| n == name), "duplicate param {name}");
        let n = value.data.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.slots.push(AdamSlot { m: vec![0.0; n], v: vec![0.0; n] });
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.values[i]
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self.values[self.index_of(name).unwrap_or_else(|| panic!("no param {name}"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        let i = self.index_of(name).unwrap_or_else(|| panic!("no param {name}"));
        &mut self.values[i]
    }

    /// Bind every parameter into a tape; returns vars parallel to indices.
    pub fn bind_all(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    /// One Adam update from gradients parallel to the store layout.
    /// Entries with `None` gradient are skipped (their moments stay put).
    pub fn adam_step(&mut self, grads: &[Option<Mat>], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - B1.powf(t);
        let bc2 = 1.0 - B2.powf(t);
        for (i, gopt) in grads.iter().enumerate() {
            let Some(g) = gopt else { continue };
            let slot = &mut self.slots[i];
            let val = &mut self.values[i];
            for (j, gj) in g.data.iter().enumerate() {
                slot.m[j] = B1 * slot.m[j] + (1.0 - B1) * gj;
                slot.v[j] = B2 * slot.v[j] + (1.0 - B2) * gj * gj;
                let mhat = slot.m[j] / bc1;
                let vhat = slot.v[j] / bc2;
                val.data[j] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }

    /// Reset Adam moments for one row of a tensor (used by dead-code restarts).
    pub fn reset_moments_row(&mut self, i: usize, row: usize) {
        let cols = self.values[i].cols;
        for j in row * cols..(row + 1) * cols {
            self.slots[i].m[j] = 0.0;
            self.slots[i].v[j] = 0.0;
        }
    }

    /// Flat snapshot of all parameter values (for freeze checks / best-epoch
    /// checkpointing).
    pub fn snapshot(&self) -> Vec<Mat> {
        self.values.clone()
    }

    pub fn restore(&mut self, snap: &[Mat]) {
        assert_eq!(snap.len(), self.values.len());
        for (v, s) in self.values.iter_mut().zip(snap) {
            *v = s.clone();
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Bind all parameters into a tape with name-based access.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> BoundParams<'a> {
        BoundParams { store: self, vars: self.bind_all(tape) }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// All parameters of a store bound as tape leaves for one forward pass.
pub struct BoundParams<'a> {
    store: &'a ParamStore,
    pub vars: Vec<Var>,
}

impl<'a> BoundParams<'a> {
    pub fn v(&self, name: &str) -> Var {
        self.vars[self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("no param {name}"))]
    }

    /// Per-parameter gradients aligned with the store layout, None when the
    /// loss never touched the parameter.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Mat>> {
        self.vars.iter().map(|v| tape.grad_opt(*v)).collect()
    }

    /// Σ‖θ‖² over every bound parameter.
    pub fn l2_all(&self, tape: &mut Tape) -> Var {
        let mut acc: Option<Var> = None;
        for v in self.vars.clone() {
            let s = tape.sum_sq(v);
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s),
            });
        }
        acc.expect("empty parameter store")
    }
}
