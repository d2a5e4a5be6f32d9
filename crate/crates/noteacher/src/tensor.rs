//! Dense row-major matrices and a tape-based reverse-mode autodiff engine.
//!
//! Every training step builds a fresh [`Tape`]: parameters and batch data
//! enter as leaves, operations append nodes, and [`Tape::backward`] walks the
//! arena once in reverse to accumulate gradients. All arithmetic is `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense matrix stored row-major. A scalar is `1x1`, a row vector `1xc`,
/// a column vector `rx1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zero tensor. Dimensions must be positive.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    /// Constant-filled tensor. Dimensions must be positive.
    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive");
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    /// Build from row-major data; `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive");
        assert_eq!(data.len(), rows * cols, "data length must match dimensions");
        Tensor { rows, cols, data }
    }

    /// A `1x1` tensor.
    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    /// Build from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "need at least one row");
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Tensor::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single entry of a `1x1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() needs a scalar tensor");
        self.data[0]
    }

    /// One row as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }

    /// Plain (non-tape) matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.cols, rhs.rows, "inner dimensions must agree");
        let mut out = Tensor::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == 0.0 {
                    continue;
                }
                for c in 0..rhs.cols {
                    out[(r, c)] += a * rhs[(k, c)];
                }
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Tensor {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Tensor {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    MeanAll(NodeId),
    SumAll(NodeId),
    RowSum(NodeId),
    LogSumExpRows(NodeId),
    AddRowVec(NodeId, NodeId),
    AddColVec(NodeId, NodeId),
    /// Column-wise max over rows; the payload holds each column's argmax row.
    MaxOverRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one scalar root with respect to every node on the tape.
pub struct Gradients {
    g: Vec<Tensor>,
}

impl Gradients {
    /// Gradient with respect to the given node (zero if the node does not
    /// influence the root).
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        &self.g[id.0]
    }
}

/// Append-only arena of operations. Build the expression, then call
/// [`backward`](Tape::backward) on a scalar node.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Enter a tensor as a differentiable leaf (parameters and constants
    /// alike; gradients are simply never read for constants).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    /// The forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Forward value of a `1x1` node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.value(id).item()
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (la, lb) = (self.value(a).shape(), self.value(b).shape());
        if la != lb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: la,
                rhs: lb,
            });
        }
        Ok(())
    }

    /// Elementwise sum.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Add a constant to every entry.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        Ok(self.push(Op::AddScalar(a), v))
    }

    /// Scale every entry by a constant.
    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * c);
        Ok(self.push(Op::MulScalar(a, c), v))
    }

    /// Elementwise negation.
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul_scalar(a, -1.0)
    }

    /// Matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (la, lb) = (self.value(a).shape(), self.value(b).shape());
        if la.1 != lb.0 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: la,
                rhs: lb,
            });
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        Ok(self.push(Op::Relu(a), v))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        Ok(self.push(Op::Tanh(a), v))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        // 1/(1+e^-x) overflows e^-x for very negative x; branch on sign.
        let v = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        Ok(self.push(Op::Sigmoid(a), v))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                value: bad,
            });
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(Op::Log(a), v))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        Ok(self.push(Op::Exp(a), v))
    }

    /// Clamp entries into `[lo, hi]`. Gradient passes through entries that
    /// were within bounds (inclusive) and is zero where the value was cut.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Domain {
                op: "clamp bounds",
                value: lo,
            });
        }
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        Ok(self.push(Op::Clamp(a, lo, hi), v))
    }

    /// Mean over all entries, as a `1x1` node.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let n = (t.rows() * t.cols()) as f64;
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / n);
        Ok(self.push(Op::MeanAll(a), v))
    }

    /// Sum over all entries, as a `1x1` node.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        Ok(self.push(Op::SumAll(a), v))
    }

    /// Per-row sum: `rxc -> rx1`.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let mut v = Tensor::zeros(t.rows(), 1);
        for r in 0..t.rows() {
            v[(r, 0)] = t.row(r).iter().sum();
        }
        Ok(self.push(Op::RowSum(a), v))
    }

    /// Per-row log-sum-exp, computed stably: `rxc -> rx1`.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let mut v = Tensor::zeros(t.rows(), 1);
        for r in 0..t.rows() {
            let row = t.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            v[(r, 0)] = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        }
        Ok(self.push(Op::LogSumExpRows(a), v))
    }

    /// Broadcast-add a `1xc` row vector to every row of an `rxc` matrix.
    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (la, lv) = (self.value(a).shape(), self.value(v).shape());
        if lv.0 != 1 || lv.1 != la.1 {
            return Err(Error::ShapeMismatch {
                op: "add_row_vec",
                lhs: la,
                rhs: lv,
            });
        }
        let (ta, tv) = (self.value(a), self.value(v));
        let mut out = ta.clone();
        for r in 0..la.0 {
            for c in 0..la.1 {
                out[(r, c)] += tv[(0, c)];
            }
        }
        Ok(self.push(Op::AddRowVec(a, v), out))
    }

    /// Broadcast-add an `rx1` column vector to every column of an `rxc` matrix.
    pub fn add_col_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (la, lv) = (self.value(a).shape(), self.value(v).shape());
        if lv.1 != 1 || lv.0 != la.0 {
            return Err(Error::ShapeMismatch {
                op: "add_col_vec",
                lhs: la,
                rhs: lv,
            });
        }
        let (ta, tv) = (self.value(a), self.value(v));
        let mut out = ta.clone();
        for r in 0..la.0 {
            for c in 0..la.1 {
                out[(r, c)] += tv[(r, 0)];
            }
        }
        Ok(self.push(Op::AddColVec(a, v), out))
    }

    /// Column-wise max over rows: `rxc -> 1xc`. Ties pick the lowest row, and
    /// the gradient routes only to the winning entry per column.
    pub fn max_over_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let mut v = Tensor::zeros(1, t.cols());
        let mut arg = vec![0usize; t.cols()];
        for c in 0..t.cols() {
            let mut best = t[(0, c)];
            for r in 1..t.rows() {
                if t[(r, c)] > best {
                    best = t[(r, c)];
                    arg[c] = r;
                }
            }
            v[(0, c)] = best;
        }
        Ok(self.push(Op::MaxOverRows(a, arg), v))
    }

    /// Stack nodes vertically; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Domain {
                op: "concat_rows of nothing",
                value: 0.0,
            });
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: (0, cols),
                    rhs: t.shape(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let v = Tensor::from_vec(rows, cols, data);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    /// Reverse pass from a scalar root. Returns gradients for every node;
    /// leaves created after the root get zeros.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_shape = self.value(root).shape();
        if root_shape != (1, 1) {
            return Err(Error::NonScalarRoot { shape: root_shape });
        }
        let mut g: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.rows(), n.value.cols()))
            .collect();
        g[root.0] = Tensor::scalar(1.0);

        for i in (0..=root.0).rev() {
            let gi = g[i].clone();
            if gi.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut g[a.0], &gi, |x| x);
                    accumulate(&mut g[b.0], &gi, |x| x);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut g[a.0], &gi, |x| x);
                    accumulate(&mut g[b.0], &gi, |x| -x);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                    accumulate_zip(&mut g[a.0], &gi, &vb, |gx, y| gx * y);
                    accumulate_zip(&mut g[b.0], &gi, &va, |gx, y| gx * y);
                }
                Op::AddScalar(a) => accumulate(&mut g[a.0], &gi, |x| x),
                Op::MulScalar(a, c) => {
                    let c = *c;
                    accumulate(&mut g[a.0], &gi, |x| x * c);
                }
                Op::MatMul(a, b) => {
                    let da = gi.matmul(&self.value(*b).transpose());
                    let db = self.value(*a).transpose().matmul(&gi);
                    accumulate(&mut g[a.0], &da, |x| x);
                    accumulate(&mut g[b.0], &db, |x| x);
                }
                Op::Relu(a) => {
                    let va = self.value(*a).clone();
                    accumulate_zip(
                        &mut g[a.0],
                        &gi,
                        &va,
                        |gx, x| if x > 0.0 { gx } else { 0.0 },
                    );
                }
                Op::Tanh(a) => {
                    accumulate_zip(&mut g[a.0], &gi, &node.value, |gx, t| gx * (1.0 - t * t));
                }
                Op::Sigmoid(a) => {
                    accumulate_zip(&mut g[a.0], &gi, &node.value, |gx, s| gx * s * (1.0 - s));
                }
                Op::Log(a) => {
                    let va = self.value(*a).clone();
                    accumulate_zip(&mut g[a.0], &gi, &va, |gx, x| gx / x);
                }
                Op::Exp(a) => {
                    accumulate_zip(&mut g[a.0], &gi, &node.value, |gx, e| gx * e);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let va = self.value(*a).clone();
                    accumulate_zip(&mut g[a.0], &gi, &va, |gx, x| {
                        if (lo..=hi).contains(&x) {
                            gx
                        } else {
                            0.0
                        }
                    });
                }
                Op::MeanAll(a) => {
                    let t = &mut g[a.0];
                    let n = (t.rows() * t.cols()) as f64;
                    let gs = gi.item() / n;
                    for x in t.data_mut() {
                        *x += gs;
                    }
                }
                Op::SumAll(a) => {
                    let gs = gi.item();
                    for x in g[a.0].data_mut() {
                        *x += gs;
                    }
                }
                Op::RowSum(a) => {
                    let t = &mut g[a.0];
                    for r in 0..t.rows() {
                        let gr = gi[(r, 0)];
                        for c in 0..t.cols() {
                            t[(r, c)] += gr;
                        }
                    }
                }
                Op::LogSumExpRows(a) => {
                    let va = self.value(*a).clone();
                    let t = &mut g[a.0];
                    for r in 0..t.rows() {
                        let (gr, lse) = (gi[(r, 0)], node.value[(r, 0)]);
                        for c in 0..t.cols() {
                            t[(r, c)] += gr * (va[(r, c)] - lse).exp();
                        }
                    }
                }
                Op::AddRowVec(a, v) => {
                    accumulate(&mut g[a.0], &gi, |x| x);
                    let t = &mut g[v.0];
                    for c in 0..gi.cols() {
                        for r in 0..gi.rows() {
                            t[(0, c)] += gi[(r, c)];
                        }
                    }
                }
                Op::AddColVec(a, v) => {
                    accumulate(&mut g[a.0], &gi, |x| x);
                    let t = &mut g[v.0];
                    for r in 0..gi.rows() {
                        for c in 0..gi.cols() {
                            t[(r, 0)] += gi[(r, c)];
                        }
                    }
                }
                Op::MaxOverRows(a, arg) => {
                    let t = &mut g[a.0];
                    for c in 0..gi.cols() {
                        t[(arg[c], c)] += gi[(0, c)];
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let t = &mut g[p.0];
                        for r in 0..t.rows() {
                            for c in 0..t.cols() {
                                t[(r, c)] += gi[(row + r, c)];
                            }
                        }
                        row += t.rows();
                    }
                }
            }
        }
        Ok(Gradients { g })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

/// `dst += f(src)`, elementwise.
fn accumulate(dst: &mut Tensor, src: &Tensor, f: impl Fn(f64) -> f64) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += f(s);
    }
}

/// `dst += f(src, aux)`, elementwise over two same-shape tensors.
fn accumulate_zip(dst: &mut Tensor, src: &Tensor, aux: &Tensor, f: impl Fn(f64, f64) -> f64) {
    for ((d, &s), &x) in dst.data_mut().iter_mut().zip(src.data()).zip(aux.data()) {
        *d += f(s, x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn matmul_known_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().shape(), (3, 2));
        assert_eq!(a.transpose()[(2, 1)], 6.0);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 3));
        let b = t.leaf(Tensor::zeros(3, 2));
        assert!(matches!(
            t.add(a, b),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
        assert!(t.matmul(a, b).is_ok());
        assert!(t.matmul(a, a).is_err());
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(1, 2, vec![1.0, 0.0]));
        assert!(matches!(t.log(a), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 2));
        assert!(matches!(
            t.backward(a),
            Err(Error::NonScalarRoot { shape: (2, 2) })
        ));
    }

    #[test]
    fn reused_node_accumulates_gradients() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let sq = t.mul(x, x).unwrap();
        let y = t.add(sq, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 7.0);
    }

    #[test]
    fn max_over_rows_ties_pick_lowest_row() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[
            vec![1.0, 5.0],
            vec![1.0, 7.0],
            vec![1.0, 7.0],
        ]));
        let m = t.max_over_rows(a).unwrap();
        assert_eq!(t.value(m).data(), &[1.0, 7.0]);
        let s = t.sum_all(m).unwrap();
        let g = t.backward(s).unwrap();
        // Column 0 ties across all rows -> row 0; column 1 ties rows 1,2 -> row 1.
        assert_eq!(g.wrt(a).data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn logsumexp_matches_naive_and_is_stable() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[
            vec![0.0, 1.0, 2.0],
            vec![1000.0, 1000.0, 1000.0],
        ]));
        let l = t.logsumexp_rows(a).unwrap();
        let naive = (0f64.exp() + 1f64.exp() + 2f64.exp()).ln();
        assert!((t.value(l)[(0, 0)] - naive).abs() < 1e-12);
        assert!((t.value(l)[(1, 0)] - (1000.0 + 3f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(1, 2, vec![800.0, -800.0]));
        let s = t.sigmoid(a).unwrap();
        assert_eq!(t.value(s)[(0, 0)], 1.0);
        assert_eq!(t.value(s)[(0, 1)], 0.0);
    }

    #[test]
    fn clamp_blocks_gradient_outside_bounds() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(1, 3, vec![-1.0, 0.5, 2.0]));
        let c = t.clamp(a, 0.0, 1.0).unwrap();
        assert_eq!(t.value(c).data(), &[0.0, 0.5, 1.0]);
        let s = t.sum_all(c).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(a).data(), &[0.0, 1.0, 0.0]);
    }

    /// Central finite difference of `build` with respect to leaf `which`,
    /// perturbing one entry at a time.
    fn finite_diff(
        build: &dyn Fn(&mut Tape, &[NodeId]) -> f64,
        leaves: &mut [Tensor],
        which: usize,
    ) -> Tensor {
        let h = 1e-5;
        let mut out = Tensor::zeros(leaves[which].rows(), leaves[which].cols());
        for k in 0..leaves[which].data().len() {
            let orig = leaves[which].data()[k];
            leaves[which].data_mut()[k] = orig + h;
            let fp = eval(build, leaves);
            leaves[which].data_mut()[k] = orig - h;
            let fm = eval(build, leaves);
            leaves[which].data_mut()[k] = orig;
            out.data_mut()[k] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn eval(build: &dyn Fn(&mut Tape, &[NodeId]) -> f64, leaves: &[Tensor]) -> f64 {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|l| t.leaf(l.clone())).collect();
        build(&mut t, &ids)
    }

    /// One expression that exercises every operation, checked against
    /// central differences for every leaf.
    #[test]
    fn finite_difference_covers_all_ops() {
        let mut rng = StreamRng::new(20240817, "fd");
        let rand = |rng: &mut StreamRng, rows, cols| {
            let mut t = Tensor::zeros(rows, cols);
            for x in t.data_mut() {
                // Stay away from relu/max kinks by avoiding tiny magnitudes.
                let m = rng.uniform(0.2, 1.2);
                *x = if rng.bernoulli(0.5) { m } else { -m };
            }
            t
        };
        let x = rand(&mut rng, 3, 4);
        let w = rand(&mut rng, 4, 2);
        let b = rand(&mut rng, 1, 2);
        let vcol = rand(&mut rng, 3, 1);
        let mut leaves = vec![x, w, b, vcol];

        let build = |t: &mut Tape, ids: &[NodeId]| -> f64 {
            let (x, w, b, vcol) = (ids[0], ids[1], ids[2], ids[3]);
            let xw = t.matmul(x, w).unwrap();
            let pre = t.add_row_vec(xw, b).unwrap();
            let h = t.relu(pre).unwrap();
            let s = t.sigmoid(pre).unwrap();
            let th = t.tanh(h).unwrap();
            let cl = t.clamp(s, 0.2, 0.8).unwrap();
            let shifted = t.add_scalar(cl, 0.5).unwrap();
            let lg = t.log(shifted).unwrap();
            let sc = t.mul_scalar(th, 0.3).unwrap();
            let ex = t.exp(sc).unwrap();
            let m = t.mul(lg, ex).unwrap();
            let d = t.sub(m, s).unwrap();
            let dv = t.add_col_vec(d, vcol).unwrap();
            let lse = t.logsumexp_rows(dv).unwrap();
            let rs = t.row_sum(m).unwrap();
            let q = t.add(lse, rs).unwrap();
            let dq = t.add_col_vec(dv, q).unwrap();
            let mx = t.max_over_rows(dq).unwrap();
            let cc = t.concat_rows(&[dq, dv]).unwrap();
            let nc = t.neg(cc).unwrap();
            let mean = t.mean_all(nc).unwrap();
            let msum = t.sum_all(mx).unwrap();
            let root = t.add(mean, msum).unwrap();
            t.scalar_value(root)
        };

        // Analytic gradients.
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        {
            let t = &mut tape;
            let xw = t.matmul(ids[0], ids[1]).unwrap();
            let pre = t.add_row_vec(xw, ids[2]).unwrap();
            let h = t.relu(pre).unwrap();
            let s = t.sigmoid(pre).unwrap();
            let th = t.tanh(h).unwrap();
            let cl = t.clamp(s, 0.2, 0.8).unwrap();
            let shifted = t.add_scalar(cl, 0.5).unwrap();
            let lg = t.log(shifted).unwrap();
            let sc = t.mul_scalar(th, 0.3).unwrap();
            let ex = t.exp(sc).unwrap();
            let m = t.mul(lg, ex).unwrap();
            let d = t.sub(m, s).unwrap();
            let dv = t.add_col_vec(d, ids[3]).unwrap();
            let lse = t.logsumexp_rows(dv).unwrap();
            let rs = t.row_sum(m).unwrap();
            let q = t.add(lse, rs).unwrap();
            let dq = t.add_col_vec(dv, q).unwrap();
            let mx = t.max_over_rows(dq).unwrap();
            let cc = t.concat_rows(&[dq, dv]).unwrap();
            let nc = t.neg(cc).unwrap();
            let mean = t.mean_all(nc).unwrap();
            let msum = t.sum_all(mx).unwrap();
            let root = t.add(mean, msum).unwrap();
            let grads = t.backward(root).unwrap();
            for (which, id) in ids.iter().enumerate() {
                let fd = finite_diff(&build, &mut leaves, which);
                let ad = grads.wrt(*id);
                for (k, (&f, &a)) in fd.data().iter().zip(ad.data()).enumerate() {
                    assert!(
                        (f - a).abs() <= 1e-7 + 1e-5 * f.abs(),
                        "leaf {which} entry {k}: fd {f} vs ad {a}"
                    );
                }
            }
        }
    }
}
