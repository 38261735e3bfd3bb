//! Reverse-mode automatic differentiation over dense row-major `f64`
//! matrices, plus a central-finite-difference gradient checker.
//!
//! Operations are recorded in creation order on a [`Tape`]; node ids are
//! indices into the record, so inputs always precede outputs and the
//! backward sweep visits each node exactly once in reverse. Gradients
//! accumulate (`+=`) into per-node slots allocated by [`Tape::backward`].
//! Every forward op checks its output for non-finite values and poisons
//! the tape instead of propagating silently; `backward` and the value
//! accessors surface that state as an error.
//!
//! All reductions are sequential with a fixed order — no parallelism —
//! so repeated runs are bit-identical.

use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = a @ b
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    /// out = x^c for constant c. Non-integer c requires x > 0.
    Pow(NodeId, f64),
    /// rows×cols -> rows×1
    RowSum(NodeId),
    RowMean(NodeId),
    /// -> 1×1
    SumAll(NodeId),
    Tanh(NodeId),
    /// Gradient passes where lo <= x <= hi, else zero.
    Clamp(NodeId, f64, f64),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    /// out[r] = x[idx[r]] (whole rows); backward scatter-adds.
    GatherRows(NodeId, Vec<usize>),
    /// rows×cols -> rows×1, out[r] = x[r, idx[r]].
    PickPerRow(NodeId, Vec<usize>),
    /// rows×1 -> rows×cols (repeat the column).
    BroadcastCol(NodeId, usize),
    /// 1×cols -> rows×cols (repeat the row).
    BroadcastRow(NodeId, usize),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    /// rows×cols -> rows×1 with argmax subgradient; ties go to the lowest
    /// column index.
    RowMax(NodeId),
    /// As RowMax but argmin.
    RowMin(NodeId),
}

struct Node {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// Recorded computation: nodes in topological (creation) order plus
/// gradient slots populated by [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    poisoned: Option<String>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            poisoned: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First non-finite op hit during the forward pass, if any.
    pub fn error(&self) -> Option<&str> {
        self.poisoned.as_deref()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    /// Forward values of a node. Errors if the tape is poisoned.
    pub fn values(&self, id: NodeId) -> Result<&[f64]> {
        match &self.poisoned {
            Some(op) => Err(Error::Numeric(format!("non-finite output in op {op}"))),
            None => Ok(&self.nodes[id].values),
        }
    }

    /// Gradient slot of a node; valid after `backward`.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        assert!(
            !self.grads.is_empty(),
            "grad() called before backward()"
        );
        &self.grads[id]
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(rows * cols, values.len());
        if self.poisoned.is_none() && !values.iter().all(|v| v.is_finite()) {
            self.poisoned = Some(format!("{op:?}"));
        }
        self.nodes.push(Node {
            values,
            rows,
            cols,
            op,
        });
        self.nodes.len() - 1
    }

    // ── Construction ─────────────────────────────────────────────────

    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> NodeId {
        self.push(rows, cols, values, Op::Leaf)
    }

    pub fn leaf_mat(&mut self, m: &crate::util::Mat) -> NodeId {
        self.leaf(m.rows, m.cols, m.data.clone())
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(1, 1, vec![v])
    }

    /// Value copy with no backward rule linking it to `x`; gradients never
    /// flow through the returned node into `x`'s ancestors.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let values = self.nodes[x].values.clone();
        let (r, c) = self.shape(x);
        self.push(r, c, values, Op::Leaf)
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a].values;
            let bv = &self.nodes[b].values;
            for i in 0..m {
                for kk in 0..k {
                    let aik = av[i * k + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[kk * n..(kk + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        self.push(m, n, out, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let mut out = vec![0.0; r * c];
        let xv = &self.nodes[x].values;
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "add shape mismatch");
        let out = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x + y)
            .collect();
        self.push(r, c, out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "mul shape mismatch");
        let out = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x * y)
            .collect();
        self.push(r, c, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let (r, c) = self.shape(x);
        let out = self.nodes[x].values.iter().map(|v| v * s).collect();
        self.push(r, c, out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f64) -> NodeId {
        let (r, c) = self.shape(x);
        let out = self.nodes[x].values.iter().map(|v| v + s).collect();
        self.push(r, c, out, Op::AddScalar(x))
    }

    /// a - b, via the primitive add/scale pair.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let out = self.nodes[x].values.iter().map(|v| v.exp()).collect();
        self.push(r, c, out, Op::Exp(x))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let out = self.nodes[x].values.iter().map(|v| v.ln()).collect();
        self.push(r, c, out, Op::Ln(x))
    }

    pub fn pow(&mut self, x: NodeId, c: f64) -> NodeId {
        let (r, cl) = self.shape(x);
        let out = self.nodes[x].values.iter().map(|v| v.powf(c)).collect();
        self.push(r, cl, out, Op::Pow(x, c))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let out = self.nodes[x].values.iter().map(|v| v.tanh()).collect();
        self.push(r, c, out, Op::Tanh(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let (r, c) = self.shape(x);
        let out = self.nodes[x].values.iter().map(|v| v.clamp(lo, hi)).collect();
        self.push(r, c, out, Op::Clamp(x, lo, hi))
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let xv = &self.nodes[x].values;
        let out = (0..r).map(|i| xv[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(r, 1, out, Op::RowSum(x))
    }

    pub fn row_mean(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let xv = &self.nodes[x].values;
        let out = (0..r)
            .map(|i| xv[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        self.push(r, 1, out, Op::RowMean(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].values.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(x))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pr, r, "concat_cols row mismatch");
            let pv = &self.nodes[p].values;
            for i in 0..r {
                out[i * total + off..i * total + off + pc]
                    .copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        self.push(r, total, out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            assert_eq!(self.shape(p).1, c, "concat_rows col mismatch");
            out.extend_from_slice(&self.nodes[p].values);
        }
        self.push(total, c, out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let (r, c) = self.shape(x);
        assert!(start < end && end <= c, "slice_cols range");
        let w = end - start;
        let xv = &self.nodes[x].values;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        self.push(r, w, out, Op::SliceCols(x, start))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let (r, c) = self.shape(x);
        assert!(start < end && end <= r, "slice_rows range");
        let out = self.nodes[x].values[start * c..end * c].to_vec();
        self.push(end - start, c, out, Op::SliceRows(x, start))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let (r, c) = self.shape(x);
        let xv = &self.nodes[x].values;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather_rows index {i} out of {r}");
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        self.push(idx.len(), c, out, Op::GatherRows(x, idx.to_vec()))
    }

    pub fn pick_per_row(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(idx.len(), r, "pick_per_row needs one index per row");
        let xv = &self.nodes[x].values;
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "pick_per_row index {j} out of {c}");
                xv[i * c + j]
            })
            .collect();
        self.push(r, 1, out, Op::PickPerRow(x, idx.to_vec()))
    }

    pub fn broadcast_col(&mut self, x: NodeId, cols: usize) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(c, 1, "broadcast_col wants rows×1");
        let xv = &self.nodes[x].values;
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            out.extend(std::iter::repeat(xv[i]).take(cols));
        }
        self.push(r, cols, out, Op::BroadcastCol(x, cols))
    }

    pub fn broadcast_row(&mut self, x: NodeId, rows: usize) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(r, 1, "broadcast_row wants 1×cols");
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(&self.nodes[x].values);
        }
        self.push(rows, c, out, Op::BroadcastRow(x, rows))
    }

    /// Row-wise softmax with max-subtraction. Each output row is
    /// nonnegative and sums to 1; the backward rule is the exact softmax
    /// Jacobian `dz_i = a_i (g_i - sum_j g_j a_j)`.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                s += e;
            }
            for j in 0..c {
                out[i * c + j] /= s;
            }
        }
        self.push(r, c, out, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        self.push(r, c, out, Op::LogSoftmaxRows(x))
    }

    pub fn row_max(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let xv = &self.nodes[x].values;
        let out = (0..r)
            .map(|i| xv[i * c..(i + 1) * c].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        self.push(r, 1, out, Op::RowMax(x))
    }

    pub fn row_min(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let xv = &self.nodes[x].values;
        let out = (0..r)
            .map(|i| xv[i * c..(i + 1) * c].iter().cloned().fold(f64::INFINITY, f64::min))
            .collect();
        self.push(r, 1, out, Op::RowMin(x))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar node. Populates gradient slots for every
    /// node at or below `loss`; unreachable leaves hold zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if let Some(op) = &self.poisoned {
            return Err(Error::Numeric(format!("non-finite output in op {op}")));
        }
        let n = self.nodes[loss].values.len();
        if n != 1 {
            return Err(Error::Numeric(format!(
                "backward needs a scalar loss, got {n} elements"
            )));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|nd| vec![0.0; nd.values.len()])
            .collect();
        self.grads[loss][0] = 1.0;

        for id in (0..=loss).rev() {
            let op = self.nodes[id].op.clone();
            self.backward_op(id, &op);
        }
        Ok(())
    }

    fn backward_op(&mut self, id: NodeId, op: &Op) {
        // Skip nodes that received no gradient.
        if self.grads[id].iter().all(|&g| g == 0.0) {
            return;
        }
        match *op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.shape(a);
                let n = self.shape(b).1;
                // dA[i,kk] += sum_j g[i,j] * B[kk,j]
                {
                    let g = std::mem::take(&mut self.grads[id]);
                    {
                        let bv = &self.nodes[b].values;
                        let da = &mut self.grads[a];
                        for i in 0..m {
                            for kk in 0..k {
                                let mut s = 0.0;
                                let brow = &bv[kk * n..(kk + 1) * n];
                                let grow = &g[i * n..(i + 1) * n];
                                for j in 0..n {
                                    s += grow[j] * brow[j];
                                }
                                da[i * k + kk] += s;
                            }
                        }
                    }
                    // dB[kk,j] += sum_i A[i,kk] * g[i,j]
                    {
                        let av = &self.nodes[a].values;
                        let db = &mut self.grads[b];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for kk in 0..k {
                                let aik = av[i * k + kk];
                                if aik == 0.0 {
                                    continue;
                                }
                                let drow = &mut db[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    drow[j] += aik * grow[j];
                                }
                            }
                        }
                    }
                    self.grads[id] = g;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.shape(id);
                for i in 0..r {
                    for j in 0..c {
                        let g = self.grads[id][i * c + j];
                        self.grads[x][j * r + i] += g;
                    }
                }
            }
            Op::Add(a, b) => {
                let g = std::mem::take(&mut self.grads[id]);
                for (d, gv) in self.grads[a].iter_mut().zip(&g) {
                    *d += gv;
                }
                for (d, gv) in self.grads[b].iter_mut().zip(&g) {
                    *d += gv;
                }
                self.grads[id] = g;
            }
            Op::Mul(a, b) => {
                let g = std::mem::take(&mut self.grads[id]);
                for ((d, gv), bv) in self.grads[a].iter_mut().zip(&g).zip(&self.nodes[b].values) {
                    *d += gv * bv;
                }
                for ((d, gv), av) in self.grads[b].iter_mut().zip(&g).zip(&self.nodes[a].values) {
                    *d += gv * av;
                }
                self.grads[id] = g;
            }
            Op::Scale(x, s) => {
                let g = std::mem::take(&mut self.grads[id]);
                for (d, gv) in self.grads[x].iter_mut().zip(&g) {
                    *d += gv * s;
                }
                self.grads[id] = g;
            }
            Op::AddScalar(x) => {
                let g = std::mem::take(&mut self.grads[id]);
                for (d, gv) in self.grads[x].iter_mut().zip(&g) {
                    *d += gv;
                }
                self.grads[id] = g;
            }
            Op::Exp(x) => {
                let g = std::mem::take(&mut self.grads[id]);
                for ((d, gv), ov) in self.grads[x].iter_mut().zip(&g).zip(&self.nodes[id].values) {
                    *d += gv * ov;
                }
                self.grads[id] = g;
            }
            Op::Ln(x) => {
                let g = std::mem::take(&mut self.grads[id]);
                for ((d, gv), xv) in self.grads[x].iter_mut().zip(&g).zip(&self.nodes[x].values) {
                    *d += gv / xv;
                }
                self.grads[id] = g;
            }
            Op::Pow(x, c) => {
                let g = std::mem::take(&mut self.grads[id]);
                for ((d, gv), xv) in self.grads[x].iter_mut().zip(&g).zip(&self.nodes[x].values) {
                    *d += gv * c * xv.powf(c - 1.0);
                }
                self.grads[id] = g;
            }
            Op::Tanh(x) => {
                let g = std::mem::take(&mut self.grads[id]);
                for ((d, gv), ov) in self.grads[x].iter_mut().zip(&g).zip(&self.nodes[id].values) {
                    *d += gv * (1.0 - ov * ov);
                }
                self.grads[id] = g;
            }
            Op::Clamp(x, lo, hi) => {
                let g = std::mem::take(&mut self.grads[id]);
                for ((d, gv), xv) in self.grads[x].iter_mut().zip(&g).zip(&self.nodes[x].values) {
                    if *xv >= lo && *xv <= hi {
                        *d += gv;
                    }
                }
                self.grads[id] = g;
            }
            Op::RowSum(x) => {
                let (r, c) = self.shape(x);
                for i in 0..r {
                    let g = self.grads[id][i];
                    for j in 0..c {
                        self.grads[x][i * c + j] += g;
                    }
                }
            }
            Op::RowMean(x) => {
                let (r, c) = self.shape(x);
                for i in 0..r {
                    let g = self.grads[id][i] / c as f64;
                    for j in 0..c {
                        self.grads[x][i * c + j] += g;
                    }
                }
            }
            Op::SumAll(x) => {
                let g = self.grads[id][0];
                for d in self.grads[x].iter_mut() {
                    *d += g;
                }
            }
            Op::ConcatCols(ref parts) => {
                let (r, total) = self.shape(id);
                let g = std::mem::take(&mut self.grads[id]);
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    for i in 0..r {
                        for j in 0..pc {
                            self.grads[p][i * pc + j] += g[i * total + off + j];
                        }
                    }
                    off += pc;
                }
                self.grads[id] = g;
            }
            Op::ConcatRows(ref parts) => {
                let g = std::mem::take(&mut self.grads[id]);
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].values.len();
                    for (d, gv) in self.grads[p].iter_mut().zip(&g[off..off + n]) {
                        *d += gv;
                    }
                    off += n;
                }
                self.grads[id] = g;
            }
            Op::SliceCols(x, start) => {
                let (r, w) = self.shape(id);
                let c = self.shape(x).1;
                for i in 0..r {
                    for j in 0..w {
                        let g = self.grads[id][i * w + j];
                        self.grads[x][i * c + start + j] += g;
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let (r, c) = self.shape(id);
                for i in 0..r {
                    for j in 0..c {
                        let g = self.grads[id][i * c + j];
                        self.grads[x][(start + i) * c + j] += g;
                    }
                }
            }
            Op::GatherRows(x, ref idx) => {
                let c = self.shape(id).1;
                for (i, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        let g = self.grads[id][i * c + j];
                        self.grads[x][src * c + j] += g;
                    }
                }
            }
            Op::PickPerRow(x, ref idx) => {
                let c = self.shape(x).1;
                for (i, &j) in idx.iter().enumerate() {
                    let g = self.grads[id][i];
                    self.grads[x][i * c + j] += g;
                }
            }
            Op::BroadcastCol(x, cols) => {
                let r = self.shape(x).0;
                for i in 0..r {
                    let mut s = 0.0;
                    for j in 0..cols {
                        s += self.grads[id][i * cols + j];
                    }
                    self.grads[x][i] += s;
                }
            }
            Op::BroadcastRow(x, rows) => {
                let c = self.shape(x).1;
                for i in 0..rows {
                    for j in 0..c {
                        let g = self.grads[id][i * c + j];
                        self.grads[x][j] += g;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = self.shape(x);
                let g = std::mem::take(&mut self.grads[id]);
                {
                    let av = &self.nodes[id].values;
                    let dx = &mut self.grads[x];
                    for i in 0..r {
                        let arow = &av[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = arow.iter().zip(grow).map(|(a, gv)| a * gv).sum();
                        for j in 0..c {
                            dx[i * c + j] += arow[j] * (grow[j] - dot);
                        }
                    }
                }
                self.grads[id] = g;
            }
            Op::LogSoftmaxRows(x) => {
                let (r, c) = self.shape(x);
                let g = std::mem::take(&mut self.grads[id]);
                {
                    let lv = &self.nodes[id].values;
                    let dx = &mut self.grads[x];
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            dx[i * c + j] += grow[j] - lv[i * c + j].exp() * gsum;
                        }
                    }
                }
                self.grads[id] = g;
            }
            Op::RowMax(x) => {
                let (r, c) = self.shape(x);
                let xv = &self.nodes[x].values;
                let mut picks = Vec::with_capacity(r);
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let mut best = 0;
                    for j in 1..c {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    picks.push(best);
                }
                for (i, &j) in picks.iter().enumerate() {
                    let g = self.grads[id][i];
                    self.grads[x][i * c + j] += g;
                }
            }
            Op::RowMin(x) => {
                let (r, c) = self.shape(x);
                let xv = &self.nodes[x].values;
                let mut picks = Vec::with_capacity(r);
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let mut best = 0;
                    for j in 1..c {
                        if row[j] < row[best] {
                            best = j;
                        }
                    }
                    picks.push(best);
                }
                for (i, &j) in picks.iter().enumerate() {
                    let g = self.grads[id][i];
                    self.grads[x][i * c + j] += g;
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// ── Gradient checking ───────────────────────────────────────────────────

/// Outcome of a finite-difference sweep over a set of parameter arrays.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over all entries of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_err: f64,
    /// (array index, entry index) of the worst entry.
    pub worst: (usize, usize),
    pub params_checked: usize,
}

/// Central-difference gradient check.
///
/// `loss_fn` evaluates the scalar loss at a parameter setting; `grad_fn`
/// returns the analytic gradient arrays (same shapes as `params`). The
/// loss is evaluated twice at the base point first — any disagreement
/// means the function is not deterministic and the check aborts.
pub fn finite_diff_check<L, G>(
    params: &[Vec<f64>],
    loss_fn: L,
    grad_fn: G,
    step: f64,
) -> Result<GradCheckReport>
where
    L: Fn(&[Vec<f64>]) -> Result<f64>,
    G: Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
{
    assert!(step > 0.0 && step <= 1e-2, "step must be in (0, 1e-2]");
    let base_a = loss_fn(params)?;
    let base_b = loss_fn(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::Numeric(format!(
            "loss function is not deterministic: {base_a} vs {base_b}"
        )));
    }

    let analytic = grad_fn(params)?;
    assert_eq!(analytic.len(), params.len(), "gradient arity mismatch");

    let mut work: Vec<Vec<f64>> = params.to_vec();
    let mut max_rel_err = 0.0_f64;
    let mut worst = (0, 0);
    let mut count = 0;
    for ai in 0..params.len() {
        assert_eq!(analytic[ai].len(), params[ai].len(), "gradient shape mismatch");
        for ei in 0..params[ai].len() {
            let orig = work[ai][ei];
            work[ai][ei] = orig + step;
            let fp = loss_fn(&work)?;
            work[ai][ei] = orig - step;
            let fm = loss_fn(&work)?;
            work[ai][ei] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[ai][ei];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (ai, ei);
            }
            count += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        params_checked: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_scalar_product() {
        let mut t = Tape::new();
        let a = t.leaf(1, 1, vec![2.0]);
        let b = t.leaf(1, 1, vec![3.0]);
        let c = t.matmul(a, b);
        assert_eq!(t.values(c).unwrap(), &[6.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut t = Tape::new();
        let x = t.leaf(1, 3, vec![1.5, -2.0, 0.25]);
        let z = t.leaf(1, 3, vec![0.0; 3]);
        let y = t.add(x, z);
        assert_eq!(t.values(y).unwrap(), t.values(x).unwrap());
    }

    #[test]
    fn log_exp_inverse_pair() {
        let mut t = Tape::new();
        let x = t.leaf(1, 1, vec![0.5]);
        let e = t.exp(x);
        let l = t.ln(e);
        assert!(close(t.values(l).unwrap()[0], 0.5, 1e-12));
    }

    #[test]
    fn softmax_uniform_row() {
        let mut t = Tape::new();
        let x = t.leaf(1, 4, vec![0.0; 4]);
        let s = t.softmax_rows(x);
        for &v in t.values(s).unwrap() {
            assert!(close(v, 0.25, 1e-15));
        }
    }

    #[test]
    fn softmax_log_ratio_row() {
        // [ln 1, ln 3] -> [0.25, 0.75]
        let mut t = Tape::new();
        let x = t.leaf(1, 2, vec![0.0, 3.0_f64.ln()]);
        let s = t.softmax_rows(x);
        let v = t.values(s).unwrap();
        assert!(close(v[0], 0.25, 1e-12));
        assert!(close(v[1], 0.75, 1e-12));
    }

    #[test]
    fn softmax_jacobian_at_uniform_four_way() {
        // Full Jacobian row-by-row via backward from each output element;
        // at uniform alpha = 0.25 the diagonal is 0.1875 and off-diagonal
        // entries are -0.0625.
        for j in 0..4 {
            let mut t = Tape::new();
            let x = t.leaf(1, 4, vec![0.0; 4]);
            let s = t.softmax_rows(x);
            let y = t.pick_per_row(s, &[j]);
            t.backward(y).unwrap();
            let g = t.grad(x);
            for i in 0..4 {
                let expect = if i == j { 0.1875 } else { -0.0625 };
                assert!(close(g[i], expect, 1e-15), "J[{j},{i}] = {}", g[i]);
            }
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[1.0; 4]);
    }

    #[test]
    fn backward_product_rule() {
        let mut t = Tape::new();
        let x = t.leaf(1, 1, vec![2.0]);
        let y = t.leaf(1, 1, vec![3.0]);
        let p = t.mul(x, y);
        t.backward(p).unwrap();
        assert_eq!(t.grad(x), &[3.0]);
        assert_eq!(t.grad(y), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(1, 2, vec![1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn detach_keeps_values_and_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(1, 2, vec![1.0, 2.0]);
        let d = t.detach(x);
        assert_eq!(t.values(d).unwrap(), &[1.0, 2.0]);

        // L = sum(detach(x) * x): gradient is detach(x) = x, not 2x.
        let p = t.mul(d, x);
        let l = t.sum_all(p);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x), &[1.0, 2.0]);
    }

    #[test]
    fn detach_only_path_gives_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(1, 2, vec![1.0, 2.0]);
        let d = t.detach(x);
        let l = t.sum_all(d);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_forward_poisons_tape() {
        let mut t = Tape::new();
        let x = t.leaf(1, 1, vec![1e308]);
        let e = t.exp(x); // overflows to +inf
        assert!(t.error().is_some());
        assert!(t.values(e).is_err());
        assert!(t.backward(e).is_err());
    }

    #[test]
    #[should_panic(expected = "matmul inner dims")]
    fn matmul_shape_mismatch_panics() {
        let mut t = Tape::new();
        let a = t.leaf(1, 2, vec![1.0, 2.0]);
        let b = t.leaf(3, 1, vec![1.0, 2.0, 3.0]);
        let _ = t.matmul(a, b);
    }

    #[test]
    fn row_max_routes_to_lowest_index_on_tie() {
        let mut t = Tape::new();
        let x = t.leaf(1, 3, vec![2.0, 2.0, 1.0]);
        let m = t.row_max(x);
        let l = t.sum_all(m);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let mut t = Tape::new();
        let x = t.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let g = t.gather_rows(x, &[0, 0, 1]);
        let l = t.sum_all(g);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x), &[2.0, 2.0, 1.0, 1.0]);
    }

    // Central finite differences vs the backward rule for every op on
    // random small inputs.
    #[test]
    fn all_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        type Builder = fn(&mut Tape, NodeId, NodeId) -> NodeId;
        let builders: Vec<(&str, Builder)> = vec![
            ("matmul", |t, a, b| {
                let bt = t.transpose(b);
                t.matmul(a, bt)
            }),
            ("transpose", |t, a, _| t.transpose(a)),
            ("add", |t, a, b| t.add(a, b)),
            ("mul", |t, a, b| t.mul(a, b)),
            ("scale", |t, a, _| t.scale(a, -1.7)),
            ("add_scalar", |t, a, _| t.add_scalar(a, 0.3)),
            ("exp", |t, a, _| t.exp(a)),
            ("ln", |t, a, _| {
                let sq = t.mul(a, a);
                let p = t.add_scalar(sq, 0.5);
                t.ln(p)
            }),
            ("pow", |t, a, _| {
                let sq = t.mul(a, a);
                let p = t.add_scalar(sq, 0.5);
                t.pow(p, -0.5)
            }),
            ("tanh", |t, a, _| t.tanh(a)),
            ("row_sum", |t, a, _| t.row_sum(a)),
            ("row_mean", |t, a, _| t.row_mean(a)),
            ("concat_cols", |t, a, b| t.concat_cols(&[a, b])),
            ("concat_rows", |t, a, b| t.concat_rows(&[a, b])),
            ("slice_cols", |t, a, _| t.slice_cols(a, 1, 3)),
            ("slice_rows", |t, a, _| t.slice_rows(a, 1, 3)),
            ("gather_rows", |t, a, _| t.gather_rows(a, &[2, 0, 2])),
            ("pick_per_row", |t, a, _| t.pick_per_row(a, &[1, 3, 0])),
            ("softmax", |t, a, _| t.softmax_rows(a)),
            ("log_softmax", |t, a, _| t.log_softmax_rows(a)),
            ("row_max", |t, a, _| t.row_max(a)),
            ("row_min", |t, a, _| t.row_min(a)),
            ("broadcast_col", |t, a, _| {
                let s = t.row_sum(a);
                t.broadcast_col(s, 3)
            }),
            ("broadcast_row", |t, a, _| {
                let r = t.slice_rows(a, 0, 1);
                t.broadcast_row(r, 4)
            }),
            ("clamp", |t, a, _| t.clamp(a, -0.8, 0.8)),
        ];

        for (name, build) in builders {
            let av: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let bv: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let params = vec![av, bv];
            let run = |p: &[Vec<f64>]| -> (Tape, NodeId) {
                let mut t = Tape::new();
                let a = t.leaf(3, 4, p[0].clone());
                let b = t.leaf(3, 4, p[1].clone());
                let out = build(&mut t, a, b);
                // Weighted sum so every output entry matters differently.
                let (r, c) = t.shape(out);
                let w: Vec<f64> = (0..r * c).map(|i| 0.25 + 0.5 * i as f64).collect();
                let wl = t.leaf(r, c, w);
                let prod = t.mul(out, wl);
                let loss = t.sum_all(prod);
                (t, loss)
            };
            let report = finite_diff_check(
                &params,
                |p| {
                    let (t, loss) = run(p);
                    Ok(t.values(loss)?[0])
                },
                |p| {
                    let (mut t, loss) = run(p);
                    t.backward(loss)?;
                    Ok(vec![t.grad(0).to_vec(), t.grad(1).to_vec()])
                },
                1e-6,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-6,
                "op {name}: max rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn finite_diff_quadratic_is_near_exact() {
        let params = vec![vec![1.0, -2.0]];
        let report = finite_diff_check(
            &params,
            |p| Ok(p[0].iter().map(|x| x * x).sum()),
            |p| Ok(vec![p[0].iter().map(|x| 2.0 * x).collect()]),
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn finite_diff_zero_parameters_is_vacuous() {
        let report = finite_diff_check(&[], |_| Ok(1.0), |_| Ok(vec![]), 1e-5).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.params_checked, 0);
    }

    #[test]
    fn finite_diff_detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let err = finite_diff_check(
            &[vec![1.0]],
            |_| {
                calls.set(calls.get() + 1.0);
                Ok(calls.get())
            },
            |_| Ok(vec![vec![0.0]]),
            1e-5,
        );
        assert!(err.is_err());
    }

    #[test]
    fn exp_x_minus_x_minus_one_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-20.0..20.0);
            assert!(x.exp() - x - 1.0 >= 0.0);
        }
    }
}
