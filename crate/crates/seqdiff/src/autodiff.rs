//! Compact reverse-mode gradient tape over dense 2-D arrays.
//!
//! Every value on the tape is a row-major matrix (scalars are `[1,1]`,
//! vectors `[n,1]` or `[1,n]`). Operations append nodes, so node ids are
//! already in topological order and the backward sweep is a single reverse
//! scan that touches each node exactly once. The tape is rebuilt from scratch
//! every training step.
//!
//! The primitive set is exactly what the denoiser, losses, and learnable
//! noise schedules need; there is no general broadcasting machinery beyond
//! the row/column/scalar broadcast ops listed here.

use ndarray::{s, Array2, Axis};
use std::rc::Rc;

use crate::scalar::Scalar;

pub type NodeId = usize;

enum Op<T: Scalar> {
    /// Constant or parameter leaf. Gradients accumulate for any leaf that is
    /// reachable from the loss; callers read the ones they care about.
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// `[R,C] + [1,C]` broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `[R,C] + [R,1]` broadcast over columns.
    AddCol(NodeId, NodeId),
    /// `[R,C] * [R,1]` broadcast over columns.
    MulCol(NodeId, NodeId),
    /// `[R,C] + [1,1]` broadcast everywhere.
    AddBScalar(NodeId, NodeId),
    Scale(NodeId, T),
    Offset(NodeId, T),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    /// Elementwise `x^p` for a fixed real exponent.
    Powf(NodeId, T),
    /// Row lookup: `out[i, :] = parent[idx[i], :]`. Backward scatter-adds.
    GatherRows(NodeId, Rc<Vec<usize>>),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    /// Rows rescaled to Euclidean norm `scale` (norms floored at 1e-8).
    NormalizeRows {
        parent: NodeId,
        scale: T,
        inv_norms: Vec<T>,
    },
    /// Per-row standardization (x - mean) / sqrt(var + eps), no affine part.
    LayerNorm {
        parent: NodeId,
        inv_std: Vec<T>,
    },
    /// Fused mean softmax cross-entropy against integer targets.
    SoftmaxXent {
        parent: NodeId,
        targets: Rc<Vec<usize>>,
        probs: Array2<T>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node<T: Scalar> {
    value: Array2<T>,
    op: Op<T>,
}

/// Gradient tape. One per training step, single-writer.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Array2<T>>>,
}

const NORM_FLOOR: f64 = 1e-8;
const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<T> {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    /// `None` when the node does not influence the target.
    pub fn grad(&self, id: NodeId) -> Option<&Array2<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node is not a scalar");
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: T) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.leaf(Array2::zeros((rows, cols)))
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let s = self.nodes[id].value.dim();
        (s.0, s.1)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "add");
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "sub");
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "mul");
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul: inner dims {ar}x{ac} . {br}x{bc}");
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> NodeId {
        let (_, c) = self.shape(m);
        assert_eq!(self.shape(row), (1, c), "add_row: want [1,{c}]");
        let v = &self.nodes[m].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(m, row))
    }

    pub fn add_col(&mut self, m: NodeId, col: NodeId) -> NodeId {
        let (r, _) = self.shape(m);
        assert_eq!(self.shape(col), (r, 1), "add_col: want [{r},1]");
        let v = &self.nodes[m].value + &self.nodes[col].value;
        self.push(v, Op::AddCol(m, col))
    }

    pub fn mul_col(&mut self, m: NodeId, col: NodeId) -> NodeId {
        let (r, _) = self.shape(m);
        assert_eq!(self.shape(col), (r, 1), "mul_col: want [{r},1]");
        let v = &self.nodes[m].value * &self.nodes[col].value;
        self.push(v, Op::MulCol(m, col))
    }

    pub fn add_bscalar(&mut self, m: NodeId, scalar: NodeId) -> NodeId {
        assert_eq!(self.shape(scalar), (1, 1), "add_bscalar: want [1,1]");
        let s = self.nodes[scalar].value[[0, 0]];
        let v = self.nodes[m].value.mapv(|x| x + s);
        self.push(v, Op::AddBScalar(m, scalar))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.nodes[x].value.mapv(|v| v * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.nodes[x].value.mapv(|v| v + c);
        self.push(v, Op::Offset(x, c))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|v| v.tanh());
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = T::one();
        let v = self.nodes[x].value.mapv(|v| one / (one + (-v).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        // ln(1 + e^x), computed from the negative branch so it never overflows.
        let v = self.nodes[x].value.mapv(|v| {
            if v > T::zero() {
                v + (-v).exp().ln_1p()
            } else {
                v.exp().ln_1p()
            }
        });
        self.push(v, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|v| v.exp());
        self.push(v, Op::Exp(x))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|v| v.ln());
        self.push(v, Op::Ln(x))
    }

    pub fn powf(&mut self, x: NodeId, p: T) -> NodeId {
        let v = self.nodes[x].value.mapv(|v| v.powf(p));
        self.push(v, Op::Powf(x, p))
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &Rc<Vec<usize>>) -> NodeId {
        let (rows, cols) = self.shape(table);
        let mut v = Array2::zeros((idx.len(), cols));
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < rows, "gather_rows: index {r} out of {rows}");
            v.row_mut(i).assign(&self.nodes[table].value.row(r));
        }
        self.push(v, Op::GatherRows(table, Rc::clone(idx)))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.t().to_owned();
        self.push(v, Op::Transpose(x))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Array2::zeros((r, total));
        let mut at = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pr, r, "concat_cols: row mismatch");
            v.slice_mut(s![.., at..at + pc]).assign(&self.nodes[p].value);
            at += pc;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, c0: usize, c1: usize) -> NodeId {
        let (_, c) = self.shape(x);
        assert!(c0 < c1 && c1 <= c, "slice_cols: {c0}..{c1} of {c}");
        let v = self.nodes[x].value.slice(s![.., c0..c1]).to_owned();
        self.push(v, Op::SliceCols(x, c0, c1))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut v = Array2::zeros((total, c));
        let mut at = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows: col mismatch");
            v.slice_mut(s![at..at + pr, ..]).assign(&self.nodes[p].value);
            at += pr;
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: NodeId, r0: usize, r1: usize) -> NodeId {
        let (r, _) = self.shape(x);
        assert!(r0 < r1 && r1 <= r, "slice_rows: {r0}..{r1} of {r}");
        let v = self.nodes[x].value.slice(s![r0..r1, ..]).to_owned();
        self.push(v, Op::SliceRows(x, r0, r1))
    }

    /// Rescale each row to Euclidean norm `scale`. Norms are floored at 1e-8
    /// so a (near-)zero row cannot produce non-finite output.
    pub fn normalize_rows(&mut self, x: NodeId, scale: T) -> NodeId {
        let floor = T::from_f64(NORM_FLOOR);
        let src = &self.nodes[x].value;
        let mut inv_norms = Vec::with_capacity(src.nrows());
        let mut v = src.clone();
        for mut row in v.rows_mut() {
            let norm = row.iter().map(|&e| e * e).sum::<T>().sqrt().max(floor);
            let inv = T::one() / norm;
            inv_norms.push(inv);
            row.mapv_inplace(|e| e * inv * scale);
        }
        self.push(
            v,
            Op::NormalizeRows {
                parent: x,
                scale,
                inv_norms,
            },
        )
    }

    /// Standardize each row to zero mean and unit variance (eps 1e-5).
    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let eps = T::from_f64(LAYER_NORM_EPS);
        let src = &self.nodes[x].value;
        let cols = T::from_f64(src.ncols() as f64);
        let mut inv_std = Vec::with_capacity(src.nrows());
        let mut v = src.clone();
        for mut row in v.rows_mut() {
            let mean = row.iter().copied().sum::<T>() / cols;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / cols;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            row.mapv_inplace(|e| (e - mean) * inv);
        }
        self.push(
            v,
            Op::LayerNorm {
                parent: x,
                inv_std,
            },
        )
    }

    /// Mean softmax cross-entropy over rows; also returns the row-wise
    /// softmax probabilities as a detached array.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: &Rc<Vec<usize>>) -> (NodeId, Array2<T>) {
        let (r, c) = self.shape(logits);
        assert_eq!(targets.len(), r, "softmax_xent: {} targets for {r} rows", targets.len());
        let src = &self.nodes[logits].value;
        let mut probs = Array2::zeros((r, c));
        let mut loss = T::zero();
        for i in 0..r {
            let row = src.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[[i, j]] = e;
                z = z + e;
            }
            let inv_z = T::one() / z;
            for j in 0..c {
                probs[[i, j]] = probs[[i, j]] * inv_z;
            }
            let t = targets[i];
            assert!(t < c, "softmax_xent: target {t} out of {c}");
            // -log p_target, computed from the shifted logits for stability.
            loss = loss + (z.ln() - (row[t] - m));
        }
        loss = loss / T::from_f64(r as f64);
        let out = self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftmaxXent {
                parent: logits,
                targets: Rc::clone(targets),
                probs: probs.clone(),
            },
        );
        (out, probs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total = self.nodes[x].value.iter().copied().sum::<T>();
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = T::from_f64(self.nodes[x].value.len() as f64);
        let total = self.nodes[x].value.iter().copied().sum::<T>() / n;
        self.push(Array2::from_elem((1, 1), total), Op::MeanAll(x))
    }

    /// Reverse sweep from a scalar node. Gradients of every reachable node
    /// accumulate additively across fan-out and can be read with `grad`.
    pub fn backward(&mut self, target: NodeId) {
        assert_eq!(self.shape(target), (1, 1), "backward target must be scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[target] = Some(Array2::from_elem((1, 1), T::one()));

        for id in (0..=target).rev() {
            let g = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(id, &g);
            self.grads[id] = Some(g);
        }
    }

    fn accumulate(&mut self, id: NodeId, contribution: Array2<T>) {
        match &mut self.grads[id] {
            Some(g) => *g = &*g + &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    fn apply_backward(&mut self, id: NodeId, g: &Array2<T>) {
        // Ops are split out of the node so `self` stays mutable for accumulate.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g * &self.nodes[*b].value;
                let gb = g * &self.nodes[*a].value;
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.nodes[*b].value.t());
                let gb = self.nodes[*a].value.t().dot(g);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::AddRow(m, row) => {
                self.accumulate(*m, g.clone());
                let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(*row, gr);
            }
            Op::AddCol(m, col) => {
                self.accumulate(*m, g.clone());
                let gc = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                self.accumulate(*col, gc);
            }
            Op::MulCol(m, col) => {
                let gm = g * &self.nodes[*col].value;
                let gc = (g * &self.nodes[*m].value)
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1));
                self.accumulate(*m, gm);
                self.accumulate(*col, gc);
            }
            Op::AddBScalar(m, scalar) => {
                self.accumulate(*m, g.clone());
                let total = g.iter().copied().sum::<T>();
                self.accumulate(*scalar, Array2::from_elem((1, 1), total));
            }
            Op::Scale(x, c) => self.accumulate(*x, g.mapv(|v| v * *c)),
            Op::Offset(x, _) => self.accumulate(*x, g.clone()),
            Op::Tanh(x) => {
                let y = &self.nodes[id].value;
                let gx = g * &y.mapv(|v| T::one() - v * v);
                self.accumulate(*x, gx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[id].value;
                let gx = g * &y.mapv(|v| v * (T::one() - v));
                self.accumulate(*x, gx);
            }
            Op::Softplus(x) => {
                let one = T::one();
                let gx = g * &self.nodes[*x].value.mapv(|v| one / (one + (-v).exp()));
                self.accumulate(*x, gx);
            }
            Op::Exp(x) => {
                let gx = g * &self.nodes[id].value;
                self.accumulate(*x, gx);
            }
            Op::Ln(x) => {
                let gx = g / &self.nodes[*x].value;
                self.accumulate(*x, gx);
            }
            Op::Powf(x, p) => {
                let pm1 = *p - T::one();
                let gx = g * &self.nodes[*x].value.mapv(|v| *p * v.powf(pm1));
                self.accumulate(*x, gx);
            }
            Op::GatherRows(table, idx) => {
                let (rows, cols) = self.shape(*table);
                let mut gt: Array2<T> = Array2::zeros((rows, cols));
                for (i, &r) in idx.iter().enumerate() {
                    let src = g.row(i);
                    let mut dst = gt.row_mut(r);
                    for j in 0..cols {
                        dst[j] = dst[j] + src[j];
                    }
                }
                self.accumulate(*table, gt);
            }
            Op::Transpose(x) => self.accumulate(*x, g.t().to_owned()),
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    let gp = g.slice(s![.., at..at + w]).to_owned();
                    self.accumulate(p, gp);
                    at += w;
                }
            }
            Op::SliceCols(x, c0, c1) => {
                let (r, c) = self.shape(*x);
                let mut gx = Array2::zeros((r, c));
                gx.slice_mut(s![.., *c0..*c1]).assign(g);
                self.accumulate(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    let gp = g.slice(s![at..at + h, ..]).to_owned();
                    self.accumulate(p, gp);
                    at += h;
                }
            }
            Op::SliceRows(x, r0, r1) => {
                let (r, c) = self.shape(*x);
                let mut gx = Array2::zeros((r, c));
                gx.slice_mut(s![*r0..*r1, ..]).assign(g);
                self.accumulate(*x, gx);
            }
            Op::NormalizeRows {
                parent,
                scale,
                inv_norms,
            } => {
                // y = s * x / ||x||; dx = s/||x|| * (g - (g . x_hat) x_hat)
                let x = &self.nodes[*parent].value;
                let mut gx = Array2::zeros(x.dim());
                for i in 0..x.nrows() {
                    let inv = inv_norms[i];
                    let gi = g.row(i);
                    let xi = x.row(i);
                    let dot = gi
                        .iter()
                        .zip(xi.iter())
                        .map(|(&gv, &xv)| gv * xv * inv)
                        .sum::<T>();
                    let mut dst = gx.row_mut(i);
                    for j in 0..x.ncols() {
                        dst[j] = *scale * inv * (gi[j] - dot * xi[j] * inv);
                    }
                }
                self.accumulate(*parent, gx);
            }
            Op::LayerNorm { parent, inv_std } => {
                // x_hat stored as the node value; standard layer-norm backward.
                let xhat = &self.nodes[id].value;
                let cols = T::from_f64(xhat.ncols() as f64);
                let mut gx = Array2::zeros(xhat.dim());
                for i in 0..xhat.nrows() {
                    let gi = g.row(i);
                    let hi = xhat.row(i);
                    let mean_g = gi.iter().copied().sum::<T>() / cols;
                    let mean_gh = gi
                        .iter()
                        .zip(hi.iter())
                        .map(|(&gv, &hv)| gv * hv)
                        .sum::<T>()
                        / cols;
                    let inv = inv_std[i];
                    let mut dst = gx.row_mut(i);
                    for j in 0..xhat.ncols() {
                        dst[j] = inv * (gi[j] - mean_g - hi[j] * mean_gh);
                    }
                }
                self.accumulate(*parent, gx);
            }
            Op::SoftmaxXent {
                parent,
                targets,
                probs,
            } => {
                let gs = g[[0, 0]];
                let rows = T::from_f64(probs.nrows() as f64);
                let mut gx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gx[[i, t]] = gx[[i, t]] - T::one();
                }
                gx.mapv_inplace(|v| v * gs / rows);
                self.accumulate(*parent, gx);
            }
            Op::SumAll(x) => {
                let gs = g[[0, 0]];
                let (r, c) = self.shape(*x);
                self.accumulate(*x, Array2::from_elem((r, c), gs));
            }
            Op::MeanAll(x) => {
                let (r, c) = self.shape(*x);
                let gs = g[[0, 0]] / T::from_f64((r * c) as f64);
                self.accumulate(*x, Array2::from_elem((r, c), gs));
            }
        }
        self.nodes[id].op = op;
    }
}

/// Relative error between the tape gradient and central finite differences
/// for a scalar-valued function of flat parameter arrays: the largest
/// elementwise discrepancy, normalized by the largest gradient magnitude
/// across all parameters. Normalizing by the global scale rather than per
/// element keeps the check meaningful at near-zero gradient entries, where
/// finite differences measure only rounding noise.
///
/// `build` must construct the function on the given tape from the leaf nodes
/// handed to it (one per parameter array) and return the scalar output node.
/// It is re-invoked for every probe, so it must be deterministic.
pub fn grad_check<T, F>(build: &F, point: &[Array2<T>], h: T) -> T
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[NodeId]) -> NodeId,
{
    let eval_at = |arrays: &[Array2<T>]| -> T {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = arrays.iter().map(|a| tape.leaf(a.clone())).collect();
        let out = build(&mut tape, &ids);
        tape.scalar_value(out)
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = point.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = build(&mut tape, &ids);
    let base_value = tape.scalar_value(out);
    assert!(
        base_value.is_finite(),
        "grad_check: non-finite function value {base_value}"
    );
    tape.backward(out);

    let mut scale = T::from_f64(1e-8);
    let mut worst_abs = T::zero();
    let mut probe: Vec<Array2<T>> = point.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = tape
            .grad(*id)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(point[pi].dim()));
        let dim = point[pi].dim();
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let orig = probe[pi][[r, c]];
                probe[pi][[r, c]] = orig + h;
                let fp = eval_at(&probe);
                probe[pi][[r, c]] = orig - h;
                let fm = eval_at(&probe);
                probe[pi][[r, c]] = orig;
                assert!(
                    fp.is_finite() && fm.is_finite(),
                    "grad_check: non-finite probe at param {pi} ({r},{c})"
                );
                let numeric = (fp - fm) / (T::from_f64(2.0) * h);
                let a = analytic[[r, c]];
                scale = scale.max(a.abs()).max(numeric.abs());
                let diff = (a - numeric).abs();
                if diff > worst_abs {
                    worst_abs = diff;
                }
            }
        }
    }
    worst_abs / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_mat(rng: &mut ChaCha12Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn tanh_derivative_at_zero_is_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(array![[0.0]]);
        let y = tape.tanh(x);
        let loss = tape.sum_all(y);
        tape.backward(loss);
        assert!((tape.grad(x).unwrap()[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_c() {
        for c in [2usize, 3, 7] {
            let mut tape = Tape::<f64>::new();
            let logits = tape.leaf(Array2::zeros((4, c)));
            let targets = Rc::new(vec![0usize; 4]);
            let (loss, probs) = tape.softmax_xent(logits, &targets);
            assert!((tape.scalar_value(loss) - (c as f64).ln()).abs() < 1e-12);
            for p in probs.iter() {
                assert!((p - 1.0 / c as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let a = random_mat(&mut rng, 5, 4);
        let b = random_mat(&mut rng, 4, 3);
        let weight = random_mat(&mut rng, 5, 3);
        let build = move |tape: &mut Tape<f64>, ids: &[NodeId]| {
            let prod = tape.matmul(ids[0], ids[1]);
            let w = tape.leaf(weight.clone());
            let weighted = tape.mul(prod, w);
            tape.sum_all(weighted)
        };
        let err = grad_check(&build, &[a, b], 1e-6);
        assert!(err < 1e-6, "matmul rel err {err}");
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let build = |tape: &mut Tape<f64>, ids: &[NodeId]| {
            let sq = tape.mul(ids[0], ids[0]);
            tape.sum_all(sq)
        };
        let x = array![[3.0]];
        let err = grad_check(&build, &[x], 1e-5);
        assert!(err < 1e-9, "quadratic rel err {err}");
    }

    #[test]
    fn diamond_fanout_accumulates_both_paths() {
        // y = x*x + 3x, dy/dx = 2x + 3
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(array![[2.0]]);
        let sq = tape.mul(x, x);
        let lin = tape.scale(x, 3.0);
        let y = tape.add(sq, lin);
        let loss = tape.sum_all(y);
        tape.backward(loss);
        assert!((tape.grad(x).unwrap()[[0, 0]] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn fused_and_broadcast_ops_pass_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let m = random_mat(&mut rng, 6, 5);
        let row = random_mat(&mut rng, 1, 5);
        let col = random_mat(&mut rng, 6, 1);
        let scalar = random_mat(&mut rng, 1, 1);
        let build = |tape: &mut Tape<f64>, ids: &[NodeId]| {
            let a = tape.add_row(ids[0], ids[1]);
            let b = tape.mul_col(a, ids[2]);
            let c = tape.add_col(b, ids[2]);
            let e = tape.layer_norm(c);
            // After layer_norm, not before: a row-constant shift would have an
            // exactly-zero gradient through it and FD noise would dominate.
            let d = tape.add_bscalar(e, ids[3]);
            let f = tape.normalize_rows(d, 2.5);
            let g = tape.sigmoid(f);
            let g = tape.softplus(g);
            let h = tape.tanh(g);
            let i = tape.offset(h, 1.5); // keep strictly positive for ln/powf
            let j = tape.ln(i);
            let k = tape.exp(j);
            let l = tape.powf(k, 1.7);
            tape.mean_all(l)
        };
        let err = grad_check(&build, &[m, row, col, scalar], 1e-6);
        assert!(err < 1e-6, "fused chain rel err {err}");
    }

    #[test]
    fn gather_slice_concat_pass_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let table = random_mat(&mut rng, 4, 3);
        let other = random_mat(&mut rng, 6, 2);
        let idx = Rc::new(vec![2usize, 0, 3, 3, 1, 2]);
        let build = move |tape: &mut Tape<f64>, ids: &[NodeId]| {
            let g = tape.gather_rows(ids[0], &idx);
            let joined = tape.concat_cols(&[g, ids[1]]); // [6,5]
            let top = tape.slice_rows(joined, 0, 3); // [3,5]
            let bottom = tape.slice_rows(joined, 3, 6); // [3,5]
            let bt = tape.transpose(bottom); // [5,3]
            let prod = tape.matmul(bt, top); // [5,5]
            let back = tape.concat_rows(&[top, bottom]); // [6,5]
            let left = tape.slice_cols(back, 0, 2); // [6,2]
            let lt = tape.transpose(left); // [2,6]
            let prod2 = tape.matmul(lt, back); // [2,5]
            let s1 = tape.sum_all(prod);
            let s2 = tape.sum_all(prod2);
            tape.add(s1, s2)
        };
        let err = grad_check(&build, &[table, other], 1e-6);
        assert!(err < 1e-6, "gather/concat rel err {err}");
    }


    #[test]
    fn softmax_xent_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let logits = random_mat(&mut rng, 5, 4);
        let targets = Rc::new(vec![1usize, 3, 0, 2, 2]);
        let build = move |tape: &mut Tape<f64>, ids: &[NodeId]| {
            let (loss, _) = tape.softmax_xent(ids[0], &targets);
            loss
        };
        let err = grad_check(&build, &[logits], 1e-6);
        assert!(err < 1e-7, "xent rel err {err}");
    }

    #[test]
    fn identical_graphs_give_bit_identical_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let a = random_mat(&mut rng, 8, 8);
        let run = |a: &Array2<f64>| -> Array2<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(a.clone());
            let y = tape.tanh(x);
            let z = tape.matmul(y, x);
            let n = tape.layer_norm(z);
            let loss = tape.mean_all(n);
            tape.backward(loss);
            tape.grad(x).unwrap().clone()
        };
        let g1 = run(&a);
        let g2 = run(&a);
        assert_eq!(g1, g2);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn shape_mismatch_panics() {
        let mut tape = Tape::<f64>::new();
        let a = tape.zeros(2, 3);
        let b = tape.zeros(3, 2);
        tape.add(a, b);
    }
}
