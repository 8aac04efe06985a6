//! Dynamic reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! computed eagerly; [`Tape::backward`] walks the nodes in reverse and
//! accumulates parameter gradients into a [`ParamStore`].
//!
//! Several ops work on *grouped* row stacks: a `(G·r)×n` matrix holds `G`
//! independent `r×n` blocks (one per example, or one per example and
//! interest). Attention, behavior scoring and in-batch similarities are all
//! expressed this way so a mini-batch costs a handful of nodes instead of a
//! handful per example.
//!
//! Stop-gradient points and discrete decisions go through
//! [`Tape::frozen`]. A tape built with [`Tape::replaying`] returns the values
//! recorded by an earlier pass instead of recomputing them, which is what
//! finite-difference checks need: the perturbed passes see exactly the same
//! detached inputs, random draws and routing masks as the base pass.

use std::any::Any;
use std::sync::Arc;

use super::matrix::{gemm_acc, gemm_at_acc, gemm_bt_acc, softmax_in_place};
use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse linear row map: output row `i` is `Σ w · input[j]` over
/// `entries[offsets[i]..offsets[i+1]]`.
#[derive(Clone, Debug, Default)]
pub struct RowMap {
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl RowMap {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    pub fn push_row(&mut self, terms: impl IntoIterator<Item = (usize, f64)>) {
        self.entries.extend(terms);
        self.offsets.push(self.entries.len());
    }

    /// Mean of the given source rows; zero row when `rows` is empty.
    pub fn push_mean(&mut self, rows: &[usize]) {
        let w = if rows.is_empty() {
            0.0
        } else {
            1.0 / rows.len() as f64
        };
        self.push_row(rows.iter().map(|&r| (r, w)));
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    AddGroupRows(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        floor: f64,
        norms: Vec<f64>,
    },
    RowDot(Var, Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    CombineRows(Var, RowMap),
    ReplaceRows(Var, Vec<usize>),
    GroupedMatMulBt {
        a: Var,
        b: Var,
        ra: usize,
        rb: usize,
    },
    GroupedMatMul {
        p: Var,
        v: Var,
        ra: usize,
        rb: usize,
    },
    Sum(Var),
    Mean(Var),
    BceMean {
        pred: Var,
        labels: Vec<f64>,
        clamp: f64,
    },
    Pick(Var, Vec<(usize, usize)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Values captured by [`Tape::frozen`] during a recording pass.
#[derive(Clone, Default)]
pub struct Trace {
    entries: Vec<Arc<dyn Any + Send + Sync>>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

enum Mode {
    Record(Trace),
    Replay(Trace, usize),
}

pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
            param_vars: Vec::new(),
            mode: Mode::Record(Trace::default()),
        }
    }

    /// A tape whose [`frozen`](Self::frozen) calls replay `trace` in order.
    pub fn replaying(trace: Trace) -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
            param_vars: Vec::new(),
            mode: Mode::Replay(trace, 0),
        }
    }

    /// The values recorded so far (empty for a replaying tape).
    pub fn into_trace(self) -> Trace {
        match self.mode {
            Mode::Record(t) => t,
            Mode::Replay(..) => Trace::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes, keeping allocations.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.mode = Mode::Record(Trace::default());
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Computes `f` once and records the result; on a replaying tape returns
    /// the recorded value instead. Used for every stop-gradient point,
    /// random draw and discrete decision in a forward pass.
    pub fn frozen<T, F>(&mut self, f: F) -> T
    where
        T: Clone + Send + Sync + 'static,
        F: FnOnce(&Tape) -> T,
    {
        if let Mode::Replay(trace, pos) = &mut self.mode {
            let entry = trace
                .entries
                .get(*pos)
                .expect("replay trace exhausted: forward pass diverged from recording");
            *pos += 1;
            return entry
                .downcast_ref::<T>()
                .expect("replay trace type mismatch")
                .clone();
        }
        let value = f(self);
        if let Mode::Record(trace) = &mut self.mode {
            trace.entries.push(Arc::new(value.clone()));
        }
        value
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Constant leaf whose value is produced by `f` (and frozen).
    pub fn frozen_constant<F>(&mut self, f: F) -> Var
    where
        F: FnOnce(&Tape) -> Matrix,
    {
        let m = self.frozen(f);
        self.constant(m)
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        self.frozen_constant(|t| t.value(v).clone())
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Matrix::from_vec(r, c, data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(row) != (1, n) {
            return Err(Error::Dimension {
                op: "add_row",
                left: (m, n),
                right: self.shape(row),
            });
        }
        let mut out = self.value(x).clone();
        let b = self.value(row).data().to_vec();
        for r in 0..m {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// `x ((G·r)×n) + tile (r×n)` added to each group.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let (r, tn) = self.shape(tile);
        if tn != n || r == 0 || m % r != 0 {
            return Err(Error::Dimension {
                op: "add_tiled",
                left: (m, n),
                right: (r, tn),
            });
        }
        let mut out = self.value(x).clone();
        let t = self.value(tile).data();
        for (chunk, _) in out.data_mut().chunks_mut(r * n).zip(0..) {
            for (o, tv) in chunk.iter_mut().zip(t) {
                *o += tv;
            }
        }
        Ok(self.push(out, Op::AddTiled(x, tile)))
    }

    /// `x ((G·r)×n) + rows (G×n)`: row `g` of `rows` is added to every row of group `g`.
    pub fn add_group_rows(&mut self, x: Var, rows: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let (g, gn) = self.shape(rows);
        if gn != n || g == 0 || m % g != 0 {
            return Err(Error::Dimension {
                op: "add_group_rows",
                left: (m, n),
                right: (g, gn),
            });
        }
        let r = m / g;
        let mut out = self.value(x).clone();
        let src = self.value(rows);
        for gi in 0..g {
            let add = src.row(gi).to_vec();
            for ri in 0..r {
                for (o, a) in out.row_mut(gi * r + ri).iter_mut().zip(&add) {
                    *o += a;
                }
            }
        }
        Ok(self.push(out, Op::AddGroupRows(x, rows)))
    }

    /// Scales row `i` of `x (m×n)` by `col[i]` (`col` is `m×1`).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(col) != (m, 1) {
            return Err(Error::Dimension {
                op: "mul_col",
                left: (m, n),
                right: self.shape(col),
            });
        }
        let mut out = self.value(x).clone();
        for r in 0..m {
            let s = self.value(col).get(r, 0);
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::MulCol(x, col)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshape(rows, cols)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_rows();
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmaxRows(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(gain) != (1, n) || self.shape(bias) != (1, n) {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: (m, n),
                right: self.shape(gain),
            });
        }
        let xv = self.value(x);
        let mut xhat = Matrix::zeros(m, n);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mu) * inv;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for r in 0..m {
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Divides each row by `max(‖row‖, floor)`.
    pub fn normalize_rows(&mut self, x: Var, floor: f64) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let d = n.max(floor);
            row.iter_mut().for_each(|v| *v /= d);
        }
        self.push(out, Op::NormalizeRows { x, floor, norms })
    }

    /// Per-row inner product, `m×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("row_dot", a, b)?;
        let (m, _) = self.shape(a);
        let av = self.value(a);
        let bv = self.value(b);
        let data = (0..m)
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let out = Matrix::from_vec(m, 1, data)?;
        Ok(self.push(out, Op::RowDot(a, b)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > n {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: (m, n),
                right: (start, len),
            });
        }
        let xv = self.value(x);
        let mut out = Matrix::zeros(m, len);
        for r in 0..m {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape(parts[0]).0;
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pm != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: (m, n),
                    right: (pm, pn),
                });
            }
            n += pn;
        }
        let mut out = Matrix::zeros(m, n);
        for r in 0..m {
            let mut off = 0;
            for &p in parts {
                let row = self.value(p).row(r);
                out.row_mut(r)[off..off + row.len()].copy_from_slice(row);
                off += row.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&mats)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (m, n) = self.shape(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Dimension {
                op: "gather_rows",
                left: (m, n),
                right: (bad, n),
            });
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            data.extend_from_slice(xv.row(r));
        }
        let out = Matrix::from_vec(rows.len(), n, data)?;
        Ok(self.push(out, Op::GatherRows(x, rows)))
    }

    pub fn combine_rows(&mut self, x: Var, map: RowMap) -> Result<Var> {
        let (m, n) = self.shape(x);
        if let Some(&(bad, _)) = map.entries.iter().find(|(r, _)| *r >= m) {
            return Err(Error::Dimension {
                op: "combine_rows",
                left: (m, n),
                right: (bad, n),
            });
        }
        let xv = self.value(x);
        let mut out = Matrix::zeros(map.out_rows(), n);
        for i in 0..map.out_rows() {
            let dst = out.row_mut(i);
            for &(src, w) in map.row(i) {
                for (d, s) in dst.iter_mut().zip(xv.row(src)) {
                    *d += w * s;
                }
            }
        }
        Ok(self.push(out, Op::CombineRows(x, map)))
    }

    /// Copy of `x` with the listed rows overwritten by constants; no gradient
    /// flows into the replaced rows.
    pub fn replace_rows(&mut self, x: Var, replacements: Vec<(usize, Vec<f64>)>) -> Result<Var> {
        let mut out = self.value(x).clone();
        let mut rows = Vec::with_capacity(replacements.len());
        for (r, vals) in replacements {
            if r >= out.rows() || vals.len() != out.cols() {
                return Err(Error::Dimension {
                    op: "replace_rows",
                    left: out.shape(),
                    right: (r, vals.len()),
                });
            }
            out.row_mut(r).copy_from_slice(&vals);
            rows.push(r);
        }
        Ok(self.push(out, Op::ReplaceRows(x, rows)))
    }

    /// Per-group `a_g · b_gᵀ` for `a ((G·ra)×n)`, `b ((G·rb)×n)`; result `(G·ra)×rb`.
    pub fn grouped_matmul_bt(&mut self, a: Var, b: Var, ra: usize, rb: usize) -> Result<Var> {
        let (ma, n) = self.shape(a);
        let (mb, nb) = self.shape(b);
        if n != nb || ra == 0 || rb == 0 || ma % ra != 0 || mb % rb != 0 || ma / ra != mb / rb {
            return Err(Error::Dimension {
                op: "grouped_matmul_bt",
                left: (ma, n),
                right: (mb, nb),
            });
        }
        let groups = ma / ra;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Matrix::zeros(ma, rb);
        {
            let od = out.data_mut();
            for g in 0..groups {
                gemm_bt_acc(
                    &av[g * ra * n..(g + 1) * ra * n],
                    &bv[g * rb * n..(g + 1) * rb * n],
                    &mut od[g * ra * rb..(g + 1) * ra * rb],
                    ra,
                    n,
                    rb,
                );
            }
        }
        Ok(self.push(out, Op::GroupedMatMulBt { a, b, ra, rb }))
    }

    /// Per-group `p_g · v_g` for `p ((G·ra)×rb)`, `v ((G·rb)×n)`; result `(G·ra)×n`.
    pub fn grouped_matmul(&mut self, p: Var, v: Var, ra: usize, rb: usize) -> Result<Var> {
        let (mp, np) = self.shape(p);
        let (mv, n) = self.shape(v);
        if np != rb || ra == 0 || rb == 0 || mp % ra != 0 || mv % rb != 0 || mp / ra != mv / rb {
            return Err(Error::Dimension {
                op: "grouped_matmul",
                left: (mp, np),
                right: (mv, n),
            });
        }
        let groups = mp / ra;
        let pv = self.value(p).data();
        let vv = self.value(v).data();
        let mut out = Matrix::zeros(mp, n);
        {
            let od = out.data_mut();
            for g in 0..groups {
                gemm_acc(
                    &pv[g * ra * rb..(g + 1) * ra * rb],
                    &vv[g * rb * n..(g + 1) * rb * n],
                    &mut od[g * ra * n..(g + 1) * ra * n],
                    ra,
                    rb,
                    n,
                );
            }
        }
        Ok(self.push(out, Op::GroupedMatMul { p, v, ra, rb }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Matrix::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        self.push(Matrix::scalar(s), Op::Mean(x))
    }

    /// Mean binary cross-entropy of probabilities `pred (m×1)` against
    /// `labels`, with predictions clamped to `[clamp, 1−clamp]`.
    pub fn bce_mean(&mut self, pred: Var, labels: Vec<f64>, clamp: f64) -> Result<Var> {
        let (m, n) = self.shape(pred);
        if n != 1 || labels.len() != m || m == 0 {
            return Err(Error::Dimension {
                op: "bce_mean",
                left: (m, n),
                right: (labels.len(), 1),
            });
        }
        let p = self.value(pred).data();
        let total: f64 = p
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                let pc = p.clamp(clamp, 1.0 - clamp);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        Ok(self.push(
            Matrix::scalar(total / m as f64),
            Op::BceMean {
                pred,
                labels,
                clamp,
            },
        ))
    }

    /// Column vector of the listed `(row, col)` entries.
    pub fn pick(&mut self, x: Var, at: Vec<(usize, usize)>) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        if let Some(&bad) = at.iter().find(|(r, c)| *r >= m || *c >= n) {
            return Err(Error::Dimension {
                op: "pick",
                left: (m, n),
                right: bad,
            });
        }
        let data = at.iter().map(|&(r, c)| xv.get(r, c)).collect();
        let out = Matrix::from_vec(at.len(), 1, data)?;
        Ok(self.push(out, Op::Pick(x, at)))
    }

    /// Back-propagates from the scalar `loss` and adds parameter gradients
    /// into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = av.shape();
                    let n = bv.cols();
                    let ga = slot(&mut grads, *a, (m, k));
                    gemm_bt_acc(g.data(), bv.data(), ga.data_mut(), m, n, k);
                    let gb = slot(&mut grads, *b, (k, n));
                    gemm_at_acc(av.data(), g.data(), gb.data_mut(), m, k, n);
                }
                Op::Add(a, b) => {
                    slot(&mut grads, *a, g.shape()).add_assign(&g);
                    slot(&mut grads, *b, g.shape()).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    slot(&mut grads, *a, g.shape()).add_assign(&g);
                    let gb = slot(&mut grads, *b, g.shape());
                    for (d, s) in gb.data_mut().iter_mut().zip(g.data()) {
                        *d -= s;
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let ga = slot(&mut grads, *a, g.shape());
                    for ((d, s), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *d += s * y;
                    }
                    let gb = slot(&mut grads, *b, g.shape());
                    for ((d, s), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *d += s * x;
                    }
                }
                Op::AddRow(x, row) => {
                    slot(&mut grads, *x, g.shape()).add_assign(&g);
                    let n = g.cols();
                    let gr = slot(&mut grads, *row, (1, n));
                    for r in 0..g.rows() {
                        for (d, s) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
                Op::AddTiled(x, tile) => {
                    slot(&mut grads, *x, g.shape()).add_assign(&g);
                    let ts = self.shape(*tile);
                    let gt = slot(&mut grads, *tile, ts);
                    for chunk in g.data().chunks(ts.0 * ts.1) {
                        for (d, s) in gt.data_mut().iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                }
                Op::AddGroupRows(x, rows) => {
                    slot(&mut grads, *x, g.shape()).add_assign(&g);
                    let rs = self.shape(*rows);
                    let per = g.rows() / rs.0;
                    let gr = slot(&mut grads, *rows, rs);
                    for gi in 0..rs.0 {
                        for ri in 0..per {
                            for (d, s) in gr.row_mut(gi).iter_mut().zip(g.row(gi * per + ri)) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::MulCol(x, col) => {
                    let xv = self.value(*x);
                    let cv = self.value(*col);
                    let gx = slot(&mut grads, *x, g.shape());
                    for r in 0..g.rows() {
                        let s = cv.get(r, 0);
                        for (d, gv) in gx.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d += gv * s;
                        }
                    }
                    let gc = slot(&mut grads, *col, cv.shape());
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                        gc.data_mut()[r] += dot;
                    }
                }
                Op::Scale(x, s) => {
                    let gx = slot(&mut grads, *x, g.shape());
                    for (d, v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += v * s;
                    }
                }
                Op::Transpose(x) => {
                    let gt = g.transpose();
                    slot(&mut grads, *x, gt.shape()).add_assign(&gt);
                }
                Op::Reshape(x) => {
                    let s = self.shape(*x);
                    let gx = slot(&mut grads, *x, s);
                    for (d, v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += v;
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let gx = slot(&mut grads, *x, g.shape());
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
                Op::LogSoftmaxRows(x) => {
                    let y = &node.value;
                    let gx = slot(&mut grads, *x, g.shape());
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let total: f64 = gr.iter().sum();
                        for ((d, yv), gv) in gx.row_mut(r).iter_mut().zip(y.row(r)).zip(gr) {
                            *d += gv - yv.exp() * total;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let gx = slot(&mut grads, *x, g.shape());
                    for ((d, yv), gv) in gx.data_mut().iter_mut().zip(y).zip(g.data()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let gx = slot(&mut grads, *x, g.shape());
                    for ((d, yv), gv) in gx.data_mut().iter_mut().zip(y).zip(g.data()) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let gx = slot(&mut grads, *x, g.shape());
                    for ((d, v), gv) in gx.data_mut().iter_mut().zip(xv).zip(g.data()) {
                        *d += gv * gelu_grad(*v);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (m, n) = g.shape();
                    let gain_v = self.value(*gain).data().to_vec();
                    {
                        let gg = slot(&mut grads, *gain, (1, n));
                        for r in 0..m {
                            for ((d, gv), xh) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                                *d += gv * xh;
                            }
                        }
                    }
                    {
                        let gb = slot(&mut grads, *bias, (1, n));
                        for r in 0..m {
                            for (d, gv) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *d += gv;
                            }
                        }
                    }
                    let gx = slot(&mut grads, *x, (m, n));
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            dxhat[j] = g.get(r, j) * gain_v[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let xh = xhat.row(r);
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let inv = inv_std[r];
                        for (j, d) in gx.row_mut(r).iter_mut().enumerate() {
                            *d += inv * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                Op::NormalizeRows { x, floor, norms } => {
                    let y = &node.value;
                    let gx = slot(&mut grads, *x, g.shape());
                    for r in 0..g.rows() {
                        let n = norms[r];
                        let gr = g.row(r);
                        if n > *floor {
                            let yr = y.row(r);
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((d, gv), yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                                *d += (gv - yv * dot) / n;
                            }
                        } else {
                            for (d, gv) in gx.row_mut(r).iter_mut().zip(gr) {
                                *d += gv / floor;
                            }
                        }
                    }
                }
                Op::RowDot(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let s = av.shape();
                    {
                        let ga = slot(&mut grads, *a, s);
                        for r in 0..s.0 {
                            let gr = g.get(r, 0);
                            for (d, y) in ga.row_mut(r).iter_mut().zip(bv.row(r)) {
                                *d += gr * y;
                            }
                        }
                    }
                    let gb = slot(&mut grads, *b, s);
                    for r in 0..s.0 {
                        let gr = g.get(r, 0);
                        for (d, x) in gb.row_mut(r).iter_mut().zip(av.row(r)) {
                            *d += gr * x;
                        }
                    }
                }
                Op::SliceCols(x, start) => {
                    let s = self.shape(*x);
                    let len = g.cols();
                    let gx = slot(&mut grads, *x, s);
                    for r in 0..g.rows() {
                        for (d, v) in gx.row_mut(r)[*start..start + len].iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let s = self.shape(p);
                        let gp = slot(&mut grads, p, s);
                        for r in 0..s.0 {
                            for (d, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + s.1]) {
                                *d += v;
                            }
                        }
                        off += s.1;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let s = self.shape(p);
                        let gp = slot(&mut grads, p, s);
                        let src = &g.data()[off..off + s.0 * s.1];
                        for (d, v) in gp.data_mut().iter_mut().zip(src) {
                            *d += v;
                        }
                        off += s.0 * s.1;
                    }
                }
                Op::GatherRows(x, rows) => {
                    let s = self.shape(*x);
                    let gx = slot(&mut grads, *x, s);
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                }
                Op::CombineRows(x, map) => {
                    let s = self.shape(*x);
                    let gx = slot(&mut grads, *x, s);
                    for i in 0..map.out_rows() {
                        let gi = g.row(i);
                        for &(src, w) in map.row(i) {
                            for (d, v) in gx.row_mut(src).iter_mut().zip(gi) {
                                *d += w * v;
                            }
                        }
                    }
                }
                Op::ReplaceRows(x, rows) => {
                    let mut pass = g.clone();
                    for &r in rows {
                        pass.row_mut(r).fill(0.0);
                    }
                    slot(&mut grads, *x, pass.shape()).add_assign(&pass);
                }
                Op::GroupedMatMulBt { a, b, ra, rb } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let n = av.cols();
                    let groups = av.rows() / ra;
                    {
                        let ga = slot(&mut grads, *a, av.shape());
                        for gi in 0..groups {
                            gemm_acc(
                                &g.data()[gi * ra * rb..(gi + 1) * ra * rb],
                                &bv.data()[gi * rb * n..(gi + 1) * rb * n],
                                &mut ga.data_mut()[gi * ra * n..(gi + 1) * ra * n],
                                *ra,
                                *rb,
                                n,
                            );
                        }
                    }
                    let gb = slot(&mut grads, *b, bv.shape());
                    for gi in 0..groups {
                        gemm_at_acc(
                            &g.data()[gi * ra * rb..(gi + 1) * ra * rb],
                            &av.data()[gi * ra * n..(gi + 1) * ra * n],
                            &mut gb.data_mut()[gi * rb * n..(gi + 1) * rb * n],
                            *ra,
                            *rb,
                            n,
                        );
                    }
                }
                Op::GroupedMatMul { p, v, ra, rb } => {
                    let pv = self.value(*p);
                    let vv = self.value(*v);
                    let n = vv.cols();
                    let groups = pv.rows() / ra;
                    {
                        let gp = slot(&mut grads, *p, pv.shape());
                        for gi in 0..groups {
                            gemm_bt_acc(
                                &g.data()[gi * ra * n..(gi + 1) * ra * n],
                                &vv.data()[gi * rb * n..(gi + 1) * rb * n],
                                &mut gp.data_mut()[gi * ra * rb..(gi + 1) * ra * rb],
                                *ra,
                                n,
                                *rb,
                            );
                        }
                    }
                    let gv = slot(&mut grads, *v, vv.shape());
                    for gi in 0..groups {
                        gemm_at_acc(
                            &pv.data()[gi * ra * rb..(gi + 1) * ra * rb],
                            &g.data()[gi * ra * n..(gi + 1) * ra * n],
                            &mut gv.data_mut()[gi * rb * n..(gi + 1) * rb * n],
                            *ra,
                            *rb,
                            n,
                        );
                    }
                }
                Op::Sum(x) => {
                    let s = self.shape(*x);
                    let gv = g.item();
                    slot(&mut grads, *x, s)
                        .data_mut()
                        .iter_mut()
                        .for_each(|d| *d += gv);
                }
                Op::Mean(x) => {
                    let s = self.shape(*x);
                    let gv = g.item() / (s.0 * s.1) as f64;
                    slot(&mut grads, *x, s)
                        .data_mut()
                        .iter_mut()
                        .for_each(|d| *d += gv);
                }
                Op::BceMean {
                    pred,
                    labels,
                    clamp,
                } => {
                    let pv = self.value(*pred);
                    let m = labels.len() as f64;
                    let gv = g.item();
                    let gp = slot(&mut grads, *pred, pv.shape());
                    for ((d, &p), &y) in gp.data_mut().iter_mut().zip(pv.data()).zip(labels) {
                        if p > *clamp && p < 1.0 - clamp {
                            *d += gv * -(y / p - (1.0 - y) / (1.0 - p)) / m;
                        }
                    }
                }
                Op::Pick(x, at) => {
                    let s = self.shape(*x);
                    let gx = slot(&mut grads, *x, s);
                    for (i, &(r, c)) in at.iter().enumerate() {
                        gx.data_mut()[r * s.1 + c] += g.get(i, 0);
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

/// `softmax(QKᵀ/√d)V` on plain matrices.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Dimension {
            op: "scaled_dot_attention",
            left: q.shape(),
            right: k.shape(),
        });
    }
    let mut scores = q.matmul_bt(k)?.scale(1.0 / (q.cols() as f64).sqrt());
    for r in 0..scores.rows() {
        softmax_in_place(scores.row_mut(r));
    }
    scores.matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Central differences of `f` w.r.t. every entry of parameter `id`.
    fn numeric_grad(
        store: &mut ParamStore,
        id: ParamId,
        f: &dyn Fn(&ParamStore) -> f64,
    ) -> Matrix {
        let h = 1e-5;
        let shape = store.value(id).shape();
        let mut out = Matrix::zeros(shape.0, shape.1);
        for i in 0..out.len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let up = f(store);
            store.value_mut(id).data_mut()[i] = orig - h;
            let down = f(store);
            store.value_mut(id).data_mut()[i] = orig;
            out.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        let diff = a.sub(b).unwrap().frobenius();
        let scale = b.frobenius().max(1e-8);
        assert!(diff / scale < tol, "rel err {} ({a:?} vs {b:?})", diff / scale);
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Rng::new(1).gaussian(3, 3));
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let s = tape.sum(w);
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(id), &Matrix::filled(3, 3, 1.0));
    }

    #[test]
    fn quadratic_form_gradient() {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::new();
        let id = store.add("w", rng.gaussian(3, 4));
        let x = rng.gaussian(4, 1);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let xv = tape.constant(x.clone());
        let wx = tape.matmul(w, xv).unwrap();
        let sq = tape.mul(wx, wx).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        let expected = store
            .value(id)
            .matmul(&x)
            .unwrap()
            .scale(2.0)
            .matmul(&x.transpose())
            .unwrap();
        assert_close(store.grad(id), &expected, 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::zeros(2, 2));
        assert!(matches!(
            tape.backward(c, &mut store),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unreachable_parameter_keeps_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("a", Matrix::filled(1, 2, 1.0));
        let unused = store.add("b", Matrix::filled(1, 2, 1.0));
        let mut tape = Tape::new();
        let a = tape.param(&store, used);
        let _b = tape.param(&store, unused);
        let s = tape.sum(a);
        tape.backward(s, &mut store).unwrap();
        assert!(store.grad(unused).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn attention_examples() {
        let mut rng = Rng::new(8);
        // identical keys -> mean of values
        let q = rng.gaussian(2, 4);
        let k = Matrix::from_rows(&[[0.3, -0.2, 0.1, 0.5]; 3]);
        let v = rng.gaussian(3, 5);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for r in 0..2 {
            for c in 0..5 {
                let mean = (v.get(0, c) + v.get(1, c) + v.get(2, c)) / 3.0;
                assert!((out.get(r, c) - mean).abs() < 1e-14);
            }
        }
        // single key
        let k1 = rng.gaussian(1, 4);
        let v1 = rng.gaussian(1, 5);
        let out = scaled_dot_attention(&q, &k1, &v1).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), v1.row(0));
        }
    }

    #[test]
    fn attention_matches_composed_oracle() {
        let mut rng = Rng::new(9);
        let q = rng.gaussian(3, 8);
        let k = rng.gaussian(4, 8);
        let v = rng.gaussian(4, 8);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        let oracle = q
            .matmul(&k.transpose())
            .unwrap()
            .scale(1.0 / 8f64.sqrt())
            .softmax_rows()
            .matmul(&v)
            .unwrap();
        for (a, b) in out.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        for r in 0..3 {
            let w = q
                .matmul_bt(&k)
                .unwrap()
                .scale(1.0 / 8f64.sqrt())
                .softmax_rows();
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    /// Every op against central differences on a composite expression.
    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        let mut store = ParamStore::new();
        let a_id = store.add("a", rng.gaussian(6, 4));
        let b_id = store.add("b", rng.gaussian(4, 4));
        let g_id = store.add("gain", rng.gaussian(1, 4));
        let row_id = store.add("row", rng.gaussian(1, 4));
        let tile_id = store.add("tile", rng.gaussian(3, 4));
        let labels = vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0];

        let forward = |store: &ParamStore, tape: &mut Tape| -> Var {
            let a = tape.param(store, a_id);
            let b = tape.param(store, b_id);
            let gain = tape.param(store, g_id);
            let row = tape.param(store, row_id);
            let tile = tape.param(store, tile_id);
            let x = tape.matmul(a, b).unwrap();
            let x = tape.add_row(x, row).unwrap();
            let x = tape.add_tiled(x, tile).unwrap();
            let x = tape.layer_norm(x, gain, row, 1e-5).unwrap();
            let x = tape.gelu(x);
            let t = tape.tanh(x);
            let att_s = tape.grouped_matmul_bt(x, t, 3, 3).unwrap();
            let att_p = tape.softmax_rows(att_s);
            let att = tape.grouped_matmul(att_p, t, 3, 3).unwrap();
            let n = tape.normalize_rows(att, 1e-12);
            let grp = tape.gather_rows(row, vec![0, 0]).unwrap();
            let z = tape.add_group_rows(n, grp).unwrap();
            let d = tape.row_dot(z, x).unwrap();
            let zc = tape.mul_col(z, d).unwrap();
            let sl = tape.slice_cols(zc, 1, 2).unwrap();
            let cat = tape.concat_cols(&[sl, d]).unwrap();
            let mut map = RowMap::new();
            map.push_mean(&[0, 2, 5]);
            map.push_row([(1, 0.5), (3, -1.5)]);
            let comb = tape.combine_rows(cat, map).unwrap();
            let rows = tape.concat_rows(&[cat, comb]).unwrap();
            let rep = tape.replace_rows(rows, vec![(7, vec![0.1, 0.2, 0.3])]).unwrap();
            let tr = tape.transpose(rep);
            let rs = tape.reshape(tr, 8, 3).unwrap();
            let ls = tape.log_softmax_rows(rs);
            let pk = tape.pick(ls, (0..6).map(|i| (i, i % 3)).collect()).unwrap();
            let sg = tape.sigmoid(pk);
            let bce = tape.bce_mean(sg, labels.clone(), 1e-7).unwrap();
            let m = tape.mean(ls);
            let sc = tape.scale(m, 0.3);
            let diff = tape.sub(bce, sc).unwrap();
            tape.add(diff, bce).unwrap()
        };

        let mut tape = Tape::new();
        let loss = forward(&store, &mut tape);
        tape.backward(loss, &mut store).unwrap();
        let eval = |s: &ParamStore| {
            let mut t = Tape::new();
            let l = forward(s, &mut t);
            t.value(l).item()
        };
        for id in [a_id, b_id, g_id, row_id, tile_id] {
            let analytic = store.grad(id).clone();
            let numeric = numeric_grad(&mut store, id, &eval);
            assert_close(&analytic, &numeric, 1e-6);
        }
    }

    #[test]
    fn replay_returns_recorded_values() {
        let mut tape = Tape::new();
        let a: u32 = tape.frozen(|_| 5);
        let m = tape.frozen_constant(|_| Matrix::scalar(2.0));
        assert_eq!(a, 5);
        let trace = tape.into_trace();
        assert_eq!(trace.len(), 2);
        let mut replay = Tape::replaying(trace);
        let a2: u32 = replay.frozen(|_| 99);
        let m2 = replay.frozen_constant(|_| Matrix::scalar(-1.0));
        assert_eq!(a2, 5);
        assert_eq!(replay.value(m2).item(), 2.0);
        let _ = m;
    }
}
