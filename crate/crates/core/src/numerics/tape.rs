//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every op applied during a forward pass; [`Tape::backward`]
//! walks the records in reverse and returns the adjoint of each leaf. One tape
//! serves one forward pass; build a fresh tape (or call [`Tape::reset`]) per step.

use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse neighbourhoods for [`Tape::neighbor_attention`]: row `i` lists
/// `(j, edge_type)` pairs in a fixed order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Adjacency {
    pub neighbors: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug)]
struct LstmCache {
    hidden: usize,
    /// Post-activation gates `[i, f, g, o]`, one row per position.
    gates: Vec<f64>,
    cells: Vec<f64>,
    cell_tanh: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    MaskedSoftmax(Var, Vec<bool>),
    MaxPoolRows(Var, Vec<usize>),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        target: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
    LstmRecurrence {
        pre: Var,
        wh: Var,
        reverse: bool,
        cache: LstmCache,
    },
    NeighborAttention {
        src: Var,
        dst: Var,
        values: Var,
        adjacency: Arc<Adjacency>,
        slope: f64,
        alpha: Vec<Vec<f64>>,
        raw: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the leaves of a tape, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims().map_err(|_| NumericsError::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: "expected rank <= 2".into(),
    })
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("internal shape bookkeeping")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf whose adjoint is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Hash of every branch taken by piecewise ops: the sign of each relu and
    /// leaky-relu input (including attention scores) and each max-pool
    /// argmax. Two evaluations with equal signatures lie on the same smooth
    /// piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => {
                    for &x in self.value(*a).data() {
                        feed(u64::from(x > 0.0));
                    }
                }
                Op::MaxPoolRows(_, arg) => arg.iter().for_each(|&k| feed(k as u64)),
                Op::NeighborAttention { raw, .. } => {
                    for &x in raw.iter().flatten() {
                        feed(u64::from(x > 0.0));
                    }
                }
                _ => {}
            }
            feed(0xff);
        }
        h
    }

    /// Attention weights recorded by a [`Tape::neighbor_attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes.get(v.0)?.op {
            Op::NeighborAttention { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims("matmul", ta)?;
        let (k2, n) = dims("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        self.push("matmul", mat(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims("transpose", t)?;
        let src = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", mat(c, r, out), Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        let (r, c) = dims("add_row", ta)?;
        if tb.len() != c {
            return Err(mismatch("add_row", ta, tb));
        }
        let b = tb.data();
        let mut out = ta.data().to_vec();
        for i in 0..r {
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o += x;
            }
        }
        self.push("add_row", mat(r, c, out), Op::AddRow(a, row), &[a, row])
    }

    /// Adds an `r x 1` column to every column of an `r x c` matrix.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(col));
        let (r, c) = dims("add_col", ta)?;
        if tb.len() != r {
            return Err(mismatch("add_col", ta, tb));
        }
        let b = tb.data();
        let mut out = ta.data().to_vec();
        for i in 0..r {
            for o in &mut out[i * c..(i + 1) * c] {
                *o += b[i];
            }
        }
        self.push("add_col", mat(r, c, out), Op::AddCol(a, col), &[a, col])
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Multiplies every row of an `r x c` matrix elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        let (r, c) = dims("mul_row", ta)?;
        if tb.len() != c {
            return Err(mismatch("mul_row", ta, tb));
        }
        let b = tb.data();
        let mut out = ta.data().to_vec();
        for i in 0..r {
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o *= x;
            }
        }
        self.push("mul_row", mat(r, c, out), Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let t = self.value(a);
        if t.len() != c.len() {
            return Err(mismatch("mul_const", t, &c));
        }
        let data = t.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push("mul_const", v, Op::MulConst(a, c), &[a])
    }

    /// Concatenates along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumericsError::Empty { op: "concat_cols" })?;
        let r = dims("concat_cols", self.value(first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims("concat_cols", self.value(p))?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", mat(r, total, out), Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumericsError::Empty { op: "concat_rows" })?;
        let c = dims("concat_rows", self.value(first))?.1;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = dims("concat_rows", self.value(p))?;
            if pc != c {
                return Err(mismatch("concat_rows", self.value(first), self.value(p)));
            }
            rows += pr;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        self.push("concat_rows", mat(rows, c, out), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims("slice_cols", t)?;
        if start > end || end > c {
            return Err(NumericsError::IndexOutOfBounds {
                op: "slice_cols",
                index: end,
                bound: c,
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        self.push("slice_cols", mat(r, w, out), Op::SliceCols(a, start), &[a])
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims("slice_rows", t)?;
        if start > end || end > r {
            return Err(NumericsError::IndexOutOfBounds {
                op: "slice_rows",
                index: end,
                bound: r,
            });
        }
        let out = t.data()[start * c..end * c].to_vec();
        self.push("slice_rows", mat(end - start, c, out), Op::SliceRows(a, start), &[a])
    }

    /// Selects rows by index (repeats allowed); the adjoint scatter-adds.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims("gather_rows", t)?;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(NumericsError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(t.row_slice(i));
        }
        let v = mat(indices.len(), c, out);
        self.push("gather_rows", v, Op::GatherRows(a, indices.to_vec()), &[a])
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push(name, v, op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map("leaky_relu", a, |x| leaky(x, slope), Op::LeakyRelu(a, slope))
    }

    /// Row-wise softmax restricted to `mask`; masked entries are exactly 0.
    ///
    /// `mask` has one flag per column (shared by every row) or one per element.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims("masked_softmax", t)?;
        let full: Vec<bool> = if mask.len() == c {
            mask.iter().copied().cycle().take(r * c).collect()
        } else if mask.len() == r * c {
            mask.to_vec()
        } else {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_softmax",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let m = &full[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NumericsError::AllMasked {
                    op: "masked_softmax",
                    row: i,
                });
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        self.push("masked_softmax", mat(r, c, out), Op::MaskedSoftmax(a, full), &[a])
    }

    /// Column-wise maximum over rows, giving a `1 x c` row.
    pub fn max_pool_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims("max_pool_rows", t)?;
        if r == 0 {
            return Err(NumericsError::Empty { op: "max_pool_rows" });
        }
        let mut arg = vec![0usize; c];
        let mut out = t.row_slice(0).to_vec();
        for i in 1..r {
            for (j, &x) in t.row_slice(i).iter().enumerate() {
                if x > out[j] {
                    out[j] = x;
                    arg[j] = i;
                }
            }
        }
        self.push("max_pool_rows", mat(1, c, out), Op::MaxPoolRows(a, arg), &[a])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `-log softmax(logits)[target]` with the softmax restricted to `mask`.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, target: usize, mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        if mask.len() != t.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        if target >= t.len() || !mask[target] {
            return Err(NumericsError::IndexOutOfBounds {
                op: "cross_entropy",
                index: target,
                bound: t.len(),
            });
        }
        let x = t.data();
        let max = x
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut probs = vec![0.0; x.len()];
        let mut z = 0.0;
        for i in 0..x.len() {
            if mask[i] {
                probs[i] = (x[i] - max).exp();
                z += probs[i];
            }
        }
        for p in &mut probs {
            *p /= z;
        }
        let loss = z.ln() + max - x[target];
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target,
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy over the entries selected by `mask`; zero
    /// when the mask selects nothing.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        if targets.len() != t.len() || mask.len() != t.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "bce_with_logits",
                left: t.shape().to_vec(),
                right: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut total = 0.0;
        for ((&x, &y), &m) in t.data().iter().zip(targets).zip(mask) {
            if m {
                total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            &[logits],
        )
    }

    /// One direction of an LSTM. `pre` holds the input contribution to the
    /// gate pre-activations (`n x 4h`, gate order `[i, f, g, o]`, bias already
    /// added); `wh` is the `h x 4h` recurrent matrix. With `reverse` the
    /// sequence is consumed from the last position to the first; output row
    /// `t` is always the hidden state at position `t`.
    pub fn lstm_recurrence(&mut self, pre: Var, wh: Var, reverse: bool) -> Result<Var> {
        let (tp, tw) = (self.value(pre), self.value(wh));
        let (n, four_h) = dims("lstm_recurrence", tp)?;
        let (h, w4) = dims("lstm_recurrence", tw)?;
        if w4 != four_h || four_h != 4 * h {
            return Err(mismatch("lstm_recurrence", tp, tw));
        }
        let (p, w) = (tp.data(), tw.data());
        let mut gates = vec![0.0; n * four_h];
        let mut cells = vec![0.0; n * h];
        let mut cell_tanh = vec![0.0; n * h];
        let mut out = vec![0.0; n * h];
        let mut z = vec![0.0; four_h];
        let mut prev: Option<usize> = None;
        for step in 0..n {
            let t = if reverse { n - 1 - step } else { step };
            z.copy_from_slice(&p[t * four_h..(t + 1) * four_h]);
            if let Some(pt) = prev {
                for k in 0..h {
                    let hk = out[pt * h + k];
                    if hk != 0.0 {
                        for (zj, wj) in z.iter_mut().zip(&w[k * four_h..(k + 1) * four_h]) {
                            *zj += hk * wj;
                        }
                    }
                }
            }
            let g = &mut gates[t * four_h..(t + 1) * four_h];
            for k in 0..h {
                let i_g = sigmoid(z[k]);
                let f_g = sigmoid(z[h + k]);
                let g_g = z[2 * h + k].tanh();
                let o_g = sigmoid(z[3 * h + k]);
                g[k] = i_g;
                g[h + k] = f_g;
                g[2 * h + k] = g_g;
                g[3 * h + k] = o_g;
                let c_prev = prev.map_or(0.0, |pt| cells[pt * h + k]);
                let c = f_g * c_prev + i_g * g_g;
                let tc = c.tanh();
                cells[t * h + k] = c;
                cell_tanh[t * h + k] = tc;
                out[t * h + k] = o_g * tc;
            }
            prev = Some(t);
        }
        let cache = LstmCache {
            hidden: h,
            gates,
            cells,
            cell_tanh,
        };
        self.push(
            "lstm_recurrence",
            mat(n, h, out),
            Op::LstmRecurrence {
                pre,
                wh,
                reverse,
                cache,
            },
            &[pre, wh],
        )
    }

    /// Edge-typed attention aggregation over sparse neighbourhoods.
    ///
    /// For row `i` with neighbours `(j, t)`:
    /// `e_ij = leaky(src[i, t] + dst[j, t])`, `alpha_i = softmax_j(e_ij)`,
    /// `out_i = sum_j alpha_ij * values_j`. Rows without neighbours are zero.
    pub fn neighbor_attention(
        &mut self,
        src: Var,
        dst: Var,
        values: Var,
        adjacency: Arc<Adjacency>,
        slope: f64,
    ) -> Result<Var> {
        let (ts, td, tv) = (self.value(src), self.value(dst), self.value(values));
        let (g, types) = dims("neighbor_attention", ts)?;
        if td.shape() != ts.shape() {
            return Err(mismatch("neighbor_attention", ts, td));
        }
        let (gv, d) = dims("neighbor_attention", tv)?;
        if gv != g || adjacency.neighbors.len() != g {
            return Err(mismatch("neighbor_attention", ts, tv));
        }
        let mut out = vec![0.0; g * d];
        let mut alpha = Vec::with_capacity(g);
        let mut raw = Vec::with_capacity(g);
        for (i, nbrs) in adjacency.neighbors.iter().enumerate() {
            let mut r = Vec::with_capacity(nbrs.len());
            for &(j, t) in nbrs {
                if j >= g || t >= types {
                    return Err(NumericsError::IndexOutOfBounds {
                        op: "neighbor_attention",
                        index: j.max(t),
                        bound: g.min(types),
                    });
                }
                r.push(ts.at(i, t) + td.at(j, t));
            }
            let scores: Vec<f64> = r.iter().map(|&x| leaky(x, slope)).collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut a: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
            let z: f64 = a.iter().sum();
            for v in &mut a {
                *v /= z;
            }
            let o = &mut out[i * d..(i + 1) * d];
            for (&(j, _), &w) in nbrs.iter().zip(&a) {
                for (ok, vk) in o.iter_mut().zip(tv.row_slice(j)) {
                    *ok += w * vk;
                }
            }
            alpha.push(a);
            raw.push(r);
        }
        self.push(
            "neighbor_attention",
            mat(g, d, out),
            Op::NeighborAttention {
                src,
                dst,
                values,
                adjacency,
                slope,
                alpha,
                raw,
            },
            &[src, dst, values],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::InvalidShape {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g.reshaped(self.value(v).shape().to_vec())),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims().unwrap();
                let n = tb.cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), true, &mut da, 0.0);
                    self.accumulate(grads, *a, mat(m, k, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, &mut db, 0.0);
                    self.accumulate(grads, *b, mat(k, n, db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims().unwrap();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = gd[j * r + i];
                    }
                }
                self.accumulate(grads, *a, mat(r, c, out));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    let (r, c) = g.dims().unwrap();
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for (d, x) in db.iter_mut().zip(&gd[i * c..(i + 1) * c]) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::row(&db));
                }
            }
            Op::AddCol(a, col) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*col) {
                    let (r, c) = g.dims().unwrap();
                    let db: Vec<f64> = (0..r).map(|i| gd[i * c..(i + 1) * c].iter().sum()).collect();
                    self.accumulate(grads, *col, mat(r, 1, db));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tb) = (self.value(*a), self.value(*row));
                let (r, c) = ta.dims().unwrap();
                if self.wants(*a) {
                    let mut d = gd.to_vec();
                    for i in 0..r {
                        for (x, y) in d[i * c..(i + 1) * c].iter_mut().zip(tb.data()) {
                            *x *= y;
                        }
                    }
                    self.accumulate(grads, *a, mat(r, c, d));
                }
                if self.wants(*row) {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += gd[i * c + j] * ta.data()[i * c + j];
                        }
                    }
                    self.accumulate(grads, *row, Tensor::row(&db));
                }
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_in_place(*s);
                self.accumulate(grads, *a, d);
            }
            Op::MulConst(a, c) => {
                let d = gd.iter().zip(c.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, mat(r, w, d));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.wants(p) {
                        let d = gd[offset * c..(offset + rows) * c].to_vec();
                        self.accumulate(grads, p, mat(rows, c, d));
                    }
                    offset += rows;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).dims().unwrap();
                let w = g.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, mat(r, c, d));
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.value(*a).dims().unwrap();
                let mut d = vec![0.0; r * c];
                d[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *a, mat(r, c, d));
            }
            Op::GatherRows(a, indices) => {
                let (r, c) = self.value(*a).dims().unwrap();
                let mut d = vec![0.0; r * c];
                for (k, &i) in indices.iter().enumerate() {
                    for (x, y) in d[i * c..(i + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *a, mat(r, c, d));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::MaskedSoftmax(a, mask) => {
                let (r, c) = g.dims().unwrap();
                let y = node.value.data();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = gd[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        if mask[j] {
                            d[j] = y[j] * (gd[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, mat(r, c, d));
            }
            Op::MaxPoolRows(a, arg) => {
                let (r, c) = self.value(*a).dims().unwrap();
                let mut d = vec![0.0; r * c];
                for (j, &i) in arg.iter().enumerate() {
                    d[i * c + j] += gd[j];
                }
                self.accumulate(grads, *a, mat(r, c, d));
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(t.shape(), gd[0]));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target,
            } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * gd[0]).collect();
                d[*target] -= gd[0];
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::new(shape, d).unwrap());
            }
            Op::BceWithLogits {
                logits,
                targets,
                mask,
                count,
            } => {
                let t = self.value(*logits);
                let scale = if *count == 0 { 0.0 } else { gd[0] / *count as f64 };
                let d = t
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(mask)
                    .map(|((&x, &y), &m)| if m { (sigmoid(x) - y) * scale } else { 0.0 })
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(t.shape().to_vec(), d).unwrap());
            }
            Op::LstmRecurrence {
                pre,
                wh,
                reverse,
                cache,
            } => self.lstm_backward(node, *pre, *wh, *reverse, cache, gd, grads),
            Op::NeighborAttention {
                src,
                dst,
                values,
                adjacency,
                slope,
                alpha,
                raw,
            } => {
                let tv = self.value(*values);
                let (gn, d) = tv.dims().unwrap();
                let types = self.value(*src).cols();
                let mut dsrc = vec![0.0; gn * types];
                let mut ddst = vec![0.0; gn * types];
                let mut dval = vec![0.0; gn * d];
                for (i, nbrs) in adjacency.neighbors.iter().enumerate() {
                    if nbrs.is_empty() {
                        continue;
                    }
                    let go = &gd[i * d..(i + 1) * d];
                    let a = &alpha[i];
                    let dalpha: Vec<f64> = nbrs
                        .iter()
                        .map(|&(j, _)| go.iter().zip(tv.row_slice(j)).map(|(x, y)| x * y).sum())
                        .collect();
                    let s: f64 = a.iter().zip(&dalpha).map(|(x, y)| x * y).sum();
                    for (k, &(j, t)) in nbrs.iter().enumerate() {
                        for (dv, x) in dval[j * d..(j + 1) * d].iter_mut().zip(go) {
                            *dv += a[k] * x;
                        }
                        let de = a[k] * (dalpha[k] - s);
                        let dr = if raw[i][k] > 0.0 { de } else { de * slope };
                        dsrc[i * types + t] += dr;
                        ddst[j * types + t] += dr;
                    }
                }
                self.accumulate(grads, *src, mat(gn, types, dsrc));
                self.accumulate(grads, *dst, mat(gn, types, ddst));
                self.accumulate(grads, *values, mat(gn, d, dval));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        node: &Node,
        pre: Var,
        wh: Var,
        reverse: bool,
        cache: &LstmCache,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let h = cache.hidden;
        let four_h = 4 * h;
        let n = node.value.rows();
        let hs = node.value.data();
        let w = self.value(wh).data();
        let mut dpre = vec![0.0; n * four_h];
        let mut dh_rec = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        // Processing order visits positions `order(0), order(1), ...`.
        let order = |step: usize| if reverse { n - 1 - step } else { step };
        for step in (0..n).rev() {
            let t = order(step);
            let prev = (step > 0).then(|| order(step - 1));
            let gt = &cache.gates[t * four_h..(t + 1) * four_h];
            let dz = &mut dpre[t * four_h..(t + 1) * four_h];
            for k in 0..h {
                let (i_g, f_g, g_g, o_g) = (gt[k], gt[h + k], gt[2 * h + k], gt[3 * h + k]);
                let tc = cache.cell_tanh[t * h + k];
                let dh = gd[t * h + k] + dh_rec[k];
                let d_o = dh * tc;
                let dc = dc_next[k] + dh * o_g * (1.0 - tc * tc);
                let c_prev = prev.map_or(0.0, |p| cache.cells[p * h + k]);
                dz[k] = dc * g_g * i_g * (1.0 - i_g);
                dz[h + k] = dc * c_prev * f_g * (1.0 - f_g);
                dz[2 * h + k] = dc * i_g * (1.0 - g_g * g_g);
                dz[3 * h + k] = d_o * o_g * (1.0 - o_g);
                dc_next[k] = dc * f_g;
            }
            for k in 0..h {
                dh_rec[k] = if prev.is_some() {
                    w[k * four_h..(k + 1) * four_h].iter().zip(dz.iter()).map(|(a, b)| a * b).sum()
                } else {
                    0.0
                };
            }
        }
        if self.wants(wh) {
            // dWh = sum_t h_prev(t)^T dz(t)
            let mut dw = vec![0.0; h * four_h];
            for step in 1..n {
                let t = order(step);
                let p = order(step - 1);
                let dz = &dpre[t * four_h..(t + 1) * four_h];
                for k in 0..h {
                    let hk = hs[p * h + k];
                    for (x, y) in dw[k * four_h..(k + 1) * four_h].iter_mut().zip(dz) {
                        *x += hk * y;
                    }
                }
            }
            self.accumulate(grads, wh, mat(h, four_h, dw));
        }
        self.accumulate(grads, pre, mat(n, four_h, dpre));
    }
}
