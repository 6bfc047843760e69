//! Reverse-mode tape over dense matrices.
//!
//! A tape is built per sample and per pass. Parameters enter either as
//! trainable leaves (carrying a slot index into [`Grads`]) or as constants,
//! in which case nothing upstream of them is ever differentiated. Values of
//! leaves are borrowed from the parameter store, so the tape lives no longer
//! than the parameters it reads.

use crate::losses::{self, LossError};
use crate::tensor::{gemm, Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Value<'a, T> {
    Borrowed(&'a Matrix<T>),
    Owned(Matrix<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Matrix<T> {
        match self {
            Value::Borrowed(m) => m,
            Value::Owned(m) => m,
        }
    }
}

enum Op<T> {
    Leaf,
    Param(usize),
    Gather { table: NodeId, ids: Vec<usize> },
    Add(NodeId, NodeId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Matrix<T>, rstd: Vec<T> },
    Gelu(NodeId),
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<Matrix<T>> },
    Dropout { x: NodeId, keep_scale: Vec<T> },
    SelectRows { x: NodeId, rows: Vec<usize> },
    ReplaceRows { x: NodeId, rows: Vec<usize>, fill: NodeId },
    ZeroRows { x: NodeId, rows: Vec<usize> },
    CrossEntropy { logits: NodeId, grad: Matrix<T> },
    Cosine { a: NodeId, b: NodeId, da: Vec<T>, db: Vec<T> },
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Attention pattern for self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMask<'m> {
    /// Every query attends to every valid key.
    Bidirectional { key_valid: Option<&'m [bool]> },
    /// Query `i` attends to valid keys `j <= i`.
    Causal { key_valid: Option<&'m [bool]> },
}

impl AttentionMask<'_> {
    #[inline]
    fn allows(&self, i: usize, j: usize) -> bool {
        match *self {
            AttentionMask::Bidirectional { key_valid } => key_valid.map_or(true, |k| k[j]),
            AttentionMask::Causal { key_valid } => j <= i && key_valid.map_or(true, |k| k[j]),
        }
    }
}

/// Gradient slots for trainable parameters, indexed by parameter id.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    slots: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new(n_params: usize) -> Self {
        Grads {
            slots: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Matrix<T>> {
        self.slots.get(id).and_then(Option::as_ref)
    }

    fn accumulate(&mut self, id: usize, g: &Matrix<T>) {
        match &mut self.slots[id] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Add another gradient set into this one, slot by slot.
    pub fn merge(&mut self, other: Grads<T>) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (id, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.slots[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for m in self.slots.iter_mut().flatten() {
            m.scale(s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Matrix<T>)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

pub struct Tape<'a, T> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        self.nodes[id.0].value.get()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Value<'a, T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Borrowed value that never receives a gradient.
    pub fn constant(&mut self, value: &'a Matrix<T>) -> NodeId {
        self.push(Value::Borrowed(value), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, value: Matrix<T>) -> NodeId {
        self.push(Value::Owned(value), Op::Leaf, false)
    }

    /// Trainable parameter occupying gradient slot `slot`.
    pub fn param(&mut self, slot: usize, value: &'a Matrix<T>) -> NodeId {
        self.push(Value::Borrowed(value), Op::Param(slot), true)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let out = self.value(table).select_rows(ids);
        let rg = self.rg(&[table]);
        self.push(Value::Owned(out), Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    /// Elementwise sum. `b` may be a `1 x n` row broadcast over `a`'s rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = va.clone();
        if va.shape() == vb.shape() {
            out.add_assign(vb);
        } else {
            assert_eq!(vb.rows(), 1, "add: incompatible shapes {:?} {:?}", va.shape(), vb.shape());
            assert_eq!(vb.cols(), va.cols());
            for r in 0..out.rows() {
                for (o, &x) in out.row_mut(r).iter_mut().zip(vb.row(0)) {
                    *o = *o + x;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Value::Owned(out), Op::Add(a, b), rg)
    }

    /// `x * w + b` with `w` of shape `in x out` and `b` a `1 x out` row.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let vx = self.value(x);
        let vw = self.value(w);
        let mut out = Matrix::zeros(vx.rows(), vw.cols());
        if let Some(b) = b {
            let vb = self.value(b);
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(vb.row(0));
            }
            gemm(T::one(), vx.view(), vw.view(), T::one(), out.view_mut());
        } else {
            gemm(T::one(), vx.view(), vw.view(), T::zero(), out.view_mut());
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Value::Owned(out), Op::Linear { x, w, b }, rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let g = self.value(gain).row(0);
        let bsl = self.value(bias).row(0);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(T::from_f64_lossy(rs));
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = T::from_f64_lossy((v.as_f64() - mean) * rs);
            }
            let xh = xhat.row(r).to_vec();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xh[j] * g[j] + bsl[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(Value::Owned(out), Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| T::from_f64_lossy(gelu(v.as_f64())));
        let rg = self.rg(&[x]);
        self.push(Value::Owned(out), Op::Gelu(x), rg)
    }

    /// Scaled dot-product multi-head self-attention over already projected
    /// queries, keys and values (each `L x d`). Returns the concatenated head
    /// outputs, `L x d`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, mask: AttentionMask<'_>) -> NodeId {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (l, d) = vq.shape();
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut out = Matrix::zeros(l, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut s = Matrix::zeros(l, l);
            gemm(scale, vq.view().cols(h * dh, dh), vk.view().cols(h * dh, dh).t(), T::zero(), s.view_mut());
            for i in 0..l {
                let row = s.row_mut(i);
                let mut max = T::neg_infinity();
                for (j, v) in row.iter().enumerate() {
                    if mask.allows(i, j) && *v > max {
                        max = *v;
                    }
                }
                if max == T::neg_infinity() {
                    row.iter_mut().for_each(|v| *v = T::zero());
                    continue;
                }
                let mut sum = T::zero();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if mask.allows(i, j) { (*v - max).exp() } else { T::zero() };
                    sum = sum + *v;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|v| *v = *v * inv);
            }
            gemm(T::one(), s.view(), vv.view().cols(h * dh, dh), T::zero(), out.view_mut().cols(h * dh, dh));
            probs.push(s);
        }
        let rg = self.rg(&[q, k, v]);
        self.push(Value::Owned(out), Op::Attention { q, k, v, heads, probs }, rg)
    }

    /// Inverted dropout with a caller-supplied keep mask.
    pub fn dropout(&mut self, x: NodeId, keep: &[bool], rate: f64) -> NodeId {
        let s = T::from_f64_lossy(1.0 / (1.0 - rate));
        let keep_scale: Vec<T> = keep.iter().map(|&k| if k { s } else { T::zero() }).collect();
        let vx = self.value(x);
        assert_eq!(keep_scale.len(), vx.len());
        let data = vx.as_slice().iter().zip(&keep_scale).map(|(&a, &b)| a * b).collect();
        let out = Matrix::from_vec(vx.rows(), vx.cols(), data);
        let rg = self.rg(&[x]);
        self.push(Value::Owned(out), Op::Dropout { x, keep_scale }, rg)
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let out = self.value(x).select_rows(rows);
        let rg = self.rg(&[x]);
        self.push(Value::Owned(out), Op::SelectRows { x, rows: rows.to_vec() }, rg)
    }

    /// Copy of `x` with the listed rows overwritten by the `1 x n` row `fill`.
    pub fn replace_rows(&mut self, x: NodeId, rows: &[usize], fill: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let f = self.value(fill).row(0).to_vec();
        for &r in rows {
            out.row_mut(r).copy_from_slice(&f);
        }
        let rg = self.rg(&[x, fill]);
        self.push(Value::Owned(out), Op::ReplaceRows { x, rows: rows.to_vec(), fill }, rg)
    }

    pub fn zero_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let mut out = self.value(x).clone();
        for &r in rows {
            out.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
        }
        let rg = self.rg(&[x]);
        self.push(Value::Owned(out), Op::ZeroRows { x, rows: rows.to_vec() }, rg)
    }

    /// Mean cross-entropy over `(row, target)` pairs; a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[(usize, u32)]) -> Result<NodeId, LossError> {
        let (loss, grad) = losses::cross_entropy_rows_grad(self.value(logits), targets)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Value::Owned(Matrix::from_vec(1, 1, vec![T::from_f64_lossy(loss)])),
            Op::CrossEntropy { logits, grad },
            rg,
        ))
    }

    /// `1 - cos(a, b)` between two `1 x n` rows; a `1 x 1` node.
    pub fn cosine_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, LossError> {
        let (loss, da, db) = losses::jepa_loss_grad(self.value(a).as_slice(), self.value(b).as_slice())?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Value::Owned(Matrix::from_vec(1, 1, vec![T::from_f64_lossy(loss)])),
            Op::Cosine { a, b, da, db },
            rg,
        ))
    }

    /// Propagate the given output gradients back to every trainable leaf,
    /// accumulating into `grads`.
    pub fn backward(&self, seeds: &[(NodeId, Matrix<T>)], grads: &mut Grads<T>) {
        let mut g: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut lowest = self.nodes.len();
        for (id, seed) in seeds {
            if !self.nodes[id.0].requires_grad {
                continue;
            }
            assert_eq!(seed.shape(), self.value(*id).shape(), "seed shape");
            acc(&mut g, *id, seed);
            lowest = lowest.min(id.0);
        }
        if lowest == self.nodes.len() {
            return;
        }
        let max_seed = seeds.iter().map(|(id, _)| id.0).max().unwrap_or(0);
        for idx in (0..=max_seed).rev() {
            let Some(dy) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &dy, &mut g, grads);
        }
    }

    fn backward_node(&self, node: &Node<'a, T>, dy: &Matrix<T>, g: &mut [Option<Matrix<T>>], grads: &mut Grads<T>) {
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Param(slot) => grads.accumulate(*slot, dy),
            Op::Gather { table, ids } => {
                if rg(*table) {
                    let vt = self.value(*table);
                    let mut dt = Matrix::zeros(vt.rows(), vt.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &d) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                            *o = *o + d;
                        }
                    }
                    acc_owned(g, *table, dt);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    acc(g, *a, dy);
                }
                if rg(*b) {
                    if self.value(*b).shape() == dy.shape() {
                        acc(g, *b, dy);
                    } else {
                        acc_owned(g, *b, column_sums(dy));
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                if rg(*x) {
                    let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                    gemm(T::one(), dy.view(), vw.view().t(), T::zero(), dx.view_mut());
                    acc_owned(g, *x, dx);
                }
                if rg(*w) {
                    let mut dw = Matrix::zeros(vw.rows(), vw.cols());
                    gemm(T::one(), vx.view().t(), dy.view(), T::zero(), dw.view_mut());
                    acc_owned(g, *w, dw);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        acc_owned(g, *b, column_sums(dy));
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).row(0);
                let (rows, cols) = dy.shape();
                if rg(*gain) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for ((o, &d), &h) in dg.row_mut(0).iter_mut().zip(dy.row(r)).zip(xhat.row(r)) {
                            *o = *o + d * h;
                        }
                    }
                    acc_owned(g, *gain, dg);
                }
                if rg(*bias) {
                    acc_owned(g, *bias, column_sums(dy));
                }
                if rg(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = T::from_usize(cols).unwrap();
                    for r in 0..rows {
                        let dyr = dy.row(r);
                        let xh = xhat.row(r);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..cols {
                            let dxh = dyr[j] * gv[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xh[j];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        let rs = rstd[r];
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rs * (dyr[j] * gv[j] - m1 - xh[j] * m2);
                        }
                    }
                    acc_owned(g, *x, dx);
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let data = vx
                    .as_slice()
                    .iter()
                    .zip(dy.as_slice())
                    .map(|(&v, &d)| d * T::from_f64_lossy(gelu_grad(v.as_f64())))
                    .collect();
                acc_owned(g, *x, Matrix::from_vec(vx.rows(), vx.cols(), data));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (l, d) = vq.shape();
                let dh = d / heads;
                let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
                let mut dq = Matrix::zeros(l, d);
                let mut dk = Matrix::zeros(l, d);
                let mut dv = Matrix::zeros(l, d);
                let mut dp = Matrix::zeros(l, l);
                for (h, p) in probs.iter().enumerate() {
                    let cols = h * dh;
                    let dyh = dy.view().cols(cols, dh);
                    if rg(*v) {
                        gemm(T::one(), p.view().t(), dyh, T::zero(), dv.view_mut().cols(cols, dh));
                    }
                    if !(rg(*q) || rg(*k)) {
                        continue;
                    }
                    gemm(T::one(), dyh, vv.view().cols(cols, dh).t(), T::zero(), dp.view_mut());
                    // dS = P * (dP - rowsum(dP * P))
                    for i in 0..l {
                        let pr = p.row(i);
                        let dr = dp.row_mut(i);
                        let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for (x, &pv) in dr.iter_mut().zip(pr) {
                            *x = pv * (*x - dot);
                        }
                    }
                    if rg(*q) {
                        gemm(scale, dp.view(), vk.view().cols(cols, dh), T::zero(), dq.view_mut().cols(cols, dh));
                    }
                    if rg(*k) {
                        gemm(scale, dp.view().t(), vq.view().cols(cols, dh), T::zero(), dk.view_mut().cols(cols, dh));
                    }
                }
                if rg(*q) {
                    acc_owned(g, *q, dq);
                }
                if rg(*k) {
                    acc_owned(g, *k, dk);
                }
                if rg(*v) {
                    acc_owned(g, *v, dv);
                }
            }
            Op::Dropout { x, keep_scale } => {
                let data = dy.as_slice().iter().zip(keep_scale).map(|(&a, &b)| a * b).collect();
                acc_owned(g, *x, Matrix::from_vec(dy.rows(), dy.cols(), data));
            }
            Op::SelectRows { x, rows } => {
                let vx = self.value(*x);
                let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &d) in dx.row_mut(r).iter_mut().zip(dy.row(i)) {
                        *o = *o + d;
                    }
                }
                acc_owned(g, *x, dx);
            }
            Op::ReplaceRows { x, rows, fill } => {
                if rg(*fill) {
                    let mut df = Matrix::zeros(1, dy.cols());
                    for &r in rows {
                        for (o, &d) in df.row_mut(0).iter_mut().zip(dy.row(r)) {
                            *o = *o + d;
                        }
                    }
                    acc_owned(g, *fill, df);
                }
                if rg(*x) {
                    let mut dx = dy.clone();
                    for &r in rows {
                        dx.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
                    }
                    acc_owned(g, *x, dx);
                }
            }
            Op::ZeroRows { x, rows } => {
                let mut dx = dy.clone();
                for &r in rows {
                    dx.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
                }
                acc_owned(g, *x, dx);
            }
            Op::CrossEntropy { logits, grad } => {
                let mut dl = grad.clone();
                dl.scale(dy.get(0, 0));
                acc_owned(g, *logits, dl);
            }
            Op::Cosine { a, b, da, db } => {
                let s = dy.get(0, 0);
                if rg(*a) {
                    acc_owned(g, *a, Matrix::from_vec(1, da.len(), da.iter().map(|&v| v * s).collect()));
                }
                if rg(*b) {
                    acc_owned(g, *b, Matrix::from_vec(1, db.len(), db.iter().map(|&v| v * s).collect()));
                }
            }
        }
    }
}

fn acc<T: Scalar>(g: &mut [Option<Matrix<T>>], id: NodeId, d: &Matrix<T>) {
    match &mut g[id.0] {
        Some(m) => m.add_assign(d),
        slot @ None => *slot = Some(d.clone()),
    }
}

fn acc_owned<T: Scalar>(g: &mut [Option<Matrix<T>>], id: NodeId, d: Matrix<T>) {
    match &mut g[id.0] {
        Some(m) => m.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn column_sums<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o = *o + v;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
