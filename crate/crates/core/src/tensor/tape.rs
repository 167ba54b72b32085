//! Reverse-mode differentiation over row-batched dense matrices.
//!
//! A [`Tape`] records one forward evaluation as a flat list of nodes. Each
//! node holds its computed value and the primitive that produced it. Rows are
//! the batch dimension: a single sample is a `1 × k` value, a batch of `B`
//! samples a `B × k` value. Parameters are never copied onto the tape by the
//! operations that read them (`affine`, `gather`, ...); those operations read
//! the [`ParamStore`] directly during the forward pass and scatter into its
//! gradient accumulators during [`Tape::backward`].
//!
//! `backward` takes `&self`, so the same tape can be replayed; each replay
//! adds into the parameter accumulators again.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::matrix::{axpy, dot, relu, sigmoid};
use crate::tensor::{Matrix, ParamId, ParamStore};

/// Probability clamp used by the cross-entropy primitive before taking logs.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather {
        table: ParamId,
        rows: Vec<usize>,
    },
    GatherMean {
        table: ParamId,
        lists: Vec<Vec<usize>>,
    },
    Affine {
        x: NodeId,
        weight: ParamId,
        bias: ParamId,
    },
    BiasAdd {
        x: NodeId,
        bias: ParamId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    SelectRows {
        base: NodeId,
        replacement: NodeId,
        flags: Vec<bool>,
    },
    ScaleByColumn {
        x: NodeId,
        weights: NodeId,
        col: usize,
    },
    Concat(Vec<NodeId>),
    Sum(Vec<NodeId>),
    RowDot(NodeId, NodeId),
    NormFeatures(NodeId),
    StopGradient,
    Bce {
        logits: NodeId,
        labels: Vec<f64>,
        scale: f64,
    },
    Linear(Vec<(NodeId, f64)>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Gather { .. } => "gather",
            Op::GatherMean { .. } => "gather_mean",
            Op::Affine { .. } => "affine",
            Op::BiasAdd { .. } => "bias_add",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxRows(_) => "softmax",
            Op::SelectRows { .. } => "select_rows",
            Op::ScaleByColumn { .. } => "scale_by_column",
            Op::Concat(_) => "concat",
            Op::Sum(_) => "sum",
            Op::RowDot(..) => "row_dot",
            Op::NormFeatures(_) => "norm_features",
            Op::StopGradient => "stop_gradient",
            Op::Bce { .. } => "cross_entropy",
            Op::Linear(_) => "linear",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Activation applied elementwise by [`Tape::activation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

/// Per-node gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Matrix> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects any non-finite intermediate value as soon as it
    /// is produced.
    pub fn with_finite_checks() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.as_slice()[0]
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// First node (in creation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (NodeId(i), n.op.name()))
    }

    fn push(&mut self, value: Matrix, op: Op) -> Result<NodeId> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn input(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(value, Op::Input)
    }

    /// Copies a whole parameter onto the tape as a leaf.
    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> Result<NodeId> {
        self.push(store.value(pid).clone(), Op::Param(pid))
    }

    /// Row lookup: output row `r` is `table[rows[r]]`.
    pub fn gather(&mut self, store: &ParamStore, table: ParamId, rows: Vec<usize>) -> Result<NodeId> {
        let t = store.value(table);
        let mut out = Matrix::zeros(rows.len(), t.cols());
        for (r, &idx) in rows.iter().enumerate() {
            if idx >= t.rows() {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: idx,
                    len: t.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(t.row(idx));
        }
        self.push(out, Op::Gather { table, rows })
    }

    /// Mean-pooled lookup: output row `r` is the mean of `table[i]` over
    /// `i in lists[r]`; an empty list yields a zero row.
    pub fn gather_mean(
        &mut self,
        store: &ParamStore,
        table: ParamId,
        lists: Vec<Vec<usize>>,
    ) -> Result<NodeId> {
        let t = store.value(table);
        let mut out = Matrix::zeros(lists.len(), t.cols());
        for (r, list) in lists.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let inv = 1.0 / list.len() as f64;
            let row = out.row_mut(r);
            for &idx in list {
                if idx >= t.rows() {
                    return Err(Error::OutOfRange {
                        what: "embedding table",
                        index: idx,
                        len: t.rows(),
                    });
                }
                axpy(inv, t.row(idx), row);
            }
        }
        self.push(out, Op::GatherMean { table, lists })
    }

    /// `x Wᵀ + b` with `W` of shape `out × in` and `b` of shape `1 × out`.
    pub fn affine(
        &mut self,
        store: &ParamStore,
        x: NodeId,
        weight: ParamId,
        bias: ParamId,
    ) -> Result<NodeId> {
        let w = store.value(weight);
        let b = store.value(bias);
        let (batch, inp) = self.shape(x);
        if inp != w.cols() {
            return Err(Error::ShapeMismatch {
                op: "affine (input vs weight)",
                left: (batch, inp),
                right: w.shape(),
            });
        }
        if b.shape() != (1, w.rows()) {
            return Err(Error::ShapeMismatch {
                op: "affine (bias vs weight)",
                left: b.shape(),
                right: w.shape(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Matrix::zeros(batch, w.rows());
        for r in 0..batch {
            let xr = xv.row(r);
            let orow = out.row_mut(r);
            for (o, slot) in orow.iter_mut().enumerate() {
                *slot = dot(w.row(o), xr) + b.as_slice()[o];
            }
        }
        self.push(out, Op::Affine { x, weight, bias })
    }

    /// Adds a `1 × c` parameter to every row of `x`.
    pub fn bias_add(&mut self, store: &ParamStore, x: NodeId, bias: ParamId) -> Result<NodeId> {
        let b = store.value(bias);
        let (batch, cols) = self.shape(x);
        if b.shape() != (1, cols) {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                left: (batch, cols),
                right: b.shape(),
            });
        }
        let mut out = self.nodes[x.0].value.clone();
        for r in 0..batch {
            axpy(1.0, b.as_slice(), out.row_mut(r));
        }
        self.push(out, Op::BiasAdd { x, bias })
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.nodes[x.0].value.clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v = relu(*v));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.nodes[x.0].value.clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.nodes[x.0].value.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Row `r` of the output is `replacement[r]` where `flags[r]`, else
    /// `base[r]`.
    pub fn select_rows(&mut self, base: NodeId, replacement: NodeId, flags: Vec<bool>) -> Result<NodeId> {
        let (shape_b, shape_r) = (self.shape(base), self.shape(replacement));
        if shape_b != shape_r || flags.len() != shape_b.0 {
            return Err(Error::ShapeMismatch {
                op: "select_rows",
                left: shape_b,
                right: (flags.len(), shape_r.1),
            });
        }
        let mut out = self.nodes[base.0].value.clone();
        let rep = &self.nodes[replacement.0].value;
        for (r, &f) in flags.iter().enumerate() {
            if f {
                out.row_mut(r).copy_from_slice(rep.row(r));
            }
        }
        self.push(
            out,
            Op::SelectRows {
                base,
                replacement,
                flags,
            },
        )
    }

    /// Row `r` of `x` multiplied by the scalar `weights[r, col]`.
    pub fn scale_by_column(&mut self, x: NodeId, weights: NodeId, col: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x), self.shape(weights));
        if sx.0 != sw.0 || col >= sw.1 {
            return Err(Error::ShapeMismatch {
                op: "scale_by_column",
                left: sx,
                right: sw,
            });
        }
        let mut out = self.nodes[x.0].value.clone();
        let w = &self.nodes[weights.0].value;
        for r in 0..sx.0 {
            let s = w.get(r, col);
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, Op::ScaleByColumn { x, weights, col })
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let batch = parts.first().map_or(0, |&p| self.shape(p).0);
        for &p in parts {
            if self.shape(p).0 != batch {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.shape(parts[0]),
                    right: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(batch, cols);
        for r in 0..batch {
            let mut offset = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Elementwise sum of same-shape nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("sum of zero nodes".into()))?;
        let mut out = self.nodes[first.0].value.clone();
        for &p in &parts[1..] {
            let v = &self.nodes[p.0].value;
            out.check_same_shape("sum", v)?;
            axpy(1.0, v.as_slice(), out.as_mut_slice());
        }
        self.push(out, Op::Sum(parts.to_vec()))
    }

    /// Rowwise inner product, `B × k` with `B × k` to `B × 1`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        va.check_same_shape("row_dot", vb)?;
        let mut out = Matrix::zeros(va.rows(), 1);
        for r in 0..va.rows() {
            out.as_mut_slice()[r] = dot(va.row(r), vb.row(r));
        }
        self.push(out, Op::RowDot(a, b))
    }

    /// For each row `v`, emits `[‖v‖, ln(1+‖v‖), √‖v‖, ‖v‖²]`.
    pub fn norm_features(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let mut out = Matrix::zeros(v.rows(), 4);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&norm_transforms(v.row(r)));
        }
        self.push(out, Op::NormFeatures(x))
    }

    /// Identity in the forward pass; blocks gradient flow in the backward pass.
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.nodes[x.0].value.clone();
        self.push(out, Op::StopGradient)
    }

    /// `scale · Σ_r CE(σ(logits_r), labels_r)` as a `1 × 1` node. The
    /// probability is clamped into `[LOG_CLAMP, 1 − LOG_CLAMP]` before the log;
    /// the gradient with respect to each logit is `scale · (σ(z) − y)`.
    pub fn cross_entropy_with_logits(&mut self, logits: NodeId, labels: &[f64], scale: f64) -> Result<NodeId> {
        let z = &self.nodes[logits.0].value;
        if z.cols() != 1 || z.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: z.shape(),
                right: (labels.len(), 1),
            });
        }
        let mut total = 0.0;
        for (&zi, &y) in z.as_slice().iter().zip(labels) {
            total += cross_entropy(sigmoid(zi), y)?;
        }
        self.push(
            Matrix::filled(1, 1, scale * total),
            Op::Bce {
                logits,
                labels: labels.to_vec(),
                scale,
            },
        )
    }

    /// `Σ cᵢ · xᵢ` over same-shape nodes.
    pub fn linear_combination(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let &(first, _) = terms
            .first()
            .ok_or_else(|| Error::Invalid("empty linear combination".into()))?;
        let mut out = Matrix::zeros(self.shape(first).0, self.shape(first).1);
        for &(id, c) in terms {
            out.add_scaled(&self.nodes[id.0].value, c)?;
        }
        self.push(out, Op::Linear(terms.to_vec()))
    }

    /// Backward pass from a scalar (`1 × 1`) output with seed 1.
    pub fn backward(&self, output: NodeId, store: &mut ParamStore) -> Result<Gradients> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward (non-scalar output)",
                left: shape,
                right: (1, 1),
            });
        }
        self.backward_with_seed(output, Matrix::filled(1, 1, 1.0), store)
    }

    /// Backward pass with an explicit upstream gradient for `output`. Nodes
    /// are visited in exact reverse creation order.
    pub fn backward_with_seed(
        &self,
        output: NodeId,
        seed: Matrix,
        store: &mut ParamStore,
    ) -> Result<Gradients> {
        self.value(output).check_same_shape("backward seed", &seed)?;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        // Parameter contributions of this pass are summed locally and added to
        // the accumulators once at the end, so replays add identical amounts.
        let mut local = LocalGrads::new(store);

        for idx in (0..=output.0).rev() {
            let (lower, rest) = grads.split_at_mut(idx);
            let Some(g) = rest[0].as_ref() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::StopGradient => {}
                Op::Param(pid) => {
                    local.dense(*pid).add_scaled(g, 1.0)?;
                }
                Op::Gather { table, rows } => {
                    for (r, &row) in rows.iter().enumerate() {
                        axpy(1.0, g.row(r), local.row(*table, row));
                    }
                }
                Op::GatherMean { table, lists } => {
                    for (r, list) in lists.iter().enumerate() {
                        if list.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / list.len() as f64;
                        for &row in list {
                            axpy(inv, g.row(r), local.row(*table, row));
                        }
                    }
                }
                Op::Affine { x, weight, bias } => {
                    let xv = &self.nodes[x.0].value;
                    let (batch, inp) = xv.shape();
                    let outw = g.cols();
                    let mut dx = Matrix::zeros(batch, inp);
                    {
                        let w = store.value(*weight);
                        for r in 0..batch {
                            let gr = g.row(r);
                            let dxr = dx.row_mut(r);
                            for (o, &go) in gr.iter().enumerate() {
                                if go != 0.0 {
                                    axpy(go, w.row(o), dxr);
                                }
                            }
                        }
                    }
                    {
                        let wg = local.dense(*weight);
                        for r in 0..batch {
                            let xr = xv.row(r);
                            for (o, &go) in g.row(r).iter().enumerate() {
                                if go != 0.0 {
                                    axpy(go, xr, wg.row_mut(o));
                                }
                            }
                        }
                    }
                    {
                        let bg = local.dense(*bias);
                        for r in 0..batch {
                            axpy(1.0, g.row(r), bg.as_mut_slice());
                        }
                    }
                    debug_assert_eq!(outw, store.value(*weight).rows());
                    accumulate(lower, *x, dx)?;
                }
                Op::BiasAdd { x, bias } => {
                    let bg = local.dense(*bias);
                    for r in 0..g.rows() {
                        axpy(1.0, g.row(r), bg.as_mut_slice());
                    }
                    accumulate(lower, *x, g.clone())?;
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = g.clone();
                    for (d, &xi) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        if xi <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(lower, *x, dx)?;
                }
                Op::Sigmoid(x) => {
                    let mut dx = g.clone();
                    for (d, &y) in dx.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(lower, *x, dx)?;
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = dot(yr, gr);
                        for ((d, &yi), &gi) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = yi * (gi - inner);
                        }
                    }
                    accumulate(lower, *x, dx)?;
                }
                Op::SelectRows {
                    base,
                    replacement,
                    flags,
                } => {
                    let mut db = g.clone();
                    let mut dr = g.clone();
                    for (r, &f) in flags.iter().enumerate() {
                        if f {
                            db.row_mut(r).fill(0.0);
                        } else {
                            dr.row_mut(r).fill(0.0);
                        }
                    }
                    accumulate(lower, *base, db)?;
                    accumulate(lower, *replacement, dr)?;
                }
                Op::ScaleByColumn { x, weights, col } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[weights.0].value;
                    let mut dx = g.clone();
                    let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                    for r in 0..xv.rows() {
                        let s = wv.get(r, *col);
                        dx.row_mut(r).iter_mut().for_each(|v| *v *= s);
                        dw.set(r, *col, dot(xv.row(r), g.row(r)));
                    }
                    accumulate(lower, *x, dx)?;
                    accumulate(lower, *weights, dw)?;
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut dp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        accumulate(lower, p, dp)?;
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        accumulate(lower, p, g.clone())?;
                    }
                }
                Op::RowDot(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    let mut db = Matrix::zeros(vb.rows(), vb.cols());
                    for r in 0..va.rows() {
                        let gr = g.as_slice()[r];
                        axpy(gr, vb.row(r), da.row_mut(r));
                        axpy(gr, va.row(r), db.row_mut(r));
                    }
                    accumulate(lower, *a, da)?;
                    accumulate(lower, *b, db)?;
                }
                Op::NormFeatures(x) => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let v = xv.row(r);
                        let s = dot(v, v).sqrt();
                        if s == 0.0 {
                            continue;
                        }
                        let gr = g.row(r);
                        let ds = gr[0] + gr[1] / (1.0 + s) + gr[2] / (2.0 * s.sqrt()) + gr[3] * 2.0 * s;
                        axpy(ds / s, v, dx.row_mut(r));
                    }
                    accumulate(lower, *x, dx)?;
                }
                Op::Bce {
                    logits,
                    labels,
                    scale,
                } => {
                    let z = &self.nodes[logits.0].value;
                    let up = g.as_slice()[0];
                    let mut dz = Matrix::zeros(z.rows(), 1);
                    for (r, (&zi, &y)) in z.as_slice().iter().zip(labels).enumerate() {
                        dz.as_mut_slice()[r] = up * scale * (sigmoid(zi) - y);
                    }
                    accumulate(lower, *logits, dz)?;
                }
                Op::Linear(terms) => {
                    for &(id, c) in terms {
                        let mut d = g.clone();
                        d.as_mut_slice().iter_mut().for_each(|v| *v *= c);
                        accumulate(lower, id, d)?;
                    }
                }
            }
        }
        local.flush(store)?;
        Ok(Gradients { grads })
    }
}

enum LocalGrad {
    Dense(Matrix),
    Rows(BTreeMap<usize, Vec<f64>>),
}

/// Per-parameter gradient buffers for one backward pass. Embedding tables
/// touched only through row lookups stay row-sparse.
struct LocalGrads {
    shapes: Vec<(usize, usize)>,
    slots: Vec<Option<LocalGrad>>,
}

impl LocalGrads {
    fn new(store: &ParamStore) -> Self {
        let shapes: Vec<_> = store.ids().map(|p| store.value(p).shape()).collect();
        let slots = (0..shapes.len()).map(|_| None).collect();
        Self { shapes, slots }
    }

    fn dense(&mut self, pid: ParamId) -> &mut Matrix {
        let (rows, cols) = self.shapes[pid.0];
        let slot = &mut self.slots[pid.0];
        if let Some(LocalGrad::Rows(map)) = slot {
            let mut m = Matrix::zeros(rows, cols);
            for (&r, v) in map.iter() {
                m.row_mut(r).copy_from_slice(v);
            }
            *slot = Some(LocalGrad::Dense(m));
        }
        match slot.get_or_insert_with(|| LocalGrad::Dense(Matrix::zeros(rows, cols))) {
            LocalGrad::Dense(m) => m,
            LocalGrad::Rows(_) => unreachable!(),
        }
    }

    fn row(&mut self, pid: ParamId, row: usize) -> &mut [f64] {
        let cols = self.shapes[pid.0].1;
        match self.slots[pid.0].get_or_insert_with(|| LocalGrad::Rows(BTreeMap::new())) {
            LocalGrad::Dense(m) => m.row_mut(row),
            LocalGrad::Rows(map) => map.entry(row).or_insert_with(|| vec![0.0; cols]),
        }
    }

    fn flush(self, store: &mut ParamStore) -> Result<()> {
        for (i, slot) in self.slots.into_iter().enumerate() {
            let pid = ParamId(i);
            match slot {
                None => {}
                Some(LocalGrad::Dense(m)) => store.grad_mut(pid).add_scaled(&m, 1.0)?,
                Some(LocalGrad::Rows(map)) => {
                    let acc = store.grad_mut(pid);
                    for (r, v) in map {
                        axpy(1.0, &v, acc.row_mut(r));
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_scaled(&g, 1.0),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// `[‖v‖, ln(1+‖v‖), √‖v‖, ‖v‖²]`.
pub fn norm_transforms(v: &[f64]) -> [f64; 4] {
    let s = dot(v, v).sqrt();
    [s, s.ln_1p(), s.sqrt(), s * s]
}

/// Binary cross-entropy of a probability against a `{0, 1}` label, with the
/// probability clamped into `[LOG_CLAMP, 1 − LOG_CLAMP]`.
pub fn cross_entropy(y_hat: f64, y: f64) -> Result<f64> {
    if y != 0.0 && y != 1.0 {
        return Err(Error::InvalidLabel(y));
    }
    let p = y_hat.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
    Ok(-y * p.ln() - (1.0 - y) * (1.0 - p).ln())
}
