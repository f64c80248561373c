//! Reverse-mode differentiation over an append-only operation record.
//!
//! A [`Graph`] owns every intermediate value produced during one forward
//! pass. Nodes are appended in evaluation order, so walking the node list
//! backwards is a valid reverse topological order. Parameters enter the
//! graph as snapshots of a [`ParamSet`] entry; [`Graph::backward`] adds
//! their gradients into the set's gradient slots, accumulating across calls
//! until [`ParamSet::zero_grad`] is called.
//!
//! A graph and its values are owned by one thread at a time. Independent
//! batch shards each build their own graph.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{self, Real, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Operation kinds, used to name a stage in errors and to target the
/// backward-rule fault hook used by gradient-check negative controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    AddBiasRow,
    Scale,
    Sigmoid,
    Tanh,
    SoftmaxRows,
    ConcatRows,
    ConcatCols,
    GatherRows,
    SliceCols,
    Reshape,
    SelectRows,
    Sum,
    CrossEntropy,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul { a: usize, b: usize, transpose_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBiasRow(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    SoftmaxRows(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    SliceCols { a: usize, start: usize },
    Reshape(usize),
    SelectRows { on: usize, off: usize, mask: Vec<bool> },
    Sum(usize),
    CrossEntropy { logits: usize, labels: Vec<usize> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBiasRow(..) => OpKind::AddBiasRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Reshape(_) => OpKind::Reshape,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
    // softmax probabilities kept by CrossEntropy for its backward rule
    saved: Option<Vec<T>>,
}

/// Per-node gradients produced by [`Graph::gradients`].
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// depend on any differentiable leaf.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }
}

pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    fault: Option<(OpKind, f64)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scale every gradient flowing out of `kind` nodes by `factor` during
    /// backward. Only meant for negative-control tests of gradient checks.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {v:?} does not belong to graph {}",
                self.id
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
            saved: None,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("variable from this graph")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Values of every node produced by an operation of `kind`, in
    /// recording order.
    pub fn values_of(&self, kind: OpKind) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes
            .iter()
            .filter(move |n| n.op.kind() == kind)
            .map(|n| &n.value)
    }

    /// Record a constant. Constants never receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record a differentiable leaf that is not tied to a parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Snapshot a parameter into the graph.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        let v = self.push(params.get(id).value.clone(), Op::Leaf, true);
        self.nodes[v.index].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = tensor::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), ng))
    }

    /// Batched product of rank-3 tensors: `a[g,p,q] · b[g,q,r]`, or
    /// `a[g,p,q] · b[g,r,q]^T` when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ga, p, q) = self.nodes[ia].value.dims3("batch_matmul")?;
        let (gb, b1, b2) = self.nodes[ib].value.dims3("batch_matmul")?;
        let (bq, r) = if transpose_b { (b2, b1) } else { (b1, b2) };
        if ga != gb || q != bq {
            return Err(Error::dim(
                "batch_matmul",
                format!(
                    "{:?} x {:?} (transpose_b = {transpose_b})",
                    self.nodes[ia].value.shape(),
                    self.nodes[ib].value.shape()
                ),
            ));
        }
        let mut out = vec![T::zero(); ga * p * r];
        {
            let ad = self.nodes[ia].value.data();
            let bd = self.nodes[ib].value.data();
            for g in 0..ga {
                let asl = &ad[g * p * q..(g + 1) * p * q];
                let bsl = &bd[g * q * r..(g + 1) * q * r];
                let osl = &mut out[g * p * r..(g + 1) * p * r];
                if transpose_b {
                    tensor::matmul_bt_into(asl, bsl, osl, p, q, r);
                } else {
                    tensor::matmul_into(asl, bsl, osl, p, q, r);
                }
            }
        }
        let out = Tensor::new(vec![ga, p, r], out)?.checked("batch_matmul")?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::BatchMatMul { a: ia, b: ib, transpose_b }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, kind: tensor::Pointwise) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = tensor::elementwise(kind, &self.nodes[ia].value, Some(&self.nodes[ib].value))?;
        let op = match kind {
            tensor::Pointwise::Add => Op::Add(ia, ib),
            tensor::Pointwise::Sub => Op::Sub(ia, ib),
            tensor::Pointwise::Mul => Op::Mul(ia, ib),
            _ => unreachable!("unary op routed to binary"),
        };
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, tensor::Pointwise::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, tensor::Pointwise::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, tensor::Pointwise::Mul)
    }

    /// Add a `[q]` bias to every row of a `[p,q]` value.
    pub fn add_bias_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let out = tensor::add_bias_row(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::AddBiasRow(ia, ib), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let c = T::lit(factor);
        let src = &self.nodes[ia].value;
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| v * c).collect())?
            .checked("scale")?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Scale(ia, factor), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = tensor::elementwise(tensor::Pointwise::Sigmoid, &self.nodes[ia].value, None)?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Sigmoid(ia), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = tensor::elementwise(tensor::Pointwise::Tanh, &self.nodes[ia].value, None)?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Tanh(ia), ng))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = tensor::softmax_rows(&self.nodes[ia].value)?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::SoftmaxRows(ia), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let out = tensor::concat_rows(&refs)?;
        let ng = ids.iter().any(|&i| self.ng(i));
        Ok(self.push(out, Op::ConcatRows(ids), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let out = tensor::concat_cols(&refs)?;
        let ng = ids.iter().any(|&i| self.ng(i));
        Ok(self.push(out, Op::ConcatCols(ids), ng))
    }

    /// Select rows of a rank-2 value by index. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        let (n, c) = src.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::dim(
                    "gather_rows",
                    format!("row {r} out of range for shape {:?}", src.shape()),
                ));
            }
            data.extend_from_slice(src.row(r));
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::GatherRows(ia, rows.to_vec()), ng))
    }

    /// Columns `start..start+len` of a rank-2 value.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        let (n, c) = src.dims2("slice_cols")?;
        if start + len > c {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} out of range for shape {:?}", start + len, src.shape()),
            ));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![n, len], data)?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::SliceCols { a: ia, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.reshape(shape.to_vec())?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Reshape(ia), ng))
    }

    /// Row-wise choice between two values of identical rank-2 shape: row `i`
    /// comes from `on` when `mask[i]` is set, otherwise from `off`.
    pub fn select_rows(&mut self, on: Var, off: Var, mask: &[bool]) -> Result<Var> {
        let (ion, ioff) = (self.idx(on)?, self.idx(off)?);
        let a = &self.nodes[ion].value;
        let b = &self.nodes[ioff].value;
        let (n, c) = a.dims2("select_rows")?;
        if a.shape() != b.shape() || mask.len() != n {
            return Err(Error::dim(
                "select_rows",
                format!("{:?} vs {:?} with {} mask rows", a.shape(), b.shape(), mask.len()),
            ));
        }
        let mut data = Vec::with_capacity(n * c);
        for (i, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { a.row(i) } else { b.row(i) });
        }
        let out = Tensor::new(vec![n, c], data)?;
        let ng = self.ng(ion) || self.ng(ioff);
        Ok(self.push(
            out,
            Op::SelectRows {
                on: ion,
                off: ioff,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.sum()).checked("sum")?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Sum(ia), ng))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// computed from the logits with the log-sum-exp shift so that no
    /// probability underflow can produce an infinite loss.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let src = &self.nodes[il].value;
        let (b, k) = src.dims2("cross_entropy")?;
        if labels.len() != b || b == 0 {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for logits {:?}", labels.len(), src.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::dim(
                "cross_entropy",
                format!("label {bad} outside [0, {k})"),
            ));
        }
        let (loss, probs) = cross_entropy_forward(src.data(), labels, k);
        let out = Tensor::scalar(loss).checked("cross_entropy")?;
        let ng = self.ng(il);
        let v = self.push(
            out,
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
            },
            ng,
        );
        self.nodes[v.index].saved = Some(probs);
        Ok(v)
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; il + 1];
        grads[il] = Some(vec![T::one()]);
        for i in (0..=il).rev() {
            let Some(mut gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some((kind, factor)) = self.fault {
                if kind == node.op.kind() {
                    let f = T::lit(factor);
                    gout.iter_mut().for_each(|g| *g = *g * f);
                }
            }
            self.backward_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    /// Accumulate `∂loss/∂p` into the gradient slot of every parameter
    /// snapshotted into this graph.
    pub fn backward(&self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(Some(g))) = (node.param, grads.grads.get(i)) {
                params.accumulate(pid, g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = dims2(&self.nodes[*a].value);
                let r = self.nodes[*b].value.shape()[1];
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); p * q];
                    tensor::matmul_bt_into(gout, val(*b), &mut ga, p, r, q);
                    accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); q * r];
                    tensor::matmul_at_into(val(*a), gout, &mut gb, p, q, r);
                    accumulate(grads, *b, gb);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let s = self.nodes[*a].value.shape();
                let (g, p, q) = (s[0], s[1], s[2]);
                let r = node.value.shape()[2];
                let (ad, bd) = (val(*a), val(*b));
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); g * p * q];
                    for k in 0..g {
                        let go = &gout[k * p * r..(k + 1) * p * r];
                        let bs = &bd[k * q * r..(k + 1) * q * r];
                        let gs = &mut ga[k * p * q..(k + 1) * p * q];
                        if *transpose_b {
                            tensor::matmul_into(go, bs, gs, p, r, q);
                        } else {
                            tensor::matmul_bt_into(go, bs, gs, p, r, q);
                        }
                    }
                    accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); g * q * r];
                    for k in 0..g {
                        let go = &gout[k * p * r..(k + 1) * p * r];
                        let asl = &ad[k * p * q..(k + 1) * p * q];
                        let gs = &mut gb[k * q * r..(k + 1) * q * r];
                        if *transpose_b {
                            tensor::matmul_at_into(go, asl, gs, p, r, q);
                        } else {
                            tensor::matmul_at_into(asl, go, gs, p, q, r);
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, gout.to_vec());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, gout.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, gout.to_vec());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, gout.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let ga = gout.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                    accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = gout.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, *b, gb);
                }
            }
            Op::AddBiasRow(a, bias) => {
                if self.ng(*a) {
                    accumulate(grads, *a, gout.to_vec());
                }
                if self.ng(*bias) {
                    let q = self.nodes[*bias].value.len();
                    let mut gb = vec![T::zero(); q];
                    for row in gout.chunks(q.max(1)) {
                        for (s, &g) in gb.iter_mut().zip(row) {
                            *s = *s + g;
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Scale(a, factor) => {
                let c = T::lit(*factor);
                accumulate(grads, *a, gout.iter().map(|&g| g * c).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let ga = gout
                    .iter()
                    .zip(y)
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let ga = gout
                    .iter()
                    .zip(y)
                    .map(|(&g, &t)| g * (T::one() - t * t))
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let c = node.value.last_dim().max(1);
                let mut ga = vec![T::zero(); y.len()];
                for ((gr, yr), out) in gout.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &s)| g * s).sum();
                    for ((o, &g), &s) in out.iter_mut().zip(gr).zip(yr) {
                        *o = s * (g - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    if self.ng(p) {
                        accumulate(grads, p, gout[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut start = 0;
                for &p in parts {
                    let w = self.nodes[p].value.shape()[1];
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&gout[r * total + start..r * total + start + w]);
                        }
                        accumulate(grads, p, gp);
                    }
                    start += w;
                }
            }
            Op::GatherRows(a, rows) => {
                let src = &self.nodes[*a].value;
                let c = src.last_dim();
                let mut ga = vec![T::zero(); src.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        ga[r * c + j] = ga[r * c + j] + gout[k * c + j];
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceCols { a, start } => {
                let src = &self.nodes[*a].value;
                let (n, c) = dims2(src);
                let len = node.value.shape()[1];
                let mut ga = vec![T::zero(); n * c];
                for r in 0..n {
                    ga[r * c + start..r * c + start + len]
                        .copy_from_slice(&gout[r * len..(r + 1) * len]);
                }
                accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => accumulate(grads, *a, gout.to_vec()),
            Op::SelectRows { on, off, mask } => {
                let c = node.value.last_dim();
                for (target, want) in [(*on, true), (*off, false)] {
                    if !self.ng(target) {
                        continue;
                    }
                    let mut g = vec![T::zero(); gout.len()];
                    for (r, &m) in mask.iter().enumerate() {
                        if m == want {
                            g[r * c..(r + 1) * c].copy_from_slice(&gout[r * c..(r + 1) * c]);
                        }
                    }
                    accumulate(grads, target, g);
                }
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.len();
                accumulate(grads, *a, vec![gout[0]; n]);
            }
            Op::CrossEntropy { logits, labels } => {
                let probs = node.saved.as_ref().expect("cross entropy saves probabilities");
                let k = self.nodes[*logits].value.shape()[1];
                let scale = gout[0] / T::lit(labels.len() as f64);
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (n, &y) in labels.iter().enumerate() {
                    g[n * k + y] = g[n * k + y] - scale;
                }
                accumulate(grads, *logits, g);
            }
        }
    }
}

fn dims2<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    let s = t.shape();
    (s[0], s[1])
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], target: usize, contribution: Vec<T>) {
    match &mut grads[target] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Mean cross-entropy of integer labels under row-wise softmax of `logits`
/// (`[B, K]` row-major). Returns the loss and the softmax probabilities.
pub fn cross_entropy_forward<T: Real>(logits: &[T], labels: &[usize], k: usize) -> (T, Vec<T>) {
    let mut probs = logits.to_vec();
    let mut total = T::zero();
    for (row, &y) in probs.chunks_mut(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        total = total + (lse - row[y]);
        tensor::softmax_in_place(row);
    }
    (total / T::lit(labels.len() as f64), probs)
}
