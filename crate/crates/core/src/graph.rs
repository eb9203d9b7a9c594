//! Reverse-mode differentiation over a per-forward computation graph.
//!
//! A [`Graph`] borrows a [`ParamStore`] for its lifetime; parameter leaves
//! read the stored tensors without copying. Nodes are appended in creation
//! order, which is a topological order, so backward is a single reverse
//! sweep.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    /// Columns are rows of an embedding table; row 0 (PAD) gets no gradient.
    Embed {
        table: ParamId,
        ids: Vec<usize>,
    },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    AddBias(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    ShiftCols(NodeId, isize),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    MaskedSoftmaxRows(NodeId, Vec<bool>),
    SumCols(NodeId),
    SumRows(NodeId),
    Sum(NodeId),
    MaxCols(NodeId, Vec<usize>),
    MaxOf(Vec<NodeId>, Vec<usize>),
    AdditiveScores {
        a: NodeId,
        b: NodeId,
        v: NodeId,
        act: Vec<f64>,
    },
    NegLogPick {
        probs: NodeId,
        label: usize,
        floor: f64,
    },
}

struct Node<'p> {
    op: Op,
    value: Cow<'p, Tensor>,
    needs_grad: bool,
}

/// Accumulated parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros shaped like the parameter when nothing
    /// reached it.
    pub fn dense(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_nodes: Vec<Option<NodeId>>,
    node_grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            node_grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward's loss with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.node_grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, value: Cow<'p, Tensor>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let needs = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push(op, Cow::Owned(value), needs)
    }

    fn v(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Constant input (no gradient flows out of the graph through it).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, Cow::Owned(t), false)
    }

    /// Leaf for a stored parameter. One node per parameter per graph.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let value = Cow::Borrowed(self.store.get(id));
        let n = self.push(Op::Param(id), value, true);
        self.param_nodes[id.0] = Some(n);
        n
    }

    /// Looks up rows `ids` of the `V x d` table and returns them as the
    /// columns of a `d x ids.len()` feature map.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> Result<NodeId> {
        let t = self.store.get(table);
        let (v, d) = shape2(t);
        if ids.is_empty() {
            return Err(Error::EmptyInput("embed: no token ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!(
                "token id {bad} out of range for vocabulary of size {v}"
            )));
        }
        let n = ids.len();
        let mut out = Tensor::zeros(&[d, n]);
        for (c, &id) in ids.iter().enumerate() {
            for (r, &x) in t.row(id).iter().enumerate() {
                out.set(r, c, x);
            }
        }
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            Cow::Owned(out),
            true,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.v(a).matmul(self.v(b))?;
        Ok(self.push_owned(Op::MatMul(a, b), out, &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.v(a).transpose();
        self.push_owned(Op::Transpose(a), out, &[a])
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        let (sa, sb) = (shape2(self.v(a)), shape2(self.v(b)));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (r, c) = shape2(self.v(a));
        let data = self
            .v(a)
            .data()
            .iter()
            .zip(self.v(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::matrix(r, c, data).expect("shape checked")
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let (r, c) = shape2(self.v(a));
        let data = self.v(a).data().iter().map(|&x| f(x)).collect();
        Tensor::matrix(r, c, data).expect("shape preserved")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push_owned(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push_owned(Op::Sub(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push_owned(Op::Mul(a, b), out, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.map(a, |x| x * s);
        self.push_owned(Op::Scale(a, s), out, &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.map(a, |x| x + s);
        self.push_owned(Op::AddScalar(a), out, &[a])
    }

    /// `x + bias` with a length-`r` bias broadcast across the columns of an
    /// `r x c` map.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = shape2(self.v(x));
        let b = self.v(bias);
        if b.len() != r {
            return Err(Error::dim(
                "add_bias",
                format!("bias of length {} for {r} rows", b.len()),
            ));
        }
        let xv = self.v(x);
        let out = Tensor::from_fn(r, c, |i, j| xv.get(i, j) + b.data()[i]);
        Ok(self.push_owned(Op::AddBias(x, bias), out, &[x, bias]))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.map(a, f64::tanh);
        self.push_owned(Op::Tanh(a), out, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.map(a, sigmoid);
        self.push_owned(Op::Sigmoid(a), out, &[a])
    }

    /// Output column `i` is input column `i + offset`, zero where that falls
    /// outside the map.
    pub fn shift_cols(&mut self, a: NodeId, offset: isize) -> NodeId {
        let x = self.v(a);
        let (r, c) = shape2(x);
        let out = Tensor::from_fn(r, c, |i, j| {
            let src = j as isize + offset;
            if src < 0 || src >= c as isize {
                0.0
            } else {
                x.get(i, src as usize)
            }
        });
        self.push_owned(Op::ShiftCols(a, offset), out, &[a])
    }

    /// Stacks maps with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyInput("concat_rows: no parts".into()))?;
        let c = self.v(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.v(p);
            if t.cols() != c {
                return Err(Error::dim("concat_rows", format!("column counts {c} and {}", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        Ok(self.push_owned(Op::ConcatRows(parts.to_vec()), out, parts))
    }

    /// Rows `start..start+len` of `a`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.v(a);
        let (r, c) = shape2(x);
        if len == 0 || start + len > r {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let out = Tensor::matrix(len, c, x.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push_owned(Op::SliceRows(a, start), out, &[a]))
    }

    /// Row-wise softmax over the `true` entries of `mask` (row-major, same
    /// shape as `scores`). Masked entries are exactly zero.
    pub fn masked_softmax_rows(&mut self, scores: NodeId, mask: &[bool]) -> Result<NodeId> {
        let x = self.v(scores);
        let (r, c) = shape2(x);
        if mask.len() != r * c {
            return Err(Error::dim(
                "masked_softmax",
                format!("mask of length {} for {r}x{c} scores", mask.len()),
            ));
        }
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = x.row(i);
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyContext(format!(
                    "softmax row {i} has every position masked"
                )));
            }
            let exps: Vec<f64> = row
                .iter()
                .zip(m)
                .map(|(&v, &keep)| if keep { (v - max).exp() } else { 0.0 })
                .collect();
            let total: f64 = exps.iter().sum();
            for (j, e) in exps.into_iter().enumerate() {
                out.set(i, j, e / total);
            }
        }
        Ok(self.push_owned(Op::MaskedSoftmaxRows(scores, mask.to_vec()), out, &[scores]))
    }

    /// Softmax over every entry of each row.
    pub fn softmax_rows(&mut self, scores: NodeId) -> Result<NodeId> {
        let n = self.v(scores).len();
        self.masked_softmax_rows(scores, &vec![true; n])
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let x = self.v(a);
        let (r, _) = shape2(x);
        let out = Tensor::from_fn(r, 1, |i, _| x.row(i).iter().sum());
        self.push_owned(Op::SumCols(a), out, &[a])
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.v(a);
        let (r, c) = shape2(x);
        let out = Tensor::from_fn(1, c, |_, j| (0..r).map(|i| x.get(i, j)).sum());
        self.push_owned(Op::SumRows(a), out, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.v(a).data().iter().sum());
        self.push_owned(Op::Sum(a), out, &[a])
    }

    /// Per-row maximum over columns (positions). Ties go to the lowest
    /// column; gradient flows only to the winning column.
    pub fn max_over_positions(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.v(a);
        let (r, c) = shape2(x);
        if c == 0 {
            return Err(Error::EmptyInput("max over zero positions".into()));
        }
        let mut arg = Vec::with_capacity(r);
        let mut vals = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            vals.push(row[best]);
        }
        let out = Tensor::matrix(r, 1, vals)?;
        Ok(self.push_owned(Op::MaxCols(a, arg), out, &[a]))
    }

    /// Argmax columns recorded by a [`Graph::max_over_positions`] node.
    pub fn argmax_of(&self, id: NodeId) -> Option<&[usize]> {
        match &self.nodes[id.0].op {
            Op::MaxCols(_, arg) => Some(arg),
            _ => None,
        }
    }

    /// Elementwise maximum across same-shaped nodes; ties go to the earliest
    /// node.
    pub fn max_of(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::EmptyInput("max_of: no parts".into()))?;
        for &p in &parts[1..] {
            self.same_shape("max_of", first, p)?;
        }
        let (r, c) = shape2(self.v(first));
        let mut winner = vec![0usize; r * c];
        let mut vals = self.v(first).data().to_vec();
        for (k, &p) in parts.iter().enumerate().skip(1) {
            for (e, &v) in self.v(p).data().iter().enumerate() {
                if v > vals[e] {
                    vals[e] = v;
                    winner[e] = k;
                }
            }
        }
        let out = Tensor::matrix(r, c, vals)?;
        Ok(self.push_owned(Op::MaxOf(parts.to_vec(), winner), out, parts))
    }

    /// `E[i,j] = sum_k v[k] * tanh(A[k,i] + B[k,j])` for `A: d x m`,
    /// `B: d x n`, `v: d`.
    pub fn additive_scores(&mut self, a: NodeId, b: NodeId, v: NodeId) -> Result<NodeId> {
        let (av, bv, vv) = (self.v(a), self.v(b), self.v(v));
        let (d, m) = shape2(av);
        let (d2, n) = shape2(bv);
        if d != d2 || vv.len() != d {
            return Err(Error::dim(
                "additive_scores",
                format!("A {d}x{m}, B {d2}x{n}, v {}", vv.len()),
            ));
        }
        let mut act = vec![0.0; d * m * n];
        let mut out = Tensor::zeros(&[m, n]);
        for k in 0..d {
            let vk = vv.data()[k];
            for i in 0..m {
                let aki = av.get(k, i);
                for j in 0..n {
                    let t = (aki + bv.get(k, j)).tanh();
                    act[(k * m + i) * n + j] = t;
                    out.set(i, j, out.get(i, j) + vk * t);
                }
            }
        }
        Ok(self.push_owned(Op::AdditiveScores { a, b, v, act }, out, &[a, b, v]))
    }

    /// `-ln(max(p[label], floor))` for a probability vector.
    pub fn neg_log_pick(&mut self, probs: NodeId, label: usize, floor: f64) -> Result<NodeId> {
        let p = self.v(probs);
        if label >= p.len() {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                p.len()
            )));
        }
        let out = Tensor::scalar(-p.data()[label].max(floor).ln());
        Ok(self.push_owned(Op::NegLogPick { probs, label, floor }, out, &[probs]))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::EmptyInput("mean of nothing".into()))?;
        let mut acc = first;
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(self.scale(acc, 1.0 / parts.len() as f64))
    }

    /// Runs the reverse sweep from a scalar `loss`. A second call without
    /// [`Graph::reset_gradients`] is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; reset gradients first".into(),
            ));
        }
        if self.v(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.v(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.v(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].clone() else {
                continue;
            };
            self.backprop_node(idx, &dy, &mut grads, &mut params)?;
        }
        self.node_grads = grads;
        Ok(Gradients { grads: params })
    }

    pub fn reset_gradients(&mut self) {
        self.node_grads.clear();
        self.backward_done = false;
    }

    fn backprop_node(
        &self,
        idx: usize,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let acc = |grads: &mut [Option<Tensor>], id: NodeId, g: Tensor| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            let shape = self.nodes[id.0].value.shape().to_vec();
            let g = if g.shape() == shape.as_slice() {
                g
            } else {
                g.reshaped(&shape).expect("gradient size matches value")
            };
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let dy_m = dy.as_matrix();
        match &node.op {
            Op::Input => {}
            Op::Param(pid) => match &mut params[pid.0] {
                Some(existing) => existing.add_assign(dy),
                slot => *slot = Some(dy.clone()),
            },
            Op::Embed { table, ids } => {
                let slot = params[table.0].get_or_insert_with(|| Tensor::zeros(self.store.get(*table).shape()));
                for (c, &id) in ids.iter().enumerate() {
                    if id == 0 {
                        continue;
                    }
                    for r in 0..dy_m.rows() {
                        let cur = slot.get(id, r);
                        slot.set(id, r, cur + dy_m.get(r, c));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let av = self.v(*a).as_matrix();
                let bv = self.v(*b).as_matrix();
                if self.nodes[a.0].needs_grad {
                    acc(grads, *a, dy_m.matmul(&bv.transpose())?);
                }
                if self.nodes[b.0].needs_grad {
                    acc(grads, *b, av.transpose().matmul(&dy_m)?);
                }
            }
            Op::Transpose(a) => acc(grads, *a, dy_m.transpose()),
            Op::Add(a, b) => {
                acc(grads, *a, dy_m.clone());
                acc(grads, *b, dy_m);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, dy_m.clone());
                let mut neg = dy_m;
                neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                acc(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let mut ga = dy_m.clone();
                for (g, &x) in ga.data_mut().iter_mut().zip(bv.data()) {
                    *g *= x;
                }
                let mut gb = dy_m;
                for (g, &x) in gb.data_mut().iter_mut().zip(av.data()) {
                    *g *= x;
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, s) => {
                let mut g = dy_m;
                g.data_mut().iter_mut().for_each(|v| *v *= s);
                acc(grads, *a, g);
            }
            Op::AddScalar(a) => acc(grads, *a, dy_m),
            Op::AddBias(x, bias) => {
                let (r, c) = shape2(&dy_m);
                let gb: Vec<f64> = (0..r).map(|i| (0..c).map(|j| dy_m.get(i, j)).sum()).collect();
                acc(grads, *bias, Tensor::matrix(r, 1, gb)?);
                acc(grads, *x, dy_m);
            }
            Op::Tanh(a) => {
                let mut g = dy_m;
                for (g, &t) in g.data_mut().iter_mut().zip(y.data()) {
                    *g *= 1.0 - t * t;
                }
                acc(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let mut g = dy_m;
                for (g, &s) in g.data_mut().iter_mut().zip(y.data()) {
                    *g *= s * (1.0 - s);
                }
                acc(grads, *a, g);
            }
            Op::ShiftCols(a, offset) => {
                let (r, c) = shape2(&dy_m);
                let mut g = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        let src = j as isize + offset;
                        if src >= 0 && src < c as isize {
                            let s = src as usize;
                            g.set(i, s, g.get(i, s) + dy_m.get(i, j));
                        }
                    }
                }
                acc(grads, *a, g);
            }
            Op::ConcatRows(parts) => {
                let c = dy_m.cols();
                let mut start = 0;
                for &p in parts {
                    let r = self.v(p).rows();
                    let g = Tensor::matrix(r, c, dy_m.data()[start * c..(start + r) * c].to_vec())?;
                    acc(grads, p, g);
                    start += r;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = shape2(self.v(*a));
                let mut g = Tensor::zeros(&[r, c]);
                let n = dy_m.len();
                g.data_mut()[start * c..start * c + n].copy_from_slice(dy_m.data());
                acc(grads, *a, g);
            }
            Op::MaskedSoftmaxRows(a, mask) => {
                let (r, c) = shape2(&dy_m);
                let ym = y.as_matrix();
                let mut g = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| ym.get(i, j) * dy_m.get(i, j)).sum();
                    for j in 0..c {
                        if mask[i * c + j] {
                            g.set(i, j, ym.get(i, j) * (dy_m.get(i, j) - dot));
                        }
                    }
                }
                acc(grads, *a, g);
            }
            Op::SumCols(a) => {
                let (r, c) = shape2(self.v(*a));
                acc(grads, *a, Tensor::from_fn(r, c, |i, _| dy_m.get(i, 0)));
            }
            Op::SumRows(a) => {
                let (r, c) = shape2(self.v(*a));
                acc(grads, *a, Tensor::from_fn(r, c, |_, j| dy_m.get(0, j)));
            }
            Op::Sum(a) => {
                let (r, c) = shape2(self.v(*a));
                acc(grads, *a, Tensor::filled(&[r, c], dy_m.data()[0]));
            }
            Op::MaxCols(a, arg) => {
                let (r, c) = shape2(self.v(*a));
                let mut g = Tensor::zeros(&[r, c]);
                for (i, &j) in arg.iter().enumerate() {
                    g.set(i, j, dy_m.get(i, 0));
                }
                acc(grads, *a, g);
            }
            Op::MaxOf(parts, winner) => {
                let (r, c) = shape2(&dy_m);
                for (k, &p) in parts.iter().enumerate() {
                    let mut g = Tensor::zeros(&[r, c]);
                    for (e, &w) in winner.iter().enumerate() {
                        if w == k {
                            g.data_mut()[e] = dy_m.data()[e];
                        }
                    }
                    acc(grads, p, g);
                }
            }
            Op::AdditiveScores { a, b, v, act } => {
                let (d, m) = shape2(self.v(*a));
                let n = self.v(*b).cols();
                let vv = self.v(*v).data();
                let mut ga = Tensor::zeros(&[d, m]);
                let mut gb = Tensor::zeros(&[d, n]);
                let mut gv = vec![0.0; d];
                for k in 0..d {
                    for i in 0..m {
                        for j in 0..n {
                            let t = act[(k * m + i) * n + j];
                            let de = dy_m.get(i, j);
                            gv[k] += de * t;
                            let dpre = de * vv[k] * (1.0 - t * t);
                            ga.set(k, i, ga.get(k, i) + dpre);
                            gb.set(k, j, gb.get(k, j) + dpre);
                        }
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
                acc(grads, *v, Tensor::matrix(d, 1, gv)?);
            }
            Op::NegLogPick { probs, label, floor } => {
                let p = self.v(*probs);
                let pl = p.data()[*label];
                let (r, c) = shape2(p);
                let mut g = Tensor::zeros(&[r, c]);
                if pl >= *floor {
                    g.data_mut()[*label] = -dy_m.data()[0] / pl;
                }
                acc(grads, *probs, g);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let i2 = g.input(Tensor::identity(2));
        let a = g.input(m(2, 2, &[1., 2., 3., 4.]));
        let out = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(out).data(), &[1., 2., 3., 4.]);

        let p = g.input(m(2, 2, &[1., 0., 0., 0.]));
        let v = g.input(m(2, 1, &[5., 7.]));
        let out = g.matmul(p, v).unwrap();
        assert_eq!(g.value(out).data(), &[5., 0.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn pointwise_fixed_points() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.input(Tensor::scalar(0.0));
        let t = g.tanh(z);
        let s = g.sigmoid(z);
        assert_eq!(g.value(t).data()[0], 0.0);
        assert_eq!(g.value(s).data()[0], 0.5);
    }

    #[test]
    fn masked_softmax_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(m(1, 2, &[0., 0.]));
        let s = g.masked_softmax_rows(a, &[true, true]).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let b = g.input(m(1, 2, &[1., 0.]));
        let s = g.masked_softmax_rows(b, &[true, true]).unwrap();
        let e = std::f64::consts::E;
        let want = e / (e + 1.0);
        assert!((g.value(s).data()[0] - want).abs() < 1e-15);
        assert!((g.value(s).data()[0] - 0.731059).abs() < 1e-6);
        assert!((g.value(s).data()[1] - 0.268941).abs() < 1e-6);

        let c = g.input(m(1, 2, &[5., 9.]));
        let s = g.masked_softmax_rows(c, &[true, false]).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_empty_context() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(m(2, 2, &[1., 2., 3., 4.]));
        let r = g.masked_softmax_rows(a, &[true, false, false, false]);
        assert!(matches!(r, Err(Error::EmptyContext(_))));
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(m(1, 3, &[1000., 999., -1000.]));
        let s = g.softmax_rows(a).unwrap();
        assert!(g.value(s).all_finite());
        let total: f64 = g.value(s).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_over_positions_values_and_ties() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(m(2, 3, &[1., 3., 2., 0., -1., -2.]));
        let mx = g.max_over_positions(a).unwrap();
        assert_eq!(g.value(mx).data(), &[3., 0.]);
        assert_eq!(g.argmax_of(mx).unwrap(), &[1, 0]);

        let b = g.input(m(1, 3, &[7., 7., 7.]));
        let mx = g.max_over_positions(b).unwrap();
        assert_eq!(g.value(mx).data(), &[7.]);
        assert_eq!(g.argmax_of(mx).unwrap(), &[0]);
    }

    #[test]
    fn sum_of_linear_map_gives_outer_product_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", m(2, 3, &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6])).unwrap();
        let mut g = Graph::new(&store);
        let wn = g.param(w);
        let x = g.input(m(3, 1, &[1., 2., 3.]));
        let y = g.matmul(wn, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1., 2., 3., 1., 2., 3.]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::identity(2)).unwrap();
        let mut g = Graph::new(&store);
        let _ = g.param(w);
        let c = g.input(Tensor::scalar(3.0));
        let grads = g.backward(c).unwrap();
        assert!(grads.dense(w, &store).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_twice_requires_reset() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0)).unwrap();
        let mut g = Graph::new(&store);
        let wn = g.param(w);
        let sq = g.mul(wn, wn).unwrap();
        g.backward(sq).unwrap();
        assert!(matches!(g.backward(sq), Err(Error::Contract(_))));
        g.reset_gradients();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn embed_rejects_out_of_range_and_skips_pad_gradient() {
        let mut store = ParamStore::new();
        let e = store.add("emb", m(3, 2, &[0., 0., 1., 2., 3., 4.])).unwrap();
        let mut g = Graph::new(&store);
        assert!(matches!(g.embed(e, &[0, 3]), Err(Error::Contract(_))));
        let h = g.embed(e, &[2, 0, 1]).unwrap();
        assert_eq!(g.value(h).data(), &[3., 0., 1., 4., 0., 2.]);
        let loss = g.sum(h);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(e).unwrap().data(), &[0., 0., 1., 1., 1., 1.]);
    }

    #[test]
    fn evaluation_is_bitwise_deterministic() {
        let build = || {
            let store = ParamStore::new();
            let mut g = Graph::new(&store);
            let a = g.input(m(2, 3, &[0.3, -1.2, 0.7, 2.2, 0.1, -0.4]));
            let t = g.transpose(a);
            let p = g.matmul(a, t).unwrap();
            let s = g.softmax_rows(p).unwrap();
            g.value(s).clone()
        };
        assert_eq!(build(), build());
    }
}
