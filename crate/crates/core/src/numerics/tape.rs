//! Reverse-mode gradient tape.
//!
//! Every forward op appends one node holding its output value. Nodes are never
//! removed, so a [`Var`] stays valid for the lifetime of the tape; decoders
//! exploit this to branch many hypotheses off a shared prefix.

use super::tensor::{matmul_acc, matmul_t_acc, t_matmul_acc, Gradients, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Var, Var),
    StackRows(Vec<Var>),
    Row(Var, usize),
    SliceCols { src: Var, start: usize, len: usize },
    SumRows { src: Var, start: usize, end: usize, scale: f64 },
    GatherRows(Var, Vec<usize>),
    VConcat(Var, Var),
    Softmax(Var),
    MaskedLogSoftmax(Var, Vec<bool>),
    Pick(Var, usize),
    Sum(Var),
    ReplaceRow { src: Var, row: usize, value: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    track_params: bool,
}

impl<'p> Tape<'p> {
    /// A tape whose parameters receive gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            track_params: true,
        }
    }

    /// A tape for pure inference; `backward` yields nothing for parameters.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            track_params: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        for slot in &mut self.param_vars {
            if slot.is_some_and(|v| v.0 >= len) {
                *slot = None;
            }
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let track = self.track_params;
        let v = self.push(Tensor::zeros(0, 0), Op::Param(id), track);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .matmul_t(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{name}: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, "add", |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds row vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.rows(), 1, "add_row: bias must be a row vector");
        assert_eq!(ta.cols(), tb.cols(), "add_row: width mismatch");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddRow(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, "sub", |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, "mul", |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| 1.0 - x);
        let ng = self.ng(a);
        self.push(out, Op::OneMinus(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows(), tb.rows(), "concat: row mismatch");
        let cols = ta.cols() + tb.cols();
        let mut data = Vec::with_capacity(ta.rows() * cols);
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::from_vec(ta.rows(), cols, data).expect("shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Concat(a, b), ng)
    }

    /// Stacks `1 × n` row vectors into a `k × n` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        let cols = rows.first().map_or(0, |&r| self.value(r).cols());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let t = self.value(r);
            assert_eq!(t.shape(), (1, cols), "stack_rows: expected row vectors");
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows.len(), cols, data).expect("shape");
        let ng = rows.iter().any(|&r| self.ng(r));
        self.push(out, Op::StackRows(rows.to_vec()), ng)
    }

    pub fn row(&mut self, src: Var, i: usize) -> Var {
        let out = Tensor::row_vector(self.value(src).row(i).to_vec());
        let ng = self.ng(src);
        self.push(out, Op::Row(src, i), ng)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let t = self.value(src);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(t.rows(), len, data).expect("shape");
        let ng = self.ng(src);
        self.push(out, Op::SliceCols { src, start, len }, ng)
    }

    /// Mean of rows `start..end` as a row vector.
    pub fn mean_rows(&mut self, src: Var, start: usize, end: usize) -> Var {
        self.reduce_rows(src, start, end, true)
    }

    /// Sum of rows `start..end` as a row vector.
    pub fn sum_rows(&mut self, src: Var, start: usize, end: usize) -> Var {
        self.reduce_rows(src, start, end, false)
    }

    fn reduce_rows(&mut self, src: Var, start: usize, end: usize, mean: bool) -> Var {
        let t = self.value(src);
        assert!(start < end && end <= t.rows(), "row range {start}..{end} out of bounds");
        let mut acc = vec![0.0; t.cols()];
        for r in start..end {
            for (a, &x) in acc.iter_mut().zip(t.row(r)) {
                *a += x;
            }
        }
        let scale = if mean { 1.0 / (end - start) as f64 } else { 1.0 };
        if mean {
            let n = (end - start) as f64;
            acc.iter_mut().for_each(|a| *a /= n);
        }
        let ng = self.ng(src);
        self.push(Tensor::row_vector(acc), Op::SumRows { src, start, end, scale }, ng)
    }

    /// Rows `ids` of `src`, stacked (embedding lookup).
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Var {
        let t = self.value(src);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_vec(ids.len(), t.cols(), data).expect("shape");
        let ng = self.ng(src);
        self.push(out, Op::GatherRows(src, ids.to_vec()), ng)
    }

    /// Row-wise concatenation: `a` on top of `b`.
    pub fn vconcat(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.cols(), "vconcat: width mismatch");
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let out = Tensor::from_vec(ta.rows() + tb.rows(), ta.cols(), data).expect("shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::VConcat(a, b), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Log-softmax of a row vector renormalised over `mask`; masked entries are
    /// `-inf`. The caller guarantees at least one allowed entry.
    pub fn masked_log_softmax(&mut self, a: Var, mask: &[bool]) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), 1, "masked_log_softmax expects a row vector");
        let out = super::softmax::masked_log_softmax(t.data(), mask)
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(a);
        self.push(
            Tensor::row_vector(out),
            Op::MaskedLogSoftmax(a, mask.to_vec()),
            ng,
        )
    }

    /// Scalar node holding entry `idx` of a row vector.
    pub fn pick(&mut self, a: Var, idx: usize) -> Var {
        let v = self.value(a).data()[idx];
        let ng = self.ng(a);
        self.push(Tensor::row_vector(vec![v]), Op::Pick(a, idx), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::row_vector(vec![v]), Op::Sum(a), ng)
    }

    /// Copy of `src` with row `row` replaced by the row vector `value`.
    pub fn replace_row(&mut self, src: Var, row: usize, value: Var) -> Var {
        let mut out = self.value(src).clone();
        let v = self.value(value);
        assert_eq!(v.shape(), (1, out.cols()), "replace_row: width mismatch");
        out.row_mut(row).copy_from_slice(v.data());
        let ng = self.ng(src) || self.ng(value);
        self.push(out, Op::ReplaceRow { src, row, value }, ng)
    }

    /// Back-propagates from the scalar `root`, visiting nodes in exact reverse
    /// creation order.
    pub fn backward(&self, root: Var) -> Backward {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let (rr, rc) = self.shape(root);
        assert_eq!((rr, rc), (1, 1), "backward root must be a scalar");
        grads[root.0] = Some(Tensor::row_vector(vec![1.0]));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = Vec::new();
        for (id, slot) in self.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = &grads[v.0] {
                    params.push((ParamId(id), g.clone()));
                }
            }
        }
        Backward { grads, params }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    // g · bᵀ
                    matmul_t_acc(g, tb, self.slot(grads, *a));
                }
                if self.ng(*b) {
                    t_matmul_acc(ta, g, self.slot(grads, *b));
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    matmul_acc(g, tb, self.slot(grads, *a));
                }
                if self.ng(*b) {
                    t_matmul_acc(g, ta, self.slot(grads, *b));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    self.slot(grads, *a).add_assign(g);
                }
                if self.ng(*b) {
                    self.slot(grads, *b).add_assign(g);
                }
            }
            Op::AddRow(a, b) => {
                if self.ng(*a) {
                    self.slot(grads, *a).add_assign(g);
                }
                if self.ng(*b) {
                    let gb = self.slot(grads, *b);
                    for r in 0..g.rows() {
                        for (o, &x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    self.slot(grads, *a).add_assign(g);
                }
                if self.ng(*b) {
                    for (o, &x) in self.slot(grads, *b).data_mut().iter_mut().zip(g.data()) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = self.slot(grads, *a);
                    for ((o, &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += x * y;
                    }
                }
                if self.ng(*b) {
                    let gb = self.slot(grads, *b);
                    for ((o, &x), &y) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::OneMinus(a) => {
                for (o, &x) in self.slot(grads, *a).data_mut().iter_mut().zip(g.data()) {
                    *o -= x;
                }
            }
            Op::Scale(a, c) => {
                for (o, &x) in self.slot(grads, *a).data_mut().iter_mut().zip(g.data()) {
                    *o += c * x;
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let ga = self.slot(grads, *a);
                for ((o, &x), &inp) in ga.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                    if inp > 0.0 {
                        *o += x;
                    }
                }
            }
            Op::Tanh(a) => {
                let ga = self.slot(grads, *a);
                for ((o, &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *o += x * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let ga = self.slot(grads, *a);
                for ((o, &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *o += x * y * (1.0 - y);
                }
            }
            Op::Concat(a, b) => {
                let ac = self.value(*a).cols();
                if self.ng(*a) {
                    let ga = self.slot(grads, *a);
                    for r in 0..g.rows() {
                        for (o, &x) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..ac]) {
                            *o += x;
                        }
                    }
                }
                if self.ng(*b) {
                    let gb = self.slot(grads, *b);
                    for r in 0..g.rows() {
                        for (o, &x) in gb.row_mut(r).iter_mut().zip(&g.row(r)[ac..]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::StackRows(rows) => {
                for (r, v) in rows.iter().enumerate() {
                    if self.ng(*v) {
                        for (o, &x) in self.slot(grads, *v).data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Row(src, i) => {
                let gs = self.slot(grads, *src);
                for (o, &x) in gs.row_mut(*i).iter_mut().zip(g.data()) {
                    *o += x;
                }
            }
            Op::SliceCols { src, start, len } => {
                let gs = self.slot(grads, *src);
                for r in 0..g.rows() {
                    for (o, &x) in gs.row_mut(r)[*start..start + len].iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::SumRows { src, start, end, scale } => {
                let gs = self.slot(grads, *src);
                for r in *start..*end {
                    for (o, &x) in gs.row_mut(r).iter_mut().zip(g.data()) {
                        *o += x * scale;
                    }
                }
            }
            Op::GatherRows(src, ids) => {
                let gs = self.slot(grads, *src);
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &x) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::VConcat(a, b) => {
                let split = self.value(*a).len();
                if self.ng(*a) {
                    for (o, &x) in self.slot(grads, *a).data_mut().iter_mut().zip(&g.data()[..split]) {
                        *o += x;
                    }
                }
                if self.ng(*b) {
                    for (o, &x) in self.slot(grads, *b).data_mut().iter_mut().zip(&g.data()[split..]) {
                        *o += x;
                    }
                }
            }
            Op::Softmax(a) => {
                let ga = self.slot(grads, *a);
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((o, &x), &y) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o += y * (x - dot);
                    }
                }
            }
            Op::MaskedLogSoftmax(a, mask) => {
                let total: f64 = g
                    .data()
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(x, _)| x)
                    .sum();
                let ga = self.slot(grads, *a);
                for (j, o) in ga.data_mut().iter_mut().enumerate() {
                    if mask[j] {
                        *o += g.data()[j] - out.data()[j].exp() * total;
                    }
                }
            }
            Op::Pick(a, i) => {
                self.slot(grads, *a).data_mut()[*i] += g.data()[0];
            }
            Op::Sum(a) => {
                let x = g.data()[0];
                self.slot(grads, *a).data_mut().iter_mut().for_each(|o| *o += x);
            }
            Op::ReplaceRow { src, row, value } => {
                if self.ng(*src) {
                    let gs = self.slot(grads, *src);
                    for r in 0..g.rows() {
                        if r != *row {
                            for (o, &x) in gs.row_mut(r).iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                    }
                }
                if self.ng(*value) {
                    for (o, &x) in self.slot(grads, *value).data_mut().iter_mut().zip(g.row(*row)) {
                        *o += x;
                    }
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let (r, c) = self.shape(v);
        grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }
}

/// Result of a backward pass.
pub struct Backward {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Backward {
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds `scale ·` parameter gradients into `acc`.
    pub fn accumulate(&self, acc: &mut Gradients, scale: f64) {
        for (id, g) in &self.params {
            let dst = acc.get_mut(*id);
            for (o, &x) in dst.data_mut().iter_mut().zip(g.data()) {
                *o += scale * x;
            }
        }
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

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
