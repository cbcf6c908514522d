//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass eagerly, keeping
//! the computed value of each node. [`Tape::backward`] then walks the nodes
//! in reverse and accumulates gradients for every parameter that took part
//! in the computation. Everything is a rank-2 array; vectors are `1 x n`
//! rows and scalars are `1 x 1`.

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named collection of trainable tensors.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Flattens every tensor, in registration order, into little-endian bytes.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 8);
        for t in &self.tensors {
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Overwrites the tensor values from a blob produced by [`ParamStore::to_blob`]
    /// on a store with the same layout.
    pub fn load_blob(&mut self, blob: &[u8]) -> Result<(), String> {
        if blob.len() != self.num_scalars() * 8 {
            return Err(format!(
                "parameter blob holds {} bytes, layout expects {}",
                blob.len(),
                self.num_scalars() * 8
            ));
        }
        let mut chunks = blob.chunks_exact(8);
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                let bytes: [u8; 8] = chunks.next().expect("length checked").try_into().expect("chunk of 8");
                *x = f64::from_le_bytes(bytes);
            }
        }
        Ok(())
    }
}

/// Gradients of a scalar with respect to each parameter of a store.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(g) = theirs {
                match mine {
                    Some(m) => *m += g,
                    None => *mine = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn is_all_zero(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|&x| x == 0.0))
    }

    pub(crate) fn slot_mut(&mut self, id: ParamId) -> &mut Option<Array2<f64>> {
        &mut self.grads[id.0]
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    MaskedLogSoftmax(Var, Array2<bool>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<Vec<usize>>),
    Blend(Var, Var, Array1<f64>),
    StraightThrough(Var),
    Pick(Var, Vec<usize>),
    SumAll(Var),
    SumCols(Var),
    MeanRows(Var),
}

struct Node {
    op: Op,
    value: Option<Array2<f64>>,
    needs_grad: bool,
}

/// Records one forward computation.
pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn row_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn row_log_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("non-param nodes store a value"),
        }
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Array2<f64>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant with no gradient.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op: Op::Input, value: Some(value), needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), value, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), value, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), value, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), value, &[a, b])
    }

    /// `a (m x n) + bias (1 x n)` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a) + self.value(bias);
        self.push(Op::AddBias(a, bias), value, &[a, bias])
    }

    /// Scales row `i` of `a (m x n)` by `col[i]` where `col` is `m x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) * self.value(col);
        self.push(Op::MulCol(a, col), value, &[a, col])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(Op::Scale(a, factor), value, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), value, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), value, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), value, &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(Op::Log(a), value, &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = row_softmax(self.value(a));
        self.push(Op::Softmax(a), value, &[a])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = row_log_softmax(self.value(a));
        self.push(Op::LogSoftmax(a), value, &[a])
    }

    /// Row-wise log-softmax restricted to entries where `allowed` is true.
    /// Disallowed entries get `-inf`. Every row must allow at least one entry.
    pub fn masked_log_softmax(&mut self, a: Var, allowed: Array2<bool>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), allowed.dim(), "mask shape");
        let mut value = Array2::from_elem(x.dim(), f64::NEG_INFINITY);
        for (i, row) in x.rows().into_iter().enumerate() {
            let max = row
                .iter()
                .zip(allowed.row(i))
                .filter(|(_, &ok)| ok)
                .fold(f64::NEG_INFINITY, |m, (&v, _)| m.max(v));
            assert!(max.is_finite(), "masked_log_softmax: row {i} has no allowed entry");
            let sum: f64 = row
                .iter()
                .zip(allowed.row(i))
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            let lse = max + sum.ln();
            for j in 0..row.len() {
                if allowed[[i, j]] {
                    value[[i, j]] = row[j] - lse;
                }
            }
        }
        self.push(Op::MaskedLogSoftmax(a, allowed), value, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(Op::ConcatCols(parts.to_vec()), value, parts)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(Op::SliceCols(a, start, end), value, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(Op::ConcatRows(parts.to_vec()), value, parts)
    }

    /// Selects (and possibly repeats) rows by index.
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &rows);
        self.push(Op::GatherRows(a, rows), value, &[a])
    }

    /// Output row `r` is the mean of the rows of `a` listed in `groups[r]`.
    /// Every group must be non-empty.
    pub fn segment_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut value = Array2::zeros((groups.len(), x.ncols()));
        for (r, g) in groups.iter().enumerate() {
            assert!(!g.is_empty(), "segment_mean: empty group {r}");
            let mut row = value.row_mut(r);
            for &i in g {
                row += &x.row(i);
            }
            row.mapv_inplace(|v| v / g.len() as f64);
        }
        self.push(Op::SegmentMean(a, groups), value, &[a])
    }

    /// Row-wise `mask[i] * a[i] + (1 - mask[i]) * b[i]` with a constant mask.
    pub fn blend(&mut self, a: Var, b: Var, mask: Array1<f64>) -> Var {
        let m = mask.view().insert_axis(Axis(1));
        let value = &m * self.value(a) + &m.mapv(|x| 1.0 - x) * self.value(b);
        self.push(Op::Blend(a, b, mask), value, &[a, b])
    }

    /// Forward value `hard`, gradient passed straight through to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Array2<f64>) -> Var {
        assert_eq!(self.value(soft).dim(), hard.dim());
        self.push(Op::StraightThrough(soft), hard, &[soft])
    }

    /// Picks `a[i, cols[i]]` for every row, giving an `m x 1` column.
    pub fn pick(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), cols.len(), "pick: one column per row");
        let value = Array2::from_shape_fn((cols.len(), 1), |(i, _)| x[[i, cols[i]]]);
        self.push(Op::Pick(a, cols), value, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::SumAll(a), value, &[a])
    }

    /// Sum across columns: `m x n -> m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumCols(a), value, &[a])
    }

    /// Mean across rows: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(Op::MeanRows(a), value, &[a])
    }

    /// Gradients of the `1 x 1` node `root` with respect to every parameter used.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients { grads: vec![None; self.params.len()] };

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let need = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    *out.slot_mut(*id) = Some(g);
                }
                Op::MatMul(a, b) => {
                    if need(a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if need(b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if need(a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if need(b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if need(a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if need(b) {
                        acc(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if need(a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if need(b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddBias(a, b) => {
                    if need(b) {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if need(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MulCol(a, c) => {
                    if need(c) {
                        let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(&mut grads, *c, gc);
                    }
                    if need(a) {
                        acc(&mut grads, *a, &g * self.value(*c));
                    }
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap();
                    acc(&mut grads, *a, &g * &y.mapv(|v| 1.0 - v * v));
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    acc(&mut grads, *a, &g * &y.mapv(|v| v * (1.0 - v)));
                }
                Op::Exp(a) => {
                    let y = node.value.as_ref().unwrap();
                    acc(&mut grads, *a, &g * y);
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, &g / x);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, y * &(&g - &dot));
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, &g - &(y.mapv(f64::exp) * &total));
                }
                Op::MaskedLogSoftmax(a, allowed) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let total: f64 = (0..y.ncols()).filter(|&j| allowed[[i, j]]).map(|j| g[[i, j]]).sum();
                        for j in 0..y.ncols() {
                            if allowed[[i, j]] {
                                ga[[i, j]] = g[[i, j]] - y[[i, j]].exp() * total;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if need(p) {
                            acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        if need(p) {
                            acc(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (r, &i) in rows.iter().enumerate() {
                        let mut row = ga.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentMean(a, groups) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (r, grp) in groups.iter().enumerate() {
                        let share = g.row(r).mapv(|v| v / grp.len() as f64);
                        for &i in grp {
                            let mut row = ga.row_mut(i);
                            row += &share;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Blend(a, b, mask) => {
                    let m = mask.view().insert_axis(Axis(1));
                    if need(a) {
                        acc(&mut grads, *a, &g * &m);
                    }
                    if need(b) {
                        acc(&mut grads, *b, &g * &m.mapv(|x| 1.0 - x));
                    }
                }
                Op::StraightThrough(a) => acc(&mut grads, *a, g),
                Op::Pick(a, cols) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (i, &c) in cols.iter().enumerate() {
                        ga[[i, c]] += g[[i, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let dim = self.value(*a).dim();
                    let ga = Array2::from_shape_fn(dim, |(i, _)| g[[i, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let dim = self.value(*a).dim();
                    let n = dim.0 as f64;
                    let ga = Array2::from_shape_fn(dim, |(_, j)| g[[0, j]] / n);
                    acc(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` with respect to every entry of every parameter.
    fn check_grads(store: &mut ParamStore, f: impl Fn(&mut Tape) -> Var) {
        let analytic = {
            let mut tape = Tape::new(store);
            let root = f(&mut tape);
            tape.backward(root)
        };
        let eps = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let orig = store.get(id)[[i, j]];
                    store.get_mut(id)[[i, j]] = orig + eps;
                    let up = {
                        let mut t = Tape::new(store);
                        let r = f(&mut t);
                        t.scalar(r)
                    };
                    store.get_mut(id)[[i, j]] = orig - eps;
                    let down = {
                        let mut t = Tape::new(store);
                        let r = f(&mut t);
                        t.scalar(r)
                    };
                    store.get_mut(id)[[i, j]] = orig;
                    let numeric = (up - down) / (2.0 * eps);
                    let a = analytic.get(id).map(|g| g[[i, j]]).unwrap_or(0.0);
                    assert!(
                        (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                        "param {} [{i},{j}]: analytic {a} numeric {numeric}",
                        store.name(id)
                    );
                }
            }
        }
    }

    fn store_with(values: &[(&str, Array2<f64>)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, v)| s.add(*n, v.clone())).collect();
        (s, ids)
    }

    #[test]
    fn dense_ops_match_finite_differences() {
        let (mut store, ids) = store_with(&[
            ("x", array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.7]]),
            ("w", array![[0.2, -0.1], [0.5, 0.3], [-0.4, 0.6]]),
            ("b", array![[0.05, -0.02]]),
        ]);
        check_grads(&mut store, |t| {
            let x = t.param(ids[0]);
            let w = t.param(ids[1]);
            let b = t.param(ids[2]);
            let h = t.matmul(x, w);
            let h = t.add_bias(h, b);
            let a = t.tanh(h);
            let s = t.sigmoid(h);
            let m = t.mul(a, s);
            let d = t.sub(m, a);
            let e = t.exp(d);
            let l = t.log(e);
            let sc = t.scale(l, 1.7);
            let c = t.concat_cols(&[sc, a]);
            let sl = t.slice_cols(c, 1, 3);
            let col = t.sum_cols(sl);
            let mc = t.mul_col(sl, col);
            let mr = t.mean_rows(mc);
            t.sum_all(mr)
        });
    }

    #[test]
    fn distribution_ops_match_finite_differences() {
        let (mut store, ids) = store_with(&[
            ("logits", array![[0.3, -0.2, 0.5, 1.0], [0.1, 0.4, -0.7, 0.0], [2.0, -1.0, 0.2, 0.3]]),
            ("weights", array![[0.7], [-1.3], [0.4]]),
        ]);
        check_grads(&mut store, |t| {
            let x = t.param(ids[0]);
            let w = t.param(ids[1]);
            let p = t.softmax(x);
            let lp = t.log_softmax(x);
            let picked = t.pick(lp, vec![0, 3, 1]);
            let weighted = t.mul(picked, w);
            let mask = array![[true, false, true, true], [false, true, true, true], [true, true, false, false]];
            let mlp = t.masked_log_softmax(x, mask);
            let mp = t.pick(mlp, vec![2, 1, 0]);
            let avg = t.mean_rows(p);
            let la = t.log(avg);
            let kl = t.mul(avg, la);
            let s1 = t.sum_all(weighted);
            let s2 = t.sum_all(kl);
            let s3 = t.sum_all(mp);
            let a = t.add(s1, s2);
            t.add(a, s3)
        });
    }

    #[test]
    fn row_routing_ops_match_finite_differences() {
        let (mut store, ids) = store_with(&[
            ("table", array![[0.3, -0.2], [0.1, 0.4], [2.0, -1.0], [0.5, 0.25]]),
            ("other", array![[0.9, 0.1], [-0.3, 0.8]]),
        ]);
        check_grads(&mut store, |t| {
            let table = t.param(ids[0]);
            let other = t.param(ids[1]);
            let g = t.gather_rows(table, vec![3, 0, 3]);
            let m = t.segment_mean(table, vec![vec![0, 1], vec![2, 2, 3]]);
            let r = t.concat_rows(&[g, m]);
            let b = t.blend(m, other, array![1.0, 0.25]);
            let sq = t.mul(r, r);
            let s1 = t.sum_all(sq);
            let sq2 = t.mul(b, b);
            let s2 = t.sum_all(sq2);
            t.add(s1, s2)
        });
    }

    #[test]
    fn straight_through_forwards_hard_and_passes_gradient() {
        let (store, ids) = store_with(&[("soft", array![[0.2, 0.8]])]);
        let mut t = Tape::new(&store);
        let soft = t.param(ids[0]);
        let st = t.straight_through(soft, array![[0.0, 1.0]]);
        assert_eq!(t.value(st), &array![[0.0, 1.0]]);
        let w = t.input(array![[3.0, -2.0]]);
        let y = t.mul(st, w);
        let root = t.sum_all(y);
        let g = t.backward(root);
        assert_eq!(g.get(ids[0]).unwrap(), &array![[3.0, -2.0]]);
    }

    #[test]
    fn masked_entries_are_exactly_minus_infinity() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.input(array![[1.0, 2.0, 3.0]]);
        let lp = t.masked_log_softmax(x, array![[true, false, true]]);
        let v = t.value(lp);
        assert_eq!(v[[0, 1]], f64::NEG_INFINITY);
        assert_eq!(v[[0, 1]].exp(), 0.0);
        let total: f64 = v.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blob_round_trip_restores_values() {
        let (store, _) = store_with(&[("a", array![[1.5, -2.0]]), ("b", array![[3.25], [4.0]])]);
        let blob = store.to_blob();
        let mut other = store.clone();
        other.get_mut(ParamId(0))[[0, 0]] = 0.0;
        other.load_blob(&blob).unwrap();
        assert_eq!(other, store);
        assert!(other.load_blob(&blob[..8]).is_err());
    }

    #[test]
    fn clip_norm_bounds_global_norm() {
        let (store, ids) = store_with(&[("a", array![[3.0, 4.0]])]);
        let mut t = Tape::new(&store);
        let a = t.param(ids[0]);
        let sq = t.mul(a, a);
        let root = t.sum_all(sq);
        let mut g = t.backward(root);
        assert!((g.global_norm() - 10.0).abs() < 1e-12);
        g.clip_norm(5.0);
        assert!((g.global_norm() - 5.0).abs() < 1e-12);
    }
}
