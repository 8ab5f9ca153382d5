//! Dense row-major tensors and a define-by-run reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] outside the graph; [`Graph::param`] copies the current value
//! onto the tape and [`Graph::accumulate_param_grads`] adds the tape gradients
//! back into the store. Gradients accumulate until [`ParamStore::zero_grads`].
//!
//! All arithmetic is `f64`. Matrix ops accept rank-1 tensors as `1 x n` rows.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} must be non-empty with positive dimensions"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("positive dimensions")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    /// A `1 x n` row.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::matrix(1, n, data).expect("non-empty row")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view for matrix ops.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(Error::InvalidTensor(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(self.shape[0])
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(self.len() / self.shape[0])
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// Row-wise `log softmax` computed on plain values.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = x.clone();
    for row in out.data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor. Its gradient always exists and is shaped like `value`.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Model(format!("duplicate parameter name '{name}'")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for p in &mut self.params {
                p.grad.data.iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }

    /// Copies of all parameter values, in id order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Model(format!(
                "snapshot has {} tensors, store has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape("restore", p.value.shape(), v.shape()));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Sum(Var),
    SelectRows(Vec<bool>, Var, Var),
    WeightedRowSum(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        valid: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape. Nodes are appended in execution order, which is a topological
/// order of the computation; backward walks it once in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that does not require gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is recorded by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Places a parameter on the tape, once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_values(&self.value(a).data, &self.value(b).data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum. `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x + y);
            let rg = self.rg(a) || self.rg(b);
            let t = Tensor::new(sa.to_vec(), data)?;
            return Ok(self.push(t, Op::Add(a, b), rg));
        }
        let (m, n) = self.value(a).dims2()?;
        let (r, c) = self.value(b).dims2()?;
        if r != 1 || c != n {
            return Err(Error::shape("add", sa, sb));
        }
        let mut data = self.value(a).data.clone();
        let row = &self.value(b).data;
        for chunk in data.chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(row) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRow(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x - y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.map(a, |x| x * factor);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows_masked(x, None)
    }

    /// Row-wise softmax where `mask[i] == false` entries get probability 0.
    /// Every row needs at least one unmasked entry.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::shape("softmax mask", &[m, n], &[mask.len()]));
            }
        }
        let src = &self.value(x).data;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let keep = |j: usize| mask.is_none_or(|mk| mk[r * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Empty("softmax row with every entry masked"));
            }
            let mut total = 0.0;
            for j in 0..n {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    out[r * n + j] = e;
                    total += e;
                }
            }
            for v in &mut out[r * n..(r + 1) * n] {
                *v /= total;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Softmax(x), rg))
    }

    /// Gathers rows of `table`; used for embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows ids"));
        }
        let (v, d) = self.value(table).dims2()?;
        let src = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange {
                    what: "lookup table",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::GatherRows(table, ids.to_vec()),
            rg,
        ))
    }

    pub fn lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat"))?;
        let m = self.value(first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat"))?;
        let n = self.value(first).dims2()?.1;
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            m += r;
        }
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(&self.value(p).data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start >= end || end > n {
            return Err(Error::IndexOutOfRange {
                what: "column slice",
                index: end,
                bound: n,
            });
        }
        let w = end - start;
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, w, out)?, Op::SliceCols(x, start), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start >= end || end > m {
            return Err(Error::IndexOutOfRange {
                what: "row slice",
                index: end,
                bound: m,
            });
        }
        let out = self.value(x).data[start * n..end * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(end - start, n, out)?, Op::SliceRows(x, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Row `i` of the result comes from `a` where `take_a[i]`, else from `b`.
    pub fn select_rows(&mut self, take_a: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape("select_rows", a, b)?;
        let (m, n) = self.value(a).dims2()?;
        if take_a.len() != m {
            return Err(Error::shape("select_rows mask", &[m, n], &[take_a.len()]));
        }
        let mut out = Vec::with_capacity(m * n);
        for (r, &t) in take_a.iter().enumerate() {
            let src = if t { a } else { b };
            out.extend_from_slice(&self.value(src).data[r * n..(r + 1) * n]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::SelectRows(take_a.to_vec(), a, b), rg))
    }

    /// For weights `[B x J]` and rows `[(B*J) x d]` (block `b` holds rows
    /// `b*J..(b+1)*J`), returns `[B x d]` with row `b = sum_j w[b,j] * rows[b*J+j]`.
    pub fn weighted_row_sum(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (bsz, j) = self.value(weights).dims2()?;
        let (r, d) = self.value(rows).dims2()?;
        if r != bsz * j {
            return Err(Error::shape("weighted_row_sum", self.shape(weights), self.shape(rows)));
        }
        let w = &self.value(weights).data;
        let h = &self.value(rows).data;
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            let dst = &mut out[b * d..(b + 1) * d];
            for t in 0..j {
                let a = w[b * j + t];
                let src = &h[(b * j + t) * d..(b * j + t + 1) * d];
                for (o, x) in dst.iter_mut().zip(src) {
                    *o += a * x;
                }
            }
        }
        let rg = self.rg(weights) || self.rg(rows);
        Ok(self.push(Tensor::matrix(bsz, d, out)?, Op::WeightedRowSum(weights, rows), rg))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// averaged over rows with `valid[i] == true`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
        let (m, v) = self.value(logits).dims2()?;
        if targets.len() != m || valid.len() != m {
            return Err(Error::shape("cross_entropy", &[m, v], &[targets.len(), valid.len()]));
        }
        let count = valid.iter().filter(|&&x| x).count();
        if count == 0 {
            return Err(Error::Empty("cross_entropy: every position is masked"));
        }
        let src = &self.value(logits).data;
        let mut probs = vec![0.0; m * v];
        let mut total = 0.0;
        for r in 0..m {
            if !valid[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::IndexOutOfRange {
                    what: "target vocabulary",
                    index: t,
                    bound: v,
                });
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= z;
            }
            total += -(row[t] - max - z.ln());
        }
        let loss = total / count as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Reverse pass from a scalar. Gradients of earlier backward calls on
    /// this graph are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidTensor(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let rg = |v: &Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (m, k) = av.dims2().expect("matrix");
                let n = bv.cols();
                if rg(a) {
                    acc(*a, &mut |ga| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for c in 0..k {
                                let brow = &bv.data[c * n..(c + 1) * n];
                                ga[r * k + c] += dot(grow, brow);
                            }
                        }
                    });
                }
                if rg(b) {
                    acc(*b, &mut |gb| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for c in 0..k {
                                let a_rc = av.data[r * k + c];
                                if a_rc == 0.0 {
                                    continue;
                                }
                                for (o, x) in gb[c * n..(c + 1) * n].iter_mut().zip(grow) {
                                    *o += a_rc * x;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    let n = gb.len();
                    for chunk in g.chunks(n) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value.data;
                let bv = &nodes[b.0].value.data;
                acc(*a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |ga| {
                for (o, x) in ga.iter_mut().zip(g) {
                    *o += f * x;
                }
            }),
            Op::Tanh(a) => {
                let y = &node.value.data;
                acc(*a, &mut |ga| {
                    for ((o, x), yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += x * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                acc(*a, &mut |ga| {
                    for ((o, x), yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += x * yv * (1.0 - yv);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value.data;
                let n = node.value.cols();
                acc(*a, &mut |ga| {
                    for ((gr, yr), or) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s = dot(gr, yr);
                        for ((o, gv), yv) in or.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - s);
                        }
                    }
                });
            }
            Op::GatherRows(t, ids) => {
                let d = node.value.cols();
                acc(*t, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let m = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &mut |gp| {
                        for r in 0..m {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * n + off..r * n + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols(x, start) => {
                let n = nodes[x.0].value.cols();
                let w = node.value.cols();
                let m = node.value.rows();
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        add_into(&mut gx[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let n = node.value.cols();
                acc(*x, &mut |gx| add_into(&mut gx[start * n..start * n + g.len()], g));
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::SelectRows(mask, a, b) => {
                let n = node.value.cols();
                for (src, want) in [(a, true), (b, false)] {
                    acc(*src, &mut |gs| {
                        for (r, &t) in mask.iter().enumerate() {
                            if t == want {
                                add_into(&mut gs[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                            }
                        }
                    });
                }
            }
            Op::WeightedRowSum(w, h) => {
                let (bsz, j) = nodes[w.0].value.dims2().expect("matrix");
                let d = node.value.cols();
                let wv = &nodes[w.0].value.data;
                let hv = &nodes[h.0].value.data;
                acc(*w, &mut |gw| {
                    for b in 0..bsz {
                        let gr = &g[b * d..(b + 1) * d];
                        for t in 0..j {
                            let row = b * j + t;
                            gw[row] += dot(gr, &hv[row * d..(row + 1) * d]);
                        }
                    }
                });
                acc(*h, &mut |gh| {
                    for b in 0..bsz {
                        let gr = &g[b * d..(b + 1) * d];
                        for t in 0..j {
                            let row = b * j + t;
                            let a = wv[row];
                            for (o, x) in gh[row * d..(row + 1) * d].iter_mut().zip(gr) {
                                *o += a * x;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                valid,
                probs,
                count,
            } => {
                let v = nodes[logits.0].value.cols();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |gl| {
                    for (r, (&t, &ok)) in targets.iter().zip(valid).enumerate() {
                        if !ok {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (o, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *o += scale * p;
                        }
                        row[t] -= scale;
                    }
                });
            }
        }
    }

    /// Gradient of `v` from the last [`Graph::backward`] call. `None` when
    /// `v` was not reached or does not require gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Adds the gradients of every parameter on this tape into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(Some(g)) = self.grads.get(v.0) {
                add_into(&mut store.get_mut(id).grad.data, g);
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

fn matmul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let a_rc = a[r * k + c];
            if a_rc == 0.0 {
                continue;
            }
            for (o, x) in orow.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *o += a_rc * x;
            }
        }
    }
    out
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central-difference gradient checking.
pub mod gradcheck {
    use super::{Graph, Tensor, Var};
    use crate::error::Result;

    /// `|a - b| / max(|a|, |b|, 1e-8)`.
    pub fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Largest relative error between backprop gradients of `f` and central
    /// differences with step `h`, over every element of every input.
    pub fn max_relative_error<F>(inputs: &[Tensor], f: F, h: f64) -> Result<f64>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.backward(out)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();

        let eval = |xs: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.value(out).item())
        };

        let mut worst: f64 = 0.0;
        let mut xs = inputs.to_vec();
        for i in 0..xs.len() {
            for e in 0..xs[i].len() {
                let orig = xs[i].data()[e];
                xs[i].data_mut()[e] = orig + h;
                let plus = eval(&xs)?;
                xs[i].data_mut()[e] = orig - h;
                let minus = eval(&xs)?;
                xs[i].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                worst = worst.max(relative_error(analytic[i].data()[e], numeric));
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::max_relative_error;
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn pseudo_random(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let a = pseudo_random(&[3, 3], 1);
        let i3 = g.constant(Tensor::identity(3));
        let av = g.constant(a.clone());
        let p = g.matmul(i3, av).unwrap();
        assert_eq!(g.value(p), &a);

        let x = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = g.constant(m(&[&[1.0], &[1.0]]));
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let t = g.tanh(z);
        let s = g.sigmoid(z);
        assert_eq!(g.value(t).item(), 0.0);
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn square_sum_derivative() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::row(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn broadcast_only_over_rows() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 2]));
        let row = g.constant(Tensor::row(vec![1.0, 2.0]));
        let col = g.constant(Tensor::zeros(&[3, 1]));
        let s = g.add(a, row).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(g.add(a, col).is_err());
        assert!(g.mul(a, row).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[0.0, 0.0], &[1000.0, 0.0]]));
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y).data().to_vec();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 1.0).abs() < 1e-12 && v[3].abs() < 1e-12);
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[3.0, 1.0, 1.0]]));
        let y = g.softmax_rows_masked(x, Some(&[false, true, true])).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 0.5]);
        assert!(g.softmax_rows_masked(x, Some(&[false; 3])).is_err());
    }

    #[test]
    fn lookup_rows_and_scatter_add() {
        let mut g = Graph::new();
        let table = g.variable(Tensor::identity(3));
        let first = g.lookup(table, &[0]).unwrap();
        assert_eq!(g.value(first).data(), &[1.0, 0.0, 0.0]);

        let rep = g.lookup(table, &[2, 2]).unwrap();
        let s = g.sum(rep);
        g.backward(s).unwrap();
        let grad = g.grad(table).unwrap();
        assert_eq!(grad.row_slice(2), &[2.0, 2.0, 2.0]);
        assert_eq!(grad.row_slice(0), &[0.0, 0.0, 0.0]);
        assert!(g.lookup(table, &[3]).is_err());

        let mut g = Graph::new();
        let t = pseudo_random(&[4, 3], 9);
        let tv = g.constant(t.clone());
        let r = g.lookup(tv, &[1, 0]).unwrap();
        assert_eq!(g.value(r).row_slice(0), t.row_slice(1));
        assert_eq!(g.value(r).row_slice(1), t.row_slice(0));
    }

    #[test]
    fn concat_slice_inverse_and_gradient() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::row(vec![1.0, 2.0]));
        let b = g.variable(Tensor::row(vec![3.0, 4.0, 5.0]));
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[1, 5]);
        let a2 = g.slice_cols(c, 0, 2).unwrap();
        let b2 = g.slice_cols(c, 2, 5).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(g.slice_cols(c, 3, 6).is_err());

        let r = g.concat_rows(&[a, a]).unwrap();
        assert_eq!(g.shape(r), &[2, 2]);
        let back = g.slice_rows(r, 1, 2).unwrap();
        assert_eq!(g.value(back), g.value(a));
        assert!(g.concat_rows(&[a, b]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_limit() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(x, &[1, 3], &[true, true]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let x = g.constant(m(&[&[0.0, 200.0, 0.0]]));
        let l = g.cross_entropy(x, &[1], &[true]).unwrap();
        assert!(g.value(l).item() < 1e-80);

        assert!(g.cross_entropy(x, &[1], &[false]).is_err());
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let mut g = Graph::new();
        let x = g.variable(m(&[&[1.0, 2.0], &[5.0, -3.0]]));
        let both = g.cross_entropy(x, &[0, 0], &[true, false]).unwrap();
        let row = g.slice_rows(x, 0, 1).unwrap();
        let single = g.cross_entropy(row, &[0], &[true]).unwrap();
        assert_eq!(g.value(both).item(), g.value(single).item());
        g.backward(both).unwrap();
        assert_eq!(&g.grad(x).unwrap().data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::row(vec![1.0, -1.0, 4.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn disconnected_param_gets_zero_grad() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row(vec![1.0, 2.0])).unwrap();
        let q = store.add("q", Tensor::row(vec![3.0])).unwrap();
        let mut g = Graph::new();
        let _pv = g.param(&store, p);
        let qv = g.param(&store, q);
        let s = g.sum(qv);
        g.backward(s).unwrap();
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.grad(p).data(), &[0.0, 0.0]);
        assert_eq!(store.grad(q).data(), &[1.0]);
        // accumulation across passes
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.grad(q).data(), &[2.0]);
        store.zero_grads();
        assert_eq!(store.grad(q).data(), &[0.0]);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let a0 = pseudo_random(&[3, 4], 3);
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let a = g.variable(a0.clone());
            let t = g.tanh(a);
            let l1 = g.sum(t);
            let sq = g.mul(a, a).unwrap();
            let l2 = g.sum(sq);
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            g.backward(loss).unwrap();
            g.grad(a).unwrap()
        };
        let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(3));
        for i in 0..g12.len() {
            assert!((g12.data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let a = g.constant(pseudo_random(&[5, 7], 4));
            let b = g.constant(pseudo_random(&[7, 3], 5));
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax_rows(c).unwrap();
            g.value(s).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    const H: f64 = 1e-6;
    const TOL: f64 = 1e-4;

    #[test]
    fn gradcheck_every_op_at_random_points() {
        for seed in 0..10u64 {
            let a = pseudo_random(&[3, 4], seed);
            let b = pseudo_random(&[4, 2], seed + 100);
            let w = pseudo_random(&[3, 2], seed + 200);
            let err = max_relative_error(
                &[a.clone(), b.clone(), w.clone()],
                |g, v| {
                    let p = g.matmul(v[0], v[1])?;
                    let q = g.mul(p, v[2])?;
                    Ok(g.sum(q))
                },
                H,
            )
            .unwrap();
            assert!(err < TOL, "matmul seed {seed}: {err}");

            let x = pseudo_random(&[3, 4], seed + 300);
            let r = pseudo_random(&[1, 4], seed + 400);
            let err = max_relative_error(
                &[x.clone(), r, a.clone()],
                |g, v| {
                    let s = g.add(v[0], v[1])?;
                    let t = g.tanh(s);
                    let u = g.sigmoid(v[2]);
                    let d = g.sub(t, u)?;
                    let e = g.mul(d, v[0])?;
                    let f = g.scale(e, 0.7);
                    Ok(g.sum(f))
                },
                H,
            )
            .unwrap();
            assert!(err < TOL, "elementwise seed {seed}: {err}");

            let err = max_relative_error(
                &[x.clone(), a.clone()],
                |g, v| {
                    let s = g.softmax_rows_masked(v[0], Some(&[true, false, true, true].repeat(3)))?;
                    let p = g.mul(s, v[1])?;
                    Ok(g.sum(p))
                },
                H,
            )
            .unwrap();
            assert!(err < TOL, "softmax seed {seed}: {err}");

            let table = pseudo_random(&[5, 3], seed + 500);
            let wts = pseudo_random(&[4, 3], seed + 600);
            let err = max_relative_error(
                &[table, wts],
                |g, v| {
                    let l = g.lookup(v[0], &[1, 4, 1, 0])?;
                    let m = g.mul(l, v[1])?;
                    Ok(g.sum(m))
                },
                H,
            )
            .unwrap();
            assert!(err < TOL, "lookup seed {seed}: {err}");

            let err = max_relative_error(
                &[a.clone(), x.clone(), pseudo_random(&[2, 8], seed + 700)],
                |g, v| {
                    let c = g.concat_cols(&[v[0], v[1]])?;
                    let c = g.reshape(c, &[3, 8])?;
                    let r = g.concat_rows(&[c, v[2]])?;
                    let s = g.slice_cols(r, 2, 7)?;
                    let s = g.slice_rows(s, 1, 4)?;
                    let t = g.tanh(s);
                    let sel = g.select_rows(&[true, false, true], t, s)?;
                    let q = g.mul(sel, sel)?;
                    Ok(g.sum(q))
                },
                H,
            )
            .unwrap();
            assert!(err < TOL, "concat/slice seed {seed}: {err}");

            let err = max_relative_error(
                &[pseudo_random(&[2, 3], seed + 800), pseudo_random(&[6, 4], seed + 900)],
                |g, v| {
                    let s = g.weighted_row_sum(v[0], v[1])?;
                    let q = g.mul(s, s)?;
                    Ok(g.sum(q))
                },
                H,
            )
            .unwrap();
            assert!(err < TOL, "weighted_row_sum seed {seed}: {err}");

            let err = max_relative_error(
                &[pseudo_random(&[4, 5], seed + 1000)],
                |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2], &[true, true, false, true]),
                H,
            )
            .unwrap();
            assert!(err < TOL, "cross_entropy seed {seed}: {err}");
        }
    }

    #[test]
    fn clip_grad_norm_rescales() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row(vec![0.0, 0.0])).unwrap();
        store.get_mut(p).grad = Tensor::row(vec![3.0, 4.0]);
        let before = store.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }
}
