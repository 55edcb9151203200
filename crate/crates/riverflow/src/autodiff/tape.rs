//! The recording tape and its primitive operations.
//!
//! Every forward result is stored on the tape; parents always precede their
//! consumers, so the backward pass is a single reverse sweep that visits each
//! recorded operation exactly once. Gradient accumulation order is fixed by
//! the recording order, which makes gradients bitwise reproducible.

use std::sync::Arc;

use ndarray::ArrayD;

use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// (m,k) x (k,n) -> (m,n)
    MatMul(Var, Var),
    /// (m,k) x (k,) -> (m,)
    MatVec(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// out[i,j] = a[i,j] + v[j]
    AddRowVec(Var, Var),
    /// out[i,j] = a[i,j] + v[i]
    AddColVec(Var, Var),
    /// out = a + diag(v)
    AddDiag(Var, Var),
    /// out = a + s (s scalar variable, broadcast)
    AddBroadcastScalar(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    /// Column-wise softmax restricted to masked entries; unmasked entries are 0.
    MaskedSoftmaxCols(Var, Arc<ndarray::Array2<bool>>),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Concat(Var, Var, usize),
    /// out_i = 1 / sqrt(max(a_i, floor)); gradient 0 where the floor engages.
    RsqrtClamped(Var, f64),
    /// Deposit vector entries into an (n,n) matrix at the given index pairs.
    Scatter(Var, Arc<Vec<(usize, usize)>>),
    /// out[i,j] = a[i,j] * v[i]
    ScaleRows(Var, Var),
    /// out[i,j] = a[i,j] * v[j]
    ScaleCols(Var, Var),
    /// out[j] = sum_i a[i,j]
    ColSum(Var),
    /// Arithmetic mean of scalar variables.
    MeanOf(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatVec(..) => "matvec",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRowVec(..) => "add_row_vec",
            Op::AddColVec(..) => "add_col_vec",
            Op::AddDiag(..) => "add_diag",
            Op::AddBroadcastScalar(..) => "add_broadcast_scalar",
            Op::Scale(..) => "scale",
            Op::Hadamard(..) => "hadamard",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::MaskedSoftmaxCols(..) => "masked_softmax_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Square(..) => "square",
            Op::Concat(..) => "concat",
            Op::RsqrtClamped(..) => "rsqrt",
            Op::Scatter(..) => "scatter",
            Op::ScaleRows(..) => "scale_rows",
            Op::ScaleCols(..) => "scale_cols",
            Op::ColSum(..) => "col_sum",
            Op::MeanOf(..) => "mean_of",
        }
    }
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("operand checked to be 2-d")
}

fn as1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("operand checked to be 1-d")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameter).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        debug_assert_eq!(a.len(), 1);
        *a.iter().next().expect("scalar variable is non-empty")
    }

    /// Gradient accumulated by the latest backward pass, if any.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push_unchecked(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.iter().all(|x| x.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite output in primitive '{}'",
                op.name()
            )));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn want_2d(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.dims(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::domain(format!("{what} must be 2-d, got shape {s:?}"))),
        }
    }

    fn want_1d(&self, v: Var, what: &str) -> Result<usize> {
        match self.dims(v) {
            [n] => Ok(*n),
            s => Err(Error::domain(format!("{what} must be 1-d, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.want_2d(a, "matmul lhs")?;
        let (k2, n) = self.want_2d(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::domain(format!(
                "matmul shape mismatch: ({m},{k}) x ({k2},{n})"
            )));
        }
        let value = as2(self.value(a)).dot(&as2(self.value(b))).into_dyn();
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (m, k) = self.want_2d(a, "matvec lhs")?;
        let k2 = self.want_1d(x, "matvec rhs")?;
        if k != k2 {
            return Err(Error::domain(format!(
                "matvec shape mismatch: ({m},{k}) x ({k2},)"
            )));
        }
        let value = as2(self.value(a)).dot(&as1(self.value(x))).into_dyn();
        self.push(value, Op::MatVec(a, x), &[a, x])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.want_2d(a, "transpose operand")?;
        let value = as2(self.value(a)).t().to_owned().into_dyn();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want_same_shape(a, b, "add")?;
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want_same_shape(a, b, "sub")?;
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    fn want_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::domain(format!(
                "{what} shape mismatch: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_, c) = self.want_2d(a, "add_row_vec lhs")?;
        let n = self.want_1d(v, "add_row_vec rhs")?;
        if c != n {
            return Err(Error::domain(format!(
                "add_row_vec shape mismatch: {c} columns vs vector of {n}"
            )));
        }
        let value = (&as2(self.value(a)) + &as1(self.value(v))).into_dyn();
        self.push(value, Op::AddRowVec(a, v), &[a, v])
    }

    pub fn add_col_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, _) = self.want_2d(a, "add_col_vec lhs")?;
        let n = self.want_1d(v, "add_col_vec rhs")?;
        if r != n {
            return Err(Error::domain(format!(
                "add_col_vec shape mismatch: {r} rows vs vector of {n}"
            )));
        }
        let col = as1(self.value(v)).insert_axis(ndarray::Axis(1));
        let value = (&as2(self.value(a)) + &col).into_dyn();
        self.push(value, Op::AddColVec(a, v), &[a, v])
    }

    pub fn add_diag(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, c) = self.want_2d(a, "add_diag lhs")?;
        let n = self.want_1d(v, "add_diag rhs")?;
        if r != c || r != n {
            return Err(Error::domain(format!(
                "add_diag needs square matrix matching the vector: ({r},{c}) vs {n}"
            )));
        }
        let mut value = self.value(a).clone();
        {
            let mut m = value
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("checked 2-d");
            let vv = as1(self.value(v));
            for i in 0..n {
                m[[i, i]] += vv[i];
            }
        }
        self.push(value, Op::AddDiag(a, v), &[a, v])
    }

    pub fn add_broadcast_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::domain("add_broadcast_scalar rhs must be a scalar"));
        }
        let sv = self.scalar(s);
        let value = self.value(a).mapv(|x| x + sv);
        self.push(value, Op::AddBroadcastScalar(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).mapv(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want_same_shape(a, b, "hadamard")?;
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Hadamard(a, b), &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope), &[a])
    }

    /// Softmax down each column, restricted to entries where `mask` is true;
    /// unmasked entries are exactly zero. Every column must have at least one
    /// masked entry.
    pub fn masked_softmax_cols(&mut self, a: Var, mask: Arc<ndarray::Array2<bool>>) -> Result<Var> {
        let (r, c) = self.want_2d(a, "masked_softmax_cols operand")?;
        if mask.dim() != (r, c) {
            return Err(Error::domain(format!(
                "mask shape {:?} does not match logits ({r},{c})",
                mask.dim()
            )));
        }
        let logits = as2(self.value(a));
        let mut out = ndarray::Array2::<f64>::zeros((r, c));
        for j in 0..c {
            let mut max = f64::NEG_INFINITY;
            for i in 0..r {
                if mask[[i, j]] {
                    max = max.max(logits[[i, j]]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::domain(format!(
                    "masked_softmax_cols: column {j} has no masked entry"
                )));
            }
            let mut denom = 0.0;
            for i in 0..r {
                if mask[[i, j]] {
                    let e = (logits[[i, j]] - max).exp();
                    out[[i, j]] = e;
                    denom += e;
                }
            }
            for i in 0..r {
                if mask[[i, j]] {
                    out[[i, j]] /= denom;
                }
            }
        }
        self.push(out.into_dyn(), Op::MaskedSoftmaxCols(a, mask), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = ndarray::arr0(self.value(a).sum()).into_dyn();
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let len = self.value(a).len();
        if len == 0 {
            return Err(Error::domain("mean of an empty tensor"));
        }
        let value = ndarray::arr0(self.value(a).sum() / len as f64).into_dyn();
        self.push(value, Op::Mean(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != db.len() || axis >= da.len() {
            return Err(Error::domain(format!(
                "concat rank/axis mismatch: {da:?} vs {db:?} along {axis}"
            )));
        }
        for (i, (x, y)) in da.iter().zip(db).enumerate() {
            if i != axis && x != y {
                return Err(Error::domain(format!(
                    "concat shape mismatch off-axis: {da:?} vs {db:?}"
                )));
            }
        }
        let value = ndarray::concatenate(
            ndarray::Axis(axis),
            &[self.value(a).view(), self.value(b).view()],
        )
        .map_err(|e| Error::domain(format!("concat failed: {e}")))?;
        self.push(value, Op::Concat(a, b, axis), &[a, b])
    }

    /// Elementwise 1/sqrt with a small positive floor on the argument; the
    /// floor only engages on degenerate inputs (e.g. all incoming learned
    /// weights clipped to zero) and contributes zero gradient there.
    pub fn rsqrt(&mut self, a: Var, floor: f64) -> Result<Var> {
        debug_assert!(floor > 0.0);
        let value = self.value(a).mapv(|x| 1.0 / x.max(floor).sqrt());
        self.push(value, Op::RsqrtClamped(a, floor), &[a])
    }

    pub fn scatter(&mut self, v: Var, pairs: Arc<Vec<(usize, usize)>>, n: usize) -> Result<Var> {
        let len = self.want_1d(v, "scatter operand")?;
        if len != pairs.len() {
            return Err(Error::domain(format!(
                "scatter length mismatch: {len} values vs {} index pairs",
                pairs.len()
            )));
        }
        let mut out = ndarray::Array2::<f64>::zeros((n, n));
        let vals = as1(self.value(v));
        for (e, &(r, c)) in pairs.iter().enumerate() {
            if r >= n || c >= n {
                return Err(Error::domain(format!(
                    "scatter index ({r},{c}) out of bounds for n={n}"
                )));
            }
            out[[r, c]] = vals[e];
        }
        self.push(out.into_dyn(), Op::Scatter(v, pairs), &[v])
    }

    pub fn scale_rows(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, _) = self.want_2d(a, "scale_rows lhs")?;
        let n = self.want_1d(v, "scale_rows rhs")?;
        if r != n {
            return Err(Error::domain(format!(
                "scale_rows shape mismatch: {r} rows vs vector of {n}"
            )));
        }
        let col = as1(self.value(v)).insert_axis(ndarray::Axis(1));
        let value = (&as2(self.value(a)) * &col).into_dyn();
        self.push(value, Op::ScaleRows(a, v), &[a, v])
    }

    pub fn scale_cols(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_, c) = self.want_2d(a, "scale_cols lhs")?;
        let n = self.want_1d(v, "scale_cols rhs")?;
        if c != n {
            return Err(Error::domain(format!(
                "scale_cols shape mismatch: {c} columns vs vector of {n}"
            )));
        }
        let value = (&as2(self.value(a)) * &as1(self.value(v))).into_dyn();
        self.push(value, Op::ScaleCols(a, v), &[a, v])
    }

    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        self.want_2d(a, "col_sum operand")?;
        let value = as2(self.value(a)).sum_axis(ndarray::Axis(0)).into_dyn();
        self.push(value, Op::ColSum(a), &[a])
    }

    /// Mean of scalar variables (e.g. per-sample losses of one batch).
    pub fn mean_of(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::domain("mean_of needs at least one variable"));
        }
        let mut total = 0.0;
        for &v in items {
            if self.value(v).len() != 1 {
                return Err(Error::domain("mean_of expects scalar variables"));
            }
            total += self.scalar(v);
        }
        let value = ndarray::arr0(total / items.len() as f64).into_dyn();
        self.push(value, Op::MeanOf(items.to_vec()), items)
    }

    /// Reverse sweep seeded with d(out)/d(out) = 1.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        self.backward_seeded(output, 1.0)
    }

    /// Reverse sweep with an explicit seed gradient on the scalar output.
    pub fn backward_seeded(&mut self, output: Var, seed: f64) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::domain("backward requires a scalar output"));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let shape = self.nodes[output.0].value.raw_dim();
        self.nodes[output.0].grad = Some(ArrayD::from_elem(shape, seed));

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.propagate(i);
        }
        Ok(())
    }

    /// Applies node `i`'s local gradients to its parents. Parents always have
    /// smaller indices, which the borrow split below relies on.
    fn propagate(&mut self, i: usize) {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let g = node.grad.as_ref().expect("checked before dispatch");

        let mut pending: Vec<(Var, ArrayD<f64>)> = Vec::with_capacity(2);
        let mut acc = |v: Var, contribution: ArrayD<f64>| pending.push((v, contribution));

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let g2 = as2(g);
                let av = as2(&before[a.0].value).to_owned();
                let bv = as2(&before[b.0].value).to_owned();
                acc(*a, g2.dot(&bv.t()).into_dyn());
                acc(*b, av.t().dot(&g2).into_dyn());
            }
            Op::MatVec(a, x) => {
                let g1 = as1(g);
                let av = as2(&before[a.0].value).to_owned();
                let xv = as1(&before[x.0].value).to_owned();
                let ga = g1
                    .view()
                    .insert_axis(ndarray::Axis(1))
                    .dot(&xv.view().insert_axis(ndarray::Axis(0)));
                acc(*a, ga.into_dyn());
                acc(*x, av.t().dot(&g1).into_dyn());
            }
            Op::Transpose(a) => {
                acc(*a, as2(g).t().to_owned().into_dyn());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.mapv(|x| -x));
            }
            Op::AddRowVec(a, v) => {
                acc(*a, g.clone());
                acc(*v, as2(g).sum_axis(ndarray::Axis(0)).into_dyn());
            }
            Op::AddColVec(a, v) => {
                acc(*a, g.clone());
                acc(*v, as2(g).sum_axis(ndarray::Axis(1)).into_dyn());
            }
            Op::AddDiag(a, v) => {
                acc(*a, g.clone());
                let g2 = as2(g);
                let diag: ndarray::Array1<f64> =
                    (0..g2.nrows()).map(|i| g2[[i, i]]).collect();
                acc(*v, diag.into_dyn());
            }
            Op::AddBroadcastScalar(a, s) => {
                acc(*a, g.clone());
                let shape = before[s.0].value.raw_dim();
                acc(*s, ArrayD::from_elem(shape, g.sum()));
            }
            Op::Scale(a, c) => {
                acc(*a, g.mapv(|x| x * c));
            }
            Op::Hadamard(a, b) => {
                acc(*a, g * &before[b.0].value);
                acc(*b, g * &before[a.0].value);
            }
            Op::Relu(a) => {
                let mask = before[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(*a, g * &mask);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let mask = before[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { s });
                acc(*a, g * &mask);
            }
            Op::MaskedSoftmaxCols(a, mask) => {
                let g2 = as2(g);
                let out = as2(&node.value);
                let (r, c) = out.dim();
                let mut ga = ndarray::Array2::<f64>::zeros((r, c));
                for j in 0..c {
                    let mut dot = 0.0;
                    for i in 0..r {
                        if mask[[i, j]] {
                            dot += out[[i, j]] * g2[[i, j]];
                        }
                    }
                    for i in 0..r {
                        if mask[[i, j]] {
                            ga[[i, j]] = out[[i, j]] * (g2[[i, j]] - dot);
                        }
                    }
                }
                acc(*a, ga.into_dyn());
            }
            Op::Sum(a) => {
                let gv = *g.iter().next().expect("scalar gradient");
                let shape = before[a.0].value.raw_dim();
                acc(*a, ArrayD::from_elem(shape, gv));
            }
            Op::Mean(a) => {
                let gv = *g.iter().next().expect("scalar gradient");
                let len = before[a.0].value.len() as f64;
                let shape = before[a.0].value.raw_dim();
                acc(*a, ArrayD::from_elem(shape, gv / len));
            }
            Op::Square(a) => {
                acc(*a, g * &before[a.0].value.mapv(|x| 2.0 * x));
            }
            Op::Concat(a, b, axis) => {
                let split = before[a.0].value.shape()[*axis];
                let (ga, gb) = g.view().split_at(ndarray::Axis(*axis), split);
                acc(*a, ga.to_owned());
                acc(*b, gb.to_owned());
            }
            Op::RsqrtClamped(a, floor) => {
                let floor = *floor;
                let out = &node.value;
                let mut ga = out.mapv(|y| -0.5 * y * y * y);
                ndarray::Zip::from(&mut ga)
                    .and(&before[a.0].value)
                    .for_each(|gi, &x| {
                        if x <= floor {
                            *gi = 0.0;
                        }
                    });
                acc(*a, &ga * g);
            }
            Op::Scatter(v, pairs) => {
                let g2 = as2(g);
                let gv: ndarray::Array1<f64> =
                    pairs.iter().map(|&(r, c)| g2[[r, c]]).collect();
                acc(*v, gv.into_dyn());
            }
            Op::ScaleRows(a, v) => {
                let g2 = as2(g);
                let av = as2(&before[a.0].value);
                let vv = as1(&before[v.0].value);
                let col = vv.insert_axis(ndarray::Axis(1));
                acc(*a, (&g2 * &col).into_dyn());
                acc(*v, (&g2 * &av).sum_axis(ndarray::Axis(1)).into_dyn());
            }
            Op::ScaleCols(a, v) => {
                let g2 = as2(g);
                let av = as2(&before[a.0].value);
                let vv = as1(&before[v.0].value);
                acc(*a, (&g2 * &vv).into_dyn());
                acc(*v, (&g2 * &av).sum_axis(ndarray::Axis(0)).into_dyn());
            }
            Op::ColSum(a) => {
                let g1 = as1(g);
                let (r, c) = as2(&before[a.0].value).dim();
                let mut ga = ndarray::Array2::<f64>::zeros((r, c));
                for i in 0..r {
                    for j in 0..c {
                        ga[[i, j]] = g1[j];
                    }
                }
                acc(*a, ga.into_dyn());
            }
            Op::MeanOf(items) => {
                let gv = *g.iter().next().expect("scalar gradient");
                let factor = gv * (1.0 / items.len() as f64);
                for &v in items {
                    let shape = before[v.0].value.raw_dim();
                    acc(v, ArrayD::from_elem(shape, factor));
                }
            }
        }

        for (v, contribution) in pending {
            let parent = &mut before[v.0];
            if !parent.requires_grad {
                continue;
            }
            match &mut parent.grad {
                Some(pg) => *pg += &contribution,
                None => parent.grad = Some(contribution),
            }
        }
    }
}
