//! A small reverse-mode gradient tape over dense `f64` arrays.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep. Leaf
//! gradients accumulate across `backward` calls until [`Tape::zero_grad`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::findiff::SeriesStencil;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape entries must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(rows, cols)` of a 2-D tensor; a 1-D tensor is treated as a column.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [r] => Ok((*r, 1)),
            s => Err(Error::Dimension(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sin,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    L1Norm,
    SqL2Norm,
    FrobeniusSq,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    ScaleColumns(Var, Arc<[f64]>),
    SelectColumns(Var, Arc<[usize]>),
    ColumnStencil(Var, Arc<SeriesStencil>),
    Reduce(Reduction, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation record for one forward evaluation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiated leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = if va.shape() == vb.shape() || vb.is_scalar() {
            va.shape().to_vec()
        } else if va.is_scalar() {
            vb.shape().to_vec()
        } else {
            return Err(Error::Dimension(format!(
                "incompatible shapes {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        };
        let n: usize = shape.iter().product();
        let f = match op {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let (da, db) = (va.data(), vb.data());
        let out: Vec<f64> = (0..n)
            .map(|i| f(da[i.min(da.len() - 1)], db[i.min(db.len() - 1)]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Var {
        let va = self.value(a);
        let data: Vec<f64> = match op {
            Unary::Sin => va.data().iter().map(|x| x.sin()).collect(),
            Unary::Abs => va.data().iter().map(|x| x.abs()).collect(),
        };
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.rg(a);
        self.push(value, Op::Unary(op, a), rg)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|x| c * x).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Multiplies column `j` of a matrix by the constant `factors[j]`.
    pub fn scale_columns(&mut self, a: Var, factors: Arc<[f64]>) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = va.dims2()?;
        if factors.len() != c {
            return Err(Error::Dimension(format!(
                "{} column factors for a {r}x{c} matrix",
                factors.len()
            )));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (x, f) in row.iter_mut().zip(factors.iter()) {
                *x *= f;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::ScaleColumns(a, factors), rg))
    }

    /// Gathers the listed columns (repeats allowed) into a new matrix.
    pub fn select_columns(&mut self, a: Var, cols: Arc<[usize]>) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = va.dims2()?;
        if cols.is_empty() {
            return Err(Error::Dimension("empty column selection".into()));
        }
        if let Some(bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Dimension(format!(
                "column {bad} out of range for {r}x{c} matrix"
            )));
        }
        let m = cols.len();
        let mut data = Vec::with_capacity(r * m);
        for row in va.data().chunks_exact(c) {
            data.extend(cols.iter().map(|&j| row[j]));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, m, data)?, Op::SelectColumns(a, cols), rg))
    }

    /// Time derivative of a `d × N` matrix whose columns are samples of a
    /// series on the stencil's time grid.
    pub fn column_stencil(&mut self, a: Var, stencil: Arc<SeriesStencil>) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = va.dims2()?;
        if c != stencil.len() {
            return Err(Error::Dimension(format!(
                "stencil built for {} samples applied to {c} columns",
                stencil.len()
            )));
        }
        let mut out = vec![0.0; r * c];
        stencil.apply_columns(va.data(), r, &mut out);
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::ColumnStencil(a, stencil), rg))
    }

    pub fn reduce(&mut self, op: Reduction, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::Domain("reduction over an empty tensor".into()));
        }
        if op == Reduction::FrobeniusSq {
            va.dims2()?;
        }
        let d = va.data();
        let v = match op {
            Reduction::Sum => d.iter().sum(),
            Reduction::Mean => d.iter().sum::<f64>() / d.len() as f64,
            Reduction::L1Norm => d.iter().map(|x| x.abs()).sum(),
            Reduction::SqL2Norm | Reduction::FrobeniusSq => d.iter().map(|x| x * x).sum(),
        };
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(v), Op::Reduce(op, a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, a)
    }

    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::L1Norm, a)
    }

    pub fn sq_l2_norm(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::SqL2Norm, a)
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::FrobeniusSq, a)
    }

    /// Sum of scalar nodes (convenience for assembling losses).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Usage("sum of zero terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    let slot = &mut self.nodes[i].grad;
                    match slot {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2()?;
                    let (_, n) = self.value(*b).dims2()?;
                    if self.rg(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm_nt(&g, self.value(*b).data(), m, n, k, &mut ga);
                        accumulate(&mut adj[a.0], ga);
                    }
                    if self.rg(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm_tn(self.value(*a).data(), &g, m, k, n, &mut gb);
                        accumulate(&mut adj[b.0], gb);
                    }
                }
                Op::Binary(op, a, b) => {
                    let (a, b, op) = (*a, *b, *op);
                    let na = self.value(a).len();
                    let nb = self.value(b).len();
                    for (side, this, other, n_this) in [(0, a, b, na), (1, b, a, nb)] {
                        if !self.rg(this) {
                            continue;
                        }
                        let sign = if op == Binary::Sub && side == 1 { -1.0 } else { 1.0 };
                        let contrib: Vec<f64> = match op {
                            Binary::Add | Binary::Sub => g.iter().map(|x| sign * x).collect(),
                            Binary::Mul => {
                                let o = self.value(other).data();
                                g.iter()
                                    .enumerate()
                                    .map(|(j, x)| x * o[j.min(o.len() - 1)])
                                    .collect()
                            }
                        };
                        let reduced = if n_this == 1 && contrib.len() != 1 {
                            vec![contrib.iter().sum()]
                        } else {
                            contrib
                        };
                        accumulate(&mut adj[this.0], reduced);
                    }
                }
                Op::Unary(op, a) => {
                    let x = self.value(*a).data();
                    let ga: Vec<f64> = match op {
                        Unary::Sin => g.iter().zip(x).map(|(g, x)| g * x.cos()).collect(),
                        Unary::Abs => g.iter().zip(x).map(|(g, x)| g * sign0(*x)).collect(),
                    };
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Scale(a, c) => {
                    let ga = g.iter().map(|x| c * x).collect();
                    accumulate(&mut adj[a.0], ga);
                }
                Op::ScaleColumns(a, f) => {
                    let c = f.len();
                    let mut ga = g;
                    for row in ga.chunks_exact_mut(c) {
                        row.iter_mut().zip(f.iter()).for_each(|(x, s)| *x *= s);
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::SelectColumns(a, cols) => {
                    let (r, c) = self.value(*a).dims2()?;
                    let m = cols.len();
                    let mut ga = vec![0.0; r * c];
                    for (row_g, row_a) in g.chunks_exact(m).zip(ga.chunks_exact_mut(c)) {
                        for (&j, x) in cols.iter().zip(row_g) {
                            row_a[j] += x;
                        }
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::ColumnStencil(a, st) => {
                    let (r, c) = self.value(*a).dims2()?;
                    let mut ga = vec![0.0; r * c];
                    st.apply_columns_adjoint(&g, r, &mut ga);
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Reduce(op, a) => {
                    let s = g[0];
                    let x = self.value(*a).data();
                    let ga: Vec<f64> = match op {
                        Reduction::Sum => vec![s; x.len()],
                        Reduction::Mean => vec![s / x.len() as f64; x.len()],
                        Reduction::L1Norm => x.iter().map(|v| s * sign0(*v)).collect(),
                        Reduction::SqL2Norm | Reduction::FrobeniusSq => {
                            x.iter().map(|v| 2.0 * s * v).collect()
                        }
                    };
                    accumulate(&mut adj[a.0], ga);
                }
            }
        }
        Ok(())
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// `out += a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, x) in row.iter_mut().zip(brow) {
                *o += s * x;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m×n`, `b: k×n`, `out: m×k`.
fn gemm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] += dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

/// `out += aᵀ · g` with `a: m×k`, `g: m×n`, `out: k×n`.
fn gemm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, x) in orow.iter_mut().zip(grow) {
                *o += s * x;
            }
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    // four accumulators so the loop vectorizes without reassociation flags
    let mut acc = [0.0; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += x[4 * c + l] * y[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..x.len() {
        s += x[i] * y[i];
    }
    s
}
