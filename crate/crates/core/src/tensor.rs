//! Dense `f64` arrays and a per-batch reverse-mode differentiation tape.
//!
//! Every value produced during a forward pass is appended to a [`Tape`] as a
//! node. Nodes are only ever appended, so their index order is already a
//! topological order: walking the tape from the end visits each node after
//! all of its consumers. The tape is rebuilt for every batch.
//!
//! Vectors are represented as `1 x n` matrices throughout.

use rand::Rng;

use crate::error::{Error, Result};

/// Inputs to `exp` are clamped to `[-EXP_CLAMP, EXP_CLAMP]`.
pub const EXP_CLAMP: f64 = 80.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape must have positive dimensions, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// A `1 x n` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "row vector must be non-empty");
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a 2-D tensor (1 for 1-D tensors).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn as_matrix_dims(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Some((1, *n)),
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// Plain matrix product, outside of any tape.
pub fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_matrix_dims().ok_or_else(|| shape_err("matmul", a, b))?;
    let (k2, n) = b.as_matrix_dims().ok_or_else(|| shape_err("matmul", a, b))?;
    if k != k2 {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

fn transpose_values(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// Pointwise operations recorded by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Neg,
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    SumAll(Var),
    SumRows(Var),
    GatherRows(Var, Vec<usize>),
    StackRows(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    MaskMul(Var, Vec<f64>),
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` is not tracked.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape for an untracked node.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Ordered record of executed operations; replayed backwards by [`Tape::backward`].
#[derive(Debug, Default)]
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A trainable leaf: receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Dispatches a pointwise op. Unary ops ignore `rhs`; binary ops require it.
    pub fn elementwise(&mut self, op: Elementwise, lhs: Var, rhs: Option<Var>) -> Result<Var> {
        let need_rhs = || {
            rhs.ok_or_else(|| Error::Contract(format!("{op:?} needs two operands")))
        };
        match op {
            Elementwise::Add => self.add(lhs, need_rhs()?),
            Elementwise::Sub => self.sub(lhs, need_rhs()?),
            Elementwise::Mul => self.mul(lhs, need_rhs()?),
            Elementwise::Neg => Ok(self.neg(lhs)),
            Elementwise::Tanh => Ok(self.tanh(lhs)),
            Elementwise::Sigmoid => Ok(self.sigmoid(lhs)),
            Elementwise::Exp => Ok(self.exp(lhs)),
            Elementwise::Log => self.log(lhs),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        if self.value(b).data.contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let value = self.zip_with(a, b, |x, y| x / y);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Div(a, b), tracked))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| -x);
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Neg(a), tracked)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.map(a, |x| x * c);
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Scale(a, c), tracked)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.map(a, |x| x + c);
        let tracked = self.tracked(&[a]);
        self.push(value, Op::AddScalar(a), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::tanh);
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Tanh(a), tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map(a, sigmoid);
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Sigmoid(a), tracked)
    }

    /// `exp` with inputs clamped to `±EXP_CLAMP`; clamped entries get zero gradient.
    pub fn exp(&mut self, a: Var) -> Var {
        let clamped = self
            .value(a)
            .data
            .iter()
            .filter(|x| x.abs() > EXP_CLAMP)
            .count();
        if clamped > 0 {
            log::warn!("exp: clamped {clamped} input(s) to ±{EXP_CLAMP}");
        }
        let value = self.map(a, |x| x.clamp(-EXP_CLAMP, EXP_CLAMP).exp());
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Exp(a), tracked)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = self.map(a, f64::ln);
        let tracked = self.tracked(&[a]);
        Ok(self.push(value, Op::Log(a), tracked))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = self.map(a, f64::sqrt);
        let tracked = self.tracked(&[a]);
        Ok(self.push(value, Op::Sqrt(a), tracked))
    }

    /// `max(x, 0)`.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.max(0.0));
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Relu(a), tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_values(self.value(a), self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = transpose_values(self.value(a));
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Transpose(a), tracked)
    }

    /// `m x n` matrix plus a `1 x n` row added to every row.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_row_bias", ta, tb));
        }
        let n = ta.cols();
        let mut value = ta.clone();
        for (i, x) in value.data.iter_mut().enumerate() {
            *x += tb.data[i % n];
        }
        value.shape = vec![ta.rows(), n];
        let tracked = self.tracked(&[a, bias]);
        Ok(self.push(value, Op::AddRowBias(a, bias), tracked))
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(total), Op::SumAll(a), tracked)
    }

    /// Per-row sums of an `m x n` matrix, as `m x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let data = (0..m).map(|i| ta.data[i * n..(i + 1) * n].iter().sum()).collect();
        let tracked = self.tracked(&[a]);
        self.push(
            Tensor {
                shape: vec![m, 1],
                data,
            },
            Op::SumRows(a),
            tracked,
        )
    }

    /// Selects rows by index (repeats allowed). Gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if rows.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Contract(format!(
                    "row index {r} out of range for {m} rows"
                )));
            }
            data.extend_from_slice(&ta.data[r * n..(r + 1) * n]);
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![rows.len(), n],
                data,
            },
            Op::GatherRows(a, rows.to_vec()),
            tracked,
        ))
    }

    /// Concatenates `r_i x n` matrices vertically.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack_rows with no inputs".into()))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(shape_err("stack_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let tracked = self.tracked(parts);
        Ok(self.push(
            Tensor {
                shape: vec![rows, n],
                data,
            },
            Op::StackRows(parts.to_vec()),
            tracked,
        ))
    }

    /// Columns `start..start + len` of an `m x n` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if len == 0 || start + len > n {
            return Err(Error::Contract(format!(
                "column slice {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&ta.data[i * n + start..i * n + start + len]);
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![m, len],
                data,
            },
            Op::SliceCols(a, start),
            tracked,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: ta.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), ta.data.clone())?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(value, Op::Reshape(a), tracked))
    }

    /// Multiplies by a fixed mask that is not differentiated.
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(Error::Shape {
                op: "mask_mul",
                left: ta.shape.clone(),
                right: vec![mask.len()],
            });
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        let tracked = self.tracked(&[a]);
        Ok(self.push(value, Op::MaskMul(a, mask), tracked))
    }

    /// Same values as `a`; no gradient ever flows back into `a` through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Classic dropout. Train mode zeroes each entry with probability `p`
    /// and keeps the rest unscaled; test mode scales everything by `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        match mode {
            Mode::Train => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Param(format!("dropout probability {p} outside [0, 1]")));
                }
                if p == 0.0 {
                    return Ok(a);
                }
                let n = self.value(a).len();
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 })
                    .collect();
                self.mask_mul(a, mask)
            }
            Mode::Test => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Param(format!(
                        "test-mode dropout probability {p} outside [0, 1)"
                    )));
                }
                if p == 0.0 {
                    return Ok(a);
                }
                Ok(self.scale(a, 1.0 - p))
            }
        }
    }

    /// Replays the tape from `loss` back to the leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(Tensor::filled(&self.value(loss).shape, 1.0));
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.tracked && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(&node.value.shape));
            } else if !node.tracked {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.data.clone());
                self.accumulate(grads, *b, || g.data.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || g.data.clone());
                self.accumulate(grads, *b, || g.data.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, || zip(&g.data, &vb.data, |g, y| g * y));
                self.accumulate(grads, *b, || zip(&g.data, &va.data, |g, x| g * x));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, || zip(&g.data, &vb.data, |g, y| g / y));
                self.accumulate(grads, *b, || {
                    g.data
                        .iter()
                        .zip(&va.data)
                        .zip(&vb.data)
                        .map(|((g, x), y)| -g * x / (y * y))
                        .collect()
                });
            }
            Op::Neg(a) => self.accumulate(grads, *a, || g.data.iter().map(|x| -x).collect()),
            Op::Scale(a, c) => self.accumulate(grads, *a, || g.data.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) => self.accumulate(grads, *a, || g.data.clone()),
            Op::Tanh(a) => {
                self.accumulate(grads, *a, || zip(&g.data, &out.data, |g, y| g * (1.0 - y * y)))
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, || zip(&g.data, &out.data, |g, y| g * y * (1.0 - y)))
            }
            Op::Exp(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, || {
                    g.data
                        .iter()
                        .zip(&out.data)
                        .zip(&va.data)
                        .map(|((g, y), x)| if x.abs() > EXP_CLAMP { 0.0 } else { g * y })
                        .collect()
                })
            }
            Op::Log(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, || zip(&g.data, &va.data, |g, x| g / x))
            }
            Op::Sqrt(a) => {
                self.accumulate(grads, *a, || zip(&g.data, &out.data, |g, y| 0.5 * g / y))
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, || {
                    zip(&g.data, &va.data, |g, x| if x > 0.0 { g } else { 0.0 })
                })
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                self.accumulate(grads, *a, || {
                    matmul_values(g, &transpose_values(vb)).unwrap().data
                });
                self.accumulate(grads, *b, || {
                    matmul_values(&transpose_values(va), g).unwrap().data
                });
            }
            Op::Transpose(a) => self.accumulate(grads, *a, || transpose_values(g).data),
            Op::AddRowBias(a, bias) => {
                self.accumulate(grads, *a, || g.data.clone());
                self.accumulate(grads, *bias, || {
                    let n = g.cols();
                    let mut acc = vec![0.0; n];
                    for (i, x) in g.data.iter().enumerate() {
                        acc[i % n] += x;
                    }
                    acc
                });
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, || vec![g.data[0]; n])
            }
            Op::SumRows(a) => {
                let n = self.value(*a).cols();
                self.accumulate(grads, *a, || {
                    g.data.iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect()
                })
            }
            Op::GatherRows(a, rows) => {
                let src = self.value(*a);
                let n = src.cols();
                self.accumulate(grads, *a, || {
                    let mut acc = vec![0.0; src.len()];
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..n {
                            acc[r * n + c] += g.data[k * n + c];
                        }
                    }
                    acc
                });
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, || g.data[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (m, n) = (src.rows(), src.cols());
                let len = g.cols();
                self.accumulate(grads, *a, || {
                    let mut acc = vec![0.0; m * n];
                    for i in 0..m {
                        acc[i * n + start..i * n + start + len]
                            .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                    }
                    acc
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, || g.data.clone()),
            Op::MaskMul(a, mask) => {
                self.accumulate(grads, *a, || zip(&g.data, mask, |g, m| g * m))
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, contribution: impl FnOnce() -> Vec<f64>) {
        let node = &self.nodes[target.0];
        if !node.tracked {
            return;
        }
        let delta = contribution();
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.data.iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: delta,
                })
            }
        }
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
