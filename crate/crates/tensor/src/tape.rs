use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    LeakyRelu(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    Pick(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Conv1d { input: Var, kernel: Var, bias: Var, width: usize },
    MaxPoolTime(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records executed ops so that gradients can be replayed in reverse.
///
/// A tape is single-owner; independent tapes can run on different threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.sizes[v.0]],
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Parameter gradients in the order parameters were first used.
    pub fn params(&self) -> impl Iterator<Item = (&str, Vec<f64>)> + '_ {
        self.params.iter().map(move |(n, v)| (n.as_str(), self.wrt(*v)))
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        0 => Ok((1, 1)),
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        _ => Err(TensorError::Shape {
            op,
            detail: format!("rank {} not supported", shape.len()),
        }),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

fn logsumexp(src: &[f64]) -> f64 {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + src.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
    f(buf);
}

// c[m,n] += a[m,k] * b[k,n]
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
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

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf value.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> Result<Var> {
        let shape = vec![data.len()];
        self.push("leaf", shape, data, Op::Leaf, false)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(TensorError::Shape {
                op: "constant_matrix",
                detail: format!("{}x{} vs {} values", rows, cols, data.len()),
            });
        }
        self.push("leaf", vec![rows, cols], data, Op::Leaf, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Var> {
        self.push("leaf", shape.to_vec(), vec![0.0; numel(shape)], Op::Leaf, false)
    }

    /// Records the named parameter from `store` once per tape and returns its handle.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.param_lookup.get(name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.leaf(t, t.requires_grad())?;
        self.param_lookup.insert(name.to_string(), v);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    /// Applies an op by name. Ops that take non-tensor arguments (slicing,
    /// gathering, scaling) are only reachable through their typed methods.
    pub fn forward_op(&mut self, name: &str, inputs: &[Var]) -> Result<Var> {
        let unary = |op: &'static str, inputs: &[Var]| -> Result<Var> {
            if inputs.len() != 1 {
                return Err(TensorError::Arity { op, expected: 1, got: inputs.len() });
            }
            Ok(inputs[0])
        };
        let binary = |op: &'static str, inputs: &[Var]| -> Result<(Var, Var)> {
            if inputs.len() != 2 {
                return Err(TensorError::Arity { op, expected: 2, got: inputs.len() });
            }
            Ok((inputs[0], inputs[1]))
        };
        match name {
            "matmul" => {
                let (a, b) = binary("matmul", inputs)?;
                self.matmul(a, b)
            }
            "add" => {
                let (a, b) = binary("add", inputs)?;
                self.add(a, b)
            }
            "sub" => {
                let (a, b) = binary("sub", inputs)?;
                self.sub(a, b)
            }
            "mul" => {
                let (a, b) = binary("mul", inputs)?;
                self.mul(a, b)
            }
            "add_row_bias" => {
                let (a, b) = binary("add_row_bias", inputs)?;
                self.add_row_bias(a, b)
            }
            "mul_scalar" => {
                let (a, b) = binary("mul_scalar", inputs)?;
                self.mul_scalar(a, b)
            }
            "sigmoid" => {
                let x = unary("sigmoid", inputs)?;
                self.sigmoid(x)
            }
            "tanh" => {
                let x = unary("tanh", inputs)?;
                self.tanh(x)
            }
            "exp" => {
                let x = unary("exp", inputs)?;
                self.exp(x)
            }
            "log" => {
                let x = unary("log", inputs)?;
                self.log(x)
            }
            "log_sigmoid" => {
                let x = unary("log_sigmoid", inputs)?;
                self.log_sigmoid(x)
            }
            "softmax" => {
                let x = unary("softmax", inputs)?;
                self.softmax(x)
            }
            "log_softmax" => {
                let x = unary("log_softmax", inputs)?;
                self.log_softmax(x)
            }
            "logsumexp" => {
                let x = unary("logsumexp", inputs)?;
                self.logsumexp(x)
            }
            "sum" => {
                let x = unary("sum", inputs)?;
                self.sum(x)
            }
            "transpose" => {
                let x = unary("transpose", inputs)?;
                self.transpose(x)
            }
            "max_pool_time" => {
                let x = unary("max_pool_time", inputs)?;
                self.max_pool_time(x)
            }
            "concat" => self.concat(inputs),
            "stack" => self.stack(inputs),
            "conv1d" => {
                if inputs.len() != 3 {
                    return Err(TensorError::Arity { op: "conv1d", expected: 3, got: inputs.len() });
                }
                self.conv1d(inputs[0], inputs[1], inputs[2])
            }
            other => Err(TensorError::UnknownOp(other.to_string())),
        }
    }

    /// Matrix product. A 1-D left operand acts as a row vector, a 1-D right
    /// operand as a column vector; the corresponding output axis is dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.is_empty() || sb.is_empty() || sa.len() > 2 || sb.len() > 2 {
            return Err(TensorError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k) = if sa.len() == 1 { (1, sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if sb.len() == 1 { (sb[0], 1) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        let mut shape = Vec::new();
        if sa.len() == 2 {
            shape.push(m);
        }
        if sb.len() == 2 {
            shape.push(n);
        }
        let rg = self.rg(&[a, b]);
        self.push("matmul", shape, out, Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a, b]);
        self.push(name, shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds vector `bias` onto every row of `m` (or onto `m` itself when 1-D).
    pub fn add_row_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let sm = self.nodes[m.0].shape.clone();
        let sb = self.nodes[bias.0].shape.clone();
        let cols = *sm.last().unwrap_or(&0);
        if sm.is_empty() || sm.len() > 2 || sb.len() != 1 || sb[0] != cols {
            return Err(TensorError::Shape {
                op: "add_row_bias",
                detail: format!("{:?} + {:?}", sm, sb),
            });
        }
        let bv = &self.nodes[bias.0].value;
        let out: Vec<f64> = self.nodes[m.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % cols])
            .collect();
        let rg = self.rg(&[m, bias]);
        self.push("add_row_bias", sm, out, Op::AddRowBias(m, bias), rg)
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(TensorError::Shape {
                op: "mul_scalar",
                detail: format!("scalar operand has shape {:?}", self.nodes[s.0].shape),
            });
        }
        let sv = self.nodes[s.0].value[0];
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v * sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x, s]);
        self.push("mul_scalar", shape, out, Op::MulScalar(x, s), rg)
    }

    fn map_op(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| f(*v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x]);
        self.push(name, shape, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_op("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_op("add_const", x, Op::AddConst(x), |v| v + c)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_const(neg, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_op("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map_op("tanh", x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map_op("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map_op("log", x, Op::Log(x), f64::ln)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_op("log_sigmoid", x, Op::LogSigmoid(x), log_sigmoid)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.map_op("leaky_relu", x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    fn rowwise(&mut self, name: &'static str, x: Var, op: Op, log: bool) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let (rows, cols) = as_matrix(name, &shape)?;
        if cols == 0 {
            return Err(TensorError::Shape { op: name, detail: "empty axis".into() });
        }
        let src = &self.nodes[x.0].value;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let s = &src[r * cols..(r + 1) * cols];
            let d = &mut out[r * cols..(r + 1) * cols];
            if log {
                let lse = logsumexp(s);
                for (dv, sv) in d.iter_mut().zip(s) {
                    *dv = sv - lse;
                }
            } else {
                softmax_into(s, d);
            }
        }
        let rg = self.rg(&[x]);
        self.push(name, shape, out, op, rg)
    }

    /// Softmax over the last axis (each row of a matrix independently).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.rowwise("softmax", x, Op::Softmax(x), false)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.rowwise("log_softmax", x, Op::LogSoftmax(x), true)
    }

    /// `log Σ exp(x)` over all elements of a vector.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.is_empty() {
            return Err(TensorError::Shape { op: "logsumexp", detail: "empty input".into() });
        }
        let v = logsumexp(&self.nodes[x.0].value);
        let rg = self.rg(&[x]);
        self.push("logsumexp", vec![], vec![v], Op::LogSumExp(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", vec![], vec![v], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Concatenates along the last axis. Scalars count as length-1 vectors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::Arity { op: "concat", expected: 1, got: 0 });
        }
        let rank = self.nodes[xs[0].0].shape.len().max(1);
        let rows = if rank == 2 { self.nodes[xs[0].0].shape[0] } else { 1 };
        let mut widths = Vec::with_capacity(xs.len());
        for x in xs {
            let s = &self.nodes[x.0].shape;
            let ok = match rank {
                1 => s.len() <= 1,
                _ => s.len() == 2 && s[0] == rows,
            };
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    detail: format!("incompatible part {:?}", s),
                });
            }
            widths.push(self.nodes[x.0].value.len() / rows);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (x, w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[x.0].value[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 2 { vec![rows, total] } else { vec![total] };
        let rg = self.rg(xs);
        self.push("concat", shape, out, Op::Concat(xs.to_vec()), rg)
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::Arity { op: "stack", expected: 1, got: 0 });
        }
        let n = self.nodes[xs[0].0].value.len();
        let mut out = Vec::with_capacity(n * xs.len());
        for x in xs {
            let node = &self.nodes[x.0];
            if node.shape.len() > 1 || node.value.len() != n {
                return Err(TensorError::Shape {
                    op: "stack",
                    detail: format!("part {:?} vs length {}", node.shape, n),
                });
            }
            out.extend_from_slice(&node.value);
        }
        let rg = self.rg(xs);
        self.push("stack", vec![xs.len(), n], out, Op::Stack(xs.to_vec()), rg)
    }

    /// Elements `start..end` of a vector, or rows `start..end` of a matrix.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let (len0, inner) = match shape.len() {
            1 => (shape[0], 1),
            2 => (shape[0], shape[1]),
            _ => {
                return Err(TensorError::Shape { op: "slice", detail: format!("{:?}", shape) });
            }
        };
        if start > end || end > len0 {
            return Err(TensorError::Index { op: "slice", index: end, len: len0 });
        }
        let out = self.nodes[x.0].value[start * inner..end * inner].to_vec();
        let new_shape = if shape.len() == 1 { vec![end - start] } else { vec![end - start, inner] };
        let rg = self.rg(&[x]);
        self.push("slice", new_shape, out, Op::Slice(x, start), rg)
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.slice(x, i, i + 1)?;
        let cols = self.nodes[x.0].shape[1];
        self.reshape(s, &[cols])
    }

    /// Selects elements of a vector or rows of a matrix (embedding lookup).
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let (len0, inner) = match shape.len() {
            1 => (shape[0], 1),
            2 => (shape[0], shape[1]),
            _ => {
                return Err(TensorError::Shape { op: "gather", detail: format!("{:?}", shape) });
            }
        };
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= len0 {
                return Err(TensorError::Index { op: "gather", index: i, len: len0 });
            }
            out.extend_from_slice(&self.nodes[x.0].value[i * inner..(i + 1) * inner]);
        }
        let new_shape = if shape.len() == 1 { vec![idx.len()] } else { vec![idx.len(), inner] };
        let rg = self.rg(&[x]);
        self.push("gather", new_shape, out, Op::Gather(x, idx.to_vec()), rg)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather(table, ids)
    }

    /// `out[idx[i]] += x[i]` into zeros of length `len`. For a matrix input
    /// whole rows are accumulated and the output is `[len, cols]`.
    pub fn scatter_add(&mut self, x: Var, idx: &[usize], len: usize) -> Result<Var> {
        let xs = &self.nodes[x.0];
        let (rows, inner) = match xs.shape.len() {
            1 => (xs.shape[0], 1),
            2 => (xs.shape[0], xs.shape[1]),
            _ => (usize::MAX, 0),
        };
        if rows != idx.len() {
            return Err(TensorError::Shape {
                op: "scatter_add",
                detail: format!("{:?} with {} indices", xs.shape, idx.len()),
            });
        }
        let mut out = vec![0.0; len * inner];
        for (r, &i) in idx.iter().enumerate() {
            if i >= len {
                return Err(TensorError::Index { op: "scatter_add", index: i, len });
            }
            for c in 0..inner {
                out[i * inner + c] += xs.value[r * inner + c];
            }
        }
        let shape = if xs.shape.len() == 2 { vec![len, inner] } else { vec![len] };
        let rg = self.rg(&[x]);
        self.push("scatter_add", shape, out, Op::ScatterAdd(x, idx.to_vec()), rg)
    }

    /// Single element (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let len = self.nodes[x.0].value.len();
        if i >= len {
            return Err(TensorError::Index { op: "pick", index: i, len });
        }
        let v = self.nodes[x.0].value[i];
        let rg = self.rg(&[x]);
        self.push("pick", vec![], vec![v], Op::Pick(x, i), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::Shape { op: "transpose", detail: format!("{:?}", shape) });
        }
        let (r, c) = (shape[0], shape[1]);
        let src = &self.nodes[x.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push("transpose", vec![c, r], out, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[x.0].value.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.nodes[x.0].shape, shape),
            });
        }
        let out = self.nodes[x.0].value.clone();
        let rg = self.rg(&[x]);
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x), rg)
    }

    /// 1-D convolution over time. `input` is `[len, channels]`, `kernel` is
    /// `[width * channels, out]`, `bias` is `[out]`; the kernel width is
    /// inferred from the kernel's row count. Output is `[len - width + 1, out]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernel.0].shape.clone();
        let sb = self.nodes[bias.0].shape.clone();
        let shape_err = || TensorError::Shape {
            op: "conv1d",
            detail: format!("input {:?} kernel {:?} bias {:?}", si, sk, sb),
        };
        if si.len() != 2 || sk.len() != 2 || sb.len() != 1 || si[1] == 0 || sk[0] % si[1] != 0 || sb[0] != sk[1] {
            return Err(shape_err());
        }
        let (len, ch) = (si[0], si[1]);
        let width = sk[0] / ch;
        let out_ch = sk[1];
        if width == 0 || len < width {
            return Err(shape_err());
        }
        let steps = len - width + 1;
        let x = &self.nodes[input.0].value;
        let k = &self.nodes[kernel.0].value;
        let b = &self.nodes[bias.0].value;
        let mut out = Vec::with_capacity(steps * out_ch);
        for t in 0..steps {
            let mut row = b.clone();
            let window = &x[t * ch..(t + width) * ch];
            gemm(window, k, &mut row, 1, width * ch, out_ch);
            out.extend_from_slice(&row);
        }
        let rg = self.rg(&[input, kernel, bias]);
        self.push("conv1d", vec![steps, out_ch], out, Op::Conv1d { input, kernel, bias, width }, rg)
    }

    /// Column-wise max over the rows of `[len, channels]`; ties go to the lowest row.
    pub fn max_pool_time(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(TensorError::Shape { op: "max_pool_time", detail: format!("{:?}", shape) });
        }
        let (len, ch) = (shape[0], shape[1]);
        let src = &self.nodes[x.0].value;
        let mut out = src[..ch].to_vec();
        let mut arg = vec![0usize; ch];
        for t in 1..len {
            for c in 0..ch {
                let v = src[t * ch + c];
                if v > out[c] {
                    out[c] = v;
                    arg[c] = t;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push("max_pool_time", vec![ch], out, Op::MaxPoolTime(x, arg), rg)
    }

    /// Reverse-mode pass from a scalar loss. The tape can be replayed only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads.resize(nodes.len(), None);
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            backprop(nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            sizes: nodes.iter().map(|n| n.value.len()).collect(),
            grads,
            params: self.params.clone(),
        })
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let sa = &nodes[a.0].shape;
            let sb = &nodes[b.0].shape;
            let (m, k) = if sa.len() == 1 { (1, sa[0]) } else { (sa[0], sa[1]) };
            let n = if sb.len() == 1 { 1 } else { sb[1] };
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            add_into(grads, nodes, *a, |da| {
                // da[i,p] += Σ_j g[i,j] b[p,j]
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        da[i * k + p] += s;
                    }
                }
            });
            add_into(grads, nodes, *b, |db| {
                // db[p,j] += Σ_i a[i,p] g[i,j]
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = av[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let drow = &mut db[p * n..(p + 1) * n];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
            });
        }
        Op::Add(a, b) => {
            add_into(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            add_into(grads, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            add_into(grads, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        Op::Mul(a, b) => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            add_into(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                }
            });
            add_into(grads, nodes, *b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                }
            });
        }
        Op::AddRowBias(m, bias) => {
            add_into(grads, nodes, *m, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            add_into(grads, nodes, *bias, |d| {
                let cols = d.len();
                for (i, gv) in g.iter().enumerate() {
                    d[i % cols] += gv;
                }
            });
        }
        Op::MulScalar(x, s) => {
            let sv = nodes[s.0].value[0];
            let xv = &nodes[x.0].value;
            add_into(grads, nodes, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * sv));
            add_into(grads, nodes, *s, |d| {
                d[0] += g.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>();
            });
        }
        Op::Scale(x, c) => {
            add_into(grads, nodes, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c));
        }
        Op::AddConst(x) | Op::Reshape(x) => {
            add_into(grads, nodes, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
        }
        Op::Sigmoid(x) => {
            add_into(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Tanh(x) => {
            add_into(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Exp(x) => {
            add_into(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i];
                }
            });
        }
        Op::Log(x) => {
            let xv = &nodes[x.0].value;
            add_into(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] / xv[i];
                }
            });
        }
        Op::LogSigmoid(x) => {
            let xv = &nodes[x.0].value;
            add_into(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * sigmoid(-xv[i]);
                }
            });
        }
        Op::LeakyRelu(x, slope) => {
            let xv = &nodes[x.0].value;
            add_into(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] += if xv[i] > 0.0 { g[i] } else { g[i] * slope };
                }
            });
        }
        Op::Softmax(x) => {
            let cols = *node.shape.last().unwrap_or(&1);
            add_into(grads, nodes, *x, |d| {
                for r in 0..y.len() / cols {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] += ys[c] * (gs[c] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            let cols = *node.shape.last().unwrap_or(&1);
            add_into(grads, nodes, *x, |d| {
                for r in 0..y.len() / cols {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let gsum: f64 = gs.iter().sum();
                    for c in 0..cols {
                        d[r * cols + c] += gs[c] - ys[c].exp() * gsum;
                    }
                }
            });
        }
        Op::LogSumExp(x) => {
            let xv = &nodes[x.0].value;
            let lse = y[0];
            add_into(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[0] * (xv[i] - lse).exp();
                }
            });
        }
        Op::Sum(x) => {
            add_into(grads, nodes, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Concat(xs) => {
            let rows = if node.shape.len() == 2 { node.shape[0] } else { 1 };
            let total = y.len() / rows;
            let mut offset = 0;
            for x in xs {
                let w = nodes[x.0].value.len() / rows;
                add_into(grads, nodes, *x, |d| {
                    for r in 0..rows {
                        for c in 0..w {
                            d[r * w + c] += g[r * total + offset + c];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::Stack(xs) => {
            let n = node.shape[1];
            for (r, x) in xs.iter().enumerate() {
                add_into(grads, nodes, *x, |d| {
                    for c in 0..n {
                        d[c] += g[r * n + c];
                    }
                });
            }
        }
        Op::Slice(x, start) => {
            let inner = if nodes[x.0].shape.len() == 2 { nodes[x.0].shape[1] } else { 1 };
            let off = start * inner;
            add_into(grads, nodes, *x, |d| {
                for (i, gv) in g.iter().enumerate() {
                    d[off + i] += gv;
                }
            });
        }
        Op::Gather(x, idx) => {
            let inner = if nodes[x.0].shape.len() == 2 { nodes[x.0].shape[1] } else { 1 };
            add_into(grads, nodes, *x, |d| {
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..inner {
                        d[i * inner + c] += g[r * inner + c];
                    }
                }
            });
        }
        Op::ScatterAdd(x, idx) => {
            let inner = if nodes[x.0].shape.len() == 2 { nodes[x.0].shape[1] } else { 1 };
            add_into(grads, nodes, *x, |d| {
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..inner {
                        d[r * inner + c] += g[i * inner + c];
                    }
                }
            });
        }
        Op::Pick(x, i) => {
            add_into(grads, nodes, *x, |d| d[*i] += g[0]);
        }
        Op::Transpose(x) => {
            let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            add_into(grads, nodes, *x, |d| {
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Conv1d { input, kernel, bias, width } => {
            let ch = nodes[input.0].shape[1];
            let out_ch = node.shape[1];
            let steps = node.shape[0];
            let xv = &nodes[input.0].value;
            let kv = &nodes[kernel.0].value;
            let span = width * ch;
            add_into(grads, nodes, *input, |d| {
                for t in 0..steps {
                    let gt = &g[t * out_ch..(t + 1) * out_ch];
                    for p in 0..span {
                        let krow = &kv[p * out_ch..(p + 1) * out_ch];
                        d[t * ch + p] += gt.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            });
            add_into(grads, nodes, *kernel, |d| {
                for t in 0..steps {
                    let gt = &g[t * out_ch..(t + 1) * out_ch];
                    for p in 0..span {
                        let xvp = xv[t * ch + p];
                        let drow = &mut d[p * out_ch..(p + 1) * out_ch];
                        for (dv, gv) in drow.iter_mut().zip(gt) {
                            *dv += xvp * gv;
                        }
                    }
                }
            });
            add_into(grads, nodes, *bias, |d| {
                for t in 0..steps {
                    for c in 0..out_ch {
                        d[c] += g[t * out_ch + c];
                    }
                }
            });
        }
        Op::MaxPoolTime(x, arg) => {
            let ch = arg.len();
            add_into(grads, nodes, *x, |d| {
                for (c, &t) in arg.iter().enumerate() {
                    d[t * ch + c] += g[c];
                }
            });
        }
    }
}
