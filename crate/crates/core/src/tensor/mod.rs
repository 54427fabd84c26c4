//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] records every operation in construction order, so the node
//! list is already topologically sorted and [`Graph::backward`] is a single
//! reverse sweep. Parameters live outside the graph as [`Tensor`]s; each
//! forward pass copies them in as leaves and reads their gradients back out.
//!
//! Broadcasting is deliberately narrow: binary elementwise ops accept either
//! equal shapes or a single-element operand on one side.

mod gradcheck;

pub use gradcheck::{gradient_check, gradient_check_many, op_suite, OpCheck};

use crate::error::{Error, Result};

/// Floor applied to `log` inputs and to norms in cosine similarity.
pub const LOG_FLOOR: f64 = 1e-12;

/// Names of every differentiable graph operation. `gradcheck` must cover all of them.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "exp",
    "log",
    "tanh",
    "relu",
    "clamp",
    "matmul",
    "bias_add",
    "reshape",
    "sum",
    "mean",
    "softmax",
    "cosine_similarity",
    "cosine_matrix",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} elements but {} values were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Marks the tensor as a trainable leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    BiasAdd(Var, Var),
    Reshape(Var),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Softmax(Var, usize),
    CosineMatrix(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    visited: usize,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_scalar_shape(shape: &[usize]) -> bool {
    shape.iter().product::<usize>() == 1
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            [x] => Ok(*x),
            _ => Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape(v)
            ))),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: n.requires_grad,
            grad: self.grads[v.0].clone(),
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Number of nodes the last backward sweep visited.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a), self.value(b));
        let (shape, value) = if sa == sb {
            (sa, va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect())
        } else if is_scalar_shape(&sb) {
            let y = vb[0];
            (sa, va.iter().map(|&x| f(x, y)).collect())
        } else if is_scalar_shape(&sa) {
            let x = va[0];
            (sb, vb.iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::Dimension(format!(
                "{name}: incompatible shapes {sa:?} and {sb:?}"
            )));
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = self.node(a);
        let shape = n.shape.clone();
        let value = n.value.iter().map(|&x| f(x)).collect();
        let rg = n.requires_grad;
        self.push(shape, value, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log with the input floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Clamps to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "bias_add: bias {sb:?} does not match rows of {sx:?}"
            )));
        }
        let n = sx[1];
        let shape = sx.to_vec();
        let b = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, out, Op::BiasAdd(x, bias), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} cannot become {shape:?}",
                self.shape(a)
            )));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let value = self.value(a);
        if value.is_empty() {
            return Err(Error::Dimension(format!(
                "cannot reduce empty tensor of shape {shape:?}"
            )));
        }
        let (out_shape, out) = match axis {
            None => {
                let s: f64 = value.iter().sum();
                let n = value.len() as f64;
                (Vec::new(), vec![if mean { s / n } else { s }])
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::Dimension(format!(
                        "axis {ax} out of range for shape {shape:?}"
                    )));
                }
                let (outer, len, inner) = axis_split(&shape, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += value[base + i];
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut s = shape.clone();
                s.remove(ax);
                (s, out)
            }
        };
        let op = if mean {
            Op::Mean(a, axis)
        } else {
            Op::Sum(a, axis)
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, op, rg))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let value = self.value(a);
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; value.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len)
                    .map(|k| value[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (value[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Softmax(a, axis), rg))
    }

    /// Pairwise cosine similarity between the rows of `a` (`m × d`) and `b`
    /// (`n × d`), giving an `m × n` matrix. Norms are floored at [`LOG_FLOOR`].
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] || sa[1] == 0 {
            return Err(Error::Dimension(format!(
                "cosine_matrix: rows of {sa:?} and {sb:?} are not comparable"
            )));
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let na = row_norms(va, d);
        let nb = row_norms(vb, d);
        let mut out = vec![0.0; m * n];
        for j in 0..m {
            let rj = &va[j * d..(j + 1) * d];
            for k in 0..n {
                let rk = &vb[k * d..(k + 1) * d];
                let dot: f64 = rj.iter().zip(rk).map(|(x, y)| x * y).sum();
                out[j * n + k] = dot / (na[j] * nb[k]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::CosineMatrix(a, b), rg))
    }

    /// Cosine similarity of two vectors of equal length, as a scalar node.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sa != sb || sa[0] == 0 {
            return Err(Error::Dimension(format!(
                "cosine_similarity: expected two vectors of equal length, got {sa:?} and {sb:?}"
            )));
        }
        let ra = self.reshape(a, &[1, sa[0]])?;
        let rb = self.reshape(b, &[1, sb[0]])?;
        let c = self.cosine_matrix(ra, rb)?;
        self.reshape(c, &[])
    }

    /// Populates gradients of every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph".to_string(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.visited = 0;
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            self.visited += 1;
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream);
            self.grads[idx] = Some(upstream);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot, &self.nodes);
    }

    /// Accumulates `dy` into a binary-op operand, summing when it was broadcast.
    fn acc_broadcast(&mut self, v: Var, out_len: usize, dy: impl Fn(usize) -> f64) {
        self.acc(v, |g, _| {
            if g.len() == out_len {
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi += dy(i);
                }
            } else {
                g[0] += (0..out_len).map(&dy).sum::<f64>();
            }
        });
    }

    fn propagate(&mut self, idx: usize, up: &[f64]) {
        let op = self.nodes[idx].op.clone();
        let n = up.len();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_broadcast(a, n, |i| up[i]);
                self.acc_broadcast(b, n, |i| up[i]);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(a, n, |i| up[i]);
                self.acc_broadcast(b, n, |i| -up[i]);
            }
            Op::Mul(a, b) => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                self.acc_broadcast(a, n, |i| up[i] * pick(&vb, i));
                self.acc_broadcast(b, n, |i| up[i] * pick(&va, i));
            }
            Op::Scale(a, c) => self.acc(a, |g, _| {
                g.iter_mut().zip(up).for_each(|(gi, u)| *gi += c * u)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(a, |g, _| {
                g.iter_mut().zip(up).for_each(|(gi, u)| *gi += u)
            }),
            Op::Exp(a) => {
                let y = self.nodes[idx].value.clone();
                self.acc(a, |g, _| {
                    for i in 0..g.len() {
                        g[i] += up[i] * y[i];
                    }
                })
            }
            Op::Log(a) => self.acc(a, |g, nodes| {
                let x = &nodes[a.0].value;
                for i in 0..g.len() {
                    if x[i] >= LOG_FLOOR {
                        g[i] += up[i] / x[i];
                    }
                }
            }),
            Op::Tanh(a) => {
                let y = self.nodes[idx].value.clone();
                self.acc(a, |g, _| {
                    for i in 0..g.len() {
                        g[i] += up[i] * (1.0 - y[i] * y[i]);
                    }
                })
            }
            Op::Relu(a) => self.acc(a, |g, nodes| {
                let x = &nodes[a.0].value;
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        g[i] += up[i];
                    }
                }
            }),
            Op::Clamp(a, lo, hi) => self.acc(a, |g, nodes| {
                let x = &nodes[a.0].value;
                for i in 0..g.len() {
                    if x[i] >= lo && x[i] <= hi {
                        g[i] += up[i];
                    }
                }
            }),
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let nn = self.nodes[b.0].shape[1];
                // dA = dC · Bᵀ
                self.acc(a, |g, nodes| {
                    let vb = &nodes[b.0].value;
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..nn {
                                s += up[i * nn + j] * vb[p * nn + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ · dC
                self.acc(b, |g, nodes| {
                    let va = &nodes[a.0].value;
                    for i in 0..m {
                        for p in 0..k {
                            let x = va[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let row = &mut g[p * nn..(p + 1) * nn];
                            for (gj, u) in row.iter_mut().zip(&up[i * nn..(i + 1) * nn]) {
                                *gj += x * u;
                            }
                        }
                    }
                });
            }
            Op::BiasAdd(x, bias) => {
                self.acc(x, |g, _| {
                    g.iter_mut().zip(up).for_each(|(gi, u)| *gi += u)
                });
                self.acc(bias, |g, _| {
                    let cols = g.len();
                    for (i, u) in up.iter().enumerate() {
                        g[i % cols] += u;
                    }
                });
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let is_mean = matches!(op, Op::Mean(..));
                let shape = self.nodes[a.0].shape.clone();
                self.acc(a, |g, _| match axis {
                    None => {
                        let scale = if is_mean { 1.0 / g.len() as f64 } else { 1.0 };
                        g.iter_mut().for_each(|gi| *gi += up[0] * scale);
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(&shape, ax);
                        let scale = if is_mean { 1.0 / len as f64 } else { 1.0 };
                        for o in 0..outer {
                            for k in 0..len {
                                for i in 0..inner {
                                    g[(o * len + k) * inner + i] += up[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let y = self.nodes[idx].value.clone();
                let (outer, len, inner) = axis_split(&self.nodes[idx].shape, axis);
                self.acc(a, |g, _| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| up[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                g[at(k)] += y[at(k)] * (up[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CosineMatrix(a, b) => {
                let c = self.nodes[idx].value.clone();
                let (m, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let (ra, na) = raw_and_floored_norms(&va, d);
                let (rb, nb) = raw_and_floored_norms(&vb, d);
                // ∂C_jk/∂a_j = b_k/(na_j nb_k) − C_jk a_j/na_j²  (second term only above the floor)
                self.acc(a, |g, _| {
                    for j in 0..m {
                        for k in 0..n {
                            let u = up[j * n + k];
                            if u == 0.0 {
                                continue;
                            }
                            let s = 1.0 / (na[j] * nb[k]);
                            let t = if ra[j] > LOG_FLOOR { c[j * n + k] / (na[j] * na[j]) } else { 0.0 };
                            for p in 0..d {
                                g[j * d + p] += u * (vb[k * d + p] * s - t * va[j * d + p]);
                            }
                        }
                    }
                });
                self.acc(b, |g, _| {
                    for j in 0..m {
                        for k in 0..n {
                            let u = up[j * n + k];
                            if u == 0.0 {
                                continue;
                            }
                            let s = 1.0 / (na[j] * nb[k]);
                            let t = if rb[k] > LOG_FLOOR { c[j * n + k] / (nb[k] * nb[k]) } else { 0.0 };
                            for p in 0..d {
                                g[k * d + p] += u * (va[j * d + p] * s - t * vb[k * d + p]);
                            }
                        }
                    }
                });
            }
        }
    }
}

fn row_norms(v: &[f64], d: usize) -> Vec<f64> {
    raw_and_floored_norms(v, d).1
}

fn raw_and_floored_norms(v: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let raw: Vec<f64> = v
        .chunks(d)
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let floored = raw.iter().map(|n| n.max(LOG_FLOOR)).collect();
    (raw, floored)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn tensor_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let p = g.matmul(i2, i2).unwrap();
        assert_eq!(g.value(p), &[1.0, 0.0, 0.0, 1.0]);

        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let e = g.exp(z);
        assert_eq!(g.value(e), &[1.0, 1.0]);

        let zero = g.constant(Tensor::vector(vec![0.0]));
        let l = g.log(zero);
        assert_eq!(g.value(l), &[1e-12f64.ln()]);

        let r = g.constant(Tensor::vector(vec![-1.0, 2.0]));
        let r = g.relu(r);
        assert_eq!(g.value(r), &[0.0, 2.0]);
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.scalar(10.0);
        let left = g.sub(s, v).unwrap();
        assert_eq!(g.value(left), &[9.0, 8.0, 7.0]);
        let w = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.add(v, w), Err(Error::Dimension(_))));
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let m = g.mean(v, None).unwrap();
        assert_eq!(g.item(m).unwrap(), 2.0);

        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s0 = g.sum(a, Some(0)).unwrap();
        assert_eq!(g.value(s0), &[4.0, 6.0]);
        let s1 = g.sum(a, Some(1)).unwrap();
        assert_eq!(g.value(s1), &[3.0, 7.0]);
        assert!(matches!(g.sum(a, Some(2)), Err(Error::Dimension(_))));

        let empty = g.constant(Tensor::zeros(&[0]));
        assert!(g.sum(empty, None).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![3.3, 3.3, 3.3]));
        let s = g.softmax(c, 0).unwrap();
        assert!(close(g.value(s), &[1.0 / 3.0; 3], 1e-15));

        let one = g.constant(Tensor::vector(vec![-7.0]));
        let s = g.softmax(one, 0).unwrap();
        assert_eq!(g.value(s), &[1.0]);

        let big = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = g.softmax(big, 0).unwrap();
        let v = g.value(s);
        assert!(v.iter().all(|x| x.is_finite()));
        // exp(-1000) underflows to 0 in f64; the extended-precision value is ~5e-435.
        assert_eq!(v, &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_of_matrix() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let s = g.softmax(m, 1).unwrap();
        let v = g.value(s);
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!(close(&v[3..], &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![0.3, -2.0, 5.0]));
        let nv = g.neg(v);
        let same = g.cosine_similarity(v, v).unwrap();
        let opp = g.cosine_similarity(v, nv).unwrap();
        assert!((g.item(same).unwrap() - 1.0).abs() < 1e-15);
        assert!((g.item(opp).unwrap() + 1.0).abs() < 1e-15);

        let e1 = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let e2 = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let orth = g.cosine_similarity(e1, e2).unwrap();
        assert_eq!(g.item(orth).unwrap(), 0.0);

        let zero = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let z = g.cosine_similarity(zero, e1).unwrap();
        assert_eq!(g.item(z).unwrap(), 0.0);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::vector(vec![4.0, 5.0, 6.0]).requiring_grad());
        let s = g.sum(w, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.leaf(&Tensor::vector(vec![1.0, 2.0]).requiring_grad());
        let sq = g.mul(w, w).unwrap();
        let m = g.mean(sq, None).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::vector(vec![1.0, 2.0]).requiring_grad());
        let e = g.exp(w);
        assert!(matches!(g.backward(e), Err(Error::Contract(_))));
        let s = g.sum(e, None).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::vector(vec![0.5, -0.5]).requiring_grad());
        let a = g.tanh(w);
        let b = g.mul(a, a).unwrap();
        let c = g.add(b, a).unwrap();
        let s = g.sum(c, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.nodes_visited(), g.len());
        // d/dw [tanh² + tanh] = (2 tanh + 1)(1 − tanh²)
        let expect: Vec<f64> = [0.5f64, -0.5]
            .iter()
            .map(|x| (2.0 * x.tanh() + 1.0) * (1.0 - x.tanh().powi(2)))
            .collect();
        assert!(close(g.grad(w).unwrap(), &expect, 1e-15));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = g.leaf(&Tensor::vector(vec![3.0, 4.0]).requiring_grad());
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p, None).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }
}
