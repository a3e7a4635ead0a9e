use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::array::{gemm_nn, gemm_nt, gemm_tn, DenseArray};
use super::TensorError;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-adds executed by matrix products on this thread since the last reset.
pub fn mac_count() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset_mac_count() {
    MACS.with(|c| c.set(0));
}

fn record_macs(n: usize) {
    MACS.with(|c| c.set(c.get() + n as u64));
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    Silu,
    Sigmoid,
    Exp,
    Log,
}

impl Unary {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "relu" => Self::Relu,
            "tanh" => Self::Tanh,
            "silu" => Self::Silu,
            "sigmoid" => Self::Sigmoid,
            "exp" => Self::Exp,
            "log" => Self::Log,
            _ => return None,
        })
    }

    fn forward(self, x: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::Tanh => x.tanh(),
            Self::Silu => x * sigmoid(x),
            Self::Sigmoid => sigmoid(x),
            Self::Exp => x.exp(),
            Self::Log => x.ln(),
        }
    }

    /// Local derivative from the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => 1.0 - y * y,
            Self::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Self::Sigmoid => y * (1.0 - y),
            Self::Exp => y,
            Self::Log => 1.0 / x,
        }
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

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(usize, Unary),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat { parts: Vec<usize>, axis: usize },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    Transpose(usize),
    Sum(usize),
    SumCols(usize),
    GatherRows { table: usize, ids: Vec<usize> },
    Reshape(usize),
    NormalizeRows { x: usize, norms: Vec<f64> },
    Cosine { a: usize, b: usize, na: f64, nb: f64 },
}

struct Node {
    value: DenseArray,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations; replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and reverse iteration visits each node once.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    backward_done: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()), backward_done: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that accumulates gradient.
    pub fn param(&self, value: DenseArray) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: DenseArray) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: DenseArray, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: DenseArray, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Clears gradients so another backward pass may run on this tape.
    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<(), TensorError> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::Backward("loss lives on a different tape".into()));
        }
        if self.backward_done.get() {
            return Err(TensorError::Backward("gradients already computed; reset before another backward".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(TensorError::Backward(format!("loss must be scalar, got shape {:?}", root.value.shape())));
        }
        if !root.requires_grad {
            return Err(TensorError::Backward("loss is detached from every trainable input".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

/// Pushes the upstream gradient `g` of node `id` into its parents.
fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let wants = |p: usize| nodes[p].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = nodes[a].value.dims2().unwrap();
            let n = nodes[b].value.dims2().unwrap().1;
            if wants(a) {
                let ga = accumulate(grads, a, m * k);
                gemm_nt(g, nodes[b].value.values(), ga, m, n, k);
            }
            if wants(b) {
                let gb = accumulate(grads, b, k * n);
                gemm_tn(nodes[a].value.values(), g, gb, m, k, n);
            }
        }
        &Op::MatMulNt(a, b) => {
            // out[m,n] = a[m,k] b[n,k]^T
            let (m, k) = nodes[a].value.dims2().unwrap();
            let n = nodes[b].value.dims2().unwrap().0;
            if wants(a) {
                let ga = accumulate(grads, a, m * k);
                gemm_nn(g, nodes[b].value.values(), ga, m, n, k);
            }
            if wants(b) {
                let gb = accumulate(grads, b, n * k);
                gemm_tn(g, nodes[a].value.values(), gb, m, n, k);
            }
        }
        &Op::Add(a, b) => {
            for p in [a, b] {
                if wants(p) {
                    add_into(accumulate(grads, p, g.len()), g);
                }
            }
        }
        &Op::Sub(a, b) => {
            if wants(a) {
                add_into(accumulate(grads, a, g.len()), g);
            }
            if wants(b) {
                let gb = accumulate(grads, b, g.len());
                gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v);
            }
        }
        &Op::Mul(a, b) => {
            if wants(a) {
                let bv = nodes[b].value.values();
                let ga = accumulate(grads, a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if wants(b) {
                let av = nodes[a].value.values();
                let gb = accumulate(grads, b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        &Op::AddRow(a, row) => {
            if wants(a) {
                add_into(accumulate(grads, a, g.len()), g);
            }
            if wants(row) {
                let n = nodes[row].value.len();
                let gr = accumulate(grads, row, n);
                for chunk in g.chunks(n) {
                    add_into(gr, chunk);
                }
            }
        }
        &Op::Scale(a, c) => {
            if wants(a) {
                let ga = accumulate(grads, a, g.len());
                ga.iter_mut().zip(g).for_each(|(o, &v)| *o += c * v);
            }
        }
        &Op::AddScalar(a) => {
            if wants(a) {
                add_into(accumulate(grads, a, g.len()), g);
            }
        }
        &Op::Unary(a, kind) => {
            if wants(a) {
                let x = nodes[a].value.values();
                let y = node.value.values();
                let ga = accumulate(grads, a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * kind.derivative(x[i], y[i]);
                }
            }
        }
        &Op::Softmax { x, axis } => {
            if wants(x) {
                let y = node.value.values();
                let (outer, len, inner) = axis_split(node.value.shape(), axis);
                let gx = accumulate(grads, x, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |t: usize| (o * len + t) * inner + i;
                        let dot: f64 = (0..len).map(|t| g[idx(t)] * y[idx(t)]).sum();
                        for t in 0..len {
                            gx[idx(t)] += y[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
            }
        }
        &Op::LogSoftmax { x, axis } => {
            if wants(x) {
                let y = node.value.values();
                let (outer, len, inner) = axis_split(node.value.shape(), axis);
                let gx = accumulate(grads, x, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |t: usize| (o * len + t) * inner + i;
                        let total: f64 = (0..len).map(|t| g[idx(t)]).sum();
                        for t in 0..len {
                            gx[idx(t)] += g[idx(t)] - y[idx(t)].exp() * total;
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let n = nodes[gain].value.len();
            if wants(gain) {
                let gg = accumulate(grads, gain, n);
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if wants(bias) {
                let gb = accumulate(grads, bias, n);
                for grow in g.chunks(n) {
                    add_into(gb, grow);
                }
            }
            if wants(x) {
                let gamma = nodes[gain].value.values();
                let gx = accumulate(grads, x, g.len());
                for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let dh: Vec<f64> = (0..n).map(|j| grow[j] * gamma[j]).collect();
                    let mean_dh = dh.iter().sum::<f64>() / n as f64;
                    let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    let out = &mut gx[r * n..(r + 1) * n];
                    for j in 0..n {
                        out[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let width = nodes[p].value.shape()[*axis] * inner;
                if wants(p) {
                    let gp = accumulate(grads, p, outer * width);
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + width];
                        add_into(&mut gp[o * width..(o + 1) * width], src);
                    }
                }
                offset += width;
            }
        }
        &Op::SliceRows { x, start } => {
            if wants(x) {
                let cols = row_width(nodes[x].value.shape());
                let n = nodes[x].value.len();
                let gx = accumulate(grads, x, n);
                add_into(&mut gx[start * cols..start * cols + g.len()], g);
            }
        }
        &Op::SliceCols { x, start } => {
            if wants(x) {
                let (rows, cols) = nodes[x].value.dims2().unwrap();
                let width = node.value.dims2().unwrap().1;
                let gx = accumulate(grads, x, rows * cols);
                for r in 0..rows {
                    add_into(&mut gx[r * cols + start..r * cols + start + width], &g[r * width..(r + 1) * width]);
                }
            }
        }
        &Op::Transpose(x) => {
            if wants(x) {
                let (rows, cols) = nodes[x].value.dims2().unwrap();
                let gx = accumulate(grads, x, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        &Op::Sum(x) => {
            if wants(x) {
                let n = nodes[x].value.len();
                let gx = accumulate(grads, x, n);
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        &Op::SumCols(x) => {
            if wants(x) {
                let (rows, cols) = nodes[x].value.dims2().unwrap();
                let gx = accumulate(grads, x, rows * cols);
                for r in 0..rows {
                    gx[r * cols..(r + 1) * cols].iter_mut().for_each(|o| *o += g[r]);
                }
            }
        }
        Op::GatherRows { table, ids } => {
            if wants(*table) {
                let cols = row_width(nodes[*table].value.shape());
                let n = nodes[*table].value.len();
                let gt = accumulate(grads, *table, n);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
        }
        &Op::Reshape(x) => {
            if wants(x) {
                add_into(accumulate(grads, x, g.len()), g);
            }
        }
        Op::NormalizeRows { x, norms } => {
            if wants(*x) {
                let y = node.value.values();
                let cols = row_width(node.value.shape());
                let gx = accumulate(grads, *x, g.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        gx[r * cols + j] += (gr[j] - yr[j] * dot) / norm;
                    }
                }
            }
        }
        &Op::Cosine { a, b, na, nb } => {
            let cos = node.value.values()[0];
            let av = nodes[a].value.values();
            let bv = nodes[b].value.values();
            if wants(a) {
                let ga = accumulate(grads, a, av.len());
                for i in 0..av.len() {
                    ga[i] += g[0] * (bv[i] / (na * nb) - cos * av[i] / (na * na));
                }
            }
            if wants(b) {
                let gb = accumulate(grads, b, bv.len());
                for i in 0..bv.len() {
                    gb[i] += g[0] * (av[i] / (na * nb) - cos * bv[i] / (nb * nb));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn row_width(shape: &[usize]) -> usize {
    if shape.len() == 1 {
        shape[0]
    } else {
        shape[1..].iter().product()
    }
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_forward(x: &DenseArray, axis: usize, log: bool) -> DenseArray {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xv = x.values();
    let mut out = vec![0.0; xv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + i;
            let max = (0..len).map(|t| xv[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..len).map(|t| (xv[idx(t)] - max).exp()).sum();
            for t in 0..len {
                out[idx(t)] = if log { xv[idx(t)] - max - total.ln() } else { (xv[idx(t)] - max).exp() / total };
            }
        }
    }
    DenseArray::from_parts(x.shape().to_vec(), out)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, DenseArray> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_array(&self) -> DenseArray {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64, TensorError> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient after [`Tape::backward`]; `None` if no gradient reached this node.
    pub fn grad(&self) -> Option<DenseArray> {
        let grads = self.tape.grads.borrow();
        let g = grads.get(self.id)?.as_ref()?;
        Some(DenseArray::from_parts(self.shape(), g.clone()))
    }

    /// Value-identical leaf that propagates no gradient.
    pub fn detach(&self) -> Var<'t> {
        let value = self.to_array();
        self.tape.constant(value)
    }

    fn unary_result(&self, value: DenseArray, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary_result(&self, other: &Var<'t>, value: DenseArray, op: Op) -> Var<'t> {
        let rg = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) -> Result<(), TensorError> {
        let (a, b) = (self.shape(), other.shape());
        if a == b {
            Ok(())
        } else {
            Err(TensorError::Dimension(format!("{what}: {a:?} vs {b:?}")))
        }
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let value = {
            let a = self.value();
            let b = other.value();
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if k != k2 || b.ndim() != 2 {
                return Err(TensorError::Dimension(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
            }
            let mut out = vec![0.0; m * n];
            gemm_nn(a.values(), b.values(), &mut out, m, k, n);
            record_macs(m * k * n);
            DenseArray::from_parts(vec![m, n], out)
        };
        Ok(self.binary_result(other, value, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let value = {
            let a = self.value();
            let b = other.value();
            let (m, k) = a.dims2()?;
            let (n, k2) = b.dims2()?;
            if k != k2 || a.ndim() != 2 || b.ndim() != 2 {
                return Err(TensorError::Dimension(format!("matmul_nt {:?} x {:?}^T", a.shape(), b.shape())));
            }
            let mut out = vec![0.0; m * n];
            gemm_nt(a.values(), b.values(), &mut out, m, k, n);
            record_macs(m * k * n);
            DenseArray::from_parts(vec![m, n], out)
        };
        Ok(self.binary_result(other, value, Op::MatMulNt(self.id, other.id)))
    }

    fn zip_with(&self, other: &Var<'t>, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<DenseArray, TensorError> {
        self.same_shape(other, what)?;
        let a = self.value();
        let b = other.value();
        let values = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
        Ok(DenseArray::from_parts(a.shape().to_vec(), values))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.binary_result(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.binary_result(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.binary_result(other, v, Op::Mul(self.id, other.id)))
    }

    /// Adds a length-`n` row to every row of an `m × n` matrix.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let value = {
            let a = self.value();
            let r = row.value();
            let n = row_width(a.shape());
            if r.len() != n {
                return Err(TensorError::Dimension(format!("add_row {:?} + {:?}", a.shape(), r.shape())));
            }
            let rv = r.values();
            let values = a.values().chunks(n).flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y)).collect();
            DenseArray::from_parts(a.shape().to_vec(), values)
        };
        Ok(self.binary_result(row, value, Op::AddRow(self.id, row.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary_result(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary_result(v, Op::AddScalar(self.id))
    }

    pub fn apply(&self, kind: Unary) -> Var<'t> {
        let v = self.value().map(|x| kind.forward(x));
        self.unary_result(v, Op::Unary(self.id, kind))
    }

    pub fn relu(&self) -> Var<'t> {
        self.apply(Unary::Relu)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.apply(Unary::Tanh)
    }

    pub fn silu(&self) -> Var<'t> {
        self.apply(Unary::Silu)
    }

    pub fn exp(&self) -> Var<'t> {
        self.apply(Unary::Exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.apply(Unary::Log)
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    fn check_axis(&self, axis: usize) -> Result<(), TensorError> {
        let nd = self.value().ndim();
        if axis < nd {
            Ok(())
        } else {
            Err(TensorError::Dimension(format!("axis {axis} out of range for rank {nd}")))
        }
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.check_axis(axis)?;
        let v = softmax_forward(&self.value(), axis, false);
        Ok(self.unary_result(v, Op::Softmax { x: self.id, axis }))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.check_axis(axis)?;
        let v = softmax_forward(&self.value(), axis, true);
        Ok(self.unary_result(v, Op::LogSoftmax { x: self.id, axis }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let (value, xhat, rstd) = {
            let x = self.value();
            let n = row_width(x.shape());
            let (g, b) = (gain.value(), bias.value());
            if g.len() != n || b.len() != n {
                return Err(TensorError::Dimension(format!(
                    "layer_norm over width {n} with gain {:?}, bias {:?}",
                    g.shape(),
                    b.shape()
                )));
            }
            let rows = x.len() / n;
            let mut xhat = Vec::with_capacity(x.len());
            let mut rstd = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(x.len());
            for row in x.values().chunks(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd.push(r);
                for ((x, g), b) in row.iter().zip(g.values()).zip(b.values()) {
                    let h = (x - mean) * r;
                    xhat.push(h);
                    out.push(h * g + b);
                }
            }
            (DenseArray::from_parts(x.shape().to_vec(), out), xhat, rstd)
        };
        let rg = self.tape.needs(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(value, Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, rstd }, rg))
    }

    pub fn transpose(&self) -> Result<Var<'t>, TensorError> {
        let value = {
            let x = self.value();
            let (rows, cols) = x.dims2()?;
            let xv = x.values();
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = xv[r * cols + c];
                }
            }
            DenseArray::from_parts(vec![cols, rows], out)
        };
        Ok(self.unary_result(value, Op::Transpose(self.id)))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn rows(&self, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let value = {
            let x = self.value();
            let shape = x.shape();
            if shape.len() < 2 || len == 0 || start + len > shape[0] {
                return Err(TensorError::Dimension(format!("rows {start}..{} of {shape:?}", start + len)));
            }
            let width = row_width(shape);
            let mut new_shape = shape.to_vec();
            new_shape[0] = len;
            DenseArray::from_parts(new_shape, x.values()[start * width..(start + len) * width].to_vec())
        };
        Ok(self.unary_result(value, Op::SliceRows { x: self.id, start }))
    }

    pub fn cols(&self, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let value = {
            let x = self.value();
            let (rows, cols) = x.dims2()?;
            if x.ndim() != 2 || len == 0 || start + len > cols {
                return Err(TensorError::Dimension(format!("cols {start}..{} of {:?}", start + len, x.shape())));
            }
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&x.values()[r * cols + start..r * cols + start + len]);
            }
            DenseArray::from_parts(vec![rows, len], out)
        };
        Ok(self.unary_result(value, Op::SliceCols { x: self.id, start }))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = DenseArray::scalar(self.value().sum());
        self.unary_result(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums each row of a matrix into a length-`rows` vector.
    pub fn sum_cols(&self) -> Result<Var<'t>, TensorError> {
        let value = {
            let x = self.value();
            let (rows, cols) = x.dims2()?;
            let out = x.values().chunks(cols).map(|c| c.iter().sum()).collect();
            DenseArray::from_parts(vec![rows], out)
        };
        Ok(self.unary_result(value, Op::SumCols(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let value = self.value().reshape(shape)?;
        Ok(self.unary_result(value, Op::Reshape(self.id)))
    }

    /// Scales every row to unit L2 norm; a zero row is a degenerate input.
    pub fn normalize_rows(&self) -> Result<Var<'t>, TensorError> {
        let (value, norms) = {
            let x = self.value();
            let width = row_width(x.shape());
            let mut norms = Vec::new();
            let mut out = Vec::with_capacity(x.len());
            for row in x.values().chunks(width) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(TensorError::Degenerate("zero-norm row".into()));
                }
                norms.push(n);
                out.extend(row.iter().map(|v| v / n));
            }
            (DenseArray::from_parts(x.shape().to_vec(), out), norms)
        };
        Ok(self.unary_result(value, Op::NormalizeRows { x: self.id, norms }))
    }

    /// Cosine similarity of two same-size arrays, as a scalar.
    pub fn cosine_sim(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let (value, na, nb) = {
            let a = self.value();
            let b = other.value();
            if a.len() != b.len() {
                return Err(TensorError::Dimension(format!("cosine_sim {:?} vs {:?}", a.shape(), b.shape())));
            }
            let (na, nb) = (a.l2_norm(), b.l2_norm());
            if na == 0.0 || nb == 0.0 {
                return Err(TensorError::Degenerate("cosine_sim of a zero vector".into()));
            }
            let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
            (DenseArray::scalar(dot / (na * nb)), na, nb)
        };
        Ok(self.binary_result(other, value, Op::Cosine { a: self.id, b: other.id, na, nb }))
    }

    /// Looks up rows of an embedding table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>, TensorError> {
        let value = {
            let t = self.value();
            let (rows, cols) = t.dims2()?;
            if ids.is_empty() {
                return Err(TensorError::Dimension("gather of zero rows".into()));
            }
            let mut out = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(TensorError::Dimension(format!("row {id} out of range for {rows} rows")));
                }
                out.extend_from_slice(t.row(id));
            }
            DenseArray::from_parts(vec![ids.len(), cols], out)
        };
        Ok(self.unary_result(value, Op::GatherRows { table: self.id, ids: ids.to_vec() }))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, TensorError> {
    let first = parts.first().ok_or_else(|| TensorError::Dimension("concat of an empty list".into()))?;
    let tape = first.tape;
    let shapes: Vec<Vec<usize>> = parts.iter().map(Var::shape).collect();
    let rank = shapes[0].len();
    if axis >= rank {
        return Err(TensorError::Dimension(format!("concat axis {axis} for rank {rank}")));
    }
    for s in &shapes {
        let compatible = s.len() == rank && s.iter().zip(&shapes[0]).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(TensorError::Dimension(format!("concat along {axis}: {:?} vs {s:?}", shapes[0])));
        }
    }
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let mut new_shape = shapes[0].clone();
    new_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
    let mut out = Vec::with_capacity(new_shape.iter().product());
    {
        let nodes = tape.nodes.borrow();
        for o in 0..outer {
            for (p, s) in parts.iter().zip(&shapes) {
                let width = s[axis] * inner;
                out.extend_from_slice(&nodes[p.id].value.values()[o * width..(o + 1) * width]);
            }
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.needs(&ids);
    Ok(tape.push(DenseArray::from_parts(new_shape, out), Op::Concat { parts: ids, axis }, rg))
}
