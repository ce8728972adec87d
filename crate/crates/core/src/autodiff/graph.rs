use std::borrow::Cow;

use crate::error::{Result, VredError};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Log,
    Neg,
    Square,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Log => x.ln(),
            Unary::Neg => -x,
            Unary::Square => x * x,
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

/// Zero padding (conv) or cropping (transposed conv) on each end of the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn symmetric(p: usize) -> Self {
        Padding { left: p, right: p }
    }

    pub fn total(&self) -> usize {
        self.left + self.right
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    Sum(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    Transpose(Var),
    StackColumns(Vec<Var>),
    Column(Var, usize),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        pad: Padding,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        stride: usize,
        crop: Padding,
    },
}

struct Node<'p> {
    op: Op,
    value: Cow<'p, Tensor>,
    requires_grad: bool,
}

/// Define-by-run record of a computation. Nodes are appended in evaluation
/// order, so the node list is always a valid topological order.
///
/// Leaves may borrow their values (parameters) for the lifetime `'p`.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (shape[0], 1),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(VredError::NonFinite(what.to_string()))
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'p, Tensor>, requires_grad: bool) -> Result<Var> {
        check_finite(&value, "graph input")?;
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf that borrows its value.
    pub fn param(&mut self, t: &'p Tensor) -> Result<Var> {
        self.leaf(Cow::Borrowed(t), true)
    }

    /// A trainable leaf that owns its value.
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(Cow::Owned(t), true)
    }

    /// A leaf that never receives gradient (data, detached quantities, frozen weights).
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor) -> Result<Var> {
        self.leaf(Cow::Borrowed(t), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Matrix product. `b` may be a vector `[k]`, giving a vector `[m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(VredError::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let out_shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (i, o) in out.iter_mut().enumerate() {
                let row = &av[i * k..(i + 1) * k];
                *o = row.iter().zip(bv).map(|(x, y)| x * y).sum();
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let s = av[i * k + p];
                    let brow = &bv[p * n..(p + 1) * n];
                    for (o, &bb) in orow.iter_mut().zip(brow) {
                        *o += s * bb;
                    }
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    /// Adds a vector `[m]` to every column of `x` (`[m]` or `[m x n]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let (m, n) = as_matrix(sx);
        if sb.len() != 1 || sb[0] != m {
            return Err(VredError::shape("add_bias", sx, sb));
        }
        let mut value = self.value(x).clone();
        let bv = self.value(b).data();
        for (i, row) in value.data_mut().chunks_mut(n).enumerate() {
            for v in row {
                *v += bv[i];
            }
        }
        Ok(self.push(Op::AddBias(x, b), value, &[x, b]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(VredError::shape(name, sa, sb));
        }
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(op, value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(VredError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        Ok(self.push(Op::Scale(x, c), value, &[x]))
    }

    /// `x + c` for a scalar constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        Ok(self.push(Op::Offset(x), value, &[x]))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        if f == Unary::Log {
            if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
                return Err(VredError::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let value = self.value(x).map(|v| f.apply(v));
        Ok(self.push(Op::Unary(x, f), value, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    /// Elementwise clamp to `[lo, hi]`. Gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(VredError::Config(format!("clamp bounds {lo} > {hi}")));
        }
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        Ok(self.push(Op::Clamp(x, lo, hi), value, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        Ok(self.push(Op::Sum(x), value, &[x]))
    }

    /// Concatenation along the first axis. All parts must agree on trailing dimensions.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| VredError::Contract("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(VredError::shape("concat", &tail, &s[1..]));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value, parts))
    }

    /// Rows `start..start + len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(VredError::shape("slice_rows", &s, &[start, len]));
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Slice(x, start * row), value, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), value, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(VredError::shape("transpose", s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        Ok(self.push(Op::Transpose(x), value, &[x]))
    }

    /// Stacks equal-length vectors (`[n]` or `[n x 1]`) as the columns of an `[n x B]` matrix.
    pub fn stack_columns(&mut self, cols: &[Var]) -> Result<Var> {
        let first = cols
            .first()
            .ok_or_else(|| VredError::Contract("stack of nothing".into()))?;
        let n = self.value(*first).len();
        let b = cols.len();
        let mut data = vec![0.0; n * b];
        for (j, &c) in cols.iter().enumerate() {
            let v = self.value(c);
            if v.len() != n || v.cols() != 1 {
                return Err(VredError::shape("stack_columns", &[n, 1], v.shape()));
            }
            for (i, &x) in v.data().iter().enumerate() {
                data[i * b + j] = x;
            }
        }
        let value = Tensor::new(vec![n, b], data)?;
        Ok(self.push(Op::StackColumns(cols.to_vec()), value, cols))
    }

    /// Column `j` of an `[n x B]` matrix as an `[n x 1]` matrix.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let s = self.shape(x);
        let (n, b) = as_matrix(s);
        if j >= b {
            return Err(VredError::shape("column", s, &[j]));
        }
        let src = self.value(x).data();
        let data = (0..n).map(|i| src[i * b + j]).collect();
        let value = Tensor::new(vec![n, 1], data)?;
        Ok(self.push(Op::Column(x, j), value, &[x]))
    }

    /// Strided 1-D convolution (cross-correlation).
    ///
    /// `x: [C_in x L]`, `w: [C_out x C_in x K]` gives `[C_out x L_out]` with
    /// `L_out = (L + pad - K) / stride + 1`. The padded length minus `K` must be
    /// a multiple of `stride`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] {
            return Err(VredError::shape("conv1d", sx, sw));
        }
        let (c_in, len) = (sx[0], sx[1]);
        let (c_out, k) = (sw[0], sw[2]);
        let padded = len + pad.total();
        if stride == 0 || padded < k || (padded - k) % stride != 0 {
            return Err(VredError::Config(format!(
                "conv1d: padded length {padded} with kernel {k} is not divisible by stride {stride}"
            )));
        }
        let out_len = (padded - k) / stride + 1;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; c_out * out_len];
        for o in 0..c_out {
            for c in 0..c_in {
                let wk = &wv[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                let xr = &xv[c * len..(c + 1) * len];
                let orow = &mut out[o * out_len..(o + 1) * out_len];
                for (t, acc) in orow.iter_mut().enumerate() {
                    let base = (t * stride) as isize - pad.left as isize;
                    let k0 = (-base).max(0) as usize;
                    let k1 = ((len as isize - base).min(k as isize)).max(0) as usize;
                    let mut s = 0.0;
                    for kk in k0..k1 {
                        s += wk[kk] * xr[(base + kk as isize) as usize];
                    }
                    *acc += s;
                }
            }
        }
        let value = Tensor::new(vec![c_out, out_len], out)?;
        Ok(self.push(Op::Conv1d { x, w, stride, pad }, value, &[x, w]))
    }

    /// Transposed 1-D convolution, the adjoint of [`Graph::conv1d`].
    ///
    /// `x: [C_in x L]`, `w: [C_in x C_out x K]` gives `[C_out x L_out]` with
    /// `L_out = (L - 1) * stride + K - crop`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        crop: Padding,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 3 || sw[0] != sx[0] {
            return Err(VredError::shape("conv_transpose1d", sx, sw));
        }
        let (c_in, len) = (sx[0], sx[1]);
        let (c_out, k) = (sw[1], sw[2]);
        if stride == 0 {
            return Err(VredError::Config("conv_transpose1d: zero stride".into()));
        }
        let full = (len - 1) * stride + k;
        if crop.total() >= full {
            return Err(VredError::Config(format!(
                "conv_transpose1d: crop {} exceeds reconstructable length {full}",
                crop.total()
            )));
        }
        let out_len = full - crop.total();
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; c_out * out_len];
        for c in 0..c_in {
            let xr = &xv[c * len..(c + 1) * len];
            for o in 0..c_out {
                let wk = &wv[(c * c_out + o) * k..(c * c_out + o + 1) * k];
                let orow = &mut out[o * out_len..(o + 1) * out_len];
                for (t, &xt) in xr.iter().enumerate() {
                    let base = (t * stride) as isize - crop.left as isize;
                    let k0 = (-base).max(0) as usize;
                    let k1 = ((out_len as isize - base).min(k as isize)).max(0) as usize;
                    for kk in k0..k1 {
                        orow[(base + kk as isize) as usize] += wk[kk] * xt;
                    }
                }
            }
        }
        let value = Tensor::new(vec![c_out, out_len], out)?;
        Ok(self.push(Op::ConvTranspose1d { x, w, stride, crop }, value, &[x, w]))
    }

    /// Reverse sweep from a scalar node. Gradients accumulate additively over fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(VredError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        check_finite(lv, "loss")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let y = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.shape(*a));
                let n = self.value(*b).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = av[i * k + p];
                            for (d, &gg) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += s * gg;
                            }
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(dx, gd);
                }
                let n = self.value(*x).cols();
                if let Some(db) = self.acc(grads, *b) {
                    for (d, row) in db.iter_mut().zip(gd.chunks(n)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, gd);
                }
                if let Some(db) = self.acc(grads, *b) {
                    add_into(db, gd);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, gd);
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (d, &gg) in db.iter_mut().zip(gd) {
                        *d -= gg;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gg), &bb) in da.iter_mut().zip(gd).zip(bv) {
                        *d += gg * bb;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, &gg), &aa) in db.iter_mut().zip(gd).zip(av) {
                        *d += gg * aa;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gg), &bb) in da.iter_mut().zip(gd).zip(bv) {
                        *d += gg / bb;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (((d, &gg), &aa), &bb) in db.iter_mut().zip(gd).zip(av).zip(bv) {
                        *d -= gg * aa / (bb * bb);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (d, &gg) in dx.iter_mut().zip(gd) {
                        *d += gg * c;
                    }
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(dx, gd);
                }
            }
            Op::Unary(x, f) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for (((d, &gg), &yy), &xx) in dx.iter_mut().zip(gd).zip(y).zip(xv) {
                        *d += gg
                            * match f {
                                Unary::Sigmoid => yy * (1.0 - yy),
                                Unary::Tanh => 1.0 - yy * yy,
                                Unary::Log => 1.0 / xx,
                                Unary::Neg => -1.0,
                                Unary::Square => 2.0 * xx,
                            };
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gg), &xx) in dx.iter_mut().zip(gd).zip(xv) {
                        if xx >= *lo && xx <= *hi {
                            *d += gg;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += gd[0];
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(dp) = self.acc(grads, p) {
                        add_into(dp, &gd[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Slice(x, off) => {
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(&mut dx[*off..*off + gd.len()], gd);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = as_matrix(self.shape(*x));
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += gd[j * r + i];
                        }
                    }
                }
            }
            Op::StackColumns(cols) => {
                let b = cols.len();
                for (j, &c) in cols.iter().enumerate() {
                    if let Some(dc) = self.acc(grads, c) {
                        for (i, d) in dc.iter_mut().enumerate() {
                            *d += gd[i * b + j];
                        }
                    }
                }
            }
            Op::Column(x, j) => {
                let b = self.value(*x).cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, &gg) in gd.iter().enumerate() {
                        dx[i * b + j] += gg;
                    }
                }
            }
            Op::Conv1d { x, w, stride, pad } => {
                let (c_in, len) = as_matrix(self.shape(*x));
                let sw = self.shape(*w);
                let (c_out, k) = (sw[0], sw[2]);
                let out_len = self.nodes[i].value.cols();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dxs = self.acc(grads, *x).map(|d| d.to_vec());
                let mut dws = self.acc(grads, *w).map(|d| d.to_vec());
                for o in 0..c_out {
                    let grow = &gd[o * out_len..(o + 1) * out_len];
                    for c in 0..c_in {
                        let widx = (o * c_in + c) * k;
                        for (t, &gg) in grow.iter().enumerate() {
                            let base = (t * stride) as isize - pad.left as isize;
                            let k0 = (-base).max(0) as usize;
                            let k1 = ((len as isize - base).min(k as isize)).max(0) as usize;
                            for kk in k0..k1 {
                                let xi = c * len + (base + kk as isize) as usize;
                                if let Some(dx) = dxs.as_mut() {
                                    dx[xi] += wv[widx + kk] * gg;
                                }
                                if let Some(dw) = dws.as_mut() {
                                    dw[widx + kk] += xv[xi] * gg;
                                }
                            }
                        }
                    }
                }
                if let Some(d) = dxs {
                    self.acc(grads, *x).unwrap().copy_from_slice(&d);
                }
                if let Some(d) = dws {
                    self.acc(grads, *w).unwrap().copy_from_slice(&d);
                }
            }
            Op::ConvTranspose1d { x, w, stride, crop } => {
                let (c_in, len) = as_matrix(self.shape(*x));
                let sw = self.shape(*w);
                let (c_out, k) = (sw[1], sw[2]);
                let out_len = self.nodes[i].value.cols();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dxs = self.acc(grads, *x).map(|d| d.to_vec());
                let mut dws = self.acc(grads, *w).map(|d| d.to_vec());
                for c in 0..c_in {
                    for o in 0..c_out {
                        let widx = (c * c_out + o) * k;
                        let grow = &gd[o * out_len..(o + 1) * out_len];
                        for t in 0..len {
                            let base = (t * stride) as isize - crop.left as isize;
                            let k0 = (-base).max(0) as usize;
                            let k1 = ((out_len as isize - base).min(k as isize)).max(0) as usize;
                            let xt = xv[c * len + t];
                            let mut sx = 0.0;
                            for kk in k0..k1 {
                                let gg = grow[(base + kk as isize) as usize];
                                sx += wv[widx + kk] * gg;
                                if let Some(dw) = dws.as_mut() {
                                    dw[widx + kk] += xt * gg;
                                }
                            }
                            if let Some(dx) = dxs.as_mut() {
                                dx[c * len + t] += sx;
                            }
                        }
                    }
                }
                if let Some(d) = dxs {
                    self.acc(grads, *x).unwrap().copy_from_slice(&d);
                }
                if let Some(d) = dws {
                    self.acc(grads, *w).unwrap().copy_from_slice(&d);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
