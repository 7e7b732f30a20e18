//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and enough saved state
//! to run its backward rule. Nodes are appended in evaluation order, so the
//! tape is topologically sorted and a single reverse sweep visits each node
//! once. Op inputs are never mutated.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    Silu(Var),
    Transpose(Var),
    Scale(Var, T),
    AddScalar(Var),
    SliceLast { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_deriv<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let half = T::of(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Binary(_, a, b) => self.needs(*a) || self.needs(*b),
            Op::Concat(vs) | Op::ConcatRows(vs) => vs.iter().any(|v| self.needs(*v)),
            Op::LayerNorm { x, gain, bias, .. } => {
                self.needs(*x) || self.needs(*gain) || self.needs(*bias)
            }
            Op::Softmax(x)
            | Op::Gelu(x)
            | Op::Silu(x)
            | Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::SliceLast { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => self.needs(*x),
        };
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a tensor as a leaf. Gradients are tracked iff the tensor
    /// has `requires_grad` set. Leaves may hold non-finite values; ops on
    /// them report the error.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::from_vec(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// Elementwise op. Shapes must be equal, or the smaller shape must be a
    /// suffix of the larger one (expansion over leading dimensions).
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape("elementwise", &sa, &sb))?;
        let (da, db) = (self.value(a), self.value(b));
        let n: usize = shape.iter().product();
        let (na, nb) = (da.len(), db.len());
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let out = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        self.push(name, shape, out, Op::Binary(op, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| last_dim(self.shape(p))).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat", shape, out, Op::Concat(parts.to_vec()))
    }

    /// Concatenation of 2-D tensors along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let cols = last_dim(self.shape(first));
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        self.push("concat_rows", vec![rows, cols], out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = last_dim(&sx);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &sx, self.shape(gain)));
        }
        if eps <= T::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xs.len() / d;
        let dn = T::of(d as f64);
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push("layer_norm", sx, out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape);
        let xs = self.value(x);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(d.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut z = T::zero();
            for &v in row {
                let e = (v - m).exp();
                z += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= z;
            }
        }
        self.push("softmax", shape, out, Op::Softmax(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        self.push("gelu", self.shape(x).to_vec(), out, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        self.push("silu", self.shape(x).to_vec(), out, Op::Silu(x))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let xs = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xs[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v + c).collect();
        self.push("add_scalar", self.shape(x).to_vec(), out, Op::AddScalar(x))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape);
        if start + len > d || len == 0 {
            return Err(Error::shape("slice_last", &shape, &[start, len]));
        }
        let out = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut s = shape;
        *s.last_mut().expect("non-empty shape") = len;
        self.push("slice_last", s, out, Op::SliceLast { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum::<T>();
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let s = xs.iter().copied().sum::<T>() / T::of(xs.len() as f64);
        self.push("mean", vec![1], vec![s], Op::Mean(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Affine map `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Populates gradients of the scalar `loss` for every tracked node.
    /// A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].data.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.needs(a) {
                    let bv = self.nodes[b.0].data.clone();
                    let ga = self.acc(a).expect("tracked");
                    // dA = dC B^T
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = T::zero();
                            for c in 0..n {
                                s += g[r * n + c] * bv[p * n + c];
                            }
                            ga[r * k + p] += s;
                        }
                    }
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].data.clone();
                    let gb = self.acc(b).expect("tracked");
                    // dB = A^T dC
                    for r in 0..m {
                        for p in 0..k {
                            let x = av[r * k + p];
                            for c in 0..n {
                                gb[p * n + c] += x * g[r * n + c];
                            }
                        }
                    }
                }
            }
            &Op::Binary(op, a, b) => {
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                let (na, nb) = (av.len(), bv.len());
                if let Some(ga) = self.acc(a) {
                    for (j, &gj) in g.iter().enumerate() {
                        ga[j % na] += match op {
                            BinaryOp::Add | BinaryOp::Sub => gj,
                            BinaryOp::Mul => gj * bv[j % nb],
                        };
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for (j, &gj) in g.iter().enumerate() {
                        gb[j % nb] += match op {
                            BinaryOp::Add => gj,
                            BinaryOp::Sub => -gj,
                            BinaryOp::Mul => gj * av[j % na],
                        };
                    }
                }
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| last_dim(&self.nodes[p.0].shape)).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if let Some(gp) = self.acc(p) {
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].data.len();
                    if let Some(gp) = self.acc(p) {
                        for (a, &gj) in gp.iter_mut().zip(&g[off..off + n]) {
                            *a += gj;
                        }
                    }
                    off += n;
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let gv = self.nodes[gain.0].data.clone();
                let d = gv.len();
                let dn = T::of(d as f64);
                if let Some(gg) = self.acc(gain) {
                    for (j, &gj) in g.iter().enumerate() {
                        gg[j % d] += gj * xhat[j];
                    }
                }
                if let Some(gb) = self.acc(bias) {
                    for (j, &gj) in g.iter().enumerate() {
                        gb[j % d] += gj;
                    }
                }
                if let Some(gx) = self.acc(x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * d;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = g[base + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[base + j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dh = g[base + j] * gv[j];
                            gx[base + j] += rs * (dh - m1 - xhat[base + j] * m2);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = self.nodes[i].data.clone();
                let d = last_dim(&self.nodes[i].shape);
                if let Some(gx) = self.acc(x) {
                    for (r, row) in y.chunks(d).enumerate() {
                        let base = r * d;
                        let dot: T = row.iter().enumerate().map(|(j, &yj)| yj * g[base + j]).sum();
                        for (j, &yj) in row.iter().enumerate() {
                            gx[base + j] += yj * (g[base + j] - dot);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = self.nodes[x.0].data.clone();
                if let Some(gx) = self.acc(x) {
                    for (j, &gj) in g.iter().enumerate() {
                        gx[j] += gj * gelu_deriv(xv[j]);
                    }
                }
            }
            &Op::Silu(x) => {
                let xv = self.nodes[x.0].data.clone();
                if let Some(gx) = self.acc(x) {
                    for (j, &gj) in g.iter().enumerate() {
                        let s = sigmoid(xv[j]);
                        gx[j] += gj * s * (T::one() + xv[j] * (T::one() - s));
                    }
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                if let Some(gx) = self.acc(x) {
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(gx) = self.acc(x) {
                    for (a, &gj) in gx.iter_mut().zip(g) {
                        *a += gj * c;
                    }
                }
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                if let Some(gx) = self.acc(x) {
                    for (a, &gj) in gx.iter_mut().zip(g) {
                        *a += gj;
                    }
                }
            }
            &Op::SliceLast { x, start } => {
                let d = last_dim(&self.nodes[x.0].shape);
                let len = last_dim(&self.nodes[i].shape);
                if let Some(gx) = self.acc(x) {
                    for (r, row) in g.chunks(len).enumerate() {
                        for (c, &gj) in row.iter().enumerate() {
                            gx[r * d + start + c] += gj;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.acc(x) {
                    for a in gx.iter_mut() {
                        *a += g[0];
                    }
                }
            }
            &Op::Mean(x) => {
                let n = T::of(self.nodes[x.0].data.len() as f64);
                if let Some(gx) = self.acc(x) {
                    for a in gx.iter_mut() {
                        *a += g[0] / n;
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if big[big.len() - small.len()..] == *small {
        let nb: usize = big.iter().product();
        let ns: usize = small.iter().product();
        if ns > 0 && nb % ns == 0 {
            return Some(big.to_vec());
        }
    }
    None
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for p in 0..k {
            let x = a[r * k + p];
            if x == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += x * bv;
            }
        }
    }
    out
}
