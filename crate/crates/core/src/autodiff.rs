//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is a valid
//! topological order. [`Graph::grad`] walks the tape backwards and expresses
//! each adjoint with ordinary graph operations, so gradients are themselves
//! differentiable. The R1 penalty relies on this: it differentiates the norm
//! of an input gradient with respect to the discriminator weights.
//!
//! Shape errors inside the graph are programming errors and panic; model
//! entry points validate user-facing shapes before building a graph.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;
use crate::tensor::{self, broadcast_shapes, col2im, im2col, ConvGeom, Resample2, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    /// Input, negative-side factor, positive-side factor.
    LeakyRelu(Var, T, T),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    SumTo(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, before: usize },
    Im2Col(Var, ConvGeom),
    Col2Im(Var, ConvGeom),
    Resample2 { x: Var, kind: Resample2, adjoint: bool },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that gradients never flow into.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    /// Elementwise op with numpy broadcasting; the backward pass reduces
    /// each contribution back to its operand's shape.
    fn binary(&mut self, a: Var, b: Var, mk: fn(Var, Var) -> Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let value = if self.shape(a) == self.shape(b) {
            self.value(a).zip_map(self.value(b), f)
        } else {
            let shape = broadcast_shapes(self.shape(a), self.shape(b))
                .unwrap_or_else(|| panic!("incompatible shapes {:?} and {:?}", self.shape(a), self.shape(b)));
            tensor::broadcast_zip(self.value(a), self.value(b), &shape, f)
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, mk(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div, |x, y| x / y)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, Op::Scale(x, c), move |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, Op::AddScalar(x), move |v| v + c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn powf(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, Op::Powf(x, c), move |v| v.powf(c))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), |v| v.max(T::zero()) + (-v.abs()).exp().ln_1p())
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.leaky_relu_scaled(x, slope, 1.0)
    }

    /// `gain · leaky_relu(x, slope)` as a single node.
    pub fn leaky_relu_scaled(&mut self, x: Var, slope: f64, gain: f64) -> Var {
        let (s, k) = (T::of(slope * gain), T::of(gain));
        self.unary(x, Op::LeakyRelu(x, s, k), move |v| if v > T::zero() { v * k } else { v * s })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = Tensor::matmul(self.value(a), self.value(b), ta, tb);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        if self.shape(x) == shape {
            return x;
        }
        let value = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let value = self.value(x).permute(perm);
        let rg = self.rg(x);
        self.push(value, Op::Permute(x, perm.to_vec()), rg)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Var {
        if self.shape(x) == shape {
            return x;
        }
        let value = self.value(x).broadcast_to(shape);
        let rg = self.rg(x);
        self.push(value, Op::BroadcastTo(x), rg)
    }

    pub fn sum_to(&mut self, x: Var, shape: &[usize]) -> Var {
        if self.shape(x) == shape {
            return x;
        }
        let value = self.value(x).sum_to(shape);
        let rg = self.rg(x);
        self.push(value, Op::SumTo(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.sum_to(x, &[])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let mut shape = self.shape(x).to_vec();
        shape[axis] = 1;
        self.sum_to(x, &shape)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&parts, axis);
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Concat(xs.to_vec(), axis), rg)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.value(x).narrow(axis, start, len);
        let rg = self.rg(x);
        self.push(value, Op::Narrow { x, axis, start }, rg)
    }

    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Var {
        let value = self.value(x).pad(axis, before, after);
        let rg = self.rg(x);
        self.push(value, Op::Pad { x, axis, before }, rg)
    }

    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let value = im2col(self.value(x), geom);
        let rg = self.rg(x);
        self.push(value, Op::Im2Col(x, geom), rg)
    }

    pub fn col2im(&mut self, x: Var, geom: ConvGeom) -> Var {
        let value = col2im(self.value(x), geom);
        let rg = self.rg(x);
        self.push(value, Op::Col2Im(x, geom), rg)
    }

    /// ×2 stencil resampling of the two trailing axes, or its transpose.
    pub fn resample2(&mut self, x: Var, kind: Resample2, adjoint: bool) -> Var {
        let value = tensor::resample2(self.value(x), kind, adjoint);
        let rg = self.rg(x);
        self.push(value, Op::Resample2 { x, kind, adjoint }, rg)
    }

    /// Numerically stabilized softmax along `axis`. The subtracted maximum
    /// is a constant, which leaves both the value and its derivatives exact.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let shifted = self.shift_by_max(x, axis);
        let e = self.exp(shifted);
        let s = self.sum_axis(e, axis);
        self.div(e, s)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        let shifted = self.shift_by_max(x, axis);
        let e = self.exp(shifted);
        let s = self.sum_axis(e, axis);
        let ls = self.log(s);
        self.sub(shifted, ls)
    }

    fn shift_by_max(&mut self, x: Var, axis: usize) -> Var {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let outer = tensor::numel(&shape[..axis]);
        let extent = shape[axis];
        let inner = tensor::numel(&shape[axis + 1..]);
        let mut max = vec![T::neg_infinity(); outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let row = &v.data()[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                for (m, &r) in max[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *m = m.max(r);
                }
            }
        }
        let mut mshape = shape;
        mshape[axis] = 1;
        let m = self.constant(Tensor::from_vec(&mshape, max));
        self.sub(x, m)
    }

    /// Gradients of the scalar `y` with respect to each of `xs`.
    ///
    /// The returned variables live on this tape and can be differentiated
    /// again. Inputs `y` does not depend on receive a zero constant.
    pub fn grad(&mut self, y: Var, xs: &[Var]) -> Vec<Var> {
        assert_eq!(self.value(y).numel(), 1, "grad() needs a scalar output, got {:?}", self.shape(y));
        let n = y.0 + 1;
        // Nodes that depend on some x: only these need adjoints.
        let mut reach = vec![false; n];
        for &x in xs {
            if x.0 < n {
                reach[x.0] = true;
            }
        }
        for i in 0..n {
            if !reach[i] && self.nodes[i].requires_grad && self.inputs(i).iter().any(|v| reach[v.0]) {
                reach[i] = true;
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; n];
        let seed = Tensor::ones(self.shape(y));
        grads[y.0] = Some(self.constant(seed));
        for i in (0..n).rev() {
            if !reach[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            for (input, contrib) in self.backward(i, g, &reach) {
                grads[input.0] = Some(match grads[input.0] {
                    Some(acc) => self.add(acc, contrib),
                    None => contrib,
                });
            }
        }
        xs.iter()
            .map(|&x| match grads.get(x.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(x));
                    self.constant(z)
                }
            })
            .collect()
    }

    fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Powf(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::LeakyRelu(x, _, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::BroadcastTo(x)
            | Op::SumTo(x)
            | Op::Im2Col(x, _)
            | Op::Col2Im(x, _)
            | Op::Resample2 { x, .. } => vec![*x],
            Op::Narrow { x, .. } | Op::Pad { x, .. } => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
        }
    }

    fn reduce_like(&mut self, g: Var, like: Var) -> Var {
        let shape = self.shape(like).to_vec();
        self.sum_to(g, &shape)
    }

    /// Adjoint contributions of node `i` given its output gradient `g`.
    fn backward(&mut self, i: usize, g: Var, reach: &[bool]) -> Vec<(Var, Var)> {
        let y = Var(i);
        let op = self.nodes[i].op.clone();
        let want = |v: Var| reach[v.0];
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    let ga = self.reduce_like(g, a);
                    out.push((a, ga));
                }
                if want(b) {
                    let gb = self.reduce_like(g, b);
                    out.push((b, gb));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    let ga = self.reduce_like(g, a);
                    out.push((a, ga));
                }
                if want(b) {
                    let ng = self.neg(g);
                    let gb = self.reduce_like(ng, b);
                    out.push((b, gb));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    let ga = self.mul(g, b);
                    let ga = self.reduce_like(ga, a);
                    out.push((a, ga));
                }
                if want(b) {
                    let gb = self.mul(g, a);
                    let gb = self.reduce_like(gb, b);
                    out.push((b, gb));
                }
            }
            Op::Div(a, b) => {
                let ga = self.div(g, b);
                if want(b) {
                    let t = self.mul(ga, y);
                    let gb = self.neg(t);
                    let gb = self.reduce_like(gb, b);
                    out.push((b, gb));
                }
                if want(a) {
                    let ga = self.reduce_like(ga, a);
                    out.push((a, ga));
                }
            }
            Op::Neg(x) => {
                let gx = self.neg(g);
                out.push((x, gx));
            }
            Op::Scale(x, c) => {
                let gx = self.scale(g, c.as_f64());
                out.push((x, gx));
            }
            Op::AddScalar(x) => out.push((x, g)),
            Op::Exp(x) => {
                let gx = self.mul(g, y);
                out.push((x, gx));
            }
            Op::Log(x) => {
                let gx = self.div(g, x);
                out.push((x, gx));
            }
            Op::Powf(x, c) => {
                let c = c.as_f64();
                let p = self.powf(x, c - 1.0);
                let d = self.scale(p, c);
                let gx = self.mul(g, d);
                out.push((x, gx));
            }
            Op::Tanh(x) => {
                let y2 = self.square(y);
                let ny2 = self.neg(y2);
                let d = self.add_scalar(ny2, 1.0);
                let gx = self.mul(g, d);
                out.push((x, gx));
            }
            Op::Sigmoid(x) => {
                let ny = self.neg(y);
                let one_minus = self.add_scalar(ny, 1.0);
                let d = self.mul(y, one_minus);
                let gx = self.mul(g, d);
                out.push((x, gx));
            }
            Op::Softplus(x) => {
                let s = self.sigmoid(x);
                let gx = self.mul(g, s);
                out.push((x, gx));
            }
            Op::LeakyRelu(x, s, k) => {
                let mask = self.value(x).map(|v| if v > T::zero() { k } else { s });
                let m = self.constant(mask);
                let gx = self.mul(g, m);
                out.push((x, gx));
            }
            Op::MatMul { a, b, ta, tb } => {
                if want(a) {
                    let ga = match (ta, tb) {
                        (false, false) => self.matmul_t(g, b, false, true),
                        (false, true) => self.matmul_t(g, b, false, false),
                        (true, false) => self.matmul_t(b, g, false, true),
                        (true, true) => self.matmul_t(b, g, true, true),
                    };
                    let shape = self.shape(a).to_vec();
                    let ga = self.sum_to(ga, &shape);
                    out.push((a, ga));
                }
                if want(b) {
                    let gb = match (ta, tb) {
                        (false, false) => self.matmul_t(a, g, true, false),
                        (false, true) => self.matmul_t(g, a, true, false),
                        (true, false) => self.matmul_t(a, g, false, false),
                        (true, true) => self.matmul_t(g, a, true, true),
                    };
                    let shape = self.shape(b).to_vec();
                    let gb = self.sum_to(gb, &shape);
                    out.push((b, gb));
                }
            }
            Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                let gx = self.reshape(g, &shape);
                out.push((x, gx));
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gx = self.permute(g, &inv);
                out.push((x, gx));
            }
            Op::BroadcastTo(x) => {
                let shape = self.shape(x).to_vec();
                let gx = self.sum_to(g, &shape);
                out.push((x, gx));
            }
            Op::SumTo(x) => {
                let shape = self.shape(x).to_vec();
                let gx = self.broadcast_to(g, &shape);
                out.push((x, gx));
            }
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for x in xs {
                    let len = self.shape(x)[axis];
                    if want(x) {
                        let gx = self.narrow(g, axis, start, len);
                        out.push((x, gx));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let total = self.shape(x)[axis];
                let len = self.shape(y)[axis];
                let gx = self.pad(g, axis, start, total - start - len);
                out.push((x, gx));
            }
            Op::Pad { x, axis, before } => {
                let len = self.shape(x)[axis];
                let gx = self.narrow(g, axis, before, len);
                out.push((x, gx));
            }
            Op::Im2Col(x, geom) => {
                let gx = self.col2im(g, geom);
                out.push((x, gx));
            }
            Op::Col2Im(x, geom) => {
                let gx = self.im2col(g, geom);
                out.push((x, gx));
            }
            Op::Resample2 { x, kind, adjoint } => {
                let gx = self.resample2(g, kind, !adjoint);
                out.push((x, gx));
            }
        }
        out
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
