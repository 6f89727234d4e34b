//! Parameters, layer primitives and optimizers shared by the networks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeom, Resample2, Tensor};

/// Negative slope of every leaky ReLU in the networks.
pub const LRELU_SLOPE: f64 = 0.2;
/// Gain that keeps activations at unit variance after a leaky ReLU.
pub const LRELU_GAIN: f64 = core::f64::consts::SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

/// Named tensors in registration order. Names are hierarchical
/// (`generator.local.l3.weight`) and double as checkpoint keys.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Replaces every value from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let id = other.find(name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            let src = other.get(id);
            if src.shape() != value.shape() {
                return Err(Error::Shape { expected: value.shape().to_vec(), got: src.shape().to_vec() });
            }
            *value = src.clone();
        }
        Ok(())
    }

    /// Puts every parameter on `g`; `trainable` selects leaf vs constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { g.leaf(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Graph variables of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Equalized-learning-rate weight: stored with unit variance (divided by
/// `lr_mul`), rescaled at use by `gain · lr_mul / sqrt(fan_in)`.
#[derive(Clone, Copy, Debug)]
pub struct EqWeight {
    pub id: ParamId,
    pub scale: f64,
}

impl EqWeight {
    pub fn var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound) -> Var {
        let w = p.var(self.id);
        if self.scale == 1.0 {
            w
        } else {
            g.scale(w, self.scale)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Bias {
    pub id: ParamId,
    pub lr_mul: f64,
}

impl Bias {
    pub fn var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound) -> Var {
        let b = p.var(self.id);
        if self.lr_mul == 1.0 {
            b
        } else {
            g.scale(b, self.lr_mul)
        }
    }
}

pub fn eq_weight<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut crate::rng::Rng64,
    name: impl Into<String>,
    shape: &[usize],
    fan_in: usize,
    lr_mul: f64,
) -> EqWeight {
    let w = crate::rng::normal::<T>(rng, shape).map(|v| v / T::of(lr_mul));
    let id = store.add(name, w);
    EqWeight { id, scale: lr_mul / libm::sqrt(fan_in as f64) }
}

pub fn bias<T: Scalar>(store: &mut ParamStore<T>, name: impl Into<String>, shape: &[usize], init: f64, lr_mul: f64) -> Bias {
    let id = store.add(name, Tensor::full(shape, T::of(init / lr_mul)));
    Bias { id, lr_mul }
}

/// Fully connected layer over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: EqWeight,
    pub bias: Bias,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut crate::rng::Rng64,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        lr_mul: f64,
        bias_init: f64,
    ) -> Self {
        let weight = eq_weight(store, rng, alloc::format!("{name}.weight"), &[out_dim, in_dim], in_dim, lr_mul);
        let bias = bias(store, alloc::format!("{name}.bias"), &[out_dim], bias_init, lr_mul);
        Self { weight, bias }
    }

    /// `x [.., in] → [.., out]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let w = self.weight.var(g, p);
        let y = g.matmul_t(x, w, false, true);
        let b = self.bias.var(g, p);
        g.add(y, b)
    }
}

pub fn lrelu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    g.leaky_relu_scaled(x, LRELU_SLOPE, LRELU_GAIN)
}

/// Same-padding 2-D convolution of `x [B, Cin, H, W]` with the flattened
/// kernel `w [Cout, Cin·k·k]`.
pub fn conv2d<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, kernel: usize) -> Var {
    let &[b, c, h, wd] = g.shape(x) else { panic!("conv2d expects [B,C,H,W], got {:?}", g.shape(x)) };
    let out = g.shape(w)[0];
    let y = if kernel == 1 {
        let flat = g.reshape(x, &[b, c, h * wd]);
        g.matmul(w, flat)
    } else {
        let geom = ConvGeom { channels: c, height: h, width: wd, kernel, stride: 1, padding: kernel / 2 };
        let cols = g.im2col(x, geom);
        g.matmul(w, cols)
    };
    g.reshape(y, &[b, out, h, wd])
}

/// Adds a per-channel bias `[C]` to `x [B, C, H, W]`.
pub fn add_channel_bias<T: Scalar>(g: &mut Graph<T>, x: Var, b: Var) -> Var {
    let c = g.shape(b)[0];
    let b = g.reshape(b, &[c, 1, 1]);
    g.add(x, b)
}

pub fn upsample2<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    g.resample2(x, Resample2::Up, false)
}

pub fn downsample2<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    g.resample2(x, Resample2::Down, false)
}

/// Persistent power-iteration vectors for one spectrally normalized weight.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerVectors<T> {
    /// Left singular vector estimate, length `rows`.
    pub u: Vec<T>,
    /// Right singular vector estimate, length `cols`.
    pub v: Vec<T>,
}

const SIGMA_FLOOR: f64 = 1e-12;

fn normalize<T: Scalar>(x: &mut [T]) {
    let n = libm::sqrt(x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()).max(SIGMA_FLOOR);
    for v in x {
        *v = T::of(v.as_f64() / n);
    }
}

impl<T: Scalar> PowerVectors<T> {
    pub fn new(rng: &mut crate::rng::Rng64, rows: usize, cols: usize) -> Self {
        let mut u = crate::rng::normal_vec(rng, rows);
        normalize(&mut u);
        let mut v = crate::rng::normal_vec(rng, cols);
        normalize(&mut v);
        Self { u, v }
    }

    /// Runs `iterations` rounds of `v ← Wᵀu/‖·‖, u ← Wv/‖·‖` on the
    /// `rows×cols` row-major matrix `w`.
    pub fn iterate(&mut self, w: &[T], iterations: usize) {
        let rows = self.u.len();
        let cols = self.v.len();
        assert_eq!(w.len(), rows * cols);
        for _ in 0..iterations {
            let mut v = vec![T::zero(); cols];
            for r in 0..rows {
                let ur = self.u[r];
                for (vc, &wrc) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                    *vc = *vc + wrc * ur;
                }
            }
            normalize(&mut v);
            let mut u: Vec<T> = (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum()).collect();
            normalize(&mut u);
            self.u = u;
            self.v = v;
        }
    }

    /// `uᵀ W v`, the current estimate of the largest singular value.
    pub fn sigma(&self, w: &[T]) -> f64 {
        let cols = self.v.len();
        self.u
            .iter()
            .enumerate()
            .map(|(r, &ur)| ur.as_f64() * w[r * cols..(r + 1) * cols].iter().zip(&self.v).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum::<f64>())
            .sum()
    }
}

/// Divides `w` (any shape, flattened to `[shape[0], rest]`) by its largest
/// singular value as estimated with `iterations` power steps. A zero
/// weight stays zero.
pub fn spectral_normalize<T: Scalar>(w: &Tensor<T>, state: &mut PowerVectors<T>, iterations: usize) -> Tensor<T> {
    state.iterate(w.data(), iterations);
    let sigma = state.sigma(w.data()).max(SIGMA_FLOOR);
    w.map(|x| T::of(x.as_f64() / sigma))
}

/// Graph form of spectral normalization with `u`, `v` held constant, so
/// gradients flow through `σ(W) = uᵀWv` as in the standard formulation.
pub fn spectral_normalize_var<T: Scalar>(g: &mut Graph<T>, w: Var, state: &PowerVectors<T>) -> Var {
    let rows = state.u.len();
    let cols = state.v.len();
    let shape = g.shape(w).to_vec();
    let flat = g.reshape(w, &[rows, cols]);
    let u = g.constant(Tensor::from_vec(&[1, rows], state.u.clone()));
    let v = g.constant(Tensor::from_vec(&[cols, 1], state.v.clone()));
    let uw = g.matmul(u, flat);
    let sigma = g.matmul(uw, v);
    let sigma = g.reshape(sigma, &[]);
    let floor = g.constant(Tensor::scalar(T::of(SIGMA_FLOOR)));
    let diff = g.sub(sigma, floor);
    // max(σ, floor) without a branch on the tape: floor + relu(σ − floor)
    let pos = g.leaky_relu(diff, 0.0);
    let sigma = g.add(pos, floor);
    let out = g.div(flat, sigma);
    g.reshape(out, &shape)
}

/// Adaptive-moment optimizer state for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m: Vec<Tensor<T>> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1, beta2, eps, step: 0, v: m.clone(), m }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let step = self.lr / if bc1 > 0.0 { bc1 } else { 1.0 };
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let (step, eps, sbc2) = (T::of(step), T::of(self.eps), T::of(libm::sqrt(bc2)));
        for ((p, g), (m, v)) in params.values_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                *pi = *pi - step * *mi / ((*vi).sqrt() / sbc2 + eps);
            }
        }
    }
}

/// `ema ← decay·ema + (1 − decay)·current` for every parameter.
pub fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, current: &ParamStore<T>, decay: f64) {
    let d = T::of(decay);
    let od = T::of(1.0 - decay);
    for (e, c) in ema.values_mut().iter_mut().zip(current.values()) {
        for (ei, &ci) in e.data_mut().iter_mut().zip(c.data()) {
            *ei = d * *ei + od * ci;
        }
    }
}
