//! Dense row-major tensors and the strided kernels shared by the autodiff ops.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, `None` if incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src_shape` viewed as broadcast into `out_shape` (0 on
/// broadcast axes). Panics if `src_shape` does not broadcast.
pub fn broadcast_strides(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    assert!(src_shape.len() <= out_shape.len(), "cannot broadcast {src_shape:?} to {out_shape:?}");
    let off = out_shape.len() - src_shape.len();
    let src_strides = strides(src_shape);
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..src_shape.len() {
        if src_shape[i] == out_shape[off + i] {
            s[off + i] = src_strides[i];
        } else {
            assert!(src_shape[i] == 1, "cannot broadcast {src_shape:?} to {out_shape:?}");
        }
    }
    s
}

/// Walks `out_shape` in row-major order calling `f(out_index, src_offset)`
/// once per innermost run, with `src_offset` computed from `src_strides`.
fn for_each_run(out_shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out_shape.len();
    if numel(out_shape) == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    let mut out = 0usize;
    loop {
        f(out, base);
        out += inner;
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Like [`for_each_run`] with two strided sources.
fn for_each_run2(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out_shape.len();
    if numel(out_shape) == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let (mut ba, mut bb, mut out) = (0usize, 0usize, 0usize);
    loop {
        f(out, ba, bb);
        out += inner;
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            ba += sa[d];
            bb += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ba -= sa[d] * out_shape[d];
            bb -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Elementwise `f(a, b)` with numpy broadcasting, without materializing
/// the broadcast operands.
pub fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out_shape: &[usize], f: impl Fn(T, T) -> T) -> Tensor<T> {
    let sa = broadcast_strides(&a.shape, out_shape);
    let sb = broadcast_strides(&b.shape, out_shape);
    let n = numel(out_shape);
    let mut out = vec![T::zero(); n];
    let rank = out_shape.len();
    let (inner, ia, ib) = if rank == 0 { (1, 0, 0) } else { (out_shape[rank - 1], sa[rank - 1], sb[rank - 1]) };
    let (ad, bd) = (&a.data, &b.data);
    for_each_run2(out_shape, &sa, &sb, |o, pa, pb| {
        let dst = &mut out[o..o + inner];
        match (ia, ib) {
            (1, 1) => {
                for ((d, &x), &y) in dst.iter_mut().zip(&ad[pa..pa + inner]).zip(&bd[pb..pb + inner]) {
                    *d = f(x, y);
                }
            }
            (1, 0) => {
                let y = bd[pb];
                for (d, &x) in dst.iter_mut().zip(&ad[pa..pa + inner]) {
                    *d = f(x, y);
                }
            }
            (0, 1) => {
                let x = ad[pa];
                for (d, &y) in dst.iter_mut().zip(&bd[pb..pb + inner]) {
                    *d = f(x, y);
                }
            }
            _ => {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[pa + j * ia], bd[pb + j * ib]);
                }
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

/// ×2 resampling of the two trailing axes by a fixed separable stencil:
/// bilinear upsampling with half-pixel centers and edge clamping, or 2×2
/// average pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample2 {
    Up,
    Down,
}

impl Resample2 {
    /// `(output length, taps (out, in, weight))` along an axis of length `n`.
    fn taps(self, n: usize) -> (usize, Vec<(usize, usize, f64)>) {
        match self {
            Resample2::Up => {
                let mut t = Vec::with_capacity(4 * n);
                for k in 0..n {
                    t.push((2 * k, k.saturating_sub(1), 0.25));
                    t.push((2 * k, k, 0.75));
                    t.push((2 * k + 1, k, 0.75));
                    t.push((2 * k + 1, (k + 1).min(n - 1), 0.25));
                }
                (2 * n, t)
            }
            Resample2::Down => (n / 2, (0..n).map(|i| (i / 2, i, 0.5)).collect()),
        }
    }

    /// Taps of the operator, or of its transpose when `adjoint`, for an
    /// input axis of length `n`.
    fn taps_for(self, n: usize, adjoint: bool) -> (usize, Vec<(usize, usize, f64)>) {
        if !adjoint {
            return self.taps(n);
        }
        let m = match self {
            Resample2::Up => n / 2,
            Resample2::Down => n * 2,
        };
        let (_, t) = self.taps(m);
        (m, t.into_iter().map(|(o, i, w)| (i, o, w)).collect())
    }
}

fn apply_taps<T: Scalar>(src: &[T], outer: usize, n_in: usize, inner: usize, n_out: usize, taps: &[(usize, usize, f64)]) -> Vec<T> {
    let mut out = vec![T::zero(); outer * n_out * inner];
    let taps: Vec<(usize, usize, T)> = taps.iter().map(|&(o, i, w)| (o, i, T::of(w))).collect();
    if inner == 1 {
        for (s, d) in src.chunks_exact(n_in).zip(out.chunks_exact_mut(n_out)) {
            for &(ko, ki, w) in &taps {
                d[ko] = d[ko] + w * s[ki];
            }
        }
        return out;
    }
    for o in 0..outer {
        let (sb, db) = (o * n_in * inner, o * n_out * inner);
        for &(ko, ki, w) in &taps {
            let s = &src[sb + ki * inner..sb + (ki + 1) * inner];
            let d = &mut out[db + ko * inner..db + (ko + 1) * inner];
            for (d, &s) in d.iter_mut().zip(s) {
                *d = *d + w * s;
            }
        }
    }
    out
}

/// Applies `kind` (or its transpose) to the two trailing axes of `x`.
pub fn resample2<T: Scalar>(x: &Tensor<T>, kind: Resample2, adjoint: bool) -> Tensor<T> {
    let r = x.rank();
    assert!(r >= 2, "resample2 needs two trailing spatial axes");
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    let outer = numel(&x.shape[..r - 2]);
    let (h2, th) = kind.taps_for(h, adjoint);
    let (w2, tw) = kind.taps_for(w, adjoint);
    let rows = apply_taps(&x.data, outer, h, w, h2, &th);
    let data = apply_taps(&rows, outer * h2, w, 1, w2, &tw);
    let mut shape = x.shape.clone();
    shape[r - 2] = h2;
    shape[r - 1] = w2;
    Tensor::from_vec(&shape, data)
}

/// Gathers `src` through arbitrary strides into a fresh contiguous buffer.
pub fn strided_gather<T: Copy>(src: &[T], src_strides: &[usize], out_shape: &[usize]) -> Vec<T> {
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let (inner, inner_stride) = if rank == 0 { (1, 0) } else { (out_shape[rank - 1], src_strides[rank - 1]) };
    for_each_run(out_shape, src_strides, |_, base| {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else if inner_stride == 0 {
            out.extend(core::iter::repeat_n(src[base], inner));
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
    });
    out
}

/// Accumulates contiguous `src` (shaped `src_shape`) into `dst` addressed
/// through `dst_strides` (0 on reduced axes).
pub fn strided_scatter_add<T: Scalar>(src: &[T], src_shape: &[usize], dst: &mut [T], dst_strides: &[usize]) {
    let rank = src_shape.len();
    let (inner, inner_stride) = if rank == 0 { (1, 0) } else { (src_shape[rank - 1], dst_strides[rank - 1]) };
    for_each_run(src_shape, dst_strides, |o, base| {
        let run = &src[o..o + inner];
        if inner_stride == 1 {
            for (d, &s) in dst[base..base + inner].iter_mut().zip(run) {
                *d = *d + s;
            }
        } else if inner_stride == 0 {
            let mut acc = dst[base];
            for &s in run {
                acc = acc + s;
            }
            dst[base] = acc;
        } else {
            for (j, &s) in run.iter().enumerate() {
                let p = base + j * inner_stride;
                dst[p] = dst[p] + s;
            }
        }
    });
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Dimension {
                what: "tensor data",
                expected: numel(&shape),
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(numel(shape), data.len(), "data length does not match shape {shape:?}");
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: Vec::new(), data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::of(x.as_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let s = broadcast_strides(&self.shape, shape);
        Self { shape: shape.to_vec(), data: strided_gather(&self.data, &s, shape) }
    }

    /// Sums over leading axes and axes where `shape` has extent 1.
    pub fn sum_to(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let mut out = Self::zeros(shape);
        let s = broadcast_strides(shape, &self.shape);
        strided_scatter_add(&self.data, &self.shape, &mut out.data, &s);
        out
    }

    pub fn permute(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.rank());
        let src = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let s: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        Self { data: strided_gather(&self.data, &s, &out_shape), shape: out_shape }
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        assert!(start + len <= self.shape[axis]);
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let extent = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self { shape, data }
    }

    /// Zero-pads along `axis`.
    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Self {
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let extent = self.shape[axis];
        let new_extent = extent + before + after;
        let mut data = vec![T::zero(); outer * new_extent * inner];
        for o in 0..outer {
            let src = o * extent * inner;
            let dst = (o * new_extent + before) * inner;
            data[dst..dst + extent * inner].copy_from_slice(&self.data[src..src + extent * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = new_extent;
        Self { shape, data }
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        assert!(!parts.is_empty());
        let first = parts[0].shape();
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        for p in parts {
            assert_eq!(p.rank(), first.len());
            for d in 0..first.len() {
                if d != axis {
                    assert_eq!(p.shape[d], first[d], "concat shape mismatch");
                }
            }
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let e = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * e..(o + 1) * e]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Self { shape, data }
    }

    /// Batched matrix product over the last two axes with numpy-style batch
    /// broadcasting; `ta`/`tb` transpose the operand's last two axes.
    pub fn matmul(a: &Self, b: &Self, ta: bool, tb: bool) -> Self {
        assert!(a.rank() >= 2 && b.rank() >= 2, "matmul needs rank ≥ 2: {:?} {:?}", a.shape, b.shape);
        let (ar, ac) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
        let (br, bc) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner mismatch: {:?} (t={ta}) x {:?} (t={tb})", a.shape, b.shape);
        let a_batch = &a.shape[..a.rank() - 2];
        let b_batch = &b.shape[..b.rank() - 2];
        let batch = broadcast_shapes(a_batch, b_batch)
            .unwrap_or_else(|| panic!("matmul batch mismatch: {:?} x {:?}", a.shape, b.shape));
        let nb = numel(&batch);
        let a_off = batch_offsets(a_batch, &batch, ar * ac);
        let b_off = batch_offsets(b_batch, &batch, br * bc);
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let len = nb * m * n;
        if k == 0 {
            return Self { shape: out_shape, data: vec![T::zero(); len] };
        }
        // gemm with beta = 0 writes every element of C without reading it.
        let mut data: Vec<T> = Vec::with_capacity(len);
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        for i in 0..nb {
            // SAFETY: offsets and strides address in-bounds m×k, k×n and m×n blocks.
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    a.data.as_ptr().add(a_off[i]),
                    rsa,
                    csa,
                    b.data.as_ptr().add(b_off[i]),
                    rsb,
                    csb,
                    T::zero(),
                    data.as_mut_ptr().add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
        // SAFETY: the loop above initialized all `len` elements.
        unsafe { data.set_len(len) };
        Self { shape: out_shape, data }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }
}

fn batch_offsets(src_batch: &[usize], batch: &[usize], block: usize) -> Vec<usize> {
    let s = broadcast_strides(src_batch, batch);
    let idx: Vec<usize> = (0..numel(src_batch)).collect();
    strided_gather(&idx, &s, batch).into_iter().map(|i| i * block).collect()
}

/// Geometry of an unfold (im2col) over `[B, C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// `[B, C, H, W]` → `[B, C·k·k, Ho·Wo]`.
pub fn im2col<T: Scalar>(x: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
    let b = x.shape[0];
    assert_eq!(&x.shape[1..], &[g.channels, g.height, g.width], "im2col geometry mismatch");
    let (ho, wo) = (g.out_height(), g.out_width());
    let rows = g.patch_len();
    let mut out = vec![T::zero(); b * rows * ho * wo];
    let plane = g.height * g.width;
    for bi in 0..b {
        let xb = &x.data[bi * g.channels * plane..(bi + 1) * g.channels * plane];
        let ob = &mut out[bi * rows * ho * wo..(bi + 1) * rows * ho * wo];
        for c in 0..g.channels {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let r = (c * g.kernel + ky) * g.kernel + kx;
                    let orow = &mut ob[r * ho * wo..(r + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src = &xb[c * plane + iy as usize * g.width..c * plane + (iy as usize + 1) * g.width];
                        if g.stride == 1 {
                            let (lo, hi) = valid_span(kx, g.padding, g.width, wo);
                            if lo < hi {
                                let s0 = lo + kx - g.padding;
                                orow[oy * wo + lo..oy * wo + hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                            }
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                orow[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, rows, ho * wo], out)
}

/// Output columns `lo..hi` whose stride-1 input column `ox + kx − pad`
/// falls inside `0..width`.
fn valid_span(kx: usize, padding: usize, width: usize, wo: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(kx);
    let hi = (width + padding).saturating_sub(kx).min(wo);
    (lo, hi.max(lo))
}

/// Adjoint of [`im2col`]: `[B, C·k·k, Ho·Wo]` → `[B, C, H, W]`.
pub fn col2im<T: Scalar>(cols: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
    let b = cols.shape[0];
    let (ho, wo) = (g.out_height(), g.out_width());
    let rows = g.patch_len();
    assert_eq!(&cols.shape[1..], &[rows, ho * wo], "col2im geometry mismatch");
    let plane = g.height * g.width;
    let mut out = vec![T::zero(); b * g.channels * plane];
    for bi in 0..b {
        let cb = &cols.data[bi * rows * ho * wo..(bi + 1) * rows * ho * wo];
        let xb = &mut out[bi * g.channels * plane..(bi + 1) * g.channels * plane];
        for c in 0..g.channels {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let r = (c * g.kernel + ky) * g.kernel + kx;
                    let crow = &cb[r * ho * wo..(r + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let row = c * plane + iy as usize * g.width;
                        if g.stride == 1 {
                            let (lo, hi) = valid_span(kx, g.padding, g.width, wo);
                            if lo < hi {
                                let s0 = row + lo + kx - g.padding;
                                for (d, &v) in xb[s0..s0 + hi - lo].iter_mut().zip(&crow[oy * wo + lo..oy * wo + hi]) {
                                    *d = *d + v;
                                }
                            }
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                let p = row + ix as usize;
                                xb[p] = xb[p] + crow[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, g.channels, g.height, g.width], out)
}
