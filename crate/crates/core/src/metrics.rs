//! Fréchet distance between feature distributions, mIoU, a frozen random
//! feature extractor for proxy-FID, and a small trainable segmenter.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::grouping::{one_hot, LabelMap};
use crate::linalg;
use crate::nn::{self, Adam, EqWeight, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Mean and unbiased covariance of a feature sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub cov: Vec<f64>,
    pub dim: usize,
    pub count: usize,
}

impl FeatureStats {
    /// From `n` row-major feature vectors of length `dim`.
    pub fn from_rows(data: &[f64], n: usize, dim: usize) -> Result<Self> {
        if data.len() != n * dim {
            return Err(Error::Dimension { what: "feature matrix", expected: n * dim, got: data.len() });
        }
        if n < dim + 1 {
            return Err(Error::TooFewSamples { needed: dim + 1, got: n });
        }
        let mut mean = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; dim * dim];
        let mut centered = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
                *c = v - m;
            }
            for i in 0..dim {
                let ci = centered[i];
                for j in i..dim {
                    cov[i * dim + j] += ci * centered[j];
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / (n - 1) as f64;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        Ok(Self { mean, cov, dim, count: n })
    }

    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Dimension { what: "feature vector", expected: dim, got: bad.len() });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_rows(&flat, rows.len(), dim)
    }
}

const SYMMETRY_TOL: f64 = 1e-9;
const NEGATIVE_EIG_TOL: f64 = 1e-6;

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`.
///
/// The trace of the square root is taken from the eigenvalues of the
/// symmetric product `Σa^{1/2} Σb Σa^{1/2}`, which shares its spectrum with
/// `Σa Σb`. Eigenvalues in `(−1e−6, 0)` are treated as zero; the final
/// value is clamped at zero against rounding.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Dimension { what: "feature stats", expected: a.dim, got: b.dim });
    }
    let n = a.dim;
    for s in [a, b] {
        let scale = s.cov.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let asym = linalg::asymmetry(&s.cov, n);
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric(asym));
        }
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace = |c: &[f64]| (0..n).map(|i| c[i * n + i]).sum::<f64>();
    let sa = linalg::sym_sqrt(&a.cov, n);
    let prod = linalg::matmul(&linalg::matmul(&sa, &b.cov, n, n, n), &sa, n, n, n);
    let e = linalg::sym_eigen(&prod, n);
    let scale = e.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut root_trace = 0.0;
    for &lam in &e.values {
        if lam < -NEGATIVE_EIG_TOL * scale {
            return Err(Error::NotPositiveSemidefinite(lam));
        }
        root_trace += libm::sqrt(lam.max(0.0));
    }
    Ok((mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * root_trace).max(0.0))
}

/// Maps a batch of images `[B, 3, H, W]` in `[-1, 1]` to feature vectors.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    /// Row-major `[B, dim]`.
    fn extract(&self, images: &Tensor<f32>) -> Result<Vec<f64>>;
}

/// Raw pixel values as features.
#[derive(Clone, Copy, Debug)]
pub struct PixelFlatten {
    pub resolution: usize,
}

impl FeatureExtractor for PixelFlatten {
    fn dim(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    fn extract(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
        let r = self.resolution;
        let b = images.shape().first().copied().unwrap_or(0);
        if images.shape() != [b, 3, r, r] {
            return Err(Error::Shape { expected: vec![b, 3, r, r], got: images.shape().to_vec() });
        }
        Ok(images.to_f64_vec())
    }
}

/// Seed of the shipped proxy extractor; changing it changes every
/// reported proxy-FID.
pub const PROXY_SEED: u64 = 0x5eed_f1d0;

/// Frozen, randomly initialized conv net: three conv/ReLU/pool stages,
/// then average pooling to a 2×2 grid. Weights are a pure function of
/// [`PROXY_SEED`].
#[derive(Clone, Debug)]
pub struct ProxyExtractor {
    params: ParamStore<f32>,
    convs: Vec<(EqWeight, usize)>,
    resolution: usize,
}

const PROXY_CHANNELS: [usize; 3] = [16, 32, 32];
const PROXY_GRID: usize = 2;
const PROXY_CHUNK: usize = 64;

impl ProxyExtractor {
    pub fn new(resolution: usize) -> Result<Self> {
        if !resolution.is_power_of_two() || resolution < 8 * PROXY_GRID {
            return Err(Error::Config(alloc::format!("proxy extractor needs a power-of-two resolution ≥ 16, got {resolution}")));
        }
        let mut r = rng::seeded(PROXY_SEED);
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut inp = 3;
        for (i, &ch) in PROXY_CHANNELS.iter().enumerate() {
            let w = nn::eq_weight(&mut params, &mut r, alloc::format!("proxy.conv{i}"), &[ch, inp * 9], inp * 9, 1.0);
            convs.push((w, ch));
            inp = ch;
        }
        Ok(Self { params, convs, resolution })
    }
}

impl FeatureExtractor for ProxyExtractor {
    fn dim(&self) -> usize {
        PROXY_CHANNELS[PROXY_CHANNELS.len() - 1] * PROXY_GRID * PROXY_GRID
    }

    fn extract(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
        let r = self.resolution;
        let b = images.shape().first().copied().unwrap_or(0);
        if images.shape() != [b, 3, r, r] {
            return Err(Error::Shape { expected: vec![b, 3, r, r], got: images.shape().to_vec() });
        }
        let mut out = Vec::with_capacity(b * self.dim());
        let mut start = 0;
        while start < b {
            let len = PROXY_CHUNK.min(b - start);
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let mut x = g.constant(images.narrow(0, start, len));
            for (w, _) in &self.convs {
                let wv = w.var(&mut g, &p);
                let y = nn::conv2d(&mut g, x, wv, 3);
                let y = nn::lrelu(&mut g, y);
                x = nn::downsample2(&mut g, y);
            }
            while g.shape(x)[3] > PROXY_GRID {
                x = nn::downsample2(&mut g, x);
            }
            out.extend(g.value(x).to_f64_vec());
            start += len;
        }
        Ok(out)
    }
}

/// Feature statistics of `images [B, 3, H, W]` under `extractor`.
pub fn feature_stats(images: &Tensor<f32>, extractor: &dyn FeatureExtractor) -> Result<FeatureStats> {
    let b = images.shape().first().copied().unwrap_or(0);
    let feats = extractor.extract(images)?;
    FeatureStats::from_rows(&feats, b, extractor.dim())
}

fn check_pair(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape { expected: vec![gt.height(), gt.width()], got: vec![pred.height(), pred.width()] });
    }
    for m in [pred, gt] {
        if let Some(&v) = m.values().iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::LabelOutOfRange { value: v as usize, num_classes });
        }
    }
    Ok(())
}

/// Intersection and union pixel counts per class, accumulated over pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(num_classes: usize) -> Self {
        Self { intersection: vec![0; num_classes], union: vec![0; num_classes] }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        check_pair(pred, gt, self.intersection.len())?;
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            let (p, g) = (p as usize, g as usize);
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    /// Mean IoU over classes with a non-empty union; `None` if there are
    /// none.
    pub fn mean(&self) -> Option<f64> {
        let present: Vec<f64> =
            self.intersection.iter().zip(&self.union).filter(|(_, &u)| u > 0).map(|(&i, &u)| i as f64 / u as f64).collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Mean over classes present in `gt ∪ pred` of intersection over union.
pub fn miou(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<f64> {
    let mut c = IouCounts::new(num_classes);
    c.add(pred, gt)?;
    c.mean().ok_or(Error::Shape { expected: vec![1, 1], got: vec![gt.height(), gt.width()] })
}

/// Dataset-level mIoU: counts are pooled over all pairs before dividing.
pub fn miou_dataset(pairs: &[(LabelMap, LabelMap)], num_classes: usize) -> Result<f64> {
    let mut c = IouCounts::new(num_classes);
    for (p, g) in pairs {
        c.add(p, g)?;
    }
    c.mean().ok_or(Error::TooFewSamples { needed: 1, got: 0 })
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / libm::sqrt(vx * vy)
}

/// Predicts a label map per image.
pub trait Segmenter {
    fn num_classes(&self) -> usize;
    fn segment(&self, images: &Tensor<f32>) -> Result<Vec<LabelMap>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmenterConfig {
    pub num_classes: usize,
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl SegmenterConfig {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, width: 16, steps: 300, batch_size: 8, lr: 5e-3, seed: 0 }
    }
}

/// Three 3×3 conv layers and a 1×1 classifier at full resolution.
#[derive(Clone, Debug)]
pub struct ConvSegmenter {
    pub params: ParamStore<f32>,
    convs: Vec<(EqWeight, nn::Bias, usize)>,
    num_classes: usize,
}

impl ConvSegmenter {
    pub fn new(num_classes: usize, width: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut inp = 3;
        for i in 0..3 {
            let w = nn::eq_weight(&mut params, &mut r, alloc::format!("segmenter.conv{i}.weight"), &[width, inp * 9], inp * 9, 1.0);
            let b = nn::bias(&mut params, alloc::format!("segmenter.conv{i}.bias"), &[width], 0.0, 1.0);
            convs.push((w, b, 3));
            inp = width;
        }
        let w = nn::eq_weight(&mut params, &mut r, "segmenter.classifier.weight", &[num_classes, width], width, 1.0);
        let b = nn::bias(&mut params, "segmenter.classifier.bias", &[num_classes], 0.0, 1.0);
        convs.push((w, b, 1));
        Self { params, convs, num_classes }
    }

    /// Rebuilds the layout and takes weights from `params` by name.
    pub fn from_params(num_classes: usize, width: usize, params: &ParamStore<f32>) -> Result<Self> {
        let mut s = Self::new(num_classes, width, 0);
        s.params.load_from(params)?;
        Ok(s)
    }

    fn logits(&self, g: &mut Graph<f32>, p: &nn::Bound, images: crate::autodiff::Var) -> crate::autodiff::Var {
        let mut x = images;
        let last = self.convs.len() - 1;
        for (i, (w, b, k)) in self.convs.iter().enumerate() {
            let wv = w.var(g, p);
            let bv = b.var(g, p);
            let y = nn::conv2d(g, x, wv, *k);
            let y = nn::add_channel_bias(g, y, bv);
            x = if i == last { y } else { nn::lrelu(g, y) };
        }
        x
    }

    /// Fits per-pixel cross-entropy on `(images [N, 3, H, W], labels)`.
    pub fn train(config: &SegmenterConfig, images: &Tensor<f32>, labels: &[LabelMap]) -> Result<Self> {
        let n = labels.len();
        if images.shape().first() != Some(&n) || n == 0 {
            return Err(Error::Dimension { what: "segmenter training pairs", expected: n, got: images.shape().first().copied().unwrap_or(0) });
        }
        let mut seg = Self::new(config.num_classes, config.width, config.seed);
        let targets: Vec<Tensor<f32>> = labels.iter().map(one_hot).collect();
        let mut adam = Adam::new(&seg.params, config.lr, 0.9, 0.99, 1e-8);
        let mut order = rng::seeded(config.seed ^ 0x5e6);
        let bs = config.batch_size.min(n).max(1);
        for _ in 0..config.steps {
            let idx: Vec<usize> = (0..bs).map(|_| rand::Rng::random_range(&mut order, 0..n)).collect();
            let imgs: Vec<Tensor<f32>> = idx.iter().map(|&i| images.narrow(0, i, 1)).collect();
            let tg: Vec<Tensor<f32>> = idx.iter().map(|&i| {
                let t = &targets[i];
                let mut s = vec![1];
                s.extend_from_slice(t.shape());
                t.clone().reshape(&s)
            }).collect();
            let x = Tensor::concat(&imgs.iter().collect::<Vec<_>>(), 0);
            let y = Tensor::concat(&tg.iter().collect::<Vec<_>>(), 0);
            for t in &tg {
                if t.shape()[1] != config.num_classes {
                    return Err(Error::Dimension { what: "label classes", expected: config.num_classes, got: t.shape()[1] });
                }
            }
            let mut g = Graph::new();
            let p = seg.params.bind(&mut g, true);
            let xv = g.constant(x);
            let yv = g.constant(y);
            let logits = seg.logits(&mut g, &p, xv);
            let logp = g.log_softmax(logits, 1);
            let ll = g.mul(logp, yv);
            let ll = g.mean_all(ll);
            let loss = g.scale(ll, -(config.num_classes as f64));
            let grads = g.grad(loss, p.vars());
            let grads: Vec<Tensor<f32>> = grads.iter().map(|&v| g.value(v).clone()).collect();
            adam.update(&mut seg.params, &grads);
        }
        Ok(seg)
    }
}

impl Segmenter for ConvSegmenter {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn segment(&self, images: &Tensor<f32>) -> Result<Vec<LabelMap>> {
        if images.rank() != 4 || images.shape()[1] != 3 {
            return Err(Error::Shape { expected: vec![0, 3, 0, 0], got: images.shape().to_vec() });
        }
        let b = images.shape()[0];
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let x = g.constant(images.narrow(0, i, 1));
            let l = self.logits(&mut g, &p, x);
            let t = g.value(l).clone();
            let s = t.shape().to_vec();
            out.push(crate::grouping::argmax_map(&t.reshape(&s[1..]))?);
        }
        Ok(out)
    }
}

/// Boxed extractor chosen by name: `proxy` or `pixels`.
pub fn extractor_by_name(name: &str, resolution: usize) -> Result<Box<dyn FeatureExtractor>> {
    match name {
        "proxy" => Ok(Box::new(ProxyExtractor::new(resolution)?)),
        "pixels" => Ok(Box::new(PixelFlatten { resolution })),
        other => Err(Error::Config(alloc::format!("unknown feature extractor `{other}` (expected `proxy` or `pixels`)"))),
    }
}
