//! Two-branch patch discriminator over (image, mask) pairs.
//!
//! The image and the class mask each pass through their own convolutions
//! until `fusion_stage`, where the two feature maps are concatenated along
//! channels; the shared trunk then continues. Each stage is a convolution,
//! leaky ReLU and ×2 average pooling. Convolutions are 3×3 except the first
//! mask one, which is a 1×1 per-pixel class embedding. A 1×1 head produces a
//! patch score map whose spatial mean is the per-sample logit.
//!
//! With spectral normalization on, every convolution weight except the
//! score head is divided by its largest singular value, estimated with
//! persistent power-iteration vectors ([`SpectralState`]).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bias, Bound, ParamId, ParamStore, PowerVectors};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub num_classes: usize,
    /// Output width of each downsampling stage.
    pub channels: Vec<usize>,
    /// Stage whose input is the concatenation of both branches.
    pub fusion_stage: usize,
    pub spectral_norm: bool,
    /// Power iterations per training step.
    pub power_iterations: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            num_classes: 16,
            channels: vec![32, 64, 64, 64],
            fusion_stage: 1,
            spectral_norm: true,
            power_iterations: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn toy(num_classes: usize) -> Self {
        Self { num_classes, channels: vec![12, 16, 24, 32], ..Self::default() }
    }

    /// Side length of the score map.
    pub fn score_resolution(&self) -> usize {
        self.resolution >> self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 1 || self.num_classes > 256 {
            return bad("num_classes must be in 1..=256".into());
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be a non-empty list of positive widths".into());
        }
        if self.fusion_stage >= self.channels.len() {
            return bad(format!("fusion_stage {} must be below the stage count {}", self.fusion_stage, self.channels.len()));
        }
        let k = self.channels.len();
        if self.resolution == 0 || !self.resolution.is_multiple_of(1 << k) {
            return bad(format!("resolution {} is not divisible by 2^{k}", self.resolution));
        }
        if self.power_iterations == 0 && self.spectral_norm {
            return bad("power_iterations must be positive when spectral_norm is on".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Conv {
    name: String,
    weight: ParamId,
    bias: Bias,
    rows: usize,
    cols: usize,
    kernel: usize,
    /// Index into [`SpectralState::vectors`] when normalized.
    spectral: Option<usize>,
}

/// Power-iteration vectors of every normalized convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T> {
    pub names: Vec<String>,
    pub vectors: Vec<PowerVectors<T>>,
}

#[derive(Clone, Debug)]
struct Stage {
    image: Option<Conv>,
    mask: Option<Conv>,
    shared: Option<Conv>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    stages: Vec<Stage>,
    head: Conv,
}

impl Discriminator {
    pub fn new<T: Scalar>(config: DiscriminatorConfig, rng: &mut Rng64) -> Result<(Self, ParamStore<T>, SpectralState<T>)> {
        config.validate()?;
        let mut p = ParamStore::new();
        let mut sn = SpectralState { names: Vec::new(), vectors: Vec::new() };
        let normalize = config.spectral_norm;
        let mut conv = |p: &mut ParamStore<T>, rng: &mut Rng64, name: String, out: usize, inp: usize, kernel: usize, normalized: bool| {
            let cols = inp * kernel * kernel;
            let w = crate::rng::normal::<T>(rng, &[out, cols]);
            let weight = p.add(format!("{name}.weight"), w);
            let bias = nn::bias(p, format!("{name}.bias"), &[out], 0.0, 1.0);
            let spectral = if normalized {
                sn.names.push(name.clone());
                sn.vectors.push(PowerVectors::new(rng, out, cols));
                Some(sn.vectors.len() - 1)
            } else {
                None
            };
            Conv { name, weight, bias, rows: out, cols, kernel, spectral }
        };
        let mut stages = Vec::new();
        let (mut img_in, mut mask_in, mut shared_in) = (3, config.num_classes, 0);
        for (s, &ch) in config.channels.iter().enumerate() {
            let stage = if s < config.fusion_stage {
                let st = Stage {
                    image: Some(conv(&mut p, rng, format!("discriminator.s{s}.image"), ch, img_in, 3, normalize)),
                    // The mask stem is a per-pixel class embedding.
                    mask: Some(conv(&mut p, rng, format!("discriminator.s{s}.mask"), ch, mask_in, if s == 0 { 1 } else { 3 }, normalize)),
                    shared: None,
                };
                img_in = ch;
                mask_in = ch;
                st
            } else {
                let inp = if s == config.fusion_stage { img_in + mask_in } else { shared_in };
                Stage { image: None, mask: None, shared: Some(conv(&mut p, rng, format!("discriminator.s{s}.conv"), ch, inp, 3, normalize)) }
            };
            shared_in = ch;
            stages.push(stage);
        }
        let head = conv(&mut p, rng, "discriminator.head".into(), 1, shared_in, 1, false);
        Ok((Self { config, stages, head }, p, sn))
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.stages
            .iter()
            .flat_map(|s| [s.image.as_ref(), s.mask.as_ref(), s.shared.as_ref()])
            .flatten()
            .chain(core::iter::once(&self.head))
    }

    /// Advances every power-iteration pair by `iterations` steps.
    pub fn power_iterate<T: Scalar>(&self, params: &ParamStore<T>, sn: &mut SpectralState<T>, iterations: usize) {
        for c in self.convs() {
            if let Some(i) = c.spectral {
                sn.vectors[i].iterate(params.get(c.weight).data(), iterations);
            }
        }
    }

    /// The weights as used in the forward pass, `(name, [rows, cols])`:
    /// divided by `σ̂` when normalized, otherwise He-scaled. The score
    /// head is included last.
    pub fn effective_weights<T: Scalar>(&self, params: &ParamStore<T>, sn: &SpectralState<T>) -> Vec<(String, bool, Tensor<T>)> {
        self.convs()
            .map(|c| {
                let w = params.get(c.weight);
                let eff = match c.spectral {
                    Some(i) => {
                        let sigma = sn.vectors[i].sigma(w.data()).max(1e-12);
                        w.map(|x| T::of(x.as_f64() / sigma))
                    }
                    None => w.map(|x| T::of(x.as_f64() / libm::sqrt(c.cols as f64))),
                };
                (c.name.clone(), c.spectral.is_some(), eff)
            })
            .collect()
    }

    fn weight_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, sn: &SpectralState<T>, c: &Conv) -> Var {
        let w = p.var(c.weight);
        debug_assert_eq!(g.shape(w), &[c.rows, c.cols]);
        match c.spectral {
            Some(i) => nn::spectral_normalize_var(g, w, &sn.vectors[i]),
            None => g.scale(w, 1.0 / libm::sqrt(c.cols as f64)),
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, sn: &SpectralState<T>, c: &Conv, x: Var) -> Var {
        let w = self.weight_var(g, p, sn, c);
        let y = nn::conv2d(g, x, w, c.kernel);
        let b = c.bias.var(g, p);
        nn::add_channel_bias(g, y, b)
    }

    /// `image [B, 3, H, W]`, `mask [B, C, H, W]` → score map `[B, 1, r, r]`.
    pub fn forward_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, sn: &SpectralState<T>, image: Var, mask: Var) -> Var {
        let (mut xi, mut xm) = (image, mask);
        let mut x = None;
        for (s, st) in self.stages.iter().enumerate() {
            if s == self.config.fusion_stage {
                x = Some(g.concat(&[xi, xm], 1));
            }
            if let (Some(ci), Some(cm)) = (&st.image, &st.mask) {
                let yi = self.apply(g, p, sn, ci, xi);
                let yi = nn::lrelu(g, yi);
                xi = nn::downsample2(g, yi);
                let ym = self.apply(g, p, sn, cm, xm);
                let ym = nn::lrelu(g, ym);
                xm = nn::downsample2(g, ym);
            } else if let Some(c) = &st.shared {
                let y = self.apply(g, p, sn, c, x.expect("fused before shared stages"));
                let y = nn::lrelu(g, y);
                x = Some(nn::downsample2(g, y));
            }
        }
        self.apply(g, p, sn, &self.head, x.expect("at least one shared stage"))
    }

    /// Per-sample logits `[B]`: the mean of each score map.
    pub fn logits_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, sn: &SpectralState<T>, image: Var, mask: Var) -> Var {
        let map = self.forward_var(g, p, sn, image, mask);
        let b = g.shape(map)[0];
        let flat = g.reshape(map, &[b, self.config.score_resolution() * self.config.score_resolution()]);
        let m = g.mean_axis(flat, 1);
        g.reshape(m, &[b])
    }

    fn check_inputs<T: Scalar>(&self, image: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
        let r = self.config.resolution;
        let b = image.shape().first().copied().unwrap_or(0);
        if image.shape() != [b, 3, r, r] {
            return Err(Error::Shape { expected: vec![b, 3, r, r], got: image.shape().to_vec() });
        }
        let c = self.config.num_classes;
        if mask.shape() != [b, c, r, r] {
            return Err(Error::Shape { expected: vec![b, c, r, r], got: mask.shape().to_vec() });
        }
        Ok(())
    }

    /// Patch score map `[B, 1, r, r]`.
    pub fn discriminate<T: Scalar>(&self, params: &ParamStore<T>, sn: &SpectralState<T>, image: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_inputs(image, mask)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let i = g.constant(image.clone());
        let m = g.constant(mask.clone());
        let out = self.forward_var(&mut g, &p, sn, i, m);
        Ok(g.value(out).clone())
    }
}

/// Blends a one-hot mask `[.., C, H, W]` (class axis at `class_axis`) with
/// uniform noise in `[0, noise)` and renormalizes each pixel to sum to one.
pub fn soften_real_mask<T: Scalar>(one_hot: &Tensor<T>, class_axis: usize, noise: f64, rng: &mut Rng64) -> Tensor<T> {
    let shape = one_hot.shape().to_vec();
    let c = shape[class_axis];
    let inner: usize = shape[class_axis + 1..].iter().product();
    let outer: usize = shape[..class_axis].iter().product();
    let noisy = crate::rng::uniform::<T>(rng, &shape, 0.0, noise);
    let mut out = one_hot.zip_map(&noisy, |a, b| a + b);
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * c * inner + i;
            let sum: T = (0..c).map(|k| data[base + k * inner]).sum();
            for k in 0..c {
                data[base + k * inner] = data[base + k * inner] / sum;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(spectral_norm: bool) -> DiscriminatorConfig {
        DiscriminatorConfig { resolution: 16, num_classes: 3, channels: vec![4, 6, 8], fusion_stage: 1, spectral_norm, power_iterations: 1 }
    }

    #[test]
    fn score_map_shape() {
        let mut rng = crate::rng::seeded(1);
        let (d, p, sn) = Discriminator::new::<f64>(small(true), &mut rng).unwrap();
        let img = crate::rng::normal::<f64>(&mut rng, &[2, 3, 16, 16]);
        let mask = Tensor::full(&[2, 3, 16, 16], 1.0 / 3.0);
        let s = d.discriminate(&p, &sn, &img, &mask).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert!(s.is_finite());
    }

    #[test]
    fn head_is_the_only_unnormalized_conv() {
        let mut rng = crate::rng::seeded(2);
        let (d, p, sn) = Discriminator::new::<f64>(small(true), &mut rng).unwrap();
        let w = d.effective_weights(&p, &sn);
        // stage 0 has two branches, then two shared stages, then the head
        assert_eq!(w.len(), 5);
        assert!(w[..4].iter().all(|(_, n, _)| *n));
        assert!(!w[4].1 && w[4].0 == "discriminator.head");
        let (_, _, sn_off) = Discriminator::new::<f64>(small(false), &mut rng).unwrap();
        assert!(sn_off.vectors.is_empty());
    }

    #[test]
    fn fusion_at_input() {
        let mut rng = crate::rng::seeded(3);
        let cfg = DiscriminatorConfig { fusion_stage: 0, ..small(true) };
        let (d, p, sn) = Discriminator::new::<f64>(cfg, &mut rng).unwrap();
        let img = Tensor::zeros(&[1, 3, 16, 16]);
        let mask = Tensor::full(&[1, 3, 16, 16], 1.0 / 3.0);
        assert_eq!(d.discriminate(&p, &sn, &img, &mask).unwrap().shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn rejects_bad_shapes_and_configs() {
        let mut rng = crate::rng::seeded(4);
        let (d, p, sn) = Discriminator::new::<f64>(small(true), &mut rng).unwrap();
        let img = Tensor::zeros(&[1, 3, 16, 16]);
        let mask = Tensor::zeros(&[1, 4, 16, 16]);
        assert!(matches!(d.discriminate(&p, &sn, &img, &mask), Err(Error::Shape { .. })));
        assert!(Discriminator::new::<f64>(DiscriminatorConfig { fusion_stage: 3, ..small(true) }, &mut rng).is_err());
        assert!(Discriminator::new::<f64>(DiscriminatorConfig { resolution: 12, ..small(true) }, &mut rng).is_err());
    }

    #[test]
    fn soft_real_mask_sums_to_one() {
        let mut rng = crate::rng::seeded(5);
        let mut oh = Tensor::<f64>::zeros(&[2, 4, 3, 3]);
        for b in 0..2 {
            for i in 0..9 {
                oh.data_mut()[b * 36 + (i % 4) * 9 + i] = 1.0;
            }
        }
        let m = soften_real_mask(&oh, 1, 0.05, &mut rng);
        for b in 0..2 {
            for i in 0..9 {
                let s: f64 = (0..4).map(|k| m.data()[b * 36 + k * 9 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                let hot = m.data()[b * 36 + (i % 4) * 9 + i];
                assert!(hot > 0.8);
            }
        }
    }
}
