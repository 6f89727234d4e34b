//! Compositional generator.
//!
//! `z` is mapped to three latent components `(w_base, w_shape, w_texture)`.
//! Every class `c` owns a local generator with ten style-modulated layers;
//! the style of layer `l` is produced by a per-(class, layer) head from one
//! component: layers 0–1 read `w_base`, 2–5 read `w_shape`, 6–9 read
//! `w_texture`. The depth map `d^c` is taken after layer 5, so it never
//! sees texture styles. Per-pixel softmax over the depth maps gives the
//! coarse mask `m`, which weights the class features into one feature map
//! `f`; the renderer upsamples `f` to the final image and mask.
//!
//! All classes are evaluated together in tensors shaped `[B, C, ...]`; no
//! operation mixes the class axis before [`compose`](Generator::compose_var),
//! so per-class results are bit-identical to evaluating a class alone.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bias, Bound, EqWeight, Linear, ParamStore};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Style-modulated layers per local generator.
pub const NUM_LAYERS: usize = 10;
/// Last layer on the depth path; its styles drive shape edits.
pub const SHAPE_EDIT_LAYER: usize = 5;
/// Last texture layer; its styles drive texture edits.
pub const TEXTURE_EDIT_LAYER: usize = 9;

const DEMOD_EPS: f64 = 1e-8;
const MAPPING_LR_MUL: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LatentComponent {
    Base,
    Shape,
    Texture,
}

impl LatentComponent {
    pub const ALL: [LatentComponent; 3] = [LatentComponent::Base, LatentComponent::Shape, LatentComponent::Texture];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn layers(self) -> Range<usize> {
        match self {
            LatentComponent::Base => 0..2,
            LatentComponent::Shape => 2..6,
            LatentComponent::Texture => 6..10,
        }
    }

    pub fn of_layer(layer: usize) -> Self {
        match layer {
            0..=1 => LatentComponent::Base,
            2..=5 => LatentComponent::Shape,
            _ => LatentComponent::Texture,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct GeneratorConfig {
    pub num_classes: usize,
    /// Length of `z` and of each latent component.
    pub latent_dim: usize,
    /// Length of each style vector, equal to the local generator width.
    pub style_dim: usize,
    /// Shared fully connected layers before the three component heads.
    pub mapping_layers: usize,
    pub coarse_resolution: usize,
    pub output_resolution: usize,
    pub fourier_features: usize,
    /// Channels of `f^c` and of the fused map `f`.
    pub feature_channels: usize,
    /// Width of each ×2 renderer stage.
    pub renderer_channels: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_classes: 16,
            latent_dim: 64,
            style_dim: 64,
            mapping_layers: 2,
            coarse_resolution: 16,
            output_resolution: 64,
            fourier_features: 32,
            feature_channels: 64,
            renderer_channels: vec![64, 32],
        }
    }
}

impl GeneratorConfig {
    /// Small widths for laptop-scale training on the toy corpus.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            num_classes,
            latent_dim: 32,
            style_dim: 16,
            mapping_layers: 2,
            coarse_resolution: 16,
            output_resolution: 64,
            fourier_features: 16,
            feature_channels: 16,
            renderer_channels: vec![16, 8],
        }
    }

    /// Number of ×2 renderer stages, `log2(output / coarse)`.
    pub fn upsampling_stages(&self) -> usize {
        let mut k = 0;
        let mut r = self.coarse_resolution;
        while r < self.output_resolution {
            r *= 2;
            k += 1;
        }
        k
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_classes < 1 || self.num_classes > 256 {
            return bad("num_classes must be in 1..=256");
        }
        if self.latent_dim == 0 || self.style_dim == 0 || self.feature_channels == 0 {
            return bad("latent_dim, style_dim and feature_channels must be positive");
        }
        if self.fourier_features == 0 || !self.fourier_features.is_multiple_of(2) {
            return bad("fourier_features must be a positive even number");
        }
        if self.coarse_resolution < 2 {
            return bad("coarse_resolution must be at least 2");
        }
        let k = self.upsampling_stages();
        if self.coarse_resolution << k != self.output_resolution {
            return Err(Error::Config(format!(
                "output_resolution {} is not coarse_resolution {} times a power of two",
                self.output_resolution, self.coarse_resolution
            )));
        }
        if self.renderer_channels.len() != k {
            return Err(Error::Config(format!(
                "renderer_channels needs {k} entries for {}→{}, got {}",
                self.coarse_resolution,
                self.output_resolution,
                self.renderer_channels.len()
            )));
        }
        if self.renderer_channels.contains(&0) {
            return bad("renderer_channels must be positive");
        }
        Ok(())
    }
}

/// Fixed sine/cosine positional encoding of the coarse grid, `[F, R·R]`.
///
/// Frequencies lie on a sunflower spiral with radius up to a quarter of the
/// grid's Nyquist rate, so the encoding is deterministic and alias-free.
pub fn fourier_grid<T: Scalar>(features: usize, resolution: usize) -> Tensor<T> {
    let half = features / 2;
    let golden = core::f64::consts::PI * (3.0 - libm::sqrt(5.0));
    let max_freq = resolution as f64 / 4.0;
    let plane = resolution * resolution;
    let mut data = vec![T::zero(); features * plane];
    for i in 0..half {
        let radius = max_freq * libm::sqrt((i as f64 + 0.5) / half as f64);
        let angle = i as f64 * golden;
        let (fx, fy) = (radius * libm::cos(angle), radius * libm::sin(angle));
        for y in 0..resolution {
            for x in 0..resolution {
                let cx = (x as f64 + 0.5) / resolution as f64 * 2.0 - 1.0;
                let cy = (y as f64 + 0.5) / resolution as f64 * 2.0 - 1.0;
                let phase = core::f64::consts::PI * (fx * cx + fy * cy);
                data[(2 * i) * plane + y * resolution + x] = T::of(libm::sin(phase));
                data[(2 * i + 1) * plane + y * resolution + x] = T::of(libm::cos(phase));
            }
        }
    }
    Tensor::from_vec(&[features, plane], data)
}

/// Factorized latent of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTriple<T> {
    pub z: Vec<T>,
    pub base: Vec<T>,
    pub shape: Vec<T>,
    pub texture: Vec<T>,
}

impl<T: Scalar> LatentTriple<T> {
    pub fn component(&self, c: LatentComponent) -> &[T] {
        match c {
            LatentComponent::Base => &self.base,
            LatentComponent::Shape => &self.shape,
            LatentComponent::Texture => &self.texture,
        }
    }

    pub fn component_mut(&mut self, c: LatentComponent) -> &mut Vec<T> {
        match c {
            LatentComponent::Base => &mut self.base,
            LatentComponent::Shape => &mut self.shape,
            LatentComponent::Texture => &mut self.texture,
        }
    }
}

/// Which triple drives each class of one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Latents<T> {
    Shared(LatentTriple<T>),
    PerClass(Vec<LatentTriple<T>>),
}

impl<T: Scalar> Latents<T> {
    pub fn triple_for(&self, class: usize) -> &LatentTriple<T> {
        match self {
            Latents::Shared(t) => t,
            Latents::PerClass(v) => &v[class],
        }
    }

    /// Expands to one triple per class.
    pub fn per_class(&self, num_classes: usize) -> Vec<LatentTriple<T>> {
        (0..num_classes).map(|c| self.triple_for(c).clone()).collect()
    }
}

/// Style vectors `s_{c,l}` for a batch: one `[B, C, S]` tensor per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleBank<T> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Scalar> StyleBank<T> {
    pub fn batch(&self) -> usize {
        self.layers[0].shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.layers[0].shape()[1]
    }

    pub fn style_dim(&self) -> usize {
        self.layers[0].shape()[2]
    }

    pub fn get(&self, sample: usize, class: usize, layer: usize) -> &[T] {
        let (c, s) = (self.num_classes(), self.style_dim());
        let off = (sample * c + class) * s;
        &self.layers[layer].data()[off..off + s]
    }

    pub fn get_mut(&mut self, sample: usize, class: usize, layer: usize) -> &mut [T] {
        let (c, s) = (self.num_classes(), self.style_dim());
        let off = (sample * c + class) * s;
        &mut self.layers[layer].data_mut()[off..off + s]
    }
}

/// Every intermediate of one synthesis pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositionResult<T> {
    /// `d^c`, `[B, C, R, R]`.
    pub depth: Tensor<T>,
    /// `f^c`, `[B, C, F, R, R]`.
    pub features: Tensor<T>,
    /// Coarse mask `m`, `[B, C, R, R]`; sums to one over classes.
    pub mask: Tensor<T>,
    /// Fused features `f`, `[B, F, R, R]`.
    pub fused: Tensor<T>,
    /// `x̂`, `[B, 3, O, O]` in `[-1, 1]`.
    pub image: Tensor<T>,
    /// `m̂`, `[B, C, O, O]`; sums to one over classes.
    pub final_mask: Tensor<T>,
}

/// Graph handles of a synthesis pass.
#[derive(Clone, Copy, Debug)]
pub struct CompositionVars {
    pub depth: Var,
    pub features: Var,
    pub mask: Var,
    pub log_mask: Var,
    pub fused: Var,
    pub image: Var,
    pub final_mask: Var,
}

#[derive(Clone, Copy, Debug)]
struct ClassLayer {
    weight: EqWeight,
    bias: Bias,
}

#[derive(Clone, Debug)]
struct RenderStage {
    conv: ClassLayer,
    to_rgb: ClassLayer,
    to_seg: ClassLayer,
}

/// Architecture and parameter layout; weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Generator<T> {
    config: GeneratorConfig,
    fourier: Tensor<T>,
    mapping: Vec<Linear>,
    heads: [Linear; 3],
    style_heads: Vec<ClassLayer>,
    input_proj: EqWeight,
    layers: Vec<ClassLayer>,
    depth_head: ClassLayer,
    feature_head: ClassLayer,
    to_rgb0: ClassLayer,
    to_seg0: ClassLayer,
    stages: Vec<RenderStage>,
}

fn zero_layer<T: Scalar>(store: &mut ParamStore<T>, name: &str, shape: &[usize], fan_in: usize) -> ClassLayer {
    let id = store.add(format!("{name}.weight"), Tensor::zeros(shape));
    let weight = EqWeight { id, scale: 1.0 / libm::sqrt(fan_in as f64) };
    let bshape = &shape[..shape.len() - 1];
    let bias = nn::bias(store, format!("{name}.bias"), bshape, 0.0, 1.0);
    ClassLayer { weight, bias }
}

fn rand_layer<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng64,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    bias_init: f64,
) -> ClassLayer {
    let weight = nn::eq_weight(store, rng, format!("{name}.weight"), shape, fan_in, 1.0);
    let bias = nn::bias(store, format!("{name}.bias"), &shape[..shape.len() - 1], bias_init, 1.0);
    ClassLayer { weight, bias }
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, rng: &mut Rng64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut p = ParamStore::new();
        let (c, d, s, f) = (config.num_classes, config.latent_dim, config.style_dim, config.feature_channels);
        let mapping = (0..config.mapping_layers)
            .map(|i| Linear::new(&mut p, rng, &format!("generator.mapping.fc{i}"), d, d, MAPPING_LR_MUL, 0.0))
            .collect();
        let heads = [
            Linear::new(&mut p, rng, "generator.mapping.base", d, d, MAPPING_LR_MUL, 0.0),
            Linear::new(&mut p, rng, "generator.mapping.shape", d, d, MAPPING_LR_MUL, 0.0),
            Linear::new(&mut p, rng, "generator.mapping.texture", d, d, MAPPING_LR_MUL, 0.0),
        ];
        let style_heads = (0..NUM_LAYERS)
            .map(|l| rand_layer(&mut p, rng, &format!("generator.style.l{l}"), &[c, s, d], d, 1.0))
            .collect();
        let input_proj = nn::eq_weight(&mut p, rng, "generator.input.weight", &[s, config.fourier_features], config.fourier_features, 1.0);
        let layers = (0..NUM_LAYERS)
            .map(|l| rand_layer(&mut p, rng, &format!("generator.local.l{l}"), &[c, s, s], s, 0.0))
            .collect();
        let depth_head = zero_layer(&mut p, "generator.local.depth", &[c, 1, s], s);
        let feature_head = rand_layer(&mut p, rng, "generator.local.feature", &[c, f, s], s, 0.0);
        let to_rgb0 = rand_layer(&mut p, rng, "generator.render.rgb0", &[3, f], f, 0.0);
        let to_seg0 = zero_layer(&mut p, "generator.render.seg0", &[c, f], f);
        let mut stages = Vec::new();
        let mut prev = f;
        for (k, &ch) in config.renderer_channels.iter().enumerate() {
            let i = k + 1;
            stages.push(RenderStage {
                conv: rand_layer(&mut p, rng, &format!("generator.render.conv{i}"), &[ch, prev * 9], prev * 9, 0.0),
                to_rgb: rand_layer(&mut p, rng, &format!("generator.render.rgb{i}"), &[3, ch], ch, 0.0),
                to_seg: zero_layer(&mut p, &format!("generator.render.seg{i}"), &[c, ch], ch),
            });
            prev = ch;
        }
        let fourier = fourier_grid(config.fourier_features, config.coarse_resolution);
        let g = Self {
            config,
            fourier,
            mapping,
            heads,
            style_heads,
            input_proj,
            layers,
            depth_head,
            feature_head,
            to_rgb0,
            to_seg0,
            stages,
        };
        Ok((g, p))
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn fourier(&self) -> &Tensor<T> {
        &self.fourier
    }

    // ---- graph-level forward passes ----

    /// `z [B, D]` → `[w_base, w_shape, w_texture]`, each `[B, D]`.
    pub fn map_latent_var(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> [Var; 3] {
        // pixel norm
        let sq = g.square(z);
        let ms = g.mean_axis(sq, 1);
        let ms = g.add_scalar(ms, 1e-8);
        let inv = g.powf(ms, -0.5);
        let mut x = g.mul(z, inv);
        for fc in &self.mapping {
            let y = fc.forward(g, p, x);
            x = nn::lrelu(g, y);
        }
        self.heads.map(|h| {
            let y = h.forward(g, p, x);
            nn::lrelu(g, y)
        })
    }

    fn class_weight(&self, g: &mut Graph<T>, p: &Bound, layer: &ClassLayer, classes: &Range<usize>) -> (Var, Var) {
        let mut w = layer.weight.var(g, p);
        let mut b = layer.bias.var(g, p);
        if classes.len() != self.config.num_classes {
            w = g.narrow(w, 0, classes.start, classes.len());
            b = g.narrow(b, 0, classes.start, classes.len());
        }
        (w, b)
    }

    /// Per-class latents `[B, K, D]` (one per component) → styles of every
    /// layer, each `[B, K, S]`, for the classes in `classes` (`K` of them).
    pub fn styles_var(&self, g: &mut Graph<T>, p: &Bound, w: &[Var; 3], classes: Range<usize>) -> Vec<Var> {
        (0..NUM_LAYERS)
            .map(|l| {
                let src = w[LatentComponent::of_layer(l).index()];
                let &[b, k, d] = g.shape(src) else { panic!("latents must be [B, K, D]") };
                let (wt, bias) = self.class_weight(g, p, &self.style_heads[l], &classes);
                let col = g.reshape(src, &[b, k, d, 1]);
                let y = g.matmul(wt, col);
                let y = g.reshape(y, &[b, k, self.config.style_dim]);
                g.add(y, bias)
            })
            .collect()
    }

    /// Modulated, demodulated 1×1 convolution of `x [B, K, S, P]` (or a
    /// shared `[S, P]`) with per-class weights. The style scales the
    /// weight's input columns and each output row is renormalized to unit
    /// norm, per sample and class.
    fn modulated(&self, g: &mut Graph<T>, p: &Bound, layer: &ClassLayer, classes: &Range<usize>, x: Var, style: Var) -> Var {
        let &[b, k, s] = g.shape(style) else { panic!("style must be [B, K, S]") };
        let (w, bias) = self.class_weight(g, p, layer, classes);
        let s4 = g.reshape(style, &[b, k, 1, s]);
        let wm = g.mul(w, s4);
        let w2 = g.square(wm);
        let energy = g.sum_axis(w2, 3);
        let energy = g.add_scalar(energy, DEMOD_EPS);
        let demod = g.powf(energy, -0.5);
        let wd = g.mul(wm, demod);
        let y = g.matmul(wd, x);
        let out = g.shape(bias)[1];
        let bias = g.reshape(bias, &[classes.len(), out, 1]);
        let y = g.add(y, bias);
        nn::lrelu(g, y)
    }

    /// Local generators for `classes`: returns `(features [B,K,F,R,R],
    /// depth [B,K,R,R])`. Depth only consumes styles of layers 0–5.
    pub fn local_var(&self, g: &mut Graph<T>, p: &Bound, styles: &[Var], classes: Range<usize>) -> (Var, Var) {
        assert_eq!(styles.len(), NUM_LAYERS);
        let r = self.config.coarse_resolution;
        let b = g.shape(styles[0])[0];
        let k = classes.len();
        let fourier = g.constant(self.fourier.clone());
        let proj = self.input_proj.var(g, p);
        let mut x = g.matmul(proj, fourier);
        let mut depth = None;
        for l in 0..NUM_LAYERS {
            x = self.modulated(g, p, &self.layers[l], &classes, x, styles[l]);
            if l == SHAPE_EDIT_LAYER {
                let (w, bias) = self.class_weight(g, p, &self.depth_head, &classes);
                let d = g.matmul(w, x);
                let bias = g.reshape(bias, &[k, 1, 1]);
                let d = g.add(d, bias);
                depth = Some(g.reshape(d, &[b, k, r, r]));
            }
        }
        let (w, bias) = self.class_weight(g, p, &self.feature_head, &classes);
        let fch = self.config.feature_channels;
        let f = g.matmul(w, x);
        let bias = g.reshape(bias, &[k, fch, 1]);
        let f = g.add(f, bias);
        let f = g.reshape(f, &[b, k, fch, r, r]);
        (f, depth.expect("depth layer within range"))
    }

    /// Softmax fusion: `m = softmax_c(d)`, `f = Σ_c m^c f^c`. Returns
    /// `(m, log m, f)`.
    pub fn compose_var(g: &mut Graph<T>, depth: Var, features: Var) -> (Var, Var, Var) {
        let &[b, c, h, w] = g.shape(depth) else { panic!("depth must be [B, C, H, W]") };
        let fch = g.shape(features)[2];
        let m = g.softmax(depth, 1);
        let log_m = g.log_softmax(depth, 1);
        let m5 = g.reshape(m, &[b, c, 1, h, w]);
        let weighted = g.mul(features, m5);
        let fused = g.sum_to(weighted, &[b, 1, fch, h, w]);
        let fused = g.reshape(fused, &[b, fch, h, w]);
        (m, log_m, fused)
    }

    fn project(&self, g: &mut Graph<T>, p: &Bound, layer: &ClassLayer, x: Var) -> Var {
        let w = layer.weight.var(g, p);
        let b = layer.bias.var(g, p);
        let y = nn::conv2d(g, x, w, 1);
        nn::add_channel_bias(g, y, b)
    }

    /// Renderer: fused features and coarse log-mask → `(x̂, m̂)`.
    ///
    /// The mask branch starts from the upsampled coarse log-mask and adds a
    /// zero-initialized residual at every scale; the image branch sums
    /// upsampled RGB outputs of every scale and ends in `tanh`.
    pub fn render_var(&self, g: &mut Graph<T>, p: &Bound, fused: Var, log_mask: Var) -> (Var, Var) {
        let mut h = fused;
        let mut rgb = self.project(g, p, &self.to_rgb0, h);
        let seg0 = self.project(g, p, &self.to_seg0, h);
        let mut seg = g.add(log_mask, seg0);
        for st in &self.stages {
            h = nn::upsample2(g, h);
            let w = st.conv.weight.var(g, p);
            let b = st.conv.bias.var(g, p);
            let y = nn::conv2d(g, h, w, 3);
            let y = nn::add_channel_bias(g, y, b);
            h = nn::lrelu(g, y);
            let up_rgb = nn::upsample2(g, rgb);
            let d_rgb = self.project(g, p, &st.to_rgb, h);
            rgb = g.add(up_rgb, d_rgb);
            let up_seg = nn::upsample2(g, seg);
            let d_seg = self.project(g, p, &st.to_seg, h);
            seg = g.add(up_seg, d_seg);
        }
        let image = g.tanh(rgb);
        let final_mask = g.softmax(seg, 1);
        (image, final_mask)
    }

    /// Styles → full composition.
    pub fn synthesize_var(&self, g: &mut Graph<T>, p: &Bound, styles: &[Var]) -> CompositionVars {
        let (features, depth) = self.local_var(g, p, styles, 0..self.config.num_classes);
        let (mask, log_mask, fused) = Self::compose_var(g, depth, features);
        let (image, final_mask) = self.render_var(g, p, fused, log_mask);
        CompositionVars { depth, features, mask, log_mask, fused, image, final_mask }
    }

    /// `z [B, D]` with one shared triple per sample → composition.
    pub fn forward_var(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> CompositionVars {
        let w = self.map_latent_var(g, p, z);
        let b = g.shape(z)[0];
        let d = self.config.latent_dim;
        let w = w.map(|v| g.reshape(v, &[b, 1, d]));
        let c = self.config.num_classes;
        let w = w.map(|v| g.broadcast_to(v, &[b, c, d]));
        let styles = self.styles_var(g, p, &w, 0..c);
        self.synthesize_var(g, p, &styles)
    }

    // ---- tensor-level API ----

    fn check_len(&self, what: &'static str, got: usize) -> Result<()> {
        if got != self.config.latent_dim {
            return Err(Error::Dimension { what, expected: self.config.latent_dim, got });
        }
        Ok(())
    }

    /// Batched mapping of `z [B, D]`.
    pub fn map_latents(&self, params: &ParamStore<T>, z: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
        if z.rank() != 2 {
            return Err(Error::Shape { expected: vec![0, self.config.latent_dim], got: z.shape().to_vec() });
        }
        self.check_len("z", z.shape()[1])?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let w = self.map_latent_var(&mut g, &p, zv);
        Ok(w.map(|v| g.value(v).clone()))
    }

    pub fn map_latent(&self, params: &ParamStore<T>, z: &[T]) -> Result<LatentTriple<T>> {
        self.check_len("z", z.len())?;
        let zt = Tensor::from_vec(&[1, z.len()], z.to_vec());
        let [b, s, t] = self.map_latents(params, &zt)?;
        Ok(LatentTriple { z: z.to_vec(), base: b.into_data(), shape: s.into_data(), texture: t.into_data() })
    }

    /// The ten style vectors of `class` for `triple`.
    pub fn style_vectors(&self, params: &ParamStore<T>, triple: &LatentTriple<T>, class: usize) -> Result<Vec<Vec<T>>> {
        let c = self.config.num_classes;
        if class >= c {
            return Err(Error::ClassOutOfRange { class, num_classes: c });
        }
        for comp in LatentComponent::ALL {
            self.check_len("latent component", triple.component(comp).len())?;
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let d = self.config.latent_dim;
        let w = LatentComponent::ALL.map(|comp| g.constant(Tensor::from_vec(&[1, 1, d], triple.component(comp).to_vec())));
        let styles = self.styles_var(&mut g, &p, &w, class..class + 1);
        Ok(styles.iter().map(|&v| g.value(v).data().to_vec()).collect())
    }

    /// Style bank for a batch of per-class latent components, each
    /// `[B, C, D]`.
    pub fn style_bank_from_components(&self, params: &ParamStore<T>, w: [&Tensor<T>; 3]) -> Result<StyleBank<T>> {
        let (c, d) = (self.config.num_classes, self.config.latent_dim);
        for t in w {
            if t.rank() != 3 || t.shape()[1] != c || t.shape()[2] != d {
                return Err(Error::Shape { expected: vec![t.shape().first().copied().unwrap_or(0), c, d], got: t.shape().to_vec() });
            }
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let wv = w.map(|t| g.constant(t.clone()));
        let styles = self.styles_var(&mut g, &p, &wv, 0..c);
        Ok(StyleBank { layers: styles.iter().map(|&v| g.value(v).clone()).collect() })
    }

    /// Style bank for one sample's latent assignment.
    pub fn style_bank(&self, params: &ParamStore<T>, latents: &Latents<T>) -> Result<StyleBank<T>> {
        let (c, d) = (self.config.num_classes, self.config.latent_dim);
        if let Latents::PerClass(v) = latents {
            if v.len() != c {
                return Err(Error::Dimension { what: "per-class latent assignment", expected: c, got: v.len() });
            }
        }
        let comps = LatentComponent::ALL.map(|comp| {
            let mut data = Vec::with_capacity(c * d);
            for k in 0..c {
                data.extend_from_slice(latents.triple_for(k).component(comp));
            }
            data
        });
        for comp in &comps {
            if comp.len() != c * d {
                return Err(Error::Dimension { what: "latent component", expected: c * d, got: comp.len() });
            }
        }
        let [b, s, t] = comps.map(|data| Tensor::from_vec(&[1, c, d], data));
        self.style_bank_from_components(params, [&b, &s, &t])
    }

    /// Single local generator `g^c`: `(f^c [F, R, R], d^c [R, R])`.
    pub fn local_generate(&self, params: &ParamStore<T>, class: usize, styles: &[Vec<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
        let c = self.config.num_classes;
        if class >= c {
            return Err(Error::ClassOutOfRange { class, num_classes: c });
        }
        if styles.len() != NUM_LAYERS {
            return Err(Error::Dimension { what: "style layers", expected: NUM_LAYERS, got: styles.len() });
        }
        let s = self.config.style_dim;
        if let Some(bad) = styles.iter().find(|v| v.len() != s) {
            return Err(Error::Dimension { what: "style vector", expected: s, got: bad.len() });
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let sv: Vec<Var> = styles.iter().map(|v| g.constant(Tensor::from_vec(&[1, 1, s], v.clone()))).collect();
        let (f, d) = self.local_var(&mut g, &p, &sv, class..class + 1);
        let r = self.config.coarse_resolution;
        let f = g.value(f).clone().reshape(&[self.config.feature_channels, r, r]);
        let d = g.value(d).clone().reshape(&[r, r]);
        Ok((f, d))
    }

    /// Renders fused features `[B, F, R, R]` with the coarse mask
    /// `[B, C, R, R]` as the mask-branch input.
    pub fn render(&self, params: &ParamStore<T>, fused: &Tensor<T>, mask: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let r = self.config.coarse_resolution;
        let b = fused.shape().first().copied().unwrap_or(0);
        let fs = [b, self.config.feature_channels, r, r];
        if fused.shape() != fs {
            return Err(Error::Shape { expected: fs.to_vec(), got: fused.shape().to_vec() });
        }
        let ms = [b, self.config.num_classes, r, r];
        if mask.shape() != ms {
            return Err(Error::Shape { expected: ms.to_vec(), got: mask.shape().to_vec() });
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let f = g.constant(fused.clone());
        let log_m = g.constant(mask.map(|v| v.max(T::min_positive_value()).ln()));
        let (x, m) = self.render_var(&mut g, &p, f, log_m);
        Ok((g.value(x).clone(), g.value(m).clone()))
    }

    pub fn synthesize(&self, params: &ParamStore<T>, bank: &StyleBank<T>) -> Result<CompositionResult<T>> {
        let (c, s) = (self.config.num_classes, self.config.style_dim);
        if bank.layers.len() != NUM_LAYERS {
            return Err(Error::Dimension { what: "style layers", expected: NUM_LAYERS, got: bank.layers.len() });
        }
        for t in &bank.layers {
            if t.rank() != 3 || t.shape()[1] != c || t.shape()[2] != s || t.shape()[0] != bank.batch() {
                return Err(Error::Shape { expected: vec![bank.batch(), c, s], got: t.shape().to_vec() });
            }
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let styles: Vec<Var> = bank.layers.iter().map(|t| g.constant(t.clone())).collect();
        let v = self.synthesize_var(&mut g, &p, &styles);
        Ok(collect(&g, &v))
    }

    /// Full pipeline for one sample.
    pub fn generate(&self, params: &ParamStore<T>, latents: &Latents<T>) -> Result<CompositionResult<T>> {
        let bank = self.style_bank(params, latents)?;
        self.synthesize(params, &bank)
    }

    /// Full pipeline for a batch of `z [B, D]`, one shared triple each.
    pub fn generate_batch(&self, params: &ParamStore<T>, z: &Tensor<T>) -> Result<CompositionResult<T>> {
        if z.rank() != 2 {
            return Err(Error::Shape { expected: vec![0, self.config.latent_dim], got: z.shape().to_vec() });
        }
        self.check_len("z", z.shape()[1])?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let v = self.forward_var(&mut g, &p, zv);
        Ok(collect(&g, &v))
    }
}

/// Free-standing fusion of `depths [B, C, H, W]` and `features
/// [B, C, F, H, W]` into `(m, f)`.
pub fn compose<T: Scalar>(depths: &Tensor<T>, features: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let ds = depths.shape();
    let fs = features.shape();
    if ds.len() != 4 || fs.len() != 5 || ds[0] != fs[0] || ds[1] != fs[1] || ds[2..] != fs[3..] {
        return Err(Error::Shape { expected: ds.to_vec(), got: fs.to_vec() });
    }
    let mut g = Graph::new();
    let d = g.constant(depths.clone());
    let f = g.constant(features.clone());
    let (m, _, fused) = Generator::<T>::compose_var(&mut g, d, f);
    Ok((g.value(m).clone(), g.value(fused).clone()))
}

fn collect<T: Scalar>(g: &Graph<T>, v: &CompositionVars) -> CompositionResult<T> {
    CompositionResult {
        depth: g.value(v.depth).clone(),
        features: g.value(v.features).clone(),
        mask: g.value(v.mask).clone(),
        fused: g.value(v.fused).clone(),
        image: g.value(v.image).clone(),
        final_mask: g.value(v.final_mask).clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(c: usize) -> GeneratorConfig {
        GeneratorConfig {
            num_classes: c,
            latent_dim: 6,
            style_dim: 5,
            mapping_layers: 1,
            coarse_resolution: 4,
            output_resolution: 8,
            fourier_features: 4,
            feature_channels: 3,
            renderer_channels: vec![4],
        }
    }

    fn model(c: usize, seed: u64) -> (Generator<f64>, ParamStore<f64>) {
        let mut rng = crate::rng::seeded(seed);
        let (g, mut p) = Generator::new(tiny(c), &mut rng).unwrap();
        // move the zero-initialized heads off zero so the masks are not trivial
        for (name, t) in p.values_mut().iter_mut().enumerate() {
            if t.data().iter().all(|&v| v == 0.0) {
                *t = crate::rng::normal(&mut crate::rng::derive(seed, name as u64), t.shape());
            }
        }
        (g, p)
    }

    fn z(seed: u64, d: usize) -> Vec<f64> {
        crate::rng::normal_vec(&mut crate::rng::seeded(seed), d)
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig::default().validate().is_ok());
        assert!(GeneratorConfig { output_resolution: 48, ..GeneratorConfig::default() }.validate().is_err());
        assert!(GeneratorConfig { renderer_channels: vec![8], ..GeneratorConfig::default() }.validate().is_err());
        assert!(GeneratorConfig { fourier_features: 3, ..GeneratorConfig::default() }.validate().is_err());
        assert_eq!(GeneratorConfig::default().upsampling_stages(), 2);
    }

    #[test]
    fn layer_routing_table() {
        let comps: Vec<_> = (0..NUM_LAYERS).map(LatentComponent::of_layer).collect();
        assert_eq!(&comps[..2], &[LatentComponent::Base; 2]);
        assert_eq!(&comps[2..6], &[LatentComponent::Shape; 4]);
        assert_eq!(&comps[6..], &[LatentComponent::Texture; 4]);
        for c in LatentComponent::ALL {
            assert!(c.layers().all(|l| LatentComponent::of_layer(l) == c));
        }
    }

    #[test]
    fn fresh_model_has_uniform_masks() {
        let mut rng = crate::rng::seeded(0);
        let (g, p) = Generator::<f64>::new(tiny(3), &mut rng).unwrap();
        let t = g.map_latent(&p, &z(1, 6)).unwrap();
        let out = g.generate(&p, &Latents::Shared(t)).unwrap();
        assert!(out.mask.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(out.final_mask.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(out.image.shape(), &[1, 3, 8, 8]);
        assert!(out.image.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn masks_sum_to_one() {
        let (g, p) = model(4, 3);
        let zt = Tensor::from_vec(&[3, 6], z(2, 18));
        let out = g.generate_batch(&p, &zt).unwrap();
        for (m, res) in [(&out.mask, 4), (&out.final_mask, 8)] {
            for b in 0..3 {
                for i in 0..res * res {
                    let s: f64 = (0..4).map(|c| m.data()[(b * 4 + c) * res * res + i]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn texture_never_reaches_depth() {
        let (g, p) = model(3, 5);
        let t = g.map_latent(&p, &z(4, 6)).unwrap();
        let mut t2 = t.clone();
        t2.texture = z(9, 6);
        let a = g.generate(&p, &Latents::Shared(t.clone())).unwrap();
        let b = g.generate(&p, &Latents::Shared(t2)).unwrap();
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.mask, b.mask);
        assert_ne!(a.features, b.features);
        let mut t3 = t;
        t3.shape = z(10, 6);
        let c = g.generate(&p, &Latents::Shared(t3)).unwrap();
        assert_ne!(a.depth, c.depth);
    }

    #[test]
    fn shared_equals_repeated_per_class() {
        let (g, p) = model(3, 6);
        let t = g.map_latent(&p, &z(7, 6)).unwrap();
        let a = g.generate(&p, &Latents::Shared(t.clone())).unwrap();
        let b = g.generate(&p, &Latents::PerClass(vec![t.clone(), t.clone(), t])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_class_triples_stay_local() {
        let (g, p) = model(3, 8);
        let ts: Vec<_> = (0..3).map(|k| g.map_latent(&p, &z(20 + k, 6)).unwrap()).collect();
        let mut ts2 = ts.clone();
        ts2[1] = g.map_latent(&p, &z(99, 6)).unwrap();
        let a = g.generate(&p, &Latents::PerClass(ts)).unwrap();
        let b = g.generate(&p, &Latents::PerClass(ts2)).unwrap();
        let plane = 16;
        for c in [0, 2] {
            assert_eq!(a.depth.data()[c * plane..(c + 1) * plane], b.depth.data()[c * plane..(c + 1) * plane]);
        }
        assert_ne!(a.depth.data()[plane..2 * plane], b.depth.data()[plane..2 * plane]);
    }

    #[test]
    fn local_generate_matches_full_pass() {
        let (g, p) = model(3, 9);
        let t = g.map_latent(&p, &z(11, 6)).unwrap();
        let full = g.generate(&p, &Latents::Shared(t.clone())).unwrap();
        for c in 0..3 {
            let styles = g.style_vectors(&p, &t, c).unwrap();
            let (f, d) = g.local_generate(&p, c, &styles).unwrap();
            assert_eq!(d.data(), &full.depth.data()[c * 16..(c + 1) * 16]);
            assert_eq!(f.data(), &full.features.data()[c * 48..(c + 1) * 48]);
        }
        assert!(matches!(g.local_generate(&p, 3, &[]), Err(Error::ClassOutOfRange { .. })));
    }

    #[test]
    fn compose_matches_pixel_loop() {
        let mut rng = crate::rng::seeded(12);
        let d = crate::rng::normal::<f64>(&mut rng, &[2, 3, 2, 2]);
        let f = crate::rng::normal::<f64>(&mut rng, &[2, 3, 4, 2, 2]);
        let (m, fused) = compose(&d, &f).unwrap();
        for b in 0..2 {
            for i in 0..4 {
                let ds: Vec<f64> = (0..3).map(|c| d.data()[(b * 3 + c) * 4 + i]).collect();
                let mx = ds.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = ds.iter().map(|v| (v - mx).exp()).sum();
                for ch in 0..4 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        let w = (ds[c] - mx).exp() / z;
                        assert!((m.data()[(b * 3 + c) * 4 + i] - w).abs() < 1e-14);
                        acc += w * f.data()[((b * 3 + c) * 4 + ch) * 4 + i];
                    }
                    assert!((fused.data()[(b * 4 + ch) * 4 + i] - acc).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn dimension_errors() {
        let (g, p) = model(2, 1);
        assert!(matches!(g.map_latent(&p, &[0.0; 5]), Err(Error::Dimension { .. })));
        let t = g.map_latent(&p, &z(1, 6)).unwrap();
        assert!(matches!(g.style_vectors(&p, &t, 2), Err(Error::ClassOutOfRange { .. })));
        assert!(g.generate(&p, &Latents::PerClass(vec![t])).is_err());
        assert!(g.render(&p, &Tensor::zeros(&[1, 3, 4, 4]), &Tensor::zeros(&[1, 3, 4, 4])).is_err());
    }

    #[test]
    fn image_gradient_matches_finite_difference() {
        let (g, p) = model(2, 13);
        let t = g.map_latent(&p, &z(14, 6)).unwrap();
        let bank = g.style_bank(&p, &Latents::Shared(t)).unwrap();
        let loss = |bank: &StyleBank<f64>| -> f64 {
            let out = g.synthesize(&p, bank).unwrap();
            out.image.data().iter().enumerate().map(|(i, v)| v * (i % 7) as f64).sum::<f64>()
                + out.final_mask.data().iter().enumerate().map(|(i, v)| v * (i % 5) as f64).sum::<f64>()
        };
        let mut graph = Graph::new();
        let pb = p.bind(&mut graph, false);
        let styles: Vec<Var> = bank.layers.iter().map(|t| graph.leaf(t.clone())).collect();
        let out = g.synthesize_var(&mut graph, &pb, &styles);
        let wi = graph.constant(Tensor::from_fn(&[1, 3, 8, 8], |i| (i % 7) as f64));
        let wm = graph.constant(Tensor::from_fn(&[1, 2, 8, 8], |i| (i % 5) as f64));
        let a = graph.mul(out.image, wi);
        let b = graph.mul(out.final_mask, wm);
        let a = graph.sum_all(a);
        let b = graph.sum_all(b);
        let l = graph.add(a, b);
        let grads = graph.grad(l, &styles);
        for layer in [0, 3, 5, 9] {
            for k in 0..5 {
                let idx = k; // sample 0, class 0
                let mut plus = bank.clone();
                plus.layers[layer].data_mut()[idx] += 1e-5;
                let mut minus = bank.clone();
                minus.layers[layer].data_mut()[idx] -= 1e-5;
                let fd = (loss(&plus) - loss(&minus)) / 2e-5;
                let an = graph.value(grads[layer]).data()[idx];
                assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "layer {layer} k {k}: {fd} vs {an}");
            }
        }
    }
}
