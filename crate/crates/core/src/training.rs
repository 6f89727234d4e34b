//! Adversarial training: one discriminator update (logistic loss, lazy R1
//! on real inputs), one generator update (non-saturating loss), then an EMA
//! update of the shadow generator. Also the ablation runner that trains a
//! list of configurations on one corpus and reports proxy-FID per row.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::discriminator::{soften_real_mask, Discriminator, DiscriminatorConfig, SpectralState};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::grouping::{one_hot, remap, LabelMap, RemapTable};
use crate::metrics::{feature_stats, frechet_distance, FeatureStats, ProxyExtractor};
use crate::nn::{ema_update, Adam, ParamStore};
use crate::raster::images_to_tensor;
use crate::rng::{self, Rng64, RngState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::toy::ToySample;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub g_lr: f64,
    pub d_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub r1_gamma: f64,
    /// Apply R1 every this many steps; 0 disables it.
    pub r1_interval: usize,
    pub ema_decay: f64,
    /// Use `min(ema_decay, (1 + t) / (10 + t))` so early weights fade fast.
    pub ema_warmup: bool,
    /// Uniform noise added to real one-hot masks before renormalizing.
    pub real_mask_noise: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            total_steps: 2000,
            g_lr: 2e-3,
            d_lr: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            adam_eps: 1e-8,
            r1_gamma: 10.0,
            r1_interval: 16,
            ema_decay: 0.999,
            ema_warmup: true,
            real_mask_noise: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.g_lr > 0.0 && self.d_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("Adam betas must be in [0, 1) and eps positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must be in [0, 1)");
        }
        if self.r1_gamma < 0.0 || self.real_mask_noise < 0.0 {
            return bad("r1_gamma and real_mask_noise must be nonnegative");
        }
        Ok(())
    }

    /// EMA decay used after `updates` previous updates.
    pub fn ema_decay_at(&self, updates: u64) -> f64 {
        if self.ema_warmup {
            self.ema_decay.min((1.0 + updates as f64) / (10.0 + updates as f64))
        } else {
            self.ema_decay
        }
    }
}

/// Everything needed to build a model and train it.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Laptop-scale model for the toy corpus with `num_classes` classes.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            generator: GeneratorConfig::toy(num_classes),
            discriminator: DiscriminatorConfig::toy(num_classes),
            train: TrainConfig::default(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.generator.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.train.validate()?;
        if self.generator.num_classes != self.discriminator.num_classes {
            return Err(Error::Config(format!(
                "generator has {} classes but the discriminator expects {}",
                self.generator.num_classes, self.discriminator.num_classes
            )));
        }
        if self.generator.output_resolution != self.discriminator.resolution {
            return Err(Error::Config(format!(
                "generator outputs {}² but the discriminator expects {}²",
                self.generator.output_resolution, self.discriminator.resolution
            )));
        }
        Ok(())
    }
}

/// Images `[B, 3, H, W]` in `[-1, 1]` with their super-class label maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<LabelMap>,
}

/// A training set already remapped to super-classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<LabelMap>,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_samples(samples: &[ToySample], table: &RemapTable) -> Result<Self> {
        let imgs: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let images = images_to_tensor(&imgs)?;
        let labels = samples.iter().map(|s| remap(&s.labels, table)).collect::<Result<_>>()?;
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch<T> {
        let parts: Vec<Tensor<T>> = indices.iter().map(|&i| self.images.narrow(0, i, 1)).collect();
        Batch {
            images: Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    /// Average per-class pixel fraction over the whole set.
    pub fn class_coverage(&self, num_classes: usize) -> Vec<f64> {
        let mut cov = vec![0.0; num_classes];
        let mut total = 0usize;
        for m in &self.labels {
            for (c, n) in m.class_counts().into_iter().enumerate() {
                if c < num_classes {
                    cov[c] += n as f64;
                }
            }
            total += m.height() * m.width();
        }
        cov.iter().map(|v| v / total.max(1) as f64).collect()
    }
}

/// Epoch-wise shuffled sampling; the permutation of epoch `e` depends only
/// on `(seed, e)`, so the position alone is the sampler state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SamplerPosition {
    pub epoch: u64,
    pub offset: usize,
}

const SHUFFLE_STREAM: u64 = 0x5_4f1e;

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut r = rng::derive(seed ^ SHUFFLE_STREAM, epoch);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rand::Rng::random_range(&mut r, 0..=i);
        order.swap(i, j);
    }
    order
}

impl SamplerPosition {
    pub fn next_indices(&mut self, seed: u64, n: usize, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        let mut order = epoch_order(seed, self.epoch, n);
        while out.len() < count {
            if self.offset >= n {
                self.epoch += 1;
                self.offset = 0;
                order = epoch_order(seed, self.epoch, n);
            }
            out.push(order[self.offset]);
            self.offset += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    /// Step number this report belongs to (0-based).
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    /// R1 penalty (before the lazy interval factor), when applied.
    pub r1: Option<f64>,
    /// Mean discriminator logit on real and on fake samples.
    pub real_score: f64,
    pub fake_score: f64,
    /// Mean of the generated final mask per class.
    pub coverage: Vec<f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.d_loss.is_finite() && self.g_loss.is_finite() && self.r1.is_none_or(f64::is_finite)
    }
}

pub struct TrainState<T: Scalar> {
    pub config: ExperimentConfig,
    pub step: u64,
    pub generator: Generator<T>,
    pub g_params: ParamStore<T>,
    pub g_ema: ParamStore<T>,
    pub discriminator: Discriminator,
    pub d_params: ParamStore<T>,
    pub spectral: SpectralState<T>,
    pub g_opt: Adam<T>,
    pub d_opt: Adam<T>,
    pub rng: Rng64,
    pub sampler: SamplerPosition,
}

const INIT_STREAM_G: u64 = 1;
const INIT_STREAM_D: u64 = 2;
const TRAIN_STREAM: u64 = 3;

impl<T: Scalar> TrainState<T> {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let (generator, g_params) = Generator::new(config.generator.clone(), &mut rng::derive(seed, INIT_STREAM_G))?;
        let (discriminator, d_params, spectral) = Discriminator::new(config.discriminator.clone(), &mut rng::derive(seed, INIT_STREAM_D))?;
        let t = &config.train;
        let g_opt = Adam::new(&g_params, t.g_lr, t.beta1, t.beta2, t.adam_eps);
        let d_opt = Adam::new(&d_params, t.d_lr, t.beta1, t.beta2, t.adam_eps);
        Ok(Self {
            g_ema: g_params.clone(),
            config,
            step: 0,
            generator,
            g_params,
            discriminator,
            d_params,
            spectral,
            g_opt,
            d_opt,
            rng: rng::derive(seed, TRAIN_STREAM),
            sampler: SamplerPosition { epoch: 0, offset: 0 },
        })
    }

    pub fn rng_state(&self) -> RngState {
        rng::snapshot(&self.rng)
    }

    /// All weights, EMA weights and optimizer moments are finite.
    pub fn is_finite(&self) -> bool {
        self.g_params.is_finite() && self.g_ema.is_finite() && self.d_params.is_finite()
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<usize> {
        let b = batch.labels.len();
        let r = self.config.generator.output_resolution;
        let c = self.config.num_classes();
        if b == 0 {
            return Err(Error::Dimension { what: "batch size", expected: 1, got: 0 });
        }
        if batch.images.shape() != [b, 3, r, r] {
            return Err(Error::Shape { expected: vec![b, 3, r, r], got: batch.images.shape().to_vec() });
        }
        for m in &batch.labels {
            if m.height() != r || m.width() != r {
                return Err(Error::Shape { expected: vec![r, r], got: vec![m.height(), m.width()] });
            }
            if let Some(&v) = m.values().iter().find(|&&v| v as usize >= c) {
                return Err(Error::LabelOutOfRange { value: v as usize, num_classes: c });
            }
        }
        Ok(b)
    }

    fn real_masks(&mut self, labels: &[LabelMap]) -> Tensor<T> {
        let c = self.config.num_classes();
        let parts: Vec<Tensor<T>> = labels
            .iter()
            .map(|m| {
                let oh = LabelMap::new(m.height(), m.width(), c, m.values().to_vec()).expect("checked against C");
                let t = one_hot::<T>(&oh);
                t.reshape(&[1, c, m.height(), m.width()])
            })
            .collect();
        let stacked = Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0);
        if self.config.train.real_mask_noise > 0.0 {
            soften_real_mask(&stacked, 1, self.config.train.real_mask_noise, &mut self.rng)
        } else {
            stacked
        }
    }

    fn sample_z(&mut self, b: usize) -> Tensor<T> {
        rng::normal(&mut self.rng, &[b, self.config.generator.latent_dim])
    }

    fn grads(g: &mut Graph<T>, loss: Var, vars: &[Var]) -> Vec<Tensor<T>> {
        let gv = g.grad(loss, vars);
        gv.iter().map(|&v| g.value(v).clone()).collect()
    }

    /// One full training step on `batch`.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<LossReport> {
        let b = self.check_batch(batch)?;
        let real_mask = self.real_masks(&batch.labels);
        let train = self.config.train.clone();

        // discriminator: softplus(D(fake)) + softplus(−D(real))
        self.discriminator.power_iterate(&self.d_params, &mut self.spectral, self.config.discriminator.power_iterations);
        let z = self.sample_z(b);
        let fake = self.generator.generate_batch(&self.g_params, &z)?;
        let (d_loss, real_score, fake_score) = {
            let mut g = Graph::new();
            let p = self.d_params.bind(&mut g, true);
            let imgs = Tensor::concat(&[&batch.images, &fake.image], 0);
            let masks = Tensor::concat(&[&real_mask, &fake.final_mask], 0);
            let iv = g.constant(imgs);
            let mv = g.constant(masks);
            let logits = self.discriminator.logits_var(&mut g, &p, &self.spectral, iv, mv);
            let real = g.narrow(logits, 0, 0, b);
            let fake_l = g.narrow(logits, 0, b, b);
            let neg_real = g.neg(real);
            let lr = g.softplus(neg_real);
            let lf = g.softplus(fake_l);
            let lr = g.mean_all(lr);
            let lf = g.mean_all(lf);
            let loss = g.add(lr, lf);
            let grads = Self::grads(&mut g, loss, p.vars());
            self.d_opt.update(&mut self.d_params, &grads);
            let mean = |g: &Graph<T>, v: Var| g.value(v).data().iter().map(|x| x.as_f64()).sum::<f64>() / b as f64;
            (g.value(loss).item().as_f64(), mean(&g, real), mean(&g, fake_l))
        };

        // lazy R1 on real inputs, scaled by the interval
        let r1 = if train.r1_interval > 0 && train.r1_gamma > 0.0 && self.step.is_multiple_of(train.r1_interval as u64) {
            let mut g = Graph::new();
            let p = self.d_params.bind(&mut g, true);
            let iv = g.leaf(batch.images.clone());
            let mv = g.leaf(real_mask);
            let logits = self.discriminator.logits_var(&mut g, &p, &self.spectral, iv, mv);
            let total = g.sum_all(logits);
            let gx = g.grad(total, &[iv, mv]);
            let si = g.square(gx[0]);
            let sm = g.square(gx[1]);
            let si = g.sum_all(si);
            let sm = g.sum_all(sm);
            let sq = g.add(si, sm);
            let penalty = g.scale(sq, train.r1_gamma / 2.0 / b as f64);
            let loss = g.scale(penalty, train.r1_interval as f64);
            let grads = Self::grads(&mut g, loss, p.vars());
            self.d_opt.update(&mut self.d_params, &grads);
            Some(g.value(penalty).item().as_f64())
        } else {
            None
        };

        // generator: softplus(−D(G(z)))
        let z = self.sample_z(b);
        let (g_loss, coverage) = {
            let mut g = Graph::new();
            let gp = self.g_params.bind(&mut g, true);
            let dp = self.d_params.bind(&mut g, false);
            let zv = g.constant(z);
            let out = self.generator.forward_var(&mut g, &gp, zv);
            let logits = self.discriminator.logits_var(&mut g, &dp, &self.spectral, out.image, out.final_mask);
            let neg = g.neg(logits);
            let l = g.softplus(neg);
            let loss = g.mean_all(l);
            let grads = Self::grads(&mut g, loss, gp.vars());
            self.g_opt.update(&mut self.g_params, &grads);
            let coverage = mask_coverage(g.value(out.final_mask));
            (g.value(loss).item().as_f64(), coverage)
        };

        let decay = train.ema_decay_at(self.step);
        ema_update(&mut self.g_ema, &self.g_params, decay);
        let report = LossReport { step: self.step, d_loss, g_loss, r1, real_score, fake_score, coverage };
        self.step += 1;
        Ok(report)
    }

    /// Draws the next batch from `data` with the seeded sampler and trains
    /// on it.
    pub fn step_on(&mut self, data: &Dataset<T>) -> Result<LossReport> {
        if data.is_empty() {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        let idx = self.sampler.next_indices(self.config.train.seed, data.len(), self.config.train.batch_size);
        let batch = data.batch(&idx);
        self.train_step(&batch)
    }
}

/// Mean over batch and pixels of each class channel of `[B, C, H, W]`.
pub fn mask_coverage<T: Scalar>(mask: &Tensor<T>) -> Vec<f64> {
    let s = mask.shape();
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut cov = vec![0.0; c];
    for bi in 0..b {
        for (k, acc) in cov.iter_mut().enumerate() {
            let off = (bi * c + k) * plane;
            *acc += mask.data()[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    cov.iter().map(|v| v / (b * plane) as f64).collect()
}

/// Proxy-FID against a fixed set of real images with a fixed set of
/// latent draws.
pub struct ProxyEval {
    extractor: ProxyExtractor,
    real: FeatureStats,
    count: usize,
    seed: u64,
}

const EVAL_CHUNK: usize = 32;

impl ProxyEval {
    /// `real [N, 3, R, R]`; every score generates `count` images.
    pub fn new(real: &Tensor<f32>, count: usize, seed: u64) -> Result<Self> {
        let r = real.shape().get(2).copied().unwrap_or(0);
        let extractor = ProxyExtractor::new(r)?;
        let real = feature_stats(real, &extractor)?;
        Ok(Self { extractor, real, count, seed })
    }

    pub fn real_stats(&self) -> &FeatureStats {
        &self.real
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Generated images for the fixed latent set, `[count, 3, R, R]`.
    pub fn generate<T: Scalar>(&self, generator: &Generator<T>, params: &ParamStore<T>) -> Result<Tensor<f32>> {
        let d = generator.config().latent_dim;
        let mut r = rng::seeded(self.seed);
        let mut parts = Vec::new();
        let mut done = 0;
        while done < self.count {
            let n = EVAL_CHUNK.min(self.count - done);
            let z = rng::normal::<T>(&mut r, &[n, d]);
            parts.push(generator.generate_batch(params, &z)?.image.cast::<f32>());
            done += n;
        }
        Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0))
    }

    pub fn score<T: Scalar>(&self, generator: &Generator<T>, params: &ParamStore<T>) -> Result<f64> {
        let imgs = self.generate(generator, params)?;
        if !imgs.is_finite() {
            return Ok(f64::NAN);
        }
        let fake = feature_stats(&imgs, &self.extractor)?;
        frechet_distance(&self.real, &fake)
    }
}

/// One row of the ablation matrix.
#[derive(Clone, Debug)]
pub struct AblationEntry {
    pub name: String,
    pub config: ExperimentConfig,
    /// Maps the corpus' fine labels to this entry's classes.
    pub table: RemapTable,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationRow {
    pub name: String,
    pub super_classes: usize,
    pub spectral_norm: bool,
    pub batch_size: usize,
    pub steps: u64,
    /// Proxy-FID of the EMA generator after the budget; NaN if diverged.
    pub proxy_fid: f64,
    pub diverged: bool,
    /// `(step, proxy-FID)` at every evaluation point, starting at step 0.
    pub trace: Vec<(u64, f64)>,
    /// Mean generated mask coverage per class at the end.
    pub coverage: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationBudget {
    pub steps: u64,
    /// Evaluate every this many steps (and at 0 and the end); 0 means only
    /// at 0 and the end.
    pub eval_every: u64,
}

/// Trains until `steps` or divergence, scoring with `eval` at the given
/// cadence. Calls `on_report` after every step.
pub fn train_with_eval<T: Scalar>(
    state: &mut TrainState<T>,
    data: &Dataset<T>,
    eval: &ProxyEval,
    budget: AblationBudget,
    mut on_report: impl FnMut(&LossReport),
) -> Result<(Vec<(u64, f64)>, bool, Vec<f64>)> {
    let mut trace = vec![(state.step, eval.score(&state.generator, &state.g_ema)?)];
    let mut coverage = vec![0.0; state.config.num_classes()];
    let mut recent: Vec<Vec<f64>> = Vec::new();
    let start = state.step;
    while state.step - start < budget.steps {
        let report = state.step_on(data)?;
        on_report(&report);
        if !report.is_finite() || !state.is_finite() {
            trace.push((state.step, f64::NAN));
            return Ok((trace, true, coverage));
        }
        recent.push(report.coverage);
        if recent.len() > 50 {
            recent.remove(0);
        }
        let done = state.step - start;
        if (budget.eval_every > 0 && done.is_multiple_of(budget.eval_every)) || done == budget.steps {
            let fid = eval.score(&state.generator, &state.g_ema)?;
            trace.push((state.step, fid));
            if !fid.is_finite() {
                return Ok((trace, true, coverage));
            }
        }
    }
    for r in &recent {
        for (c, v) in coverage.iter_mut().zip(r) {
            *c += v / recent.len() as f64;
        }
    }
    Ok((trace, false, coverage))
}

/// Trains every entry for the same budget on `corpus` and reports the
/// proxy-FID of each. Divergence is recorded in the row, not raised.
pub fn run_ablation(entries: &[AblationEntry], corpus: &[ToySample], eval: &ProxyEval, budget: AblationBudget) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        if e.table.num_super_classes() != e.config.num_classes() {
            return Err(Error::Config(format!(
                "entry `{}`: table has {} classes, model has {}",
                e.name,
                e.table.num_super_classes(),
                e.config.num_classes()
            )));
        }
        let data = Dataset::<f32>::from_samples(corpus, &e.table)?;
        let mut state = TrainState::<f32>::new(e.config.clone())?;
        let (trace, diverged, coverage) = train_with_eval(&mut state, &data, eval, budget, |_| {})?;
        let proxy_fid = if diverged { f64::NAN } else { trace.last().map_or(f64::NAN, |t| t.1) };
        rows.push(AblationRow {
            name: e.name.clone(),
            super_classes: e.config.num_classes(),
            spectral_norm: e.config.discriminator.spectral_norm,
            batch_size: e.config.train.batch_size,
            steps: state.step,
            proxy_fid,
            diverged,
            trace,
            coverage,
        });
    }
    Ok(rows)
}

/// Markdown table with the ablation axes and the proxy-FID.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| Config | Super-classes | SpectralNorm | Batchsize | Steps | proxy-FID |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let fid = if r.diverged { String::from("diverged") } else { format!("{:.2}", r.proxy_fid) };
        s += &format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.name,
            r.super_classes,
            if r.spectral_norm { "✓" } else { "✗" },
            r.batch_size,
            r.steps,
            fid
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{make_toy_corpus, ToySceneSpec};

    fn tiny_config(c: usize) -> ExperimentConfig {
        ExperimentConfig {
            generator: GeneratorConfig {
                num_classes: c,
                latent_dim: 8,
                style_dim: 6,
                mapping_layers: 1,
                coarse_resolution: 8,
                output_resolution: 16,
                fourier_features: 4,
                feature_channels: 4,
                renderer_channels: vec![4],
            },
            discriminator: DiscriminatorConfig {
                resolution: 16,
                num_classes: c,
                channels: vec![4, 6, 8],
                fusion_stage: 1,
                spectral_norm: true,
                power_iterations: 1,
            },
            train: TrainConfig { batch_size: 2, r1_interval: 2, seed: 5, ..TrainConfig::default() },
        }
    }

    fn tiny_data() -> Dataset<f64> {
        let spec = ToySceneSpec::with_resolution(16);
        let corpus = make_toy_corpus(&spec, 6, 1).unwrap();
        Dataset::from_samples(&corpus, &spec.remap_table().unwrap()).unwrap()
    }

    #[test]
    fn identical_seeds_give_identical_losses() {
        let data = tiny_data();
        let run = || {
            let mut s = TrainState::<f64>::new(tiny_config(8)).unwrap();
            (0..3).map(|_| s.step_on(&data).unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a[0].r1.is_some() && a[1].r1.is_none() && a[2].r1.is_some());
        assert!(a.iter().all(LossReport::is_finite));
        assert_eq!(a[0].coverage.len(), 8);
        assert!((a[0].coverage.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn labels_beyond_c_are_rejected() {
        let mut s = TrainState::<f64>::new(tiny_config(8)).unwrap();
        let data = tiny_data();
        let mut batch = data.batch(&[0, 1]);
        batch.labels[1] = LabelMap::filled(16, 16, 24, 9).unwrap();
        assert!(matches!(s.train_step(&batch), Err(Error::LabelOutOfRange { value: 9, .. })));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn r1_of_zero_discriminator_is_zero() {
        let mut s = TrainState::<f64>::new(tiny_config(8)).unwrap();
        for t in s.d_params.values_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let data = tiny_data();
        let r = s.step_on(&data).unwrap();
        assert_eq!(r.r1, Some(0.0));
    }

    #[test]
    fn ema_follows_recurrence() {
        let mut s = TrainState::<f64>::new(tiny_config(8)).unwrap();
        let data = tiny_data();
        let mut shadow: Vec<f64> = s.g_ema.values()[0].data()[..3].to_vec();
        for t in 0..4u64 {
            s.step_on(&data).unwrap();
            let d = s.config.train.ema_decay_at(t);
            for (k, e) in shadow.iter_mut().enumerate() {
                *e = d * *e + (1.0 - d) * s.g_params.values()[0].data()[k];
            }
        }
        for (k, e) in shadow.iter().enumerate() {
            assert!((e - s.g_ema.values()[0].data()[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut pos = SamplerPosition { epoch: 0, offset: 0 };
        let mut a = pos.next_indices(3, 5, 5);
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        let b = pos.next_indices(3, 5, 7);
        assert_eq!(pos, SamplerPosition { epoch: 2, offset: 2 });
        assert_eq!(b.len(), 7);
    }

    #[test]
    fn config_mismatch_rejected() {
        let mut c = tiny_config(8);
        c.discriminator.num_classes = 7;
        assert!(TrainState::<f64>::new(c).is_err());
        let mut c = tiny_config(8);
        c.train.ema_decay = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_ablation_is_empty() {
        let spec = ToySceneSpec::with_resolution(16);
        let corpus = make_toy_corpus(&spec, 140, 2).unwrap();
        let imgs: Vec<_> = corpus.iter().map(|s| &s.image).collect();
        let eval = ProxyEval::new(&images_to_tensor(&imgs).unwrap(), 8, 0).unwrap();
        let rows = run_ablation(&[], &corpus, &eval, AblationBudget { steps: 1, eval_every: 0 }).unwrap();
        assert!(rows.is_empty());
        assert!(format_ablation_table(&rows).lines().count() == 2);
    }
}
