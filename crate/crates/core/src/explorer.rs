//! Unsupervised edit directions: harvest per-class style vectors from
//! random latents, run PCA per (class, layer), and move styles along the
//! resulting bases with `s' = s + Vᵀy`.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::generator::{CompositionResult, Generator, LatentComponent, Latents, StyleBank, NUM_LAYERS, SHAPE_EDIT_LAYER, TEXTURE_EDIT_LAYER};
use crate::linalg;
use crate::nn::ParamStore;
use crate::scalar::Scalar;

pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_COMPONENTS: usize = 8;
/// Layers harvested when none are requested.
pub const DEFAULT_LAYERS: [usize; 2] = [SHAPE_EDIT_LAYER, TEXTURE_EDIT_LAYER];

/// Relative variance below which a component is reported as surplus.
const SURPLUS_RTOL: f64 = 1e-10;
/// Latents mapped per forward pass while harvesting.
const HARVEST_CHUNK: usize = 256;

/// Vectors a bank is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum HarvestTarget {
    /// `s_{c,l}`, the output of the per-class, per-layer style head.
    Style,
    /// The latent component (`w_base`, `w_shape` or `w_texture`) that
    /// feeds layer `l`; edits move that component of class `c` only.
    WPlus,
}

impl HarvestTarget {
    pub fn name(self) -> &'static str {
        match self {
            HarvestTarget::Style => "style",
            HarvestTarget::WPlus => "w_plus",
        }
    }
}

/// `N` harvested vectors for one (class, layer), row-major `N × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSampleMatrix {
    pub class: usize,
    pub layer: usize,
    pub target: HarvestTarget,
    pub dim: usize,
    pub rows: Vec<f64>,
}

impl StyleSampleMatrix {
    pub fn new(class: usize, layer: usize, target: HarvestTarget, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 || !rows.len().is_multiple_of(dim) {
            return Err(Error::Dimension { what: "sample matrix", expected: dim, got: rows.len() });
        }
        let n = rows.len() / dim;
        if n < dim.max(2) {
            return Err(Error::TooFewSamples { needed: dim.max(2), got: n });
        }
        Ok(Self { class, layer, target, dim, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

fn check_pair<T: Scalar>(generator: &Generator<T>, class: usize, layer: usize) -> Result<()> {
    let c = generator.config().num_classes;
    if class >= c {
        return Err(Error::ClassOutOfRange { class, num_classes: c });
    }
    if layer >= NUM_LAYERS {
        return Err(Error::LayerOutOfRange { layer, layers: NUM_LAYERS });
    }
    Ok(())
}

fn target_dim<T: Scalar>(generator: &Generator<T>, target: HarvestTarget) -> usize {
    match target {
        HarvestTarget::Style => generator.config().style_dim,
        HarvestTarget::WPlus => generator.config().latent_dim,
    }
}

/// Harvests `n` vectors for every `(class, layer)` in `pairs` from the same
/// `n` latents `z ~ N(0, I)` drawn from `seed`.
pub fn collect_styles_many<T: Scalar>(
    generator: &Generator<T>,
    params: &ParamStore<T>,
    n: usize,
    pairs: &[(usize, usize)],
    target: HarvestTarget,
    seed: u64,
) -> Result<Vec<StyleSampleMatrix>> {
    let dim = target_dim(generator, target);
    if n < dim.max(2) {
        return Err(Error::TooFewSamples { needed: dim.max(2), got: n });
    }
    for &(c, l) in pairs {
        check_pair(generator, c, l)?;
    }
    let mut out: Vec<Vec<f64>> = pairs.iter().map(|_| Vec::with_capacity(n * dim)).collect();
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let lo = pairs.iter().map(|p| p.0).min().unwrap_or(0);
    let hi = pairs.iter().map(|p| p.0).max().unwrap_or(0) + 1;
    let d = generator.config().latent_dim;
    let mut rng = crate::rng::seeded(seed);
    let mut done = 0;
    while done < n {
        let b = HARVEST_CHUNK.min(n - done);
        let z = crate::rng::normal::<T>(&mut rng, &[b, d]);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let zv = g.constant(z);
        let w = generator.map_latent_var(&mut g, &p, zv);
        match target {
            HarvestTarget::WPlus => {
                for (k, &(_, l)) in pairs.iter().enumerate() {
                    let comp = w[LatentComponent::of_layer(l).index()];
                    out[k].extend(g.value(comp).data().iter().map(|v| v.as_f64()));
                }
            }
            HarvestTarget::Style => {
                let w = w.map(|v| {
                    let v = g.reshape(v, &[b, 1, d]);
                    g.broadcast_to(v, &[b, hi - lo, d])
                });
                let styles = generator.styles_var(&mut g, &p, &w, lo..hi);
                let s = dim;
                for (k, &(c, l)) in pairs.iter().enumerate() {
                    let data = g.value(styles[l]).data();
                    for i in 0..b {
                        let off = (i * (hi - lo) + (c - lo)) * s;
                        out[k].extend(data[off..off + s].iter().map(|v| v.as_f64()));
                    }
                }
            }
        }
        done += b;
    }
    pairs.iter().zip(out).map(|(&(c, l), rows)| StyleSampleMatrix::new(c, l, target, dim, rows)).collect()
}

/// [`collect_styles_many`] for a single `(class, layer)`.
pub fn collect_styles<T: Scalar>(
    generator: &Generator<T>,
    params: &ParamStore<T>,
    n: usize,
    class: usize,
    layer: usize,
    target: HarvestTarget,
    seed: u64,
) -> Result<StyleSampleMatrix> {
    let mut v = collect_styles_many(generator, params, n, &[(class, layer)], target, seed)?;
    Ok(v.remove(0))
}

/// PCA of one (class, layer): mean, `k × dim` row-orthonormal basis and
/// the explained variances, descending.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DirectionEntry {
    pub class: usize,
    pub layer: usize,
    pub target: HarvestTarget,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub basis: Vec<f64>,
    pub variances: Vec<f64>,
    /// Trailing components whose variance is numerically zero (the
    /// samples span fewer than `k` dimensions).
    pub surplus: usize,
}

impl DirectionEntry {
    pub fn k(&self) -> usize {
        self.variances.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.basis[i * self.dim..(i + 1) * self.dim]
    }

    /// Largest entry of `|V Vᵀ − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.k();
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((linalg::dot(self.component(i), self.component(j)) - target).abs());
            }
        }
        worst
    }

    /// Checks shapes, orthonormality within `tol` and variance ordering.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let k = self.k();
        if self.mean.len() != self.dim || self.basis.len() != k * self.dim {
            return Err(Error::Dimension { what: "direction basis", expected: k * self.dim, got: self.basis.len() });
        }
        if k > self.dim {
            return Err(Error::TooManyComponents { k, dim: self.dim });
        }
        if self.variances.iter().any(|v| !(*v >= 0.0)) || self.variances.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Schema("variances must be nonnegative and descending".into()));
        }
        let e = self.orthonormality_error();
        if !(e <= tol) {
            return Err(Error::Schema(alloc::format!("basis rows are not orthonormal (error {e:e})")));
        }
        Ok(())
    }
}

/// Sample mean and unbiased covariance of `N × dim` rows.
pub fn mean_and_covariance(rows: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() / dim;
    let mut mean = vec![0.0; dim];
    for r in rows.chunks_exact(dim) {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    for r in rows.chunks_exact(dim) {
        for ((c, &x), &m) in centered.iter_mut().zip(r).zip(&mean) {
            *c = x - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            for j in i..dim {
                cov[i * dim + j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / denom;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    (mean, cov)
}

/// Flips `v` so its largest-magnitude entry (the first, on ties) is
/// positive.
pub fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Top-`k` principal directions of the samples.
pub fn pca(samples: &StyleSampleMatrix, k: usize) -> Result<DirectionEntry> {
    let dim = samples.dim;
    if k > dim {
        return Err(Error::TooManyComponents { k, dim });
    }
    let (mean, cov) = mean_and_covariance(&samples.rows, dim);
    let eig = linalg::sym_eigen(&cov, dim);
    let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let mut basis = Vec::with_capacity(k * dim);
    let mut variances = Vec::with_capacity(k);
    let mut surplus = 0;
    for i in 0..k {
        let mut v = eig.vector(i).to_vec();
        canonical_sign(&mut v);
        basis.extend_from_slice(&v);
        let var = eig.values[i].max(0.0);
        if var <= SURPLUS_RTOL * top || top == 0.0 {
            surplus += 1;
        }
        variances.push(var);
    }
    Ok(DirectionEntry { class: samples.class, layer: samples.layer, target: samples.target, dim, mean, basis, variances, surplus })
}

/// Direction entries keyed by `(class, layer)`; one target per key.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DirectionBank {
    entries: Vec<DirectionEntry>,
}

impl DirectionBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `entry`, replacing any entry with the same `(class, layer)`.
    pub fn insert(&mut self, entry: DirectionEntry) {
        match self.entries.binary_search_by_key(&(entry.class, entry.layer), |e| (e.class, e.layer)) {
            Ok(i) => self.entries[i] = entry,
            Err(i) => self.entries.insert(i, entry),
        }
    }

    pub fn get(&self, class: usize, layer: usize) -> Option<&DirectionEntry> {
        self.entries.binary_search_by_key(&(class, layer), |e| (e.class, e.layer)).ok().map(|i| &self.entries[i])
    }

    pub fn lookup(&self, class: usize, layer: usize) -> Result<&DirectionEntry> {
        self.get(class, layer).ok_or(Error::UnknownDirection { class, layer })
    }

    /// Entries ordered by `(class, layer)`.
    pub fn entries(&self) -> &[DirectionEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        self.entries.iter().try_for_each(|e| e.validate(tol))
    }
}

/// Harvests and runs PCA for every `(class, layer)`.
pub fn build_bank<T: Scalar>(
    generator: &Generator<T>,
    params: &ParamStore<T>,
    classes: &[usize],
    layers: &[usize],
    n: usize,
    k: usize,
    target: HarvestTarget,
    seed: u64,
) -> Result<DirectionBank> {
    let dim = target_dim(generator, target);
    if k > dim {
        return Err(Error::TooManyComponents { k, dim });
    }
    let pairs: Vec<(usize, usize)> = classes.iter().flat_map(|&c| layers.iter().map(move |&l| (c, l))).collect();
    let mut bank = DirectionBank::new();
    for m in collect_styles_many(generator, params, n, &pairs, target, seed)? {
        bank.insert(pca(&m, k)?);
    }
    Ok(bank)
}

/// `s' = s + Σ_i y_i V_i`. Zero coordinates are skipped, so `y = 0`
/// returns `s` unchanged bit for bit.
pub fn edit(s: &[f64], entry: &DirectionEntry, y: &[f64]) -> Result<Vec<f64>> {
    if s.len() != entry.dim {
        return Err(Error::Dimension { what: "edited vector", expected: entry.dim, got: s.len() });
    }
    if y.len() != entry.k() {
        return Err(Error::Dimension { what: "edit coordinates", expected: entry.k(), got: y.len() });
    }
    let mut out = s.to_vec();
    for (i, &yi) in y.iter().enumerate() {
        if yi == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(entry.component(i)) {
            *o += yi * v;
        }
    }
    Ok(out)
}

/// One edit: coordinates `y` along the `(class, layer)` basis.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StyleEdit {
    pub class: usize,
    pub layer: usize,
    pub coords: Vec<f64>,
}

/// Edits applied in order; repeated keys accumulate.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EditSpec {
    pub edits: Vec<StyleEdit>,
}

impl EditSpec {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `magnitude` along a single component of `(class, layer)`.
    pub fn push_component(&mut self, bank: &DirectionBank, class: usize, layer: usize, component: usize, magnitude: f64) -> Result<()> {
        let entry = bank.lookup(class, layer)?;
        if component >= entry.k() {
            return Err(Error::UnknownDirection { class, layer });
        }
        let mut coords = vec![0.0; entry.k()];
        coords[component] = magnitude;
        self.edits.push(StyleEdit { class, layer, coords });
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    /// Checks every edit against the bank.
    pub fn validate(&self, bank: &DirectionBank) -> Result<()> {
        for e in &self.edits {
            let entry = bank.lookup(e.class, e.layer)?;
            if e.coords.len() != entry.k() {
                return Err(Error::Dimension { what: "edit coordinates", expected: entry.k(), got: e.coords.len() });
            }
        }
        Ok(())
    }
}

fn edit_in_place<T: Scalar>(v: &mut [T], entry: &DirectionEntry, y: &[f64]) -> Result<()> {
    if y.iter().all(|&x| x == 0.0) {
        return Ok(());
    }
    let s: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
    let out = edit(&s, entry, y)?;
    for (d, x) in v.iter_mut().zip(out) {
        *d = T::of(x);
    }
    Ok(())
}

/// Style bank of one sample with `spec` applied. W+ edits move the latent
/// component of their class before styles are computed; style edits are
/// applied to the resulting `s_{c,l}`.
pub fn edited_styles<T: Scalar>(
    generator: &Generator<T>,
    params: &ParamStore<T>,
    latents: &Latents<T>,
    bank: &DirectionBank,
    spec: &EditSpec,
) -> Result<StyleBank<T>> {
    spec.validate(bank)?;
    let c = generator.config().num_classes;
    for e in &spec.edits {
        check_pair(generator, e.class, e.layer)?;
    }
    let wplus: Vec<&StyleEdit> = spec.edits.iter().filter(|e| bank.get(e.class, e.layer).is_some_and(|b| b.target == HarvestTarget::WPlus)).collect();
    let latents = if wplus.is_empty() {
        latents.clone()
    } else {
        let mut triples = latents.per_class(c);
        if triples.len() != c {
            return Err(Error::Dimension { what: "per-class latent assignment", expected: c, got: triples.len() });
        }
        for e in wplus {
            let entry = bank.lookup(e.class, e.layer)?;
            let comp = triples[e.class].component_mut(LatentComponent::of_layer(e.layer));
            edit_in_place(comp, entry, &e.coords)?;
        }
        Latents::PerClass(triples)
    };
    let mut styles = generator.style_bank(params, &latents)?;
    for e in &spec.edits {
        let entry = bank.lookup(e.class, e.layer)?;
        if entry.target == HarvestTarget::Style {
            edit_in_place(styles.get_mut(0, e.class, e.layer), entry, &e.coords)?;
        }
    }
    Ok(styles)
}

/// Regenerates one sample with `spec` substituted into its styles.
pub fn apply_edit<T: Scalar>(
    generator: &Generator<T>,
    params: &ParamStore<T>,
    latents: &Latents<T>,
    bank: &DirectionBank,
    spec: &EditSpec,
) -> Result<CompositionResult<T>> {
    let styles = edited_styles(generator, params, latents, bank, spec)?;
    generator.synthesize(params, &styles)
}
