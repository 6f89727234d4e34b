//! Run configuration: built-in defaults, then a TOML file, then
//! `section.field=value` overrides, then validation.
//!
//! The top-level `seed` is the single root of randomness for a run; it is
//! copied into `train.seed` during resolution.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use compogan_core::discriminator::DiscriminatorConfig;
use compogan_core::explorer::{HarvestTarget, DEFAULT_COMPONENTS, DEFAULT_LAYERS, DEFAULT_SAMPLES};
use compogan_core::generator::{GeneratorConfig, NUM_LAYERS};
use compogan_core::toy::ToySceneSpec;
use compogan_core::training::{ExperimentConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const FILE_NAME: &str = "run_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub explore: ExploreConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub serve: ServeConfig,
    pub toy: ToySceneSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::toy(8);
        Self {
            seed: 0,
            generator: e.generator,
            discriminator: e.discriminator,
            train: e.train,
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            explore: ExploreConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            serve: ServeConfig::default(),
            toy: ToySceneSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// How dataset label values group into model classes: `auto` (the
    /// dataset's `table.toml`, or the toy grouping for generated data),
    /// `toy`, `cityscapes`, `identity:N` or a table file path.
    pub table: String,
    /// Size of the generated corpus when training without `--data`.
    pub toy_samples: usize,
    /// Real images held out for proxy-FID.
    pub eval_real: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { table: "auto".into(), toy_samples: 2048, eval_real: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub checkpoint_every: u64,
    pub sample_every: u64,
    /// Proxy-FID cadence; 0 scores only at the start and the end.
    pub eval_every: u64,
    /// Generated images per proxy-FID score.
    pub eval_count: usize,
    /// Samples in each dumped grid.
    pub grid_size: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { checkpoint_every: 500, sample_every: 250, eval_every: 250, eval_count: 256, grid_size: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreConfig {
    /// Empty means every class.
    pub classes: Vec<usize>,
    pub layers: Vec<usize>,
    pub samples: usize,
    pub components: usize,
    pub target: HarvestTarget,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self { classes: vec![], layers: DEFAULT_LAYERS.to_vec(), samples: DEFAULT_SAMPLES, components: DEFAULT_COMPONENTS, target: HarvestTarget::Style }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `proxy` or `pixels`.
    pub extractor: String,
    /// Cap on images read from each directory.
    pub max_images: usize,
    /// Generated samples scored by `eval miou --ckpt`.
    pub samples: usize,
    pub segmenter_steps: usize,
    pub segmenter_width: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { extractor: "proxy".into(), max_images: 2000, samples: 256, segmenter_steps: 300, segmenter_width: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateEntry {
    pub name: String,
    /// Train on the toy super-classes (true) or the fine classes (false).
    pub grouped: bool,
    pub spectral_norm: bool,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub steps: u64,
    pub eval_every: u64,
    pub entries: Vec<AblateEntry>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        let e = |name: &str, grouped, spectral_norm| AblateEntry { name: name.into(), grouped, spectral_norm, batch_size: 16 };
        Self {
            steps: 2000,
            eval_every: 250,
            entries: vec![
                e("ungrouped", false, false),
                e("ungrouped+sn", false, true),
                e("grouped", true, false),
                e("grouped+sn", true, true),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080 }
    }
}

impl RunConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig { generator: self.generator.clone(), discriminator: self.discriminator.clone(), train: self.train.clone() }
    }

    /// Overwrites the model sections, e.g. with a checkpoint's.
    pub fn set_experiment(&mut self, e: &ExperimentConfig) {
        self.generator = e.generator.clone();
        self.discriminator = e.discriminator.clone();
        self.train = e.train.clone();
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment().validate()?;
        self.toy.validate()?;
        if let Some(&l) = self.explore.layers.iter().find(|&&l| l >= NUM_LAYERS) {
            bail!("explore.layers: layer {l} out of range for {NUM_LAYERS} layers");
        }
        if self.explore.components == 0 {
            bail!("explore.components must be at least 1");
        }
        if self.schedule.eval_count < 2 || self.data.eval_real < 2 {
            bail!("schedule.eval_count and data.eval_real must be at least 2");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    /// Writes `run_config.toml` into `dir`.
    pub fn write_into(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(FILE_NAME), self.to_toml()).with_context(|| format!("writing {}", dir.join(FILE_NAME).display()))
    }
}

fn merge(dst: &mut Table, src: Table, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = dst.get_mut(&k).ok_or_else(|| anyhow!("unknown config key `{path}`"))?;
        match (slot, v) {
            (Value::Table(d), Value::Table(s)) => merge(d, s, &path)?,
            (slot @ Value::Table(_), _) => bail!("config key `{path}` is a section, not a value; current value is {slot}"),
            (slot, v) => *slot = v,
        }
    }
    Ok(())
}

fn parse_override(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v was just parsed"),
        Err(_) => Value::String(raw.into()),
    }
}

/// Sets `section.field=value` on the config tree. The value is parsed as
/// TOML, falling back to a plain string.
fn apply_override(root: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
    let key = key.trim();
    let mut value = parse_override(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| anyhow!("empty override key in `{spec}`"))?;
    let mut table = &mut *root;
    for (i, p) in parts.iter().enumerate() {
        table = match table.get_mut(*p) {
            Some(Value::Table(t)) => t,
            _ => bail!("unknown config key `{}`", parts[..=i].join(".")),
        };
    }
    let slot = table.get_mut(last).ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
    if slot.is_str() && !value.is_str() {
        value = Value::String(raw.trim().into());
    }
    if slot.is_table() {
        bail!("config key `{key}` is a section, not a value");
    }
    *slot = value;
    Ok(())
}

/// Layers configuration sources over the defaults; later layers win.
pub struct Resolver {
    root: Table,
}

impl Default for Resolver {
    fn default() -> Self {
        let Value::Table(root) = Value::try_from(RunConfig::default()).expect("defaults serialize") else {
            unreachable!("structs serialize to tables")
        };
        Self { root }
    }
}

impl Resolver {
    /// Merges a whole config file.
    pub fn file(&mut self, path: &Path) -> Result<&mut Self> {
        let t = read_table(path)?;
        merge(&mut self.root, t, "").with_context(|| format!("in {}", path.display()))?;
        Ok(self)
    }

    /// Merges a file holding the contents of one section, e.g. `toy`.
    pub fn section_file(&mut self, section: &str, path: &Path) -> Result<&mut Self> {
        let mut t = Table::new();
        t.insert(section.into(), Value::Table(read_table(path)?));
        merge(&mut self.root, t, "").with_context(|| format!("in {}", path.display()))?;
        Ok(self)
    }

    /// Applies one `section.field=value` override.
    pub fn set(&mut self, spec: &str) -> Result<&mut Self> {
        apply_override(&mut self.root, spec)?;
        Ok(self)
    }

    pub fn finish(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = Value::Table(self.root.clone()).try_into().context("invalid configuration")?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_table(path: &Path) -> Result<Table> {
    let src = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&src).with_context(|| format!("parsing {}", path.display()))
}

/// Defaults, then `file`, then `overrides`, in that order.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut r = Resolver::default();
    if let Some(path) = file {
        r.file(path)?;
    }
    for o in overrides {
        r.set(o)?;
    }
    r.finish()
}
