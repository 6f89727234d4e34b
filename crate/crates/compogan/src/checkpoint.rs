//! Training checkpoints.
//!
//! Format `compogan.checkpoint`, version 1: a safetensors file. Arrays are
//! little-endian F32, keyed by parameter name under a prefix:
//!
//! | prefix            | contents                                   |
//! |-------------------|--------------------------------------------|
//! | `g/`              | generator weights                          |
//! | `g_ema/`          | EMA generator weights (used for inference) |
//! | `d/`              | discriminator weights                      |
//! | `adam.g.m/`, `adam.g.v/`, `adam.d.m/`, `adam.d.v/` | Adam moments |
//! | `sn/<name>.u`, `sn/<name>.v` | spectral-norm power vectors     |
//!
//! Metadata (all strings): `format`, `version`, `config` (the experiment
//! configuration as JSON), `step`, `adam.g.step`, `adam.d.step`, `rng`
//! (JSON `{seed, stream, word_pos}`, seed as 64 hex digits and word_pos as
//! a decimal string), `sampler` (JSON `{epoch, offset}`) and, optionally,
//! `table`: the remap table document naming the classes.

use std::path::Path;

use anyhow::{bail, Context, Result};
use compogan_core::generator::Generator;
use compogan_core::nn::ParamStore;
use compogan_core::rng::{self, RngState};
use compogan_core::training::{ExperimentConfig, SamplerPosition, TrainState};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::tables::{self, NamedTable};

pub const FORMAT: &str = "compogan.checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngDoc {
    seed: String,
    stream: u64,
    word_pos: String,
}

fn rng_doc(s: &RngState) -> RngDoc {
    RngDoc { seed: s.seed.iter().map(|b| format!("{b:02x}")).collect(), stream: s.stream, word_pos: s.word_pos.to_string() }
}

fn rng_state(d: &RngDoc) -> Result<RngState> {
    if d.seed.len() != 64 {
        bail!("rng seed must be 64 hex digits");
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&d.seed[2 * i..2 * i + 2], 16)?;
    }
    Ok(RngState { seed, stream: d.stream, word_pos: d.word_pos.parse()? })
}

fn put_store(a: &mut Archive, prefix: &str, p: &ParamStore<f32>) {
    for (name, t) in p.iter() {
        a.put_f32(format!("{prefix}/{name}"), t);
    }
}

fn fill_store(a: &Archive, prefix: &str, p: &mut ParamStore<f32>) -> Result<()> {
    for id in p.ids().collect::<Vec<_>>() {
        let key = format!("{prefix}/{}", p.name(id));
        let t = a.f32_tensor(&key)?;
        if t.shape() != p.get(id).shape() {
            bail!("`{key}` has shape {:?}, the model expects {:?}", t.shape(), p.get(id).shape());
        }
        *p.get_mut(id) = t;
    }
    Ok(())
}

fn put_moments(a: &mut Archive, prefix: &str, p: &ParamStore<f32>, m: &[compogan_core::Tensor<f32>]) {
    for (id, t) in p.ids().zip(m) {
        a.put_f32(format!("{prefix}/{}", p.name(id)), t);
    }
}

fn fill_moments(a: &Archive, prefix: &str, p: &ParamStore<f32>, m: &mut [compogan_core::Tensor<f32>]) -> Result<()> {
    for (id, t) in p.ids().zip(m.iter_mut()) {
        let key = format!("{prefix}/{}", p.name(id));
        let v = a.f32_tensor(&key)?;
        if v.shape() != t.shape() {
            bail!("`{key}` has shape {:?}, expected {:?}", v.shape(), t.shape());
        }
        *t = v;
    }
    Ok(())
}

pub fn to_archive(state: &TrainState<f32>, table: Option<&NamedTable>) -> Result<Archive> {
    let mut a = Archive::new(FORMAT, VERSION);
    if let Some(t) = table {
        if t.num_classes() != state.config.num_classes() {
            bail!("table `{}` has {} classes, the model {}", t.name, t.num_classes(), state.config.num_classes());
        }
        a.meta("table", t.to_toml());
    }
    a.meta("config", serde_json::to_string(&state.config)?);
    a.meta("step", state.step.to_string());
    a.meta("adam.g.step", state.g_opt.step.to_string());
    a.meta("adam.d.step", state.d_opt.step.to_string());
    a.meta("rng", serde_json::to_string(&rng_doc(&state.rng_state()))?);
    a.meta("sampler", serde_json::to_string(&state.sampler)?);
    put_store(&mut a, "g", &state.g_params);
    put_store(&mut a, "g_ema", &state.g_ema);
    put_store(&mut a, "d", &state.d_params);
    put_moments(&mut a, "adam.g.m", &state.g_params, &state.g_opt.m);
    put_moments(&mut a, "adam.g.v", &state.g_params, &state.g_opt.v);
    put_moments(&mut a, "adam.d.m", &state.d_params, &state.d_opt.m);
    put_moments(&mut a, "adam.d.v", &state.d_params, &state.d_opt.v);
    for (name, pv) in state.spectral.names.iter().zip(&state.spectral.vectors) {
        a.put_f32_vec(format!("sn/{name}.u"), &pv.u);
        a.put_f32_vec(format!("sn/{name}.v"), &pv.v);
    }
    Ok(a)
}

pub fn save(state: &TrainState<f32>, table: Option<&NamedTable>, path: &Path) -> Result<()> {
    to_archive(state, table)?.save(path)
}

fn table_of(a: &Archive) -> Result<Option<NamedTable>> {
    a.metadata.get("table").map(|src| tables::parse_remap_table(src)).transpose()
}

pub fn config_of(a: &Archive) -> Result<ExperimentConfig> {
    a.expect_format(FORMAT, VERSION)?;
    let config: ExperimentConfig = serde_json::from_str(a.get_meta("config")?).context("checkpoint config")?;
    config.validate()?;
    Ok(config)
}

pub fn from_archive(a: &Archive) -> Result<TrainState<f32>> {
    let config = config_of(a)?;
    let mut state = TrainState::<f32>::new(config)?;
    state.step = a.get_meta("step")?.parse()?;
    state.g_opt.step = a.get_meta("adam.g.step")?.parse()?;
    state.d_opt.step = a.get_meta("adam.d.step")?.parse()?;
    state.rng = rng::restore(&rng_state(&serde_json::from_str(a.get_meta("rng")?)?)?);
    state.sampler = serde_json::from_str::<SamplerPosition>(a.get_meta("sampler")?)?;
    fill_store(a, "g", &mut state.g_params)?;
    fill_store(a, "g_ema", &mut state.g_ema)?;
    fill_store(a, "d", &mut state.d_params)?;
    fill_moments(a, "adam.g.m", &state.g_params, &mut state.g_opt.m)?;
    fill_moments(a, "adam.g.v", &state.g_params, &mut state.g_opt.v)?;
    fill_moments(a, "adam.d.m", &state.d_params, &mut state.d_opt.m)?;
    fill_moments(a, "adam.d.v", &state.d_params, &mut state.d_opt.v)?;
    for (name, pv) in state.spectral.names.iter().zip(state.spectral.vectors.iter_mut()) {
        for (suffix, dst) in [("u", &mut pv.u), ("v", &mut pv.v)] {
            let t = a.f32_tensor(&format!("sn/{name}.{suffix}"))?;
            if t.data().len() != dst.len() {
                bail!("spectral vector `{name}.{suffix}` has length {}, expected {}", t.data().len(), dst.len());
            }
            dst.copy_from_slice(t.data());
        }
    }
    Ok(state)
}

pub fn load(path: &Path) -> Result<TrainState<f32>> {
    from_archive(&Archive::load(path)?).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// The EMA generator of a checkpoint, ready for inference.
pub struct Model {
    pub config: ExperimentConfig,
    pub step: u64,
    pub generator: Generator<f32>,
    pub params: ParamStore<f32>,
    /// Class names and colors, when the checkpoint recorded them.
    pub table: Option<NamedTable>,
}

impl Model {
    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config = config_of(a)?;
        let (generator, mut params) = Generator::<f32>::new(config.generator.clone(), &mut rng::seeded(0))?;
        fill_store(a, "g_ema", &mut params)?;
        Ok(Self { step: a.get_meta("step")?.parse()?, config, generator, params, table: table_of(a)? })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?).with_context(|| format!("loading checkpoint {}", path.display()))
    }

    pub fn from_state(state: &TrainState<f32>, table: Option<NamedTable>) -> Self {
        Self { config: state.config.clone(), step: state.step, generator: state.generator.clone(), params: state.g_ema.clone(), table }
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    pub fn palette(&self) -> Vec<[u8; 3]> {
        self.table.as_ref().map_or_else(|| tables::default_palette(self.num_classes()), |t| t.palette.clone())
    }

    pub fn class_names(&self) -> Vec<String> {
        match &self.table {
            Some(t) => t.table.names().into_iter().map(String::from).collect(),
            None => (0..self.num_classes()).map(|c| format!("class{c}")).collect(),
        }
    }
}
