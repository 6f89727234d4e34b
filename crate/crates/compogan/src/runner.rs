//! Long-running jobs: training with checkpoints, sample grids and a
//! metrics log, and the ablation matrix.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use compogan_core::generator::GeneratorConfig;
use compogan_core::grouping::RemapTable;
use compogan_core::raster::{images_to_tensor, tensor_to_image, RgbImage};
use compogan_core::rng;
use compogan_core::toy::{make_toy_corpus, ToySample};
use compogan_core::training::{
    format_ablation_table, run_ablation, AblationBudget, AblationEntry, AblationRow, Dataset, ExperimentConfig, LossReport, ProxyEval, TrainState,
};
use compogan_core::Tensor;
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, TABLE_FILE};
use crate::imageio::{self, colorize, mask_labels};
use crate::tables::{self, NamedTable};

const EVAL_CORPUS_STREAM: u64 = 0xe7a1;
const EVAL_LATENT_STREAM: u64 = 0xe7a2;
const GRID_STREAM: u64 = 0x6a1d;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LATEST_CHECKPOINT: &str = "checkpoint.safetensors";

/// Training samples with fine labels, the grouping to apply, and real
/// images for proxy-FID.
pub struct Corpus {
    pub samples: Vec<ToySample>,
    pub table: NamedTable,
    pub eval_real: Tensor<f32>,
}

fn table_for_dir(cfg: &RunConfig, dir: &Path) -> Result<NamedTable> {
    if cfg.data.table != "auto" {
        return tables::resolve(&cfg.data.table, &cfg.toy);
    }
    let p = dir.join(TABLE_FILE);
    if p.is_file() {
        tables::load(&p)
    } else {
        tables::identity(cfg.generator.num_classes)
    }
}

/// Reads `data`, or generates the toy corpus when it is `None`.
pub fn load_corpus(cfg: &RunConfig, data: Option<&Path>) -> Result<Corpus> {
    let (samples, table, eval_samples) = match data {
        Some(dir) => {
            let pairs = dataset::read_pairs(dir)?;
            let table = table_for_dir(cfg, dir)?;
            let bad = dataset::unmapped(pairs.iter().map(|(_, s)| &s.labels), &table);
            if !bad.is_empty() {
                bail!("{}: label values {:?} are not covered by table `{}`", dir.display(), bad, table.name);
            }
            let samples: Vec<ToySample> = pairs.into_iter().map(|(_, s)| s).collect();
            let eval: Vec<ToySample> = samples.iter().take(cfg.data.eval_real).cloned().collect();
            (samples, table, eval)
        }
        None => {
            let table = if cfg.data.table == "auto" { tables::toy(&cfg.toy)? } else { tables::resolve(&cfg.data.table, &cfg.toy)? };
            let samples = make_toy_corpus(&cfg.toy, cfg.data.toy_samples, cfg.seed)?;
            let eval = make_toy_corpus(&cfg.toy, cfg.data.eval_real, cfg.seed ^ EVAL_CORPUS_STREAM)?;
            (samples, table, eval)
        }
    };
    let r = cfg.generator.output_resolution;
    if let Some(s) = samples.iter().find(|s| s.image.width != r || s.image.height != r) {
        bail!("images are {}×{} but the generator outputs {r}×{r}", s.image.width, s.image.height);
    }
    if table.num_classes() != cfg.generator.num_classes {
        bail!(
            "table `{}` yields {} classes but generator.num_classes is {} (set generator.num_classes and discriminator.num_classes)",
            table.name,
            table.num_classes(),
            cfg.generator.num_classes
        );
    }
    let imgs: Vec<&RgbImage> = eval_samples.iter().map(|s| &s.image).collect();
    Ok(Corpus { samples, table, eval_real: images_to_tensor(&imgs)? })
}

pub fn proxy_eval(cfg: &RunConfig, corpus: &Corpus) -> Result<ProxyEval> {
    Ok(ProxyEval::new(&corpus.eval_real, cfg.schedule.eval_count, cfg.seed ^ EVAL_LATENT_STREAM)?)
}

/// One line of `metrics.jsonl`. Evaluation-only lines (such as the score
/// before the first step) have no losses.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsRecord {
    /// Steps completed.
    pub step: u64,
    pub d_loss: Option<f64>,
    pub g_loss: Option<f64>,
    pub r1: Option<f64>,
    pub real_score: Option<f64>,
    pub fake_score: Option<f64>,
    pub proxy_fid: Option<f64>,
}

impl MetricsRecord {
    fn eval(step: u64, fid: f64) -> Self {
        Self { step, d_loss: None, g_loss: None, r1: None, real_score: None, fake_score: None, proxy_fid: Some(fid) }
    }

    fn from_report(step: u64, r: &LossReport) -> Self {
        Self {
            step,
            d_loss: Some(r.d_loss),
            g_loss: Some(r.g_loss),
            r1: r.r1,
            real_score: Some(r.real_score),
            fake_score: Some(r.fake_score),
            proxy_fid: None,
        }
    }
}

pub struct TrainSummary {
    pub steps: u64,
    /// `(step, proxy-FID)` at every evaluation.
    pub trace: Vec<(u64, f64)>,
    pub checkpoint: PathBuf,
}

/// Image/mask pairs of `n` fixed latents, laid out four pairs per row.
pub fn sample_grid(state: &TrainState<f32>, n: usize, seed: u64, palette: &[[u8; 3]]) -> Result<RgbImage> {
    let z = rng::normal::<f32>(&mut rng::seeded(seed ^ GRID_STREAM), &[n, state.config.generator.latent_dim]);
    let out = state.generator.generate_batch(&state.g_ema, &z)?;
    let mut tiles = Vec::with_capacity(2 * n);
    for b in 0..n {
        tiles.push(tensor_to_image(&out.image, b));
        tiles.push(colorize(&mask_labels(&out.final_mask, b)?, palette));
    }
    Ok(imageio::grid(&tiles, 8))
}

fn append(log: &mut File, rec: &MetricsRecord) -> Result<()> {
    writeln!(log, "{}", serde_json::to_string(rec)?)?;
    Ok(())
}

fn due(step: u64, every: u64, last: u64) -> bool {
    step == last || (every > 0 && step.is_multiple_of(every))
}

/// Trains to `cfg.train.total_steps`, starting fresh or from `resume`.
/// `progress` receives one human-readable line per evaluation.
pub fn train(cfg: &RunConfig, data: Option<&Path>, out: &Path, resume: Option<&Path>, progress: &mut dyn FnMut(&str)) -> Result<TrainSummary> {
    cfg.write_into(out)?;
    let corpus = load_corpus(cfg, data)?;
    let data = Dataset::<f32>::from_samples(&corpus.samples, &corpus.table.table)?;
    // eval_every = 0 turns evaluation off entirely
    let eval = if cfg.schedule.eval_every > 0 { Some(proxy_eval(cfg, &corpus)?) } else { None };
    let mut state = match resume {
        Some(p) => {
            let s = checkpoint::load(p)?;
            if s.config.generator != cfg.generator || s.config.discriminator != cfg.discriminator {
                bail!("{} was trained with a different model configuration", p.display());
            }
            s
        }
        None => TrainState::<f32>::new(cfg.experiment())?,
    };
    let total = cfg.train.total_steps as u64;
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::create_dir_all(out.join("samples"))?;
    let mut log = OpenOptions::new().create(true).append(true).open(out.join(METRICS_FILE))?;
    let latest = out.join(LATEST_CHECKPOINT);
    let mut trace = Vec::new();

    if let (None, Some(eval)) = (resume, &eval) {
        let fid = eval.score(&state.generator, &state.g_ema)?;
        append(&mut log, &MetricsRecord::eval(state.step, fid))?;
        progress(&format!("step {:>6}  proxy-FID {fid:.3}", state.step));
        trace.push((state.step, fid));
    }
    while state.step < total {
        let report = state.step_on(&data)?;
        let step = state.step;
        let mut rec = MetricsRecord::from_report(step, &report);
        if !report.is_finite() || !state.is_finite() {
            append(&mut log, &rec)?;
            bail!("training diverged at step {step} (d_loss {}, g_loss {})", report.d_loss, report.g_loss);
        }
        if let Some(eval) = eval.as_ref().filter(|_| due(step, cfg.schedule.eval_every, total)) {
            let fid = eval.score(&state.generator, &state.g_ema)?;
            rec.proxy_fid = Some(fid);
            trace.push((step, fid));
            progress(&format!("step {step:>6}  d {:.4}  g {:.4}  proxy-FID {fid:.3}", report.d_loss, report.g_loss));
        }
        append(&mut log, &rec)?;
        if due(step, cfg.schedule.sample_every, total) {
            let grid = sample_grid(&state, cfg.schedule.grid_size, cfg.seed, &corpus.table.palette)?;
            imageio::write_rgb(&out.join("samples").join(format!("step_{step:06}.png")), &grid)?;
        }
        if due(step, cfg.schedule.checkpoint_every, total) {
            let a = checkpoint::to_archive(&state, Some(&corpus.table))?;
            a.save(&out.join("checkpoints").join(format!("step_{step:06}.safetensors")))?;
            a.save(&latest)?;
        }
    }
    if !latest.exists() {
        checkpoint::save(&state, Some(&corpus.table), &latest)?;
    }
    Ok(TrainSummary { steps: state.step, trace, checkpoint: latest })
}

/// One ablation entry's experiment: the configured widths with the
/// entry's class count, spectral-norm flag and batch size.
pub fn ablation_entries(cfg: &RunConfig) -> Result<Vec<AblationEntry>> {
    let grouped = cfg.toy.remap_table()?;
    let fine = RemapTable::identity(cfg.toy.classes.len())?;
    cfg.ablate
        .entries
        .iter()
        .map(|e| {
            let table = if e.grouped { grouped.clone() } else { fine.clone() };
            let c = table.num_super_classes();
            let mut x = ExperimentConfig {
                generator: GeneratorConfig { num_classes: c, ..cfg.generator.clone() },
                discriminator: cfg.discriminator.clone(),
                train: cfg.train.clone(),
            };
            x.discriminator.num_classes = c;
            x.discriminator.spectral_norm = e.spectral_norm;
            x.train.batch_size = e.batch_size;
            x.validate().with_context(|| format!("ablation entry `{}`", e.name))?;
            Ok(AblationEntry { name: e.name.clone(), config: x, table })
        })
        .collect()
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.write_into(out)?;
    let entries = ablation_entries(cfg)?;
    let corpus = make_toy_corpus(&cfg.toy, cfg.data.toy_samples, cfg.seed)?;
    let real = make_toy_corpus(&cfg.toy, cfg.data.eval_real, cfg.seed ^ EVAL_CORPUS_STREAM)?;
    let imgs: Vec<&RgbImage> = real.iter().map(|s| &s.image).collect();
    let eval = ProxyEval::new(&images_to_tensor(&imgs)?, cfg.schedule.eval_count, cfg.seed ^ EVAL_LATENT_STREAM)?;
    let rows = run_ablation(&entries, &corpus, &eval, AblationBudget { steps: cfg.ablate.steps, eval_every: cfg.ablate.eval_every })?;
    fs::write(out.join("ablation.md"), format_ablation_table(&rows))?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}
