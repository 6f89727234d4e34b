//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use compogan_core::explorer::{build_bank, DirectionBank, EditSpec, StyleEdit};
use compogan_core::grouping::LabelMap;
use compogan_core::metrics::{extractor_by_name, feature_stats, frechet_distance, miou_dataset, ConvSegmenter, Segmenter, SegmenterConfig};
use compogan_core::raster::{images_to_tensor, RgbImage};
use compogan_core::rng;
use compogan_core::toy::make_toy_corpus;
use compogan_core::training::Dataset;
use compogan_core::Tensor;
use serde::Deserialize;
use serde_json::json;

use crate::checkpoint::Model;
use crate::config::{Resolver, RunConfig};
use crate::dataset::{self, TABLE_FILE};
use crate::inference::{latents_for_seed, render, render_seed};
use crate::{bank_io, imageio, runner, service, tables};

#[derive(Parser, Debug)]
#[command(name = "compogan", version, about = "Compositional scene GAN: data preparation, training, direction discovery, editing and evaluation")]
pub struct Cli {
    /// Root seed for every source of randomness in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a configuration field by dotted path, e.g. `train.batch_size=8`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rewrite label maps into super-class maps with a remap table.
    Preprocess {
        /// Table file, or `cityscapes`, `toy`, `identity:N`.
        #[arg(long)]
        table: String,
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Generate the procedural street-scene corpus.
    MakeToy {
        /// TOML file with the scene parameters.
        #[arg(long, value_name = "PATH")]
        spec: Option<PathBuf>,
        #[arg(short = 'n', long = "count")]
        count: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a model; without `--data` the toy corpus is generated.
    Train {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Shorthand for `--set train.total_steps=N`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample images and masks from a checkpoint.
    Generate {
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        #[arg(short = 'n', long = "count", default_value_t = 1)]
        count: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Discover edit directions by PCA over harvested styles.
    Explore {
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        /// Comma-separated class indices; default all.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        /// Latents to harvest.
        #[arg(short = 'N', long = "samples")]
        samples: Option<usize>,
        /// Components per (class, layer).
        #[arg(short = 'k', long = "components")]
        components: Option<usize>,
        #[arg(long, value_enum)]
        target: Option<Target>,
        /// Bank file to write.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Apply an edit spec to the sample of `--seed`.
    Edit {
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        #[arg(long, value_name = "PATH")]
        bank: PathBuf,
        /// TOML or JSON list of edits.
        #[arg(long, value_name = "PATH")]
        spec: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the HTTP editing service.
    Serve {
        #[arg(long, value_name = "PATH")]
        ckpt: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        bank: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        host: Option<String>,
    },
    /// Train the ablation matrix at equal budget and report proxy-FID.
    Ablate {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        eval_every: Option<u64>,
    },
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Fréchet distance between two image directories.
    Fid {
        #[arg(long, value_name = "DIR")]
        real: PathBuf,
        #[arg(long, value_name = "DIR")]
        fake: PathBuf,
        #[command(flatten)]
        report: Report,
    },
    /// mIoU between two label directories, or of a checkpoint's masks
    /// against a segmenter trained on real data.
    Miou {
        #[arg(long, value_name = "DIR", requires = "gt", conflicts_with = "ckpt")]
        pred: Option<PathBuf>,
        #[arg(long, value_name = "DIR", requires = "pred")]
        gt: Option<PathBuf>,
        /// Class count; default one more than the largest label.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, value_name = "PATH", required_unless_present = "pred")]
        ckpt: Option<PathBuf>,
        /// Real data for the segmenter; default the toy corpus.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[command(flatten)]
        report: Report,
    },
}

#[derive(Args, Debug)]
struct Report {
    /// Directory for a JSON report and the run configuration.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Target {
    Style,
    WPlus,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn resolve(cli: &Cli, extra: &[String], toy_spec: Option<&Path>) -> Result<RunConfig> {
    let mut r = Resolver::default();
    if let Some(p) = &cli.config {
        r.file(p)?;
    }
    if let Some(p) = toy_spec {
        r.section_file("toy", p)?;
    }
    for o in cli.overrides.iter().chain(extra) {
        r.set(o)?;
    }
    if let Some(s) = cli.seed {
        r.set(&format!("seed={s}"))?;
    }
    r.finish()
}

fn list(xs: &[usize]) -> String {
    format!("[{}]", xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
}

/// Run configs for file outputs go next to the file.
fn config_beside_file(cfg: &RunConfig, file: &Path) -> Result<()> {
    let name = format!("{}.run_config.toml", file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into()));
    let path = file.with_file_name(name);
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess { table, input, out } => {
            let cfg = resolve(&cli, &[], None)?;
            let t = tables::resolve(table, &cfg.toy)?;
            let n = dataset::preprocess(input, out, &t)?;
            cfg.write_into(out)?;
            println!("remapped {n} label maps into {} classes", t.num_classes());
        }
        Command::MakeToy { spec, count, out } => {
            let cfg = resolve(&cli, &[], spec.as_deref())?;
            let samples = make_toy_corpus(&cfg.toy, *count, cfg.seed)?;
            let width = count.to_string().len().max(5);
            let named: Vec<_> = samples.into_iter().enumerate().map(|(i, s)| (format!("{i:0width$}"), s)).collect();
            dataset::write_pairs(out, &named)?;
            fs::write(out.join(TABLE_FILE), tables::toy(&cfg.toy)?.to_toml())?;
            cfg.write_into(out)?;
            println!("wrote {count} scenes to {}", out.display());
        }
        Command::Train { data, out, resume, steps } => {
            let extra: Vec<String> = steps.iter().map(|s| format!("train.total_steps={s}")).collect();
            let cfg = resolve(&cli, &extra, None)?;
            let summary = runner::train(&cfg, data.as_deref(), out, resume.as_deref(), &mut |l| println!("{l}"))?;
            println!("trained {} steps; checkpoint {}", summary.steps, summary.checkpoint.display());
        }
        Command::Generate { ckpt, count, out } => {
            let mut cfg = resolve(&cli, &[], None)?;
            let model = Model::load(ckpt)?;
            cfg.set_experiment(&model.config);
            fs::create_dir_all(out)?;
            let palette = model.palette();
            for i in 0..*count {
                let r = render_seed(&model, cfg.seed.wrapping_add(i as u64), None, &EditSpec::new())?;
                imageio::write_rgb(&out.join(format!("sample_{i:04}.png")), &r.image)?;
                imageio::write_labels(&out.join(format!("sample_{i:04}_mask.png")), &r.mask)?;
                imageio::write_rgb(&out.join(format!("sample_{i:04}_mask_color.png")), &r.mask_overlay(&palette))?;
            }
            cfg.write_into(out)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Explore { ckpt, classes, layers, samples, components, target, out } => {
            let mut extra = Vec::new();
            if !classes.is_empty() {
                extra.push(format!("explore.classes={}", list(classes)));
            }
            if !layers.is_empty() {
                extra.push(format!("explore.layers={}", list(layers)));
            }
            extra.extend(samples.map(|n| format!("explore.samples={n}")));
            extra.extend(components.map(|k| format!("explore.components={k}")));
            extra.extend(target.map(|t| format!("explore.target={}", match t {
                Target::Style => "style",
                Target::WPlus => "w_plus",
            })));
            let mut cfg = resolve(&cli, &extra, None)?;
            let model = Model::load(ckpt)?;
            cfg.set_experiment(&model.config);
            let e = &cfg.explore;
            let classes: Vec<usize> = if e.classes.is_empty() { (0..model.num_classes()).collect() } else { e.classes.clone() };
            let bank = build_bank(&model.generator, &model.params, &classes, &e.layers, e.samples, e.components, e.target, cfg.seed)?;
            bank_io::save(&bank, out)?;
            config_beside_file(&cfg, out)?;
            println!("wrote {} directions to {}", bank.len(), out.display());
        }
        Command::Edit { ckpt, bank, spec, out } => {
            let mut cfg = resolve(&cli, &[], None)?;
            let model = Model::load(ckpt)?;
            cfg.set_experiment(&model.config);
            let bank = bank_io::load(bank)?;
            let edits = read_edit_spec(spec, &bank)?;
            let latents = latents_for_seed(&model, cfg.seed)?;
            let palette = model.palette();
            let base = render(&model, &latents, Some(&bank), &EditSpec::new())?;
            let r = render(&model, &latents, Some(&bank), &edits)?;
            fs::create_dir_all(out)?;
            imageio::write_rgb(&out.join("baseline.png"), &base.image)?;
            imageio::write_rgb(&out.join("image.png"), &r.image)?;
            imageio::write_labels(&out.join("mask.png"), &r.mask)?;
            imageio::write_rgb(&out.join("mask_color.png"), &r.mask_overlay(&palette))?;
            imageio::write_rgb(&out.join("coarse_mask_color.png"), &r.coarse_overlay(&palette))?;
            cfg.write_into(out)?;
            println!("applied {} edits; wrote {}", edits.edits.len(), out.display());
        }
        Command::Eval(EvalCommand::Fid { real, fake, report }) => {
            let cfg = resolve(&cli, &[], None)?;
            let real_t = read_image_dir(real, cfg.eval.max_images)?;
            let fake_t = read_image_dir(fake, cfg.eval.max_images)?;
            if real_t.shape()[2..] != fake_t.shape()[2..] {
                bail!("real images are {:?} but fake images are {:?}", &real_t.shape()[2..], &fake_t.shape()[2..]);
            }
            let ex = extractor_by_name(&cfg.eval.extractor, real_t.shape()[2])?;
            let fid = frechet_distance(&feature_stats(&real_t, ex.as_ref())?, &feature_stats(&fake_t, ex.as_ref())?)?;
            let doc = json!({ "fid": fid, "extractor": cfg.eval.extractor, "real_count": real_t.shape()[0], "fake_count": fake_t.shape()[0] });
            println!("{doc}");
            write_report(&cfg, report, "eval_fid.json", &doc)?;
        }
        Command::Eval(EvalCommand::Miou { pred, gt, classes, ckpt, data, report }) => {
            let cfg = resolve(&cli, &[], None)?;
            let doc = match (pred, gt, ckpt) {
                (Some(p), Some(g), _) => miou_dirs(p, g, *classes)?,
                (_, _, Some(c)) => miou_checkpoint(&cfg, c, data.as_deref())?,
                _ => bail!("give --pred and --gt, or --ckpt"),
            };
            println!("{doc}");
            write_report(&cfg, report, "eval_miou.json", &doc)?;
        }
        Command::Serve { ckpt, bank, port, host } => {
            let mut extra: Vec<String> = port.iter().map(|p| format!("serve.port={p}")).collect();
            extra.extend(host.iter().map(|h| format!("serve.host={h}")));
            let mut cfg = resolve(&cli, &extra, None)?;
            let model = ckpt.as_deref().map(Model::load).transpose()?;
            if let Some(m) = &model {
                cfg.set_experiment(&m.config);
            }
            let bank = bank.as_deref().map(bank_io::load).transpose()?;
            let addr: SocketAddr = format!("{}:{}", cfg.serve.host, cfg.serve.port).parse().context("serve.host/serve.port")?;
            let state = service::AppState::new(model, bank);
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(service::serve(state, addr, |a| println!("listening on http://{a}")))?;
        }
        Command::Ablate { out, steps, eval_every } => {
            let mut extra: Vec<String> = steps.iter().map(|s| format!("ablate.steps={s}")).collect();
            extra.extend(eval_every.iter().map(|s| format!("ablate.eval_every={s}")));
            let cfg = resolve(&cli, &extra, None)?;
            let rows = runner::ablate(&cfg, out)?;
            print!("{}", compogan_core::training::format_ablation_table(&rows));
        }
    }
    Ok(())
}

fn write_report(cfg: &RunConfig, report: &Report, name: &str, doc: &serde_json::Value) -> Result<()> {
    if let Some(dir) = &report.out {
        cfg.write_into(dir)?;
        fs::write(dir.join(name), serde_json::to_string_pretty(doc)?)?;
    }
    Ok(())
}

fn read_image_dir(dir: &Path, max: usize) -> Result<Tensor<f32>> {
    let files = dataset::list_pngs(&dataset::images_dir(dir))?;
    let imgs: Vec<RgbImage> = files.iter().take(max).map(|p| imageio::read_rgb(p)).collect::<Result<_>>()?;
    if imgs.len() < 2 {
        bail!("{} holds {} images; need at least 2", dir.display(), imgs.len());
    }
    Ok(images_to_tensor(&imgs.iter().collect::<Vec<_>>())?)
}

fn miou_dirs(pred: &Path, gt: &Path, classes: Option<usize>) -> Result<serde_json::Value> {
    let p = dataset::read_label_dir(&dataset::labels_dir(pred))?;
    let g = dataset::read_label_dir(&dataset::labels_dir(gt))?;
    let gt_by_name: std::collections::BTreeMap<_, _> = g.into_iter().collect();
    let mut raw = Vec::new();
    for (name, pm) in p {
        let gm = gt_by_name.get(&name).with_context(|| format!("no ground truth for `{name}`"))?;
        raw.push((pm, gm.clone()));
    }
    if raw.is_empty() {
        bail!("no label maps in {}", pred.display());
    }
    let max = raw.iter().flat_map(|(a, b)| a.values().iter().chain(b.values())).copied().max().unwrap_or(0) as usize;
    let c = classes.unwrap_or(max + 1);
    if max >= c {
        bail!("label value {max} out of range for {c} classes");
    }
    let pairs: Vec<(LabelMap, LabelMap)> = raw
        .into_iter()
        .map(|(a, b)| Ok((LabelMap::new(a.height(), a.width(), c, a.values().to_vec())?, LabelMap::new(b.height(), b.width(), c, b.values().to_vec())?)))
        .collect::<Result<_>>()?;
    let m = miou_dataset(&pairs, c)?;
    Ok(json!({ "miou": m, "classes": c, "pairs": pairs.len() }))
}

/// Generated masks against a segmenter trained on real pairs.
fn miou_checkpoint(cfg: &RunConfig, ckpt: &Path, data: Option<&Path>) -> Result<serde_json::Value> {
    let model = Model::load(ckpt)?;
    let c = model.num_classes();
    let mut cfg = cfg.clone();
    cfg.set_experiment(&model.config);
    let corpus = runner::load_corpus(&cfg, data)?;
    let real = Dataset::<f32>::from_samples(&corpus.samples, &corpus.table.table)?;
    let seg_cfg = SegmenterConfig { steps: cfg.eval.segmenter_steps, width: cfg.eval.segmenter_width, seed: cfg.seed, ..SegmenterConfig::new(c) };
    let seg = ConvSegmenter::train(&seg_cfg, &real.images, &real.labels)?;
    let n = cfg.eval.samples;
    let z = rng::normal::<f32>(&mut rng::seeded(cfg.seed), &[n, model.config.generator.latent_dim]);
    let out = model.generator.generate_batch(&model.params, &z)?;
    let predicted = seg.segment(&out.image)?;
    let pairs: Vec<(LabelMap, LabelMap)> = predicted.into_iter().enumerate().map(|(b, p)| Ok((p, imageio::mask_labels(&out.final_mask, b)?))).collect::<Result<_>>()?;
    Ok(json!({ "miou": miou_dataset(&pairs, c)?, "classes": c, "samples": n, "segmenter_steps": seg_cfg.steps }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditDoc {
    #[serde(default)]
    edit: Vec<EditItem>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditItem {
    class: usize,
    layer: usize,
    component: Option<usize>,
    magnitude: Option<f64>,
    coords: Option<Vec<f64>>,
}

/// Edit spec file: a list `edit` of `{class, layer, component, magnitude}`
/// or `{class, layer, coords}` items, as TOML (`[[edit]]`) or JSON.
pub fn parse_edit_spec(src: &str, json: bool, bank: &DirectionBank) -> Result<EditSpec> {
    let doc: EditDoc = if json { serde_json::from_str(src)? } else { toml::from_str(src)? };
    let mut spec = EditSpec::new();
    for (i, e) in doc.edit.into_iter().enumerate() {
        match (e.component, e.magnitude, e.coords) {
            (Some(c), Some(m), None) => spec.push_component(bank, e.class, e.layer, c, m)?,
            (None, None, Some(coords)) => spec.edits.push(StyleEdit { class: e.class, layer: e.layer, coords }),
            _ => bail!("edit {i}: give either `component` and `magnitude`, or `coords`"),
        }
    }
    spec.validate(bank)?;
    Ok(spec)
}

fn read_edit_spec(path: &Path, bank: &DirectionBank) -> Result<EditSpec> {
    let src = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    parse_edit_spec(&src, json, bank).with_context(|| format!("in {}", path.display()))
}
