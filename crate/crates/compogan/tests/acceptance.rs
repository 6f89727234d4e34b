//! One line per acceptance criterion. Failures are reported in the output
//! and, with `COMPOGAN_ACCEPT_STRICT=1`, in the exit code.
//!
//! `COMPOGAN_SMOKE_STEPS` shortens the training smoke for local iteration;
//! a shortened run always reports the smoke as failed.

use std::time::Instant;

use compogan::checkpoint::Model;
use compogan::config::RunConfig;
use compogan::{imageio, inference, runner, tables};
use compogan_core::discriminator::{Discriminator, DiscriminatorConfig};
use compogan_core::explorer::{self, build_bank, pca, EditSpec, HarvestTarget, StyleSampleMatrix};
use compogan_core::generator::{compose, Generator, GeneratorConfig, Latents};
use compogan_core::grouping::{remap, LabelMap};
use compogan_core::metrics::{frechet_distance, miou, spearman, FeatureStats, IouCounts};
use compogan_core::nn::ParamStore;
use compogan_core::toy::make_toy_corpus;
use compogan_core::training::{mask_coverage, train_with_eval, AblationBudget, Dataset, ProxyEval, TrainState};
use compogan_core::raster::images_to_tensor;
use compogan_core::{rng, Scalar, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Fresh generator with its zero-initialized heads moved off zero, so the
/// masks and depths are not uniform.
fn random_generator<T: Scalar>(cfg: GeneratorConfig, seed: u64) -> (Generator<T>, ParamStore<T>) {
    let (g, mut p) = Generator::new(cfg, &mut rng::seeded(seed)).unwrap();
    for (i, t) in p.values_mut().iter_mut().enumerate() {
        if t.data().iter().all(|v: &T| v.as_f64() == 0.0) {
            *t = rng::normal(&mut rng::derive(seed ^ 0x5eed, i as u64), t.shape());
        }
    }
    (g, p)
}

fn worst_sum_error<T: Scalar>(m: &Tensor<T>) -> f64 {
    let s = m.shape();
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut worst = 0.0f64;
    for bi in 0..b {
        for px in 0..plane {
            let sum: f64 = (0..c).map(|k| m.data()[(bi * c + k) * plane + px].as_f64()).sum();
            worst = worst.max((sum - 1.0).abs());
        }
    }
    worst
}

fn mask_sums() -> Check {
    let mut worst = 0.0f64;
    let cfg = GeneratorConfig::toy(8);
    // fresh init (uniform masks) and randomized heads, both precisions
    for (seed, randomize) in [(1u64, false), (2, true)] {
        let z = rng::normal::<f32>(&mut rng::seeded(seed + 100), &[100, cfg.latent_dim]);
        let (g, p) = if randomize { random_generator::<f32>(cfg.clone(), seed) } else { let (g, p) = Generator::new(cfg.clone(), &mut rng::seeded(seed)).unwrap(); (g, p) };
        for chunk in 0..4 {
            let zc = z.narrow(0, chunk * 25, 25);
            let r = g.generate_batch(&p, &zc).unwrap();
            worst = worst.max(worst_sum_error(&r.mask)).max(worst_sum_error(&r.final_mask));
        }
        let (g, p) = random_generator::<f64>(cfg.clone(), seed);
        let r = g.generate_batch(&p, &z.cast::<f64>().narrow(0, 0, 25)).unwrap();
        worst = worst.max(worst_sum_error(&r.mask)).max(worst_sum_error(&r.final_mask));
    }
    ensure(worst <= 1e-6, format!("max |Σ_c m - 1| and |Σ_c m̂ - 1| = {worst:.2e} (tol 1e-6) over 100 latents"))
}

fn class_slice<T: Scalar>(t: &Tensor<T>, c: usize) -> Vec<T> {
    // [1, C, ...] -> class c
    let per = t.numel() / t.shape()[1];
    t.data()[c * per..(c + 1) * per].to_vec()
}

fn routing() -> Check {
    let cfg = GeneratorConfig::toy(8);
    let c = cfg.num_classes;
    let (g, p) = random_generator::<f32>(cfg.clone(), 3);
    let mut r = rng::seeded(4);
    let mut failures = Vec::new();
    for i in 0..50 {
        let z = rng::normal_vec::<f32>(&mut r, cfg.latent_dim);
        let t = g.map_latent(&p, &z).unwrap();
        let base = g.generate(&p, &Latents::PerClass(vec![t.clone(); c])).unwrap();

        // texture of every class
        let mut tt = vec![t.clone(); c];
        for x in tt.iter_mut() {
            x.texture = rng::normal_vec(&mut r, x.texture.len());
        }
        let moved = g.generate(&p, &Latents::PerClass(tt)).unwrap();
        if moved.depth != base.depth || moved.mask != base.mask {
            failures.push(format!("latent {i}: texture moved d or m"));
        }
        if moved.image == base.image {
            failures.push(format!("latent {i}: texture had no effect"));
        }

        // shape of one class
        let k = i % c;
        let mut ts = vec![t.clone(); c];
        ts[k].shape = rng::normal_vec(&mut r, t.shape.len());
        let moved = g.generate(&p, &Latents::PerClass(ts)).unwrap();
        for o in (0..c).filter(|&o| o != k) {
            if class_slice(&moved.depth, o) != class_slice(&base.depth, o) || class_slice(&moved.features, o) != class_slice(&base.features, o) {
                failures.push(format!("latent {i}: shape of class {k} moved class {o}"));
            }
        }
        if class_slice(&moved.depth, k) == class_slice(&base.depth, k) {
            failures.push(format!("latent {i}: shape of class {k} had no effect on its depth"));
        }
    }
    ensure(failures.is_empty(), if failures.is_empty() { "50 latents: texture leaves all d, m bit-identical; per-class shape leaves other classes' d, f bit-identical".into() } else { failures[..failures.len().min(3)].join("; ") })
}

fn compose_oracle() -> Check {
    let mut r = rng::seeded(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (b, c, f, h, w) = (r.random_range(1..3), r.random_range(2..6), r.random_range(1..4), r.random_range(1..5), r.random_range(1..5));
        let d = rng::normal::<f64>(&mut r, &[b, c, h, w]).map(|x| x * 3.0);
        let feat = rng::normal::<f64>(&mut r, &[b, c, f, h, w]);
        let (m, fused) = compose(&d, &feat).unwrap();
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let ds: Vec<f64> = (0..c).map(|k| d.data()[((bi * c + k) * h + y) * w + x]).collect();
                    let top = ds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = ds.iter().map(|v| (v - top).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for k in 0..c {
                        let want = e[k] / z;
                        worst = worst.max((m.data()[((bi * c + k) * h + y) * w + x] - want).abs());
                    }
                    for ch in 0..f {
                        let want: f64 = (0..c).map(|k| e[k] / z * feat.data()[(((bi * c + k) * f + ch) * h + y) * w + x]).sum();
                        worst = worst.max((fused.data()[((bi * f + ch) * h + y) * w + x] - want).abs());
                    }
                }
            }
        }
    }
    ensure(worst <= 1e-7, format!("100 instances, max deviation from scalar oracle {worst:.2e} (tol 1e-7)"))
}

fn pca_oracle() -> Check {
    let mut r = rng::seeded(6);
    let (mut worst_vec, mut worst_val, mut worst_orth) = (0.0f64, 0.0f64, 0.0f64);
    for dim in 1..=16 {
        for _ in 0..3 {
            let n = dim + r.random_range(5..60);
            // anisotropic so eigenvalues are separated
            let scales: Vec<f64> = (0..dim).map(|i| 1.0 + 2.0 * (dim - i) as f64 + r.random::<f64>()).collect();
            let rows: Vec<f64> = (0..n * dim).map(|i| rng::normal_vec::<f64>(&mut r, 1)[0] * scales[i % dim]).collect();
            let e = pca(&StyleSampleMatrix::new(0, 5, HarvestTarget::Style, dim, rows.clone()).unwrap(), dim).unwrap();
            let x = DMatrix::from_row_slice(n, dim, &rows);
            let mean = x.row_mean();
            let cen = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
            let cov = cen.transpose() * &cen / (n as f64 - 1.0);
            let eig = SymmetricEigen::new(cov);
            let mut pairs: Vec<(f64, Vec<f64>)> = (0..dim).map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect())).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            for (i, (val, vec)) in pairs.iter().enumerate() {
                let dot: f64 = vec.iter().zip(e.component(i)).map(|(a, b)| a * b).sum();
                let s = dot.signum();
                let dv = vec.iter().zip(e.component(i)).map(|(a, b)| (a * s - b).abs()).fold(0.0, f64::max);
                worst_vec = worst_vec.max(dv);
                worst_val = worst_val.max((val - e.variances[i]).abs() / val.abs().max(1.0));
            }
            worst_orth = worst_orth.max(e.orthonormality_error());
        }
    }
    ensure(
        worst_vec <= 1e-8 && worst_val <= 1e-8 && worst_orth <= 1e-5,
        format!("dims 1..=16: max basis deviation {worst_vec:.2e}, eigenvalue {worst_val:.2e} (tol 1e-8); orthonormality {worst_orth:.2e} (tol 1e-5)"),
    )
}

fn small_model(seed: u64) -> Model {
    let mut cfg = RunConfig::default();
    cfg.generator = GeneratorConfig::toy(8);
    let mut state = TrainState::<f32>::new(cfg.experiment()).unwrap();
    let (_, p) = random_generator::<f32>(cfg.generator.clone(), seed);
    state.g_ema = p;
    Model::from_state(&state, None)
}

fn edit_identity() -> Check {
    let model = small_model(7);
    let bank = build_bank(&model.generator, &model.params, &[0, 3], &[5, 9], 400, 4, HarvestTarget::Style, 7).unwrap();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let lat = inference::latents_for_seed(&model, seed).unwrap();
        let base = inference::render(&model, &lat, Some(&bank), &EditSpec::new()).unwrap();
        let mut zero = EditSpec::new();
        for (c, l) in [(0, 5), (3, 9)] {
            zero.push_component(&bank, c, l, 0, 0.0).unwrap();
        }
        let z = inference::render(&model, &lat, Some(&bank), &zero).unwrap();
        if imageio::png_bytes(&z.image) != imageio::png_bytes(&base.image) || imageio::png_bytes(&z.mask_overlay(&model.palette())) != imageio::png_bytes(&base.mask_overlay(&model.palette())) {
            failures.push(format!("seed {seed}: y=0 changed the PNG"));
        }
        let styles = model.generator.style_vectors(&model.params, lat.triple_for(3), 3).unwrap();
        let s: Vec<f64> = styles[9].iter().map(|v| v.as_f64()).collect();
        let entry = bank.lookup(3, 9).unwrap();
        let y: Vec<f64> = (0..entry.k()).map(|i| (seed as f64 + 1.0) * (i as f64 - 1.5) * 7.3).collect();
        let ny: Vec<f64> = y.iter().map(|v| -v).collect();
        let back = explorer::edit(&explorer::edit(&s, entry, &y).unwrap(), entry, &ny).unwrap();
        worst = worst.max(s.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    if worst > 1e-9 {
        failures.push(format!("+y-y error {worst:.2e}"));
    }
    ensure(failures.is_empty(), if failures.is_empty() { format!("10 seeds: y=0 PNGs byte-identical; +y then -y restores s within {worst:.2e} (tol 1e-9)") } else { failures.join("; ") })
}

/// Exact largest singular value of each normalized effective weight.
fn exact_sigmas(d: &Discriminator, params: &ParamStore<f32>, sn: &compogan_core::discriminator::SpectralState<f32>) -> Vec<(String, f64)> {
    d.effective_weights(params, sn)
        .into_iter()
        .filter(|w| w.1)
        .map(|(name, _, w)| {
            let m = DMatrix::from_row_slice(w.shape()[0], w.shape()[1], &w.data().iter().map(|v| *v as f64).collect::<Vec<_>>());
            (name, m.singular_values().max())
        })
        .collect()
}

fn spectral_norm() -> Check {
    // Random Gaussian weights have close top singular values, so 20 power
    // steps bound σ loosely; agreement to 1e-3 takes about 100.
    let (mut lo20, mut hi20, mut worst) = (f64::INFINITY, 0.0f64, 0.0f64);
    let mut bad = Vec::new();
    for (seed, c) in [(8u64, 8usize), (9, 24)] {
        let (d, params, mut sn) = Discriminator::new::<f32>(DiscriminatorConfig::toy(c), &mut rng::seeded(seed)).unwrap();
        d.power_iterate(&params, &mut sn, 20);
        let at20 = exact_sigmas(&d, &params, &sn);
        if at20.is_empty() {
            bad.push("no normalized weights".to_string());
        }
        for (_, sigma) in &at20 {
            lo20 = lo20.min(*sigma);
            hi20 = hi20.max(*sigma);
        }
        d.power_iterate(&params, &mut sn, 80);
        for (name, sigma) in exact_sigmas(&d, &params, &sn) {
            worst = worst.max((sigma - 1.0).abs());
            if (sigma - 1.0).abs() > 1e-3 {
                bad.push(format!("{name} (C={c}): σ {sigma:.6}"));
            }
        }
    }
    ensure(
        bad.is_empty() && lo20 >= 0.95 && hi20 <= 1.05,
        format!(
            "after 20 iterations exact σ_max in [{lo20:.4}, {hi20:.4}] (need [0.95, 1.05]); after 100, max |σ_exact - 1| = {worst:.2e} (tol 1e-3){}",
            if bad.is_empty() { String::new() } else { format!("; {}", bad.join(", ")) }
        ),
    )
}

fn frechet() -> Check {
    let mut r = rng::seeded(10);
    let rows = rng::normal::<f64>(&mut r, &[200, 6]).into_data();
    let s = FeatureStats::from_rows(&rows, 200, 6).unwrap();
    let same = frechet_distance(&s, &s).unwrap();
    let a = FeatureStats { mean: vec![0.0], cov: vec![1.0], dim: 1, count: 2 };
    let b = FeatureStats { mean: vec![1.0], cov: vec![1.0], dim: 1, count: 2 };
    let shift = frechet_distance(&a, &b).unwrap();
    ensure(same.abs() <= 1e-6 && (shift - 1.0).abs() <= 1e-9, format!("identical stats {same:.2e} (tol 1e-6); 1-D mean shift 1 gives {shift:.12} (tol 1e-9)"))
}

fn grouping() -> Check {
    let t = tables::cityscapes();
    let mut r = rng::seeded(11);
    let mut bad = 0;
    for _ in 0..50 {
        let (h, w) = (r.random_range(1..40), r.random_range(1..40));
        let vals: Vec<u8> = (0..h * w).map(|_| r.random_range(0..34u8)).collect();
        let src = LabelMap::new(h, w, 34, vals).unwrap();
        let out = remap(&src, &t.table).unwrap();
        let src_counts = src.class_counts();
        let out_counts = out.class_counts();
        for (k, e) in t.table.entries().iter().enumerate() {
            if out_counts[k] != e.sources.iter().map(|&s| src_counts[s]).sum::<usize>() {
                bad += 1;
            }
        }
        if out_counts.iter().sum::<usize>() != h * w {
            bad += 1;
        }
    }
    let c = t.num_classes();
    ensure(bad == 0 && c == 16 && t.table.num_source_classes() == 34, format!("50 random 34-class maps: {bad} count mismatches; C = {c}"))
}

fn miou_checks() -> Check {
    let mut r = rng::seeded(12);
    let mut failures = Vec::new();
    for i in 0..50 {
        let c = r.random_range(2..10usize);
        let (h, w) = (r.random_range(1..20), r.random_range(1..20));
        let a: Vec<u8> = (0..h * w).map(|_| r.random_range(0..c as u8)).collect();
        let b: Vec<u8> = (0..h * w).map(|_| r.random_range(0..c as u8)).collect();
        let pa = LabelMap::new(h, w, c, a.clone()).unwrap();
        let pb = LabelMap::new(h, w, c, b.clone()).unwrap();
        if miou(&pa, &pa, c).unwrap() != 1.0 {
            failures.push(format!("case {i}: pred=gt"));
        }
        // disjoint: the two maps draw from separate halves of the classes
        let lo: Vec<u8> = a.iter().map(|&v| v % (c as u8 / 2).max(1)).collect();
        let hi: Vec<u8> = a.iter().map(|&v| (c as u8 / 2) + v % (c as u8 - c as u8 / 2)).collect();
        if miou(&LabelMap::new(h, w, c, lo).unwrap(), &LabelMap::new(h, w, c, hi).unwrap(), c).unwrap() != 0.0 {
            failures.push(format!("case {i}: disjoint"));
        }
        // counting oracle
        let mut total = 0.0;
        let mut present = 0;
        for k in 0..c as u8 {
            let inter = a.iter().zip(&b).filter(|(x, y)| **x == k && **y == k).count();
            let uni = a.iter().zip(&b).filter(|(x, y)| **x == k || **y == k).count();
            if uni > 0 {
                total += inter as f64 / uni as f64;
                present += 1;
            }
        }
        let want = total / present as f64;
        let got = miou(&pb, &pa, c).unwrap();
        if got != want {
            failures.push(format!("case {i}: {got} vs oracle {want}"));
        }
        let mut counts = IouCounts::new(c);
        counts.add(&pb, &pa).unwrap();
        if counts.mean() != Some(want) {
            failures.push(format!("case {i}: pooled counts"));
        }
    }
    ensure(failures.is_empty(), if failures.is_empty() { "50 random cases: pred=gt 1.0, disjoint 0.0, counting oracle exact".into() } else { failures[..failures.len().min(3)].join("; ") })
}

struct Smoke {
    check: Check,
    info: Vec<String>,
}

fn smoke() -> Smoke {
    let steps: u64 = std::env::var("COMPOGAN_SMOKE_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let cfg = RunConfig::default();
    let entries = runner::ablation_entries(&cfg).unwrap();
    let pick = |n: &str| entries.iter().find(|e| e.name == n).unwrap().clone();
    let (grouped, ungrouped) = (pick("grouped+sn"), pick("ungrouped"));
    let corpus = make_toy_corpus(&cfg.toy, cfg.data.toy_samples, cfg.seed).unwrap();
    let real = make_toy_corpus(&cfg.toy, cfg.data.eval_real, cfg.seed ^ 0xe7a1).unwrap();
    let imgs: Vec<_> = real.iter().map(|s| &s.image).collect();
    let eval = ProxyEval::new(&images_to_tensor(&imgs).unwrap(), cfg.schedule.eval_count, cfg.seed ^ 0xe7a2).unwrap();
    let budget = AblationBudget { steps, eval_every: cfg.ablate.eval_every };
    let mut info = Vec::new();

    let t0 = Instant::now();
    let data = Dataset::<f32>::from_samples(&corpus, &grouped.table).unwrap();
    let mut state = TrainState::<f32>::new(grouped.config.clone()).unwrap();
    let mut gaps = Vec::new();
    let (trace, diverged, _) = train_with_eval(&mut state, &data, &eval, budget, |r| gaps.push(r.fake_score - r.real_score)).unwrap();
    let grouped_secs = t0.elapsed().as_secs_f64();
    let c = grouped.config.num_classes();
    let res = grouped.config.generator.output_resolution;
    let batch = grouped.config.train.batch_size;

    // EMA coverage over the fixed eval latents
    let z = rng::normal::<f32>(&mut rng::seeded(cfg.seed ^ 0xc0), &[256, grouped.config.generator.latent_dim]);
    let mut cov = vec![0.0; c];
    for i in 0..8 {
        let r = state.generator.generate_batch(&state.g_ema, &z.narrow(0, i * 32, 32)).unwrap();
        for (a, v) in cov.iter_mut().zip(mask_coverage(&r.final_mask)) {
            *a += v / 8.0;
        }
    }
    let corpus_cov = data.class_coverage(c);
    let collapsed: Vec<usize> = (0..c).filter(|&k| corpus_cov[k] >= 0.01 && cov[k] < 0.01).collect();

    let first = trace.first().map(|t| t.1).unwrap_or(f64::NAN);
    let last = trace.last().map(|t| t.1).unwrap_or(f64::NAN);
    let nan_free = !diverged && trace.iter().all(|t| t.1.is_finite());
    let improved = last <= 0.7 * first;

    // equal-budget comparison
    let t1 = Instant::now();
    let udata = Dataset::<f32>::from_samples(&corpus, &ungrouped.table).unwrap();
    let mut ustate = TrainState::<f32>::new(ungrouped.config.clone()).unwrap();
    let (utrace, udiverged, _) = train_with_eval(&mut ustate, &udata, &eval, budget, |_| {}).unwrap();
    let ulast = utrace.last().map(|t| t.1).unwrap_or(f64::NAN);
    let worse = udiverged || !ulast.is_finite() || ulast > last;

    let fmt = |t: &[(u64, f64)]| t.iter().map(|(s, f)| format!("{s}:{f:.2}")).collect::<Vec<_>>().join(" ");
    info.push(format!("grouped+sn C={c} trace {}", fmt(&trace)));
    info.push(format!("ungrouped C={} no-SN trace {}{}", ungrouped.config.num_classes(), fmt(&utrace), if udiverged { " (diverged)" } else { "" }));
    info.push(format!("grouped run {grouped_secs:.0} s, ungrouped run {:.0} s", t1.elapsed().as_secs_f64()));
    info.push(format!("coverage corpus {:?}", corpus_cov.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()));
    info.push(format!("coverage ema m̂  {:?}", cov.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()));
    let (xs, ys): (Vec<f64>, Vec<f64>) = trace.iter().map(|&(s, f)| (s as f64, f)).unzip();
    let rho = spearman(&xs, &ys);
    info.push(format!("[info] {} proxy-FID trend over {} checkpoints: Spearman(step, FID) = {rho:.3} (want < 0)", if rho < 0.0 && trace.len() >= 5 { "PASS" } else { "FAIL" }, trace.len()));
    // fake minus real score, averaged over ten steps to tame batch noise
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    if gaps.len() >= 200 {
        let (g0, g200) = (gaps[0], mean(&gaps[190..200]));
        info.push(format!(
            "[info] {} 200-step gap trend: fake-real {g0:.3} at step 0, {g200:.3} over steps 191-200 (want |gap| shrunk by >=20%)",
            if g200.abs() <= 0.8 * g0.abs() { "PASS" } else { "FAIL" }
        ));
    }
    let win = gaps.len().min(50);
    if win > 0 {
        let head = mean(&gaps[..win]);
        let tail = mean(&gaps[gaps.len() - win..]);
        info.push(format!("[info] fake-real score gap: first {win} steps {head:.3}, last {win} steps {tail:.3}"));
    }
    info.extend(trained_probes(&state, &data));

    let mut problems = Vec::new();
    if steps < 2000 {
        problems.push(format!("budget reduced to {steps} steps"));
    }
    if !nan_free {
        problems.push("NaN".into());
    }
    if !improved {
        problems.push(format!("final/initial proxy-FID {:.3} > 0.7", last / first));
    }
    if !collapsed.is_empty() {
        problems.push(format!("collapsed classes {collapsed:?}"));
    }
    if !worse {
        problems.push(format!("ungrouped no-SN proxy-FID {ulast:.3} is not worse than grouped+SN {last:.3}"));
    }
    let summary = format!(
        "{steps} steps, {res}x{res}, C={c}, batch {batch}: finite {nan_free}; proxy-FID {first:.3} -> {last:.3} ({:.0}% drop, need >=30%); classes below 1% coverage {collapsed:?}; ungrouped C={} no-SN final {ulast:.3}{} vs grouped+SN {last:.3}",
        100.0 * (1.0 - last / first),
        ungrouped.config.num_classes(),
        if udiverged { " (diverged)" } else { "" },
    );
    Smoke { check: if problems.is_empty() { Ok(summary) } else { Err(format!("{summary}; {}", problems.join("; "))) }, info }
}

/// Measured properties of the trained toy model, reported without a
/// threshold.
fn trained_probes(state: &TrainState<f32>, data: &Dataset<f32>) -> Vec<String> {
    let mut out = Vec::new();
    let c = state.config.num_classes();
    // D must read the mask: permuting real mask channels changes its score
    let idx: Vec<usize> = (0..16).collect();
    let batch = data.batch(&idx);
    let onehot: Vec<Tensor<f32>> = batch.labels.iter().map(|m| {
        let t = compogan_core::grouping::one_hot::<f32>(m);
        let s = t.shape().to_vec();
        t.reshape(&[1, s[0], s[1], s[2]])
    }).collect();
    let masks = Tensor::concat(&onehot.iter().collect::<Vec<_>>(), 0);
    // rotate the class channels by one
    let rotated: Vec<Tensor<f32>> = (0..c).map(|k| masks.narrow(1, (k + 1) % c, 1)).collect();
    let permuted = Tensor::concat(&rotated.iter().collect::<Vec<_>>(), 1);
    let s0 = state.discriminator.discriminate(&state.d_params, &state.spectral, &batch.images, &masks).unwrap();
    let s1 = state.discriminator.discriminate(&state.d_params, &state.spectral, &batch.images, &permuted).unwrap();
    let mean = |t: &Tensor<f32>| t.data().iter().map(|v| *v as f64).sum::<f64>() / t.numel() as f64;
    let sig = exact_sigmas(&state.discriminator, &state.d_params, &state.spectral);
    let (lo, hi) = sig.iter().fold((f64::INFINITY, 0.0f64), |(l, h), (_, v)| (l.min(*v), h.max(*v)));
    out.push(format!("[info] trained D, persistent vectors (1 step per update): exact σ_max in [{lo:.4}, {hi:.4}]"));
    out.push(format!("[info] D score on real pairs {:.3}, with mask channels permuted {:.3}", mean(&s0), mean(&s1)));

    // texture edits on the trained EMA: how often the final mask label moves
    let (g, p) = (&state.generator, &state.g_ema);
    if let Ok(bank) = build_bank(g, p, &(0..c).collect::<Vec<_>>(), &[9], 500, 3, HarvestTarget::Style, 13) {
        let mut changed = 0usize;
        let mut total = 0usize;
        let mut coarse_same = true;
        for seed in 0..8u64 {
            let z = rng::normal_vec::<f32>(&mut rng::seeded(seed), g.config().latent_dim);
            let lat = Latents::Shared(g.map_latent(p, &z).unwrap());
            let base = g.generate(p, &lat).unwrap();
            let mut spec = EditSpec::new();
            spec.push_component(&bank, (seed as usize) % c, 9, 0, 3.0 * bank.lookup((seed as usize) % c, 9).unwrap().variances[0].sqrt()).unwrap();
            let e = explorer::apply_edit(g, p, &lat, &bank, &spec).unwrap();
            coarse_same &= e.mask == base.mask;
            let a = imageio::mask_labels(&base.final_mask, 0).unwrap();
            let b = imageio::mask_labels(&e.final_mask, 0).unwrap();
            changed += a.values().iter().zip(b.values()).filter(|(x, y)| x != y).count();
            total += a.values().len();
        }
        out.push(format!(
            "[info] texture edits (3σ, layer 9): coarse m unchanged {coarse_same}; final m̂ argmax moved on {:.2}% of pixels",
            100.0 * changed as f64 / total as f64
        ));
    }
    out
}

fn main() {
    // `cargo test -- --list` and filters from the harness are not supported
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let checks: Vec<(&str, fn() -> Check)> = vec![
        ("mask normalization", mask_sums),
        ("shape/texture routing", routing),
        ("compose oracle", compose_oracle),
        ("PCA oracle", pca_oracle),
        ("edit identity/linearity", edit_identity),
        ("spectral norm", spectral_norm),
        ("Fréchet metric", frechet),
        ("class grouping", grouping),
        ("mIoU", miou_checks),
    ];
    let total = checks.len() + 1;
    let mut failed = 0;
    let mut report = |name: &str, r: &Check| {
        match r {
            Ok(m) => println!("PASS  {name}: {m}"),
            Err(m) => {
                failed += 1;
                println!("FAIL  {name}: {m}")
            }
        }
    };
    for (name, f) in checks {
        let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        report(name, &r);
    }
    let s = std::panic::catch_unwind(smoke).unwrap_or_else(|_| Smoke { check: Err("panicked".into()), info: vec![] });
    report("training smoke", &s.check);
    for line in &s.info {
        println!("      {line}");
    }
    println!("acceptance: {failed} of {total} criteria failed");
    if failed > 0 && std::env::var("COMPOGAN_ACCEPT_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
