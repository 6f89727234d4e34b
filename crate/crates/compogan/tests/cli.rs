mod common;

use std::path::Path;
use std::process::{Command, Output};

use compogan::imageio;
use compogan_core::grouping::LabelMap;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compogan")).args(args).output().expect("spawn compogan")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_subcommands() {
    let o = bin(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let t = text(&o);
    for sub in ["preprocess", "make-toy", "train", "generate", "explore", "edit", "eval", "serve", "ablate"] {
        assert!(t.contains(sub), "help is missing `{sub}`:\n{t}");
    }
    assert_eq!(bin(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_2() {
    let o = bin(&["generate", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("--bogus-flag"), "{}", text(&o));
    let o = bin(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("frobnicate"));
    assert_eq!(bin(&["generate"]).status.code(), Some(2), "missing required --ckpt");
}

#[test]
fn runtime_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let o = bin(&["generate", "--ckpt", p(&d.path().join("missing.safetensors")), "--out", p(d.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("error:"));
    let o = bin(&["--set", "train.no_such_key=1", "make-toy", "-n", "1", "--out", p(d.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("no_such_key"), "{}", text(&o));
}

#[test]
fn preprocess_rejects_unmapped_values() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("raw");
    std::fs::create_dir_all(&input).unwrap();
    let good = LabelMap::new(2, 2, 256, vec![7, 8, 26, 23]).unwrap();
    let bad = LabelMap::new(2, 2, 256, vec![7, 40, 26, 99]).unwrap();
    imageio::write_labels(&input.join("a.png"), &good).unwrap();
    imageio::write_labels(&input.join("b.png"), &bad).unwrap();
    let out = d.path().join("out");
    let o = bin(&["preprocess", "--table", "cityscapes", "--in", p(&input), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let t = text(&o);
    assert!(t.contains("40") && t.contains("99"), "{t}");
    assert!(!out.join("a.png").exists(), "nothing written on failure");

    std::fs::remove_file(input.join("b.png")).unwrap();
    let o = bin(&["preprocess", "--table", "cityscapes", "--in", p(&input), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let m = imageio::read_labels(&out.join("a.png"), 16).unwrap();
    assert_eq!(m.values(), &[1, 2, 7, 11]);
    assert!(out.join("table.toml").is_file() && out.join("run_config.toml").is_file());
}

#[test]
fn pipeline_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let cfg = common::write_tiny(d.path());
    let cfgs = p(&cfg);
    let data = d.path().join("data");
    let run = d.path().join("run");

    let o = bin(&["--config", cfgs, "make-toy", "-n", "8", "--out", p(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(std::fs::read_dir(data.join("images")).unwrap().count(), 8);

    let o = bin(&["--config", cfgs, "train", "--data", p(&data), "--out", p(&run), "--steps", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let ckpt = run.join("checkpoint.safetensors");
    assert!(ckpt.is_file());
    assert!(run.join("run_config.toml").is_file());
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 3);

    // resuming continues the step count
    let o = bin(&["--config", cfgs, "train", "--data", p(&data), "--out", p(&run), "--resume", p(&ckpt), "--steps", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(compogan::checkpoint::Model::load(&ckpt).unwrap().step, 5);

    let g1 = d.path().join("g1");
    let g2 = d.path().join("g2");
    for g in [&g1, &g2] {
        let o = bin(&["--seed", "9", "generate", "--ckpt", p(&ckpt), "-n", "2", "--out", p(g)]);
        assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    }
    for f in ["sample_0000.png", "sample_0001_mask.png", "sample_0001_mask_color.png"] {
        assert_eq!(std::fs::read(g1.join(f)).unwrap(), std::fs::read(g2.join(f)).unwrap(), "{f}");
    }
    assert!(g1.join("run_config.toml").is_file());

    let bank = d.path().join("bank.safetensors");
    let o = bin(&["--config", cfgs, "explore", "--ckpt", p(&ckpt), "--classes", "0,1", "-N", "64", "-k", "3", "--out", p(&bank)]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(compogan::bank_io::load(&bank).unwrap().len(), 4);
    assert!(d.path().join("bank.safetensors.run_config.toml").is_file());

    let spec = d.path().join("edit.toml");
    std::fs::write(&spec, "[[edit]]\nclass = 1\nlayer = 9\ncomponent = 0\nmagnitude = 0.0\n").unwrap();
    let e = d.path().join("edit");
    let o = bin(&["edit", "--ckpt", p(&ckpt), "--bank", p(&bank), "--spec", p(&spec), "--out", p(&e)]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(std::fs::read(e.join("image.png")).unwrap(), std::fs::read(e.join("baseline.png")).unwrap(), "zero edit is a no-op");
    std::fs::write(&spec, "[[edit]]\nclass = 1\nlayer = 9\ncomponent = 5\nmagnitude = 1.0\n").unwrap();
    let o = bin(&["edit", "--ckpt", p(&ckpt), "--bank", p(&bank), "--spec", p(&spec), "--out", p(&e)]);
    assert_eq!(o.status.code(), Some(1), "component out of range");

    // the proxy extractor has 128 features, so covariances need more images
    let many = d.path().join("many");
    let o = bin(&["--config", cfgs, "make-toy", "-n", "130", "--out", p(&many)]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let o = bin(&["eval", "fid", "--real", p(&data), "--fake", p(&data)]);
    assert_eq!(o.status.code(), Some(1), "too few images");
    let o = bin(&["eval", "fid", "--real", p(&many), "--fake", p(&many)]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let v: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&o.stdout).trim()).unwrap();
    assert!(v["fid"].as_f64().unwrap().abs() < 1e-6, "{v}");

    let rep = d.path().join("miou");
    let o = bin(&["eval", "miou", "--pred", p(&data), "--gt", p(&data), "--out", p(&rep)]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(rep.join("eval_miou.json")).unwrap()).unwrap();
    assert_eq!(v["miou"], 1.0);

    let ab = d.path().join("ablate");
    let o = bin(&["--config", cfgs, "--set", "data.eval_real=130", "--set", "schedule.eval_count=130", "ablate", "--out", p(&ab), "--steps", "2", "--eval-every", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let md = std::fs::read_to_string(ab.join("ablation.md")).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("| ") && !l.contains("---")).count(), 5, "{md}");
}
