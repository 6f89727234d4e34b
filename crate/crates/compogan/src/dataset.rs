//! Paired image/label directories.
//!
//! A dataset directory holds `images/<name>.png` (RGB) and
//! `labels/<name>.png` (8-bit class indices), paired by file name, and
//! optionally `table.toml` describing how its label values group into the
//! classes the model is trained on.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use compogan_core::grouping::{remap, unmapped_values, LabelMap};
use compogan_core::toy::ToySample;

use crate::imageio;
use crate::tables::NamedTable;

pub const TABLE_FILE: &str = "table.toml";

/// `*.png` files of `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// The label directory of a dataset, or `dir` itself when it has no
/// `labels/` subdirectory.
pub fn labels_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("labels");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

pub fn images_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("images");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

/// Reads every label map of a directory with raw 8-bit values.
pub fn read_label_dir(dir: &Path) -> Result<Vec<(String, LabelMap)>> {
    list_pngs(dir)?.iter().map(|p| Ok((stem(p), imageio::read_labels(p, 256)?))).collect()
}

/// Reads `images/` and `labels/` pairs with raw label values.
pub fn read_pairs(dir: &Path) -> Result<Vec<(String, ToySample)>> {
    let labels = read_label_dir(&dir.join("labels"))?;
    let mut out = Vec::with_capacity(labels.len());
    for (name, map) in labels {
        let ip = dir.join("images").join(format!("{name}.png"));
        let image = imageio::read_rgb(&ip).with_context(|| format!("label map `{name}` has no matching image"))?;
        if image.width != map.width() || image.height != map.height() {
            bail!("`{name}`: image is {}×{} but labels are {}×{}", image.width, image.height, map.width(), map.height());
        }
        out.push((name, ToySample { image, labels: map }));
    }
    if out.is_empty() {
        bail!("no label maps found in {}", dir.join("labels").display());
    }
    Ok(out)
}

pub fn write_pairs(dir: &Path, samples: &[(String, ToySample)]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    for (name, s) in samples {
        imageio::write_rgb(&dir.join("images").join(format!("{name}.png")), &s.image)?;
        imageio::write_labels(&dir.join("labels").join(format!("{name}.png")), &s.labels)?;
    }
    Ok(())
}

/// Every value across `maps` the table does not cover.
pub fn unmapped<'a>(maps: impl IntoIterator<Item = &'a LabelMap>, table: &NamedTable) -> BTreeSet<usize> {
    maps.into_iter().flat_map(|m| unmapped_values(m, &table.table)).collect()
}

/// Remaps `maps` or fails listing every unmapped value.
pub fn remap_all(maps: &[(String, LabelMap)], table: &NamedTable) -> Result<Vec<(String, LabelMap)>> {
    let bad = unmapped(maps.iter().map(|(_, m)| m), table);
    if !bad.is_empty() {
        let list: Vec<String> = bad.iter().map(|v| v.to_string()).collect();
        bail!("label values not covered by table `{}`: {}", table.name, list.join(", "));
    }
    maps.iter().map(|(n, m)| Ok((n.clone(), remap(m, &table.table)?))).collect()
}

/// Rewrites the label maps under `input` into super-class maps under
/// `output`. Images, if present, are copied alongside, and the induced
/// identity table is written so the result is itself a dataset directory.
/// Nothing is written when any value is unmapped.
pub fn preprocess(input: &Path, output: &Path, table: &NamedTable) -> Result<usize> {
    let maps = read_label_dir(&labels_dir(input))?;
    let remapped = remap_all(&maps, table)?;
    let has_images = input.join("labels").is_dir() && input.join("images").is_dir();
    let out_labels = if has_images { output.join("labels") } else { output.to_path_buf() };
    fs::create_dir_all(&out_labels)?;
    for (name, m) in &remapped {
        imageio::write_labels(&out_labels.join(format!("{name}.png")), m)?;
    }
    if has_images {
        fs::create_dir_all(output.join("images"))?;
        for (name, _) in &remapped {
            let from = input.join("images").join(format!("{name}.png"));
            if from.is_file() {
                fs::copy(&from, output.join("images").join(format!("{name}.png")))?;
            }
        }
    }
    fs::write(output.join(TABLE_FILE), table.induced_identity().to_toml())?;
    Ok(remapped.len())
}
