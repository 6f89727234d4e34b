//! Direction banks on disk.
//!
//! Format `compogan.bank`, version 1: a safetensors file with F64 arrays
//! `c{class}.l{layer}.mean` `[dim]`, `.basis` `[k, dim]` (rows are the
//! orthonormal directions) and `.variances` `[k]`, descending. Metadata
//! `c{class}.l{layer}` holds JSON `{target, surplus}`, where target is
//! `style` or `w_plus`.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use compogan_core::explorer::{DirectionBank, DirectionEntry, HarvestTarget};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;

pub const FORMAT: &str = "compogan.bank";
pub const VERSION: u32 = 1;
/// Orthonormality tolerance enforced on load.
pub const ORTHONORMAL_TOL: f64 = 1e-5;

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    target: HarvestTarget,
    surplus: usize,
}

pub fn to_archive(bank: &DirectionBank) -> Result<Archive> {
    let mut a = Archive::new(FORMAT, VERSION);
    for e in bank.entries() {
        let key = format!("c{}.l{}", e.class, e.layer);
        a.put_f64(format!("{key}.mean"), &[e.dim], &e.mean);
        a.put_f64(format!("{key}.basis"), &[e.k(), e.dim], &e.basis);
        a.put_f64(format!("{key}.variances"), &[e.k()], &e.variances);
        a.meta(&key, serde_json::to_string(&EntryMeta { target: e.target, surplus: e.surplus })?);
    }
    Ok(a)
}

pub fn save(bank: &DirectionBank, path: &Path) -> Result<()> {
    to_archive(bank)?.save(path)
}

fn parse_key(key: &str) -> Option<(usize, usize)> {
    let (c, l) = key.strip_prefix('c')?.split_once(".l")?;
    Some((c.parse().ok()?, l.parse().ok()?))
}

pub fn from_archive(a: &Archive) -> Result<DirectionBank> {
    a.expect_format(FORMAT, VERSION)?;
    let mut bank = DirectionBank::new();
    for (key, meta) in &a.metadata {
        let Some((class, layer)) = parse_key(key) else { continue };
        let m: EntryMeta = serde_json::from_str(meta).with_context(|| format!("metadata of `{key}`"))?;
        let (ms, mean) = a.f64_array(&format!("{key}.mean"))?;
        let (bs, basis) = a.f64_array(&format!("{key}.basis"))?;
        let (_, variances) = a.f64_array(&format!("{key}.variances"))?;
        let dim = ms[0];
        if bs.len() != 2 || bs[1] != dim || bs[0] != variances.len() {
            return Err(anyhow!("`{key}`: basis shape {bs:?} inconsistent with dim {dim} and {} variances", variances.len()));
        }
        bank.insert(DirectionEntry {
            class,
            layer,
            target: m.target,
            dim,
            mean: mean.to_vec(),
            basis: basis.to_vec(),
            variances: variances.to_vec(),
            surplus: m.surplus,
        });
    }
    bank.validate(ORTHONORMAL_TOL)?;
    Ok(bank)
}

pub fn load(path: &Path) -> Result<DirectionBank> {
    from_archive(&Archive::load(path)?).with_context(|| format!("loading bank {}", path.display()))
}
