//! Remap tables as TOML documents.
//!
//! ```toml
//! name = "example"
//! source_classes = 3
//!
//! [[super_class]]
//! name = "background"
//! index = 0
//! sources = [0, 2]
//! color = [0, 0, 0]      # optional overlay color
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use compogan_core::grouping::{RemapTable, SuperClass};
use compogan_core::toy::ToySceneSpec;
use serde::{Deserialize, Serialize};

/// The Cityscapes 34-class to 16-super-class grouping.
pub const CITYSCAPES_34_TO_16: &str = include_str!("../tables/cityscapes_34_to_16.toml");
/// Starting point for a user-defined Mapillary grouping; not valid as-is.
pub const MAPILLARY_TEMPLATE: &str = include_str!("../tables/mapillary_template.toml");

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableDoc {
    name: String,
    source_classes: usize,
    super_class: Vec<EntryDoc>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryDoc {
    name: String,
    index: usize,
    sources: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    color: Option<[u8; 3]>,
}

/// A validated table with its display name and one overlay color per
/// super-class.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTable {
    pub name: String,
    pub table: RemapTable,
    pub palette: Vec<[u8; 3]>,
}

impl NamedTable {
    pub fn num_classes(&self) -> usize {
        self.table.num_super_classes()
    }

    pub fn to_toml(&self) -> String {
        let doc = TableDoc {
            name: self.name.clone(),
            source_classes: self.table.num_source_classes(),
            super_class: self
                .table
                .entries()
                .iter()
                .map(|e| EntryDoc {
                    name: e.name.clone(),
                    index: e.index,
                    sources: e.sources.iter().copied().collect(),
                    color: Some(self.palette[e.index]),
                })
                .collect(),
        };
        toml::to_string(&doc).expect("table documents always serialize")
    }

    /// Identity table on this table's super-classes, same names and colors.
    pub fn induced_identity(&self) -> Self {
        Self { name: format!("{}_identity", self.name), table: self.table.induced_identity(), palette: self.palette.clone() }
    }
}

/// Parses and validates a table document.
pub fn parse_remap_table(src: &str) -> Result<NamedTable> {
    let doc: TableDoc = toml::from_str(src).context("malformed remap table")?;
    let mut entries = Vec::with_capacity(doc.super_class.len());
    let mut colors = Vec::with_capacity(doc.super_class.len());
    for e in doc.super_class {
        let sources: BTreeSet<usize> = e.sources.iter().copied().collect();
        if sources.len() != e.sources.len() {
            let dup = e.sources.iter().find(|s| e.sources.iter().filter(|t| t == s).count() > 1).copied().unwrap_or_default();
            bail!(compogan_core::Error::DuplicateSource { index: dup });
        }
        colors.push((e.index, e.color));
        entries.push(SuperClass { name: e.name, index: e.index, sources });
    }
    let table = RemapTable::new(doc.source_classes, entries)?;
    let mut palette = default_palette(table.num_super_classes());
    for (i, c) in colors {
        if let Some(c) = c {
            palette[i] = c;
        }
    }
    Ok(NamedTable { name: doc.name, table, palette })
}

pub fn cityscapes() -> NamedTable {
    parse_remap_table(CITYSCAPES_34_TO_16).expect("shipped table is valid")
}

/// The toy corpus' fine classes grouped by shape family.
pub fn toy(spec: &ToySceneSpec) -> Result<NamedTable> {
    let table = spec.remap_table()?;
    Ok(NamedTable { name: "toy".into(), palette: default_palette(table.num_super_classes()), table })
}

/// `identity:N` style table with generic names.
pub fn identity(n: usize) -> Result<NamedTable> {
    Ok(NamedTable { name: format!("identity{n}"), table: RemapTable::identity(n)?, palette: default_palette(n) })
}

/// Resolves a table reference: `cityscapes`, `toy`, `identity:N` or a path.
pub fn resolve(reference: &str, toy_spec: &ToySceneSpec) -> Result<NamedTable> {
    match reference {
        "cityscapes" => Ok(cityscapes()),
        "toy" => toy(toy_spec),
        r if r.starts_with("identity:") => {
            let n = r["identity:".len()..].parse().with_context(|| format!("bad class count in `{r}`"))?;
            identity(n)
        }
        path => load(Path::new(path)),
    }
}

pub fn load(path: &Path) -> Result<NamedTable> {
    let src = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_remap_table(&src).with_context(|| format!("in {}", path.display()))
}

/// Well-separated colors by golden-angle hue stepping; class 0 is black.
pub fn default_palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            if i == 0 {
                return [0, 0, 0];
            }
            let h = (i as f64 * 137.508).rem_euclid(360.0);
            let l = if i % 2 == 0 { 0.45 } else { 0.62 };
            hsl(h, 0.7, l)
        })
        .collect()
}

fn hsl(h: f64, s: f64, l: f64) -> [u8; 3] {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    [r, g, b].map(|v| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}
