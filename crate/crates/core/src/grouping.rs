//! Class grouping: remap tables that merge fine dataset classes into
//! super-classes, label maps, and per-class statistics.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperClass {
    pub name: String,
    pub index: usize,
    pub sources: BTreeSet<usize>,
}

/// A validated partition of `0..num_source_classes` into super-classes
/// `0..C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemapTable {
    entries: Vec<SuperClass>,
    lookup: Vec<usize>,
}

impl RemapTable {
    pub fn new(num_source_classes: usize, mut entries: Vec<SuperClass>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::Schema(format!("need at least 2 super-classes, got {}", entries.len())));
        }
        entries.sort_by_key(|e| e.index);
        for (expected, e) in entries.iter().enumerate() {
            if e.index != expected {
                return Err(Error::Schema(format!(
                    "super-class indices must be 0..{} without gaps; `{}` has index {} where {} was expected",
                    entries.len(),
                    e.name,
                    e.index,
                    expected
                )));
            }
            if e.sources.is_empty() {
                return Err(Error::Schema(format!("super-class `{}` has no source classes", e.name)));
            }
        }
        let mut lookup = vec![usize::MAX; num_source_classes];
        for e in &entries {
            for &s in &e.sources {
                if s >= num_source_classes {
                    return Err(Error::Schema(format!(
                        "source class {s} in `{}` exceeds the declared {num_source_classes} source classes",
                        e.name
                    )));
                }
                if lookup[s] != usize::MAX {
                    return Err(Error::DuplicateSource { index: s });
                }
                lookup[s] = e.index;
            }
        }
        if let Some(missing) = lookup.iter().position(|&v| v == usize::MAX) {
            return Err(Error::MissingSource { index: missing });
        }
        Ok(Self { entries, lookup })
    }

    /// Each of `n` classes maps to itself.
    pub fn identity(n: usize) -> Result<Self> {
        let entries = (0..n)
            .map(|i| SuperClass { name: format!("class{i}"), index: i, sources: BTreeSet::from([i]) })
            .collect();
        Self::new(n, entries)
    }

    pub fn num_super_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn num_source_classes(&self) -> usize {
        self.lookup.len()
    }

    pub fn entries(&self) -> &[SuperClass] {
        &self.entries
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn super_class_of(&self, source: usize) -> Option<usize> {
        self.lookup.get(source).copied()
    }

    /// The identity table on this table's super-classes.
    pub fn induced_identity(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|e| SuperClass { name: e.name.clone(), index: e.index, sources: BTreeSet::from([e.index]) })
            .collect();
        Self::new(self.entries.len(), entries).expect("identity on ≥2 classes is valid")
    }
}

/// A grid of class indices, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    values: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("label map must be non-empty, got {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::Dimension { what: "label map values", expected: height * width, got: values.len() });
        }
        if let Some(&v) = values.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::LabelOutOfRange { value: v as usize, num_classes });
        }
        Ok(Self { height, width, num_classes, values })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, class: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.values[y * self.width + x] as usize
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &v in &self.values {
            counts[v as usize] += 1;
        }
        counts
    }
}

/// Distinct pixel values of `map` that `table` does not cover.
pub fn unmapped_values(map: &LabelMap, table: &RemapTable) -> BTreeSet<usize> {
    map.values
        .iter()
        .map(|&v| v as usize)
        .filter(|&v| table.super_class_of(v).is_none())
        .collect()
}

/// Rewrites `map` into super-class indices.
pub fn remap(map: &LabelMap, table: &RemapTable) -> Result<LabelMap> {
    let c = table.num_super_classes();
    if c > 256 {
        return Err(Error::Config(format!("{c} super-classes do not fit 8-bit label maps")));
    }
    let mut values = Vec::with_capacity(map.values.len());
    for &v in &map.values {
        let s = table.super_class_of(v as usize).ok_or(Error::UnmappedClass { value: v as usize })?;
        values.push(s as u8);
    }
    Ok(LabelMap { height: map.height, width: map.width, num_classes: c, values })
}

/// Per-class binary masks, `[C, H, W]`.
pub fn one_hot<T: Scalar>(map: &LabelMap) -> Tensor<T> {
    let plane = map.height * map.width;
    let mut data = vec![T::zero(); map.num_classes * plane];
    for (p, &v) in map.values.iter().enumerate() {
        data[v as usize * plane + p] = T::one();
    }
    Tensor::from_vec(&[map.num_classes, map.height, map.width], data)
}

/// Per-pixel argmax over the class axis of a `[C, H, W]` stack.
pub fn argmax_map<T: Scalar>(stack: &Tensor<T>) -> Result<LabelMap> {
    let &[c, h, w] = stack.shape() else {
        return Err(Error::Shape { expected: vec![0, 0, 0], got: stack.shape().to_vec() });
    };
    let plane = h * w;
    let d = stack.data();
    let values = (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * plane + p] > d[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, c, values)
}

/// Fraction of pixels per class; sums to 1.
pub fn class_statistics(map: &LabelMap) -> Vec<f64> {
    let n = map.values.len() as f64;
    map.class_counts().into_iter().map(|c| c as f64 / n).collect()
}
