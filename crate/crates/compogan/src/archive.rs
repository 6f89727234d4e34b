//! Thin wrapper over safetensors: named little-endian arrays plus a
//! string→string metadata map.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use compogan_core::Tensor;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F32(Vec<usize>, Vec<f32>),
    F64(Vec<usize>, Vec<f64>),
}

impl Array {
    pub fn shape(&self) -> &[usize] {
        match self {
            Array::F32(s, _) | Array::F64(s, _) => s,
        }
    }

    fn bytes(&self) -> (Dtype, Vec<u8>) {
        match self {
            Array::F32(_, d) => (Dtype::F32, d.iter().flat_map(|v| v.to_le_bytes()).collect()),
            Array::F64(_, d) => (Dtype::F64, d.iter().flat_map(|v| v.to_le_bytes()).collect()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub arrays: BTreeMap<String, Array>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn new(format: &str, version: u32) -> Self {
        let mut a = Self::default();
        a.meta("format", format);
        a.meta("version", version.to_string());
        a
    }

    pub fn meta(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn put_f32(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.arrays.insert(name.into(), Array::F32(t.shape().to_vec(), t.data().to_vec()));
    }

    pub fn put_f32_vec(&mut self, name: impl Into<String>, v: &[f32]) {
        self.arrays.insert(name.into(), Array::F32(vec![v.len()], v.to_vec()));
    }

    pub fn put_f64(&mut self, name: impl Into<String>, shape: &[usize], v: &[f64]) {
        self.arrays.insert(name.into(), Array::F64(shape.to_vec(), v.to_vec()));
    }

    pub fn get_meta(&self, key: &str) -> Result<&str> {
        self.metadata.get(key).map(String::as_str).ok_or_else(|| anyhow!("archive metadata lacks `{key}`"))
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays.get(name).ok_or_else(|| anyhow!("archive lacks array `{name}`"))
    }

    pub fn f32_tensor(&self, name: &str) -> Result<Tensor<f32>> {
        match self.get(name)? {
            Array::F32(s, d) => Ok(Tensor::from_vec(s, d.clone())),
            Array::F64(..) => bail!("array `{name}` is F64, expected F32"),
        }
    }

    pub fn f64_array(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            Array::F64(s, d) => Ok((s, d)),
            Array::F32(..) => bail!("array `{name}` is F32, expected F64"),
        }
    }

    /// Checks the `format` tag and that `version` is at most `max_version`.
    pub fn expect_format(&self, format: &str, max_version: u32) -> Result<u32> {
        let f = self.get_meta("format")?;
        if f != format {
            bail!("expected a `{format}` archive, found `{f}`");
        }
        let v: u32 = self.get_meta("version")?.parse().context("bad version tag")?;
        if v == 0 || v > max_version {
            bail!("unsupported {format} version {v} (this build reads up to {max_version})");
        }
        Ok(v)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let encoded: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = self
            .arrays
            .iter()
            .map(|(k, a)| {
                let (dt, b) = a.bytes();
                (k.clone(), dt, a.shape().to_vec(), b)
            })
            .collect();
        let views = encoded
            .iter()
            .map(|(k, dt, s, b)| Ok((k.as_str(), TensorView::new(*dt, s.clone(), b)?)))
            .collect::<Result<Vec<_>, safetensors::SafeTensorError>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        Ok(safetensors::serialize(views, Some(meta))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes)?;
        let st = SafeTensors::deserialize(bytes)?;
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            let raw = view.data();
            let a = match view.dtype() {
                Dtype::F32 => Array::F32(shape, raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                Dtype::F64 => Array::F64(shape, raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                other => bail!("array `{name}` has unsupported dtype {other:?}"),
            };
            arrays.insert(name, a);
        }
        let metadata = header.metadata().clone().unwrap_or_default().into_iter().collect();
        Ok(Self { arrays, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
    }
}
