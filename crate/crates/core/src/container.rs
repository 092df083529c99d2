//! Self-describing weight containers.
//!
//! One file holds a set of named f32 arrays (little-endian) plus string
//! metadata. The on-disk layout is safetensors; every file we write carries a
//! `format_version` and a `kind` entry so readers can reject foreign files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";

#[derive(Clone, Debug)]
pub struct Container {
    pub kind: String,
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self { kind: kind.into(), metadata: BTreeMap::new(), tensors: BTreeMap::new() }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Dimension(format!("container `{}` has no array named `{name}`", self.kind)))
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut encoded = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            encoded.push((name.clone(), t.dims().to_vec(), bytes));
        }
        let views = encoded
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::load(path, e))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        meta.insert("format_version".into(), FORMAT_VERSION.into());
        meta.insert("kind".into(), self.kind.clone());
        let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::load(path, e))?;
        let bytes = canonical_header(bytes).map_err(|e| Error::load(path, e))?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads a container, converting arrays to `dtype`.
    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::load(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::load(path, e))?;
        let mut metadata: BTreeMap<String, String> =
            header.metadata().clone().unwrap_or_default().into_iter().collect();
        match metadata.remove("format_version") {
            Some(v) if v == FORMAT_VERSION => {}
            Some(v) => return Err(Error::load(path, format!("unsupported format version {v}"))),
            None => return Err(Error::load(path, "missing format_version")),
        }
        let kind = metadata.remove("kind").ok_or_else(|| Error::load(path, "missing kind"))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::load(path, format!("array `{name}` is {:?}, expected F32", view.dtype())));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(values, view.shape(), &Device::Cpu)?.to_dtype(dtype)?;
            tensors.insert(name, t);
        }
        Ok(Self { kind, metadata, tensors })
    }

    pub fn expect_kind(self, kind: &str, path: &Path) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::load(path, format!("expected a `{kind}` container, found `{}`", self.kind)));
        }
        Ok(self)
    }
}

/// Rewrites the JSON header with sorted keys; the metadata map otherwise
/// serializes in hash order and identical containers differ byte-wise.
fn canonical_header(bytes: Vec<u8>) -> std::result::Result<Vec<u8>, String> {
    let len = u64::from_le_bytes(bytes[..8].try_into().map_err(|_| "truncated header")?) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).map_err(|e| e.to_string())?;
    let mut text = serde_json::to_vec(&header).map_err(|e| e.to_string())?;
    text.resize(text.len().div_ceil(8) * 8, b' ');
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - len);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + len..]);
    Ok(out)
}
