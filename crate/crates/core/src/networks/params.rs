use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::error::{Error, Result};

/// Named trainable parameters of one network, ordered by name.
///
/// Layers keep clones of the same [`Var`]s, so assigning through the store
/// updates the network in place.
#[derive(Clone, Debug)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { dtype, vars: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub(crate) fn normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<Var> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        self.insert(name, t)
    }

    pub(crate) fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let t = Tensor::zeros(shape, self.dtype, &Device::Cpu)?;
        self.insert(name, t)
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&t)?;
        if self.vars.insert(name.to_string(), var.clone()).is_some() {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        Ok(var)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            match self.dtype {
                DType::F64 => {
                    for v in var.flatten_all()?.to_vec1::<f64>()? {
                        hasher.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in var.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        hasher.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Copies of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites every parameter; names and shapes must match exactly.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() || values.keys().zip(self.vars.keys()).any(|(a, b)| a != b) {
            let missing: Vec<_> = self.vars.keys().filter(|k| !values.contains_key(*k)).collect();
            let extra: Vec<_> = values.keys().filter(|k| !self.vars.contains_key(*k)).collect();
            return Err(Error::Compatibility(format!(
                "parameter names differ (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        for (name, var) in &self.vars {
            let t = &values[name];
            if t.dims() != var.dims() {
                return Err(Error::Compatibility(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn to_container(&self, kind: &str) -> Result<Container> {
        let mut c = Container::new(kind);
        c.tensors = self.snapshot()?;
        Ok(c)
    }
}
