//! Adam with state that can be written to and restored from a container.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::networks::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params.vars() {
            m.insert(name.to_string(), var.zeros_like()?);
            v.insert(name.to_string(), var.zeros_like()?);
        }
        Ok(Self { config, step: 0, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient in `grads` keep their value but still advance the moments as
    /// if the gradient were zero.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, var) in params.vars() {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.clone(),
                None => var.zeros_like()?,
            };
            let m = self.m.get_mut(name).ok_or_else(|| missing(name))?;
            let v = self.v.get_mut(name).ok_or_else(|| missing(name))?;
            *m = ((&*m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&*m / bias1)?;
            let v_hat = (&*v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }

    pub fn to_container(&self, kind: &str) -> Container {
        let mut c = Container::new(kind).with_meta("step", self.step.to_string());
        for (k, t) in &self.m {
            c.tensors.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            c.tensors.insert(format!("v.{k}"), t.clone());
        }
        c
    }

    pub fn restore(&mut self, c: &Container) -> Result<()> {
        let step = c
            .meta("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Compatibility("optimizer state lacks a step count".into()))?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, old) in &self.m {
            let t = c.tensor(&format!("m.{k}")).map_err(|_| missing(k))?;
            if t.dims() != old.dims() {
                return Err(Error::Compatibility(format!("optimizer moment `{k}` has the wrong shape")));
            }
            m.insert(k.clone(), t.to_dtype(old.dtype())?);
            v.insert(k.clone(), c.tensor(&format!("v.{k}")).map_err(|_| missing(k))?.to_dtype(old.dtype())?);
        }
        if c.tensors.len() != 2 * m.len() {
            return Err(Error::Compatibility("optimizer state names a parameter the network lacks".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

fn missing(name: &str) -> Error {
    Error::Compatibility(format!("optimizer has no state for parameter `{name}`"))
}
