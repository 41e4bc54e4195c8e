use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::kernel::{io, Tensor};

/// Anything Adam can update by parameter name.
pub trait ParamStore {
    fn param_mut(&mut self, name: &str) -> Result<&mut Tensor>;
}

impl ParamStore for crate::mllm::ModelParams {
    fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name)
    }
}

impl ParamStore for IndexMap<String, Tensor> {
    fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name)
            .ok_or_else(|| contract(format!("no parameter named {name}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for a fixed set of tracked parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: IndexMap<String, Tensor>,
    second: IndexMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
    names: Vec<String>,
}

impl AdamState {
    /// Tracks `(name, shape)` pairs with zero moments.
    pub fn new<'a>(config: AdamConfig, tracked: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> Self {
        let first: IndexMap<String, Tensor> = tracked
            .into_iter()
            .map(|(n, s)| (n.to_string(), Tensor::zeros(s)))
            .collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.first.keys().map(String::as_str)
    }

    /// One bias-corrected update. Every tracked parameter needs a gradient.
    pub fn update(&mut self, params: &mut dyn ParamStore, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        for name in self.first.keys() {
            match grads.get(name) {
                None => return Err(contract(format!("missing gradient for parameter {name}"))),
                Some(g) if g.shape() != self.first[name].shape() => {
                    return Err(contract(format!("gradient for {name} has shape {:?}", g.shape())))
                }
                _ => {}
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((name, m), v) in self.first.iter_mut().zip(self.second.values_mut()) {
            let g = &grads[name];
            let p = params.param_mut(name)?;
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("moments"))?;
        let names: Vec<String> = self.first.keys().cloned().collect();
        for (i, name) in names.iter().enumerate() {
            io::save(dir.join(format!("moments/{i:04}.m.mmt")), &self.first[name])?;
            io::save(dir.join(format!("moments/{i:04}.v.mmt")), &self.second[name])?;
        }
        let header = AdamHeader {
            config: self.config,
            step: self.step,
            names,
        };
        fs::write(dir.join("adam.json"), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let header: AdamHeader = serde_json::from_str(
            &fs::read_to_string(dir.join("adam.json"))
                .map_err(|e| Error::Config(format!("no optimizer state at {}: {e}", dir.display())))?,
        )?;
        let mut first = IndexMap::new();
        let mut second = IndexMap::new();
        for (i, name) in header.names.into_iter().enumerate() {
            first.insert(name.clone(), io::load(dir.join(format!("moments/{i:04}.m.mmt")))?);
            second.insert(name, io::load(dir.join(format!("moments/{i:04}.v.mmt")))?);
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            first,
            second,
        })
    }
}

/// Cosine decay from `peak` at step 0 to `floor` at `total`.
pub fn cosine_lr(step: usize, total: usize, peak: f64, floor: f64) -> f64 {
    if total == 0 {
        return peak;
    }
    let progress = (step.min(total) as f64) / total as f64;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}
