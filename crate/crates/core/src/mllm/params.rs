use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::codec;
use crate::error::{Error, Result};
use crate::kernel::{io, Tensor};
use crate::trainer::LoraSpec;

pub const CHECKPOINT_FORMAT: &str = "mmseq-checkpoint v1";

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Present once LoRA pairs have been attached to the block linears.
    pub lora: Option<LoraSpec>,
    tensors: IndexMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    kind: String,
    config: ModelConfig,
    lora: Option<LoraSpec>,
    tensors: Vec<TensorEntry>,
}

impl ModelParams {
    /// Seeded initialisation. `lm_head` starts small so initial logits are
    /// near uniform.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, dv, v, m, q) = (
            config.model_dim,
            config.visual_dim,
            config.vocab_size,
            config.mlp_dim,
            config.n_queries,
        );
        let mut t = IndexMap::new();
        let mut put = |name: String, tensor: Tensor| {
            t.insert(name, tensor);
        };
        let linear =
            |put: &mut dyn FnMut(String, Tensor), prefix: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng| {
                put(
                    format!("{prefix}.weight"),
                    Tensor::randn(&[out, inp], 1.0 / (inp as f64).sqrt(), rng),
                );
                put(format!("{prefix}.bias"), Tensor::zeros(&[out]));
            };
        put("tok_emb".into(), Tensor::randn(&[v, d], 0.1, &mut rng));
        put("pos_emb".into(), Tensor::randn(&[config.max_len, d], 0.1, &mut rng));
        put("queries".into(), Tensor::randn(&[q, d], 0.1, &mut rng));
        for side in ["left", "right", "top", "bottom"] {
            put(format!("posemb.{side}"), Tensor::randn(&[dv], 0.1, &mut rng));
        }
        put("adapter.latents".into(), Tensor::randn(&[q, d], 0.1, &mut rng));
        linear(&mut put, "adapter.q", d, d, &mut rng);
        linear(&mut put, "adapter.k", d, dv, &mut rng);
        linear(&mut put, "adapter.v", d, dv, &mut rng);
        linear(&mut put, "adapter.o", d, d, &mut rng);
        for i in 0..config.n_layers {
            let p = format!("blocks.{i}");
            put(format!("{p}.ln1.gain"), Tensor::full(&[d], 1.0));
            put(format!("{p}.ln1.bias"), Tensor::zeros(&[d]));
            for l in ["q", "k", "v", "o"] {
                linear(&mut put, &format!("{p}.attn.{l}"), d, d, &mut rng);
            }
            put(format!("{p}.ln2.gain"), Tensor::full(&[d], 1.0));
            put(format!("{p}.ln2.bias"), Tensor::zeros(&[d]));
            linear(&mut put, &format!("{p}.mlp.up"), m, d, &mut rng);
            linear(&mut put, &format!("{p}.mlp.down"), d, m, &mut rng);
        }
        put("ln_f.gain".into(), Tensor::full(&[d], 1.0));
        put("ln_f.bias".into(), Tensor::zeros(&[d]));
        put("lm_head.weight".into(), Tensor::randn(&[v, d], 0.01, &mut rng));
        put("head.latents".into(), Tensor::randn(&[q, d], 0.1, &mut rng));
        for l in ["q", "k", "v", "o"] {
            linear(&mut put, &format!("head.{l}"), d, d, &mut rng);
        }
        linear(&mut put, "head.proj", dv, d, &mut rng);
        Ok(Self {
            config,
            lora: None,
            tensors: t,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.shift_remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// SHA-256 over the names and bytes of the selected tensors, in order.
    pub fn checksum(&self, select: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            if select(name) {
                h.update(name.as_bytes());
                h.update(t.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes the selected tensors as an MMT1 checkpoint directory.
    pub fn save(&self, dir: impl AsRef<Path>, kind: &str, select: impl Fn(&str) -> bool) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("tensors"))?;
        let mut entries = Vec::new();
        for (name, t) in &self.tensors {
            if !select(name) {
                continue;
            }
            let file = format!("tensors/{name}.mmt");
            io::save(dir.join(&file), t)?;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                file,
                sha256: hex::encode(Sha256::digest(t.to_le_bytes())),
            });
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            kind: kind.into(),
            config: self.config.clone(),
            lora: self.lora,
            tensors: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        codec::write_vocabulary_layout(dir.join("vocab.tsv"))?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ModelParams::save`]; returns the
    /// parameters and the checkpoint kind.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, String)> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        if !path.is_file() {
            return Err(Error::Config(format!("no checkpoint at {}", dir.display())));
        }
        let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format {:?}", m.format)));
        }
        m.config.validate()?;
        let mut tensors = IndexMap::new();
        for e in m.tensors {
            let t = io::load(dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() || hex::encode(Sha256::digest(t.to_le_bytes())) != e.sha256 {
                return Err(Error::Format(format!(
                    "tensor {} does not match its manifest entry",
                    e.name
                )));
            }
            tensors.insert(e.name, t);
        }
        Ok((
            Self {
                config: m.config,
                lora: m.lora,
                tensors,
            },
            m.kind,
        ))
    }

    /// Overwrites or adds every tensor of `other`.
    pub fn overlay(&mut self, other: &ModelParams) -> Result<()> {
        if other.config != self.config {
            return Err(Error::Config("overlay checkpoint has a different model config".into()));
        }
        for (name, t) in other.iter() {
            if let Some(existing) = self.tensors.get(name) {
                if existing.shape() != t.shape() {
                    return Err(Error::Config(format!(
                        "overlay tensor {name} has shape {:?}",
                        t.shape()
                    )));
                }
            }
            self.tensors.insert(name.to_string(), t.clone());
        }
        if other.lora.is_some() {
            self.lora = other.lora;
        }
        Ok(())
    }
}
