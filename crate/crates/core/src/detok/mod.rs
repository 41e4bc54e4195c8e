//! Visual de-tokenizer: a small conditional denoiser that reconstructs a
//! tile from its 64 visual embeddings.
//!
//! The 64 embeddings pass through a conditioning module (learnable slots
//! and four cross-attention layers) whose output every denoiser block
//! cross-attends to. The denoiser works on the latent pixels of a fixed
//! linear codec and predicts the clean latent. A stage-2 model also takes a
//! condition image's latent, concatenated channel-wise with the noisy
//! latent, so its input projection has `2C` columns instead of `C`.

mod latent;
mod net;
mod run;
mod train;

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use latent::{from_tokens, to_tokens, LatentCodec, NoiseSchedule};
pub use net::denoise_step;
pub use run::{mean_image, run_detok, tile_example, DetokReport, DetokRunConfig};
pub use train::{
    decode, decode_latent, mean_latent_baseline, reconstruction_mse, surgery, train_detok, write_metrics, DetokExample,
    DetokMetric, DetokTrainConfig,
};

use crate::error::{contract, Error, Result};
use crate::kernel::{io, Tensor};
use crate::vitsim::POOLED_COUNT;

pub const DETOK_FORMAT: &str = "mmseq-detok v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Embeddings only.
    Features,
    /// Embeddings plus a condition latent.
    Conditioned,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Features => 1,
            Stage::Conditioned => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetokConfig {
    /// Square tile side in pixels.
    pub tile: usize,
    pub channels: usize,
    /// Latent downsampling factor.
    pub factor: usize,
    pub latent_channels: usize,
    pub visual_dim: usize,
    pub cond_layers: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub blocks: usize,
    /// Denoising steps.
    pub steps: usize,
    pub codec_seed: u64,
}

impl Default for DetokConfig {
    fn default() -> Self {
        Self {
            tile: 32,
            channels: 3,
            factor: 4,
            latent_channels: 4,
            visual_dim: 8,
            cond_layers: 4,
            model_dim: 16,
            mlp_dim: 32,
            blocks: 2,
            steps: 8,
            codec_seed: 29,
        }
    }
}

impl DetokConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || self.factor == 0 || self.tile % self.factor != 0 {
            return Err(Error::Config(format!(
                "tile {} must be a positive multiple of factor {}",
                self.tile, self.factor
            )));
        }
        if [
            self.visual_dim,
            self.cond_layers,
            self.model_dim,
            self.mlp_dim,
            self.blocks,
            self.steps,
        ]
        .contains(&0)
        {
            return Err(Error::Config("de-tokenizer sizes must be positive".into()));
        }
        Ok(())
    }

    /// Latent side length.
    pub fn side(&self) -> usize {
        self.tile / self.factor
    }

    pub fn codec(&self) -> Result<LatentCodec> {
        LatentCodec::new(self.factor, self.channels, self.latent_channels, self.codec_seed)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps)
    }
}

/// De-tokenizer weights for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct DetokParams {
    pub config: DetokConfig,
    stage: Stage,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    tensors: IndexMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    stage: Stage,
    config: DetokConfig,
    tensors: Vec<(String, Vec<usize>, String)>,
}

impl DetokParams {
    /// Fresh stage-1 weights.
    pub fn init(config: DetokConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m, dv) = (config.model_dim, config.mlp_dim, config.visual_dim);
        let mut t = IndexMap::new();
        let linear = |t: &mut IndexMap<String, Tensor>, prefix: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng| {
            t.insert(
                format!("{prefix}.weight"),
                Tensor::randn(&[out, inp], 1.0 / (inp as f64).sqrt(), rng),
            );
            t.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]));
        };
        linear(&mut t, "cond.in", d, dv, &mut rng);
        t.insert("cond.slots".into(), Tensor::randn(&[POOLED_COUNT, d], 0.1, &mut rng));
        for l in 0..config.cond_layers {
            for p in ["q", "k", "v", "o"] {
                linear(&mut t, &format!("cond.layers.{l}.{p}"), d, d, &mut rng);
            }
        }
        linear(&mut t, "den.in", d, config.latent_channels, &mut rng);
        t.insert(
            "den.pos".into(),
            Tensor::randn(&[config.side() * config.side(), d], 0.1, &mut rng),
        );
        t.insert("den.time".into(), Tensor::randn(&[config.steps, d], 0.1, &mut rng));
        for i in 0..config.blocks {
            for p in ["q", "k", "v", "o"] {
                linear(&mut t, &format!("den.blocks.{i}.attn.{p}"), d, d, &mut rng);
            }
            linear(&mut t, &format!("den.blocks.{i}.mlp.up"), m, d, &mut rng);
            linear(&mut t, &format!("den.blocks.{i}.mlp.down"), d, m, &mut rng);
        }
        linear(&mut t, "den.out", config.latent_channels, d, &mut rng);
        Ok(Self {
            codec: config.codec()?,
            schedule: config.schedule()?,
            config,
            stage: Stage::Features,
            tensors: t,
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn codec(&self) -> &LatentCodec {
        &self.codec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Columns of the denoiser's input projection: `C`, or `2C` in stage 2.
    pub fn input_channels(&self) -> usize {
        self.tensors.get("den.in.weight").map_or(0, |w| w.shape()[1])
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| contract(format!("no de-tokenizer parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.tensors
    }

    /// Parameters optimised in each stage: the conditioning module and the
    /// denoiser's attention maps in stage 1, the whole denoiser in stage 2.
    pub fn trains(&self, name: &str) -> bool {
        match self.stage {
            Stage::Features => {
                name.starts_with("cond.") || (name.starts_with("den.blocks.") && name.contains(".attn."))
            }
            Stage::Conditioned => name.starts_with("den."),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("tensors"))?;
        let mut entries = Vec::new();
        for (name, t) in &self.tensors {
            let file = format!("tensors/{name}.mmt");
            io::save(dir.join(&file), t)?;
            entries.push((
                name.clone(),
                t.shape().to_vec(),
                hex::encode(Sha256::digest(t.to_le_bytes())),
            ));
        }
        let m = Manifest {
            format: DETOK_FORMAT.into(),
            stage: self.stage,
            config: self.config.clone(),
            tensors: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::Config(format!("no de-tokenizer checkpoint at {}: {e}", dir.display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != DETOK_FORMAT {
            return Err(Error::Format(format!("unsupported de-tokenizer format {:?}", m.format)));
        }
        m.config.validate()?;
        let mut tensors = IndexMap::new();
        for (name, shape, sha) in m.tensors {
            let t = io::load(dir.join(format!("tensors/{name}.mmt")))?;
            if t.shape() != shape.as_slice() || hex::encode(Sha256::digest(t.to_le_bytes())) != sha {
                return Err(Error::Format(format!(
                    "de-tokenizer tensor {name} does not match its manifest entry"
                )));
            }
            tensors.insert(name, t);
        }
        let p = Self {
            codec: m.config.codec()?,
            schedule: m.config.schedule()?,
            config: m.config,
            stage: m.stage,
            tensors,
        };
        let expected = p.config.latent_channels * usize::from(p.stage.number());
        if p.input_channels() != expected {
            return Err(Error::Format(format!(
                "stage {} checkpoint has {} input channels, expected {expected}",
                p.stage.number(),
                p.input_channels()
            )));
        }
        Ok(p)
    }
}
