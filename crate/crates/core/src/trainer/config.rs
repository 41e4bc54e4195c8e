use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mllm::{ModelConfig, ParamGroup};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "MMSEQ_SEED";

/// Flat run configuration, read from TOML. Relative paths resolve against
/// the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Packed corpus directory.
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    pub steps: usize,
    /// Halts after this many completed steps while keeping the schedule of
    /// `steps`; a later `resume` run continues from there.
    pub stop_at: Option<usize>,
    pub batch_size: usize,
    /// Peak learning rate; cosine-decays to `lr_min` over `steps`.
    pub lr: f64,
    pub lr_min: f64,
    /// Weight of the regression term.
    pub lambda: f64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub resume: bool,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
    pub max_len: usize,
    /// Base checkpoint directory (fine-tuning only).
    pub base: Option<PathBuf>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Fine-tuning parameter groups.
    pub trainable: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            seed: 0,
            corpus: PathBuf::from("corpus"),
            out_dir: PathBuf::from("run"),
            steps: 300,
            stop_at: None,
            batch_size: 4,
            lr: 3e-3,
            lr_min: 3e-4,
            lambda: 1.0,
            checkpoint_every: 0,
            resume: false,
            model_dim: m.model_dim,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            mlp_dim: m.mlp_dim,
            max_len: m.max_len,
            base: None,
            lora_rank: 4,
            lora_alpha: 8.0,
            trainable: ParamGroup::ALL
                .iter()
                .map(|g| {
                    serde_json::to_value(g)
                        .expect("enum")
                        .as_str()
                        .expect("string")
                        .to_string()
                })
                .collect(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.corpus = base.join(&cfg.corpus);
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.base = cfg.base.map(|b| base.join(b));
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config(format!(
                "need 0 ≤ lr_min ≤ lr and lr > 0, got {} and {}",
                self.lr_min, self.lr
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be a non-negative number, got {}",
                self.lambda
            )));
        }
        self.groups()?;
        Ok(())
    }

    pub fn groups(&self) -> Result<Vec<ParamGroup>> {
        self.trainable.iter().map(|s| ParamGroup::parse(s)).collect()
    }

    pub fn model_config(&self, visual_dim: usize) -> ModelConfig {
        ModelConfig {
            model_dim: self.model_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            mlp_dim: self.mlp_dim,
            visual_dim,
            max_len: self.max_len,
            ..ModelConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_list_every_group() {
        let c = TrainConfig::default();
        assert_eq!(c.groups().unwrap(), ParamGroup::ALL.to_vec());
    }

    #[test]
    fn parses_flat_toml_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(
            &p,
            "seed = 5\nsteps = 12\ncorpus = \"packed\"\nout_dir = \"out\"\nlambda = 0.5\n",
        )
        .unwrap();
        let c = TrainConfig::load(&p).unwrap();
        assert_eq!(c.steps, 12);
        assert_eq!(c.corpus, dir.path().join("packed"));
        assert_eq!(c.lambda, 0.5);
    }

    #[test]
    fn rejects_unknown_keys_and_groups() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.toml");
        std::fs::write(&p, "stepz = 3\n").unwrap();
        assert!(matches!(TrainConfig::load(&p), Err(Error::Config(_))));
        std::fs::write(&p, "trainable = [\"lora\", \"decoder\"]\n").unwrap();
        let err = TrainConfig::load(&p).unwrap_err().to_string();
        assert!(err.contains("decoder"), "{err}");
    }
}
