//! Two-stage de-tokenizer run over directories of images.
//!
//! ```text
//! <out_dir>/metrics.csv    step,loss,stage (stage 1 rows, then stage 2)
//! <out_dir>/stage1/        DetokParams checkpoint
//! <out_dir>/stage2/        DetokParams checkpoint after surgery + training
//! <out_dir>/report.json    reconstruction errors and baselines
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::{
    mean_latent_baseline, reconstruction_mse, surgery, train_detok, write_metrics, DetokExample, DetokTrainConfig,
};
use super::{DetokConfig, DetokParams};
use crate::dynres::{upsample, Image};
use crate::error::{Error, Result};
use crate::seqpack::{regression_target, PackedCorpus};
use crate::trainer::SEED_ENV;
use crate::vitsim::VisualTokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetokRunConfig {
    pub seed: u64,
    /// Packed corpus whose visual tokenizer produces the features.
    pub corpus: PathBuf,
    /// Directories scanned (non-recursively) for `.ppm`/`.pgm` files.
    pub images: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub model: DetokConfig,
    pub stage1: DetokTrainConfig,
    pub stage2: DetokTrainConfig,
}

impl Default for DetokRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: PathBuf::from("corpus"),
            images: vec![PathBuf::from("images")],
            out_dir: PathBuf::from("detok"),
            model: DetokConfig::default(),
            stage1: DetokTrainConfig::default(),
            stage2: DetokTrainConfig {
                steps: 400,
                ..DetokTrainConfig::default()
            },
        }
    }
}

impl DetokRunConfig {
    /// Reads TOML; relative paths resolve against the file's directory and
    /// `MMSEQ_SEED` overrides `seed`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.corpus = base.join(&cfg.corpus);
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.images = cfg.images.iter().map(|d| base.join(d)).collect();
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Image files in scan order: directories in config order, names sorted.
    pub fn image_files(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for dir in &self.images {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::Config(format!("image directory {}: {e}", dir.display())))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.retain(|p| p.extension().is_some_and(|x| x == "ppm" || x == "pgm"));
            files.sort();
            out.extend(files);
        }
        if out.is_empty() {
            return Err(Error::Config("no images found for de-tokenizer training".into()));
        }
        Ok(out)
    }
}

/// The image as one tile plus its tokenizer embeddings, exactly as the
/// regression targets of a packed target image.
pub fn tile_example(img: &Image, vit: &VisualTokenizer) -> Result<DetokExample> {
    let cfg = vit.config();
    Ok(DetokExample {
        features: regression_target(img, vit)?,
        target: upsample(&img.to_channels(cfg.channels)?, cfg.tile_h, cfg.tile_w)?,
        condition: None,
    })
}

/// Pixel-wise mean of the targets.
pub fn mean_image(data: &[DetokExample]) -> Result<Image> {
    let first = data
        .first()
        .ok_or_else(|| Error::Contract("mean image of an empty dataset".into()))?;
    let mut acc = vec![0.0; first.target.pixels().len()];
    for ex in data {
        for (a, v) in acc.iter_mut().zip(ex.target.pixels()) {
            *a += v;
        }
    }
    let n = data.len() as f64;
    Image::new(
        first.target.height(),
        first.target.width(),
        first.target.channels(),
        acc.into_iter().map(|v| v / n).collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetokReport {
    pub images: usize,
    pub stage1_mse: f64,
    /// Stage 2 with each image as its own condition.
    pub stage2_mse: f64,
    /// Stage 2 with all-zero conditions.
    pub stage2_zero_condition_mse: f64,
    pub mean_latent_mse: f64,
    pub mean_image_mse: f64,
    pub stage1: PathBuf,
    pub stage2: PathBuf,
}

/// Stage 1 on the plain tiles; surgery; stage 2 on every tile twice, once
/// conditioned on itself and once with a zero condition.
pub fn run_detok(cfg: &DetokRunConfig) -> Result<DetokReport> {
    let corpus = PackedCorpus::read(&cfg.corpus)
        .map_err(|e| Error::Ingest(format!("cannot read corpus {}: {e}", cfg.corpus.display())))?;
    let vit = &corpus.tokenizer;
    let plain: Vec<DetokExample> = cfg
        .image_files()?
        .iter()
        .map(|p| tile_example(&Image::load_pnm(p)?, vit))
        .collect::<Result<_>>()?;
    let conditioned: Vec<DetokExample> = plain
        .iter()
        .map(|ex| DetokExample {
            condition: Some(ex.target.clone()),
            ..ex.clone()
        })
        .collect();
    let mixed: Vec<DetokExample> = conditioned.iter().chain(&plain).cloned().collect();

    fs::create_dir_all(&cfg.out_dir)?;
    let mut s1 = DetokParams::init(cfg.model.clone(), cfg.seed)?;
    let mut rows = train_detok(
        &mut s1,
        &plain,
        &DetokTrainConfig {
            seed: cfg.seed,
            ..cfg.stage1.clone()
        },
    )?;
    let stage1 = cfg.out_dir.join("stage1");
    s1.save(&stage1)?;
    let mut s2 = surgery(&s1)?;
    rows.extend(train_detok(
        &mut s2,
        &mixed,
        &DetokTrainConfig {
            seed: cfg.seed,
            ..cfg.stage2.clone()
        },
    )?);
    let stage2 = cfg.out_dir.join("stage2");
    s2.save(&stage2)?;
    write_metrics(cfg.out_dir.join("metrics.csv"), &rows)?;

    let mean = mean_image(&plain)?;
    let mean_image_mse = plain.iter().map(|ex| mean.mse(&ex.target)).sum::<Result<f64>>()? / plain.len() as f64;
    let report = DetokReport {
        images: plain.len(),
        stage1_mse: reconstruction_mse(&s1, &plain, cfg.seed)?,
        stage2_mse: reconstruction_mse(&s2, &conditioned, cfg.seed)?,
        stage2_zero_condition_mse: reconstruction_mse(&s2, &plain, cfg.seed)?,
        mean_latent_mse: mean_latent_baseline(s1.codec(), &plain)?,
        mean_image_mse,
        stage1,
        stage2,
    };
    fs::write(cfg.out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
