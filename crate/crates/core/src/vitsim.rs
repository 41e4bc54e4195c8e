//! Frozen visual tokenizer stand-in: patchify, a fixed seeded linear
//! projection, and contiguous-group average pooling down to 64 rows.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynres::Image;
use crate::error::{contract, Error, Result};
use crate::kernel::{io, Tensor};

/// Embeddings per tile.
pub const POOLED_COUNT: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualTokenizerConfig {
    pub tile_h: usize,
    pub tile_w: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for VisualTokenizerConfig {
    fn default() -> Self {
        Self {
            tile_h: 32,
            tile_w: 32,
            patch_size: 2,
            channels: 3,
            embed_dim: 8,
            seed: 17,
        }
    }
}

impl VisualTokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.tile_h == 0 || self.tile_w == 0 {
            return bad("tokenizer sizes must be positive".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("tokenizer channels must be 1 or 3, got {}", self.channels));
        }
        if self.tile_h % self.patch_size != 0 || self.tile_w % self.patch_size != 0 {
            return bad(format!(
                "tile {}×{} not divisible by patch size {}",
                self.tile_h, self.tile_w, self.patch_size
            ));
        }
        let p = self.num_patches();
        if p % POOLED_COUNT != 0 {
            return bad(format!(
                "{p} patches per tile cannot pool into {POOLED_COUNT} equal groups"
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.tile_h / self.patch_size) * (self.tile_w / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// The 64 embeddings of one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbeddingSet {
    pub source: String,
    pub embeddings: Tensor,
}

/// Read-only after construction.
#[derive(Clone, Debug)]
pub struct VisualTokenizer {
    config: VisualTokenizerConfig,
    /// `[patch_dim × d_v]`
    projection: Tensor,
}

impl VisualTokenizer {
    pub fn new(config: VisualTokenizerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.patch_dim();
        let projection = Tensor::randn(&[k, config.embed_dim], 1.0 / (k as f64).sqrt(), &mut rng);
        Ok(Self { config, projection })
    }

    /// Restores a tokenizer whose projection was persisted with
    /// [`VisualTokenizer::save_projection`].
    pub fn with_projection(config: VisualTokenizerConfig, projection: Tensor) -> Result<Self> {
        config.validate()?;
        if projection.shape() != [config.patch_dim(), config.embed_dim] {
            return Err(Error::Config(format!(
                "projection shape {:?} does not match config [{}, {}]",
                projection.shape(),
                config.patch_dim(),
                config.embed_dim
            )));
        }
        Ok(Self { config, projection })
    }

    pub fn load(config: VisualTokenizerConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::with_projection(config, io::load(path)?)
    }

    pub fn save_projection(&self, path: impl AsRef<Path>) -> Result<()> {
        io::save(path, &self.projection)
    }

    pub fn config(&self) -> &VisualTokenizerConfig {
        &self.config
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// SHA-256 of the projection's little-endian bytes.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.projection.to_le_bytes()))
    }

    /// Tokenizes exactly one tile. Grayscale and colour inputs are converted
    /// to the configured channel count first.
    pub fn tokenize(&self, img: &Image) -> Result<Tensor> {
        let c = &self.config;
        if (img.height(), img.width()) != (c.tile_h, c.tile_w) {
            return Err(contract(format!(
                "tokenizer expects one {}×{} tile, got {}×{}",
                c.tile_h,
                c.tile_w,
                img.height(),
                img.width()
            )));
        }
        let img = img.to_channels(c.channels)?;
        let patches = patchify(&img, c.patch_size)?;
        avg_pool_1d(&patches.matmul(&self.projection)?, POOLED_COUNT)
    }

    pub fn tokenize_named(&self, source: impl Into<String>, img: &Image) -> Result<VisualEmbeddingSet> {
        Ok(VisualEmbeddingSet {
            source: source.into(),
            embeddings: self.tokenize(img)?,
        })
    }
}

/// `[P × patch²·C]`, patches in row-major order, each flattened as
/// `(dy, dx, channel)`.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(contract(format!(
            "image {h}×{w} not divisible into {patch}-pixel patches"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let len = patch * patch * c;
    let mut data = Vec::with_capacity(ph * pw * len);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..patch {
                let start = ((py * patch + dy) * w + px * patch) * c;
                data.extend_from_slice(&img.pixels()[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![ph * pw, len], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, patch: usize, channels: usize) -> Result<Image> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(contract(format!(
            "image {height}×{width} not divisible into {patch}-pixel patches"
        )));
    }
    let (ph, pw) = (height / patch, width / patch);
    if patches.shape() != [ph * pw, patch * patch * channels] {
        return Err(contract(format!(
            "patch tensor {:?} does not tile {height}×{width}",
            patches.shape()
        )));
    }
    let mut px = vec![0.0; height * width * channels];
    for (i, row) in patches.data().chunks(patch * patch * channels).enumerate() {
        let (py, pxi) = (i / pw, i % pw);
        for dy in 0..patch {
            let dst = ((py * patch + dy) * width + pxi * patch) * channels;
            let src = dy * patch * channels;
            px[dst..dst + patch * channels].copy_from_slice(&row[src..src + patch * channels]);
        }
    }
    Image::new(height, width, channels, px)
}

/// Row `g` is the mean of input rows `[g·P/groups, (g+1)·P/groups)`.
pub fn avg_pool_1d(x: &Tensor, groups: usize) -> Result<Tensor> {
    let (p, d) = x.dims2()?;
    if groups == 0 || p % groups != 0 {
        return Err(contract(format!("{p} rows cannot pool into {groups} equal groups")));
    }
    let size = p / groups;
    let mut out = vec![0.0; groups * d];
    for (g, acc) in out.chunks_mut(d).enumerate() {
        for r in g * size..(g + 1) * size {
            for (a, v) in acc.iter_mut().zip(x.row(r)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= size as f64);
    }
    Tensor::new(vec![groups, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn noise(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(VisualTokenizerConfig::default().validate().is_ok());
        let bad_div = VisualTokenizerConfig {
            tile_h: 30,
            ..Default::default()
        };
        assert!(matches!(bad_div.validate(), Err(Error::Config(_))));
        let bad_pool = VisualTokenizerConfig {
            tile_h: 8,
            tile_w: 8,
            patch_size: 2,
            ..Default::default()
        };
        assert!(matches!(VisualTokenizer::new(bad_pool), Err(Error::Config(_))));
    }

    #[test]
    fn patchify_layout() {
        let img = Image::new(4, 4, 1, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        let v = |i: usize| i as f64 / 15.0;
        assert_eq!(p.row(0), &[v(0), v(1), v(4), v(5)]);
        assert_eq!(p.row(1), &[v(2), v(3), v(6), v(7)]);
        assert!(patchify(&img, 3).is_err());

        let flat = patchify(&Image::filled(4, 6, 3, 0.3).unwrap(), 2).unwrap();
        for r in 1..6 {
            assert_eq!(flat.row(r), flat.row(0));
        }
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        for (h, w, c, p) in [(4, 4, 1, 2), (6, 9, 3, 3), (32, 32, 3, 2)] {
            let img = noise(h, w, c, (h * w) as u64);
            assert_eq!(unpatchify(&patchify(&img, p).unwrap(), h, w, p, c).unwrap(), img);
        }
    }

    #[test]
    fn avg_pool_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[64, 5], 1.0, &mut r);
        assert_eq!(avg_pool_1d(&x, 64).unwrap(), x);

        let (a, b) = ([1.0, -2.0], [3.0, 5.0]);
        let rows: Vec<Vec<f64>> = (0..128)
            .map(|i| if i % 2 == 0 { a.to_vec() } else { b.to_vec() })
            .collect();
        let pooled = avg_pool_1d(&Tensor::from_rows(&rows).unwrap(), 64).unwrap();
        for g in 0..64 {
            assert_eq!(pooled.row(g), &[2.0, 1.5]);
        }

        let x = Tensor::randn(&[256, 7], 1.0, &mut r);
        let pooled = avg_pool_1d(&x, 64).unwrap();
        for g in 0..64 {
            for j in 0..7 {
                let direct = (0..4).map(|k| x.at2(4 * g + k, j)).sum::<f64>() / 4.0;
                assert!((pooled.at2(g, j) - direct).abs() < 1e-12);
            }
        }
        assert!(avg_pool_1d(&Tensor::zeros(&[100, 2]), 64).is_err());
    }

    #[test]
    fn tokenize_contracts() {
        let vit = VisualTokenizer::new(VisualTokenizerConfig::default()).unwrap();
        let e = vit.tokenize(&Image::filled(32, 32, 3, 0.6).unwrap()).unwrap();
        assert_eq!(e.shape(), &[64, 8]);
        for g in 1..64 {
            assert_eq!(e.row(g), e.row(0));
        }
        let img = noise(32, 32, 3, 9);
        let again = VisualTokenizer::new(VisualTokenizerConfig::default()).unwrap();
        assert_eq!(
            vit.tokenize(&img).unwrap().to_le_bytes(),
            again.tokenize(&img).unwrap().to_le_bytes()
        );
        assert!(vit.tokenize(&noise(16, 32, 3, 1)).is_err());
    }

    #[test]
    fn degenerate_pooling_returns_raw_projection() {
        let cfg = VisualTokenizerConfig {
            tile_h: 16,
            tile_w: 16,
            patch_size: 2,
            channels: 1,
            embed_dim: 4,
            seed: 3,
        };
        let vit = VisualTokenizer::new(cfg).unwrap();
        let img = noise(16, 16, 1, 4);
        let raw = patchify(&img, 2).unwrap().matmul(vit.projection()).unwrap();
        assert_eq!(vit.tokenize(&img).unwrap(), raw);
    }

    #[test]
    fn projection_persists() {
        let dir = tempfile::tempdir().unwrap();
        let vit = VisualTokenizer::new(VisualTokenizerConfig::default()).unwrap();
        let p = dir.path().join("vit.mmt");
        vit.save_projection(&p).unwrap();
        let back = VisualTokenizer::load(vit.config().clone(), &p).unwrap();
        assert_eq!(back.checksum(), vit.checksum());
        let other = VisualTokenizerConfig {
            embed_dim: 9,
            ..Default::default()
        };
        assert!(VisualTokenizer::load(other, &p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn tokenizer_is_linear(s1 in any::<u64>(), s2 in any::<u64>(), a in 0.0f64..0.5, b in 0.0f64..0.5) {
            let vit = VisualTokenizer::new(VisualTokenizerConfig::default()).unwrap();
            let (i1, i2) = (noise(32, 32, 3, s1), noise(32, 32, 3, s2));
            let mix: Vec<f64> = i1.pixels().iter().zip(i2.pixels()).map(|(x, y)| a * x + b * y).collect();
            let mixed = vit.tokenize(&Image::new(32, 32, 3, mix).unwrap()).unwrap();
            let lin = vit.tokenize(&i1).unwrap().scale(a).add(&vit.tokenize(&i2).unwrap().scale(b)).unwrap();
            prop_assert!(mixed.max_abs_diff(&lin) < 1e-10);
        }
    }
}
