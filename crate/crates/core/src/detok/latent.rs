use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynres::Image;
use crate::error::{contract, Result};
use crate::kernel::Tensor;

/// Fixed linear stand-in for a VAE: `factor×factor` block means followed by
/// a seeded map with orthonormal columns from image channels to latent
/// channels. Synthesis applies the transpose and repeats each latent pixel
/// over its block, so `synthesis ∘ analysis` is the block-mean low-pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodec {
    factor: usize,
    channels: usize,
    latent_channels: usize,
    /// `[C × channels]`, `mapᵀ·map = I`.
    map: Tensor,
}

impl LatentCodec {
    pub fn new(factor: usize, channels: usize, latent_channels: usize, seed: u64) -> Result<Self> {
        if factor == 0 || channels == 0 {
            return Err(contract("latent codec needs a positive factor and channel count"));
        }
        if latent_channels < channels {
            return Err(contract(format!(
                "latent channels {latent_channels} cannot hold {channels} image channels"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::randn(&[latent_channels, channels], 1.0, &mut rng);
        // Gram-Schmidt over columns.
        let (c, k) = (latent_channels, channels);
        let mut cols: Vec<Vec<f64>> = (0..k).map(|j| (0..c).map(|i| raw.at2(i, j)).collect()).collect();
        for j in 0..k {
            for p in 0..j {
                let dot: f64 = (0..c).map(|i| cols[j][i] * cols[p][i]).sum();
                for i in 0..c {
                    cols[j][i] -= dot * cols[p][i];
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                return Err(contract("degenerate latent codec draw"));
            }
            cols[j].iter_mut().for_each(|v| *v /= norm);
        }
        let data = (0..c)
            .flat_map(|i| cols.iter().map(move |col| col[i]))
            .collect::<Vec<f64>>();
        Ok(Self {
            factor,
            channels,
            latent_channels,
            map: Tensor::new(vec![c, k], data)?,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn map(&self) -> &Tensor {
        &self.map
    }

    fn check(&self, img: &Image) -> Result<()> {
        if img.channels() != self.channels || img.height() % self.factor != 0 || img.width() % self.factor != 0 {
            return Err(contract(format!(
                "latent codec expects {} channels and sides divisible by {}, got {}×{}×{}",
                self.channels,
                self.factor,
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        Ok(())
    }

    /// `img → [C × h/f × w/f]`.
    pub fn encode(&self, img: &Image) -> Result<Tensor> {
        self.check(img)?;
        let f = self.factor;
        let (h, w) = (img.height() / f, img.width() / f);
        let mut out = vec![0.0; self.latent_channels * h * w];
        let area = (f * f) as f64;
        for by in 0..h {
            for bx in 0..w {
                let mut mean = vec![0.0; self.channels];
                for y in by * f..(by + 1) * f {
                    for x in bx * f..(bx + 1) * f {
                        for (ch, m) in mean.iter_mut().enumerate() {
                            *m += img.get(y, x, ch);
                        }
                    }
                }
                for c in 0..self.latent_channels {
                    let v: f64 = (0..self.channels).map(|ch| self.map.at2(c, ch) * mean[ch] / area).sum();
                    out[(c * h + by) * w + bx] = v;
                }
            }
        }
        Tensor::new(vec![self.latent_channels, h, w], out)
    }

    /// `[C × h × w] → image`, clamped to `[0, 1]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Image> {
        let &[c, h, w] = latent.shape() else {
            return Err(contract(format!("latent must be rank 3, got {:?}", latent.shape())));
        };
        if c != self.latent_channels {
            return Err(contract(format!(
                "latent has {c} channels, expected {}",
                self.latent_channels
            )));
        }
        let f = self.factor;
        let mut px = vec![0.0; h * f * w * f * self.channels];
        for by in 0..h {
            for bx in 0..w {
                for ch in 0..self.channels {
                    let v: f64 = (0..c)
                        .map(|k| self.map.at2(k, ch) * latent.data()[(k * h + by) * w + bx])
                        .sum();
                    for y in by * f..(by + 1) * f {
                        for x in bx * f..(bx + 1) * f {
                            px[(y * w * f + x) * self.channels + ch] = v;
                        }
                    }
                }
            }
        }
        Image::new(h * f, w * f, self.channels, px)
    }
}

/// `[C × h × w] → [hw × C]`, one row per latent pixel.
pub fn to_tokens(latent: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = latent.shape() else {
        return Err(contract(format!("latent must be rank 3, got {:?}", latent.shape())));
    };
    latent.reshape(&[c, h * w])?.transpose2()
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let c = tokens.last_dim();
    tokens.transpose2()?.reshape(&[c, h, w])
}

/// Noise levels `a_t`; `x_t = √(1 − a_t)·x₀ + √a_t·ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    levels: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(contract("noise schedule needs at least one step"));
        }
        if levels.iter().any(|&a| !(a > 0.0 && a < 1.0)) || levels.windows(2).any(|p| p[1] <= p[0]) {
            return Err(contract(format!(
                "noise levels must be strictly increasing in (0, 1), got {levels:?}"
            )));
        }
        Ok(Self { levels })
    }

    /// `steps` levels evenly spaced from 0.05 to 0.95.
    pub fn linear(steps: usize) -> Result<Self> {
        let levels = match steps {
            0 => vec![],
            1 => vec![0.5],
            n => (0..n).map(|i| 0.05 + 0.9 * i as f64 / (n - 1) as f64).collect(),
        };
        Self::new(levels)
    }

    pub fn steps(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, t: usize) -> f64 {
        self.levels[t]
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn noisy(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        let a = self.levels[t];
        x0.scale((1.0 - a).sqrt()).add(&eps.scale(a.sqrt()))
    }
}
