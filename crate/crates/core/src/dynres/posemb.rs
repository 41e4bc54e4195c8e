use rand::Rng;

use crate::error::{contract, Result};
use crate::kernel::Tensor;

/// The four learned directions of the extrapolatable 2D position embedding:
/// `p = x_c·left + (1−x_c)·right + y_c·top + (1−y_c)·bottom`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionEmbeddingParams {
    pub left: Tensor,
    pub right: Tensor,
    pub top: Tensor,
    pub bottom: Tensor,
}

impl PositionEmbeddingParams {
    pub fn new(left: Tensor, right: Tensor, top: Tensor, bottom: Tensor) -> Result<Self> {
        let shape = left.shape().to_vec();
        if shape.len() != 1 || [&right, &top, &bottom].iter().any(|t| t.shape() != shape) {
            return Err(contract("position embedding vectors must share one 1-D shape"));
        }
        Ok(Self {
            left,
            right,
            top,
            bottom,
        })
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Self {
        let mut v = || Tensor::randn(&[dim], std, rng);
        Self {
            left: v(),
            right: v(),
            top: v(),
            bottom: v(),
        }
    }

    pub fn dim(&self) -> usize {
        self.left.numel()
    }

    /// Coefficients on `(left, right, top, bottom)` for a centre in the open
    /// unit square.
    pub fn weights(x_c: f64, y_c: f64) -> Result<[f64; 4]> {
        let inside = |v: f64| v > 0.0 && v < 1.0;
        if !inside(x_c) || !inside(y_c) {
            return Err(contract(format!(
                "position centre ({x_c}, {y_c}) must lie strictly inside (0,1)²"
            )));
        }
        Ok([x_c, 1.0 - x_c, y_c, 1.0 - y_c])
    }

    pub fn embed(&self, x_c: f64, y_c: f64) -> Result<Tensor> {
        let w = Self::weights(x_c, y_c)?;
        let data = (0..self.dim())
            .map(|i| {
                w[0] * self.left.data()[i]
                    + w[1] * self.right.data()[i]
                    + w[2] * self.top.data()[i]
                    + w[3] * self.bottom.data()[i]
            })
            .collect();
        Ok(Tensor::vector(data))
    }
}
