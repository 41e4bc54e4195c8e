//! Dynamic-resolution image encoding.
//!
//! An arbitrary `H×W` image is upsampled onto the smallest grid of
//! `H_t×W_t` tiles that covers it, sliced into those tiles, and accompanied
//! by one global tile (the whole image resized to `H_t×W_t`). Each tile is
//! tagged with its normalised centre so a learned four-vector interpolation
//! can encode where it sits.

mod image;
mod posemb;

use serde::Serialize;

pub use self::image::Image;
pub use posemb::PositionEmbeddingParams;

use crate::error::{contract, Result};

/// Centre assigned to the global tile.
pub const GLOBAL_CENTER: (f64, f64) = (0.5, 0.5);

/// Smallest `(N_h, N_w)` with `H ≤ N_h·H_t` and `W ≤ N_w·W_t`.
///
/// The two constraints are independent, so the componentwise ceilings
/// minimise the product.
pub fn select_grid(height: usize, width: usize, tile_h: usize, tile_w: usize) -> Result<(usize, usize)> {
    if height == 0 || width == 0 || tile_h == 0 || tile_w == 0 {
        return Err(contract(format!(
            "grid selection needs positive sizes, got image {height}×{width}, tile {tile_h}×{tile_w}"
        )));
    }
    Ok((height.div_ceil(tile_h), width.div_ceil(tile_w)))
}

/// One tile of a [`GridPlan`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    /// `(top, left, height, width)` on the upsampled canvas.
    pub rect: (usize, usize, usize, usize),
    /// Normalised `(x_c, y_c)`, strictly inside the unit square.
    pub center: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridPlan {
    pub n_h: usize,
    pub n_w: usize,
    pub tile: (usize, usize),
    pub upsampled: (usize, usize),
    /// Row-major.
    pub cells: Vec<Cell>,
}

impl GridPlan {
    pub fn new(height: usize, width: usize, tile_h: usize, tile_w: usize) -> Result<Self> {
        let (n_h, n_w) = select_grid(height, width, tile_h, tile_w)?;
        let mut cells = Vec::with_capacity(n_h * n_w);
        for row in 0..n_h {
            for col in 0..n_w {
                cells.push(Cell {
                    row,
                    col,
                    rect: (row * tile_h, col * tile_w, tile_h, tile_w),
                    center: cell_center(row, col, n_h, n_w),
                });
            }
        }
        Ok(Self {
            n_h,
            n_w,
            tile: (tile_h, tile_w),
            upsampled: (n_h * tile_h, n_w * tile_w),
            cells,
        })
    }

    pub fn num_tiles(&self) -> usize {
        self.cells.len()
    }
}

/// `((col + 0.5) / N_w, (row + 0.5) / N_h)`
pub fn cell_center(row: usize, col: usize, n_h: usize, n_w: usize) -> (f64, f64) {
    ((col as f64 + 0.5) / n_w as f64, (row as f64 + 0.5) / n_h as f64)
}

/// Bilinear resampling with corner-aligned sample positions: output pixel
/// `i` reads source coordinate `i·(H−1)/(H'−1)`. A single output row or
/// column samples the source centre.
pub fn upsample(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(contract(format!("resize target must be positive, got {out_h}×{out_w}")));
    }
    if (out_h, out_w) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let c = img.channels();
    let ys = sample_positions(img.height(), out_h);
    let xs = sample_positions(img.width(), out_w);
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bottom = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Image::new(out_h, out_w, c, out)
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 {
                (src - 1) as f64 / 2.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Result of [`partition`].
#[derive(Clone, Debug)]
pub struct Partition {
    pub plan: GridPlan,
    pub upsampled: Image,
    /// Row-major, aligned with `plan.cells`.
    pub sub_images: Vec<Image>,
    pub global_image: Image,
}

/// Upsamples onto the minimal tile grid, slices it, and resizes the original
/// image to one global tile.
pub fn partition(img: &Image, tile_h: usize, tile_w: usize) -> Result<Partition> {
    let plan = GridPlan::new(img.height(), img.width(), tile_h, tile_w)?;
    let upsampled = upsample(img, plan.upsampled.0, plan.upsampled.1)?;
    let sub_images = plan
        .cells
        .iter()
        .map(|c| upsampled.crop(c.rect.0, c.rect.1, c.rect.2, c.rect.3))
        .collect::<Result<Vec<_>>>()?;
    let global_image = upsample(img, tile_h, tile_w)?;
    Ok(Partition {
        plan,
        upsampled,
        sub_images,
        global_image,
    })
}
