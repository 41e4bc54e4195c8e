use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ImageEncoder};

use crate::error::{contract, Error, Result};

/// Row-major `H×W×C` image with samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Builds an image, clamping samples into `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(contract(format!(
                "image extents must be positive, got {height}×{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(contract(format!("images have 1 or 3 channels, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(contract(format!(
                "pixel count {} does not match {height}×{width}×{channels}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| v.is_nan()) {
            return Err(contract("NaN pixel"));
        }
        let pixels = pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Copies the `h×w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(contract(format!(
                "crop {h}×{w} at ({top},{left}) exceeds {}×{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut out = Vec::with_capacity(h * w * c);
        for y in top..top + h {
            let start = (y * self.width + left) * c;
            out.extend_from_slice(&self.pixels[start..start + w * c]);
        }
        Image::new(h, w, c, out)
    }

    /// Gray images are replicated across three channels; colour images are
    /// averaged down to one.
    pub fn to_channels(&self, channels: usize) -> Result<Image> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (1, 3) => Image::new(
                self.height,
                self.width,
                3,
                self.pixels.iter().flat_map(|&v| [v, v, v]).collect(),
            ),
            (3, 1) => Image::new(
                self.height,
                self.width,
                1,
                self.pixels.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect(),
            ),
            _ => Err(contract(format!(
                "cannot convert {} channels to {channels}",
                self.channels
            ))),
        }
    }

    /// Mean squared pixel difference.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(contract("image mse between differently sized images"));
        }
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.pixels.len() as f64)
    }

    /// Reads a binary or ASCII PGM/PPM file.
    pub fn load_pnm(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .with_guessed_format()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .decode()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        Self::from_dynamic(img)
    }

    fn from_dynamic(img: DynamicImage) -> Result<Image> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let rgb = img.to_rgb32f();
            Image::new(h, w, 3, rgb.into_raw().into_iter().map(f64::from).collect())
        } else {
            let gray = img.to_luma32f();
            Image::new(h, w, 1, gray.into_raw().into_iter().map(f64::from).collect())
        }
    }

    /// 8-bit samples, rounded to nearest.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    /// Writes binary PPM (3 channels) or PGM (1 channel).
    pub fn save_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (subtype, color) = if self.channels == 3 {
            (
                PnmSubtype::Pixmap(SampleEncoding::Binary),
                image::ExtendedColorType::Rgb8,
            )
        } else {
            (
                PnmSubtype::Graymap(SampleEncoding::Binary),
                image::ExtendedColorType::L8,
            )
        };
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        PnmEncoder::new(file)
            .with_subtype(subtype)
            .write_image(&self.to_bytes(), self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_and_validates() {
        let img = Image::new(1, 2, 1, vec![-0.5, 1.5]).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
        assert!(Image::new(0, 2, 1, vec![]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(Image::new(2, 2, 3, vec![0.0; 11]).is_err());
    }

    #[test]
    fn pnm_round_trip_at_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<f64> = (0..4 * 5 * 3).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = Image::new(4, 5, 3, px).unwrap();
        let p = dir.path().join("a.ppm");
        img.save_pnm(&p).unwrap();
        let back = Image::load_pnm(&p).unwrap();
        assert_eq!(back.to_bytes(), img.to_bytes());
        assert_eq!(std::fs::read(&p).unwrap()[..2], *b"P6");

        let gray = Image::new(3, 2, 1, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let p = dir.path().join("g.pgm");
        gray.save_pnm(&p).unwrap();
        let back = Image::load_pnm(&p).unwrap();
        assert_eq!(back.channels(), 1);
        assert_eq!(back.to_bytes(), gray.to_bytes());
        assert_eq!(std::fs::read(&p).unwrap()[..2], *b"P5");
    }

    #[test]
    fn reads_ascii_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        std::fs::write(&p, "P2\n2 1\n255\n0 255\n").unwrap();
        let img = Image::load_pnm(&p).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn missing_file_is_an_image_error() {
        assert!(matches!(Image::load_pnm("/nonexistent/x.ppm"), Err(Error::Image(_))));
    }
}
