use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Data(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(size: usize, value: f64) -> Self {
        Self {
            width: size,
            height: size,
            pixels: vec![value; size * size],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear resize to `size × size` with corner alignment: output pixel
    /// `i` samples source coordinate `i · (src − 1) / (size − 1)`, so the
    /// corner pixels map exactly onto each other.
    pub fn resized(&self, size: usize) -> GrayImage {
        if self.width == size && self.height == size {
            return self.clone();
        }
        let scale = |src: usize| {
            if size > 1 {
                (src - 1) as f64 / (size - 1) as f64
            } else {
                0.0
            }
        };
        let (sx, sy) = (scale(self.width), scale(self.height));
        let mut pixels = Vec::with_capacity(size * size);
        for oy in 0..size {
            let fy = oy as f64 * sy;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for ox in 0..size {
                let fx = ox as f64 * sx;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
                let bottom = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
                pixels.push((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
            }
        }
        GrayImage {
            width: size,
            height: size,
            pixels,
        }
    }

    /// Rounds every pixel to the nearest 8-bit level.
    pub fn quantized(mut self) -> GrayImage {
        for p in &mut self.pixels {
            *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        self
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_owned(),
                message: e.to_string(),
            })
    }
}

/// Reads an 8-bit grayscale PNG or binary PGM (other formats are converted
/// to luma) and scales intensities to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    GrayImage::new(
        w as usize,
        h as usize,
        luma.into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
    )
}

/// Stacks equally sized images into an `[N, 1, H, W]` tensor.
pub fn images_to_tensor(images: &[&GrayImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("no images to batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::Data(format!(
                "mixed image sizes {w}x{h} and {}x{}",
                img.width, img.height
            )));
        }
        data.extend_from_slice(&img.pixels);
    }
    Tensor::new(data, &[images.len(), 1, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_keeps_corners_and_bounds() {
        let src = GrayImage::new(2, 2, vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let big = src.resized(5);
        assert_eq!(big.get(0, 0), 0.0);
        assert_eq!(big.get(4, 0), 1.0);
        assert_eq!(big.get(0, 4), 0.5);
        assert_eq!(big.get(4, 4), 0.25);
        assert!((big.get(2, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pgm_upscale_stays_in_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.pgm");
        let mut bytes = b"P5\n16 16\n255\n".to_vec();
        bytes.extend((0..256).map(|i| (i * 37 % 256) as u8));
        std::fs::write(&path, bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.width, img.height), (16, 16));
        let big = img.resized(84);
        assert_eq!(big.pixels.len(), 84 * 84);
        assert!(big.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn png_roundtrip_is_exact_for_quantized_images() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = GrayImage::new(3, 2, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
            .unwrap()
            .quantized();
        img.save_png(&path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }
}
