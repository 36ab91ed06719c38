//! RGB images with values in `[0, 1]`, stored channel-major (`[3, H, W]`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CHANNELS: usize = 3;

/// Values below this are flushed to zero on construction. It sits far below
/// 8-bit resolution and keeps the latent codec's affine map exact.
pub const FLUSH_BELOW: f32 = 1.0 / 16_777_216.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

#[inline]
fn sanitize(v: f32) -> f32 {
    if !v.is_finite() {
        return if v == f32::INFINITY { 1.0 } else { 0.0 };
    }
    let v = v.clamp(0.0, 1.0);
    if v < FLUSH_BELOW {
        0.0
    } else {
        v
    }
}

impl ImageTensor {
    /// Builds an image from channel-major data, clamping to `[0, 1]`
    /// (NaN and -inf map to 0, +inf to 1).
    pub fn new(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        for v in &mut data {
            *v = sanitize(*v);
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![sanitize(value); CHANNELS * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(sanitize(f(c, y, x)));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, CHANNELS)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Applies `f` to every value and re-clamps.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| sanitize(f(v))).collect(),
        }
    }

    /// Like [`map`](Self::map) for stateful closures (noise draws), visiting
    /// values in storage order.
    pub fn map_with(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| sanitize(f(v))).collect(),
        }
    }

    /// Rebuilds from raw values of the same shape, re-clamping.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.height, self.width, data)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn channel_means(&self) -> [f32; CHANNELS] {
        let n = (self.height * self.width) as f64;
        let mut out = [0.0; CHANNELS];
        for (c, m) in out.iter_mut().enumerate() {
            *m = (self.plane(c).iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        }
        out
    }

    /// Mean squared difference over all values.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(s / self.data.len() as f64)
    }

    /// Fraction of pixels (any channel) differing by more than `tol`.
    pub fn fraction_differing(&self, other: &Self, tol: f32) -> Result<f64> {
        self.check_same_shape(other)?;
        let n = self.height * self.width;
        let mut count = 0usize;
        for i in 0..n {
            if (0..CHANNELS).any(|c| (self.data[c * n + i] - other.data[c * n + i]).abs() > tol) {
                count += 1;
            }
        }
        Ok(count as f64 / n as f64)
    }

    /// Rounds to the 8-bit grid (what a PNG round trip produces).
    pub fn quantized(&self) -> Self {
        self.map(|v| (v * 255.0).round() / 255.0)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let n = self.height * self.width;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb([0, 1, 2].map(|c| (self.data[c * n + i] * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// PNG bytes of the 8-bit rendering.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_clamps_and_scrubs_non_finite() {
        let img = ImageTensor::new(1, 1, vec![-0.5, f32::NAN, 7.0]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.0, 1.0]);
        assert!(ImageTensor::new(2, 2, vec![0.0; 5]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_the_8bit_grid() {
        let img = ImageTensor::from_fn(4, 5, |c, y, x| ((c * 31 + y * 7 + x * 13) % 256) as f32 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(ImageTensor::load_png(&p).unwrap(), img);
    }
}
