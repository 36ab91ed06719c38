//! Exactly invertible latent codec: space-to-depth by a factor `f`, then the
//! affine map `v -> 2v - 1`.
//!
//! Latents are stored in `f64`, where the affine map and its inverse are
//! exact for every `f32` image value, so `decode(encode(x)) == x` bit for bit.

use corredit_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::image::{ImageTensor, CHANNELS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentCodec {
    pub factor: usize,
    pub scale: f64,
    pub offset: f64,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self {
            factor: 2,
            scale: 2.0,
            offset: -1.0,
        }
    }
}

/// A `[C, h, w]` latent, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} latent",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("latent values must be finite".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Stacks latents of equal shape into a `[B, C, h, w]` tensor.
    pub fn stack<T: Scalar>(latents: &[&LatentTensor]) -> Result<Tensor<T>> {
        let first = latents
            .first()
            .ok_or_else(|| Error::InvalidArgument("no latents to stack".into()))?;
        let (c, h, w) = first.shape();
        let mut data = Vec::with_capacity(latents.len() * first.numel());
        for l in latents {
            if l.shape() != (c, h, w) {
                return Err(Error::Shape(format!("{:?} vs {:?}", l.shape(), (c, h, w))));
            }
            data.extend(l.data.iter().map(|&v| T::from_f64_lossy(v)));
        }
        Ok(Tensor::new(&[latents.len(), c, h, w], data)?)
    }

    /// Splits a `[B, C, h, w]` tensor into latents.
    pub fn unstack<T: Scalar>(t: &Tensor<T>) -> Result<Vec<LatentTensor>> {
        let &[b, c, h, w] = t.shape() else {
            return Err(Error::Shape(format!("expected [B, C, h, w], got {:?}", t.shape())));
        };
        let n = c * h * w;
        (0..b)
            .map(|i| {
                LatentTensor::new(
                    c,
                    h,
                    w,
                    t.data()[i * n..(i + 1) * n].iter().map(|v| v.as_f64()).collect(),
                )
            })
            .collect()
    }
}

impl LatentCodec {
    pub fn latent_channels(&self) -> usize {
        CHANNELS * self.factor * self.factor
    }

    /// Latent values of images in `[0, 1]`.
    pub fn latent_range(&self) -> (f64, f64) {
        let (a, b) = (self.offset, self.offset + self.scale);
        (a.min(b), a.max(b))
    }

    /// Latent shape `(channels, h, w)` for an image side length.
    pub fn latent_shape(&self, image_size: usize) -> (usize, usize, usize) {
        (
            self.latent_channels(),
            image_size / self.factor,
            image_size / self.factor,
        )
    }

    /// Latent channel `c*f*f + dy*f + dx` at `(y, x)` holds pixel
    /// `(c, y*f + dy, x*f + dx)`.
    pub fn encode(&self, image: &ImageTensor) -> Result<LatentTensor> {
        let f = self.factor;
        let (h, w) = (image.height(), image.width());
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("image {h}x{w} not divisible by codec factor {f}")));
        }
        let (lh, lw) = (h / f, w / f);
        let lc = self.latent_channels();
        let mut data = vec![0.0; lc * lh * lw];
        for c in 0..CHANNELS {
            for dy in 0..f {
                for dx in 0..f {
                    let ch = (c * f + dy) * f + dx;
                    for y in 0..lh {
                        for x in 0..lw {
                            let v = image.get(c, y * f + dy, x * f + dx) as f64;
                            data[(ch * lh + y) * lw + x] = self.scale * v + self.offset;
                        }
                    }
                }
            }
        }
        LatentTensor::new(lc, lh, lw, data)
    }

    /// Inverse of [`encode`](Self::encode); values outside the image range
    /// are clamped to `[0, 1]`.
    pub fn decode(&self, latent: &LatentTensor) -> Result<ImageTensor> {
        let f = self.factor;
        let (lc, lh, lw) = latent.shape();
        if lc != self.latent_channels() {
            return Err(Error::Shape(format!(
                "latent has {lc} channels, codec expects {}",
                self.latent_channels()
            )));
        }
        let (h, w) = (lh * f, lw * f);
        let mut data = vec![0f32; CHANNELS * h * w];
        for c in 0..CHANNELS {
            for dy in 0..f {
                for dx in 0..f {
                    let ch = (c * f + dy) * f + dx;
                    for y in 0..lh {
                        for x in 0..lw {
                            let z = latent.data[(ch * lh + y) * lw + x];
                            data[(c * h + y * f + dy) * w + x * f + dx] = ((z - self.offset) / self.scale) as f32;
                        }
                    }
                }
            }
        }
        ImageTensor::new(h, w, data)
    }
}
