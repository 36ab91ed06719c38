//! Base transforms applied around each mixing round: random resized crop,
//! colour jitter, grayscale, gaussian blur and horizontal flip.

use std::f32::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{ImageTensor, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseTransform {
    RandomCropResize,
    ColorJitter,
    Grayscale,
    GaussianBlur,
    HorizontalFlip,
}

impl BaseTransform {
    pub const ALL: [BaseTransform; 5] = [
        BaseTransform::RandomCropResize,
        BaseTransform::ColorJitter,
        BaseTransform::Grayscale,
        BaseTransform::GaussianBlur,
        BaseTransform::HorizontalFlip,
    ];

    /// Geometric transforms move pixels; photometric ones only change values.
    pub fn is_geometric(self) -> bool {
        matches!(self, BaseTransform::RandomCropResize | BaseTransform::HorizontalFlip)
    }
}

/// Probabilities and ranges for the base transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTransformParams {
    pub p_crop: f64,
    pub p_jitter: f64,
    pub p_grayscale: f64,
    pub p_blur: f64,
    pub p_flip: f64,
    /// Crop area as a fraction of the image.
    pub crop_scale: [f32; 2],
    /// Crop aspect ratio range (width / height).
    pub crop_ratio: [f32; 2],
    pub jitter_brightness: f32,
    pub jitter_contrast: f32,
    pub jitter_saturation: f32,
    pub jitter_hue: f32,
    /// Blur standard deviation in pixels.
    pub blur_sigma: [f32; 2],
}

impl Default for BaseTransformParams {
    fn default() -> Self {
        Self {
            p_crop: 1.0,
            p_jitter: 0.8,
            p_grayscale: 0.2,
            p_blur: 0.5,
            p_flip: 0.5,
            crop_scale: [0.2, 1.0],
            crop_ratio: [0.75, 4.0 / 3.0],
            jitter_brightness: 0.4,
            jitter_contrast: 0.4,
            jitter_saturation: 0.4,
            jitter_hue: 0.1,
            blur_sigma: [0.1, 1.5],
        }
    }
}

impl BaseTransformParams {
    pub fn probability(&self, t: BaseTransform) -> f64 {
        match t {
            BaseTransform::RandomCropResize => self.p_crop,
            BaseTransform::ColorJitter => self.p_jitter,
            BaseTransform::Grayscale => self.p_grayscale,
            BaseTransform::GaussianBlur => self.p_blur,
            BaseTransform::HorizontalFlip => self.p_flip,
        }
    }
}

/// Applies each listed transform in order, each with its configured
/// probability. Every transform consumes the same number of draws whether or
/// not it fires, so the stream stays aligned across recipes.
pub fn apply_base_transforms<R: Rng + ?Sized>(
    image: &ImageTensor,
    transforms: &[BaseTransform],
    params: &BaseTransformParams,
    rng: &mut R,
) -> ImageTensor {
    let mut out = image.clone();
    for &t in transforms {
        let fire = rng.random::<f64>() < params.probability(t);
        let draws: [f32; 4] = [rng.random(), rng.random(), rng.random(), rng.random()];
        if !fire {
            continue;
        }
        out = match t {
            BaseTransform::HorizontalFlip => horizontal_flip(&out),
            BaseTransform::Grayscale => grayscale(&out),
            BaseTransform::GaussianBlur => {
                let [lo, hi] = params.blur_sigma;
                gaussian_blur(&out, lo + (hi - lo) * draws[0])
            }
            BaseTransform::ColorJitter => {
                let f = |spread: f32, u: f32| 1.0 - spread + 2.0 * spread * u;
                color_jitter(
                    &out,
                    f(params.jitter_brightness, draws[0]),
                    f(params.jitter_contrast, draws[1]),
                    f(params.jitter_saturation, draws[2]),
                    params.jitter_hue * (2.0 * draws[3] - 1.0),
                )
            }
            BaseTransform::RandomCropResize => random_crop_resize(&out, params, draws),
        };
    }
    out
}

pub fn horizontal_flip(image: &ImageTensor) -> ImageTensor {
    let w = image.width();
    ImageTensor::from_fn(image.height(), w, |c, y, x| image.get(c, y, w - 1 - x))
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn grayscale(image: &ImageTensor) -> ImageTensor {
    ImageTensor::from_fn(image.height(), image.width(), |_, y, x| {
        luma(image.get(0, y, x), image.get(1, y, x), image.get(2, y, x))
    })
}

/// Brightness, contrast and saturation factors (1 = identity) and a hue
/// rotation in turns (0 = identity), applied in that order.
pub fn color_jitter(image: &ImageTensor, brightness: f32, contrast: f32, saturation: f32, hue: f32) -> ImageTensor {
    let n = image.height() * image.width();
    let mut d: Vec<f32> = image.data().iter().map(|&v| (v * brightness).clamp(0.0, 1.0)).collect();
    let mean_luma = (0..n).map(|i| luma(d[i], d[n + i], d[2 * n + i])).sum::<f32>() / n as f32;
    for v in &mut d {
        *v = ((*v - mean_luma) * contrast + mean_luma).clamp(0.0, 1.0);
    }
    for i in 0..n {
        let g = luma(d[i], d[n + i], d[2 * n + i]);
        for c in 0..CHANNELS {
            d[c * n + i] = (g + (d[c * n + i] - g) * saturation).clamp(0.0, 1.0);
        }
    }
    if hue != 0.0 {
        // Rotate chroma in YIQ space.
        let (s, co) = (2.0 * PI * hue).sin_cos();
        for i in 0..n {
            let (r, g, b) = (d[i], d[n + i], d[2 * n + i]);
            let y = luma(r, g, b);
            let ci = 0.596 * r - 0.274 * g - 0.322 * b;
            let cq = 0.211 * r - 0.523 * g + 0.312 * b;
            let (i2, q2) = (ci * co - cq * s, ci * s + cq * co);
            d[i] = y + 0.956 * i2 + 0.621 * q2;
            d[n + i] = y - 0.272 * i2 - 0.647 * q2;
            d[2 * n + i] = y - 1.106 * i2 + 1.703 * q2;
        }
    }
    image.with_data(d).expect("shape preserved")
}

fn convolve_separable(image: &ImageTensor, kernel: &[f32]) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f32; CHANNELS * h * w];
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                tmp[(c * h + y) * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * image.get(c, y, clamp(x as isize + k as isize - r, w)))
                    .sum();
            }
        }
    }
    let mut out = vec![0f32; CHANNELS * h * w];
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                out[(c * h + y) * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * tmp[(c * h + clamp(y as isize + k as isize - r, h)) * w + x])
                    .sum();
            }
        }
    }
    image.with_data(out).expect("shape preserved")
}

/// Gaussian blur with edge clamping; `sigma <= 0` is the identity.
pub fn gaussian_blur(image: &ImageTensor, sigma: f32) -> ImageTensor {
    if sigma <= 0.0 {
        return image.clone();
    }
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    convolve_separable(image, &k)
}

/// Box blur with a fractional radius: full weight inside `floor(radius)`,
/// fractional weight on the next tap. `radius <= 0` is the identity.
pub fn box_blur(image: &ImageTensor, radius: f32) -> ImageTensor {
    if radius <= 0.0 {
        return image.clone();
    }
    let full = radius.floor() as isize;
    let frac = radius - full as f32;
    let r = if frac > 0.0 { full + 1 } else { full };
    let mut k: Vec<f32> = (-r..=r).map(|i| if i.abs() <= full { 1.0 } else { frac }).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    convolve_separable(image, &k)
}

/// Bilinear sample of channel `c` at continuous pixel-centre coordinates.
pub(crate) fn sample_bilinear(image: &ImageTensor, c: usize, y: f32, x: f32) -> f32 {
    let (h, w) = (image.height(), image.width());
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = image.get(c, y0, x0) * (1.0 - fx) + image.get(c, y0, x1) * fx;
    let bottom = image.get(c, y1, x0) * (1.0 - fx) + image.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples the box `(top, left, height, width)` of `image` to `out_h x out_w`.
pub(crate) fn crop_resize(image: &ImageTensor, bx: [f32; 4], out_h: usize, out_w: usize) -> ImageTensor {
    let [top, left, bh, bw] = bx;
    let (sy, sx) = (bh / out_h as f32, bw / out_w as f32);
    ImageTensor::from_fn(out_h, out_w, |c, y, x| {
        let src_y = top + (y as f32 + 0.5) * sy - 0.5;
        let src_x = left + (x as f32 + 0.5) * sx - 0.5;
        sample_bilinear(image, c, src_y, src_x)
    })
}

pub fn resize_bilinear(image: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    if image.height() == out_h && image.width() == out_w {
        return image.clone();
    }
    crop_resize(
        image,
        [0.0, 0.0, image.height() as f32, image.width() as f32],
        out_h,
        out_w,
    )
}

fn random_crop_resize(image: &ImageTensor, params: &BaseTransformParams, u: [f32; 4]) -> ImageTensor {
    let (h, w) = (image.height() as f32, image.width() as f32);
    let [s_lo, s_hi] = params.crop_scale;
    let [r_lo, r_hi] = params.crop_ratio;
    let scale = (s_lo + (s_hi - s_lo) * u[0]).clamp(1e-3, 1.0);
    let ratio = (r_lo.ln() + (r_hi.ln() - r_lo.ln()) * u[1]).exp();
    let area = scale * h * w;
    let bw = (area * ratio).sqrt().min(w);
    let bh = (area / ratio).sqrt().min(h);
    let top = (h - bh) * u[2];
    let left = (w - bw) * u[3];
    crop_resize(image, [top, left, bh, bw], image.height(), image.width())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn sample_image() -> ImageTensor {
        ImageTensor::from_fn(16, 16, |c, y, x| ((c * 5 + y * 3 + x * 7) % 17) as f32 / 16.0)
    }

    #[test]
    fn empty_list_is_identity() {
        let img = sample_image();
        let mut rng = seed::stream(1, &[]);
        let out = apply_base_transforms(&img, &[], &BaseTransformParams::default(), &mut rng);
        assert_eq!(out, img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = sample_image();
        assert_ne!(horizontal_flip(&img), img);
        assert_eq!(horizontal_flip(&horizontal_flip(&img)), img);
    }

    #[test]
    fn grayscale_channels_are_equal() {
        let g = grayscale(&sample_image());
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(g.get(0, y, x), g.get(1, y, x));
                assert_eq!(g.get(1, y, x), g.get(2, y, x));
            }
        }
    }

    #[test]
    fn degenerate_parameters_are_identity() {
        let img = sample_image();
        assert_eq!(gaussian_blur(&img, 0.0), img);
        assert_eq!(box_blur(&img, 0.0), img);
        assert!(color_jitter(&img, 1.0, 1.0, 1.0, 0.0).mse(&img).unwrap() < 1e-12);
        let params = BaseTransformParams {
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            ..Default::default()
        };
        let crop = random_crop_resize(&img, &params, [0.3, 0.6, 0.2, 0.9]);
        assert!(crop.mse(&img).unwrap() < 1e-12);
    }

    #[test]
    fn blur_preserves_constants_and_shape() {
        let c = ImageTensor::filled(9, 7, 0.4);
        let b = gaussian_blur(&c, 1.3);
        assert_eq!(b.shape(), c.shape());
        assert!(b.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        let bb = box_blur(&c, 1.5);
        assert!(bb.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn probability_zero_never_fires() {
        let img = sample_image();
        let params = BaseTransformParams {
            p_crop: 0.0,
            p_jitter: 0.0,
            p_grayscale: 0.0,
            p_blur: 0.0,
            p_flip: 0.0,
            ..Default::default()
        };
        let mut rng = seed::stream(3, &[]);
        for _ in 0..20 {
            assert_eq!(apply_base_transforms(&img, &BaseTransform::ALL, &params, &mut rng), img);
        }
    }
}
