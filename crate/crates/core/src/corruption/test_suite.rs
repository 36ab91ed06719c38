//! Severity-graded test-time corruptions. This registry is separate from the
//! crafting ops: nothing here is used to build training pairs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::transforms::{box_blur, sample_bilinear};
use crate::image::{ImageTensor, CHANNELS};
use crate::seed::{self, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    BoxBlur,
    MotionBlur,
    Haze,
    Contrast,
    Pixelate,
    Quantize,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 9] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Haze,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::Quantize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Haze => "haze",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Quantize => "quantize",
        }
    }

    pub fn is_noise(self) -> bool {
        matches!(
            self,
            CorruptionKind::GaussianNoise | CorruptionKind::ShotNoise | CorruptionKind::ImpulseNoise
        )
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestCorruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl TestCorruption {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity {severity} outside 1..=5")));
        }
        Ok(Self { kind, severity })
    }

    fn index(&self) -> usize {
        self.severity as usize - 1
    }
}

/// Closed-form per-severity parameters. Lengths are in pixels at a 64-pixel
/// reference width and scale linearly with the actual image width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeverityTable {
    pub gaussian_sigma: [f32; 5],
    /// Photon count per unit intensity; lower is noisier.
    pub shot_lambda: [f32; 5],
    pub impulse_amount: [f32; 5],
    pub box_radius: [f32; 5],
    /// Half-length of the motion streak.
    pub motion_half_length: [f32; 5],
    pub haze_amount: [f32; 5],
    pub contrast_gamma: [f32; 5],
    pub pixelate_block: [f32; 5],
    pub quantize_levels: [u32; 5],
    pub reference_width: usize,
}

impl Default for SeverityTable {
    fn default() -> Self {
        Self {
            gaussian_sigma: [0.08, 0.12, 0.18, 0.26, 0.38],
            shot_lambda: [60.0, 25.0, 12.0, 5.0, 3.0],
            impulse_amount: [0.03, 0.06, 0.09, 0.17, 0.27],
            box_radius: [0.6, 1.0, 1.5, 2.0, 3.0],
            motion_half_length: [1.0, 1.5, 2.5, 3.5, 5.0],
            haze_amount: [0.25, 0.35, 0.45, 0.55, 0.65],
            contrast_gamma: [0.4, 0.3, 0.2, 0.1, 0.05],
            pixelate_block: [2.0, 3.0, 4.0, 6.0, 8.0],
            quantize_levels: [24, 16, 8, 5, 3],
            reference_width: 64,
        }
    }
}

impl SeverityTable {
    fn length(&self, v: f32, width: usize) -> f32 {
        v * width as f32 / self.reference_width as f32
    }

    /// Pixelation block side for a given image width (at least 2).
    pub fn block_size(&self, severity: u8, width: usize) -> usize {
        let idx = severity.clamp(1, 5) as usize - 1;
        (self.length(self.pixelate_block[idx], width).round() as usize).max(2)
    }
}

/// Applies one test corruption. Pure in `(image, corruption, seed)`.
pub fn apply_test_corruption(
    image: &ImageTensor,
    corruption: TestCorruption,
    table: &SeverityTable,
    seed: u64,
) -> Result<ImageTensor> {
    let TestCorruption { kind, severity } = TestCorruption::new(corruption.kind, corruption.severity)?;
    let i = corruption.index();
    let mut rng = seed::stream(seed, &[tag::TEST_CORRUPTION, kind as u64, severity as u64]);
    let w = image.width();
    let out = match kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0f32, table.gaussian_sigma[i]).expect("finite sigma");
            image.map_with(|v| v + normal.sample(&mut rng))
        }
        CorruptionKind::ShotNoise => {
            let lambda = table.shot_lambda[i];
            image.map_with(|v| {
                let rate = (v * lambda) as f64;
                if rate <= 0.0 {
                    0.0
                } else {
                    Poisson::new(rate).expect("positive rate").sample(&mut rng) as f32 / lambda
                }
            })
        }
        CorruptionKind::ImpulseNoise => {
            let p = table.impulse_amount[i];
            image.map_with(|v| {
                let (u, salt): (f32, bool) = (rng.random(), rng.random());
                if u < p {
                    if salt {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
        }
        CorruptionKind::BoxBlur => box_blur(image, table.length(table.box_radius[i], w)),
        CorruptionKind::MotionBlur => {
            let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
            motion_blur(image, table.length(table.motion_half_length[i], w), angle)
        }
        CorruptionKind::Haze => {
            let fog = fog_field(image.height(), w, &mut rng);
            let a = table.haze_amount[i];
            let data = image
                .data()
                .iter()
                .enumerate()
                .map(|(j, &v)| (1.0 - a) * v + a * fog[j % fog.len()])
                .collect();
            image.with_data(data)?
        }
        CorruptionKind::Contrast => contrast(image, table.contrast_gamma[i]),
        CorruptionKind::Pixelate => pixelate(image, table.block_size(severity, w)),
        CorruptionKind::Quantize => {
            let levels = table.quantize_levels[i].max(2) as f32 - 1.0;
            image.map(|v| (v * levels).round() / levels)
        }
    };
    Ok(out)
}

/// `clamp(mean + gamma * (x - mean))` with per-channel means.
pub fn contrast(image: &ImageTensor, gamma: f32) -> ImageTensor {
    let means = image.channel_means();
    let n = image.height() * image.width();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let m = means[j / n];
            m + gamma * (v - m)
        })
        .collect();
    image.with_data(data).expect("shape preserved")
}

/// Replaces each `block x block` tile (partial tiles at the edges included)
/// by its mean.
pub fn pixelate(image: &ImageTensor, block: usize) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let block = block.max(1);
    let mut data = image.data().to_vec();
    for c in 0..CHANNELS {
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (y1, x1) = ((by + block).min(h), (bx + block).min(w));
                let mut s = 0.0f64;
                for y in by..y1 {
                    for x in bx..x1 {
                        s += image.get(c, y, x) as f64;
                    }
                }
                let mean = (s / ((y1 - by) * (x1 - bx)) as f64) as f32;
                for y in by..y1 {
                    for x in bx..x1 {
                        data[(c * h + y) * w + x] = mean;
                    }
                }
            }
        }
    }
    image.with_data(data).expect("shape preserved")
}

/// Averages bilinear samples along a line of half-length `half_len` at
/// `angle` radians through each pixel.
pub fn motion_blur(image: &ImageTensor, half_len: f32, angle: f32) -> ImageTensor {
    if half_len <= 0.0 {
        return image.clone();
    }
    let taps = 2 * (2.0 * half_len).ceil() as usize + 1;
    let (dy, dx) = angle.sin_cos();
    let offsets: Vec<f32> = (0..taps)
        .map(|k| -half_len + 2.0 * half_len * k as f32 / (taps - 1) as f32)
        .collect();
    ImageTensor::from_fn(image.height(), image.width(), |c, y, x| {
        offsets
            .iter()
            .map(|&d| sample_bilinear(image, c, y as f32 + d * dy, x as f32 + d * dx))
            .sum::<f32>()
            / taps as f32
    })
}

/// A smooth, bright, slightly tinted fog layer (`[3, H, W]`).
fn fog_field<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Vec<f32> {
    let n = h * w;
    let waves: Vec<(f32, f32, f32)> = (0..4)
        .map(|_| {
            let f = rng.random_range(0.5f32..2.0);
            let dir = rng.random_range(0.0..2.0 * std::f32::consts::PI);
            let phase = rng.random_range(0.0..2.0 * std::f32::consts::PI);
            (f * dir.cos(), f * dir.sin(), phase)
        })
        .collect();
    let tint: [f32; 3] = [
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.03..0.03),
        rng.random_range(0.0..0.05),
    ];
    let mut out = vec![0f32; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
            let s: f32 = waves
                .iter()
                .map(|&(kx, ky, ph)| (2.0 * std::f32::consts::PI * (kx * u + ky * v) + ph).sin())
                .sum::<f32>()
                / waves.len() as f32;
            for c in 0..3 {
                out[c * n + y * w + x] = (0.85 + 0.1 * s + tint[c]).clamp(0.0, 1.0);
            }
        }
    }
    out
}
