//! Procedural mixing pictures: iterated-function-system fractals and
//! band-limited noise fields. Both are pure functions of `(kind, seed, size)`.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::seed::{self, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetKind {
    FractalLike,
    FeatureVizLike,
}

impl AssetKind {
    pub const ALL: [AssetKind; 2] = [AssetKind::FractalLike, AssetKind::FeatureVizLike];

    pub fn as_str(self) -> &'static str {
        match self {
            AssetKind::FractalLike => "fractal_like",
            AssetKind::FeatureVizLike => "feature_viz_like",
        }
    }
}

impl FromStr for AssetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fractal_like" => Ok(AssetKind::FractalLike),
            "feature_viz_like" => Ok(AssetKind::FeatureVizLike),
            other => Err(Error::Config(format!("unknown mixing asset kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingAsset {
    pub image: ImageTensor,
    pub kind: AssetKind,
    pub seed: u64,
}

/// Generates one asset. `size` is the side length of the square output.
pub fn generate_mixing_asset(kind: AssetKind, seed: u64, size: usize) -> Result<MixingAsset> {
    if size < 2 {
        return Err(Error::Config(format!("asset size {size} is too small")));
    }
    let image = match kind {
        AssetKind::FractalLike => ifs_fractal(seed, size),
        AssetKind::FeatureVizLike => band_limited_noise(seed, size),
    };
    Ok(MixingAsset { image, kind, seed })
}

struct AffineMap {
    m: [f32; 4],
    t: [f32; 2],
    color: [f32; 3],
}

fn ifs_fractal(seed: u64, size: usize) -> ImageTensor {
    let mut rng = seed::stream(seed, &[tag::ASSET, 0]);
    let n_maps = rng.random_range(2..=4);
    let maps: Vec<AffineMap> = (0..n_maps)
        .map(|_| {
            let theta = rng.random_range(0.0..2.0 * PI);
            let (sx, sy) = (rng.random_range(0.35..0.85), rng.random_range(0.35..0.85));
            let shear = rng.random_range(-0.4..0.4);
            let (c, s) = (theta.cos(), theta.sin());
            AffineMap {
                m: [c * sx, -s * sy + shear * c, s * sx, c * sy + shear * s],
                t: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                color: [rng.random(), rng.random(), rng.random()],
            }
        })
        .collect();
    let weights: Vec<f32> = maps
        .iter()
        .map(|a| (a.m[0] * a.m[3] - a.m[1] * a.m[2]).abs().max(0.02))
        .collect();
    let total: f32 = weights.iter().sum();

    let iters = 24 * size * size;
    let mut pts = Vec::with_capacity(iters);
    let (mut x, mut y) = (0.0f32, 0.0f32);
    let mut color = [0.5f32; 3];
    for i in 0..iters + 20 {
        let mut r = rng.random::<f32>() * total;
        let mut k = 0;
        while k + 1 < maps.len() && r >= weights[k] {
            r -= weights[k];
            k += 1;
        }
        let a = &maps[k];
        let nx = a.m[0] * x + a.m[1] * y + a.t[0];
        let ny = a.m[2] * x + a.m[3] * y + a.t[1];
        x = nx;
        y = ny;
        for (c, mc) in color.iter_mut().zip(a.color) {
            *c = 0.5 * (*c + mc);
        }
        if i >= 20 && x.is_finite() && y.is_finite() {
            pts.push((x, y, color));
        }
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f32::MAX, f32::MIN, f32::MAX, f32::MIN);
    for &(px, py, _) in &pts {
        x0 = x0.min(px);
        x1 = x1.max(px);
        y0 = y0.min(py);
        y1 = y1.max(py);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-6);
    let n = size * size;
    let mut count = vec![0f32; n];
    let mut acc = vec![0f32; 3 * n];
    for &(px, py, c) in &pts {
        let ix = (((px - x0) / span) * (size as f32 - 1.0)).round() as usize;
        let iy = (((py - y0) / span) * (size as f32 - 1.0)).round() as usize;
        let i = iy.min(size - 1) * size + ix.min(size - 1);
        count[i] += 1.0;
        for ch in 0..3 {
            acc[ch * n + i] += c[ch];
        }
    }
    let max_log = count.iter().map(|&c| (1.0 + c).ln()).fold(0.0f32, f32::max).max(1e-6);
    let bg: [f32; 3] = [
        rng.random_range(0.0..0.3),
        rng.random_range(0.0..0.3),
        rng.random_range(0.0..0.3),
    ];
    let mut data = vec![0f32; 3 * n];
    for i in 0..n {
        let density = ((1.0 + count[i]).ln() / max_log).sqrt();
        for ch in 0..3 {
            let mean_color = if count[i] > 0.0 {
                acc[ch * n + i] / count[i]
            } else {
                0.0
            };
            data[ch * n + i] = bg[ch] * (1.0 - density) + mean_color * density;
        }
    }
    ImageTensor::new(size, size, data).expect("shape matches")
}

fn band_limited_noise(seed: u64, size: usize) -> ImageTensor {
    let mut rng = seed::stream(seed, &[tag::ASSET, 1]);
    let n = size * size;
    let octaves = 5;
    let waves_per_octave = 5;
    let decay: f32 = rng.random_range(0.4..0.9);
    let mut fields = vec![0f32; 3 * n];
    for ch in 0..3 {
        let field = &mut fields[ch * n..(ch + 1) * n];
        for o in 0..octaves {
            // Cycles per image, doubling per octave up to roughly Nyquist.
            let lo = (1u32 << o) as f32;
            let hi = (lo * 2.0).min(size as f32 / 2.0);
            let amp = decay.powi(o);
            for _ in 0..waves_per_octave {
                let f = rng.random_range(lo..hi.max(lo + 0.5));
                let dir = rng.random_range(0.0..2.0 * PI);
                let phase = rng.random_range(0.0..2.0 * PI);
                let (kx, ky) = (
                    2.0 * PI * f * dir.cos() / size as f32,
                    2.0 * PI * f * dir.sin() / size as f32,
                );
                for y in 0..size {
                    for x in 0..size {
                        field[y * size + x] += amp * (kx * x as f32 + ky * y as f32 + phase).sin();
                    }
                }
            }
        }
    }
    // Mix channels through a random colour matrix, then stretch to [0, 1].
    let mix: Vec<f32> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut data = vec![0f32; 3 * n];
    for i in 0..n {
        for out in 0..3 {
            data[out * n + i] = (0..3).map(|k| mix[out * 3 + k] * fields[k * n + i]).sum();
        }
    }
    for ch in 0..3 {
        let plane = &mut data[ch * n..(ch + 1) * n];
        let lo = plane.iter().copied().fold(f32::MAX, f32::min);
        let hi = plane.iter().copied().fold(f32::MIN, f32::max);
        let span = (hi - lo).max(1e-6);
        for v in plane {
            *v = (*v - lo) / span;
        }
    }
    ImageTensor::new(size, size, data).expect("shape matches")
}

/// A fixed library of mixing pictures, indexed by kind.
///
/// The procedural bank is generated once from a root seed; a folder bank
/// ingests PNGs from disk (resized to the working size).
#[derive(Debug, Clone)]
pub struct AssetBank {
    assets: BTreeMap<AssetKind, Vec<ImageTensor>>,
}

impl AssetBank {
    pub fn procedural(root_seed: u64, per_kind: usize, size: usize) -> Result<Self> {
        if per_kind == 0 {
            return Err(Error::Config("asset bank needs at least one asset per kind".into()));
        }
        let mut assets = BTreeMap::new();
        for kind in AssetKind::ALL {
            let list = (0..per_kind)
                .map(|i| {
                    let s = seed::derive(root_seed, &[tag::ASSET, kind as u64, i as u64]);
                    generate_mixing_asset(kind, s, size).map(|a| a.image)
                })
                .collect::<Result<Vec<_>>>()?;
            assets.insert(kind, list);
        }
        Ok(Self { assets })
    }

    /// Loads `<dir>/fractal_like/*.png` and `<dir>/feature_viz_like/*.png`.
    /// A kind whose subfolder is missing falls back to nothing; at least one
    /// kind must be present.
    pub fn from_folder(dir: &Path, size: usize) -> Result<Self> {
        let mut assets = BTreeMap::new();
        for kind in AssetKind::ALL {
            let sub = dir.join(kind.as_str());
            if !sub.is_dir() {
                continue;
            }
            let mut paths: Vec<_> = std::fs::read_dir(&sub)
                .map_err(|e| Error::io(&sub, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            paths.sort();
            let list = paths
                .iter()
                .map(|p| {
                    let img = ImageTensor::load_png(p)?;
                    Ok(super::transforms::resize_bilinear(&img, size, size))
                })
                .collect::<Result<Vec<_>>>()?;
            if !list.is_empty() {
                assets.insert(kind, list);
            }
        }
        if assets.is_empty() {
            return Err(Error::Config(format!("no mixing assets found under {}", dir.display())));
        }
        Ok(Self { assets })
    }

    pub fn kinds(&self) -> Vec<AssetKind> {
        self.assets.keys().copied().collect()
    }

    /// Picks one asset uniformly (kind first, then member).
    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> &ImageTensor {
        let kinds: Vec<_> = self.assets.keys().collect();
        let kind = kinds[rng.random_range(0..kinds.len())];
        let list = &self.assets[kind];
        &list[rng.random_range(0..list.len())]
    }

    pub fn size(&self) -> usize {
        self.assets
            .values()
            .next()
            .and_then(|l| l.first())
            .map(|i| i.width())
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assets_are_deterministic_in_range_and_seed_sensitive() {
        for kind in AssetKind::ALL {
            let a = generate_mixing_asset(kind, 7, 64).unwrap();
            let b = generate_mixing_asset(kind, 7, 64).unwrap();
            assert_eq!(a, b);
            assert!(a.image.min() >= 0.0 && a.image.max() <= 1.0);
            let c = generate_mixing_asset(kind, 8, 64).unwrap();
            let frac = a.image.fraction_differing(&c.image, 0.0).unwrap();
            assert!(frac >= 0.01, "{kind:?}: only {frac} of pixels differ");
        }
    }

    #[test]
    fn unknown_kind_is_a_config_error() {
        assert!(matches!("mandelbrot".parse::<AssetKind>(), Err(Error::Config(_))));
        assert_eq!("fractal_like".parse::<AssetKind>().unwrap(), AssetKind::FractalLike);
    }

    #[test]
    fn folder_bank_ingests_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let a = generate_mixing_asset(AssetKind::FractalLike, 1, 16).unwrap();
        a.image.save_png(&dir.path().join("fractal_like/a.png")).unwrap();
        let bank = AssetBank::from_folder(dir.path(), 8).unwrap();
        assert_eq!(bank.kinds(), vec![AssetKind::FractalLike]);
        assert_eq!(bank.size(), 8);
        let empty = tempfile::tempdir().unwrap();
        assert!(AssetBank::from_folder(empty.path(), 8).is_err());
    }
}
