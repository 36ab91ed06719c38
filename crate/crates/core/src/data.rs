//! Labelled clean images: the procedural shapes task and manifest files.
//!
//! A manifest is line-delimited JSON, one `{"path": ..., "label": ...}`
//! object per line. Relative paths resolve against the data root when one is
//! given, otherwise against the manifest's directory.

use std::f32::consts::PI;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::transforms::resize_bilinear;
use crate::image::ImageTensor;
use crate::seed::{self, tag};
use crate::{Error, Result};

/// Environment variable naming the data root for relative manifest paths.
pub const DATA_ROOT_ENV: &str = "CORREDIT_DATA_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];

    /// Membership test in the shape's own unit frame.
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Shape::Disc => u * u + v * v <= 1.0,
            Shape::Square => u.abs().max(v.abs()) <= 0.8,
            Shape::Triangle => v >= -0.5 && 3f32.sqrt() * u.abs() + v <= 1.0,
            Shape::Cross => (u.abs() < 0.3 && v.abs() < 1.0) || (v.abs() < 0.3 && u.abs() < 1.0),
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
        }
    }
}

/// Ten classes: five shapes times two colour families (warm, cool).
pub const SHAPE_CLASSES: usize = 10;

pub fn class_of(shape_index: usize, cool: bool) -> usize {
    shape_index * 2 + cool as usize
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One shapes image, a pure function of `(seed, index)`.
pub fn shapes_image(seed: u64, index: usize, size: usize) -> LabeledImage {
    let mut rng = seed::stream(seed, &[tag::SHAPES, index as u64]);
    let shape_index = rng.random_range(0..Shape::ALL.len());
    let cool = rng.random::<bool>();
    let shape = Shape::ALL[shape_index];

    let hue = if cool {
        rng.random_range(0.5..0.65)
    } else {
        rng.random_range(-0.05..0.1)
    };
    let fg = hsv_to_rgb(hue, rng.random_range(0.65..1.0), rng.random_range(0.65..1.0));
    let bg_v: f32 = rng.random_range(0.1..0.9);
    let bg = hsv_to_rgb(rng.random_range(0.0..1.0), rng.random_range(0.0..0.2), bg_v);
    let grad = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];

    let s = size as f32;
    let radius = s * rng.random_range(0.22..0.34);
    let margin = radius * 1.05;
    let cx = rng.random_range(margin..(s - margin).max(margin + 1e-3));
    let cy = rng.random_range(margin..(s - margin).max(margin + 1e-3));
    let (sin, cos) = rng.random_range(0.0..2.0 * PI).sin_cos();

    // 2x2 supersampling for soft edges.
    let offsets = [0.25f32, 0.75];
    let mut coverage = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for &oy in &offsets {
                for &ox in &offsets {
                    let (dx, dy) = ((x as f32 + ox - cx) / radius, (y as f32 + oy - cy) / radius);
                    let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                    hits += shape.contains(u, v) as u32;
                }
            }
            coverage[y * size + x] = hits as f32 / 4.0;
        }
    }
    let image = ImageTensor::from_fn(size, size, |c, y, x| {
        let shade = grad[0] * (x as f32 / s - 0.5) + grad[1] * (y as f32 / s - 0.5);
        let a = coverage[y * size + x];
        (1.0 - a) * (bg[c] + shade) + a * fg[c]
    })
    .quantized();
    LabeledImage {
        image,
        label: class_of(shape_index, cool),
    }
}

/// `count` images with indices `start..start + count`.
pub fn shapes_dataset(seed: u64, start: usize, count: usize, size: usize) -> Vec<LabeledImage> {
    (start..start + count).map(|i| shapes_image(seed, i, size)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestLine {
    path: PathBuf,
    label: usize,
}

/// Reads a manifest, resizing images to `size` when they differ.
pub fn read_manifest(path: &Path, data_root: Option<&Path>, size: usize) -> Result<Vec<LabeledImage>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = data_root
        .map(Path::to_path_buf)
        .or_else(|| path.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine =
            serde_json::from_str(&line).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let p = if entry.path.is_absolute() {
            entry.path
        } else {
            base.join(entry.path)
        };
        let image = ImageTensor::load_png(&p)?;
        out.push(LabeledImage {
            image: resize_bilinear(&image, size, size).quantized(),
            label: entry.label,
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!("manifest {} lists no images", path.display())));
    }
    Ok(out)
}

/// Writes PNGs under `dir/images/` and a `dir/manifest.jsonl` pointing at them.
pub fn write_manifest(dir: &Path, images: &[LabeledImage]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?);
    for (i, item) in images.iter().enumerate() {
        let rel = PathBuf::from(format!("images/{i:05}.png"));
        item.image.save_png(&dir.join(&rel))?;
        let line = serde_json::to_string(&ManifestLine {
            path: rel,
            label: item.label,
        })?;
        writeln!(f, "{line}").map_err(|e| Error::io(&manifest, e))?;
    }
    f.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_deterministic_and_cover_all_classes() {
        let a = shapes_dataset(3, 0, 200, 32);
        assert_eq!(a, shapes_dataset(3, 0, 200, 32));
        let mut seen = [0usize; SHAPE_CLASSES];
        for item in &a {
            seen[item.label] += 1;
        }
        assert!(seen.iter().all(|&c| c > 5), "{seen:?}");
    }

    #[test]
    fn manifest_round_trip() {
        let items = shapes_dataset(1, 0, 4, 16);
        let dir = tempfile::tempdir().unwrap();
        let m = write_manifest(dir.path(), &items).unwrap();
        assert_eq!(read_manifest(&m, None, 16).unwrap(), items);
        assert_eq!(read_manifest(&m, Some(dir.path()), 16).unwrap(), items);
        let resized = read_manifest(&m, None, 8).unwrap();
        assert_eq!(resized[0].image.width(), 8);
    }
}
