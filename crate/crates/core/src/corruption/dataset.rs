//! On-disk paired datasets: `clean/`, `corrupted/` and `metadata.json`.
//!
//! Images are kept on the 8-bit grid in memory too, so what training sees is
//! exactly what the PNGs hold, and re-crafting from the metadata reproduces
//! the stored bytes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::craft::{build_paired_dataset, CorruptionRecipe, CraftConfig, Crafter, PairedSample};
use crate::data::LabeledImage;
use crate::image::ImageTensor;
use crate::{Error, Result};

pub const METADATA_FILE: &str = "metadata.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CleanEntry {
    file: String,
    label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairEntry {
    clean_index: usize,
    variant: usize,
    file: String,
    instruction_id: usize,
    recipe: CorruptionRecipe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    config_hash: String,
    master_seed: u64,
    craft: CraftConfig,
    clean: Vec<CleanEntry>,
    pairs: Vec<PairEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub master_seed: u64,
    pub config: CraftConfig,
    pub config_hash: String,
    pub labels: Vec<usize>,
    pub clean: Vec<Arc<ImageTensor>>,
    pub pairs: Vec<PairedSample>,
}

fn clean_file(i: usize) -> String {
    format!("clean/{i:05}.png")
}

fn corrupted_file(i: usize, v: usize) -> String {
    format!("corrupted/{i:05}_{v:02}.png")
}

impl PairedDataset {
    /// Crafts `config.variants_per_image` pairs per clean image.
    pub fn build(clean: &[LabeledImage], config: &CraftConfig, master_seed: u64, config_hash: &str) -> Result<Self> {
        config.validate()?;
        if let Some(bad) = clean
            .iter()
            .find(|l| l.image.width() != config.image_size || l.image.height() != config.image_size)
        {
            return Err(Error::Shape(format!(
                "clean image is {}x{}, config expects {}",
                bad.image.height(),
                bad.image.width(),
                config.image_size
            )));
        }
        let images: Vec<_> = clean.iter().map(|l| Arc::new(l.image.quantized())).collect();
        let bank = config.asset_bank(master_seed)?;
        let mut pairs = build_paired_dataset(&images, config.variants_per_image, master_seed, config, &bank)?;
        for p in &mut pairs {
            p.corrupted = p.corrupted.quantized();
        }
        Ok(Self {
            master_seed,
            config: config.clone(),
            config_hash: config_hash.to_string(),
            labels: clean.iter().map(|l| l.label).collect(),
            clean: images,
            pairs,
        })
    }

    fn index(&self, k: usize) -> (usize, usize) {
        let v = self.config.variants_per_image;
        (k / v, k % v)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = Metadata {
            format_version: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            master_seed: self.master_seed,
            craft: self.config.clone(),
            clean: Vec::new(),
            pairs: Vec::new(),
        };
        for (i, (img, &label)) in self.clean.iter().zip(&self.labels).enumerate() {
            let file = clean_file(i);
            img.save_png(&dir.join(&file))?;
            meta.clean.push(CleanEntry { file, label });
        }
        for (k, p) in self.pairs.iter().enumerate() {
            let (i, v) = self.index(k);
            let file = corrupted_file(i, v);
            p.corrupted.save_png(&dir.join(&file))?;
            meta.pairs.push(PairEntry {
                clean_index: i,
                variant: v,
                file,
                instruction_id: p.instruction_id,
                recipe: p.recipe.clone(),
            });
        }
        let path = dir.join(METADATA_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    fn read_metadata(dir: &Path) -> Result<Metadata> {
        let path = dir.join(METADATA_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Metadata = serde_json::from_slice(&bytes)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "dataset format version {} (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        Ok(meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = Self::read_metadata(dir)?;
        let clean = meta
            .clean
            .iter()
            .map(|c| ImageTensor::load_png(&dir.join(&c.file)).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let pairs = meta
            .pairs
            .iter()
            .map(|p| {
                let src = clean
                    .get(p.clean_index)
                    .ok_or_else(|| Error::Config(format!("pair refers to missing clean image {}", p.clean_index)))?;
                Ok(PairedSample {
                    clean: Arc::clone(src),
                    corrupted: ImageTensor::load_png(&dir.join(&p.file))?,
                    instruction_id: p.instruction_id,
                    recipe: p.recipe.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            master_seed: meta.master_seed,
            config: meta.craft,
            config_hash: meta.config_hash,
            labels: meta.clean.iter().map(|c| c.label).collect(),
            clean,
            pairs,
        })
    }

    /// Re-crafts every pair from the stored clean images and recipes and
    /// checks the PNG bytes against the stored corrupted files. Returns the
    /// offending paths.
    pub fn verify_recraft(dir: &Path) -> Result<Vec<PathBuf>> {
        let meta = Self::read_metadata(dir)?;
        let bank = meta.craft.asset_bank(meta.master_seed)?;
        let crafter = Crafter::new(&meta.craft, &bank);
        let clean = meta
            .clean
            .iter()
            .map(|c| ImageTensor::load_png(&dir.join(&c.file)).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let mut mismatched = Vec::new();
        for p in &meta.pairs {
            let sample = crafter.craft(Arc::clone(&clean[p.clean_index]), &p.recipe)?;
            let path = dir.join(&p.file);
            let stored = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if sample.corrupted.png_bytes()? != stored {
                mismatched.push(path);
            }
        }
        Ok(mismatched)
    }

    /// Split pairs into training pairs and a held-out tail of whole clean
    /// images (`holdout` images and all their variants).
    pub fn split_holdout(&self, holdout: usize) -> (Vec<PairedSample>, Vec<PairedSample>) {
        let v = self.config.variants_per_image;
        let keep = self.clean.len().saturating_sub(holdout) * v;
        (self.pairs[..keep].to_vec(), self.pairs[keep..].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cleans() -> Vec<LabeledImage> {
        (0..3)
            .map(|k| LabeledImage {
                image: ImageTensor::from_fn(16, 16, |c, y, x| ((c * 3 + y * (k + 1) + x) % 9) as f32 / 8.0),
                label: k,
            })
            .collect()
    }

    fn config() -> CraftConfig {
        CraftConfig {
            image_size: 16,
            variants_per_image: 2,
            asset_bank_size: 3,
            ..Default::default()
        }
    }

    #[test]
    fn save_load_and_recraft_round_trip() {
        let ds = PairedDataset::build(&cleans(), &config(), 5, "abc").unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(PairedDataset::load(dir.path()).unwrap(), ds);
        assert!(PairedDataset::verify_recraft(dir.path()).unwrap().is_empty());

        // Tampering with a stored file is caught.
        let victim = dir.path().join(corrupted_file(1, 1));
        ImageTensor::filled(16, 16, 0.5).save_png(&victim).unwrap();
        assert_eq!(PairedDataset::verify_recraft(dir.path()).unwrap(), vec![victim]);
    }

    #[test]
    fn holdout_split_keeps_whole_images() {
        let ds = PairedDataset::build(&cleans(), &config(), 5, "abc").unwrap();
        let (train, held) = ds.split_holdout(1);
        assert_eq!((train.len(), held.len()), (4, 2));
        assert!(held.iter().all(|p| Arc::ptr_eq(&p.clean, &ds.clean[2])));
    }

    #[test]
    fn wrong_size_and_missing_dir_error() {
        let mut cfg = config();
        cfg.image_size = 32;
        assert!(PairedDataset::build(&cleans(), &cfg, 0, "").is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            PairedDataset::load(dir.path()),
            Err(Error::MissingArtifact(_))
        ));
    }
}
