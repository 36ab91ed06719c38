//! Recipes and the one-to-many crafting pipeline.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::assets::AssetBank;
use super::pixmix::{pixmix_round, MixOp};
use super::transforms::{apply_base_transforms, BaseTransform, BaseTransformParams};
use crate::image::ImageTensor;
use crate::seed::{self, tag};
use crate::{Error, Result};

/// Instruction id of the fixed "clean the image" instruction.
pub const UNIVERSAL_INSTRUCTION: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CraftConfig {
    pub image_size: usize,
    pub variants_per_image: usize,
    /// Inclusive range for the number of mixing rounds per pair.
    pub mixing_rounds: [usize; 2],
    pub mix_weight_bounds: [f32; 2],
    /// Shape parameters of the Beta law scaled onto `mix_weight_bounds`.
    pub mix_weight_beta: [f64; 2],
    pub base_transforms: Vec<BaseTransform>,
    pub transform_params: BaseTransformParams,
    /// Procedural assets generated per kind.
    pub asset_bank_size: usize,
    /// Optional folder of real mixing pictures (`fractal_like/`, `feature_viz_like/`).
    pub asset_dir: Option<std::path::PathBuf>,
}

impl Default for CraftConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            variants_per_image: 4,
            mixing_rounds: [1, 4],
            mix_weight_bounds: [0.1, 0.6],
            mix_weight_beta: [3.0, 3.0],
            base_transforms: BaseTransform::ALL.to_vec(),
            transform_params: BaseTransformParams::default(),
            asset_bank_size: 64,
            asset_dir: None,
        }
    }
}

impl CraftConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.mix_weight_bounds;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "mix weight bounds [{lo}, {hi}] must satisfy 0 < lo <= hi < 1"
            )));
        }
        if self.mixing_rounds[0] > self.mixing_rounds[1] {
            return Err(Error::Config("mixing_rounds range is reversed".into()));
        }
        if self.variants_per_image == 0 {
            return Err(Error::Config("variants_per_image must be at least 1".into()));
        }
        if self.mix_weight_beta.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config("Beta parameters must be positive".into()));
        }
        let p = &self.transform_params;
        for prob in [p.p_crop, p.p_jitter, p.p_grayscale, p.p_blur, p.p_flip] {
            if !(0.0..=1.0).contains(&prob) {
                return Err(Error::Config(format!("transform probability {prob} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// The mixing-asset library this config describes.
    pub fn asset_bank(&self, master_seed: u64) -> Result<AssetBank> {
        match &self.asset_dir {
            Some(dir) => AssetBank::from_folder(dir, self.image_size),
            None => AssetBank::procedural(
                seed::derive(master_seed, &[tag::ASSET]),
                self.asset_bank_size,
                self.image_size,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecipe {
    pub seed: u64,
    pub mixing_rounds: usize,
    pub ops: Vec<MixOp>,
    pub base_transforms: Vec<BaseTransform>,
    pub mix_weight_bounds: [f32; 2],
}

impl CorruptionRecipe {
    /// Draws round count and op sequence from `seed`.
    pub fn sample(seed: u64, config: &CraftConfig) -> Self {
        let mut rng = seed::stream(seed, &[tag::CRAFT, 0]);
        let [lo, hi] = config.mixing_rounds;
        let rounds = rng.random_range(lo..=hi);
        let ops = (0..rounds)
            .map(|_| {
                if rng.random::<bool>() {
                    MixOp::AdditiveMix
                } else {
                    MixOp::MultiplicativeMix
                }
            })
            .collect();
        Self {
            seed,
            mixing_rounds: rounds,
            ops,
            base_transforms: config.base_transforms.clone(),
            mix_weight_bounds: config.mix_weight_bounds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ops.len() != self.mixing_rounds {
            return Err(Error::InvalidArgument(format!(
                "recipe lists {} ops for {} rounds",
                self.ops.len(),
                self.mixing_rounds
            )));
        }
        let [lo, hi] = self.mix_weight_bounds;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::InvalidArgument(format!("mix weight bounds [{lo}, {hi}]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub clean: Arc<ImageTensor>,
    pub corrupted: ImageTensor,
    pub instruction_id: usize,
    pub recipe: CorruptionRecipe,
}

/// Everything crafting needs besides the clean image and its recipe.
pub struct Crafter<'a> {
    pub params: &'a BaseTransformParams,
    pub beta: [f64; 2],
    pub bank: &'a AssetBank,
}

impl<'a> Crafter<'a> {
    pub fn new(config: &'a CraftConfig, bank: &'a AssetBank) -> Self {
        Self {
            params: &config.transform_params,
            beta: config.mix_weight_beta,
            bank,
        }
    }

    /// Runs the recipe on `clean`.
    ///
    /// Before each round the photometric base transforms hit the running
    /// image and the geometric ones hit the mixing picture, so the corrupted
    /// output stays pixel-aligned with its clean target.
    pub fn craft(&self, clean: Arc<ImageTensor>, recipe: &CorruptionRecipe) -> Result<PairedSample> {
        recipe.validate()?;
        let mut rng = seed::stream(recipe.seed, &[tag::CRAFT, 1]);
        let beta =
            Beta::new(self.beta[0], self.beta[1]).map_err(|e| Error::Config(format!("mix weight Beta law: {e}")))?;
        let photometric: Vec<_> = recipe
            .base_transforms
            .iter()
            .copied()
            .filter(|t| !t.is_geometric())
            .collect();
        let geometric: Vec<_> = recipe
            .base_transforms
            .iter()
            .copied()
            .filter(|t| t.is_geometric())
            .collect();
        let [lo, hi] = recipe.mix_weight_bounds;
        let mut img = (*clean).clone();
        for &op in &recipe.ops {
            img = apply_base_transforms(&img, &photometric, self.params, &mut rng);
            let asset = apply_base_transforms(self.bank.pick(&mut rng), &geometric, self.params, &mut rng);
            let w = lo + (hi - lo) * beta.sample(&mut rng) as f32;
            img = pixmix_round(&img, &asset, op, w.clamp(lo, hi))?;
        }
        Ok(PairedSample {
            clean,
            corrupted: img,
            instruction_id: UNIVERSAL_INSTRUCTION,
            recipe: recipe.clone(),
        })
    }
}

/// Seed of the recipe for variant `v` of clean image `i`.
pub fn recipe_seed(master_seed: u64, image_index: usize, variant: usize) -> u64 {
    seed::derive(master_seed, &[tag::CRAFT, image_index as u64, variant as u64])
}

/// `variants_per_image` pairs per clean image, ordered image-major.
pub fn build_paired_dataset(
    clean_set: &[Arc<ImageTensor>],
    variants_per_image: usize,
    master_seed: u64,
    config: &CraftConfig,
    bank: &AssetBank,
) -> Result<Vec<PairedSample>> {
    if clean_set.is_empty() {
        return Err(Error::InvalidArgument("empty clean set".into()));
    }
    if variants_per_image == 0 {
        return Err(Error::InvalidArgument("variants_per_image must be at least 1".into()));
    }
    let crafter = Crafter::new(config, bank);
    let mut out = Vec::with_capacity(clean_set.len() * variants_per_image);
    for (i, clean) in clean_set.iter().enumerate() {
        for v in 0..variants_per_image {
            let recipe = CorruptionRecipe::sample(recipe_seed(master_seed, i, v), config);
            out.push(crafter.craft(Arc::clone(clean), &recipe)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (CraftConfig, AssetBank, Arc<ImageTensor>) {
        let cfg = CraftConfig {
            image_size: 32,
            asset_bank_size: 4,
            ..Default::default()
        };
        let bank = cfg.asset_bank(0).unwrap();
        let clean = Arc::new(ImageTensor::from_fn(32, 32, |c, y, x| {
            0.5 + 0.4 * ((x as f32 * 0.3 + c as f32).sin() * (y as f32 * 0.2).cos())
        }));
        (cfg, bank, clean)
    }

    #[test]
    fn empty_recipe_is_identity() {
        let (cfg, bank, clean) = setup();
        let recipe = CorruptionRecipe {
            seed: 3,
            mixing_rounds: 0,
            ops: vec![],
            base_transforms: vec![],
            mix_weight_bounds: [0.1, 0.6],
        };
        let s = Crafter::new(&cfg, &bank).craft(Arc::clone(&clean), &recipe).unwrap();
        assert_eq!(s.corrupted, *clean);
        assert_eq!(s.instruction_id, UNIVERSAL_INSTRUCTION);
    }

    #[test]
    fn crafting_is_deterministic_and_changes_the_image() {
        let (cfg, bank, clean) = setup();
        let crafter = Crafter::new(&cfg, &bank);
        let recipe = CorruptionRecipe {
            seed: 42,
            mixing_rounds: 3,
            ops: vec![MixOp::AdditiveMix, MixOp::MultiplicativeMix, MixOp::AdditiveMix],
            base_transforms: cfg.base_transforms.clone(),
            mix_weight_bounds: cfg.mix_weight_bounds,
        };
        let a = crafter.craft(Arc::clone(&clean), &recipe).unwrap();
        let b = crafter.craft(Arc::clone(&clean), &recipe).unwrap();
        assert_eq!(a, b);
        let mad: f64 = a
            .corrupted
            .data()
            .iter()
            .zip(clean.data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / clean.data().len() as f64;
        assert!(mad > 0.01, "mean abs difference {mad}");
    }

    #[test]
    fn recipe_invariants_are_checked() {
        let (cfg, bank, clean) = setup();
        let bad = CorruptionRecipe {
            seed: 0,
            mixing_rounds: 2,
            ops: vec![MixOp::AdditiveMix],
            base_transforms: vec![],
            mix_weight_bounds: [0.1, 0.6],
        };
        assert!(Crafter::new(&cfg, &bank).craft(clean, &bad).is_err());
        let sampled = CorruptionRecipe::sample(9, &cfg);
        assert_eq!(sampled.ops.len(), sampled.mixing_rounds);
        assert!((1..=4).contains(&sampled.mixing_rounds));
    }

    #[test]
    fn dataset_counts_determinism_and_distinct_variants() {
        let (cfg, bank, _) = setup();
        let cleans: Vec<_> = (0..10)
            .map(|k| {
                Arc::new(ImageTensor::from_fn(32, 32, |c, y, x| {
                    ((c + y * k + x) % 7) as f32 / 6.0
                }))
            })
            .collect();
        let a = build_paired_dataset(&cleans, 4, 0, &cfg, &bank).unwrap();
        assert_eq!(a.len(), 40);
        for (i, clean) in cleans.iter().enumerate() {
            let group = &a[i * 4..(i + 1) * 4];
            assert!(group.iter().all(|s| Arc::ptr_eq(&s.clean, clean)));
            for p in 0..4 {
                for q in p + 1..4 {
                    assert_ne!(group[p].corrupted, group[q].corrupted);
                }
            }
        }
        assert_eq!(a, build_paired_dataset(&cleans, 4, 0, &cfg, &bank).unwrap());
        assert!(build_paired_dataset(&[], 4, 0, &cfg, &bank).is_err());
    }
}
