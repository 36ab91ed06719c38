//! Training-pair crafting and the held-out test corruption suite.
//!
//! Crafting follows the mixing-augmentation recipe: a clean image goes
//! through a random number of rounds, each mixing in a procedural picture
//! additively or multiplicatively with light base transforms around it. The
//! test suite is a separate registry of nine classic corruptions graded by
//! severity.

pub mod assets;
pub mod craft;
pub mod dataset;
pub mod pixmix;
pub mod test_suite;
pub mod transforms;

pub use assets::{generate_mixing_asset, AssetBank, AssetKind, MixingAsset};
pub use craft::{
    build_paired_dataset, recipe_seed, CorruptionRecipe, CraftConfig, Crafter, PairedSample, UNIVERSAL_INSTRUCTION,
};
pub use dataset::PairedDataset;
pub use pixmix::{pixmix_round, MixOp};
pub use test_suite::{apply_test_corruption, CorruptionKind, SeverityTable, TestCorruption};
pub use transforms::{apply_base_transforms, BaseTransform, BaseTransformParams};
