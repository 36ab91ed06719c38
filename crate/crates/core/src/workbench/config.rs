//! One run configuration covering every stage, with presets and a stable hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::LatentCodec;
use crate::consistency::DistillConfig;
use crate::corruption::{CorruptionKind, CraftConfig, SeverityTable};
use crate::diffusion::TrainDpmConfig;
use crate::guidance::GuidanceConfig;
use crate::schedule::ScheduleConfig;
use crate::tta::{ClassifierConfig, TrainClassifierConfig};
use crate::unet::UNetConfig;
use crate::{Error, Result};

/// Where clean labelled images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// The procedural shapes task.
    Shapes,
    /// JSONL manifests of `{path, label}` lines; relative paths resolve
    /// against the data-root environment variable, then the manifest folder.
    Manifest { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub image_size: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    /// Clean training images used for crafting pairs.
    pub craft_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierStage {
    pub model: ClassifierConfig,
    pub train: TrainClassifierConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    pub dpm_steps: usize,
    pub guidance: GuidanceConfig,
    pub cm_nfe: usize,
    pub cm_omega_i: f64,
    pub cm_omega_t: f64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            dpm_steps: 20,
            guidance: GuidanceConfig::default(),
            cm_nfe: 4,
            cm_omega_i: 1.3,
            cm_omega_t: 7.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaEvalConfig {
    pub n_edits: usize,
    pub chunk: usize,
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub severity_table: SeverityTable,
    /// Test images per corruption; at most `data.test_images`.
    pub eval_samples: usize,
    /// Also score the multi-step diffusion editor (60 evaluations per edit).
    pub include_dpm: bool,
    /// Corrupted inputs on which CM and DPM edits are compared.
    pub agreement_samples: usize,
}

impl Default for TtaEvalConfig {
    fn default() -> Self {
        Self {
            n_edits: 4,
            chunk: 32,
            kinds: CorruptionKind::ALL.to_vec(),
            severities: vec![1, 3, 5],
            severity_table: SeverityTable::default(),
            eval_samples: 500,
            include_dpm: false,
            agreement_samples: 32,
        }
    }
}

/// Every hyperparameter of a run. The output directory is not part of the
/// configuration: it is chosen per invocation and does not affect results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub craft: CraftConfig,
    pub codec: LatentCodec,
    pub schedule: ScheduleConfig,
    pub model: UNetConfig,
    pub train_dpm: TrainDpmConfig,
    pub distill_cm: DistillConfig,
    pub classifier: ClassifierStage,
    pub edit: EditConfig,
    pub tta: TtaEvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Reference)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Full desk-scale defaults: 64x64 images, base width 32.
    Reference,
    /// Reduced sizes that finish the whole pipeline in minutes on one core.
    Toy,
    /// Seconds-scale run for tests.
    Smoke,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Self::Reference),
            "toy" => Ok(Self::Toy),
            "smoke" => Ok(Self::Smoke),
            _ => Err(Error::Config(format!("unknown preset {s:?} (reference, toy, smoke)"))),
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let reference = Self {
            seed: 0,
            data: DataConfig {
                source: DataSource::Shapes,
                image_size: 64,
                train_images: 2000,
                val_images: 300,
                test_images: 500,
                craft_images: 1000,
            },
            craft: CraftConfig::default(),
            codec: LatentCodec::default(),
            schedule: ScheduleConfig::default(),
            model: UNetConfig::default(),
            train_dpm: TrainDpmConfig::default(),
            distill_cm: DistillConfig::default(),
            classifier: ClassifierStage {
                model: ClassifierConfig::default(),
                train: TrainClassifierConfig::default(),
            },
            edit: EditConfig::default(),
            tta: TtaEvalConfig::default(),
        };
        match p {
            Preset::Reference => reference,
            Preset::Toy => Self::toy(reference),
            Preset::Smoke => Self::smoke(Self::toy(reference)),
        }
    }

    fn toy(mut c: Self) -> Self {
        c.data.image_size = 32;
        c.data.craft_images = 256;
        c.craft.image_size = 32;
        c.model.base_width = 16;
        c.model.res_blocks = 1;
        c.train_dpm.batch_size = 16;
        c.train_dpm.lr = 1e-3;
        c.train_dpm.steps = 800;
        c.distill_cm.batch_size = 16;
        c.distill_cm.lr = 1e-3;
        c.distill_cm.steps = 400;
        c.tta.severities = vec![5];
        c.tta.eval_samples = 50;
        c
    }

    fn smoke(mut c: Self) -> Self {
        c.data.image_size = 16;
        c.data.train_images = 200;
        c.data.val_images = 50;
        c.data.test_images = 8;
        c.data.craft_images = 8;
        c.craft.image_size = 16;
        c.craft.variants_per_image = 2;
        c.craft.asset_bank_size = 4;
        c.model.base_width = 8;
        c.model.groups = 4;
        c.model.channel_mults = vec![1, 2];
        c.model.guidance_dim = 16;
        c.train_dpm.batch_size = 4;
        c.train_dpm.steps = 6;
        c.train_dpm.log_every = 2;
        c.distill_cm.batch_size = 4;
        c.distill_cm.steps = 4;
        c.distill_cm.log_every = 2;
        c.classifier.model.width = 8;
        c.classifier.train.max_steps = 20;
        c.classifier.train.eval_every = 10;
        c.classifier.train.target_accuracy = 0.0;
        c.edit.dpm_steps = 3;
        c.edit.cm_nfe = 2;
        c.tta.kinds = vec![CorruptionKind::GaussianNoise, CorruptionKind::Contrast];
        c.tta.eval_samples = 4;
        c.tta.n_edits = 2;
        c.tta.chunk = 4;
        c.tta.include_dpm = true;
        c.tta.agreement_samples = 2;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.image_size != self.craft.image_size {
            return Err(Error::Config(format!(
                "data.image_size {} differs from craft.image_size {}",
                d.image_size, self.craft.image_size
            )));
        }
        if d.image_size % self.codec.factor != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by codec factor {}",
                d.image_size, self.codec.factor
            )));
        }
        if d.craft_images == 0 || d.craft_images > d.train_images || d.val_images == 0 || d.test_images == 0 {
            return Err(Error::Config(
                "image counts must be positive with craft_images <= train_images".into(),
            ));
        }
        if self.model.latent_channels != self.codec.latent_channels() {
            return Err(Error::Config(format!(
                "model expects {} latent channels, codec produces {}",
                self.model.latent_channels,
                self.codec.latent_channels()
            )));
        }
        let side = d.image_size / self.codec.factor;
        self.model.validate()?;
        self.model.check_spatial(side, side)?;
        self.craft.validate()?;
        self.train_dpm.validate()?;
        self.distill_cm.validate(self.schedule.t_max)?;
        self.edit.guidance.validate()?;
        if self.edit.dpm_steps == 0 || self.edit.cm_nfe == 0 || self.edit.cm_nfe >= self.distill_cm.grid_size {
            return Err(Error::Config("edit step counts out of range".into()));
        }
        let t = &self.tta;
        if t.n_edits == 0 || t.chunk == 0 || t.kinds.is_empty() || t.severities.is_empty() || t.eval_samples == 0 {
            return Err(Error::Config(
                "tta block needs positive counts and at least one corruption".into(),
            ));
        }
        if t.severities.iter().any(|s| !(1..=5).contains(s)) {
            return Err(Error::Config(format!("severities {:?} outside 1..=5", t.severities)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// First 12 hex digits of [`RunConfig::hash`].
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Sets one dotted field, e.g. `train_dpm.steps=500` or
    /// `tta.kinds=["contrast"]`. The value is parsed as TOML, falling back
    /// to a bare string.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Serde(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {} is not a table", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                if !table.contains_key(*part) {
                    return Err(Error::Config(format!("unknown config field {key}")));
                }
                table.insert(part.to_string(), value);
                break;
            }
            node = table
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config field {key}")))?;
        }
        let c: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Preset::Reference, Preset::Toy, Preset::Smoke] {
            let c = RunConfig::preset(p);
            c.validate().unwrap();
            let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
        assert_eq!(RunConfig::default().model.base_width, 32);
    }

    #[test]
    fn hash_tracks_every_field_change() {
        let base = RunConfig::default();
        let mut a = base.clone();
        a.distill_cm.ema_mu = 0.9;
        let mut b = base.clone();
        b.tta.severity_table.gaussian_sigma[0] += 0.01;
        let mut c = base.clone();
        c.seed = 1;
        let hashes = [base.hash(), a.hash(), b.hash(), c.hash()];
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(hashes[i], hashes[j]);
            }
        }
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        let mut text = RunConfig::default().to_toml().unwrap();
        text.push_str("\nbogus = 1\n");
        assert!(RunConfig::from_toml(&text).is_err());
        let mut c = RunConfig::default();
        c.data.image_size = 63;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.distill_cm.skip = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dotted_overrides() {
        let c = RunConfig::preset(Preset::Toy);
        let d = c.with_override("train_dpm.steps=123").unwrap();
        assert_eq!(d.train_dpm.steps, 123);
        assert_ne!(d.hash(), c.hash());
        let d = c.with_override("tta.kinds=[\"contrast\", \"haze\"]").unwrap();
        assert_eq!(d.tta.kinds.len(), 2);
        assert!(c.with_override("train_dpm.nope=1").is_err());
        assert!(c.with_override("train_dpm.steps=\"many\"").is_err());
        assert!(c.with_override("data.image_size=30").is_err());
        assert!(c.with_override("seed").is_err());
    }
}
