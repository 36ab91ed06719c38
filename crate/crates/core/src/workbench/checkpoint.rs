//! Single-file checkpoints: named `f32` arrays plus a JSON metadata block.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, the JSON
//! header, the little-endian payload in header order, and a SHA-256 trailer
//! over everything before it. All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use corredit_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::LatentCodec;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CORREDIT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dpm,
    Cm,
    Classifier,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dpm => "dpm",
            Self::Cm => "cm",
            Self::Classifier => "classifier",
        }
    }
}

/// Everything besides the arrays. Stage-specific settings live in `extra`
/// as JSON so each model can carry its own blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
    pub codec: Option<LatentCodec>,
    pub schedule_hash: Option<String>,
    pub git_describe: String,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CheckpointMeta {
    pub fn new(kind: ModelKind, config_hash: &str, seed: u64, step: u64) -> Self {
        Self {
            kind,
            config_hash: config_hash.to_string(),
            seed,
            step,
            codec: None,
            schedule_hash: None,
            git_describe: option_env!("CORREDIT_GIT_DESCRIBE")
                .unwrap_or(concat!("v", env!("CARGO_PKG_VERSION")))
                .to_string(),
            extra: BTreeMap::new(),
        }
    }

    pub fn with_extra(mut self, key: &str, value: &impl Serialize) -> Result<Self> {
        self.extra.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn extra<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .extra
            .get(key)
            .ok_or_else(|| Error::Serde(format!("checkpoint metadata lacks {key:?}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, params: ParamStore<f32>) -> Self {
        Self { meta, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| Entry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 4 * self.params.num_elements() + 52);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses a checkpoint; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            reason,
        };
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file (bad magic or too short)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(fail("checksum mismatch (truncated or corrupted)".into()));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| fail("header length exceeds file".into()))?;
        let header: Header =
            serde_json::from_slice(&body[20..header_end]).map_err(|e| fail(format!("bad header: {e}")))?;
        let mut payload = &body[header_end..];
        let mut params = ParamStore::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if payload.len() < 4 * n {
                return Err(fail(format!("payload too short for {}", e.name)));
            }
            let data = payload[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            payload = &payload[4 * n..];
            params.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
        }
        if !payload.is_empty() {
            return Err(fail(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Self {
            meta: header.meta,
            params,
        })
    }

    /// Writes via a temporary sibling and a rename, so readers never observe
    /// a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Config(format!(
                "expected a {} checkpoint, found {}",
                kind.as_str(),
                self.meta.kind.as_str()
            )));
        }
        Ok(())
    }

    /// Refuses checkpoints trained against a different latent codec.
    pub fn expect_codec(&self, codec: &LatentCodec) -> Result<()> {
        match &self.meta.codec {
            Some(c) if c == codec => Ok(()),
            Some(c) => Err(Error::Config(format!(
                "checkpoint was trained with codec factor {} (scale {}, offset {}), the run uses factor {} (scale {}, offset {})",
                c.factor, c.scale, c.offset, codec.factor, codec.scale, codec.offset
            ))),
            None => Err(Error::Config("checkpoint records no latent codec".into())),
        }
    }
}
