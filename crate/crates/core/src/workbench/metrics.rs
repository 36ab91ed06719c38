//! Append-only JSON-lines metrics.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Metric names with this prefix hold wall-clock measurements.
pub const WALL_PREFIX: &str = "wall_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub timestamp: f64,
    pub stage: String,
    pub step: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricsRecord {
    /// Copy without the timestamp and wall-clock metrics, for comparing runs.
    pub fn deterministic_part(&self) -> Self {
        let mut r = self.clone();
        r.timestamp = 0.0;
        r.metrics.retain(|k, _| !k.starts_with(WALL_PREFIX));
        r
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    file: File,
    config_hash: String,
    last_step: BTreeMap<String, u64>,
}

impl MetricsWriter {
    /// Opens `path` for appending; existing records seed the per-stage step
    /// check and must carry the same config hash.
    pub fn open(path: &Path, config_hash: &str) -> Result<Self> {
        let mut last_step = BTreeMap::new();
        if path.exists() {
            for r in read_metrics(path)? {
                if r.config_hash != config_hash {
                    return Err(Error::HashMismatch(format!(
                        "{} holds records from config {} but this run is {config_hash}",
                        path.display(),
                        r.config_hash
                    )));
                }
                last_step.insert(r.stage.clone(), r.step);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            config_hash: config_hash.to_string(),
            last_step,
        })
    }

    /// First step a fresh pass over `stage` should use so steps keep
    /// increasing when a stage is rerun into the same log.
    pub fn next_step(&self, stage: &str) -> u64 {
        self.last_step.get(stage).map_or(0, |s| s + 1)
    }

    /// Appends one record. Steps must not decrease within a stage.
    pub fn log(&mut self, stage: &str, step: u64, metrics: &[(&str, f64)]) -> Result<()> {
        self.log_labeled(stage, step, &[], metrics)
    }

    pub fn log_labeled(
        &mut self,
        stage: &str,
        step: u64,
        labels: &[(&str, String)],
        metrics: &[(&str, f64)],
    ) -> Result<()> {
        if let Some(&prev) = self.last_step.get(stage) {
            if step < prev {
                return Err(Error::InvalidArgument(format!(
                    "stage {stage} step {step} after {prev}"
                )));
            }
        }
        let rec = MetricsRecord {
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            stage: stage.to_string(),
            step,
            config_hash: self.config_hash.clone(),
            labels: labels.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            metrics: metrics.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        };
        let mut line = serde_json::to_string(&rec)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.last_step.insert(stage.to_string(), step);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Whether two metrics files agree once timestamps and wall-clock values
/// are removed.
pub fn same_deterministic_metrics(a: &Path, b: &Path) -> Result<bool> {
    let strip = |p| -> Result<Vec<MetricsRecord>> {
        Ok(read_metrics(p)?.iter().map(MetricsRecord::deterministic_part).collect())
    };
    Ok(strip(a)? == strip(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_read_and_compare() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        for (p, wall) in [(&a, 1.0), (&b, 2.0)] {
            let mut w = MetricsWriter::open(p, "h").unwrap();
            w.log("train", 1, &[("loss", 0.5), ("wall_seconds", wall)]).unwrap();
            w.log("train", 2, &[("loss", 0.25)]).unwrap();
            assert!(w.log("train", 1, &[]).is_err());
            w.log("eval", 0, &[("acc", 0.9)]).unwrap();
        }
        let recs = read_metrics(&a).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].metrics["loss"], 0.25);
        assert!(same_deterministic_metrics(&a, &b).unwrap());
        let mut w = MetricsWriter::open(&b, "h").unwrap();
        assert!(w.log("train", 1, &[]).is_err());
        w.log("train", 3, &[("loss", 0.1)]).unwrap();
        assert!(!same_deterministic_metrics(&a, &b).unwrap());
        assert!(matches!(MetricsWriter::open(&a, "other"), Err(Error::HashMismatch(_))));
    }
}
