//! Markdown summary built from the metrics log of a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::{read_metrics, MetricsRecord};
use super::pipeline::{RunDir, TtaReport};
use crate::{Error, Result};

/// Renders the report. Every number comes from `metrics.jsonl`, so the
/// table and the log always agree. Records from another configuration are
/// refused unless `force` is set, in which case the report says so.
pub fn render(dir: &RunDir, force: bool) -> Result<String> {
    let config = RunConfig::load(&dir.config())?;
    let hash = config.hash();
    let records = read_metrics(&dir.metrics())?;
    let mut foreign: Vec<String> = records
        .iter()
        .filter(|r| r.config_hash != hash)
        .map(|r| format!("metrics record {}:{} from {}", r.stage, r.step, r.config_hash))
        .collect();
    if dir.tta().exists() {
        let tta = TtaReport::load(&dir.tta())?;
        if tta.config_hash != hash {
            foreign.push(format!("tta.json from {}", tta.config_hash));
        }
    }
    for path in [dir.classifier(), dir.dpm(), dir.cm()] {
        if path.exists() {
            let ck = Checkpoint::load(&path)?;
            if ck.meta.config_hash != hash {
                foreign.push(format!("{} from {}", path.display(), ck.meta.config_hash));
            }
        }
    }
    if !foreign.is_empty() && !force {
        return Err(Error::HashMismatch(format!(
            "config.toml hashes to {hash}, but found {}",
            foreign[0]
        )));
    }

    let mut out = String::new();
    writeln!(out, "# Run report\n").ok();
    writeln!(out, "- config hash: `{hash}`").ok();
    writeln!(out, "- seed: {}", config.seed).ok();
    writeln!(out, "- image size: {}", config.data.image_size).ok();
    if !foreign.is_empty() {
        writeln!(
            out,
            "- WARNING: {} artifacts carry a different config hash, first: {}",
            foreign.len(),
            foreign[0]
        )
        .ok();
    }
    out.push('\n');

    training_section(&mut out, &records);
    tta_section(&mut out, &records);
    agreement_section(&mut out, &records);
    Ok(out)
}

fn last<'a>(records: &'a [MetricsRecord], stage: &str) -> Option<&'a MetricsRecord> {
    records.iter().rev().find(|r| r.stage == stage)
}

fn first<'a>(records: &'a [MetricsRecord], stage: &str) -> Option<&'a MetricsRecord> {
    records
        .iter()
        .find(|r| r.stage == stage && r.metrics.contains_key("loss"))
}

fn training_section(out: &mut String, records: &[MetricsRecord]) {
    writeln!(out, "## Training\n").ok();
    writeln!(out, "| stage | steps | first loss | last loss |").ok();
    writeln!(out, "|---|---:|---:|---:|").ok();
    for stage in ["train_classifier", "train_dpm", "distill_cm"] {
        let (Some(a), Some(b)) = (
            first(records, stage),
            records
                .iter()
                .rev()
                .find(|r| r.stage == stage && r.metrics.contains_key("loss")),
        ) else {
            continue;
        };
        writeln!(
            out,
            "| {stage} | {} | {:.5} | {:.5} |",
            b.step, a.metrics["loss"], b.metrics["loss"]
        )
        .ok();
    }
    if let Some(r) = last(records, "train_classifier").and_then(|r| r.metrics.get("val_accuracy")) {
        writeln!(out, "\nClassifier validation accuracy: {:.4}", r).ok();
    }
    out.push('\n');
}

fn tta_section(out: &mut String, records: &[MetricsRecord]) {
    let rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.stage == "tta_eval").collect();
    if rows.is_empty() {
        return;
    }
    writeln!(out, "## Test-time adaptation\n").ok();
    writeln!(
        out,
        "| editor | corruption | severity | source acc | tta acc | mse corrupted | mse edited |"
    )
    .ok();
    writeln!(out, "|---|---|---:|---:|---:|---:|---:|").ok();
    for r in &rows {
        let l = |k: &str| r.labels.get(k).map(String::as_str).unwrap_or("?");
        let m = |k: &str| r.metrics.get(k).copied().unwrap_or(f64::NAN);
        writeln!(
            out,
            "| {} | {} | {} | {:.4} | {:.4} | {:.5} | {:.5} |",
            l("editor"),
            l("kind"),
            l("severity"),
            m("source_accuracy"),
            m("tta_accuracy"),
            m("mse_corrupted"),
            m("mse_edited")
        )
        .ok();
    }
    let summaries: BTreeMap<&str, &MetricsRecord> = records
        .iter()
        .filter(|r| r.stage == "tta_summary")
        .filter_map(|r| r.labels.get("editor").map(|e| (e.as_str(), r)))
        .collect();
    if !summaries.is_empty() {
        writeln!(
            out,
            "\n| editor | mean source acc | mean tta acc | NFE per sample | seconds per sample |"
        )
        .ok();
        writeln!(out, "|---|---:|---:|---:|---:|").ok();
        for (e, r) in summaries {
            writeln!(
                out,
                "| {e} | {:.4} | {:.4} | {} | {:.4} |",
                r.metrics["mean_source_accuracy"],
                r.metrics["mean_tta_accuracy"],
                r.metrics["nfe_per_sample"],
                r.metrics["wall_seconds_per_sample"]
            )
            .ok();
        }
    }
    out.push('\n');
}

fn agreement_section(out: &mut String, records: &[MetricsRecord]) {
    let Some(r) = last(records, "agreement") else { return };
    if r.metrics.get("samples").copied().unwrap_or(0.0) == 0.0 {
        return;
    }
    let m = |k: &str| r.metrics.get(k).copied().unwrap_or(f64::NAN);
    writeln!(out, "## Consistency vs diffusion editor\n").ok();
    writeln!(out, "- samples: {}", m("samples")).ok();
    writeln!(out, "- per-pixel MSE between edits: {:.5}", m("mse_cm_vs_dpm")).ok();
    writeln!(
        out,
        "- network evaluations per edit: diffusion {}, consistency {}",
        m("dpm_counted_nfe_per_edit"),
        m("cm_counted_nfe_per_edit")
    )
    .ok();
    writeln!(
        out,
        "- wall clock: diffusion {:.3}s, consistency {:.3}s, ratio {:.2}",
        m("wall_dpm_seconds"),
        m("wall_cm_seconds"),
        m("wall_dpm_seconds") / m("wall_cm_seconds")
    )
    .ok();
}
