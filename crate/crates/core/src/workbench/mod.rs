//! Run orchestration: configuration, checkpoints, metrics and reports.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use checkpoint::{Checkpoint, CheckpointMeta, ModelKind};
pub use config::{DataSource, Preset, RunConfig};
pub use metrics::{read_metrics, same_deterministic_metrics, MetricsRecord, MetricsWriter};
pub use pipeline::{Agreement, EditRequest, EditSidecar, Pipeline, RunDir, RunSummary, StageSummary, TtaReport};
