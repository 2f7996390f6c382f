//! Checkpoints, run configuration and metrics files.

mod checkpoint;
mod config;
mod metrics;

pub use checkpoint::{Checkpoint, CheckpointKind, FORMAT_VERSION};
pub use config::RunConfig;
pub use metrics::{csv_reader, write_bench_csv, FinetuneCsv, PretrainCsv};
