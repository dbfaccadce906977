//! Vertex-nullification sensitivity maps, block benchmarks and report files.

mod bench;
mod report;
mod sensitivity;

use std::path::PathBuf;

use thiserror::Error;

use crate::model::ModelError;
use crate::ssm::SsmError;
use crate::tensor::TensorError;

pub use bench::{
    bench_blocks, fit_power_law, host_info, measure_peak, timer_tick, BenchConfig, BenchReport, BenchRow,
    BlockKind, HostInfo, PowerFit, TrackingAllocator,
};
pub use report::{emit_report, read_sensitivity_csv, ReportFiles, ReportSet, SENSITIVITY_HEADER};
pub use sensitivity::{
    nullify_vertex, ranking_auc, sensitivity_analysis, vertex_slots, zscore_in_place, Mode, SensitivityEntry,
    SensitivityMap, SensitivityOptions, DEFAULT_CHANNEL_NAMES,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid analysis input: {0}")]
    Invalid(String),
    #[error("model is not usable: {0}")]
    BadModel(String),
    #[error(
        "median time {median:.3e} s is below 20 timer ticks ({tick:.3e} s); raise the repeat count"
    )]
    TimerResolution { median: f64, tick: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;
