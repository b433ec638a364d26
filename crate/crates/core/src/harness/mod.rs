//! Dataset I/O, the synthetic scene oracle, metrics, configuration and reports.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod synthetic;

use std::path::PathBuf;

use thiserror::Error;

pub use config::ExperimentConfig;
pub use dataset::{load_dataset, Dataset, DatasetIndex};
pub use experiment::{run_experiment, split_queries, ExperimentOutput, Split};
pub use metrics::{max_orientation_error, summarize, translation_error, SummaryReport};
pub use report::{read_records_csv, write_records_csv, write_summary_json, ResultRecord};
pub use synthetic::{generate_synthetic_scene, Corruption, SceneSpec, SyntheticScene};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{what}: expected {expected}, found {got}")]
    CountMismatch { what: &'static str, expected: usize, got: usize },
    #[error("malformed pose on line {line}: {reason}")]
    MalformedPose { line: usize, reason: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no records to summarize")]
    NoRecords,
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
