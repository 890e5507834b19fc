//! Configuration, orchestration, evaluation and map export for the
//! multi-modal LiDAR-inertial odometry pipeline.

pub mod config;
pub mod eval;
pub mod map;
pub mod report;
pub mod run;

use std::path::PathBuf;

use mlio_core::dataset::DatasetError;
use mlio_core::features::FeatureError;
use mlio_core::imu::ImuError;
use mlio_core::posegraph::GraphError;
use mlio_core::precal::CalibError;
use mlio_core::swo::SwoError;
use thiserror::Error;

pub use config::{Mode, PipelineConfig};
pub use eval::{evaluate, Metrics};
pub use map::{read_ply, write_ply, MapPoint};
pub use report::{Divergence, ExtrinsicRecord, FrameStats, LoopRecord, RunReport, StageTimings, TrajectoryEntry};
pub use run::{calibrate_dataset, run_pipeline, RunOutput};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("calibration: {0}")]
    Calib(#[from] CalibError),
    #[error("imu: {0}")]
    Imu(#[from] ImuError),
    #[error("features: {0}")]
    Feature(#[from] FeatureError),
    #[error("pose graph: {0}")]
    Graph(#[from] GraphError),
    #[error("window: {0}")]
    Window(#[from] SwoError),
    #[error("dataset unusable: {0}")]
    Data(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("{path}: {msg}")]
    Ply { path: PathBuf, msg: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}
