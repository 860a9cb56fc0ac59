//! Training stages, inference and evaluation.

pub mod config;
pub mod eval;
pub mod infer;
pub mod manifest;
pub mod train;

pub use config::{PipelineConfig, Preset, TrainConfig};
pub use eval::{evaluate_dirs, EvalReport, EvalRow};
pub use infer::{CheckpointPaths, InferOutput, Pipeline};
pub use manifest::{CheckpointRecord, RunManifest};
pub use train::{
    load_decomposition, load_diffusion, load_restoration, train_decomposition, train_diffusion,
    train_restore, RestoreCache, StageOptions, StageReport,
};
