//! Training orchestration, inference, evaluation and run artifacts.

pub mod config;
pub mod eval;
pub mod infer;
pub mod run;
pub mod train;

pub use config::{RunConfig, Stage, StreamTraining};
pub use eval::{evaluate, evaluate_predictions, Evaluation};
pub use infer::{infer_video, sight_video_count, Aggregation, InferenceConfig, Models, VideoPrediction};
pub use run::{stage_rng, train_pipeline, RunDir, RunRecord, TrainedPipeline};
