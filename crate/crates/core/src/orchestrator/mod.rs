//! Stage loops, optimisation, teacher policies and multi-stage pipelines.

mod optim;
mod pipeline;
mod policy;
mod stage;

pub use optim::{clip_global_norm, global_norm, lr_at, AdamW, OptimConfig};
pub use pipeline::{run_pipeline, train_reference, PipelineOutcome, PipelineRun, StageSummary};
pub use policy::{mean_entropy, select_teachers, PolicyState, RLKD_RATE, RLKD_TEMPERATURE};
pub use stage::{evaluate, feature_distances, run_stage, Evaluation, StageConfig, StageOutcome, StageRun};

use crate::autodiff::TensorError;
use crate::hooks::HookError;
use crate::model::ModelError;
use crate::telemetry::TelemetryError;

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration}: term `{term}` ({detail})")]
    NonFinite { iteration: usize, term: String, detail: String },
    #[error("policy error: {0}")]
    Policy(String),
    #[error("chain error: {0}")]
    Chain(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Hook(#[from] HookError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}
