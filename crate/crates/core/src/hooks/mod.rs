//! Declarative description of what to extract from models, how to perturb the
//! forward pass, and how extracted features become a loss.

mod compose;
mod config;
mod distance;
mod ophooks;
mod schedule;

use thiserror::Error;

use crate::autodiff::TensorError;
use crate::model::ModelError;

pub use compose::{
    compose_loss, resolve_terms, AuxBound, AuxModel, Composed, FeatureSources, MixMode, Resolution, ResolvedTerm, StageContext, TeacherMix,
    TermValue, ViewTaps,
};
pub use config::{
    from_json_text, parse_hook_config, Aggregate, DistanceKind, DistanceSpec, ExtractionHook, HookConfig, LayerDropMode,
    LayerSelector, LossTerm, OperationHook, Relation, StageKind, Target, TermIdentity, Transform, View, Weight,
};
pub use distance::{apply_relation, apply_transform, compute_distance, compute_distance_between, InputKind, Side};
pub use ophooks::{
    active_layers, frozen, interchange_forward, plan_operations, run_student, splice_dims, uniform_map, ForwardPlan,
    InterchangePlan, ReplacePlan, ReplaceProjections,
};
pub use schedule::{Domain, IterState, Schedule};

#[derive(Debug, Error)]
pub enum HookError {
    #[error("hook config syntax error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid hook config field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("loss term `{term}`: {message}")]
    Composition { term: String, message: String },
    #[error("dimension mismatch in `{term}`: {message}")]
    Dimension { term: String, message: String },
    #[error("loss term `{term}` is not finite ({detail})")]
    NonFinite { term: String, detail: String },
    #[error("operation hook: {0}")]
    Plan(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl HookError {
    pub fn validation(field: &str, message: impl Into<String>) -> Self {
        HookError::Validation { field: field.to_string(), message: message.into() }
    }

    pub(crate) fn composition(term: &str, message: impl Into<String>) -> Self {
        HookError::Composition { term: term.to_string(), message: message.into() }
    }

    /// Prefix a validation field path.
    pub fn at(self, prefix: &str) -> Self {
        match self {
            HookError::Validation { field, message } => {
                HookError::Validation { field: format!("{prefix}.{field}"), message }
            }
            other => other,
        }
    }
}
