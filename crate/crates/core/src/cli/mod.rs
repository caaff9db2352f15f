//! Config loading and the job runner behind the `gkd` binary.

mod config;
mod distill;

pub use config::{
    load_config, parse_config, ConfigError, DataConfig, MethodRef, ModelsConfig, PlannerConfig, RunConfig, RunModels,
    TeacherRef,
};
pub use distill::{distill, load_corpus, DistillError, SeedResult, Spread, Summary};
