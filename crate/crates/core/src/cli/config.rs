use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::hooks::StageKind;
use crate::model::{named_spec, InitStrategy, ModelSpec};
use crate::orchestrator::StageConfig;
use crate::registry::{get_descriptor, validate, MethodDescriptor, Orchestration, RegistryError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("line {line}: `{field}`: {message}")]
    Invalid { line: usize, field: String, message: String },
    #[error("line {line}: {source}")]
    Method { line: usize, source: RegistryError },
}

/// A catalog name or a full descriptor document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MethodRef {
    Name(String),
    Inline(MethodDescriptor),
}

/// A teacher given by spec name, optionally loaded from a checkpoint instead of trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TeacherRef {
    Spec(String),
    Detailed {
        spec: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checkpoint: Option<PathBuf>,
    },
}

impl TeacherRef {
    pub fn spec_name(&self) -> &str {
        match self {
            TeacherRef::Spec(s) | TeacherRef::Detailed { spec: s, .. } => s,
        }
    }

    pub fn checkpoint(&self) -> Option<&Path> {
        match self {
            TeacherRef::Spec(_) => None,
            TeacherRef::Detailed { checkpoint, .. } => checkpoint.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub teachers: Vec<TeacherRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub assistants: Vec<String>,
    pub student: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    /// Number of generated sequences.
    pub size: usize,
    pub seq: usize,
    /// Byte-level text file used instead of the generator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 7, size: 400, seq: 16, text: None }
    }
}

/// Memory-planner settings reported alongside a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub mp: usize,
    pub dp: usize,
    pub zero: bool,
    pub offload: bool,
    pub partition_gradients: bool,
    pub previous: bool,
    pub budget_gib: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { mp: 1, dp: 1, zero: false, offload: false, partition_gradients: false, previous: false, budget_gib: 40.0 }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_teacher_training() -> StageConfig {
    StageConfig { iterations: 500, snapshot_every: 0, ..StageConfig::default() }
}

/// A distillation job as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: MethodRef,
    pub models: ModelsConfig,
    #[serde(default)]
    pub stages: Vec<StageConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitStrategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    /// Loop settings for teachers trained on gold labels before distillation.
    #[serde(default = "default_teacher_training")]
    pub teacher_training: StageConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planner: Option<PlannerConfig>,
}

/// Resolved specs of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunModels {
    pub teachers: Vec<ModelSpec>,
    pub assistants: Vec<ModelSpec>,
    pub student: ModelSpec,
}

impl RunConfig {
    /// The descriptor; always inline after [`load_config`].
    pub fn descriptor(&self) -> Result<MethodDescriptor, RegistryError> {
        match &self.method {
            MethodRef::Name(n) => get_descriptor(n),
            MethodRef::Inline(d) => Ok(d.clone()),
        }
    }

    pub fn model_specs(&self) -> Result<RunModels, crate::model::ModelError> {
        Ok(RunModels {
            teachers: self.models.teachers.iter().map(|t| named_spec(t.spec_name())).collect::<Result<_, _>>()?,
            assistants: self.models.assistants.iter().map(|s| named_spec(s)).collect::<Result<_, _>>()?,
            student: named_spec(&self.models.student)?,
        })
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// 1-based line of the first occurrence of `"key"`, or 1.
fn line_of(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map_or(1, |i| i + 1)
}

/// serde_json appends " at line L column C"; the error carries those separately.
fn without_location(e: &serde_json::Error) -> String {
    let text = e.to_string();
    match text.rfind(" at line ") {
        Some(i) => text[..i].to_string(),
        None => text,
    }
}

/// Parse and validate a config, resolving the method inline and filling one
/// stage with default settings for every stage kind the method uses.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let mut cfg: RunConfig = match serde_path_to_error::deserialize(&mut de) {
        Ok(c) => c,
        Err(e) => {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let bare = without_location(&inner);
            let message = if path == "." { bare } else { format!("{path}: {bare}") };
            return Err(ConfigError::Parse { line: inner.line(), column: inner.column(), message });
        }
    };
    de.end()
        .map_err(|e| ConfigError::Parse { line: e.line(), column: e.column(), message: without_location(&e) })?;
    let invalid = |key: &str, field: &str, message: String| ConfigError::Invalid {
        line: line_of(text, key),
        field: field.to_string(),
        message,
    };
    let descriptor = cfg.descriptor().map_err(|e| ConfigError::Method { line: line_of(text, "method"), source: e })?;
    let problems = validate(&descriptor);
    if let Some(p) = problems.first() {
        return Err(invalid("method", &format!("method.{}", p.path), p.message.clone()));
    }
    if cfg.seeds.is_empty() {
        return Err(invalid("seeds", "seeds", "at least one seed is required".into()));
    }
    let models = cfg.model_specs().map_err(|e| invalid("models", "models", e.to_string()))?;
    if models.teachers.is_empty() {
        return Err(invalid("teachers", "models.teachers", "at least one teacher is required".into()));
    }
    match &descriptor.orchestration {
        Orchestration::MultiTeacher { .. } if models.teachers.len() < 2 => {
            return Err(invalid("teachers", "models.teachers", "multi-teacher methods need at least 2 teachers".into()));
        }
        Orchestration::AssistantChain { .. } if models.assistants.is_empty() => {
            return Err(invalid("models", "models.assistants", "assistant chains need at least one assistant".into()));
        }
        _ => {}
    }
    let vocab = models.student.vocab;
    if models.teachers.iter().chain(&models.assistants).any(|s| s.vocab != vocab) {
        return Err(invalid("models", "models", "all models must share one vocabulary".into()));
    }
    if cfg.data.seq > models.student.max_seq || cfg.data.seq < 4 {
        return Err(invalid("seq", "data.seq", format!("must lie in 4..={}", models.student.max_seq)));
    }
    for (i, s) in cfg.stages.iter().chain([&cfg.teacher_training]).enumerate() {
        s.validate().map_err(|e| invalid("stages", &format!("stages[{i}]"), e.to_string()))?;
    }
    let mut kinds: Vec<StageKind> = descriptor.stages.iter().map(|s| s.stage).collect();
    kinds.dedup();
    for kind in kinds {
        if !cfg.stages.iter().any(|s| s.kind == kind) {
            cfg.stages.push(StageConfig { kind, ..StageConfig::default() });
        }
    }
    cfg.method = MethodRef::Inline(descriptor);
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
  "method": "KD",
  "models": { "teachers": ["toy-teacher"], "student": "toy-student" }
}"#;

    #[test]
    fn minimal_config_resolves_catalog_method() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.descriptor().unwrap(), get_descriptor("KD").unwrap());
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.stages.len(), 1);
    }

    #[test]
    fn omitted_optimizer_gets_table_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        let s = &cfg.stages[0];
        assert_eq!(s.optim.eps, 1e-8);
        assert_eq!((s.optim.beta1, s.optim.beta2), (0.9, 0.999));
        assert_eq!((s.optim.warmup_ratio, s.optim.weight_decay, s.optim.clip), (0.1, 0.1, 0.1));
        assert_eq!((s.dropout, s.attention_dropout), (0.1, 0.1));
        assert!(cfg.to_text().contains("\"eps\": 1e-8"));
    }

    #[test]
    fn unknown_method_lists_catalog() {
        let err = parse_config(&MINIMAL.replace("\"KD\"", "\"NoSuchKD\"")).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, ConfigError::Method { line: 2, .. }), "{msg}");
        assert!(msg.contains("TinyBERT") && msg.contains("DGKD"), "{msg}");
    }

    #[test]
    fn errors_carry_lines() {
        let err = parse_config("{\n  \"method\": \"KD\",\n  \"models\": 3\n}").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 3, .. }), "{err}");
        let err = parse_config(&MINIMAL.replace("}\n}", "},\n  \"seeds\": []\n}")).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { line: 4, .. }), "{err}");
        let err = parse_config("{\n  \"method\": \"KD\",\n  \"models\": {},\n  \"bogus\": 1\n}").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn multi_teacher_needs_two() {
        let err = parse_config(&MINIMAL.replace("\"KD\"", "\"TMKD\"")).unwrap_err();
        assert!(err.to_string().contains("2 teachers"), "{err}");
    }
}
