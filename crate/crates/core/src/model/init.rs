use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

use super::{load_checkpoint, ModelError, ModelSpec, TransformerModel};

/// How a student's parameters are initialised before distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    Random,
    TruncateTeacher,
    PretrainedStudent,
    DistilledStudent,
}

/// Where non-random strategies take their parameters from.
#[derive(Debug, Clone, Copy)]
pub enum InitSource<'a> {
    None,
    Model(&'a TransformerModel),
    Checkpoint(&'a PathBuf),
}

pub fn init_student(
    strategy: InitStrategy,
    spec: &ModelSpec,
    source: InitSource<'_>,
    rng: &mut Rng,
) -> Result<TransformerModel, ModelError> {
    spec.validate()?;
    match strategy {
        InitStrategy::Random => TransformerModel::random(spec, rng),
        InitStrategy::TruncateTeacher => {
            let InitSource::Model(teacher) = source else {
                return Err(ModelError::Source("truncate-teacher needs a teacher model".into()));
            };
            truncate(teacher, spec)
        }
        InitStrategy::PretrainedStudent | InitStrategy::DistilledStudent => {
            let model = match source {
                InitSource::Checkpoint(path) => {
                    if !path.exists() {
                        return Err(ModelError::Source(format!("checkpoint {} does not exist", path.display())));
                    }
                    load_checkpoint(path)?
                }
                InitSource::Model(m) => m.clone(),
                InitSource::None => {
                    return Err(ModelError::Source(format!("{strategy:?} needs a checkpoint")));
                }
            };
            let s = model.spec();
            if (s.dim, s.layers, s.heads, s.vocab, s.max_seq) != (spec.dim, spec.layers, spec.heads, spec.vocab, spec.max_seq) {
                return Err(ModelError::Strategy(format!(
                    "checkpoint architecture `{}` does not match student `{}`",
                    s.name, spec.name
                )));
            }
            Ok(model)
        }
    }
}

/// Copy embeddings, the first `L_student` layers and the final layernorm.
fn truncate(teacher: &TransformerModel, spec: &ModelSpec) -> Result<TransformerModel, ModelError> {
    let t = teacher.spec();
    if t.dim != spec.dim || t.heads != spec.heads || t.vocab != spec.vocab || t.max_seq != spec.max_seq {
        return Err(ModelError::Strategy(format!(
            "truncation needs matching width: teacher d={} heads={} V={} S={}, student d={} heads={} V={} S={}",
            t.dim, t.heads, t.vocab, t.max_seq, spec.dim, spec.heads, spec.vocab, spec.max_seq
        )));
    }
    if t.layers < spec.layers {
        return Err(ModelError::Strategy(format!(
            "teacher has {} layers, student needs {}",
            t.layers, spec.layers
        )));
    }
    let mut keep: Vec<usize> = teacher.global_indices();
    for l in 1..=spec.layers {
        keep.extend(teacher.layer_range(l));
    }
    keep.sort_unstable();
    let named = keep
        .into_iter()
        .map(|i| (teacher.names()[i].clone(), teacher.tensors()[i].clone()))
        .collect();
    TransformerModel::from_named(spec, named)
}
