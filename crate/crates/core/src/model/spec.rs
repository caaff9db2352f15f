use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture description of a transformer encoder.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl ModelSpec {
    pub fn new(name: &str, dim: usize, layers: usize, heads: usize, vocab: usize, max_seq: usize) -> Result<Self, ModelError> {
        let spec = Self { name: name.to_string(), dim, layers, heads, vocab, max_seq };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.vocab == 0 || self.max_seq == 0 {
            return Err(ModelError::Spec(format!("{}: every extent must be at least 1", self.name)));
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::Spec(format!(
                "{}: dim {} is not divisible by {} heads",
                self.name, self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn param_count(&self) -> u64 {
        count_params(self)
    }
}

/// Exact number of trainable scalars in a [`super::TransformerModel`] built from `spec`.
///
/// `V·d + 2·S·d + L·(12d² + 13d) + 4d`: token and two positional tables,
/// per-layer attention (4d² + 4d), FFN (8d² + 5d) and two layernorms (4d),
/// plus the embedding and final layernorms.
pub fn count_params(spec: &ModelSpec) -> u64 {
    let (d, l, v, s) = (spec.dim as u64, spec.layers as u64, spec.vocab as u64, spec.max_seq as u64);
    v * d + 2 * s * d + l * (12 * d * d + 13 * d) + 4 * d
}

/// Vocabulary of the toy-scale models.
pub const TOY_VOCAB: usize = 256;
/// Maximum sequence length of the toy-scale models.
pub const TOY_MAX_SEQ: usize = 64;

const BERT_VOCAB: usize = 30592;
const GLM_VOCAB: usize = 50304;

// (name, d, L, heads, V, S)
const TABLE: &[(&str, usize, usize, usize, usize, usize)] = &[
    ("22M", 384, 6, 12, BERT_VOCAB, 512),
    ("66M", 768, 6, 12, BERT_VOCAB, 512),
    ("110M", 768, 12, 12, BERT_VOCAB, 512),
    ("200M", 1024, 14, 16, BERT_VOCAB, 512),
    ("340M", 1024, 24, 16, BERT_VOCAB, 512),
    ("1B", 1728, 26, 64, GLM_VOCAB, 1024),
    ("1.2B", 1792, 28, 64, GLM_VOCAB, 1024),
    ("1.5B", 1984, 30, 64, GLM_VOCAB, 1024),
    ("2B", 2048, 36, 64, GLM_VOCAB, 1024),
    ("5B", 3264, 38, 64, GLM_VOCAB, 1024),
    ("6B", 3456, 40, 64, GLM_VOCAB, 1024),
    ("7.5B", 3776, 42, 64, GLM_VOCAB, 1024),
    ("10B", 4096, 48, 64, GLM_VOCAB, 1024),
    ("13B", 4736, 48, 64, GLM_VOCAB, 1024),
    ("18B", 5248, 54, 64, GLM_VOCAB, 1024),
    ("20B", 5440, 56, 64, GLM_VOCAB, 1024),
    ("22B", 5504, 60, 64, GLM_VOCAB, 1024),
    ("25B", 5632, 64, 64, GLM_VOCAB, 1024),
    ("50B", 8000, 64, 64, GLM_VOCAB, 1024),
    ("65B", 9152, 64, 64, GLM_VOCAB, 1024),
    ("90B", 10624, 66, 64, GLM_VOCAB, 1024),
    ("100B", 11008, 68, 64, GLM_VOCAB, 1024),
    ("110B", 11392, 70, 64, GLM_VOCAB, 1024),
    ("toy-teacher", 64, 4, 4, TOY_VOCAB, TOY_MAX_SEQ),
    ("toy-assistant", 48, 3, 4, TOY_VOCAB, TOY_MAX_SEQ),
    ("toy-assistant-small", 40, 2, 4, TOY_VOCAB, TOY_MAX_SEQ),
    ("toy-student", 32, 2, 4, TOY_VOCAB, TOY_MAX_SEQ),
];

/// Names accepted by [`named_spec`], in table order.
pub fn spec_names() -> Vec<&'static str> {
    TABLE.iter().map(|r| r.0).collect()
}

/// Built-in architecture by name (e.g. `"110M"`, `"10B"`, `"toy-student"`).
pub fn named_spec(name: &str) -> Result<ModelSpec, ModelError> {
    TABLE
        .iter()
        .find(|r| r.0 == name)
        .map(|&(n, d, l, h, v, s)| ModelSpec { name: n.to_string(), dim: d, layers: l, heads: h, vocab: v, max_seq: s })
        .ok_or_else(|| ModelError::UnknownSpec { name: name.to_string(), known: spec_names().join(", ") })
}
