//! Pre-LN transformer encoder with feature taps, parameter accounting,
//! student initialisation and the GKDCKPT1 checkpoint format.

mod checkpoint;
mod init;
mod spec;
mod transformer;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{TensorError, Var};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use init::{init_student, InitSource, InitStrategy};
pub use spec::{count_params, named_spec, spec_names, ModelSpec, TOY_MAX_SEQ, TOY_VOCAB};
pub use transformer::{apply_view, Bound, Forward, Taps, TokenBatch, TransformerModel, LN_EPS};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("unknown model spec `{name}` (known: {known})")]
    UnknownSpec { name: String, known: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("selector error: layer {layer} outside 1..={layers}")]
    Selector { layer: usize, layers: usize },
    #[error("strategy error: {0}")]
    Strategy(String),
    #[error("source error: {0}")]
    Source(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Feature vocabulary shared by taps, hooks and telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Emb,
    Att,
    Q,
    K,
    V,
    HS,
    Soft,
    Hard,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 8] = [
        FeatureKind::Emb,
        FeatureKind::Att,
        FeatureKind::Q,
        FeatureKind::K,
        FeatureKind::V,
        FeatureKind::HS,
        FeatureKind::Soft,
        FeatureKind::Hard,
    ];

    /// Whether the feature exists once per layer.
    pub fn is_layered(self) -> bool {
        matches!(self, FeatureKind::Att | FeatureKind::Q | FeatureKind::K | FeatureKind::V | FeatureKind::HS)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Emb => "Emb",
            FeatureKind::Att => "Att",
            FeatureKind::Q => "Q",
            FeatureKind::K => "K",
            FeatureKind::V => "V",
            FeatureKind::HS => "HS",
            FeatureKind::Soft => "Soft",
            FeatureKind::Hard => "Hard",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A feature at a layer. Layerless features (Emb, Soft, Hard) use layer 0;
/// layered features use 1-based layer numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TapKey {
    pub kind: FeatureKind,
    pub layer: usize,
}

impl TapKey {
    pub fn new(kind: FeatureKind, layer: usize) -> Self {
        Self { kind, layer: if kind.is_layered() { layer } else { 0 } }
    }

    pub fn global(kind: FeatureKind) -> Self {
        Self { kind, layer: 0 }
    }
}

impl fmt::Display for TapKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind.is_layered() {
            write!(f, "{}@{}", self.kind, self.layer)
        } else {
            write!(f, "{}", self.kind)
        }
    }
}

/// Which slice of the `(batch, seq, V)` logits counts as the model output.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum OutputView {
    /// Every position, flattened to `(batch·seq, V)`.
    #[default]
    Full,
    /// Selected flat positions, `(rows, V)`.
    Rows(Vec<usize>),
    /// Contiguous label columns at one position, `(batch, classes)`.
    Classify { position: usize, first_class: usize, classes: usize },
}

/// Requested feature set plus the output view used for Soft/Hard.
#[derive(Debug, Clone, Default)]
pub struct TapRequest {
    pub keys: BTreeSet<TapKey>,
    pub view: OutputView,
}

impl TapRequest {
    pub fn new(keys: impl IntoIterator<Item = TapKey>) -> Self {
        Self { keys: keys.into_iter().collect(), view: OutputView::Full }
    }

    pub fn with_view(mut self, view: OutputView) -> Self {
        self.view = view;
        self
    }

    /// Every feature at every layer of a model with `layers` layers.
    pub fn everything(layers: usize) -> Self {
        let mut keys = BTreeSet::new();
        for kind in FeatureKind::ALL {
            if kind.is_layered() {
                keys.extend((1..=layers).map(|l| TapKey::new(kind, l)));
            } else {
                keys.insert(TapKey::global(kind));
            }
        }
        Self { keys, view: OutputView::Full }
    }

    pub fn wants(&self, key: TapKey) -> bool {
        self.keys.contains(&key)
    }
}

/// Materialised features keyed by [`TapKey`]; holds graph handles.
pub type TapBundle = BTreeMap<TapKey, Var>;
