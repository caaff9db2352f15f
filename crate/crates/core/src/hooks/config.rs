use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::FeatureKind;

use super::schedule::{IterState, Schedule};
use super::HookError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Pretraining,
    Task,
}

/// Which model (or the gold labels) a hook reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Student,
    /// One teacher by 0-based index.
    Teacher(usize),
    /// Every teacher, combined by the run's multi-teacher policy.
    Teachers,
    /// One assistant by 0-based index.
    Assistant(usize),
    /// Gold labels of the batch (feature must be Hard).
    Gold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    #[default]
    Last,
    LastK(usize),
    /// 1-based layer.
    Index(usize),
    All,
    /// Student layer `i` ↔ teacher layer `⌈i·L_t/L_s⌉`; only meaningful on the teacher side.
    UniformMap,
    /// `k` layers drawn afresh each epoch from all but the last layer.
    RandomSubsetPerEpoch(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    /// `H ← HHᵀ/√d` per sequence.
    PairwiseScaledDot,
    /// First position only, L2-normalised.
    ClsNormalized,
}

/// Forward pass a hook reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    #[default]
    Base,
    /// The counterfactual pass produced by an interchange operation hook.
    Interchange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionHook {
    pub target: Target,
    pub feature: FeatureKind,
    #[serde(default, skip_serializing_if = "is_default")]
    pub layers: LayerSelector,
    #[serde(default, skip_serializing_if = "is_default")]
    pub transform: Transform,
    #[serde(default, skip_serializing_if = "is_default")]
    pub view: View,
}

impl ExtractionHook {
    pub fn new(target: Target, feature: FeatureKind) -> Self {
        Self { target, feature, layers: LayerSelector::Last, transform: Transform::None, view: View::Base }
    }

    pub fn layers(mut self, layers: LayerSelector) -> Self {
        self.layers = layers;
        self
    }

    pub fn transform(mut self, transform: Transform) -> Self {
        self.transform = transform;
        self
    }

    pub fn view(mut self, view: View) -> Self {
        self.view = view;
        self
    }
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DistanceKind {
    #[serde(rename = "MSE")]
    Mse,
    #[serde(rename = "KL")]
    Kl,
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "Cos")]
    Cos,
    #[serde(rename = "Huber")]
    Huber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    #[default]
    None,
    /// `softmax(QKᵀ/√d_head)`; the hook feature must be Q, K is read from the same layer.
    AttentionRelation,
    /// `softmax(VVᵀ/√d_head)`; the hook feature must be V.
    ValueRelation,
    /// `softmax(XXᵀ/√d_head)` for X = Q or K.
    QkRelation,
}

fn one() -> f64 {
    1.0
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceSpec {
    pub kind: DistanceKind,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "is_default")]
    pub relation: Relation,
    /// Head count for relations; defaults to the student's head count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_heads: Option<usize>,
    /// Huber threshold.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub delta: f64,
}

impl DistanceSpec {
    pub fn new(kind: DistanceKind) -> Self {
        Self { kind, temperature: 1.0, relation: Relation::None, relation_heads: None, delta: 1.0 }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn relation(mut self, r: Relation) -> Self {
        self.relation = r;
        self
    }

    pub fn validate(&self, field: &str) -> Result<(), HookError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(HookError::validation(field, format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(HookError::validation(field, format!("huber delta must be positive, got {}", self.delta)));
        }
        if self.relation_heads == Some(0) {
            return Err(HookError::validation(field, "relation_heads must be positive"));
        }
        Ok(())
    }
}

/// A term weight: a number, a named schedule, or an inline schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Value(f64),
    Named(String),
    Inline(Schedule),
}

impl Default for Weight {
    fn default() -> Self {
        Weight::Value(1.0)
    }
}

impl Weight {
    pub fn value(&self, schedules: &BTreeMap<String, Schedule>, state: &IterState) -> Result<f64, HookError> {
        Ok(match self {
            Weight::Value(v) => *v,
            Weight::Named(n) => schedules
                .get(n)
                .ok_or_else(|| HookError::validation("weight", format!("unknown schedule `{n}`")))?
                .value(state),
            Weight::Inline(s) => s.value(state),
        })
    }

    fn validate(&self, field: &str, schedules: &BTreeMap<String, Schedule>, lo: f64, hi: f64) -> Result<(), HookError> {
        match self {
            Weight::Value(v) if !(v.is_finite() && *v >= lo && *v <= hi) => {
                Err(HookError::validation(field, format!("{v} outside [{lo}, {hi}]")))
            }
            Weight::Value(_) => Ok(()),
            Weight::Named(n) if !schedules.contains_key(n) => {
                Err(HookError::validation(field, format!("unknown schedule `{n}`")))
            }
            Weight::Named(_) => Ok(()),
            Weight::Inline(s) => s.validate(),
        }
    }
}

fn is_default_weight(w: &Weight) -> bool {
    *w == Weight::Value(1.0)
}

/// How the per-layer features of a term are turned into one distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    /// Distance of each aligned pair, summed.
    #[default]
    Pointwise,
    /// Each student layer against a similarity-weighted mixture of all selected teacher layers.
    Alp,
    /// In-batch contrastive cosine objective on mean-pooled features.
    Contrastive,
    /// Token-pair distance and angle structures.
    Ckd,
    /// Token, span and sample relation structures.
    Mgskd,
    /// Teacher-layer mixture weighted by trainable query/key projections.
    Universal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossTerm {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub student: ExtractionHook,
    pub teacher: ExtractionHook,
    pub distance: DistanceSpec,
    #[serde(default, skip_serializing_if = "is_default_weight")]
    pub weight: Weight,
    /// Trainable student-to-teacher width map applied to the student feature.
    #[serde(default, skip_serializing_if = "is_default")]
    pub projection: bool,
    #[serde(default, skip_serializing_if = "is_default")]
    pub aggregate: Aggregate,
    /// Multiplier applied to teacher features before the distance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_scale: Option<Weight>,
}

impl LossTerm {
    pub fn new(student: ExtractionHook, teacher: ExtractionHook, distance: DistanceSpec) -> Self {
        Self {
            name: None,
            student,
            teacher,
            distance,
            weight: Weight::default(),
            projection: false,
            aggregate: Aggregate::Pointwise,
            teacher_scale: None,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn weight(mut self, w: Weight) -> Self {
        self.weight = w;
        self
    }

    pub fn projected(mut self) -> Self {
        self.projection = true;
        self
    }

    pub fn aggregate(mut self, a: Aggregate) -> Self {
        self.aggregate = a;
        self
    }

    /// Name used in breakdowns and error messages.
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mut s = format!("{}:{:?}", self.student.feature, self.distance.kind).replace("Mse", "MSE");
        if self.teacher.target == Target::Gold {
            s.push_str(":gold");
        }
        if self.distance.relation != Relation::None {
            s.push_str(&format!(":{:?}", self.distance.relation));
        }
        s
    }

    /// Identity used to deduplicate terms when combining descriptors.
    pub fn identity(&self) -> TermIdentity {
        TermIdentity {
            feature: self.student.feature,
            layers: self.student.layers,
            relation: self.distance.relation,
            target: self.teacher.target,
            target_feature: self.teacher.feature,
            view: self.student.view,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TermIdentity {
    pub feature: FeatureKind,
    pub layers: LayerSelector,
    pub relation: Relation,
    pub target: Target,
    pub target_feature: FeatureKind,
    pub view: View,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerDropMode {
    /// Layers `1..=n` are active.
    Prefix,
    /// Only layer `n` is active.
    Progressive,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OperationHook {
    /// Each student block is replaced by its aligned teacher block group with this probability.
    ReplaceBlock {
        probability: Weight,
        #[serde(default)]
        teacher: usize,
    },
    /// Swap a leading slice of hidden units at a sampled aligned layer with those of another input.
    Interchange {
        #[serde(default = "half")]
        dims_fraction: f64,
        #[serde(default)]
        teacher: usize,
    },
    /// Restrict layered loss terms to the active student layers; `active` gives the count `n`.
    LayerDrop { mode: LayerDropMode, active: Weight },
    /// Student parameters whose names start with any prefix are not updated.
    Freeze { params: Vec<String> },
}

/// One stage of a method: what to extract, how to modify the forward, and the losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HookConfig {
    pub stage: StageKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub operation_hooks: Vec<OperationHook>,
    pub loss_terms: Vec<LossTerm>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub schedules: BTreeMap<String, Schedule>,
}

impl HookConfig {
    pub fn new(stage: StageKind, loss_terms: Vec<LossTerm>) -> Self {
        Self { stage, operation_hooks: Vec::new(), loss_terms, schedules: BTreeMap::new() }
    }

    pub fn validate(&self) -> Result<(), HookError> {
        for (name, s) in &self.schedules {
            s.validate().map_err(|e| e.at(&format!("schedules.{name}")))?;
        }
        if self.loss_terms.is_empty() {
            return Err(HookError::validation("loss_terms", "at least one loss term is required"));
        }
        for (i, t) in self.loss_terms.iter().enumerate() {
            let f = format!("loss_terms[{i}]");
            validate_term(t, &self.schedules).map_err(|e| e.at(&f))?;
        }
        for (i, h) in self.operation_hooks.iter().enumerate() {
            let f = format!("operation_hooks[{i}]");
            match h {
                OperationHook::ReplaceBlock { probability, .. } => {
                    probability.validate(&format!("{f}.probability"), &self.schedules, 0.0, 1.0)?
                }
                OperationHook::Interchange { dims_fraction, .. } => {
                    if !(*dims_fraction > 0.0 && *dims_fraction <= 1.0) {
                        return Err(HookError::validation(
                            &format!("{f}.dims_fraction"),
                            format!("{dims_fraction} outside (0, 1]"),
                        ));
                    }
                }
                OperationHook::LayerDrop { active, .. } => {
                    active.validate(&format!("{f}.active"), &self.schedules, 1.0, f64::MAX)?
                }
                OperationHook::Freeze { params } => {
                    if params.is_empty() {
                        return Err(HookError::validation(&format!("{f}.params"), "empty parameter list"));
                    }
                }
            }
        }
        Ok(())
    }
}

fn validate_term(t: &LossTerm, schedules: &BTreeMap<String, Schedule>) -> Result<(), HookError> {
    use FeatureKind as F;
    t.weight.validate("weight", schedules, 0.0, f64::MAX)?;
    if let Some(s) = &t.teacher_scale {
        s.validate("teacher_scale", schedules, 0.0, f64::MAX)?;
    }
    t.distance.validate("distance")?;
    if t.student.target != Target::Student {
        return Err(HookError::validation("student.target", "the student side must target the student"));
    }
    if t.teacher.target == Target::Student {
        return Err(HookError::validation("teacher.target", "the teacher side cannot target the student"));
    }
    if t.teacher.target == Target::Gold && t.teacher.feature != F::Hard {
        return Err(HookError::validation("teacher.feature", "gold targets provide only Hard labels"));
    }
    if matches!(t.student.feature, F::Hard) {
        return Err(HookError::validation("student.feature", "Hard labels are not differentiable"));
    }
    let sf = t.student.feature;
    let tf = t.teacher.feature;
    let compatible = sf == tf || (sf == F::Soft && tf == F::Hard);
    if !compatible {
        return Err(HookError::validation("teacher.feature", format!("{tf} cannot be compared with student {sf}")));
    }
    if tf == F::Hard && t.distance.kind != DistanceKind::Ce {
        return Err(HookError::validation("distance.kind", "Hard labels need CE"));
    }
    match t.distance.relation {
        Relation::None => {}
        Relation::AttentionRelation if sf != F::Q => {
            return Err(HookError::validation("distance.relation", "attention_relation reads Q (and K) features"))
        }
        Relation::ValueRelation if sf != F::V => {
            return Err(HookError::validation("distance.relation", "value_relation needs the V feature"))
        }
        Relation::QkRelation if !matches!(sf, F::Q | F::K) => {
            return Err(HookError::validation("distance.relation", "qk_relation needs Q or K"))
        }
        _ => {}
    }
    if t.student.transform != Transform::None && !matches!(sf, F::Emb | F::Q | F::K | F::V | F::HS) {
        return Err(HookError::validation("student.transform", format!("{sf} does not take a transform")));
    }
    if t.student.transform != t.teacher.transform {
        return Err(HookError::validation("teacher.transform", "student and teacher transforms differ"));
    }
    match t.aggregate {
        Aggregate::Pointwise => {}
        Aggregate::Alp | Aggregate::Universal if sf != F::HS => {
            return Err(HookError::validation("aggregate", format!("{:?} mixes HS layers only", t.aggregate)))
        }
        Aggregate::Contrastive | Aggregate::Ckd | Aggregate::Mgskd if !matches!(sf, F::HS | F::Emb) => {
            return Err(HookError::validation("aggregate", format!("{:?} needs token features (Emb or HS)", t.aggregate)))
        }
        _ => {}
    }
    if matches!(t.student.layers, LayerSelector::UniformMap) {
        return Err(HookError::validation("student.layers", "uniform_map is a teacher-side selector"));
    }
    for (side, sel) in [("student.layers", t.student.layers), ("teacher.layers", t.teacher.layers)] {
        match sel {
            LayerSelector::LastK(0) | LayerSelector::RandomSubsetPerEpoch(0) => {
                return Err(HookError::validation(side, "count must be positive"))
            }
            LayerSelector::Index(0) => return Err(HookError::validation(side, "layers are numbered from 1")),
            _ => {}
        }
    }
    Ok(())
}

/// Parse and validate one stage's hook configuration document.
pub fn parse_hook_config(text: &str) -> Result<HookConfig, HookError> {
    let cfg: HookConfig = from_json_text(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Deserialize JSON, classifying syntax errors (with location) separately from
/// schema errors (with the offending field path).
pub fn from_json_text<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, HookError> {
    let syntax = |e: serde_json::Error| HookError::Parse { line: e.line(), column: e.column(), message: e.to_string() };
    let mut de = serde_json::Deserializer::from_str(text);
    let value = match serde_path_to_error::deserialize::<_, T>(&mut de) {
        Ok(v) => v,
        Err(e) => {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if inner.is_syntax() || inner.is_eof() {
                return Err(syntax(inner));
            }
            let field = if path == "." { "document".to_string() } else { path };
            return Err(HookError::Validation { field, message: inner.to_string() });
        }
    };
    de.end().map_err(syntax)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_soft_kl() {
        let cfg = parse_hook_config(
            r#"{"stage":"task","loss_terms":[{
                "student":{"target":"student","feature":"Soft"},
                "teacher":{"target":{"teacher":0},"feature":"Soft"},
                "distance":{"kind":"KL","temperature":10},
                "weight":1}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.loss_terms.len(), 1);
        assert!(cfg.operation_hooks.is_empty());
        assert_eq!(cfg.loss_terms[0].distance.temperature, 10.0);
    }

    #[test]
    fn negative_weight_rejected() {
        let err = parse_hook_config(
            r#"{"stage":"task","loss_terms":[{
                "student":{"target":"student","feature":"Soft"},
                "teacher":{"target":"gold","feature":"Hard"},
                "distance":{"kind":"CE"},"weight":-1}]}"#,
        )
        .unwrap_err();
        match err {
            HookError::Validation { field, .. } => assert!(field.contains("loss_terms[0]"), "{field}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_enums_name_the_field() {
        let err = parse_hook_config(r#"{"stage":"task","loss_terms":[],"extra":1}"#).unwrap_err();
        assert!(matches!(err, HookError::Validation { .. }), "{err:?}");
        let err = parse_hook_config(
            r#"{"stage":"task","loss_terms":[{
                "student":{"target":"student","feature":"Bogus"},
                "teacher":{"target":"gold","feature":"Hard"},
                "distance":{"kind":"CE"}}]}"#,
        )
        .unwrap_err();
        match err {
            HookError::Validation { field, .. } => assert_eq!(field, "loss_terms[0].student.feature"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_error_has_location() {
        let err = parse_hook_config("{\n  \"stage\": \"task\",\n  oops\n}").unwrap_err();
        match err {
            HookError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weight_forms() {
        let w: Weight = serde_json::from_str("0.5").unwrap();
        assert_eq!(w, Weight::Value(0.5));
        let w: Weight = serde_json::from_str("\"ramp\"").unwrap();
        assert_eq!(w, Weight::Named("ramp".into()));
        let w: Weight = serde_json::from_str(r#"{"kind":"constant","value":2}"#).unwrap();
        assert_eq!(w, Weight::Inline(Schedule::constant(2.0)));
    }

    #[test]
    fn round_trip() {
        let mut cfg = HookConfig::new(
            StageKind::Pretraining,
            vec![LossTerm::new(
                ExtractionHook::new(Target::Student, FeatureKind::HS).layers(LayerSelector::All),
                ExtractionHook::new(Target::Teacher(0), FeatureKind::HS).layers(LayerSelector::UniformMap),
                DistanceSpec::new(DistanceKind::Mse),
            )
            .projected()],
        );
        cfg.operation_hooks.push(OperationHook::LayerDrop { mode: LayerDropMode::Prefix, active: Weight::Named("grow".into()) });
        cfg.schedules.insert("grow".into(), Schedule::linear(1.0, 3.0, super::super::Domain::Epoch));
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse_hook_config(&text).unwrap(), cfg);
    }
}
