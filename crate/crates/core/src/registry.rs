//! Built-in distillation methods as hook descriptors, and their combination.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hooks::{
    from_json_text, Aggregate, DistanceKind, DistanceSpec, Domain, ExtractionHook, HookConfig, HookError,
    LayerDropMode, LayerSelector, LossTerm, OperationHook, Relation, Schedule, StageKind, Target, Transform, View,
    Weight,
};
use crate::model::{count_params, named_spec, FeatureKind, InitStrategy, ModelSpec};

/// How several teachers are weighed against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherPolicy {
    /// Averaged soft targets.
    Tmkd,
    /// Every teacher's loss with weight 1.
    MtBert,
    /// Soft targets weighted by inverse prediction entropy.
    Uncertainty,
    /// One teacher per batch, chosen by a reward-driven bandit.
    RlKd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Orchestration {
    SingleTeacher,
    MultiTeacher {
        policy: TeacherPolicy,
    },
    /// Teacher ⇒ assistants ⇒ student. With `accumulate`, every link also
    /// learns from all earlier models in the chain.
    AssistantChain {
        specs: Vec<String>,
        #[serde(default)]
        accumulate: bool,
    },
}

impl Orchestration {
    fn mode(&self) -> &'static str {
        match self {
            Orchestration::SingleTeacher => "single_teacher",
            Orchestration::MultiTeacher { .. } => "multi_teacher",
            Orchestration::AssistantChain { .. } => "assistant_chain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodDescriptor {
    pub name: String,
    pub orchestration: Orchestration,
    pub init_strategy: InitStrategy,
    /// Stage hook configs in execution order.
    pub stages: Vec<HookConfig>,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown method `{name}`; known methods: {}", known.join(", "))]
    UnknownMethod { name: String, known: Vec<String> },
    #[error("cannot combine descriptors: {0}")]
    Combination(String),
    #[error(transparent)]
    Document(#[from] HookError),
}

/// A problem found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Names of the built-in catalog, in catalog order.
pub const METHOD_NAMES: [&str; 25] = [
    "KD",
    "PD",
    "PKD",
    "DistilBERT",
    "Theseus",
    "TinyBERT",
    "MobileBERT",
    "SID",
    "MiniLM",
    "MiniLMv2",
    "ALP-KD",
    "LRC-BERT",
    "Annealing-KD",
    "CKD",
    "Universal-KD",
    "DIITO",
    "Continuation-KD",
    "RAIL-KD",
    "MGSKD",
    "TMKD",
    "MT-BERT",
    "RL-KD",
    "Uncertainty",
    "TAKD",
    "DGKD",
];

/// Softmax temperature of the built-in soft-label terms.
pub const SOFT_TEMPERATURE: f64 = 2.0;

/// Paper-scale chain used by the assistant methods.
pub const ASSISTANT_CHAIN: [&str; 4] = ["340M", "200M", "110M", "66M"];

// ----- term builders ---------------------------------------------------

fn student(f: FeatureKind) -> ExtractionHook {
    ExtractionHook::new(Target::Student, f)
}

fn teacher(f: FeatureKind) -> ExtractionHook {
    ExtractionHook::new(Target::Teacher(0), f)
}

fn term(f: FeatureKind, kind: DistanceKind) -> LossTerm {
    LossTerm::new(student(f), teacher(f), DistanceSpec::new(kind))
}

fn soft(kind: DistanceKind) -> LossTerm {
    LossTerm::new(student(FeatureKind::Soft), teacher(FeatureKind::Soft), DistanceSpec::new(kind).temperature(SOFT_TEMPERATURE))
}

fn soft_from(target: Target, kind: DistanceKind) -> LossTerm {
    let mut t = soft(kind);
    t.teacher.target = target;
    t
}

fn hard() -> LossTerm {
    LossTerm::new(
        student(FeatureKind::Soft),
        ExtractionHook::new(Target::Gold, FeatureKind::Hard),
        DistanceSpec::new(DistanceKind::Ce),
    )
}

/// Layered feature, every student layer against its uniformly mapped teacher layer.
fn mapped(f: FeatureKind, kind: DistanceKind) -> LossTerm {
    let mut t = term(f, kind);
    t.student.layers = LayerSelector::All;
    t.teacher.layers = LayerSelector::UniformMap;
    t
}

fn last_relation(f: FeatureKind, relation: Relation) -> LossTerm {
    let mut t = term(f, DistanceKind::Kl);
    t.distance = t.distance.relation(relation);
    t
}

fn emb_mse() -> LossTerm {
    term(FeatureKind::Emb, DistanceKind::Mse).projected()
}

fn hs_mse() -> LossTerm {
    mapped(FeatureKind::HS, DistanceKind::Mse).projected()
}

fn att_mse() -> LossTerm {
    mapped(FeatureKind::Att, DistanceKind::Mse)
}

fn kd() -> Vec<LossTerm> {
    vec![soft(DistanceKind::Ce), hard()]
}

/// A stage trained on gold labels only.
pub fn hard_label_stage(kind: StageKind) -> HookConfig {
    HookConfig::new(kind, vec![hard()])
}

fn stage(kind: StageKind, terms: Vec<LossTerm>) -> HookConfig {
    HookConfig::new(kind, terms)
}

fn with_hooks(mut cfg: HookConfig, hooks: Vec<OperationHook>) -> HookConfig {
    cfg.operation_hooks = hooks;
    cfg
}

fn with_schedule(mut cfg: HookConfig, name: &str, s: Schedule) -> HookConfig {
    cfg.schedules.insert(name.to_string(), s);
    cfg
}

fn single(name: &str, init: InitStrategy, stages: Vec<HookConfig>) -> MethodDescriptor {
    MethodDescriptor { name: name.to_string(), orchestration: Orchestration::SingleTeacher, init_strategy: init, stages }
}

fn multi(name: &str, policy: TeacherPolicy, terms: Vec<LossTerm>) -> MethodDescriptor {
    MethodDescriptor {
        name: name.to_string(),
        orchestration: Orchestration::MultiTeacher { policy },
        init_strategy: InitStrategy::Random,
        stages: vec![stage(StageKind::Task, terms)],
    }
}

fn build(name: &str) -> Option<MethodDescriptor> {
    use DistanceKind::*;
    use FeatureKind as F;
    use InitStrategy::*;
    use StageKind::*;
    Some(match name {
        "KD" => single(name, Random, vec![stage(Task, kd())]),
        "PD" => single(name, PretrainedStudent, vec![stage(Task, kd())]),
        "PKD" => {
            let mut pt = mapped(F::HS, Mse).projected();
            pt.student.transform = Transform::ClsNormalized;
            pt.teacher.transform = Transform::ClsNormalized;
            let mut terms = vec![pt];
            terms.extend(kd());
            single(name, TruncateTeacher, vec![stage(Task, terms)])
        }
        "DistilBERT" => {
            let cos = term(F::HS, Cos).projected();
            single(
                name,
                TruncateTeacher,
                vec![stage(Pretraining, vec![soft(Ce), cos, hard()]), stage(Task, vec![hard()])],
            )
        }
        "Theseus" => {
            // Successor replacement rate rises 0.3 → 1.0, so the chance of
            // running the teacher's block falls 0.7 → 0.
            let cfg = with_hooks(
                stage(Task, vec![hard()]),
                vec![OperationHook::ReplaceBlock {
                    probability: Weight::Inline(Schedule::linear(0.7, 0.0, Domain::Progress)),
                    teacher: 0,
                }],
            );
            single(name, Random, vec![cfg])
        }
        "TinyBERT" => {
            let feats = vec![emb_mse(), att_mse(), hs_mse()];
            let mut task = feats.clone();
            task.push(soft(Ce));
            single(name, Random, vec![stage(Pretraining, feats), stage(Task, task)])
        }
        "MobileBERT" => {
            // One phase per student layer: only the active layer is matched.
            let progressive = with_schedule(
                with_hooks(
                    stage(Pretraining, vec![hs_mse(), att_mse()]),
                    vec![OperationHook::LayerDrop { mode: LayerDropMode::Progressive, active: Weight::Named("layer".into()) }],
                ),
                "layer",
                Schedule::Phase { boundaries: vec![0.5], values: vec![1.0, 2.0], domain: Domain::Progress },
            );
            single(name, Random, vec![progressive, stage(Task, vec![soft(Kl), hard()])])
        }
        "SID" => {
            let cfg = with_schedule(
                with_hooks(
                    stage(Task, vec![hs_mse(), soft(Kl), hard()]),
                    vec![OperationHook::LayerDrop { mode: LayerDropMode::Prefix, active: Weight::Named("active".into()) }],
                ),
                "active",
                Schedule::Phase {
                    boundaries: (1..24).map(f64::from).collect(),
                    values: (1..25).map(f64::from).collect(),
                    domain: Domain::Epoch,
                },
            );
            single(name, Random, vec![cfg])
        }
        "MiniLM" => single(
            name,
            Random,
            vec![
                stage(
                    Pretraining,
                    vec![last_relation(F::Q, Relation::AttentionRelation), last_relation(F::V, Relation::ValueRelation)],
                ),
                stage(Task, vec![hard()]),
            ],
        ),
        "MiniLMv2" => {
            let rel = vec![
                last_relation(F::Q, Relation::QkRelation),
                last_relation(F::K, Relation::QkRelation),
                last_relation(F::V, Relation::ValueRelation),
            ];
            single(name, Random, vec![stage(Pretraining, rel.clone()), stage(Task, rel)])
        }
        "ALP-KD" => {
            let mut alp = term(F::HS, Mse).projected().aggregate(Aggregate::Alp);
            alp.student.layers = LayerSelector::All;
            alp.teacher.layers = LayerSelector::All;
            let mut terms = vec![alp];
            terms.extend(kd());
            single(name, Random, vec![stage(Task, terms)])
        }
        "LRC-BERT" => {
            let mut c = mapped(F::HS, Cos).projected().aggregate(Aggregate::Contrastive);
            c.distance.temperature = 0.5;
            let mut terms = vec![c];
            terms.extend(kd());
            single(name, Random, vec![stage(Task, terms)])
        }
        "Annealing-KD" => {
            let mut anneal = LossTerm::new(student(F::Soft), teacher(F::Soft), DistanceSpec::new(Mse));
            anneal.teacher_scale = Some(Weight::Inline(Schedule::AnnealPhi { t_max: 10.0, horizon: None, domain: Domain::Progress }));
            single(name, Random, vec![stage(Task, vec![anneal]), stage(Task, vec![hard()])])
        }
        "CKD" => {
            let mut terms = vec![mapped(F::HS, Huber).aggregate(Aggregate::Ckd)];
            terms.extend(kd());
            single(name, Random, vec![stage(Task, terms)])
        }
        "Universal-KD" => {
            let mut u = term(F::HS, Mse).projected().aggregate(Aggregate::Universal);
            u.student.layers = LayerSelector::All;
            u.teacher.layers = LayerSelector::All;
            let mut terms = vec![u];
            terms.extend(kd());
            single(name, Random, vec![stage(Task, terms)])
        }
        "DIITO" => {
            let mut iit = soft(Kl);
            iit.student.view = View::Interchange;
            iit.teacher.view = View::Interchange;
            let mut terms = vec![iit];
            terms.extend(kd());
            let cfg = with_hooks(stage(Task, terms), vec![OperationHook::Interchange { dims_fraction: 0.5, teacher: 0 }]);
            single(name, Random, vec![cfg])
        }
        "Continuation-KD" => {
            let blend = |start: f64, end: f64| Weight::Inline(Schedule::Linear { start, end, horizon: None, domain: Domain::Epoch });
            let terms = vec![soft(Ce).weight(blend(1.0, 0.0)), hard().weight(blend(0.0, 1.0))];
            single(name, Random, vec![stage(Task, terms)])
        }
        "RAIL-KD" => {
            let mut r = term(F::HS, Mse).projected();
            r.student.layers = LayerSelector::All;
            r.teacher.layers = LayerSelector::RandomSubsetPerEpoch(2);
            let mut terms = vec![r];
            terms.extend(kd());
            single(name, TruncateTeacher, vec![stage(Task, terms)])
        }
        "MGSKD" => {
            let mut emb = term(F::Emb, Huber).aggregate(Aggregate::Mgskd);
            emb.distance.delta = 1.0;
            let hs = mapped(F::HS, Huber).aggregate(Aggregate::Mgskd);
            single(
                name,
                Random,
                vec![stage(Pretraining, vec![emb_mse(), att_mse(), hs_mse()]), stage(Task, vec![emb, hs, soft(Kl)])],
            )
        }
        "TMKD" => multi(name, TeacherPolicy::Tmkd, vec![soft_from(Target::Teachers, Ce), hard()]),
        "MT-BERT" => {
            let mut hs = term(F::HS, Mse).projected();
            hs.teacher.target = Target::Teachers;
            multi(name, TeacherPolicy::MtBert, vec![soft_from(Target::Teachers, Ce), hs, hard()])
        }
        "RL-KD" => multi(name, TeacherPolicy::RlKd, vec![soft_from(Target::Teachers, Ce), hard()]),
        "Uncertainty" => multi(name, TeacherPolicy::Uncertainty, vec![soft_from(Target::Teachers, Ce), hard()]),
        "TAKD" | "DGKD" => {
            let accumulate = name == "DGKD";
            let target = if accumulate { Target::Teachers } else { Target::Teacher(0) };
            MethodDescriptor {
                name: name.to_string(),
                orchestration: Orchestration::AssistantChain {
                    specs: ASSISTANT_CHAIN.iter().map(|s| s.to_string()).collect(),
                    accumulate,
                },
                init_strategy: Random,
                stages: vec![stage(Task, vec![soft_from(target, Ce), hard()])],
            }
        }
        "BestC" => best_c(),
        "soft-KL" => soft_kl(),
        _ => return None,
    })
}

/// The 25 built-in methods.
pub fn catalog() -> Vec<MethodDescriptor> {
    METHOD_NAMES.iter().map(|n| build(n).expect("catalog entry")).collect()
}

/// Built-in method by name. `BestC` and `soft-KL` resolve alongside the catalog.
pub fn get_descriptor(name: &str) -> Result<MethodDescriptor, RegistryError> {
    build(name).ok_or_else(|| RegistryError::UnknownMethod {
        name: name.to_string(),
        known: METHOD_NAMES.iter().chain(["BestC", "soft-KL"].iter()).map(|s| s.to_string()).collect(),
    })
}

/// Embedding and hidden-state MSE, query/key/value self-relation KL on the last
/// layer, and soft labels (KL when pre-training, CE on the task).
pub fn best_c() -> MethodDescriptor {
    use FeatureKind as F;
    let relations = || {
        vec![
            last_relation(F::Q, Relation::QkRelation),
            last_relation(F::K, Relation::QkRelation),
            last_relation(F::V, Relation::ValueRelation),
        ]
    };
    let mut pre = vec![emb_mse(), hs_mse()];
    pre.extend(relations());
    pre.push(soft(DistanceKind::Kl));
    let mut task = vec![emb_mse(), hs_mse()];
    task.extend(relations());
    task.push(soft(DistanceKind::Ce));
    single(
        "BestC",
        InitStrategy::Random,
        vec![stage(StageKind::Pretraining, pre), stage(StageKind::Task, task)],
    )
}

/// Pre-training on the teacher's soft labels with KL, nothing else.
pub fn soft_kl() -> MethodDescriptor {
    single("soft-KL", InitStrategy::Random, vec![stage(StageKind::Pretraining, vec![soft(DistanceKind::Kl)])])
}

/// Copy of `desc` with every term on `feature` removed (stages left empty are dropped).
pub fn without_feature(desc: &MethodDescriptor, feature: FeatureKind) -> MethodDescriptor {
    let mut out = desc.clone();
    for s in &mut out.stages {
        s.loss_terms.retain(|t| t.student.feature != feature);
    }
    out.stages.retain(|s| !s.loss_terms.is_empty());
    out.name = format!("{}-{}", desc.name, feature);
    out
}

/// Union of the descriptors' terms per stage kind, first occurrence winning on
/// duplicates of (feature, layers, relation, target); operation hooks and
/// schedules are merged; `overrides` then replace distances per student feature.
pub fn combine(
    descs: &[MethodDescriptor],
    overrides: &BTreeMap<FeatureKind, DistanceSpec>,
) -> Result<MethodDescriptor, RegistryError> {
    let first = descs.first().ok_or_else(|| RegistryError::Combination("nothing to combine".into()))?;
    for d in &descs[1..] {
        if d.orchestration.mode() != first.orchestration.mode() {
            return Err(RegistryError::Combination(format!(
                "`{}` is {} but `{}` is {}",
                first.name,
                first.orchestration.mode(),
                d.name,
                d.orchestration.mode()
            )));
        }
        if d.orchestration != first.orchestration {
            return Err(RegistryError::Combination(format!(
                "`{}` and `{}` configure their teachers differently",
                first.name, d.name
            )));
        }
    }
    // Stages are matched by kind and by position among stages of that kind.
    let mut stages: Vec<((StageKind, usize), HookConfig)> = Vec::new();
    for d in descs {
        let mut ordinal: BTreeMap<StageKind, usize> = BTreeMap::new();
        for s in &d.stages {
            let n = ordinal.entry(s.stage).or_default();
            let key = (s.stage, *n);
            *n += 1;
            let slot = match stages.iter_mut().find(|(k, _)| *k == key) {
                Some((_, x)) => x,
                None => {
                    stages.push((key, HookConfig::new(s.stage, Vec::new())));
                    &mut stages.last_mut().expect("just pushed").1
                }
            };
            let mut seen: BTreeSet<_> = slot.loss_terms.iter().map(|t| t.identity()).collect();
            for t in &s.loss_terms {
                if seen.insert(t.identity()) {
                    slot.loss_terms.push(t.clone());
                }
            }
            for h in &s.operation_hooks {
                if !slot.operation_hooks.contains(h) {
                    slot.operation_hooks.push(h.clone());
                }
            }
            for (k, v) in &s.schedules {
                match slot.schedules.get(k) {
                    Some(existing) if existing != v => {
                        return Err(RegistryError::Combination(format!("schedule `{k}` is defined differently")))
                    }
                    _ => {
                        slot.schedules.insert(k.clone(), v.clone());
                    }
                }
            }
        }
    }
    stages.sort_by_key(|(k, _)| *k);
    let mut stages: Vec<HookConfig> = stages.into_iter().map(|(_, s)| s).collect();
    for s in &mut stages {
        for t in &mut s.loss_terms {
            if let Some(d) = overrides.get(&t.student.feature) {
                t.distance = *d;
            }
        }
    }
    let mut names: Vec<&str> = Vec::new();
    for d in descs {
        if !names.contains(&d.name.as_str()) {
            names.push(&d.name);
        }
    }
    Ok(MethodDescriptor {
        name: names.join("+"),
        orchestration: first.orchestration.clone(),
        init_strategy: first.init_strategy,
        stages,
    })
}

/// Loss terms of one stage kind as a set of identities (for set comparisons).
pub fn term_set(desc: &MethodDescriptor, kind: StageKind) -> BTreeSet<String> {
    desc.stages
        .iter()
        .filter(|s| s.stage == kind)
        .flat_map(|s| s.loss_terms.iter())
        .map(|t| serde_json::to_string(t).expect("terms serialize"))
        .collect()
}

fn push(v: &mut Vec<Violation>, path: impl Into<String>, message: impl Into<String>) {
    v.push(Violation { path: path.into(), message: message.into() });
}

/// Structural checks that do not depend on model shapes.
pub fn validate(desc: &MethodDescriptor) -> Vec<Violation> {
    let mut v = Vec::new();
    if desc.name.trim().is_empty() {
        push(&mut v, "name", "empty name");
    }
    if desc.stages.is_empty() {
        push(&mut v, "stages", "at least one stage is required");
    }
    for w in desc.stages.windows(2) {
        if w[0].stage > w[1].stage {
            push(&mut v, "stages", "pre-training stages must precede task stages");
        }
    }
    for (i, s) in desc.stages.iter().enumerate() {
        let path = format!("stages[{i}]");
        if let Err(e) = s.validate() {
            push(&mut v, &path, e.to_string());
        }
        for (name, sched) in &s.schedules {
            if let Schedule::Linear { horizon: Some(h), domain: Domain::Progress, .. }
            | Schedule::AnnealPhi { horizon: Some(h), domain: Domain::Progress, .. } = sched
            {
                if *h > 1.0 {
                    push(&mut v, format!("{path}.schedules.{name}"), "progress horizons cannot exceed 1");
                }
            }
        }
        for (j, t) in s.loss_terms.iter().enumerate() {
            let tp = format!("{path}.loss_terms[{j}]");
            match (&desc.orchestration, t.teacher.target) {
                (Orchestration::SingleTeacher, Target::Teachers | Target::Teacher(1..) | Target::Assistant(_)) => {
                    push(&mut v, &tp, "single-teacher methods may only read teacher 0")
                }
                (Orchestration::MultiTeacher { .. }, Target::Assistant(_)) => {
                    push(&mut v, &tp, "multi-teacher methods have no assistants")
                }
                (Orchestration::AssistantChain { accumulate: false, .. }, Target::Teachers) => {
                    push(&mut v, &tp, "a plain chain link has a single teacher")
                }
                _ => {}
            }
        }
    }
    match &desc.orchestration {
        Orchestration::MultiTeacher { .. } => {
            let reads_all = desc.stages.iter().flat_map(|s| &s.loss_terms).any(|t| t.teacher.target == Target::Teachers);
            if !reads_all {
                push(&mut v, "orchestration", "multi-teacher methods need a term over all teachers");
            }
        }
        Orchestration::AssistantChain { specs, .. } => {
            if specs.len() < 3 {
                push(&mut v, "orchestration.specs", "a chain needs a teacher, at least one assistant and a student");
            }
            let counts: Vec<Option<u64>> = specs.iter().map(|s| named_spec(s).ok().map(|m| count_params(&m))).collect();
            for (s, c) in specs.iter().zip(&counts) {
                if c.is_none() {
                    push(&mut v, "orchestration.specs", format!("unknown model `{s}`"));
                }
            }
            if counts.windows(2).any(|w| matches!(w, [Some(a), Some(b)] if b >= a)) {
                push(&mut v, "orchestration.specs", "chain sizes must strictly decrease");
            }
        }
        Orchestration::SingleTeacher => {}
    }
    v
}

/// [`validate`] plus layer-selector checks against concrete student and teacher shapes.
pub fn validate_for(desc: &MethodDescriptor, student: &ModelSpec, teacher: &ModelSpec) -> Vec<Violation> {
    let mut v = validate(desc);
    for (i, s) in desc.stages.iter().enumerate() {
        for (j, t) in s.loss_terms.iter().enumerate() {
            let path = format!("stages[{i}].loss_terms[{j}]");
            let sides = [("student", &t.student, student.layers), ("teacher", &t.teacher, teacher.layers)];
            for (side, hook, layers) in sides {
                if !hook.feature.is_layered() || hook.target == Target::Gold {
                    continue;
                }
                let bad = match hook.layers {
                    LayerSelector::Index(k) => (k == 0 || k > layers).then(|| format!("layer {k}")),
                    LayerSelector::LastK(k) => (k > layers).then(|| format!("last {k} layers")),
                    LayerSelector::RandomSubsetPerEpoch(k) => (k >= layers).then(|| format!("{k} of the first {} layers", layers.saturating_sub(1))),
                    _ => None,
                };
                if let Some(what) = bad {
                    push(&mut v, format!("{path}.{side}.layers"), format!("{what} requested from a {layers}-layer model"));
                }
            }
        }
    }
    v
}

impl MethodDescriptor {
    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptors serialize")
    }

    pub fn from_document(text: &str) -> Result<Self, RegistryError> {
        Ok(from_json_text(text)?)
    }

    /// Stage configs of one kind, in order.
    pub fn stages_of(&self, kind: StageKind) -> impl Iterator<Item = &HookConfig> {
        self.stages.iter().filter(move |s| s.stage == kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(d: &MethodDescriptor, kind: StageKind) -> BTreeSet<String> {
        d.stages_of(kind)
            .flat_map(|s| &s.loss_terms)
            .map(|t| format!("{}:{:?}", if t.teacher.target == Target::Gold { FeatureKind::Hard } else { t.student.feature }, t.distance.kind))
            .collect()
    }

    #[test]
    fn catalog_is_complete_and_valid() {
        let all = catalog();
        assert_eq!(all.len(), 25);
        let names: BTreeSet<_> = all.iter().map(|d| d.name.clone()).collect();
        assert_eq!(names.len(), 25);
        for d in &all {
            assert_eq!(validate(d), vec![], "{}", d.name);
        }
        assert_eq!(validate(&best_c()), vec![]);
    }

    #[test]
    fn documented_feature_sets() {
        let tiny = get_descriptor("TinyBERT").unwrap();
        let want: BTreeSet<String> = ["Emb:Mse", "Att:Mse", "HS:Mse"].iter().map(|s| s.to_string()).collect();
        assert_eq!(features(&tiny, StageKind::Pretraining), want);
        let kd = get_descriptor("KD").unwrap();
        let task = features(&kd, StageKind::Task);
        assert!(task.contains("Soft:Ce") && task.contains("Hard:Ce"));
        let dg = get_descriptor("DGKD").unwrap();
        assert_eq!(
            dg.orchestration,
            Orchestration::AssistantChain { specs: ASSISTANT_CHAIN.iter().map(|s| s.to_string()).collect(), accumulate: true }
        );
    }

    #[test]
    fn unknown_method_lists_catalog() {
        let err = get_descriptor("Nope").unwrap_err().to_string();
        assert!(err.contains("TinyBERT") && err.contains("DGKD"));
    }

    #[test]
    fn documents_round_trip() {
        for d in catalog().into_iter().chain([best_c()]) {
            let back = MethodDescriptor::from_document(&d.to_document()).unwrap();
            assert_eq!(back, d);
        }
    }

    #[test]
    fn combine_unions_and_is_idempotent() {
        let kd = get_descriptor("KD").unwrap();
        let tiny = get_descriptor("TinyBERT").unwrap();
        let c = combine(&[kd.clone(), tiny.clone()], &BTreeMap::new()).unwrap();
        let mut want = term_set(&tiny, StageKind::Task);
        want.extend(term_set(&kd, StageKind::Task));
        assert_eq!(term_set(&c, StageKind::Task), want);
        assert_eq!(combine(&[tiny.clone(), tiny.clone()], &BTreeMap::new()).unwrap(), tiny);
    }

    #[test]
    fn combine_rejects_mixed_orchestration() {
        let err = combine(&[get_descriptor("KD").unwrap(), get_descriptor("TMKD").unwrap()], &BTreeMap::new());
        assert!(matches!(err, Err(RegistryError::Combination(_))));
    }

    #[test]
    fn overrides_replace_distance() {
        let mut o = BTreeMap::new();
        o.insert(FeatureKind::HS, DistanceSpec::new(DistanceKind::Cos));
        let c = combine(&[get_descriptor("TinyBERT").unwrap()], &o).unwrap();
        assert!(c.stages.iter().flat_map(|s| &s.loss_terms).filter(|t| t.student.feature == FeatureKind::HS).all(|t| t.distance.kind == DistanceKind::Cos));
    }

    #[test]
    fn shape_violations() {
        let mut d = get_descriptor("KD").unwrap();
        let mut t = term(FeatureKind::Att, DistanceKind::Mse);
        t.student.layers = LayerSelector::Index(99);
        t.teacher.layers = LayerSelector::Index(1);
        d.stages[0].loss_terms.push(t);
        let v = validate_for(&d, &named_spec("66M").unwrap(), &named_spec("110M").unwrap());
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].path.ends_with("student.layers"));
        let mut e = get_descriptor("KD").unwrap();
        e.stages.clear();
        assert!(!validate(&e).is_empty());
    }
}
