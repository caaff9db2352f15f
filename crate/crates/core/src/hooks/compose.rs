use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::model::{FeatureKind, ModelSpec, OutputView, TapBundle, TapKey, TapRequest};
use crate::rng::Rng;

use super::config::{
    Aggregate, DistanceKind, DistanceSpec, HookConfig, LayerSelector, LossTerm, OperationHook, Relation, Target,
    Transform, View,
};
use super::distance::{apply_transform, compute_distance_between, l2_normalize, relation_scores, InputKind, Side};
use super::ophooks::{active_layers, uniform_map, ReplaceProjections};
use super::schedule::IterState;
use super::HookError;

const AUX_STD: f64 = 0.02;

/// Models and iteration a stage's hooks are resolved against.
#[derive(Debug, Clone)]
pub struct StageContext<'a> {
    pub student: &'a ModelSpec,
    /// Teacher-side models: teachers first, then assistants.
    pub sources: Vec<&'a ModelSpec>,
    pub teachers: usize,
    pub state: IterState,
    /// Seed for per-epoch layer sampling.
    pub seed: u64,
}

impl StageContext<'_> {
    fn models(&self, target: Target, term: &str) -> Result<Vec<usize>, HookError> {
        let missing = |what: String| HookError::composition(term, format!("{what} is not configured for this stage"));
        Ok(match target {
            Target::Student => return Err(HookError::composition(term, "teacher side targets the student")),
            Target::Gold => Vec::new(),
            Target::Teacher(i) if i < self.teachers => vec![i],
            Target::Teacher(i) => return Err(missing(format!("teacher {i}"))),
            Target::Assistant(i) if self.teachers + i < self.sources.len() => vec![self.teachers + i],
            Target::Assistant(i) => return Err(missing(format!("assistant {i}"))),
            Target::Teachers if self.teachers > 0 => (0..self.teachers).collect(),
            Target::Teachers => return Err(missing("a teacher".into())),
        })
    }
}

/// A loss term with concrete layers and weights for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedTerm {
    pub index: usize,
    pub label: String,
    pub weight: f64,
    pub teacher_scale: Option<f64>,
    /// Teacher-side model indices; empty for gold labels.
    pub models: Vec<usize>,
    /// `(student layer, teacher layer)`; `(0, 0)` for layerless features.
    pub pairs: Vec<(usize, usize)>,
}

/// Resolved terms plus the taps each model must produce, keyed by view.
#[derive(Debug, Clone, Default)]
pub struct Resolution {
    pub terms: Vec<ResolvedTerm>,
    student: BTreeMap<View, BTreeSet<TapKey>>,
    models: BTreeMap<(usize, View), BTreeSet<TapKey>>,
}

impl Resolution {
    pub fn student_request(&self, view: View, output: &OutputView) -> Option<TapRequest> {
        self.student.get(&view).map(|k| TapRequest::new(k.iter().copied()).with_view(output.clone()))
    }

    pub fn model_request(&self, model: usize, view: View, output: &OutputView) -> Option<TapRequest> {
        self.models.get(&(model, view)).map(|k| TapRequest::new(k.iter().copied()).with_view(output.clone()))
    }

    pub fn uses_view(&self, view: View) -> bool {
        self.student.contains_key(&view) || self.models.keys().any(|(_, v)| *v == view)
    }

    pub fn uses_model(&self, model: usize) -> bool {
        self.models.keys().any(|(m, _)| *m == model)
    }
}

fn layer_list(
    sel: LayerSelector,
    layers: usize,
    term: &str,
    rng: impl FnOnce() -> Rng,
) -> Result<Vec<usize>, HookError> {
    let bad = |m: String| HookError::composition(term, m);
    Ok(match sel {
        LayerSelector::Last => vec![layers],
        LayerSelector::All => (1..=layers).collect(),
        LayerSelector::LastK(k) if k <= layers => (layers - k + 1..=layers).collect(),
        LayerSelector::LastK(k) => return Err(bad(format!("last {k} layers requested from a {layers}-layer model"))),
        LayerSelector::Index(i) if (1..=layers).contains(&i) => vec![i],
        LayerSelector::Index(i) => return Err(bad(format!("layer {i} requested from a {layers}-layer model"))),
        LayerSelector::RandomSubsetPerEpoch(k) if k < layers => rng().sample_sorted(layers - 1, k).iter().map(|i| i + 1).collect(),
        LayerSelector::RandomSubsetPerEpoch(k) => {
            return Err(bad(format!("{k} of the first {} layers requested", layers.saturating_sub(1))))
        }
        LayerSelector::UniformMap => return Err(bad("uniform_map only applies to the teacher side".into())),
    })
}

fn keys_for(term: &LossTerm, feature: FeatureKind, layer: usize) -> Vec<TapKey> {
    if !feature.is_layered() {
        return vec![TapKey::global(feature)];
    }
    let mut keys = vec![TapKey::new(feature, layer)];
    if term.distance.relation == Relation::AttentionRelation {
        keys.push(TapKey::new(FeatureKind::K, layer));
    }
    keys
}

/// Resolve every term of `cfg` for the iteration in `ctx`.
pub fn resolve_terms(cfg: &HookConfig, ctx: &StageContext<'_>) -> Result<Resolution, HookError> {
    let active = active_layers(&cfg.operation_hooks, &cfg.schedules, &ctx.state, ctx.student.layers)?;
    let mut res = Resolution::default();
    for (index, term) in cfg.loss_terms.iter().enumerate() {
        let label = term.label();
        let weight = term.weight.value(&cfg.schedules, &ctx.state)?;
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(HookError::composition(&label, format!("weight evaluated to {weight}")));
        }
        let teacher_scale = term.teacher_scale.as_ref().map(|w| w.value(&cfg.schedules, &ctx.state)).transpose()?;
        let models = ctx.models(term.teacher.target, &label)?;
        let sampler = |salt: u64| {
            let seed = ctx.seed;
            let epoch = ctx.state.epoch() as u64;
            move || Rng::new(seed).fork(epoch.wrapping_mul(1_000_003).wrapping_add(index as u64 * 31 + salt))
        };

        let pairs = if !term.student.feature.is_layered() {
            vec![(0, 0)]
        } else {
            let mut s = layer_list(term.student.layers, ctx.student.layers, &label, sampler(0))?;
            if let Some(active) = &active {
                s.retain(|l| active.contains(l));
            }
            // Every teacher-side model in a term shares one layer count.
            let lt = match models.first() {
                Some(&m) => ctx.sources[m].layers,
                None => return Err(HookError::composition(&label, "gold labels have no layers")),
            };
            if models.iter().any(|&m| ctx.sources[m].layers != lt) {
                return Err(HookError::composition(&label, "teachers differ in depth"));
            }
            match (term.teacher.layers, term.aggregate) {
                (LayerSelector::UniformMap, Aggregate::Alp | Aggregate::Universal) => {
                    let t: Vec<usize> = (1..=lt).collect();
                    s.iter().flat_map(|&a| t.iter().map(move |&b| (a, b))).collect()
                }
                (LayerSelector::UniformMap, _) => s.iter().map(|&i| (i, uniform_map(i, ctx.student.layers, lt))).collect(),
                (sel, agg) => {
                    let all_s = layer_list(term.student.layers, ctx.student.layers, &label, sampler(0))?;
                    let t = layer_list(sel, lt, &label, sampler(1))?;
                    if matches!(agg, Aggregate::Alp | Aggregate::Universal) {
                        s.iter().flat_map(|&a| t.iter().map(move |&b| (a, b))).collect()
                    } else if t.len() == all_s.len() {
                        all_s.into_iter().zip(t).filter(|(a, _)| s.contains(a)).collect()
                    } else {
                        return Err(HookError::composition(
                            &label,
                            format!("{} student layers cannot be paired with {} teacher layers", all_s.len(), t.len()),
                        ));
                    }
                }
            }
        };

        let sview = term.student.view;
        let tview = term.teacher.view;
        for &(ls, lt) in &pairs {
            res.student.entry(sview).or_default().extend(keys_for(term, term.student.feature, ls));
            for &m in &models {
                res.models.entry((m, tview)).or_default().extend(keys_for(term, term.teacher.feature, lt));
            }
        }
        if term.teacher.feature == FeatureKind::Hard && !models.is_empty() {
            // Teacher labels are one-hot over the student's output classes.
            res.student.entry(sview).or_default().insert(TapKey::global(FeatureKind::Soft));
        }
        res.terms.push(ResolvedTerm { index, label, weight, teacher_scale, models, pairs });
    }
    Ok(res)
}

/// Trainable parameters that live only for one stage: projections and mixers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuxModel {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl AuxModel {
    pub fn for_stage(cfg: &HookConfig, ctx: &StageContext<'_>, rng: &mut Rng) -> Result<Self, HookError> {
        let mut aux = AuxModel::default();
        let ds = ctx.student.dim;
        for (i, term) in cfg.loss_terms.iter().enumerate() {
            let label = term.label();
            let models = ctx.models(term.teacher.target, &label)?;
            for &m in &models {
                let dt = ctx.sources[m].dim;
                let needs = term.projection || (term.aggregate == Aggregate::Alp && ds != dt);
                if needs {
                    aux.push(format!("term{i}.proj.{m}"), Tensor::randn(&[ds, dt], AUX_STD, rng));
                }
                if term.aggregate == Aggregate::Universal {
                    aux.push(format!("term{i}.key.{m}"), Tensor::randn(&[dt, ds], AUX_STD, rng));
                }
            }
            if term.aggregate == Aggregate::Universal {
                aux.push(format!("term{i}.query"), Tensor::randn(&[ds, ds], AUX_STD, rng));
            }
        }
        for h in &cfg.operation_hooks {
            if let OperationHook::ReplaceBlock { teacher, .. } = h {
                let dt = ctx
                    .sources
                    .get(*teacher)
                    .ok_or_else(|| HookError::Plan(format!("teacher {teacher} is not configured")))?
                    .dim;
                if dt != ds {
                    aux.push("replace.up".into(), partial_identity(ds, dt));
                    aux.push("replace.down".into(), partial_identity(dt, ds));
                }
            }
        }
        Ok(aux)
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn bind(&self, g: &mut Graph) -> AuxBound {
        let vars = self.tensors.iter().map(|t| g.param(t.clone())).collect::<Vec<_>>();
        AuxBound { map: self.names.iter().cloned().zip(vars.iter().copied()).collect(), vars }
    }
}

/// `[I 0]` (or its transpose) so that swapped-in blocks start from a width-preserving map.
fn partial_identity(rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for i in 0..rows.min(cols) {
        t.data_mut()[i * cols + i] = 1.0;
    }
    t
}

#[derive(Debug, Clone, Default)]
pub struct AuxBound {
    map: BTreeMap<String, Var>,
    vars: Vec<Var>,
}

impl AuxBound {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.map.get(name).copied()
    }

    /// Vars in the same order as `AuxModel::tensors`.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn replace_projections(&self) -> ReplaceProjections {
        ReplaceProjections { up: self.get("replace.up"), down: self.get("replace.down") }
    }
}

/// Taps of one model for the base pass and, when run, the interchange pass.
#[derive(Debug, Clone, Default)]
pub struct ViewTaps {
    pub base: TapBundle,
    pub interchange: Option<TapBundle>,
}

impl ViewTaps {
    fn get(&self, view: View) -> Option<&TapBundle> {
        match view {
            View::Base => Some(&self.base),
            View::Interchange => self.interchange.as_ref(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureSources<'a> {
    pub student: &'a ViewTaps,
    /// Indexed like `StageContext::sources`; `None` for models not run this step.
    pub models: Vec<Option<&'a ViewTaps>>,
    /// Gold class per output row.
    pub gold: Option<&'a [usize]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixMode {
    /// Weighted sum of per-teacher distances.
    LossAverage,
    /// Distance to the weighted average of teacher output distributions.
    Probabilities,
}

/// How terms targeting every teacher combine them.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherMix {
    pub weights: Vec<f64>,
    pub mode: MixMode,
}

impl TeacherMix {
    pub fn uniform(teachers: usize) -> Self {
        Self { weights: vec![1.0 / teachers.max(1) as f64; teachers], mode: MixMode::LossAverage }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermValue {
    pub label: String,
    pub weight: f64,
    /// Unweighted distance.
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct Composed {
    pub loss: Var,
    pub terms: Vec<TermValue>,
}

struct Ctx<'a, 'b> {
    ctx: &'a StageContext<'b>,
    src: &'a FeatureSources<'a>,
    aux: &'a AuxBound,
}

impl Ctx<'_, '_> {
    fn tap(&self, model: Option<usize>, view: View, key: TapKey, label: &str) -> Result<Var, HookError> {
        let (who, taps) = match model {
            None => ("student".to_string(), Some(self.src.student)),
            Some(m) => (format!("teacher-side model {m}"), self.src.models.get(m).copied().flatten()),
        };
        taps.and_then(|t| t.get(view))
            .and_then(|b| b.get(&key))
            .copied()
            .ok_or_else(|| HookError::composition(label, format!("feature {key} ({view:?} view) was not produced by the {who}")))
    }
}

/// Weighted sum of all resolved terms.
pub fn compose_loss(
    g: &mut Graph,
    cfg: &HookConfig,
    res: &Resolution,
    ctx: &StageContext<'_>,
    src: &FeatureSources<'_>,
    aux: &AuxBound,
    mix: &TeacherMix,
) -> Result<Composed, HookError> {
    let c = Ctx { ctx, src, aux };
    let mut total: Option<Var> = None;
    let mut values = Vec::with_capacity(res.terms.len());
    for rt in &res.terms {
        let term = &cfg.loss_terms[rt.index];
        let v = term_loss(g, &c, term, rt, mix).map_err(|e| match e {
            HookError::Tensor(t @ TensorError::NonFinite { .. }) => HookError::NonFinite { term: rt.label.clone(), detail: t.to_string() },
            e => e,
        })?;
        if let Some(v) = v {
            if !g.value(v).is_finite() {
                return Err(HookError::NonFinite { term: rt.label.clone(), detail: "loss value".into() });
            }
        }
        let value = match v {
            Some(v) => {
                let w = g.scale(v, rt.weight)?;
                total = Some(match total {
                    Some(t) => g.add(t, w)?,
                    None => w,
                });
                g.value(v).item()
            }
            None => 0.0,
        };
        values.push(TermValue { label: rt.label.clone(), weight: rt.weight, value });
    }
    let loss = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(Composed { loss, terms: values })
}

fn term_loss(
    g: &mut Graph,
    c: &Ctx<'_, '_>,
    term: &LossTerm,
    rt: &ResolvedTerm,
    mix: &TeacherMix,
) -> Result<Option<Var>, HookError> {
    let label = rt.label.as_str();
    if rt.pairs.is_empty() {
        return Ok(None);
    }
    let weights: Vec<f64> = if term.teacher.target == Target::Teachers {
        rt.models.iter().map(|&m| mix.weights.get(m).copied().unwrap_or(0.0)).collect()
    } else {
        vec![1.0; rt.models.len()]
    };
    if term.teacher.target == Target::Gold {
        let s = student_operand(g, c, term, rt, 0, None, label)?;
        let classes = *g.shape(s.var).last().unwrap_or(&0);
        let gold = c.src.gold.ok_or_else(|| HookError::composition(label, "gold labels are not available"))?;
        let t = one_hot(g, gold, classes, label)?;
        return Ok(Some(compute_distance_between(g, Side::probs(t), s, &term.distance, label)?));
    }
    let mut sum: Option<Var> = None;
    let mut acc = |g: &mut Graph, v: Var, w: f64| -> Result<(), HookError> {
        let v = if w == 1.0 { v } else { g.scale(v, w)? };
        sum = Some(match sum {
            Some(s) => g.add(s, v)?,
            None => v,
        });
        Ok(())
    };
    match term.aggregate {
        Aggregate::Pointwise => {
            let mixed_probs = term.teacher.target == Target::Teachers
                && mix.mode == MixMode::Probabilities
                && term.student.feature == FeatureKind::Soft
                && !term.projection;
            for &(ls, lt) in &rt.pairs {
                if mixed_probs {
                    let mut target: Option<Var> = None;
                    for (&m, &w) in rt.models.iter().zip(&weights) {
                        let t = teacher_operand(g, c, term, rt, m, lt, label)?;
                        let p = match t.kind {
                            InputKind::Logits => {
                                let last = g.shape(t.var).len() - 1;
                                g.softmax(t.var, last, term.distance.temperature)?
                            }
                            InputKind::Probabilities => t.var,
                        };
                        let p = g.scale(p, w)?;
                        target = Some(match target {
                            Some(a) => g.add(a, p)?,
                            None => p,
                        });
                    }
                    let Some(target) = target else { continue };
                    let s = student_operand(g, c, term, rt, ls, None, label)?;
                    // Tempering already happened on the teacher side; T² still applies through the student logits.
                    let d = compute_distance_between(g, Side::probs(target), s, &term.distance, label)?;
                    acc(g, d, 1.0)?;
                } else {
                    for (&m, &w) in rt.models.iter().zip(&weights) {
                        let t = teacher_operand(g, c, term, rt, m, lt, label)?;
                        let s = student_operand(g, c, term, rt, ls, Some(m), label)?;
                        let d = compute_distance_between(g, t, s, &term.distance, label)?;
                        acc(g, d, w)?;
                    }
                }
            }
        }
        agg => {
            let by_student = group_pairs(&rt.pairs);
            for (&m, &w) in rt.models.iter().zip(&weights) {
                for (ls, lts) in &by_student {
                    let s = c.tap(None, term.student.view, TapKey::new(term.student.feature, *ls), label)?;
                    let ts = lts
                        .iter()
                        .map(|&lt| c.tap(Some(m), term.teacher.view, TapKey::new(term.teacher.feature, lt), label))
                        .collect::<Result<Vec<_>, _>>()?;
                    let d = match agg {
                        Aggregate::Alp => alp(g, c, rt, m, s, &ts, label)?,
                        Aggregate::Universal => universal(g, c, rt, m, s, &ts, label)?,
                        Aggregate::Contrastive => {
                            let s = project(g, c, rt, m, s, term.projection, label)?;
                            contrastive(g, s, ts[0], term.distance.temperature, label)?
                        }
                        Aggregate::Ckd => ckd(g, s, ts[0], term.distance.delta)?,
                        Aggregate::Mgskd => mgskd(g, s, ts[0], term.distance.delta)?,
                        Aggregate::Pointwise => unreachable!(),
                    };
                    acc(g, d, w)?;
                }
            }
        }
    }
    Ok(sum)
}

fn group_pairs(pairs: &[(usize, usize)]) -> Vec<(usize, Vec<usize>)> {
    let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
    for &(s, t) in pairs {
        match out.last_mut() {
            Some((ls, ts)) if *ls == s => ts.push(t),
            _ => out.push((s, vec![t])),
        }
    }
    out
}

fn one_hot(g: &mut Graph, labels: &[usize], classes: usize, label: &str) -> Result<Var, HookError> {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(HookError::Dimension { term: label.into(), message: format!("label {y} outside {classes} classes") });
        }
        data[r * classes + y] = 1.0;
    }
    Ok(g.constant(Tensor::new(vec![labels.len(), classes], data)?))
}

fn relation_heads(c: &Ctx<'_, '_>, spec: &DistanceSpec) -> usize {
    spec.relation_heads.unwrap_or(c.ctx.student.heads)
}

fn relation_side(g: &mut Graph, scores: Var, spec: &DistanceSpec) -> Result<Side, HookError> {
    Ok(match spec.kind {
        DistanceKind::Kl | DistanceKind::Ce => Side::logits(scores),
        _ => Side::probs(g.softmax(scores, 3, 1.0)?),
    })
}

fn base_kind(feature: FeatureKind) -> InputKind {
    match feature {
        FeatureKind::Att => InputKind::Probabilities,
        _ => InputKind::Logits,
    }
}

fn project(g: &mut Graph, c: &Ctx<'_, '_>, rt: &ResolvedTerm, m: usize, x: Var, on: bool, label: &str) -> Result<Var, HookError> {
    if !on {
        return Ok(x);
    }
    let w = c
        .aux
        .get(&format!("term{}.proj.{m}", rt.index))
        .ok_or_else(|| HookError::composition(label, "projection parameters were not created for this stage"))?;
    Ok(g.matmul(x, w)?)
}

fn student_operand(
    g: &mut Graph,
    c: &Ctx<'_, '_>,
    term: &LossTerm,
    rt: &ResolvedTerm,
    layer: usize,
    model: Option<usize>,
    label: &str,
) -> Result<Side, HookError> {
    let f = term.student.feature;
    let key = if f.is_layered() { TapKey::new(f, layer) } else { TapKey::global(f) };
    let x = c.tap(None, term.student.view, key, label)?;
    if term.distance.relation != Relation::None {
        let y = match term.distance.relation {
            Relation::AttentionRelation => c.tap(None, term.student.view, TapKey::new(FeatureKind::K, layer), label)?,
            _ => x,
        };
        let scores = relation_scores(g, x, y, relation_heads(c, &term.distance))?;
        return relation_side(g, scores, &term.distance);
    }
    let x = match (model, term.student.transform) {
        (_, Transform::PairwiseScaledDot) | (None, _) => x,
        (Some(m), _) => project(g, c, rt, m, x, term.projection, label)?,
    };
    let x = apply_transform(g, x, term.student.transform)?;
    Ok(Side { var: x, kind: base_kind(f) })
}

fn teacher_operand(
    g: &mut Graph,
    c: &Ctx<'_, '_>,
    term: &LossTerm,
    rt: &ResolvedTerm,
    m: usize,
    layer: usize,
    label: &str,
) -> Result<Side, HookError> {
    let f = term.teacher.feature;
    let view = term.teacher.view;
    let key = if f.is_layered() { TapKey::new(f, layer) } else { TapKey::global(f) };
    let x = c.tap(Some(m), view, key, label)?;
    if f == FeatureKind::Hard {
        let soft = c.tap(None, term.student.view, TapKey::global(FeatureKind::Soft), label)?;
        let classes = *g.shape(soft).last().unwrap_or(&0);
        let ids: Vec<usize> = g.value(x).data().iter().map(|&v| v as usize).collect();
        return Ok(Side::probs(one_hot(g, &ids, classes, label)?));
    }
    if term.distance.relation != Relation::None {
        let y = match term.distance.relation {
            Relation::AttentionRelation => c.tap(Some(m), view, TapKey::new(FeatureKind::K, layer), label)?,
            _ => x,
        };
        let scores = relation_scores(g, x, y, relation_heads(c, &term.distance))?;
        return relation_side(g, scores, &term.distance);
    }
    let mut x = apply_transform(g, x, term.teacher.transform)?;
    if let Some(phi) = rt.teacher_scale {
        x = g.scale(x, phi)?;
    }
    Ok(Side { var: x, kind: base_kind(f) })
}

fn mse(g: &mut Graph, a: Var, b: Var, label: &str) -> Result<Var, HookError> {
    compute_distance_between(g, Side::logits(a), Side::logits(b), &DistanceSpec::new(DistanceKind::Mse), label)
}

/// Student layer against a mixture of teacher layers weighted per token by `softmax_j(ŝ·t_j)`.
fn alp(g: &mut Graph, c: &Ctx<'_, '_>, rt: &ResolvedTerm, m: usize, s: Var, ts: &[Var], label: &str) -> Result<Var, HookError> {
    let ds = *g.shape(s).last().unwrap_or(&0);
    let dt = *g.shape(ts[0]).last().unwrap_or(&0);
    let on = c.aux.get(&format!("term{}.proj.{m}", rt.index)).is_some();
    if !on && ds != dt {
        return Err(HookError::Dimension { term: label.into(), message: format!("student width {ds} vs teacher {dt}") });
    }
    let sp = project(g, c, rt, m, s, on, label)?;
    let last = g.shape(sp).len() - 1;
    let mut scores = Vec::with_capacity(ts.len());
    for &t in ts {
        let p = g.mul(sp, t)?;
        scores.push(g.sum_axis(p, last)?);
    }
    let scores = g.concat(&scores, last)?;
    let scale = 1.0 / (dt as f64).sqrt();
    let scores = g.scale(scores, scale)?;
    let w = g.softmax(scores, last, 1.0)?;
    let mut target: Option<Var> = None;
    for (j, &t) in ts.iter().enumerate() {
        let wj = g.slice(w, last, j, j + 1)?;
        let part = g.mul(wj, t)?;
        target = Some(match target {
            Some(a) => g.add(a, part)?,
            None => part,
        });
    }
    mse(g, target.expect("at least one teacher layer"), sp, label)
}

fn mean_pool(g: &mut Graph, x: Var) -> Result<Var, HookError> {
    let shape = g.shape(x).to_vec();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let p = g.sum_axis(x, 1)?;
    let p = g.scale(p, 1.0 / s as f64)?;
    Ok(g.reshape(p, &[b, d])?)
}

/// Teacher layers mixed by attention between a projected student query and projected teacher keys.
fn universal(g: &mut Graph, c: &Ctx<'_, '_>, rt: &ResolvedTerm, m: usize, s: Var, ts: &[Var], label: &str) -> Result<Var, HookError> {
    let missing = || HookError::composition(label, "mixer parameters were not created for this stage");
    let wq = c.aux.get(&format!("term{}.query", rt.index)).ok_or_else(missing)?;
    let wk = c.aux.get(&format!("term{}.key.{m}", rt.index)).ok_or_else(missing)?;
    let ds = *g.shape(s).last().unwrap_or(&0);
    let dt = *g.shape(ts[0]).last().unwrap_or(&0);
    let on = c.aux.get(&format!("term{}.proj.{m}", rt.index)).is_some();
    if !on && ds != dt {
        return Err(HookError::Dimension { term: label.into(), message: format!("student width {ds} vs teacher {dt}") });
    }
    let pooled = mean_pool(g, s)?;
    let q = g.matmul(pooled, wq)?;
    let mut scores = Vec::with_capacity(ts.len());
    for &t in ts {
        let pt = mean_pool(g, t)?;
        let k = g.matmul(pt, wk)?;
        let p = g.mul(q, k)?;
        scores.push(g.sum_axis(p, 1)?);
    }
    let scores = g.concat(&scores, 1)?;
    let scores = g.scale(scores, 1.0 / (ds as f64).sqrt())?;
    let w = g.softmax(scores, 1, 1.0)?;
    let b = g.shape(w)[0];
    let mut target: Option<Var> = None;
    for (j, &t) in ts.iter().enumerate() {
        let wj = g.slice(w, 1, j, j + 1)?;
        let wj = g.reshape(wj, &[b, 1, 1])?;
        let part = g.mul(wj, t)?;
        target = Some(match target {
            Some(a) => g.add(a, part)?,
            None => part,
        });
    }
    let sp = project(g, c, rt, m, s, on, label)?;
    mse(g, target.expect("at least one teacher layer"), sp, label)
}

/// In-batch contrastive objective on pooled, normalised features; positives on the diagonal.
fn contrastive(g: &mut Graph, s: Var, t: Var, tau: f64, label: &str) -> Result<Var, HookError> {
    let (ds, dt) = (*g.shape(s).last().unwrap_or(&0), *g.shape(t).last().unwrap_or(&0));
    if ds != dt {
        return Err(HookError::Dimension { term: label.into(), message: format!("student width {ds} vs teacher {dt}") });
    }
    let sp = mean_pool(g, s)?;
    let sp = l2_normalize(g, sp)?;
    let tp = mean_pool(g, t)?;
    let tp = l2_normalize(g, tp)?;
    let tt = g.transpose(tp)?;
    let sim = g.matmul(sp, tt)?;
    let sim = g.scale(sim, 1.0 / tau)?;
    let ls = g.log_softmax(sim, 1, 1.0)?;
    let b = g.shape(sim)[0];
    let eye = g.constant(Tensor::eye(b));
    let diag = g.mul(ls, eye)?;
    let total = g.sum(diag)?;
    Ok(g.scale(total, -1.0 / b as f64)?)
}

/// Squared token distances normalised by their mean, `(b, s, s)`.
fn distance_structure(g: &mut Graph, x: Var) -> Result<Var, HookError> {
    let shape = g.shape(x).to_vec();
    let (b, s) = (shape[0], shape[1]);
    let sq = g.mul(x, x)?;
    let sq = g.sum_axis(sq, 2)?;
    let sqt = g.reshape(sq, &[b, 1, s])?;
    let xt = g.transpose(x)?;
    let gram = g.matmul(x, xt)?;
    let gram = g.scale(gram, -2.0)?;
    let d = g.add(sq, sqt)?;
    let d = g.add(d, gram)?;
    let m = g.mean(d)?;
    let eps = g.constant(Tensor::scalar(1e-12));
    let m = g.add(m, eps)?;
    Ok(g.div(d, m)?)
}

/// Cosines between tokens centred on the sequence mean, `(b, s, s)`.
fn angle_structure(g: &mut Graph, x: Var) -> Result<Var, HookError> {
    let s = g.shape(x)[1];
    let mu = g.sum_axis(x, 1)?;
    let mu = g.scale(mu, 1.0 / s as f64)?;
    let c = g.sub(x, mu)?;
    let c = l2_normalize(g, c)?;
    let ct = g.transpose(c)?;
    Ok(g.matmul(c, ct)?)
}

fn huber_between(g: &mut Graph, a: Var, b: Var, delta: f64) -> Result<Var, HookError> {
    let d = g.sub(a, b)?;
    let h = g.huber(d, delta)?;
    Ok(g.mean(h)?)
}

/// Token-pair distance and angle structures matched with Huber.
fn ckd(g: &mut Graph, s: Var, t: Var, delta: f64) -> Result<Var, HookError> {
    let ds = distance_structure(g, s)?;
    let dt = distance_structure(g, t)?;
    let a = huber_between(g, ds, dt, delta)?;
    let as_ = angle_structure(g, s)?;
    let at = angle_structure(g, t)?;
    let b = huber_between(g, as_, at, delta)?;
    Ok(g.add(a, b)?)
}

fn cosine_relation(g: &mut Graph, x: Var) -> Result<Var, HookError> {
    let n = l2_normalize(g, x)?;
    let nt = g.transpose(n)?;
    Ok(g.matmul(n, nt)?)
}

fn spans(g: &mut Graph, x: Var) -> Result<Var, HookError> {
    let s = g.shape(x)[1];
    let a = g.slice(x, 1, 0, s - 1)?;
    let b = g.slice(x, 1, 1, s)?;
    let sum = g.add(a, b)?;
    Ok(g.scale(sum, 0.5)?)
}

/// Token, span and sample relation structures.
fn mgskd(g: &mut Graph, s: Var, t: Var, delta: f64) -> Result<Var, HookError> {
    let rs = cosine_relation(g, s)?;
    let rt = cosine_relation(g, t)?;
    let tok = mse(g, rt, rs, "token relation")?;
    let mut total = tok;
    if g.shape(s)[1] > 1 {
        let ss = spans(g, s)?;
        let ts = spans(g, t)?;
        let rs = cosine_relation(g, ss)?;
        let rt = cosine_relation(g, ts)?;
        let span = mse(g, rt, rs, "span relation")?;
        total = g.add(total, span)?;
    }
    let ps = mean_pool(g, s)?;
    let pt = mean_pool(g, t)?;
    let rs = cosine_relation(g, ps)?;
    let rt = cosine_relation(g, pt)?;
    let sample = huber_between(g, rs, rt, delta)?;
    Ok(g.add(total, sample)?)
}
