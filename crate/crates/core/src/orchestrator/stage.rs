use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, TensorError};
use crate::data::{Batch, Split, SyntheticCorpus};
use crate::hooks::{
    apply_transform, compose_loss, compute_distance, frozen, interchange_forward, plan_operations, resolve_terms,
    run_student, uniform_map, AuxModel, DistanceKind, DistanceSpec, FeatureSources, ForwardPlan, HookConfig,
    HookError, IterState, Resolution, StageContext, StageKind, TeacherMix, TermValue, Transform, View, ViewTaps,
};
use crate::model::{save_checkpoint, FeatureKind, ModelError, TapBundle, TapKey, TapRequest, TransformerModel};
use crate::registry::TeacherPolicy;
use crate::rng::Rng;
use crate::telemetry::{DistanceKey, DistanceRecord, Recorder, Variant, KL_TEMPERATURES, SNAPSHOT_EVERY};

use super::optim::{global_norm, lr_at, AdamW, OptimConfig};
use super::policy::{select_teachers, PolicyState};
use super::OrchestratorError;

const AUX_SALT: u64 = 0xA0C5;
const PLAN_SALT: u64 = 0x91A7;
const MASK_SALT: u64 = 0x3A5C;

/// Loop settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub kind: StageKind,
    pub batch_size: usize,
    /// Rows per forward pass; `batch_size / micro_batch` passes are accumulated per step.
    pub micro_batch: usize,
    pub iterations: usize,
    pub optim: OptimConfig,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub seed: u64,
    /// Telemetry cadence in iterations; 0 disables snapshots.
    pub snapshot_every: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            kind: StageKind::Task,
            batch_size: 8,
            micro_batch: 8,
            iterations: 200,
            optim: OptimConfig::default(),
            dropout: 0.1,
            attention_dropout: 0.1,
            seed: 0,
            snapshot_every: SNAPSHOT_EVERY,
        }
    }
}

impl StageConfig {
    pub fn new(kind: StageKind, iterations: usize) -> Self {
        Self { kind, iterations, ..Self::default() }
    }

    pub fn accumulation_steps(&self) -> usize {
        self.batch_size / self.micro_batch.max(1)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        if self.batch_size == 0 || self.micro_batch == 0 {
            return bad("batch_size and micro_batch must be positive".into());
        }
        if self.batch_size % self.micro_batch != 0 {
            return bad(format!("micro_batch {} does not divide batch_size {}", self.micro_batch, self.batch_size));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.attention_dropout) {
            return bad("dropout rates must lie in [0, 1)".into());
        }
        self.optim.validate().map_err(OrchestratorError::Config)
    }
}

/// Everything a stage reads besides the student.
#[derive(Debug, Clone)]
pub struct StageRun<'a> {
    /// Label written into telemetry records.
    pub name: String,
    pub hooks: &'a HookConfig,
    /// Teachers first, then assistants.
    pub sources: Vec<&'a TransformerModel>,
    pub teachers: usize,
    pub policy: Option<TeacherPolicy>,
    pub corpus: &'a SyntheticCorpus,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    /// Total loss per iteration.
    pub losses: Vec<f64>,
    /// Per-term breakdown per iteration.
    pub terms: Vec<Vec<TermValue>>,
    pub records: Vec<DistanceRecord>,
    pub aux: AuxModel,
}

/// Validation-set quality of a model on one kind of objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Mean cross-entropy of the gold rows.
    pub loss: f64,
    pub perplexity: f64,
    pub accuracy: f64,
}

struct MicroResult {
    loss: f64,
    terms: Vec<TermValue>,
    student: Vec<Option<Vec<f64>>>,
    aux: Vec<Option<Vec<f64>>>,
}

struct Step<'a, 'b> {
    run: &'a StageRun<'b>,
    cfg: &'a StageConfig,
    res: &'a Resolution,
    plan: &'a ForwardPlan,
    ctx: &'a StageContext<'b>,
    iteration: usize,
}

fn hook_error(iteration: usize) -> impl Fn(HookError) -> OrchestratorError {
    move |e| match e {
        HookError::NonFinite { term, detail } => OrchestratorError::NonFinite { iteration, term, detail },
        e => OrchestratorError::Hook(e),
    }
}

/// Non-finite activations inside a forward pass are reported against that pass.
fn forward_error(iteration: usize, who: String) -> impl Fn(HookError) -> OrchestratorError {
    move |e| match e {
        HookError::Tensor(TensorError::NonFinite { op }) | HookError::Model(ModelError::Tensor(TensorError::NonFinite { op })) => {
            OrchestratorError::NonFinite { iteration, term: who.clone(), detail: format!("`{op}` produced a non-finite value") }
        }
        e => hook_error(iteration)(e),
    }
}

fn output_request(view: &crate::model::OutputView) -> TapRequest {
    TapRequest::default().with_view(view.clone())
}

fn micro_step(
    s: &Step<'_, '_>,
    student: &TransformerModel,
    aux: &AuxModel,
    batch: &Batch,
    micro: usize,
    policy: &mut Option<PolicyState>,
) -> Result<MicroResult, OrchestratorError> {
    let herr = hook_error(s.iteration);
    let mut g = Graph::new();
    let rng = Rng::new(s.cfg.seed).fork(s.iteration as u64).fork(micro as u64);
    let mut sb = student
        .bind(&mut g, true)
        .with_dropout(s.cfg.dropout, rng.clone())
        .with_attention_dropout(s.cfg.attention_dropout, rng);
    let ab = aux.bind(&mut g);
    let source_tokens = batch.tokens.rolled(1);
    let run = s.run;
    let n = run.sources.len();
    let wants_policy = |m: usize| run.policy.is_some() && m < run.teachers;

    let mut bounds = Vec::with_capacity(n);
    for (m, model) in run.sources.iter().enumerate() {
        let needed = s.res.uses_model(m)
            || wants_policy(m)
            || s.plan.replace.as_ref().is_some_and(|p| p.teacher == m)
            || s.plan.interchange.as_ref().is_some_and(|p| p.teacher == m);
        bounds.push(needed.then(|| model.bind(&mut g, false)));
    }

    let mut model_taps: Vec<Option<ViewTaps>> = vec![None; n];
    for m in 0..n {
        let Some(b) = bounds[m].as_mut() else { continue };
        let base_req = match s.res.model_request(m, View::Base, &batch.view) {
            Some(mut r) => {
                if wants_policy(m) {
                    r.keys.insert(TapKey::global(FeatureKind::Soft));
                }
                Some(r)
            }
            None if wants_policy(m) => Some(TapRequest::new([TapKey::global(FeatureKind::Soft)]).with_view(batch.view.clone())),
            None => None,
        };
        let base = match base_req {
            Some(r) => b
                .forward(&mut g, &batch.tokens, &r)
                .map_err(HookError::from)
                .map_err(forward_error(s.iteration, format!("forward of teacher-side model {m}")))?
                .taps,
            None => TapBundle::new(),
        };
        let interchange = match (&s.plan.interchange, s.res.model_request(m, View::Interchange, &batch.view)) {
            (Some(ip), Some(r)) if ip.teacher == m => Some(
                interchange_forward(&mut g, b, &batch.tokens, &source_tokens, ip.teacher_layer, ip.teacher_dims, &r)
                    .map_err(forward_error(s.iteration, format!("interchange forward of teacher-side model {m}")))?
                    .taps,
            ),
            _ => None,
        };
        model_taps[m] = Some(ViewTaps { base, interchange });
    }

    let sreq = s.res.student_request(View::Base, &batch.view).unwrap_or_else(|| output_request(&batch.view));
    let replace_teacher = s.plan.replace.as_ref().map(|p| p.teacher);
    let teacher_bound = match replace_teacher {
        Some(t) => bounds[t].as_mut(),
        None => None,
    };
    let fwd = run_student(&mut g, &mut sb, teacher_bound, ab.replace_projections(), s.plan.replace.as_ref(), &batch.tokens, &sreq)
        .map_err(forward_error(s.iteration, "student forward".into()))?;
    let interchange = match (&s.plan.interchange, s.res.student_request(View::Interchange, &batch.view)) {
        (Some(ip), Some(r)) => Some(
            interchange_forward(&mut g, &mut sb, &batch.tokens, &source_tokens, ip.student_layer, ip.student_dims, &r)
                .map_err(forward_error(s.iteration, "student interchange forward".into()))?
                .taps,
        ),
        _ => None,
    };
    let student_taps = ViewTaps { base: fwd.taps, interchange };

    let mix = match (run.policy, policy.as_mut()) {
        (Some(p), Some(state)) => {
            let logits: Vec<Tensor> = (0..run.teachers)
                .map(|m| {
                    let soft = model_taps[m].as_ref().and_then(|t| t.base.get(&TapKey::global(FeatureKind::Soft)));
                    soft.map(|v| g.value(*v).clone())
                        .ok_or_else(|| OrchestratorError::Policy(format!("teacher {m} produced no soft labels")))
                })
                .collect::<Result<_, _>>()?;
            select_teachers(p, &logits, &batch.gold, state)?
        }
        _ => TeacherMix::uniform(run.teachers),
    };

    let src = FeatureSources {
        student: &student_taps,
        models: model_taps.iter().map(|t| t.as_ref()).collect(),
        gold: Some(&batch.gold),
    };
    let composed = compose_loss(&mut g, run.hooks, s.res, s.ctx, &src, &ab, &mix).map_err(&herr)?;
    let loss = g.value(composed.loss).item();
    if !loss.is_finite() {
        let term = composed
            .terms
            .iter()
            .find(|t| !(t.value * t.weight).is_finite())
            .map_or_else(|| "total".to_string(), |t| t.label.clone());
        return Err(OrchestratorError::NonFinite { iteration: s.iteration, term, detail: format!("loss {loss}") });
    }
    if g.requires_grad(composed.loss) {
        g.backward(composed.loss)?;
    }
    let grads = |vars: &[crate::autodiff::Var]| vars.iter().map(|v| g.grad(*v).map(<[f64]>::to_vec)).collect::<Vec<_>>();
    Ok(MicroResult { loss, terms: composed.terms, student: grads(sb.vars()), aux: grads(ab.vars()) })
}

fn accumulate(into: &mut [Option<Vec<f64>>], from: Vec<Option<Vec<f64>>>, scale: f64) {
    for (acc, g) in into.iter_mut().zip(from) {
        let Some(g) = g else { continue };
        match acc {
            Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += scale * g),
            None => *acc = Some(g.into_iter().map(|x| scale * x).collect()),
        }
    }
}

/// Train `student` for one stage of `run.hooks`.
pub fn run_stage(
    student: &mut TransformerModel,
    run: &StageRun<'_>,
    cfg: &StageConfig,
) -> Result<StageOutcome, OrchestratorError> {
    cfg.validate()?;
    if cfg.kind != run.hooks.stage {
        return Err(OrchestratorError::Config(format!(
            "stage config is {:?} but the hooks describe a {:?} stage",
            cfg.kind, run.hooks.stage
        )));
    }
    if run.teachers > run.sources.len() {
        return Err(OrchestratorError::Config("more teachers declared than models supplied".into()));
    }
    run.hooks.validate()?;
    let batches = run.corpus.batches(Split::Train, cfg.kind, cfg.batch_size, cfg.seed ^ MASK_SALT);
    if batches.is_empty() {
        return Err(OrchestratorError::Data(format!(
            "{} training sequences cannot fill a batch of {}",
            run.corpus.train.len(),
            cfg.batch_size
        )));
    }
    let parts = cfg.accumulation_steps();
    let student_spec = student.spec().clone();
    let specs: Vec<_> = run.sources.iter().map(|m| m.spec()).collect();
    let context = |iteration: usize| StageContext {
        student: &student_spec,
        sources: specs.clone(),
        teachers: run.teachers,
        state: IterState::new(iteration, cfg.iterations, batches.len()),
        seed: cfg.seed,
    };
    let mut aux = AuxModel::for_stage(run.hooks, &context(0), &mut Rng::new(cfg.seed).fork(AUX_SALT))?;
    let frozen = frozen(&run.hooks.operation_hooks, student.names());
    let decay: Vec<bool> = student.tensors().iter().chain(aux.tensors()).map(|t| t.rank() >= 2).collect();
    let mut opt = {
        let all: Vec<&Tensor> = student.tensors().iter().chain(aux.tensors()).collect();
        AdamW::new(&all)
    };
    let mut plan_rng = Rng::new(cfg.seed).fork(PLAN_SALT);
    let mut policy = run.policy.map(|_| PolicyState::new(run.teachers, cfg.seed));
    let probe = Probe::new(run, cfg);
    let mut recorder = Recorder::new();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut terms = Vec::with_capacity(cfg.iterations);

    for k in 0..cfg.iterations {
        let ctx = context(k);
        let res = resolve_terms(run.hooks, &ctx)?;
        let plan = plan_operations(
            &run.hooks.operation_hooks,
            &run.hooks.schedules,
            &ctx.state,
            &student_spec,
            &specs,
            &mut plan_rng,
        )?;
        let step = Step { run, cfg, res: &res, plan: &plan, ctx: &ctx, iteration: k };
        let batch = &batches[k % batches.len()];
        let mut sgrads: Vec<Option<Vec<f64>>> = vec![None; student.tensors().len()];
        let mut agrads: Vec<Option<Vec<f64>>> = vec![None; aux.tensors().len()];
        let mut loss = 0.0;
        let mut breakdown: Vec<TermValue> = Vec::new();
        let scale = 1.0 / parts as f64;
        for (micro, mb) in batch.split(parts).iter().enumerate() {
            let r = micro_step(&step, student, &aux, mb, micro, &mut policy)?;
            loss += scale * r.loss;
            if breakdown.is_empty() {
                breakdown = r.terms.iter().map(|t| TermValue { value: 0.0, ..t.clone() }).collect();
            }
            for (b, t) in breakdown.iter_mut().zip(&r.terms) {
                b.value += scale * t.value;
            }
            accumulate(&mut sgrads, r.student, scale);
            accumulate(&mut agrads, r.aux, scale);
        }
        if cfg.snapshot_every > 0 && k % cfg.snapshot_every == 0 {
            recorder.push(probe.record(student, run, k, loss)?)?;
        }
        losses.push(loss);
        terms.push(breakdown);

        for (g, f) in sgrads.iter_mut().zip(&frozen) {
            if *f {
                *g = None;
            }
        }
        let norm = global_norm(sgrads.iter().chain(&agrads));
        let clip = if cfg.optim.clip > 0.0 && norm > cfg.optim.clip { cfg.optim.clip / norm } else { 1.0 };
        let grads: Vec<Option<Vec<f64>>> = sgrads
            .into_iter()
            .chain(agrads)
            .map(|g| g.map(|v| if clip == 1.0 { v } else { v.into_iter().map(|x| x * clip).collect() }))
            .collect();
        let lr = lr_at(k + 1, cfg.iterations, cfg.optim.warmup_ratio, cfg.optim.lr);
        let mut params: Vec<&mut Tensor> = student.tensors_mut().iter_mut().chain(aux.tensors_mut().iter_mut()).collect();
        opt.step(&mut params, &grads, &decay, lr, &cfg.optim);
    }
    if let Some(path) = &run.checkpoint {
        save_checkpoint(student, path)?;
    }
    Ok(StageOutcome { losses, terms, records: recorder.into_records(), aux })
}

/// Fixed held-out batches used for telemetry snapshots.
struct Probe {
    validation: Vec<Batch>,
    feature_batch: Option<Batch>,
}

impl Probe {
    fn new(run: &StageRun<'_>, cfg: &StageConfig) -> Self {
        if cfg.snapshot_every == 0 {
            return Self { validation: Vec::new(), feature_batch: None };
        }
        let size = cfg.batch_size.min(run.corpus.validation.len()).max(1);
        let validation = run.corpus.batches(Split::Validation, cfg.kind, size, cfg.seed ^ MASK_SALT);
        let feature_batch = validation.first().cloned();
        Self { validation, feature_batch }
    }

    fn record(
        &self,
        student: &TransformerModel,
        run: &StageRun<'_>,
        iteration: usize,
        loss: f64,
    ) -> Result<DistanceRecord, OrchestratorError> {
        let distances = match (&self.feature_batch, run.sources.first()) {
            (Some(b), Some(teacher)) => feature_distances(student, teacher, b)?,
            _ => BTreeMap::new(),
        };
        let task_metric = if self.validation.is_empty() { None } else { Some(evaluate(student, &self.validation)?.perplexity) };
        Ok(DistanceRecord { iteration, stage: run.name.clone(), distances, loss, task_metric })
    }
}

/// Teacher/student distances for every recorded feature key on one batch.
pub fn feature_distances(
    student: &TransformerModel,
    teacher: &TransformerModel,
    batch: &Batch,
) -> Result<BTreeMap<DistanceKey, f64>, OrchestratorError> {
    let (ss, ts) = (student.spec(), teacher.spec());
    let mut g = Graph::new();
    let sf = student.forward_with_taps(&mut g, &batch.tokens, &TapRequest::everything(ss.layers).with_view(batch.view.clone()))?;
    let tf = teacher.forward_with_taps(&mut g, &batch.tokens, &TapRequest::everything(ts.layers).with_view(batch.view.clone()))?;
    let mse = DistanceSpec::new(DistanceKind::Mse);
    let mut out = BTreeMap::new();
    let mut pairs = vec![(FeatureKind::Emb, 0, 0)];
    for i in 1..=ss.layers {
        let j = uniform_map(i, ss.layers, ts.layers).max(1);
        for f in [FeatureKind::Att, FeatureKind::Q, FeatureKind::K, FeatureKind::V, FeatureKind::HS] {
            pairs.push((f, i, j));
        }
    }
    let key = |f: FeatureKind, l: usize| if f.is_layered() { TapKey::new(f, l) } else { TapKey::global(f) };
    for (f, i, j) in pairs {
        let (a, b) = (sf.taps[&key(f, i)], tf.taps[&key(f, j)]);
        if g.shape(a) == g.shape(b) {
            let d = compute_distance(&mut g, b, a, &mse)?;
            out.insert(DistanceKey::new(f, i, Variant::Raw), g.value(d).item());
        }
        if f != FeatureKind::Att {
            let pa = apply_transform(&mut g, a, Transform::PairwiseScaledDot)?;
            let pb = apply_transform(&mut g, b, Transform::PairwiseScaledDot)?;
            let d = compute_distance(&mut g, pb, pa, &mse)?;
            out.insert(DistanceKey::new(f, i, Variant::Pairwise), g.value(d).item());
        }
    }
    let soft = TapKey::global(FeatureKind::Soft);
    let (s, t) = (sf.taps[&soft], tf.taps[&soft]);
    for temp in KL_TEMPERATURES {
        let d = compute_distance(&mut g, t, s, &DistanceSpec::new(DistanceKind::Kl).temperature(temp as f64))?;
        out.insert(DistanceKey::new(FeatureKind::Soft, 0, Variant::Kl(temp)), g.value(d).item());
    }
    let hard = TapKey::global(FeatureKind::Hard);
    let (hs, ht) = (g.value(sf.taps[&hard]).data(), g.value(tf.taps[&hard]).data());
    let differ = hs.iter().zip(ht).filter(|(a, b)| a != b).count();
    out.insert(DistanceKey::new(FeatureKind::Hard, 0, Variant::Raw), differ as f64 / hs.len().max(1) as f64);
    Ok(out)
}

/// Cross-entropy, perplexity and accuracy of `model` over `batches` without dropout.
pub fn evaluate(model: &TransformerModel, batches: &[Batch]) -> Result<Evaluation, OrchestratorError> {
    let (mut nll, mut hits, mut rows) = (0.0, 0usize, 0usize);
    for b in batches {
        let mut g = Graph::new();
        let req = TapRequest::new([TapKey::global(FeatureKind::Soft)]).with_view(b.view.clone());
        let f = model.forward_with_taps(&mut g, &b.tokens, &req)?;
        let logits = g.value(f.taps[&TapKey::global(FeatureKind::Soft)]);
        let c = *logits.shape().last().unwrap_or(&1);
        for (row, &y) in logits.data().chunks(c).zip(&b.gold) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            nll += lse - row[y];
            let best = (0..c).fold(0, |bi, i| if row[i] > row[bi] { i } else { bi });
            hits += usize::from(best == y);
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(OrchestratorError::Data("no evaluation rows".into()));
    }
    let loss = nll / rows as f64;
    Ok(Evaluation { loss, perplexity: loss.exp(), accuracy: hits as f64 / rows as f64 })
}
