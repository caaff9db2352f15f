use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::Var;
use crate::model::{Bound, FeatureKind, Forward, ModelSpec, TapKey, TapRequest, Taps, TokenBatch};
use crate::rng::Rng;

use super::config::{LayerDropMode, OperationHook};
use super::schedule::{IterState, Schedule};
use super::HookError;

/// Teacher layer aligned with student layer `i` (1-based): `⌈i·L_t/L_s⌉`.
pub fn uniform_map(i: usize, student_layers: usize, teacher_layers: usize) -> usize {
    (i * teacher_layers).div_ceil(student_layers)
}

/// Student layers that layered loss terms may read, or `None` when no layer-drop hook is present.
pub fn active_layers(
    hooks: &[OperationHook],
    schedules: &BTreeMap<String, Schedule>,
    state: &IterState,
    student_layers: usize,
) -> Result<Option<BTreeSet<usize>>, HookError> {
    for h in hooks {
        if let OperationHook::LayerDrop { mode, active } = h {
            let n = (active.value(schedules, state)?.round() as usize).clamp(1, student_layers);
            return Ok(Some(match mode {
                LayerDropMode::Prefix => (1..=n).collect(),
                LayerDropMode::Progressive => BTreeSet::from([n]),
            }));
        }
    }
    Ok(None)
}

/// Per-parameter flag: `true` when a freeze hook covers the name.
pub fn frozen(hooks: &[OperationHook], names: &[String]) -> Vec<bool> {
    let prefixes: Vec<&String> = hooks
        .iter()
        .filter_map(|h| match h {
            OperationHook::Freeze { params } => Some(params),
            _ => None,
        })
        .flatten()
        .collect();
    names.iter().map(|n| prefixes.iter().any(|p| n.starts_with(p.as_str()))).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplacePlan {
    /// Teacher-side model providing the blocks.
    pub teacher: usize,
    /// `replaced[i - 1]` is true when student block `i` is swapped out this step.
    pub replaced: Vec<bool>,
    /// Teacher layers standing in for each student block.
    pub groups: Vec<std::ops::RangeInclusive<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterchangePlan {
    pub teacher: usize,
    pub student_layer: usize,
    pub teacher_layer: usize,
    /// Leading hidden units swapped in the student.
    pub student_dims: usize,
    /// Leading hidden units swapped in the teacher.
    pub teacher_dims: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardPlan {
    pub replace: Option<ReplacePlan>,
    pub interchange: Option<InterchangePlan>,
}

/// Sample this step's forward modifications.
pub fn plan_operations(
    hooks: &[OperationHook],
    schedules: &BTreeMap<String, Schedule>,
    state: &IterState,
    student: &ModelSpec,
    sources: &[&ModelSpec],
    rng: &mut Rng,
) -> Result<ForwardPlan, HookError> {
    let mut plan = ForwardPlan::default();
    let source = |t: usize| {
        sources.get(t).copied().ok_or_else(|| HookError::Plan(format!("teacher {t} is not configured")))
    };
    for h in hooks {
        match h {
            OperationHook::ReplaceBlock { probability, teacher } => {
                let t = source(*teacher)?;
                let (ls, lt) = (student.layers, t.layers);
                if lt < ls {
                    return Err(HookError::Plan(format!(
                        "no block alignment: teacher `{}` has {lt} layers, student `{}` has {ls}",
                        t.name, student.name
                    )));
                }
                let p = probability.value(schedules, state)?.clamp(0.0, 1.0);
                let groups = (1..=ls).map(|i| uniform_map(i - 1, ls, lt) + 1..=uniform_map(i, ls, lt)).collect();
                let replaced = (0..ls).map(|_| rng.bernoulli(p)).collect();
                plan.replace = Some(ReplacePlan { teacher: *teacher, replaced, groups });
            }
            OperationHook::Interchange { dims_fraction, teacher } => {
                let t = source(*teacher)?;
                let sl = 1 + rng.below(student.layers);
                let frac = *dims_fraction;
                plan.interchange = Some(InterchangePlan {
                    teacher: *teacher,
                    student_layer: sl,
                    teacher_layer: uniform_map(sl, student.layers, t.layers).max(1),
                    student_dims: ((frac * student.dim as f64).ceil() as usize).clamp(1, student.dim),
                    teacher_dims: ((frac * t.dim as f64).ceil() as usize).clamp(1, t.dim),
                });
            }
            OperationHook::LayerDrop { .. } | OperationHook::Freeze { .. } => {}
        }
    }
    Ok(plan)
}

/// Width maps around substituted teacher blocks; `None` when widths agree.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReplaceProjections {
    pub up: Option<Var>,
    pub down: Option<Var>,
}

/// Student forward, optionally with some blocks replaced by teacher blocks.
pub fn run_student(
    g: &mut crate::autodiff::Graph,
    student: &mut Bound<'_>,
    teacher: Option<&mut Bound<'_>>,
    projections: ReplaceProjections,
    plan: Option<&ReplacePlan>,
    batch: &TokenBatch,
    request: &TapRequest,
) -> Result<Forward, HookError> {
    let (Some(plan), Some(teacher)) = (plan, teacher) else {
        return Ok(student.forward(g, batch, request)?);
    };
    student.check_request(request)?;
    let mut taps = Taps::new(request.clone());
    let mut h = student.embed(g, batch, &mut taps)?;
    for i in 1..=student.spec().layers {
        if plan.replaced[i - 1] {
            let mut x = match projections.up {
                Some(w) => g.matmul(h, w)?,
                None => h,
            };
            for j in plan.groups[i - 1].clone() {
                x = teacher.layer(g, j, x, &mut Taps::none())?;
            }
            h = match projections.down {
                Some(w) => g.matmul(x, w)?,
                None => x,
            };
            taps.offer(TapKey::new(FeatureKind::HS, i), h);
        } else {
            h = student.layer(g, i, h, &mut taps)?;
        }
    }
    let logits = student.head(g, h)?;
    student.finish(g, logits, &mut taps)?;
    Ok(Forward { logits, taps: taps.into_bundle() })
}

/// `[source[..k] | base[k..]]` along the hidden axis.
pub fn splice_dims(g: &mut crate::autodiff::Graph, base: Var, source: Var, k: usize) -> Result<Var, HookError> {
    let shape = g.shape(base).to_vec();
    let axis = shape.len() - 1;
    let d = shape[axis];
    if k == 0 || k > d {
        return Err(HookError::Plan(format!("cannot swap {k} of {d} hidden units")));
    }
    if k == d {
        return Ok(source);
    }
    let head = g.slice(source, axis, 0, k)?;
    let tail = g.slice(base, axis, k, d)?;
    Ok(g.concat(&[head, tail], axis)?)
}

/// Counterfactual pass: run `base` up to `layer`, overwrite the first `dims`
/// hidden units with those `source` produces at the same layer, and finish.
/// Taps at or below `layer` hold base-pass values.
pub fn interchange_forward(
    g: &mut crate::autodiff::Graph,
    model: &mut Bound<'_>,
    base: &TokenBatch,
    source: &TokenBatch,
    layer: usize,
    dims: usize,
    request: &TapRequest,
) -> Result<Forward, HookError> {
    model.check_request(request)?;
    let layers = model.spec().layers;
    if layer == 0 || layer > layers {
        return Err(HookError::Plan(format!("interchange layer {layer} outside 1..={layers}")));
    }
    let mut hs = model.embed(g, source, &mut Taps::none())?;
    for l in 1..=layer {
        hs = model.layer(g, l, hs, &mut Taps::none())?;
    }
    let mut taps = Taps::new(request.clone());
    let mut h = model.embed(g, base, &mut taps)?;
    for l in 1..=layer {
        h = model.layer(g, l, h, &mut taps)?;
    }
    h = splice_dims(g, h, hs, dims)?;
    for l in layer + 1..=layers {
        h = model.layer(g, l, h, &mut taps)?;
    }
    let logits = model.head(g, h)?;
    model.finish(g, logits, &mut taps)?;
    Ok(Forward { logits, taps: taps.into_bundle() })
}
