use crate::autodiff::{Graph, Tensor, Var};

use super::config::{DistanceKind, DistanceSpec, Transform};
use super::HookError;

const LOG_FLOOR: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

/// How the values of a distance operand should be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    /// Unnormalised scores; KL/CE apply a tempered softmax.
    Logits,
    /// Rows already sum to one.
    Probabilities,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Side {
    pub var: Var,
    pub kind: InputKind,
}

impl Side {
    pub fn logits(var: Var) -> Self {
        Self { var, kind: InputKind::Logits }
    }

    pub fn probs(var: Var) -> Self {
        Self { var, kind: InputKind::Probabilities }
    }
}

/// Distance between a target `a` (teacher side) and a prediction `b`, both read as logits.
/// KL is `KL(softmax(a/T) ‖ softmax(b/T))·T²`.
pub fn compute_distance(g: &mut Graph, a: Var, b: Var, spec: &DistanceSpec) -> Result<Var, HookError> {
    compute_distance_between(g, Side::logits(a), Side::logits(b), spec, "distance")
}

pub fn compute_distance_between(
    g: &mut Graph,
    target: Side,
    pred: Side,
    spec: &DistanceSpec,
    term: &str,
) -> Result<Var, HookError> {
    let (sa, sb) = (g.shape(target.var).to_vec(), g.shape(pred.var).to_vec());
    if sa != sb {
        return Err(HookError::Dimension { term: term.to_string(), message: format!("teacher {sa:?} vs student {sb:?}") });
    }
    if sa.is_empty() {
        return Err(HookError::Dimension { term: term.to_string(), message: "scalar operands".into() });
    }
    spec.validate("distance").map_err(|e| HookError::composition(term, e.to_string()))?;
    let last = sa.len() - 1;
    let rows = sa[..last].iter().product::<usize>().max(1) as f64;
    let t = spec.temperature;
    Ok(match spec.kind {
        DistanceKind::Mse => {
            let d = g.sub(pred.var, target.var)?;
            let sq = g.mul(d, d)?;
            g.mean(sq)?
        }
        DistanceKind::Huber => {
            let d = g.sub(pred.var, target.var)?;
            let h = g.huber(d, spec.delta)?;
            g.mean(h)?
        }
        DistanceKind::Cos => {
            let dot = g.mul(pred.var, target.var)?;
            let dot = g.sum_axis(dot, last)?;
            let na = row_norm(g, pred.var, last)?;
            let nb = row_norm(g, target.var, last)?;
            let den = g.mul(na, nb)?;
            let cos = g.div(dot, den)?;
            let m = g.mean(cos)?;
            let neg = g.scale(m, -1.0)?;
            let one = g.constant(Tensor::scalar(1.0));
            g.add(one, neg)?
        }
        DistanceKind::Kl | DistanceKind::Ce => {
            let p = match target.kind {
                InputKind::Logits => g.softmax(target.var, last, t)?,
                InputKind::Probabilities => target.var,
            };
            let logq = log_probs(g, pred, last, t)?;
            let cross = g.mul(p, logq)?;
            let mut total = g.sum(cross)?;
            total = g.scale(total, -1.0)?;
            if spec.kind == DistanceKind::Kl {
                let logp = log_probs(g, target, last, t)?;
                let ent = g.mul(p, logp)?;
                let ent = g.sum(ent)?;
                total = g.add(total, ent)?;
            }
            let tempered = target.kind == InputKind::Logits || pred.kind == InputKind::Logits;
            let factor = if tempered { t * t } else { 1.0 };
            g.scale(total, factor / rows)?
        }
    })
}

fn log_probs(g: &mut Graph, side: Side, axis: usize, t: f64) -> Result<Var, HookError> {
    Ok(match side.kind {
        InputKind::Logits => g.log_softmax(side.var, axis, t)?,
        InputKind::Probabilities => {
            let floor = g.constant(Tensor::scalar(LOG_FLOOR));
            let x = g.add(side.var, floor)?;
            g.log(x)?
        }
    })
}

/// `‖x‖` along `axis`, kept as a size-1 axis.
pub(crate) fn row_norm(g: &mut Graph, x: Var, axis: usize) -> Result<Var, HookError> {
    let sq = g.mul(x, x)?;
    let s = g.sum_axis(sq, axis)?;
    let eps = g.constant(Tensor::scalar(NORM_EPS));
    let s = g.add(s, eps)?;
    Ok(g.sqrt(s)?)
}

/// Rows of `x` scaled to unit length along the last axis.
pub(crate) fn l2_normalize(g: &mut Graph, x: Var) -> Result<Var, HookError> {
    let last = g.shape(x).len() - 1;
    let n = row_norm(g, x, last)?;
    Ok(g.div(x, n)?)
}

/// Per-head scores `X·Yᵀ/√d_head` of `(b, s, d)` features, shape `(b, H, s, s)`.
pub(crate) fn relation_scores(g: &mut Graph, x: Var, y: Var, heads: usize) -> Result<Var, HookError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || g.shape(y) != shape.as_slice() {
        return Err(HookError::composition("relation", format!("expected matching (b, s, d) features, got {shape:?}")));
    }
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(HookError::composition("relation", format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let split = |g: &mut Graph, v: Var| -> Result<Var, HookError> {
        let v = g.reshape(v, &[b, s, heads, dh])?;
        Ok(g.permute(v, &[0, 2, 1, 3])?)
    };
    let xh = split(g, x)?;
    let yh = split(g, y)?;
    Ok(g.scaled_dot(xh, yh)?)
}

/// `softmax(X·Yᵀ/√d_head)` per head. Pass the same var twice for a self-relation.
pub fn apply_relation(g: &mut Graph, x: Var, y: Var, heads: usize) -> Result<Var, HookError> {
    let scores = relation_scores(g, x, y, heads)?;
    Ok(g.softmax(scores, 3, 1.0)?)
}

/// Feature transform applied before the distance.
pub fn apply_transform(g: &mut Graph, x: Var, transform: Transform) -> Result<Var, HookError> {
    match transform {
        Transform::None => Ok(x),
        Transform::PairwiseScaledDot => Ok(g.scaled_dot(x, x)?),
        Transform::ClsNormalized => {
            let shape = g.shape(x).to_vec();
            if shape.len() != 3 {
                return Err(HookError::composition("cls_normalized", format!("expected (b, s, d), got {shape:?}")));
            }
            let c = g.slice(x, 1, 0, 1)?;
            let c = g.reshape(c, &[shape[0], shape[2]])?;
            l2_normalize(g, c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hooks::{DistanceKind, DistanceSpec, Relation};

    fn softmax_rows(x: &[f64], t: f64) -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = x.iter().map(|v| ((v - m) / t).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    #[test]
    fn kl_zero_for_identical_and_matches_formula() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 3], vec![3.0, 2.0, 1.0]).unwrap());
        let spec = DistanceSpec::new(DistanceKind::Kl).temperature(2.0);
        let same = compute_distance(&mut g, a, a, &spec).unwrap();
        assert!(g.value(same).item().abs() < 1e-12);
        let d = compute_distance(&mut g, a, b, &spec).unwrap();
        let p = softmax_rows(&[1.0, 2.0, 3.0], 2.0);
        let q = softmax_rows(&[3.0, 2.0, 1.0], 2.0);
        let kl: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>() * 4.0;
        assert!((g.value(d).item() - kl).abs() < 1e-12);
    }

    #[test]
    fn mse_cos_huber() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 4.0]).unwrap());
        let mse = compute_distance(&mut g, a, b, &DistanceSpec::new(DistanceKind::Mse)).unwrap();
        assert!((g.value(mse).item() - 6.0 / 4.0).abs() < 1e-12);
        let cos = compute_distance(&mut g, a, b, &DistanceSpec::new(DistanceKind::Cos)).unwrap();
        assert!((g.value(cos).item() - 0.5).abs() < 1e-9);
        let hub = compute_distance(&mut g, a, b, &DistanceSpec::new(DistanceKind::Huber)).unwrap();
        assert!((g.value(hub).item() - (0.5 + 0.5 + 1.5) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn ce_against_one_hot() {
        let mut g = Graph::new();
        let gold = g.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let z = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let ce = compute_distance_between(&mut g, Side::probs(gold), Side::logits(z), &DistanceSpec::new(DistanceKind::Ce), "t")
            .unwrap();
        assert!((g.value(ce).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_names_term() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 4]));
        let err = compute_distance_between(&mut g, Side::logits(a), Side::logits(b), &DistanceSpec::new(DistanceKind::Mse), "HS:MSE")
            .unwrap_err();
        assert!(err.to_string().contains("HS:MSE"));
    }

    #[test]
    fn relation_rows_sum_to_one() {
        let mut g = Graph::new();
        let mut rng = crate::rng::Rng::new(3);
        let x = g.constant(Tensor::randn(&[2, 5, 8], 1.0, &mut rng));
        let r = apply_relation(&mut g, x, x, 2).unwrap();
        assert_eq!(g.shape(r), &[2, 2, 5, 5]);
        for row in g.value(r).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let _ = Relation::ValueRelation;
    }

    #[test]
    fn cls_normalized_unit_rows() {
        let mut g = Graph::new();
        let mut rng = crate::rng::Rng::new(4);
        let x = g.constant(Tensor::randn(&[3, 4, 6], 1.0, &mut rng));
        let c = apply_transform(&mut g, x, Transform::ClsNormalized).unwrap();
        assert_eq!(g.shape(c), &[3, 6]);
        for row in g.value(c).data().chunks(6) {
            assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let p = apply_transform(&mut g, x, Transform::PairwiseScaledDot).unwrap();
        assert_eq!(g.shape(p), &[3, 4, 4]);
    }

    #[test]
    fn documented_values() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let q = g.constant(Tensor::new(vec![1, 2], vec![9f64.ln(), 0.0]).unwrap());
        let kl = compute_distance(&mut g, p, q, &DistanceSpec::new(DistanceKind::Kl)).unwrap();
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((g.value(kl).item() - want).abs() < 1e-12);
        assert!((want - 0.51083).abs() < 1e-5);

        let u = g.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let u2 = g.scale(u, 2.0).unwrap();
        let cos = compute_distance(&mut g, u, u2, &DistanceSpec::new(DistanceKind::Cos)).unwrap();
        assert!(g.value(cos).item().abs() < 1e-12);

        let eye = g.constant(Tensor::eye(2));
        let r = apply_transform(&mut g, eye, Transform::PairwiseScaledDot).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert_eq!(g.value(r).data(), &[h, 0.0, 0.0, h]);
    }

    #[test]
    fn attention_relation_reproduces_att_tap() {
        use crate::model::{named_spec, FeatureKind, TapKey, TapRequest, TokenBatch, TransformerModel};
        let spec = named_spec("toy-student").unwrap();
        let model = TransformerModel::random(&spec, &mut crate::rng::Rng::new(8)).unwrap();
        let mut g = Graph::new();
        let keys = [FeatureKind::Q, FeatureKind::K, FeatureKind::Att].map(|k| TapKey::new(k, 2));
        let batch = TokenBatch::new((0..20).collect(), 2, 10).unwrap();
        let out = model.forward_with_taps(&mut g, &batch, &TapRequest::new(keys)).unwrap();
        let r = apply_relation(&mut g, out.taps[&keys[0]], out.taps[&keys[1]], spec.heads).unwrap();
        assert!(g.value(r).max_abs_diff(g.value(out.taps[&keys[2]])) < 1e-12);
    }
}
