use crate::autodiff::Tensor;
use crate::hooks::{MixMode, TeacherMix};
use crate::registry::TeacherPolicy;
use crate::rng::Rng;

use super::OrchestratorError;

/// Softmax temperature of the RL-KD selection policy.
pub const RLKD_TEMPERATURE: f64 = 0.1;
/// Moving-average rate of RL-KD teacher values.
pub const RLKD_RATE: f64 = 0.1;

/// State a policy carries across iterations.
#[derive(Debug, Clone)]
pub struct PolicyState {
    /// Per-teacher running reward (RL-KD).
    pub values: Vec<f64>,
    rng: Rng,
    last: Option<usize>,
}

impl PolicyState {
    pub fn new(teachers: usize, seed: u64) -> Self {
        Self { values: vec![0.5; teachers], rng: Rng::new(seed).fork(0x5E1EC7), last: None }
    }

    /// Teacher chosen by the most recent RL-KD selection.
    pub fn last_choice(&self) -> Option<usize> {
        self.last
    }
}

fn probabilities(logits: &Tensor) -> Vec<Vec<f64>> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c.max(1))
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

/// Mean per-row entropy (nats) of the distributions given by `logits`.
pub fn mean_entropy(logits: &Tensor) -> f64 {
    let rows = probabilities(logits);
    let n = rows.len().max(1) as f64;
    rows.iter()
        .map(|p| -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Weights over teachers for one batch. `teacher_logits` are each teacher's
/// output rows; `gold` the gold class per row.
pub fn select_teachers(
    policy: TeacherPolicy,
    teacher_logits: &[Tensor],
    gold: &[usize],
    state: &mut PolicyState,
) -> Result<TeacherMix, OrchestratorError> {
    let n = teacher_logits.len();
    if n < 2 {
        return Err(OrchestratorError::Policy(format!("{policy:?} needs at least 2 teachers, got {n}")));
    }
    Ok(match policy {
        TeacherPolicy::Tmkd => TeacherMix { weights: vec![1.0 / n as f64; n], mode: MixMode::Probabilities },
        TeacherPolicy::MtBert => TeacherMix { weights: vec![1.0; n], mode: MixMode::LossAverage },
        TeacherPolicy::Uncertainty => {
            let inv: Vec<f64> = teacher_logits.iter().map(|t| 1.0 / (mean_entropy(t) + 1e-12)).collect();
            let z: f64 = inv.iter().sum();
            TeacherMix { weights: inv.iter().map(|w| w / z).collect(), mode: MixMode::Probabilities }
        }
        TeacherPolicy::RlKd => {
            if state.values.len() != n {
                return Err(OrchestratorError::Policy(format!(
                    "policy state tracks {} teachers, batch has {n}",
                    state.values.len()
                )));
            }
            let m = state.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = state.values.iter().map(|v| ((v - m) / RLKD_TEMPERATURE).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut u = state.rng.next_f64() * z;
            let mut pick = n - 1;
            for (i, w) in e.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            let pred = teacher_logits[pick].argmax_last();
            let hits = pred.iter().zip(gold).filter(|(p, y)| p == y).count();
            let reward = hits as f64 / gold.len().max(1) as f64;
            state.values[pick] = (1.0 - RLKD_RATE) * state.values[pick] + RLKD_RATE * reward;
            state.last = Some(pick);
            let mut weights = vec![0.0; n];
            weights[pick] = 1.0;
            TeacherMix { weights, mode: MixMode::LossAverage }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        Tensor::new(vec![rows.len(), c], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn identical_teachers_share_weight() {
        let t = logits(&[&[0.3, -1.0, 2.0]]);
        let mut st = PolicyState::new(2, 1);
        let mix = select_teachers(TeacherPolicy::Uncertainty, &[t.clone(), t], &[2], &mut st).unwrap();
        assert!((mix.weights[0] - 0.5).abs() < 1e-15 && (mix.weights[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn confident_teacher_outweighs_uniform() {
        let sharp = logits(&[&[40.0, 0.0, 0.0]]);
        let flat = logits(&[&[0.0, 0.0, 0.0]]);
        let mut st = PolicyState::new(2, 1);
        let mix = select_teachers(TeacherPolicy::Uncertainty, &[sharp, flat], &[0], &mut st).unwrap();
        assert!(mix.weights[0] > mix.weights[1]);
        assert!((mix.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_teacher_is_rejected() {
        let t = logits(&[&[1.0, 0.0]]);
        let mut st = PolicyState::new(1, 1);
        for p in [TeacherPolicy::Tmkd, TeacherPolicy::MtBert, TeacherPolicy::Uncertainty, TeacherPolicy::RlKd] {
            assert!(matches!(select_teachers(p, &[t.clone()], &[0], &mut st), Err(OrchestratorError::Policy(_))));
        }
    }

    #[test]
    fn fixed_policies() {
        let t = logits(&[&[1.0, 0.0]]);
        let mut st = PolicyState::new(3, 1);
        let ts = [t.clone(), t.clone(), t];
        let tm = select_teachers(TeacherPolicy::Tmkd, &ts, &[0], &mut st).unwrap();
        assert_eq!(tm.mode, MixMode::Probabilities);
        assert!(tm.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
        let mt = select_teachers(TeacherPolicy::MtBert, &ts, &[0], &mut st).unwrap();
        assert_eq!(mt.weights, vec![1.0; 3]);
    }

    #[test]
    fn rlkd_learns_to_prefer_the_accurate_teacher() {
        let good = logits(&[&[3.0, 0.0], &[0.0, 3.0]]);
        let bad = logits(&[&[0.0, 3.0], &[3.0, 0.0]]);
        let gold = [0, 1];
        let mut st = PolicyState::new(2, 9);
        let mut picks = [0usize; 2];
        for _ in 0..300 {
            let mix = select_teachers(TeacherPolicy::RlKd, &[good.clone(), bad.clone()], &gold, &mut st).unwrap();
            assert_eq!(mix.weights.iter().sum::<f64>(), 1.0);
            picks[st.last_choice().unwrap()] += 1;
        }
        assert!(st.values[0] > st.values[1]);
        assert!(picks[0] > picks[1], "{picks:?}");
    }
}
