use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// AdamW settings and the learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-3, warmup_ratio: 0.1, weight_decay: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 0.1 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.warmup_ratio)
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(format!("invalid optimizer settings {self:?}"))
        }
    }
}

/// Linear warmup to `peak` over `⌈ratio·total⌉` steps, then linear decay towards zero.
/// `step` is 1-based.
pub fn lr_at(step: usize, total: usize, warmup_ratio: f64, peak: f64) -> f64 {
    let warm = (warmup_ratio * total as f64).ceil() as usize;
    if warm == 0 {
        peak * (total + 1 - step.clamp(1, total)) as f64 / total as f64
    } else if step <= warm {
        peak * step as f64 / warm as f64
    } else {
        peak * (total + 1 - step.min(total)) as f64 / (total + 1 - warm) as f64
    }
}

/// Joint L2 norm of the present gradients.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Option<Vec<f64>>>) -> f64 {
    grads.into_iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl AdamW {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    /// One update. `decay[i]` enables weight decay on parameter `i`; `None` grads are skipped.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Vec<f64>>], decay: &[bool], lr: f64, cfg: &OptimConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * (mh / (vh.sqrt() + cfg.eps) + wd * *w);
            }
        }
    }
}
