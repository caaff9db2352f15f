use serde::{Deserialize, Serialize};

use super::HookError;

/// Unit in which a schedule's argument is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    #[default]
    Iteration,
    Epoch,
    /// Fraction of the stage completed, in `[0, 1]`.
    Progress,
}

/// Position within a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterState {
    /// 0-based iteration within the stage.
    pub iteration: usize,
    pub total_iterations: usize,
    pub iterations_per_epoch: usize,
}

impl IterState {
    pub fn new(iteration: usize, total_iterations: usize, iterations_per_epoch: usize) -> Self {
        Self { iteration, total_iterations, iterations_per_epoch: iterations_per_epoch.max(1) }
    }

    pub fn epoch(&self) -> usize {
        self.iteration / self.iterations_per_epoch
    }

    pub fn total_epochs(&self) -> usize {
        self.total_iterations.div_ceil(self.iterations_per_epoch).max(1)
    }

    pub fn progress(&self) -> f64 {
        if self.total_iterations == 0 {
            0.0
        } else {
            self.iteration as f64 / self.total_iterations as f64
        }
    }

    fn coordinate(&self, domain: Domain) -> f64 {
        match domain {
            Domain::Iteration => self.iteration as f64,
            Domain::Epoch => self.epoch() as f64,
            Domain::Progress => self.progress(),
        }
    }

    fn span(&self, domain: Domain) -> f64 {
        match domain {
            Domain::Iteration => self.total_iterations.max(1) as f64,
            Domain::Epoch => self.total_epochs() as f64,
            Domain::Progress => 1.0,
        }
    }
}

/// A scalar that varies over a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant {
        value: f64,
    },
    /// `start → end` over `horizon` units (whole stage when omitted), then flat.
    Linear {
        start: f64,
        end: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        horizon: Option<f64>,
        #[serde(default)]
        domain: Domain,
    },
    /// `values[i]` applies from `boundaries[i-1]` up to `boundaries[i]`.
    Phase {
        boundaries: Vec<f64>,
        values: Vec<f64>,
        #[serde(default)]
        domain: Domain,
    },
    /// `φ = 1/T + f·(1 − 1/T)` with `f` the completed fraction of the horizon.
    AnnealPhi {
        t_max: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        horizon: Option<f64>,
        #[serde(default)]
        domain: Domain,
    },
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Schedule::Constant { value }
    }

    pub fn linear(start: f64, end: f64, domain: Domain) -> Self {
        Schedule::Linear { start, end, horizon: None, domain }
    }

    pub fn validate(&self) -> Result<(), HookError> {
        let bad = |m: String| Err(HookError::Validation { field: "schedule".into(), message: m });
        match self {
            Schedule::Constant { value } if !value.is_finite() => bad(format!("non-finite value {value}")),
            Schedule::Linear { start, end, horizon, .. } => {
                if !start.is_finite() || !end.is_finite() {
                    return bad("non-finite endpoint".into());
                }
                match horizon {
                    Some(h) if !(*h > 0.0) => bad(format!("horizon must be positive, got {h}")),
                    _ => Ok(()),
                }
            }
            Schedule::Phase { boundaries, values, .. } => {
                if values.len() != boundaries.len() + 1 {
                    return bad(format!("{} boundaries need {} values, got {}", boundaries.len(), boundaries.len() + 1, values.len()));
                }
                if boundaries.windows(2).any(|w| !(w[0] < w[1])) {
                    return bad("boundaries must be strictly increasing".into());
                }
                if values.iter().chain(boundaries).any(|v| !v.is_finite()) {
                    return bad("non-finite phase entry".into());
                }
                Ok(())
            }
            Schedule::AnnealPhi { t_max, horizon, .. } => {
                if !(*t_max >= 1.0) || !t_max.is_finite() {
                    return bad(format!("t_max must be at least 1, got {t_max}"));
                }
                match horizon {
                    Some(h) if !(*h > 0.0) => bad(format!("horizon must be positive, got {h}")),
                    _ => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }

    pub fn domain(&self) -> Option<Domain> {
        match self {
            Schedule::Constant { .. } => None,
            Schedule::Linear { domain, .. } | Schedule::Phase { domain, .. } | Schedule::AnnealPhi { domain, .. } => {
                Some(*domain)
            }
        }
    }

    pub fn value(&self, state: &IterState) -> f64 {
        match self {
            Schedule::Constant { value } => *value,
            Schedule::Linear { start, end, horizon, domain } => {
                let f = fraction(state, *domain, *horizon);
                start + (end - start) * f
            }
            Schedule::Phase { boundaries, values, domain } => {
                let x = state.coordinate(*domain);
                values[boundaries.iter().filter(|&&b| b <= x).count()]
            }
            Schedule::AnnealPhi { t_max, horizon, domain } => {
                let f = fraction(state, *domain, *horizon);
                1.0 / t_max + f * (1.0 - 1.0 / t_max)
            }
        }
    }
}

fn fraction(state: &IterState, domain: Domain, horizon: Option<f64>) -> f64 {
    let h = horizon.unwrap_or_else(|| state.span(domain));
    (state.coordinate(domain) / h).clamp(0.0, 1.0)
}
