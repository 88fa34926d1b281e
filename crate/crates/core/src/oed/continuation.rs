//! ℓ1 warm start followed by `Φ_ε` stages with decreasing `ε`.

use serde::{Deserialize, Serialize};

use crate::error::{OedError, Result};
use crate::oed::objective::OedObjective;
use crate::oed::optimizer::{count_active, minimize, Evaluation, IterationLog, OptimizerConfig, OptimizerResult, Status, ACTIVE_THRESHOLD};
use crate::oed::penalty::Penalty;

/// Minimizes `Θ(w) + γΦ(w)` from `w0`.
pub fn solve_design(
    objective: &OedObjective<'_>,
    penalty: Penalty,
    gamma: f64,
    w0: &[f64],
    config: &OptimizerConfig,
) -> Result<OptimizerResult> {
    penalty.validate()?;
    if !(gamma >= 0.0) {
        return Err(OedError::InvalidParameter(format!("gamma must be nonnegative, got {gamma}")));
    }
    let eval = |w: &[f64]| -> Result<Evaluation> {
        let th = objective.evaluate(w)?;
        let (p, gp) = penalty.value_grad(w)?;
        Ok(Evaluation {
            objective: th.value,
            penalty: gamma * p,
            gradient: th.gradient + gp * gamma,
        })
    };
    minimize(eval, w0, config)
}

/// `(2/3)^i` for `i = 1..=count`.
pub fn default_eps_schedule(count: usize) -> Vec<f64> {
    (1..=count).map(|i| (2.0f64 / 3.0).powi(i as i32)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationConfig {
    pub gamma: f64,
    pub eps_schedule: Vec<f64>,
    pub binary_tol: f64,
    pub initial_weight: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            eps_schedule: default_eps_schedule(10),
            binary_tol: 1e-3,
            initial_weight: 0.5,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSummary {
    pub penalty: Penalty,
    pub status: Status,
    pub iterations: usize,
    pub objective: f64,
    pub penalty_value: f64,
    pub n_active_sensors: usize,
    pub max_binary_distance: f64,
    pub log: Vec<IterationLog>,
}

#[derive(Debug, Clone)]
pub struct ContinuationResult {
    pub w: Vec<f64>,
    /// Weights after the ℓ1 stage.
    pub l1_w: Vec<f64>,
    pub stages: Vec<StageSummary>,
    /// Indices whose final weight is farther than `binary_tol` from {0, 1}.
    pub non_binary: Vec<usize>,
}

impl ContinuationResult {
    pub fn is_binary(&self) -> bool {
        self.non_binary.is_empty()
    }
}

pub fn binary_distance(w: &[f64]) -> f64 {
    w.iter().map(|x| x.min(1.0 - x).abs()).fold(0.0, f64::max)
}

/// Stage 0 uses ℓ1; each later stage uses `Φ_{εᵢ}` warm-started from the
/// previous one. The trace-estimator probes are shared by all stages.
pub fn continuation_solve(objective: &OedObjective<'_>, config: &ContinuationConfig) -> Result<ContinuationResult> {
    let w0 = vec![config.initial_weight; objective.n_sensors()];
    let mut stages = Vec::with_capacity(config.eps_schedule.len() + 1);
    let mut w = w0;
    let mut l1_w = Vec::new();
    let penalties = std::iter::once(Penalty::L1).chain(config.eps_schedule.iter().map(|&eps| Penalty::PhiEps { eps }));
    for (i, penalty) in penalties.enumerate() {
        let res = solve_design(objective, penalty, config.gamma, &w, &config.optimizer)?;
        stages.push(StageSummary {
            penalty,
            status: res.status,
            iterations: res.iterations,
            objective: res.objective,
            penalty_value: res.penalty,
            n_active_sensors: count_active(&res.w),
            max_binary_distance: binary_distance(&res.w),
            log: res.log,
        });
        w = res.w;
        if i == 0 {
            l1_w = w.clone();
        }
    }
    let non_binary = w
        .iter()
        .enumerate()
        .filter(|(_, x)| x.min(1.0 - **x) > config.binary_tol)
        .map(|(i, _)| i)
        .collect();
    Ok(ContinuationResult {
        w,
        l1_w,
        stages,
        non_binary,
    })
}

/// Keeps the sensors whose normalized weight `wᵢ / Σw` exceeds the active threshold.
pub fn threshold_l1_design(w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.iter()
        .map(|&x| if total > 0.0 && x / total > ACTIVE_THRESHOLD { 1.0 } else { 0.0 })
        .collect()
}

/// Bisection on `log γ` for a design with `target` sensors; `count(γ)` is
/// assumed nonincreasing. Returns the `γ` whose count is closest.
pub fn bisect_gamma<C>(target: usize, mut lo: f64, mut hi: f64, max_iter: usize, count: C) -> Result<(f64, usize)>
where
    C: Fn(f64) -> Result<usize>,
{
    if !(lo > 0.0 && hi > lo) {
        return Err(OedError::InvalidParameter(format!("bisection needs 0 < lo < hi (got {lo}, {hi})")));
    }
    let mut best = (lo, count(lo)?);
    let hi_count = count(hi)?;
    if hi_count.abs_diff(target) < best.1.abs_diff(target) {
        best = (hi, hi_count);
    }
    for _ in 0..max_iter {
        if best.1 == target {
            break;
        }
        let mid = (lo * hi).sqrt();
        let c = count(mid)?;
        if c.abs_diff(target) < best.1.abs_diff(target) {
            best = (mid, c);
        }
        if c > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}
