use std::path::Path;

use serde::Serialize;

use oed_core::model::Model;
use oed_core::oed::optimizer::{count_active, Status};
use oed_core::oed::{continuation_solve, solve_design, threshold_l1_design, OedObjective, Penalty};
use oed_core::posterior::{variance_csv, PosteriorModel};
use oed_core::surrogate::LowRankSurrogate;

use crate::commands::{build_surrogate, prepare_out, selected};
use crate::config::{OedConfig, PenaltyKind};
use crate::error::Result;
use crate::output::{write_manifest, Csv, PhaseCounts};

#[derive(Debug, Clone, Serialize)]
pub struct StageRow {
    pub penalty: Penalty,
    pub status: Status,
    pub iterations: usize,
    pub objective: f64,
    pub penalty_value: f64,
    pub n_active_sensors: usize,
    pub max_binary_distance: f64,
}

/// Result of one design optimization on a prepared surrogate.
#[derive(Debug, Clone)]
pub struct DesignOutcome {
    /// Final optimizer weights.
    pub w: Vec<f64>,
    /// The 0–1 design: thresholded for ℓ1, the final weights for `Φ_ε`.
    pub design: Vec<f64>,
    pub stages: Vec<StageRow>,
    pub logs: Vec<(usize, Vec<oed_core::oed::optimizer::IterationLog>)>,
    pub binary: bool,
}

/// Runs the configured penalty on an existing surrogate. No PDE solves.
pub fn design_on(model: &Model, surrogate: &LowRankSurrogate, config: &OedConfig) -> Result<DesignOutcome> {
    let objective = OedObjective::new(surrogate, &model.prior, config.estimators(&model.whitening))?;
    Ok(match config.penalty.kind {
        PenaltyKind::L1 => {
            let w0 = vec![config.penalty.initial_weight; model.n_sensors()];
            let res = solve_design(&objective, Penalty::L1, config.gamma(), &w0, &config.optimizer_config())?;
            let design = threshold_l1_design(&res.w);
            let stage = StageRow {
                penalty: Penalty::L1,
                status: res.status,
                iterations: res.iterations,
                objective: res.objective,
                penalty_value: res.penalty,
                n_active_sensors: count_active(&res.w),
                max_binary_distance: oed_core::oed::continuation::binary_distance(&res.w),
            };
            DesignOutcome {
                binary: stage.max_binary_distance <= config.penalty.binary_tol,
                w: res.w,
                design,
                stages: vec![stage],
                logs: vec![(0, res.log)],
            }
        }
        PenaltyKind::PhiEps => {
            let res = continuation_solve(&objective, &config.continuation_config())?;
            let binary = res.is_binary();
            let design = res.w.iter().map(|&x| if x > 0.5 { 1.0 } else { 0.0 }).collect();
            let mut stages = Vec::new();
            let mut logs = Vec::new();
            for (i, s) in res.stages.into_iter().enumerate() {
                stages.push(StageRow {
                    penalty: s.penalty,
                    status: s.status,
                    iterations: s.iterations,
                    objective: s.objective,
                    penalty_value: s.penalty_value,
                    n_active_sensors: s.n_active_sensors,
                    max_binary_distance: s.max_binary_distance,
                });
                logs.push((i, s.log));
            }
            DesignOutcome {
                w: res.w,
                design,
                stages,
                logs,
                binary,
            }
        }
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DesignReport {
    pub kind: PenaltyKind,
    pub gamma: f64,
    pub weights: Vec<f64>,
    pub active_sensors: Vec<usize>,
    /// Exact trace of the surrogate posterior covariance for the 0–1 design.
    pub exact_trace: f64,
    pub binary: bool,
    pub stages: Vec<StageRow>,
    pub surrogate_rank: usize,
    pub surrogate_residual: f64,
    pub surrogate_solves: PhaseCounts,
    /// Solves between the end of surrogate construction and the end of the optimization.
    pub optimization_solves: PhaseCounts,
}

pub fn run_design(config: &OedConfig, out: &Path) -> Result<DesignReport> {
    let out = prepare_out(out)?;
    let model = config.build_model()?;
    model.transport.reset_counts();
    let surrogate = build_surrogate(&model, config)?;
    let surrogate_solves = PhaseCounts::from(model.transport.counts());
    model.transport.reset_counts();
    let outcome = design_on(&model, &surrogate, config)?;
    let optimization_solves = PhaseCounts::from(model.transport.counts());

    let posterior = PosteriorModel::surrogate(
        &surrogate,
        &model.prior,
        &model.whitening,
        model.observations.noise_std(),
        &outcome.design,
    )?;
    let exact_trace = posterior.exact_trace();

    let mut weights = Csv::new(&["sensor_index", "x", "y", "weight", "selected"]);
    for (i, (p, &w)) in model.observations.sensors().iter().zip(&outcome.w).enumerate() {
        weights.row(vec![i.into(), p[0].into(), p[1].into(), w.into(), (outcome.design[i] as usize).into()]);
    }
    let mut log = Csv::new(&["stage", "iter", "objective", "penalty", "projected_grad_norm", "n_active_sensors"]);
    for (stage, entries) in &outcome.logs {
        for e in entries {
            log.row(vec![
                (*stage).into(),
                e.iter.into(),
                e.objective.into(),
                e.penalty.into(),
                e.projected_grad_norm.into(),
                e.n_active_sensors.into(),
            ]);
        }
    }
    let paths = [out.join("design_weights.csv"), out.join("design_log.csv"), out.join("design_variance.csv")];
    weights.write(&paths[0])?;
    log.write(&paths[1])?;
    std::fs::write(&paths[2], variance_csv(&model.mesh.nodes, &posterior.pointwise_variance())?)?;

    let report = DesignReport {
        kind: config.penalty.kind,
        gamma: config.gamma(),
        weights: outcome.w.clone(),
        active_sensors: selected(&outcome.design),
        exact_trace,
        binary: outcome.binary,
        stages: outcome.stages,
        surrogate_rank: surrogate.rank(),
        surrogate_residual: surrogate.meta.residual,
        surrogate_solves,
        optimization_solves,
    };
    write_manifest(&out, "design", config, model.n_params(), model.n_sensors(), &paths, &report)?;
    Ok(report)
}
