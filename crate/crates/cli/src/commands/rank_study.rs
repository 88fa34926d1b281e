use std::path::Path;

use serde::Serialize;

use oed_core::oed::optimizer::{count_active, Status};
use oed_core::oed::{solve_design, OedObjective, Penalty};

use crate::commands::{build_surrogate, prepare_out};
use crate::config::OedConfig;
use crate::error::Result;
use crate::output::{write_manifest, Csv};

#[derive(Debug, Clone, Serialize)]
pub struct RankRow {
    pub rank: usize,
    /// `Θ(w_opt)` of the ℓ1 design at this rank.
    pub theta: f64,
    pub iterations: usize,
    pub status: Status,
    pub n_active_sensors: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankStudyReport {
    pub gamma: f64,
    pub rows: Vec<RankRow>,
}

impl RankStudyReport {
    pub fn theta_at(&self, rank: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.rank == rank).map(|r| r.theta)
    }
}

/// ℓ1 designs with surrogates of increasing rank; seeds are shared across ranks.
pub fn run_rank_study(config: &OedConfig, out: &Path) -> Result<RankStudyReport> {
    let out = prepare_out(out)?;
    let model = config.build_model()?;
    let gamma = config.rank_study.gamma;
    let mut rows = Vec::new();
    for &rank in &config.rank_study.ranks {
        let mut c = config.clone();
        c.surrogate.rank = rank;
        let surrogate = build_surrogate(&model, &c)?;
        let objective = OedObjective::new(&surrogate, &model.prior, c.estimators(&model.whitening))?;
        let w0 = vec![c.penalty.initial_weight; model.n_sensors()];
        let res = solve_design(&objective, Penalty::L1, gamma, &w0, &c.optimizer_config())?;
        rows.push(RankRow {
            rank,
            theta: objective.value(&res.w)?,
            iterations: res.iterations,
            status: res.status,
            n_active_sensors: count_active(&res.w),
        });
    }
    let mut csv = Csv::new(&["rank", "theta", "iterations", "n_active_sensors"]);
    for r in &rows {
        csv.row(vec![r.rank.into(), r.theta.into(), r.iterations.into(), r.n_active_sensors.into()]);
    }
    let path = out.join("rank_study.csv");
    csv.write(&path)?;
    let report = RankStudyReport { gamma, rows };
    write_manifest(&out, "rank-study", config, model.n_params(), model.n_sensors(), &[path], &report)?;
    Ok(report)
}
