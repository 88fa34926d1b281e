use std::path::Path;

use serde::Serialize;

use oed_core::oed::{bisect_gamma, solve_design, threshold_l1_design, OedObjective, Penalty};

use crate::commands::{build_surrogate, design_on, indicator, prepare_out, random_designs, selected, uniform_subgrid, TraceOracle};
use crate::config::{OedConfig, PenaltyKind, TraceMode};
use crate::error::Result;
use crate::output::{write_manifest, Csv};

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub kind: String,
    pub n_sensors: usize,
    pub exact_trace: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub trace_mode: TraceMode,
    /// Sensor count of the `Φ_ε` design; the other designs are matched to it.
    pub n_sensors: usize,
    pub phi_eps_trace: f64,
    pub l1_gamma: f64,
    pub l1_n_sensors: usize,
    pub l1_trace: f64,
    pub random_traces: Vec<f64>,
    pub uniform_n_sensors: Option<usize>,
    pub uniform_trace: Option<f64>,
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn random_mean(&self) -> f64 {
        self.random_traces.iter().sum::<f64>() / self.random_traces.len().max(1) as f64
    }

    pub fn random_min(&self) -> f64 {
        self.random_traces.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `(n_sensors, trace)` of the ℓ1 designs, sorted by sensor count.
    pub fn l1_curve(&self) -> Vec<(usize, f64)> {
        let mut c: Vec<(usize, f64)> = self
            .rows
            .iter()
            .filter(|r| r.kind == "l1")
            .map(|r| (r.n_sensors, r.exact_trace))
            .collect();
        c.sort_by_key(|p| p.0);
        c.dedup_by_key(|p| p.0);
        c
    }
}

pub fn run_compare(config: &OedConfig, out: &Path) -> Result<CompareReport> {
    let out = prepare_out(out)?;
    let model = config.build_model()?;
    let surrogate = build_surrogate(&model, config)?;
    let oracle = TraceOracle::new(config.compare.exact, &model, &surrogate)?;
    let ns = model.n_sensors();
    let seed = config.seeds().compare;

    let mut phi_config = config.clone();
    phi_config.penalty.kind = PenaltyKind::PhiEps;
    if config.penalty.kind != PenaltyKind::PhiEps {
        phi_config.penalty.gamma = None;
    }
    let phi = design_on(&model, &surrogate, &phi_config)?;
    let k = selected(&phi.design).len();
    let phi_eps_trace = oracle.trace(&phi.design)?;

    let objective = OedObjective::new(&surrogate, &model.prior, config.estimators(&model.whitening))?;
    let opt = config.optimizer_config();
    let w0 = vec![config.penalty.initial_weight; ns];
    let l1_design = |gamma: f64| -> oed_core::error::Result<Vec<f64>> {
        Ok(threshold_l1_design(&solve_design(&objective, Penalty::L1, gamma, &w0, &opt)?.w))
    };
    let [lo, hi] = config.compare.gamma_bracket;
    let matched = |target: usize| -> Result<(f64, Vec<f64>)> {
        let (gamma, _) = bisect_gamma(target, lo, hi, config.compare.bisect_iter, |g| {
            Ok(selected(&l1_design(g)?).len())
        })?;
        Ok((gamma, l1_design(gamma)?))
    };

    let (l1_gamma, l1) = matched(k)?;
    let l1_n_sensors = selected(&l1).len();
    let l1_trace = oracle.trace(&l1)?;

    let mut rows = vec![
        CompareRow {
            kind: "phi_eps".into(),
            n_sensors: k,
            exact_trace: phi_eps_trace,
        },
        CompareRow {
            kind: "l1".into(),
            n_sensors: l1_n_sensors,
            exact_trace: l1_trace,
        },
    ];
    let gridded = config.observation.sensor_file.is_none();
    let mut random_traces = Vec::new();
    let mut uniform = None;
    let counts: Vec<usize> = std::iter::once(k).chain(config.compare.sensor_counts.iter().copied()).collect();
    for (pos, &count) in counts.iter().enumerate() {
        if pos > 0 {
            let (_, d) = matched(count)?;
            rows.push(CompareRow {
                kind: "l1".into(),
                n_sensors: selected(&d).len(),
                exact_trace: oracle.trace(&d)?,
            });
        }
        let draws = random_designs(ns, count, config.compare.n_random, seed.wrapping_add(pos as u64));
        for d in &draws {
            let t = oracle.trace(&indicator(ns, d))?;
            if pos == 0 {
                random_traces.push(t);
            }
            rows.push(CompareRow {
                kind: "random".into(),
                n_sensors: d.len(),
                exact_trace: t,
            });
        }
        if gridded {
            let u = uniform_subgrid(model.observations.sensors(), config.observation.spacing, count);
            let t = oracle.trace(&indicator(ns, &u))?;
            if pos == 0 {
                uniform = Some((u.len(), t));
            }
            rows.push(CompareRow {
                kind: "uniform".into(),
                n_sensors: u.len(),
                exact_trace: t,
            });
        }
    }

    let mut csv = Csv::new(&["kind", "n_sensors", "exact_trace"]);
    for r in &rows {
        csv.row(vec![r.kind.as_str().into(), r.n_sensors.into(), r.exact_trace.into()]);
    }
    let path = out.join("compare.csv");
    csv.write(&path)?;
    let report = CompareReport {
        trace_mode: oracle.mode(),
        n_sensors: k,
        phi_eps_trace,
        l1_gamma,
        l1_n_sensors,
        l1_trace,
        random_traces,
        uniform_n_sensors: uniform.map(|u| u.0),
        uniform_trace: uniform.map(|u| u.1),
        rows,
    };
    write_manifest(&out, "compare", config, model.n_params(), ns, &[path], &report)?;
    Ok(report)
}
