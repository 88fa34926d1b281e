use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use oed_core::oed::{OedObjective, TraceEstimatorSet};
use oed_core::posterior::PosteriorModel;

use crate::commands::{build_surrogate, design_on, prepare_out};
use crate::config::{OedConfig, StudyDesign};
use crate::error::Result;
use crate::output::{write_manifest, Csv};

#[derive(Debug, Clone, Serialize)]
pub struct TraceStudyRow {
    pub n_tr: usize,
    pub mean_rel_error: f64,
    pub std_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceStudyReport {
    pub exact_trace: f64,
    pub n_design_sensors: usize,
    pub rows: Vec<TraceStudyRow>,
}

/// Relative error of the randomized trace estimate against the exact trace
/// of the surrogate posterior, over repetitions with fresh probe seeds.
pub fn run_trace_study(config: &OedConfig, out: &Path) -> Result<TraceStudyReport> {
    let out = prepare_out(out)?;
    let model = config.build_model()?;
    let surrogate = build_surrogate(&model, config)?;
    let w = match config.trace_study.design {
        StudyDesign::Optimal => design_on(&model, &surrogate, config)?.design,
        StudyDesign::Half => vec![0.5; model.n_sensors()],
    };
    let exact_trace = PosteriorModel::surrogate(
        &surrogate,
        &model.prior,
        &model.whitening,
        model.observations.noise_std(),
        &w,
    )?
    .exact_trace();

    let mut seeder = ChaCha8Rng::seed_from_u64(config.seeds().estimator);
    let reps = config.trace_study.repetitions;
    let mut rows = Vec::new();
    for &n_tr in &config.trace_study.n_tr {
        let seeds: Vec<u64> = (0..reps).map(|_| seeder.random()).collect();
        let errors = seeds
            .par_iter()
            .map(|&s| {
                let objective = OedObjective::new(&surrogate, &model.prior, TraceEstimatorSet::new(&model.whitening, n_tr, s))?;
                Ok((objective.value(&w)? - exact_trace).abs() / exact_trace)
            })
            .collect::<oed_core::error::Result<Vec<f64>>>()?;
        let mean = errors.iter().sum::<f64>() / reps as f64;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps.max(2) - 1) as f64;
        rows.push(TraceStudyRow {
            n_tr,
            mean_rel_error: mean,
            std_rel_error: var.sqrt(),
        });
    }

    let mut csv = Csv::new(&["n_tr", "mean_rel_error", "std_rel_error", "repetitions"]);
    for r in &rows {
        csv.row(vec![r.n_tr.into(), r.mean_rel_error.into(), r.std_rel_error.into(), reps.into()]);
    }
    let path = out.join("trace_study.csv");
    csv.write(&path)?;
    let report = TraceStudyReport {
        exact_trace,
        n_design_sensors: w.iter().filter(|&&x| x > 0.5).count(),
        rows,
    };
    write_manifest(&out, "trace-study", config, model.n_params(), model.n_sensors(), &[path], &report)?;
    Ok(report)
}
