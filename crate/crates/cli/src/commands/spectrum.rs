use std::path::Path;

use serde::Serialize;

use oed_core::forward_map::{numerical_rank, DENSE_MAX_N};

use crate::commands::{build_surrogate, prepare_out};
use crate::config::OedConfig;
use crate::error::Result;
use crate::output::{write_manifest, Csv, PhaseCounts};

/// Surrogate spectrum on one sensor grid.
#[derive(Debug, Clone, Serialize)]
pub struct SensorSweep {
    pub spacing: f64,
    pub n_sensors: usize,
    /// `σ_k / σ_1` over the retained rank.
    pub normalized: Vec<f64>,
    pub solves: PhaseCounts,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    /// Dense singular values; empty above the dense cap.
    pub sigma_f: Vec<f64>,
    pub sigma_ftilde: Vec<f64>,
    pub rank_f: Option<usize>,
    pub rank_ftilde: usize,
    pub rank_tol: f64,
    /// The configured grid first, then the extra spacings.
    pub sweep: Vec<SensorSweep>,
}

impl SpectrumReport {
    /// Largest relative change of the normalized curve against the configured grid.
    pub fn max_sweep_change(&self, index: usize) -> f64 {
        let base = &self.sweep[0].normalized;
        self.sweep[index]
            .normalized
            .iter()
            .zip(base)
            .map(|(a, b)| (a - b).abs() / b)
            .fold(0.0, f64::max)
    }
}

pub fn run_spectrum(config: &OedConfig, out: &Path) -> Result<SpectrumReport> {
    let out = prepare_out(out)?;
    let model = config.build_model()?;
    let tol = config.spectrum.rank_tol;
    let (sigma_f, sigma_ftilde) = if model.n_params() <= DENSE_MAX_N {
        model.forward_map().dense_spectra()?
    } else {
        log::warn!("n = {} is above the dense cap; only the surrogate spectrum of F̃ is reported", model.n_params());
        (Vec::new(), build_surrogate(&model, config)?.s.iter().copied().collect())
    };
    let rank_f = (!sigma_f.is_empty()).then(|| numerical_rank(&sigma_f, tol));
    let rank_ftilde = numerical_rank(&sigma_ftilde, tol);

    let mut sweep = Vec::new();
    let spacings: Vec<f64> = std::iter::once(config.observation.spacing)
        .chain(config.spectrum.sensor_spacings.iter().copied())
        .collect();
    if !config.spectrum.sensor_spacings.is_empty() {
        for &spacing in &spacings {
            let m = config.build_model_with_spacing(spacing)?;
            m.transport.reset_counts();
            let s = build_surrogate(&m, config)?;
            let solves = PhaseCounts::from(m.transport.counts());
            let top = s.s[0];
            sweep.push(SensorSweep {
                spacing,
                n_sensors: m.n_sensors(),
                normalized: s.s.iter().map(|x| x / top).collect(),
                solves,
            });
        }
    }

    let mut paths = Vec::new();
    let len = sigma_f.len().max(sigma_ftilde.len());
    let mut csv = Csv::new(&["k", "sigma_f", "sigma_ftilde", "sigma_f_normalized", "sigma_ftilde_normalized"]);
    let at = |v: &[f64], k: usize| v.get(k).copied().unwrap_or(f64::NAN);
    for k in 0..len {
        csv.row(vec![
            (k + 1).into(),
            at(&sigma_f, k).into(),
            at(&sigma_ftilde, k).into(),
            (at(&sigma_f, k) / at(&sigma_f, 0)).into(),
            (at(&sigma_ftilde, k) / at(&sigma_ftilde, 0)).into(),
        ]);
    }
    paths.push(out.join("spectrum.csv"));
    csv.write(&paths[0])?;

    if !sweep.is_empty() {
        let names: Vec<String> = sweep.iter().map(|s| format!("ns_{}", s.n_sensors)).collect();
        let mut header = vec!["k"];
        header.extend(names.iter().map(String::as_str));
        let mut csv = Csv::new(&header);
        let rows = sweep.iter().map(|s| s.normalized.len()).max().unwrap_or(0);
        for k in 0..rows {
            let mut row = vec![(k + 1).into()];
            row.extend(sweep.iter().map(|s| at(&s.normalized, k).into()));
            csv.row(row);
        }
        paths.push(out.join("spectrum_sensors.csv"));
        csv.write(&paths[1])?;
    }

    let report = SpectrumReport {
        sigma_f,
        sigma_ftilde,
        rank_f,
        rank_ftilde,
        rank_tol: tol,
        sweep,
    };
    write_manifest(&out, "spectrum", config, model.n_params(), model.n_sensors(), &paths, &report)?;
    Ok(report)
}
