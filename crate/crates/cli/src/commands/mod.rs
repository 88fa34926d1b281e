//! The experiment drivers behind the CLI subcommands.

mod compare;
mod design;
mod rank_study;
mod spectrum;
mod trace_study;

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use oed_core::forward_map::DENSE_MAX_N;
use oed_core::model::Model;
use oed_core::posterior::{DenseProblem, PosteriorModel};
use oed_core::surrogate::LowRankSurrogate;

pub use compare::{run_compare, CompareReport, CompareRow};
pub use design::{design_on, run_design, DesignOutcome, DesignReport, StageRow};
pub use rank_study::{run_rank_study, RankRow, RankStudyReport};
pub use spectrum::{run_spectrum, SensorSweep, SpectrumReport};
pub use trace_study::{run_trace_study, TraceStudyReport, TraceStudyRow};

use crate::config::{OedConfig, TraceMode};
use crate::error::Result;

pub(crate) fn prepare_out(out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    Ok(out.to_path_buf())
}

pub fn build_surrogate(model: &Model, config: &OedConfig) -> Result<LowRankSurrogate> {
    Ok(LowRankSurrogate::build(
        &model.forward_map(),
        &model.whitening,
        model.n_sensors(),
        &config.surrogate_config(),
    )?)
}

/// Indices of the sensors switched on in a 0–1 design.
pub fn selected(w: &[f64]) -> Vec<usize> {
    w.iter().enumerate().filter(|(_, &x)| x > 0.5).map(|(i, _)| i).collect()
}

pub fn indicator(n: usize, on: &[usize]) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for &i in on {
        w[i] = 1.0;
    }
    w
}

/// `count` designs of `k` sensors out of `n`, each drawn uniformly without replacement.
pub fn random_designs(n: usize, k: usize, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut idx = sample(&mut rng, n, k.min(n)).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// Regular sub-grid of a cell-centred sensor grid with spacing `spacing`,
/// matched to `target` sensors. Every `sx`-th column and `sy`-th row is
/// taken from some offset; the smallest such sub-grid holding at least
/// `target` points wins (ties go to square strides, then the most centred
/// offset) and is thinned evenly along its row-major order to exactly
/// `target`. Returns everything when `target` exceeds the grid.
pub fn uniform_subgrid(points: &[[f64; 2]], spacing: f64, target: usize) -> Vec<usize> {
    let count = (1.0 / spacing).floor().max(1.0) as usize;
    let offset = 0.5 * (1.0 - (count - 1) as f64 * spacing);
    let index = |v: f64| ((v - offset) / spacing).round().max(0.0) as usize;
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| (index(points[i][1]), index(points[i][0])));
    if target >= points.len() {
        return order;
    }
    let mut best: Option<((usize, usize, f64), Vec<usize>)> = None;
    for sx in 1..=count {
        for sy in 1..=count {
            for ox in 0..sx {
                for oy in 0..sy {
                    let chosen: Vec<usize> = order
                        .iter()
                        .copied()
                        .filter(|&i| index(points[i][0]) % sx == ox && index(points[i][1]) % sy == oy)
                        .collect();
                    if chosen.len() < target {
                        continue;
                    }
                    let skew = (ox as f64 - (sx as f64 - 1.0) / 2.0).abs() + (oy as f64 - (sy as f64 - 1.0) / 2.0).abs();
                    let key = (chosen.len(), sx.abs_diff(sy), skew);
                    if best.as_ref().is_none_or(|(k, _)| key < *k) {
                        best = Some((key, chosen));
                    }
                }
            }
        }
    }
    let chosen = best.map(|b| b.1).unwrap_or(order);
    let len = chosen.len();
    (0..target).map(|k| chosen[(k * len) / target]).collect()
}

/// Exact `tr(Γ_post)` for 0–1 or relaxed designs.
pub enum TraceOracle<'a> {
    Dense { problem: DenseProblem, model: &'a Model },
    Surrogate { surrogate: &'a LowRankSurrogate, model: &'a Model },
}

impl<'a> TraceOracle<'a> {
    pub fn new(mode: TraceMode, model: &'a Model, surrogate: &'a LowRankSurrogate) -> Result<Self> {
        let dense = match mode {
            TraceMode::Dense => true,
            TraceMode::Surrogate => false,
            TraceMode::Auto => model.n_params() <= DENSE_MAX_N,
        };
        Ok(if dense {
            TraceOracle::Dense {
                problem: DenseProblem::assemble(&model.forward_map())?,
                model,
            }
        } else {
            TraceOracle::Surrogate { surrogate, model }
        })
    }

    pub fn mode(&self) -> TraceMode {
        match self {
            TraceOracle::Dense { .. } => TraceMode::Dense,
            TraceOracle::Surrogate { .. } => TraceMode::Surrogate,
        }
    }

    pub fn trace(&self, w: &[f64]) -> Result<f64> {
        Ok(match self {
            TraceOracle::Dense { problem, model } => {
                PosteriorModel::dense(problem, &model.prior, &model.whitening, w)?.exact_trace()
            }
            TraceOracle::Surrogate { surrogate, model } => PosteriorModel::surrogate(
                surrogate,
                &model.prior,
                &model.whitening,
                model.observations.noise_std(),
                w,
            )?
            .exact_trace(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_designs_are_distinct_subsets() {
        let d = random_designs(30, 7, 5, 3);
        assert_eq!(d.len(), 5);
        for s in &d {
            assert_eq!(s.len(), 7);
            assert!(s.windows(2).all(|p| p[0] < p[1]));
            assert!(s.iter().all(|&i| i < 30));
        }
        assert_eq!(d, random_designs(30, 7, 5, 3));
        assert_ne!(d[0], d[1]);
    }

    #[test]
    fn subgrid_of_a_full_grid() {
        let h = 0.25;
        let pts: Vec<[f64; 2]> = (0..4)
            .flat_map(|j| (0..4).map(move |i| [0.125 + i as f64 * h, 0.125 + j as f64 * h]))
            .collect();
        assert_eq!(uniform_subgrid(&pts, h, 16).len(), 16);
        let mut four = uniform_subgrid(&pts, h, 4);
        four.sort();
        assert_eq!(four, vec![0, 2, 8, 10]);
        let six = uniform_subgrid(&pts, h, 6);
        assert_eq!(six.len(), 6);
        assert!(six.windows(2).all(|p| p[0] != p[1]));
        let one = uniform_subgrid(&pts, h, 1);
        assert_eq!(one.len(), 1);
    }
}
