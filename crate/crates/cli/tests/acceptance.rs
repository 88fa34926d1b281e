//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so every line is printed even when an
//! earlier check fails. `ACCEPTANCE_ONLY=3,7` restricts the run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use oed_cli::commands::{
    build_surrogate, design_on, run_compare, run_design, run_rank_study, run_spectrum, run_trace_study, DesignReport,
};
use oed_cli::config::{OedConfig, WhiteningChoice};
use oed_core::fem::assemble;
use oed_core::mesh::build_structured_mesh;
use oed_core::model::Model;
use oed_core::oed::{OedObjective, TraceEstimatorSet};
use oed_core::posterior::{DenseProblem, PosteriorModel};
use oed_core::sparse::{bilinear, spmv, to_dense};
use oed_core::surrogate::{LowRankSurrogate, SurrogateConfig};
use oed_core::whitening::{WhiteningMode, WhiteningOperator};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scratch() -> PathBuf {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("temporary directory")).path().to_path_buf()
}

fn config_with(overrides: &[&str]) -> OedConfig {
    let mut c = OedConfig::default();
    for o in overrides {
        c.apply_override(o).expect("valid override");
    }
    c.resolve().expect("valid configuration")
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn rel_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// Small problem with `n ≤ 500` for the dense oracles.
fn small_model() -> (OedConfig, Model) {
    let c = config_with(&["mesh.resolution=16"]);
    let m = c.build_model().unwrap();
    assert!(m.n_params() <= 500, "n = {}", m.n_params());
    (c, m)
}

fn default_design() -> &'static DesignReport {
    static REPORT: OnceLock<DesignReport> = OnceLock::new();
    REPORT.get_or_init(|| run_design(&config_with(&[]), &scratch().join("design")).unwrap())
}

fn c01_adjoint() -> Outcome {
    let (_, m) = small_model();
    let fmap = m.forward_map();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = random_vec(&mut rng, m.n_params());
        let d = random_vec(&mut rng, fmap.n_obs());
        let fx = fmap.apply_f(&x).unwrap();
        let fd = fmap.apply_f_adjoint(&d).unwrap();
        let gap = (fx.dot(&d) - bilinear(m.prior.mass(), &x, &fd)).abs() / (fx.norm() * d.norm());
        worst = worst.max(gap);
    }
    outcome(worst <= 1e-10, format!("max normalized gap {worst:.2e} over 20 pairs, n = {} (tol 1e-10)", m.n_params()))
}

fn c02_dense_oracle() -> Outcome {
    let (c, m) = small_model();
    let fmap = m.forward_map();
    let full = m.n_params().min(fmap.n_obs());
    let cfg = SurrogateConfig {
        rank: full,
        oversampling: 0,
        power_iterations: 2,
        seed: c.seeds().surrogate,
        ..SurrogateConfig::default()
    };
    let s = LowRankSurrogate::build(&fmap, &m.whitening, m.n_sensors(), &cfg).unwrap();
    let dense = DenseProblem::assemble(&fmap).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w: Vec<f64> = (0..m.n_sensors()).map(|_| rng.random_range(0.0..1.0)).collect();
    let ps = PosteriorModel::surrogate(&s, &m.prior, &m.whitening, m.observations.noise_std(), &w).unwrap();
    let pd = PosteriorModel::dense(&dense, &m.prior, &m.whitening, &w).unwrap();

    let trace = rel(ps.exact_trace(), pd.exact_trace());
    let (vs, vd) = (ps.pointwise_variance(), pd.pointwise_variance());
    let variance = (&vs - &vd).amax() / vd.amax();
    let z = random_vec(&mut rng, m.n_params());
    let factors = s.hessian_factors(&w).unwrap();
    let (_, q) = s.apply_h_inv(&factors, &m.prior, &z);
    let h_inv = rel_vec(&q, &(pd.dense_covariance().unwrap() * &z));
    let d = random_vec(&mut rng, fmap.n_obs());
    let mean = rel_vec(&ps.posterior_mean(&d).unwrap(), &pd.posterior_mean(&d).unwrap());
    let worst = trace.max(variance).max(h_inv).max(mean);
    outcome(
        worst <= 1e-4,
        format!(
            "trace {trace:.1e}, variance {variance:.1e}, H⁻¹z {h_inv:.1e}, mean {mean:.1e} at rank {} (tol 1e-4)",
            s.rank()
        ),
    )
}

fn c03_gradient() -> Outcome {
    let (c, m) = small_model();
    let c = OedConfig {
        surrogate: oed_cli::config::SurrogateSection { rank: 30, ..c.surrogate.clone() },
        ..c
    };
    let s = build_surrogate(&m, &c).unwrap();
    let obj = OedObjective::new(&s, &m.prior, TraceEstimatorSet::new(&m.whitening, 10, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let w: Vec<f64> = (0..m.n_sensors()).map(|_| rng.random_range(0.0..1.0)).collect();
        let g = obj.evaluate(&w).unwrap().gradient;
        let fd: Vec<f64> = (0..w.len())
            .into_par_iter()
            .map(|j| {
                let (mut a, mut b) = (w.clone(), w.clone());
                a[j] += h;
                b[j] -= h;
                (obj.value(&a).unwrap() - obj.value(&b).unwrap()) / (2.0 * h)
            })
            .collect();
        for j in 0..w.len() {
            worst = worst.max(rel(fd[j], g[j]));
        }
    }
    outcome(worst <= 1e-5, format!("max entrywise relative error {worst:.2e} over 10 designs (tol 1e-5)"))
}

fn c04_unbiased() -> Outcome {
    let mesh = build_structured_mesh(12, &[]).unwrap();
    let fem = assemble(&mesh).unwrap();
    let n = fem.n;
    let whitening = WhiteningOperator::new(&fem, WhiteningMode::Dense).unwrap();
    let mass = to_dense(&fem.mass);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    // A = B M with B symmetric positive semidefinite is self-adjoint in ⟨·,·⟩_M
    let b = &g * g.transpose() / n as f64;
    let a = &b * &mass;
    let exact = a.trace();
    let form = &mass * &a;
    let chunks = 100;
    let per = 1000;
    let values: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let z = DMatrix::from_columns(&whitening.whitened_gaussian(1000 + c as u64, per));
            let fz = &form * &z;
            (0..per).map(move |i| z.column(i).dot(&fz.column(i))).collect::<Vec<_>>()
        })
        .collect();
    let count = values.len() as f64;
    let mean = values.iter().sum::<f64>() / count;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0);
    let z = (mean - exact) / (var / count).sqrt();
    outcome(
        z.abs() <= 3.0,
        format!("n = {n}, mean {mean:.5} vs tr(A) {exact:.5}, z = {z:.2} over 1e5 draws (|z| ≤ 3)"),
    )
}

fn c05_bayes_risk() -> Outcome {
    let c = config_with(&["mesh.resolution=12"]);
    let m = c.build_model().unwrap();
    let dense = DenseProblem::assemble(&m.forward_map()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_identity: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    for k in 0..5 {
        let w: Vec<f64> = (0..m.n_sensors()).map(|_| rng.random_range(0.0..1.0)).collect();
        let p = PosteriorModel::dense(&dense, &m.prior, &m.whitening, &w).unwrap();
        let r = p.bayes_risk_check(2000, 1, 50 + k).unwrap();
        worst_identity = worst_identity.max(r.identity_residual);
        worst_z = worst_z.max(r.z_score.abs());
    }
    outcome(
        worst_identity <= 1e-8 && worst_z <= 3.0,
        format!("identity residual {worst_identity:.1e} (tol 1e-8), worst |z| {worst_z:.2} at 2000 outer samples (≤ 3)"),
    )
}

fn c06_preconditioning() -> Outcome {
    let r = run_spectrum(&config_with(&[]), &scratch().join("spectrum")).unwrap();
    let rank_f = r.rank_f.expect("dense spectrum on the default mesh");
    outcome(
        r.rank_ftilde < rank_f,
        format!("numerical rank at 1e-4·σ₁: F̃ {} vs F {rank_f}", r.rank_ftilde),
    )
}

fn c07_mesh_spectrum() -> Outcome {
    let eig = |res: usize| -> Vec<f64> {
        let c = config_with(&[
            &format!("mesh.resolution={res}"),
            "surrogate.rank=40",
            "surrogate.power_iterations=2",
        ]);
        let m = c.build_model().unwrap();
        build_surrogate(&m, &c).unwrap().s.iter().take(20).map(|s| s * s).collect()
    };
    let (coarse, fine) = (eig(40), eig(80));
    let worst = coarse.iter().zip(&fine).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    outcome(
        worst <= 0.05,
        format!("worst top-20 eigenvalue gap {:.2}% between resolutions 40 and 80 (tol 5%)", 100.0 * worst),
    )
}

fn c08_sensor_saturation() -> Outcome {
    let c = config_with(&["surrogate.rank=80"]);
    let retained = OedConfig::default().surrogate.rank;
    let run = |m: Model| {
        m.transport.reset_counts();
        let s = build_surrogate(&m, &c).unwrap();
        let counts = m.transport.counts();
        let curve: Vec<f64> = s.s.iter().take(retained).map(|x| x / s.s[0]).collect();
        (m.n_sensors(), curve, counts)
    };
    let (ns0, base, k0) = run(c.build_model().unwrap());
    // the regular grid whose sensor count is closest to twice the default
    let (ns1, fine, k1) = run(c.build_model_with_spacing(1.0 / 17.0).unwrap());
    let change = fine.iter().zip(&base).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    let same = k0.forward == k1.forward && k0.adjoint == k1.adjoint;
    outcome(
        change <= 0.10 && same,
        format!(
            "Ns {ns0} → {ns1}: max change of σ_k/σ₁ over {retained} values {:.2}% (tol 10%); solves {}/{} vs {}/{}",
            100.0 * change,
            k0.forward,
            k0.adjoint,
            k1.forward,
            k1.adjoint
        ),
    )
}

fn c09_rank_plateau() -> Outcome {
    let r = run_rank_study(&config_with(&[]), &scratch().join("rank")).unwrap();
    let (t40, t80) = (r.theta_at(40).unwrap(), r.theta_at(80).unwrap());
    let gap = rel(t40, t80);
    let curve: Vec<String> = r.rows.iter().map(|row| format!("{}:{:.4}", row.rank, row.theta)).collect();
    outcome(
        gap <= 0.01,
        format!("|Θ₈₀ − Θ₄₀|/Θ₈₀ = {:.3}% (tol 1%); Θ by rank {}", 100.0 * gap, curve.join(" ")),
    )
}

fn c10_trace_estimator() -> Outcome {
    let r = run_trace_study(&config_with(&[]), &scratch().join("trace")).unwrap();
    let errs: Vec<f64> = r.rows.iter().map(|row| row.mean_rel_error).collect();
    let monotone = errs.windows(2).all(|p| p[1] < p[0]);
    let last = *errs.last().unwrap();
    let listed: Vec<String> = r.rows.iter().map(|row| format!("{}:{:.1}%", row.n_tr, 100.0 * row.mean_rel_error)).collect();
    outcome(
        monotone && last <= 0.03,
        format!(
            "mean errors {} over 30 repetitions; monotone {monotone}, N_tr=100 within 3%; N_tr=1/N_tr=100 = {:.1}",
            listed.join(" "),
            errs[0] / last
        ),
    )
}

fn c11_binary() -> Outcome {
    let r = default_design();
    let dist = r.weights.iter().map(|x| x.min(1.0 - x).abs()).fold(0.0, f64::max);
    outcome(
        r.binary && dist <= 1e-3,
        format!("max distance to {{0,1}} {dist:.1e} (tol 1e-3), {} sensors selected", r.active_sensors.len()),
    )
}

fn c12_design_ordering() -> Outcome {
    let t = Instant::now();
    let r = run_compare(&config_with(&[]), &scratch().join("compare")).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let (phi, l1, rmin, rmean) = (r.phi_eps_trace, r.l1_trace, r.random_min(), r.random_mean());
    let uniform = r.uniform_trace.unwrap();
    let matched = r.l1_n_sensors == r.n_sensors && r.uniform_n_sensors == Some(r.n_sensors);
    let pass = matched && phi <= l1 && l1 <= rmin && phi < rmean && uniform > phi && secs <= 900.0;
    outcome(
        pass,
        format!(
            "{} sensors: Φ_ε {phi:.4} ≤ ℓ1 {l1:.4} ({} sensors) ≤ random min {rmin:.4}, random mean {rmean:.4}, uniform ({} sensors) {uniform:.4}; {secs:.0} s (≤ 900 s)",
            r.n_sensors,
            r.l1_n_sensors,
            r.uniform_n_sensors.unwrap()
        ),
    )
}

fn c13_zero_solves() -> Outcome {
    let r = default_design();
    let o = r.optimization_solves;
    outcome(
        o.forward == 0 && o.adjoint == 0,
        format!(
            "{}/{} forward/adjoint solves during continuation (surrogate used {}/{})",
            o.forward, o.adjoint, r.surrogate_solves.forward, r.surrogate_solves.adjoint
        ),
    )
}

fn l1_iterations(c: &OedConfig, model: &Model) -> usize {
    let s = build_surrogate(model, c).unwrap();
    design_on(model, &s, c).unwrap().stages[0].iterations
}

fn c14_scale_insensitivity() -> Outcome {
    let base = ["penalty.kind=l1", "optimizer.interior_point=true"];
    let c = config_with(&base);
    let spacings = [1.0 / 6.0, 1.0 / 8.5, 1.0 / 12.0, 1.0 / 17.0];
    let by_ns: Vec<(usize, usize)> = spacings
        .iter()
        .map(|&h| {
            let m = c.build_model_with_spacing(h).unwrap();
            (m.n_sensors(), l1_iterations(&c, &m))
        })
        .collect();
    let by_mesh: Vec<(usize, usize)> = [16usize, 32, 64]
        .iter()
        .map(|&res| {
            let mut o = base.to_vec();
            let r = format!("mesh.resolution={res}");
            o.push(&r);
            let c = config_with(&o);
            let m = c.build_model().unwrap();
            (m.n_params(), l1_iterations(&c, &m))
        })
        .collect();
    let spread = |v: &[(usize, usize)]| {
        let hi = v.iter().map(|p| p.1).max().unwrap() as f64;
        let lo = v.iter().map(|p| p.1).min().unwrap().max(1) as f64;
        hi / lo
    };
    let (sn, sm) = (spread(&by_ns), spread(&by_mesh));
    let fmt = |v: &[(usize, usize)]| v.iter().map(|p| format!("{}:{}", p.0, p.1)).collect::<Vec<_>>().join(" ");
    outcome(
        sn <= 2.0 && sm <= 2.0,
        format!(
            "interior-point iterations by Ns {} (spread {sn:.2}), by n {} (spread {sm:.2}); tol 2×",
            fmt(&by_ns),
            fmt(&by_mesh)
        ),
    )
}

fn isometry_gap(whitening: &WhiteningOperator, mass: &nalgebra_sparse::CsrMatrix<f64>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..20)
        .map(|_| {
            let x = DVector::from_fn(whitening.dim(), |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(whitening.dim(), |_, _| rng.random_range(-1.0..1.0));
            let (lx, ly) = (whitening.apply(&x), whitening.apply(&y));
            (lx.dot(&spmv(mass, &ly)) - x.dot(&y)).abs() / (x.norm() * y.norm())
        })
        .fold(0.0, f64::max)
}

fn c15_whitening() -> Outcome {
    let dense_cfg = config_with(&["mesh.resolution=16", "whitening.mode=dense"]);
    let fem = assemble(&dense_cfg.build_mesh().unwrap()).unwrap();
    let dense = WhiteningOperator::new(&fem, WhiteningMode::Dense).unwrap();
    let dense_gap = isometry_gap(&dense, &fem.mass, 15);
    let it_cfg = config_with(&["whitening.mode=iterative"]);
    assert_eq!(it_cfg.whitening.mode, WhiteningChoice::Iterative);
    let fem = assemble(&it_cfg.build_mesh().unwrap()).unwrap();
    let iterative = WhiteningOperator::new(&fem, WhiteningMode::iterative(it_cfg.whitening.degree)).unwrap();
    let it_gap = isometry_gap(&iterative, &fem.mass, 16);
    outcome(
        dense_gap <= 1e-10 && it_gap <= 1e-5,
        format!(
            "dense {dense_gap:.1e} (tol 1e-10), iterative degree {} on n = {} {it_gap:.1e} (tol 1e-5)",
            it_cfg.whitening.degree, fem.n
        ),
    )
}

type Check = (u32, &'static str, fn() -> Outcome);

fn main() {
    let checks: [Check; 15] = [
        (1, "adjoint consistency", c01_adjoint),
        (2, "dense-oracle equivalence", c02_dense_oracle),
        (3, "gradient correctness", c03_gradient),
        (4, "trace-estimator unbiasedness", c04_unbiased),
        (5, "Bayes-risk identity", c05_bayes_risk),
        (6, "prior-preconditioning payoff", c06_preconditioning),
        (7, "mesh-insensitive spectrum", c07_mesh_spectrum),
        (8, "sensor-grid saturation", c08_sensor_saturation),
        (9, "rank-study plateau", c09_rank_plateau),
        (10, "trace-estimator accuracy", c10_trace_estimator),
        (11, "binary continuation", c11_binary),
        (12, "design-quality ordering", c12_design_ordering),
        (13, "zero-solve optimization", c13_zero_solves),
        (14, "optimization-scale insensitivity", c14_scale_insensitivity),
        (15, "whitening isomorphism", c15_whitening),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {} [{:.1} s]", result.detail, t.elapsed().as_secs_f64());
        if !result.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
