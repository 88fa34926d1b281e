use nalgebra::{DMatrix, DVector};
use oed_core::mesh::{build_structured_mesh, default_holes};
use oed_core::model::{Model, ModelSettings};
use oed_core::observation::{default_sensor_grid, equispaced_times};
use oed_core::posterior::{variance_csv, DenseProblem, PosteriorMode, PosteriorModel};
use oed_core::sparse::to_dense;
use oed_core::surrogate::{LowRankSurrogate, SurrogateConfig};
use oed_core::transport::TransportConfig;
use oed_core::OedError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

struct Fixture {
    model: Model,
    exact: LowRankSurrogate,
    dense: DenseProblem,
}

fn tiny_model() -> Model {
    let mesh = build_structured_mesh(6, &default_holes()).unwrap();
    let sensors = default_sensor_grid(0.25, &mesh.holes, 0.02).unwrap();
    let ns = sensors.len();
    let settings = ModelSettings {
        transport: TransportConfig {
            n_steps: 16,
            ..Default::default()
        },
        times: equispaced_times(1.0, 4.0, 4),
        noise_std: Some((0..ns).map(|j| 0.5 + 0.1 * j as f64).collect()),
        ..Default::default()
    };
    Model::build(mesh, sensors, &settings).unwrap()
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let model = tiny_model();
        let fmap = model.forward_map();
        let rank = fmap.n_params().min(fmap.n_obs());
        let cfg = SurrogateConfig {
            rank,
            oversampling: 0,
            power_iterations: 2,
            ..Default::default()
        };
        let exact = LowRankSurrogate::build(&fmap, &model.whitening, model.n_sensors(), &cfg).unwrap();
        let dense = DenseProblem::assemble(&fmap).unwrap();
        Fixture { model, exact, dense }
    })
}

fn random_w(ns: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..ns).map(|_| rng.random()).collect()
}

fn surrogate_post<'a>(fix: &'a Fixture, w: &[f64]) -> PosteriorModel<'a> {
    let m = &fix.model;
    PosteriorModel::surrogate(&fix.exact, &m.prior, &m.whitening, m.observations.noise_std(), w).unwrap()
}

fn dense_post<'a>(fix: &'a Fixture, w: &[f64]) -> PosteriorModel<'a> {
    PosteriorModel::dense(&fix.dense, &fix.model.prior, &fix.model.whitening, w).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn max_rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax()
}

#[test]
fn zero_design_recovers_prior_moments() {
    let fix = fixture();
    let w = vec![0.0; fix.model.n_sensors()];
    let prior = &fix.model.prior;
    for post in [surrogate_post(fix, &w), dense_post(fix, &w)] {
        assert!(rel(post.exact_trace(), prior.trace()) < 1e-10);
        assert!(max_rel(&post.pointwise_variance(), prior.pointwise_variance()) < 1e-10);
    }
}

#[test]
fn surrogate_matches_dense_oracle() {
    let fix = fixture();
    let m = &fix.model;
    for seed in 0..3 {
        let w = random_w(m.n_sensors(), seed);
        let (s, d) = (surrogate_post(fix, &w), dense_post(fix, &w));
        assert_eq!((s.mode(), d.mode()), (PosteriorMode::Surrogate, PosteriorMode::Dense));
        assert!(rel(s.exact_trace(), d.exact_trace()) < 1e-4);
        assert!(max_rel(&s.pointwise_variance(), &d.pointwise_variance()) < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
        let data = DVector::from_fn(m.observations.dim(), |_, _| rng.random::<f64>() - 0.5);
        assert!(max_rel(&s.posterior_mean(&data).unwrap(), &d.posterior_mean(&data).unwrap()) < 1e-6);
    }
}

#[test]
fn covariance_factor_reproduces_posterior_covariance() {
    let fix = fixture();
    let w = random_w(fix.model.n_sensors(), 4);
    let s = surrogate_post(fix, &w);
    let n = s.dim();
    let q = DMatrix::from_columns(
        &(0..n)
            .map(|i| s.apply_sqrt(&DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 })).unwrap())
            .collect::<Vec<_>>(),
    );
    let mass = to_dense(&fix.model.fem.mass);
    // Q* = M⁻¹ Qᵀ M
    let q_adj = mass.clone().cholesky().unwrap().solve(&(q.transpose() * &mass));
    let qq = &q * q_adj;
    let cov = dense_post(fix, &w).dense_covariance().unwrap();
    assert!((&qq - &cov).amax() / cov.amax() < 1e-8);
    assert!(dense_post(fix, &w).apply_sqrt(&DVector::zeros(n)).is_err());
}

#[test]
fn sample_variance_matches_pointwise_variance() {
    let fix = fixture();
    let w = random_w(fix.model.n_sensors(), 5);
    let center = DVector::zeros(fix.model.n_params());
    for post in [surrogate_post(fix, &w), dense_post(fix, &w)] {
        let samples = post.sample_posterior(&center, 10_000, 9).unwrap();
        let mut var = DVector::zeros(post.dim());
        for x in &samples {
            var += x.component_mul(x);
        }
        var /= samples.len() as f64;
        let exact = post.pointwise_variance();
        let field = (&var - &exact).norm() / exact.norm();
        assert!(field < 0.05, "{:?}: {field}", post.mode());
        // per node, the variance estimate has relative standard error √(2/N)
        let se = (2.0 / samples.len() as f64).sqrt();
        let worst = var.iter().zip(exact.iter()).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
        assert!(worst < 4.5 * se, "{:?}: {worst}", post.mode());
    }
}

#[test]
fn sampling_is_deterministic_in_seed() {
    let fix = fixture();
    let post = surrogate_post(fix, &random_w(fix.model.n_sensors(), 6));
    let c = DVector::from_element(post.dim(), 2.0);
    let a = post.sample_posterior(&c, 4, 3).unwrap();
    assert_eq!(a, post.sample_posterior(&c, 4, 3).unwrap());
    assert_ne!(a, post.sample_posterior(&c, 4, 4).unwrap());
    assert_ne!(a[0], a[1]);
}

#[test]
fn bayes_risk_identity_and_monte_carlo() {
    let fix = fixture();
    for seed in 0..5 {
        let post = dense_post(fix, &random_w(fix.model.n_sensors(), 20 + seed));
        let risk = post.bayes_risk_check(2000, 1, seed).unwrap();
        assert!(risk.identity_residual <= 1e-8, "{}", risk.identity_residual);
        assert!(risk.z_score.abs() <= 3.0, "{risk:?}");
    }
    let surrogate = surrogate_post(fix, &random_w(fix.model.n_sensors(), 1));
    assert!(surrogate.bayes_risk_check(100, 1, 0).is_err());
}

#[test]
fn zero_design_risk_is_prior_trace() {
    let fix = fixture();
    let post = dense_post(fix, &vec![0.0; fix.model.n_sensors()]);
    let risk = post.bayes_risk_check(2000, 1, 7).unwrap();
    assert!(rel(risk.trace, fix.model.prior.trace()) < 1e-10);
    assert!(risk.z_score.abs() <= 3.0, "{risk:?}");
}

#[test]
fn zero_data_and_zero_mean_give_zero() {
    let fix = fixture();
    let w = random_w(fix.model.n_sensors(), 2);
    let d = DVector::zeros(fix.model.observations.dim());
    for post in [surrogate_post(fix, &w), dense_post(fix, &w)] {
        assert_eq!(post.posterior_mean(&d).unwrap().amax(), 0.0);
        assert!(post.posterior_mean(&DVector::zeros(3)).is_err());
    }
}

#[test]
fn data_misfit_shrinks_as_weights_grow() {
    let fix = fixture();
    let m = &fix.model;
    let fmap = m.forward_map();
    let truth = m.prior.sample_prior(&m.whitening, 11);
    let d = fmap.apply_f(&truth).unwrap();
    let mut last = f64::INFINITY;
    for scale in [1.0, 10.0, 100.0, 1000.0] {
        let post = dense_post(fix, &vec![scale; m.n_sensors()]);
        let misfit = (fmap.apply_f(&post.posterior_mean(&d).unwrap()).unwrap() - &d).norm();
        assert!(misfit < last, "scale {scale}: {misfit} vs {last}");
        last = misfit;
    }
    assert!(last < 1e-2 * d.norm());
}

fn lumped_ratio(model: &Model, surrogate: &LowRankSurrogate, w: &[f64]) -> f64 {
    let post = PosteriorModel::surrogate(surrogate, &model.prior, &model.whitening, model.observations.noise_std(), w).unwrap();
    let lumped: f64 = post
        .pointwise_variance()
        .iter()
        .zip(model.fem.lumped_mass.iter())
        .map(|(v, m)| v * m)
        .sum();
    lumped / post.exact_trace()
}

#[test]
fn lumped_variance_integral_matches_trace() {
    let fix = fixture();
    let ratio = lumped_ratio(&fix.model, &fix.exact, &vec![0.0; fix.model.n_sensors()]);
    assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
}

/// Informative designs leave mostly mesh-scale variance, where lumped
/// quadrature is coarse; the gap closes under refinement.
#[test]
fn lumped_variance_gap_shrinks_under_refinement() {
    let gaps: Vec<[f64; 2]> = [12, 24]
        .into_iter()
        .map(|res| {
            let mesh = build_structured_mesh(res, &default_holes()).unwrap();
            let sensors = default_sensor_grid(0.25, &mesh.holes, 0.02).unwrap();
            let settings = ModelSettings {
                times: equispaced_times(1.0, 4.0, 4),
                ..Default::default()
            };
            let model = Model::build(mesh, sensors, &settings).unwrap();
            let fmap = model.forward_map();
            let cfg = SurrogateConfig {
                rank: fmap.n_obs(),
                oversampling: 0,
                power_iterations: 2,
                ..Default::default()
            };
            let s = LowRankSurrogate::build(&fmap, &model.whitening, model.n_sensors(), &cfg).unwrap();
            [1e-3, 0.5].map(|w| (lumped_ratio(&model, &s, &vec![w; model.n_sensors()]) - 1.0).abs())
        })
        .collect();
    assert!(gaps[1][0] < 0.05, "{gaps:?}");
    assert!(gaps[1][1] < gaps[0][1], "{gaps:?}");
}

#[test]
fn weights_are_validated() {
    let fix = fixture();
    let m = &fix.model;
    let mut w = vec![0.5; m.n_sensors()];
    w[2] = -0.1;
    let err = PosteriorModel::surrogate(&fix.exact, &m.prior, &m.whitening, m.observations.noise_std(), &w);
    assert!(matches!(err, Err(OedError::WeightDomain { index: 2, .. })));
    assert!(PosteriorModel::dense(&fix.dense, &m.prior, &m.whitening, &w[1..]).is_err());
}

#[test]
fn dense_mode_is_capped() {
    let mesh = build_structured_mesh(48, &[]).unwrap();
    let sensors = vec![[0.5, 0.5]];
    let model = Model::build(mesh, sensors, &ModelSettings::default()).unwrap();
    assert!(model.n_params() > 2000);
    let err = DenseProblem::assemble(&model.forward_map());
    assert!(matches!(err, Err(OedError::DenseCap { .. })));
}

#[test]
fn variance_csv_layout() {
    let text = variance_csv(&[[0.0, 0.5], [1.0, 0.25]], &DVector::from_vec(vec![0.1, 2.0])).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "node_index,x,y,variance");
    assert_eq!(lines.len(), 3);
    let fields: Vec<f64> = lines[1].split(',').map(|s| s.parse().unwrap()).collect();
    assert_eq!(fields, vec![0.0, 0.0, 0.5, 0.1]);
    assert!(variance_csv(&[[0.0, 0.0]], &DVector::zeros(2)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trace_is_monotone_and_below_prior(seed in 0u64..1000, bump in 0.0f64..0.5) {
        let fix = fixture();
        let w = random_w(fix.model.n_sensors(), seed);
        let bigger: Vec<f64> = w.iter().map(|x| (x + bump).min(1.0)).collect();
        let (a, b) = (surrogate_post(fix, &w).exact_trace(), surrogate_post(fix, &bigger).exact_trace());
        prop_assert!(b <= a * (1.0 + 1e-12));
        prop_assert!(a <= fix.model.prior.trace() * (1.0 + 1e-12));
        prop_assert!(surrogate_post(fix, &w).pointwise_variance().min() > 0.0);
    }
}
