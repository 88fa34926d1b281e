//! Posterior diagnostics for a fixed design: trace, pointwise variance,
//! sampling, the MAP point and the Bayes-risk identity.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, OedError, Result};
use crate::forward_map::{ForwardMap, DENSE_MAX_N};
use crate::prior::PriorOperator;
use crate::sparse::{spmv, to_dense};
use crate::surrogate::{HessianFactors, LowRankSurrogate};
use crate::whitening::WhiteningOperator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorMode {
    Surrogate,
    Dense,
}

/// Monte Carlo Bayes-risk estimate next to the exact trace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BayesRisk {
    pub mc_estimate: f64,
    pub std_error: f64,
    pub trace: f64,
    pub z_score: f64,
    /// `|tr(Γ²H_misfit) + tr(Γ²Γ_prior⁻¹) − tr(Γ)| / tr(Γ)` with `Γ = Γ_post`.
    pub identity_residual: f64,
}

struct SurrogateParts<'a> {
    surrogate: &'a LowRankSurrogate,
    factors: HessianFactors,
    /// `Γ_prior^{1/2} V`, n × r.
    sqrt_v: DMatrix<f64>,
}

/// Dense `F` and prior matrices of a small problem, shared by all designs.
#[derive(Debug, Clone)]
pub struct DenseProblem {
    f: DMatrix<f64>,
    mass: DMatrix<f64>,
    mass_chol: Cholesky<f64, Dyn>,
    /// `M Γ_prior⁻¹ = L M⁻¹ L`.
    prior_precision: DMatrix<f64>,
    noise_std: Vec<f64>,
}

impl DenseProblem {
    /// Assembles `F` column by column (`n` forward solves); `n ≤ 2000`.
    pub fn assemble(fmap: &ForwardMap<'_>) -> Result<Self> {
        let n = fmap.n_params();
        if n > DENSE_MAX_N {
            return Err(OedError::DenseCap { n, cap: DENSE_MAX_N });
        }
        let prior = fmap.prior;
        let f = fmap.dense_f()?;
        let mass = to_dense(prior.mass());
        let elliptic = to_dense(prior.elliptic());
        let mass_chol = mass
            .clone()
            .cholesky()
            .ok_or_else(|| OedError::Factorization("mass matrix is not positive definite".into()))?;
        let prior_precision = &elliptic * mass_chol.solve(&elliptic);
        Ok(Self {
            f,
            mass,
            mass_chol,
            prior_precision,
            noise_std: fmap.observations.noise_std().to_vec(),
        })
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn n_params(&self) -> usize {
        self.f.ncols()
    }

    pub fn n_sensors(&self) -> usize {
        self.noise_std.len()
    }

    /// `Fᵀ diag(wⱼ/σⱼ²) F`, the mass-scaled misfit Hessian `M H_misfit`.
    fn weighted_gram(&self, w: &[f64]) -> DMatrix<f64> {
        let omega = observation_precision(w, &self.noise_std, self.f.nrows());
        let mut weighted = self.f.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= omega[i];
        }
        self.f.tr_mul(&weighted)
    }
}

struct DenseParts<'a> {
    problem: &'a DenseProblem,
    /// Cholesky factor of `M H(w)`.
    hessian: Cholesky<f64, Dyn>,
}

enum Backend<'a> {
    Surrogate(SurrogateParts<'a>),
    Dense(DenseParts<'a>),
}

/// The Gaussian posterior for one design `w`.
pub struct PosteriorModel<'a> {
    w: Vec<f64>,
    prior: &'a PriorOperator,
    whitening: &'a WhiteningOperator,
    noise_std: Vec<f64>,
    backend: Backend<'a>,
}

fn check_weights(w: &[f64]) -> Result<()> {
    match w.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
        Some((index, &value)) => Err(OedError::WeightDomain { index, value }),
        None => Ok(()),
    }
}

impl<'a> PosteriorModel<'a> {
    /// Low-rank posterior from a noise-whitened surrogate. Weights may exceed 1.
    pub fn surrogate(
        surrogate: &'a LowRankSurrogate,
        prior: &'a PriorOperator,
        whitening: &'a WhiteningOperator,
        noise_std: &[f64],
        w: &[f64],
    ) -> Result<Self> {
        check_len("noise levels", surrogate.n_sensors, noise_std.len())?;
        check_len("parameter dimension", surrogate.n_params(), prior.dim())?;
        check_weights(w)?;
        let factors = surrogate.hessian_factors(w)?;
        let cols: Vec<_> = factors.v.column_iter().map(|c| prior.apply_cov_sqrt(&c.into_owned())).collect();
        let sqrt_v = if cols.is_empty() {
            DMatrix::zeros(prior.dim(), 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        Ok(Self {
            w: w.to_vec(),
            prior,
            whitening,
            noise_std: noise_std.to_vec(),
            backend: Backend::Surrogate(SurrogateParts {
                surrogate,
                factors,
                sqrt_v,
            }),
        })
    }

    /// Dense posterior for design `w`; one `n × n` Cholesky factorization.
    pub fn dense(
        problem: &'a DenseProblem,
        prior: &'a PriorOperator,
        whitening: &'a WhiteningOperator,
        w: &[f64],
    ) -> Result<Self> {
        check_len("design weights", problem.n_sensors(), w.len())?;
        check_len("parameter dimension", problem.n_params(), prior.dim())?;
        check_weights(w)?;
        let mh = problem.weighted_gram(w) + &problem.prior_precision;
        let mh = (&mh + mh.transpose()) * 0.5;
        let hessian = mh
            .cholesky()
            .ok_or_else(|| OedError::Factorization("posterior Hessian is not positive definite".into()))?;
        Ok(Self {
            w: w.to_vec(),
            prior,
            whitening,
            noise_std: problem.noise_std.clone(),
            backend: Backend::Dense(DenseParts { problem, hessian }),
        })
    }

    pub fn mode(&self) -> PosteriorMode {
        match self.backend {
            Backend::Surrogate(_) => PosteriorMode::Surrogate,
            Backend::Dense(_) => PosteriorMode::Dense,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    /// `tr(Γ_post(w))`.
    pub fn exact_trace(&self) -> f64 {
        match &self.backend {
            Backend::Surrogate(s) => {
                let mass = self.prior.mass();
                let correction: f64 = s
                    .sqrt_v
                    .column_iter()
                    .zip(s.factors.d.iter())
                    .map(|(p, d)| {
                        let p = p.into_owned();
                        d * p.dot(&spmv(mass, &p))
                    })
                    .sum();
                self.prior.trace() - correction
            }
            // tr((MH)⁻¹ M)
            Backend::Dense(d) => d.hessian.solve(&d.problem.mass).trace(),
        }
    }

    /// `diag(Γ_post M⁻¹)`.
    pub fn pointwise_variance(&self) -> DVector<f64> {
        match &self.backend {
            Backend::Surrogate(s) => {
                let mut var = self.prior.pointwise_variance().clone();
                for (p, d) in s.sqrt_v.column_iter().zip(s.factors.d.iter()) {
                    var.iter_mut().zip(p.iter()).for_each(|(v, x)| *v -= d * x * x);
                }
                var
            }
            Backend::Dense(d) => d.hessian.inverse().diagonal(),
        }
    }

    /// `Q x` with `Q = Γ_prior^{1/2}(I − V(I − (I+Λ)^{-1/2})V*)`, so that
    /// `QQ* = Γ_post`. Surrogate mode only.
    pub fn apply_sqrt(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let Backend::Surrogate(s) = &self.backend else {
            return Err(OedError::InvalidParameter("the covariance factor is available in surrogate mode only".into()));
        };
        check_len("parameter vector", self.dim(), x.len())?;
        let v = &s.factors.v;
        let e = s.factors.lambda.map(|l| 1.0 - 1.0 / (1.0 + l).sqrt());
        let coeff = v.tr_mul(&spmv(self.prior.mass(), x)).component_mul(&e);
        Ok(self.prior.apply_cov_sqrt(&(x - v * coeff)))
    }

    /// MAP point for data `d` (time-major, length `q`) under the weighted likelihood.
    pub fn posterior_mean(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        let q = self.noise_std.len() * self.n_times();
        check_len("observation vector", q, d.len())?;
        let m0 = self.prior.mean();
        match &self.backend {
            Backend::Surrogate(s) => {
                // H⁻¹(F* W Σ⁻¹ d + Γ⁻¹ m₀), with F* Σ⁻¹ = Γ^{-1/2} F̃_w* Σ^{-1/2}
                let ns = self.noise_std.len();
                let scaled = DVector::from_fn(q, |i, _| d[i] * self.w[i % ns] / self.noise_std[i % ns]);
                let data = self.prior.apply_cov_sqrt_inv(&s.surrogate.apply_adjoint(&scaled));
                let rhs = data + self.prior.apply_precision(m0);
                let (_, mean) = s.surrogate.apply_h_inv(&s.factors, self.prior, &rhs);
                Ok(mean)
            }
            Backend::Dense(p) => {
                let omega = observation_precision(&self.w, &self.noise_std, q);
                let rhs = p.problem.f.tr_mul(&d.component_mul(&omega)) + &p.problem.prior_precision * m0;
                Ok(p.hessian.solve(&rhs))
            }
        }
    }

    /// `center + Q M^{-1/2} z` for `count` draws; draw `i` uses stream `i` of `seed`.
    pub fn sample_posterior(&self, center: &DVector<f64>, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        check_len("sample center", self.dim(), center.len())?;
        (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let draw = match &self.backend {
                    Backend::Surrogate(_) => {
                        let z = self.whitening.whitened_gaussian_with(&mut rng, 1).pop().expect("one sample");
                        self.apply_sqrt(&z)?
                    }
                    // Euclidean covariance Γ_post M⁻¹ = (MH)⁻¹
                    Backend::Dense(p) => {
                        let xi = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(&mut rng));
                        p.hessian
                            .l()
                            .tr_solve_lower_triangular(&xi)
                            .expect("Cholesky factor is nonsingular")
                    }
                };
                Ok(draw + center)
            })
            .collect()
    }

    /// Dense `Γ_post` as an operator matrix, `(MH)⁻¹ M`.
    pub fn dense_covariance(&self) -> Result<DMatrix<f64>> {
        match &self.backend {
            Backend::Dense(p) => Ok(p.hessian.solve(&p.problem.mass)),
            Backend::Surrogate(_) => Err(OedError::InvalidParameter("dense covariance needs dense mode".into())),
        }
    }

    /// Nested Monte Carlo over `m ~ prior`, `d | m ~ N(Fm, Σ W⁻¹)` of the
    /// M-norm error of the posterior mean, compared with `tr(Γ_post)`.
    /// Noise at zero-weight sensors is irrelevant and drawn with unit weight.
    pub fn bayes_risk_check(&self, n_outer: usize, n_inner: usize, seed: u64) -> Result<BayesRisk> {
        let Backend::Dense(p) = &self.backend else {
            return Err(OedError::InvalidParameter("the Bayes-risk check needs dense mode".into()));
        };
        if n_outer < 2 || n_inner == 0 {
            return Err(OedError::InvalidParameter("Bayes-risk check needs n_outer ≥ 2 and n_inner ≥ 1".into()));
        }
        let trace = self.exact_trace();
        let identity_residual = self.identity_residual(p) / trace;
        let ns = self.noise_std.len();
        let q = p.problem.f.nrows();
        let noise_scale = DVector::from_fn(q, |i, _| {
            let (w, s) = (self.w[i % ns], self.noise_std[i % ns]);
            if w > 0.0 { s / w.sqrt() } else { s }
        });
        let per_outer = (0..n_outer)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let m = self.prior.sample_with(self.whitening, &mut rng);
                let fm = &p.problem.f * &m;
                let mut acc = 0.0;
                for _ in 0..n_inner {
                    let d = DVector::from_fn(q, |j, _| {
                        let xi: f64 = StandardNormal.sample(&mut rng);
                        fm[j] + noise_scale[j] * xi
                    });
                    let e = self.posterior_mean(&d)? - &m;
                    acc += e.dot(&(&p.problem.mass * &e));
                }
                Ok(acc / n_inner as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        let n = per_outer.len() as f64;
        let mean = per_outer.iter().sum::<f64>() / n;
        let var = per_outer.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std_error = (var / n).sqrt();
        Ok(BayesRisk {
            mc_estimate: mean,
            std_error,
            trace,
            z_score: (mean - trace) / std_error,
            identity_residual,
        })
    }

    fn identity_residual(&self, p: &DenseParts) -> f64 {
        let dp = p.problem;
        let misfit = dp.mass_chol.solve(&dp.weighted_gram(&self.w));
        let prior_inv = dp.mass_chol.solve(&dp.prior_precision);
        let post = p.hessian.solve(&dp.mass);
        let post2 = &post * &post;
        let tr_prod = |a: &DMatrix<f64>, b: &DMatrix<f64>| a.component_mul(&b.transpose()).sum();
        (tr_prod(&post2, &misfit) + tr_prod(&post2, &prior_inv) - post.trace()).abs()
    }

    fn n_times(&self) -> usize {
        match &self.backend {
            Backend::Surrogate(s) => s.surrogate.n_times(),
            Backend::Dense(p) => p.problem.f.nrows() / self.noise_std.len(),
        }
    }
}

/// `wⱼ / σⱼ²` expanded over the time-major observation vector.
fn observation_precision(w: &[f64], sigma: &[f64], q: usize) -> DVector<f64> {
    let ns = sigma.len();
    DVector::from_fn(q, |i, _| w[i % ns] / (sigma[i % ns] * sigma[i % ns]))
}

/// CSV text `node_index,x,y,variance` with 17 significant digits.
pub fn variance_csv(nodes: &[[f64; 2]], variance: &DVector<f64>) -> Result<String> {
    check_len("variance field", nodes.len(), variance.len())?;
    let mut out = String::from("node_index,x,y,variance\n");
    for (i, (p, v)) in nodes.iter().zip(variance.iter()).enumerate() {
        writeln!(out, "{i},{:.16e},{:.16e},{:.16e}", p[0], p[1], v).expect("writing to a String");
    }
    Ok(out)
}

pub fn write_variance_csv(path: &Path, nodes: &[[f64; 2]], variance: &DVector<f64>) -> Result<()> {
    std::fs::write(path, variance_csv(nodes, variance)?)?;
    Ok(())
}
