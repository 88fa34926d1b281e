//! Gaussian prior with covariance `Γ = A⁻²`, `A = M⁻¹L`, `L = αK + βM`.
//!
//! `A` is M-symmetric, so `Γ^{1/2} = A⁻¹ = L⁻¹M` is the M-symmetric square
//! root. `L` is factored once; every application is a pair of triangular
//! solves. Natural (Neumann) boundary conditions come from the weak form.

use std::sync::OnceLock;

use nalgebra::DVector;
use nalgebra_sparse::CsrMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, OedError, Result};
use crate::fem::FemOperators;
use crate::sparse::{linear_combination, spmv, BandLu};
use crate::whitening::WhiteningOperator;

#[derive(Debug, Clone, Copy)]
struct Moments {
    trace: f64,
}

#[derive(Debug)]
pub struct PriorOperator {
    alpha: f64,
    beta: f64,
    elliptic: CsrMatrix<f64>,
    elliptic_lu: BandLu,
    mass: CsrMatrix<f64>,
    mass_lu: BandLu,
    mean: DVector<f64>,
    moments: OnceLock<Moments>,
    variance: OnceLock<DVector<f64>>,
}

impl PriorOperator {
    pub fn new(fem: &FemOperators, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(OedError::InvalidParameter(format!(
                "prior weights must be positive (alpha = {alpha}, beta = {beta})"
            )));
        }
        let elliptic = linear_combination(alpha, &fem.stiffness, beta, &fem.mass);
        let elliptic_lu = BandLu::factor(&elliptic)
            .map_err(|e| OedError::Factorization(format!("prior operator is not SPD: {e}")))?;
        let mass_lu = BandLu::factor(&fem.mass)?;
        Ok(Self {
            alpha,
            beta,
            elliptic,
            elliptic_lu,
            mass: fem.mass.clone(),
            mass_lu,
            mean: DVector::zeros(fem.n),
            moments: OnceLock::new(),
            variance: OnceLock::new(),
        })
    }

    pub fn with_mean(mut self, mean: DVector<f64>) -> Result<Self> {
        check_len("prior mean", self.dim(), mean.len())?;
        self.mean = mean;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn mass(&self) -> &CsrMatrix<f64> {
        &self.mass
    }

    /// The elliptic matrix `L = αK + βM`.
    pub fn elliptic(&self) -> &CsrMatrix<f64> {
        &self.elliptic
    }

    /// `L⁻¹ b`.
    pub fn solve_elliptic(&self, b: &DVector<f64>) -> DVector<f64> {
        self.elliptic_lu.solve(b)
    }

    /// `M⁻¹ b`.
    pub fn solve_mass(&self, b: &DVector<f64>) -> DVector<f64> {
        self.mass_lu.solve(b)
    }

    /// `Γ^{1/2} v = L⁻¹ M v`.
    pub fn apply_cov_sqrt(&self, v: &DVector<f64>) -> DVector<f64> {
        self.elliptic_lu.solve(&spmv(&self.mass, v))
    }

    /// `Γ^{-1/2} v = A v = M⁻¹ L v`.
    pub fn apply_cov_sqrt_inv(&self, v: &DVector<f64>) -> DVector<f64> {
        self.mass_lu.solve(&spmv(&self.elliptic, v))
    }

    pub fn apply_cov(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_cov_sqrt(&self.apply_cov_sqrt(v))
    }

    pub fn apply_precision(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_cov_sqrt_inv(&self.apply_cov_sqrt_inv(v))
    }

    /// `m₀ + A⁻¹ L_iso y` for `y ~ N(0, I)`.
    pub fn sample_with<R: rand::Rng + ?Sized>(&self, whitening: &WhiteningOperator, rng: &mut R) -> DVector<f64> {
        let z = whitening.whitened_gaussian_with(rng, 1).pop().expect("one sample");
        self.apply_cov_sqrt(&z) + &self.mean
    }

    pub fn sample_prior(&self, whitening: &WhiteningOperator, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(whitening, &mut rng)
    }

    /// Exact `tr(Γ)`, computed once with `2n` solves.
    pub fn trace(&self) -> f64 {
        self.moments
            .get_or_init(|| {
                // tr(L⁻¹ M L⁻¹ M) = Σ_i ⟨L⁻¹ M L⁻¹ e_i, M e_i⟩
                let n = self.dim();
                let mut trace = 0.0;
                for i in 0..n {
                    let mut e = DVector::zeros(n);
                    e[i] = 1.0;
                    let x = self.elliptic_lu.solve(&e);
                    let y = self.apply_cov_sqrt(&x);
                    let row = self.mass.row(i);
                    trace += row
                        .col_indices()
                        .iter()
                        .zip(row.values())
                        .map(|(&j, &m)| m * y[j])
                        .sum::<f64>();
                }
                Moments { trace }
            })
            .trace
    }

    /// Pointwise prior variance `diag(Γ M⁻¹) = diag(L⁻¹ M L⁻¹)`.
    pub fn pointwise_variance(&self) -> &DVector<f64> {
        self.variance.get_or_init(|| {
            let n = self.dim();
            DVector::from_fn(n, |i, _| {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                let x = self.elliptic_lu.solve(&e);
                x.dot(&spmv(&self.mass, &x))
            })
        })
    }
}
