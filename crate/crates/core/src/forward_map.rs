//! Parameter-to-observable map `F`, its prior-preconditioned form
//! `F̃ = F Γ^{1/2}` and their adjoints in the mass-weighted inner product.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_len, OedError, Result};
use crate::observation::ObservationSetup;
use crate::prior::PriorOperator;
use crate::sparse::to_dense;
use crate::transport::TransportOperators;

/// Largest parameter dimension for which dense operators are assembled.
pub const DENSE_MAX_N: usize = 2000;

#[derive(Debug, Clone, Copy)]
pub struct ForwardMap<'a> {
    pub transport: &'a TransportOperators,
    pub observations: &'a ObservationSetup,
    pub prior: &'a PriorOperator,
}

impl<'a> ForwardMap<'a> {
    pub fn new(transport: &'a TransportOperators, observations: &'a ObservationSetup, prior: &'a PriorOperator) -> Result<Self> {
        check_len("prior dimension", transport.dim(), prior.dim())?;
        Ok(Self {
            transport,
            observations,
            prior,
        })
    }

    pub fn n_params(&self) -> usize {
        self.transport.dim()
    }

    pub fn n_obs(&self) -> usize {
        self.observations.dim()
    }

    /// `F m`: one forward solve.
    pub fn apply_f(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        let traj = self.transport.forward_solve(m)?;
        self.observations.observe(&traj)
    }

    /// `Fᵀ d`: one adjoint solve.
    pub fn apply_f_transpose(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        let loads = self.observations.scatter(d, self.n_params())?;
        self.transport.transpose_solve(&loads)
    }

    /// `F* d = M⁻¹ Fᵀ d`.
    pub fn apply_f_adjoint(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.prior.solve_mass(&self.apply_f_transpose(d)?))
    }

    pub fn apply_ftilde(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply_f(&self.prior.apply_cov_sqrt(v))
    }

    /// `F̃* d = Γ^{1/2} F* d = L⁻¹ Fᵀ d`.
    pub fn apply_ftilde_adjoint(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.prior.solve_elliptic(&self.apply_f_transpose(d)?))
    }

    /// Noise-whitened `Γ_noise^{-1/2} F̃ v`.
    pub fn apply_whitened(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let mut d = self.apply_ftilde(v)?;
        self.scale_by_noise(&mut d);
        Ok(d)
    }

    /// Adjoint of [`apply_whitened`](Self::apply_whitened).
    pub fn apply_whitened_adjoint(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        let mut d = d.clone();
        self.scale_by_noise(&mut d);
        self.apply_ftilde_adjoint(&d)
    }

    fn scale_by_noise(&self, d: &mut DVector<f64>) {
        let sigma = self.observations.noise_std();
        if sigma.iter().any(|s| *s != 1.0) {
            let ns = sigma.len();
            d.iter_mut().enumerate().for_each(|(i, x)| *x /= sigma[i % ns]);
        }
    }

    fn check_dense(&self) -> Result<()> {
        let n = self.n_params();
        if n > DENSE_MAX_N {
            return Err(OedError::DenseCap { n, cap: DENSE_MAX_N });
        }
        Ok(())
    }

    fn columns<G>(&self, apply: G) -> Result<DMatrix<f64>>
    where
        G: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
    {
        self.check_dense()?;
        let n = self.n_params();
        let cols = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                apply(&e)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_columns(&cols))
    }

    /// Dense `F` (q × n), one forward solve per column.
    pub fn dense_f(&self) -> Result<DMatrix<f64>> {
        self.columns(|e| self.apply_f(e))
    }

    /// Dense `F̃` (q × n).
    pub fn dense_ftilde(&self) -> Result<DMatrix<f64>> {
        self.columns(|e| self.apply_ftilde(e))
    }

    /// Dense noise-whitened `F̃`.
    pub fn dense_whitened(&self) -> Result<DMatrix<f64>> {
        self.columns(|e| self.apply_whitened(e))
    }

    /// Singular values of `F` and `F̃` as maps from the mass-weighted space.
    pub fn dense_spectra(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mass = to_dense(self.prior.mass());
        let f = self.dense_f()?;
        let sqrt = self.columns(|e| Ok(self.prior.apply_cov_sqrt(e)))?;
        let ft = &f * sqrt;
        Ok((mass_weighted_singular_values(&f, &mass)?, mass_weighted_singular_values(&ft, &mass)?))
    }
}

/// Singular values of `A: (ℝⁿ, ⟨·,·⟩_M) → ℝ^q`, descending.
///
/// With `M = RRᵀ` these are the singular values of `A R⁻ᵀ`, computed from the
/// eigenvalues of its Gram matrix. Values below about `1e-8·σ₁` are not
/// resolved.
pub fn mass_weighted_singular_values(a: &DMatrix<f64>, mass: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_len("operator columns", mass.nrows(), a.ncols())?;
    let chol = mass
        .clone()
        .cholesky()
        .ok_or_else(|| OedError::Factorization("mass matrix is not positive definite".into()))?;
    // B = A R⁻ᵀ, so Bᵀ = R⁻¹ Aᵀ
    let bt = chol.l().solve_lower_triangular(&a.transpose()).expect("Cholesky factor is nonsingular");
    let gram = &bt * bt.transpose();
    let mut s: Vec<f64> = gram.symmetric_eigenvalues().iter().map(|&l| l.max(0.0).sqrt()).collect();
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(s)
}

/// Number of singular values above `rel_tol · σ₁`.
pub fn numerical_rank(sigma: &[f64], rel_tol: f64) -> usize {
    let top = sigma.first().copied().unwrap_or(0.0);
    sigma.iter().filter(|&&s| s > rel_tol * top).count()
}
