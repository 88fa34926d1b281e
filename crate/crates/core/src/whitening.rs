//! Isomorphism between Euclidean `Rⁿ` and the mass-weighted space.
//!
//! With `M̃ = M_l^{-1/2} M M_l^{-1/2}` (symmetric, spectrum clustered near 1)
//! the operator `L = M_l^{-1/2} M̃^{-1/2}` satisfies `⟨Lx, Ly⟩_M = ⟨x, y⟩`.
//! Standard normal vectors mapped through `L` have covariance `M⁻¹`, which is
//! what mass-weighted trace estimation and sampling need.
//!
//! `M̃^{-1/2}` is applied either exactly (dense eigendecomposition) or through
//! a Chebyshev interpolant of `x^{-1/2}` on an interval containing the
//! spectrum of `M̃`; degree `k` costs `k` products with `M̃`.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, OedError, Result};
use crate::fem::FemOperators;
use crate::sparse::{spmv, to_dense};

/// Problems at or below this size use the dense mode by default.
pub const DENSE_WHITENING_MAX_N: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WhiteningMode {
    Dense,
    /// Chebyshev interpolant of the given degree on `[lower, upper]`.
    Iterative { degree: usize, lower: f64, upper: f64 },
}

impl WhiteningMode {
    /// `M_l⁻¹M` has spectrum in `[1/4, 1]` for linear triangles.
    pub fn iterative(degree: usize) -> Self {
        WhiteningMode::Iterative {
            degree,
            lower: 0.25,
            upper: 1.0,
        }
    }

    pub fn auto(n: usize) -> Self {
        if n <= DENSE_WHITENING_MAX_N {
            WhiteningMode::Dense
        } else {
            WhiteningMode::iterative(10)
        }
    }
}

#[derive(Debug, Clone)]
enum InvSqrt {
    Dense(DMatrix<f64>),
    Chebyshev { coeffs: Vec<f64>, lower: f64, upper: f64 },
}

#[derive(Debug, Clone)]
pub struct WhiteningOperator {
    lumped_inv_sqrt: DVector<f64>,
    scaled_mass: CsrMatrix<f64>,
    inv_sqrt: InvSqrt,
    mode: WhiteningMode,
}

/// Chebyshev interpolation coefficients of `x^{-1/2}` on `[a, b]`.
fn chebyshev_inv_sqrt(degree: usize, a: f64, b: f64) -> Vec<f64> {
    let m = degree + 1;
    let theta: Vec<f64> = (0..m)
        .map(|i| std::f64::consts::PI * (i as f64 + 0.5) / m as f64)
        .collect();
    let fvals: Vec<f64> = theta
        .iter()
        .map(|t| (0.5 * (b - a) * t.cos() + 0.5 * (b + a)).powf(-0.5))
        .collect();
    (0..m)
        .map(|j| {
            let s: f64 = fvals
                .iter()
                .zip(&theta)
                .map(|(f, t)| f * (j as f64 * t).cos())
                .sum();
            let c = 2.0 * s / m as f64;
            if j == 0 {
                0.5 * c
            } else {
                c
            }
        })
        .collect()
}

impl WhiteningOperator {
    pub fn new(fem: &FemOperators, mode: WhiteningMode) -> Result<Self> {
        Self::from_matrices(&fem.mass, &fem.lumped_mass, mode)
    }

    pub fn auto(fem: &FemOperators) -> Result<Self> {
        Self::new(fem, WhiteningMode::auto(fem.n))
    }

    pub fn from_matrices(mass: &CsrMatrix<f64>, lumped: &DVector<f64>, mode: WhiteningMode) -> Result<Self> {
        let n = mass.nrows();
        check_len("lumped mass", n, lumped.len())?;
        if lumped.iter().any(|&v| !(v > 0.0)) {
            return Err(OedError::InvalidParameter("lumped mass must be positive".into()));
        }
        let lumped_inv_sqrt = lumped.map(|v| v.powf(-0.5));
        let mut scaled_mass = mass.clone();
        {
            let (offsets, cols, vals) = scaled_mass.csr_data_mut();
            for i in 0..n {
                for idx in offsets[i]..offsets[i + 1] {
                    vals[idx] *= lumped_inv_sqrt[i] * lumped_inv_sqrt[cols[idx]];
                }
            }
        }
        let inv_sqrt = match mode {
            WhiteningMode::Dense => {
                let eig = to_dense(&scaled_mass).symmetric_eigen();
                if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
                    return Err(OedError::InvalidParameter("mass matrix is not positive definite".into()));
                }
                let scale = eig.eigenvalues.map(|l| l.powf(-0.5));
                let mut vs = eig.eigenvectors.clone();
                for (j, mut col) in vs.column_iter_mut().enumerate() {
                    col *= scale[j];
                }
                InvSqrt::Dense(vs * eig.eigenvectors.transpose())
            }
            WhiteningMode::Iterative { degree, lower, upper } => {
                if degree == 0 || !(lower > 0.0 && upper > lower) {
                    return Err(OedError::InvalidParameter(format!(
                        "invalid Chebyshev parameters: degree {degree}, interval [{lower}, {upper}]"
                    )));
                }
                InvSqrt::Chebyshev {
                    coeffs: chebyshev_inv_sqrt(degree, lower, upper),
                    lower,
                    upper,
                }
            }
        };
        Ok(Self {
            lumped_inv_sqrt,
            scaled_mass,
            inv_sqrt,
            mode,
        })
    }

    pub fn dim(&self) -> usize {
        self.lumped_inv_sqrt.len()
    }

    pub fn mode(&self) -> WhiteningMode {
        self.mode
    }

    /// `M̃ x`.
    pub fn apply_scaled_mass(&self, x: &DVector<f64>) -> DVector<f64> {
        spmv(&self.scaled_mass, x)
    }

    /// `M̃^{-1/2} y`.
    pub fn apply_inv_sqrt(&self, y: &DVector<f64>) -> DVector<f64> {
        match &self.inv_sqrt {
            InvSqrt::Dense(m) => m * y,
            InvSqrt::Chebyshev { coeffs, lower, upper } => {
                // Clenshaw recurrence on t(M̃) = (2M̃ - (a+b)I) / (b-a)
                let (a, b) = (*lower, *upper);
                let t_apply = |x: &DVector<f64>| -> DVector<f64> {
                    (self.apply_scaled_mass(x) * 2.0 - x * (a + b)) / (b - a)
                };
                let k = coeffs.len() - 1;
                let mut b1 = y * coeffs[k];
                let mut b2 = DVector::zeros(y.len());
                for j in (1..k).rev() {
                    let next = y * coeffs[j] + t_apply(&b1) * 2.0 - &b2;
                    b2 = b1;
                    b1 = next;
                }
                if k == 0 {
                    return b1;
                }
                y * coeffs[0] + t_apply(&b1) - b2
            }
        }
    }

    /// `z = L y = M_l^{-1/2} M̃^{-1/2} y`.
    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        self.apply_inv_sqrt(y).component_mul(&self.lumped_inv_sqrt)
    }

    /// Relative residual `‖M̃^{-1/2} M̃ M̃^{-1/2} y − y‖ / ‖y‖` on a fixed probe.
    pub fn identity_residual(&self, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(&mut rng));
        let z = self.apply_inv_sqrt(&y);
        let back = self.apply_inv_sqrt(&self.apply_scaled_mass(&z));
        (back - &y).norm() / y.norm()
    }

    /// Errors out when the identity residual exceeds `tolerance`.
    pub fn check(&self, tolerance: f64) -> Result<f64> {
        let residual = self.identity_residual(0x5eed);
        if !(residual <= tolerance) {
            return Err(OedError::Whitening { residual, tolerance });
        }
        Ok(residual)
    }

    /// `count` vectors `L y` with `y ~ N(0, I)`, deterministic in `seed`.
    pub fn whitened_gaussian(&self, seed: u64, count: usize) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.whitened_gaussian_with(&mut rng, count)
    }

    pub fn whitened_gaussian_with<R: rand::Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<DVector<f64>> {
        (0..count)
            .map(|_| {
                let y = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(&mut *rng));
                self.apply(&y)
            })
            .collect()
    }

    /// Dense matrix of `L`; for oracles on small problems.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            out.set_column(j, &self.apply(&e));
        }
        out
    }
}
