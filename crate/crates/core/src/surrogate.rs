//! Randomized low-rank SVD of the prior-preconditioned map and the spectral
//! factors of the preconditioned misfit Hessian for a given design.
//!
//! The parameter side carries the mass-weighted inner product, so right
//! singular vectors satisfy `VᵀMV = I` and adjoints are `M`-adjoints.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, OedError, Result};
use crate::forward_map::ForwardMap;
use crate::prior::PriorOperator;
use crate::sparse::{spmm, spmv};
use crate::whitening::WhiteningOperator;

pub const SURROGATE_FORMAT_VERSION: u32 = 1;

/// Singular values below this fraction of `σ₁` are treated as zero.
const RANK_DROP: f64 = 1e-10;

/// A linear map `(ℝⁿ, ⟨·,·⟩_M) → ℝ^q` with its `M`-adjoint.
pub trait MassAdjointOperator: Sync {
    fn n_params(&self) -> usize;
    fn n_obs(&self) -> usize;
    fn mass(&self) -> &CsrMatrix<f64>;
    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>>;
    fn apply_adjoint(&self, d: &DVector<f64>) -> Result<DVector<f64>>;
}

/// The noise-whitened `F̃`.
impl MassAdjointOperator for ForwardMap<'_> {
    fn n_params(&self) -> usize {
        ForwardMap::n_params(self)
    }

    fn n_obs(&self) -> usize {
        ForwardMap::n_obs(self)
    }

    fn mass(&self) -> &CsrMatrix<f64> {
        self.prior.mass()
    }

    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply_whitened(v)
    }

    fn apply_adjoint(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply_whitened_adjoint(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub rank: usize,
    pub oversampling: usize,
    pub power_iterations: usize,
    pub seed: u64,
    /// Number of fresh probes for the residual estimate.
    pub residual_probes: usize,
    pub tolerance: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            rank: 60,
            oversampling: 10,
            power_iterations: 1,
            seed: 0,
            residual_probes: 3,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateMeta {
    pub requested_rank: usize,
    pub oversampling: usize,
    pub power_iterations: usize,
    pub seed: u64,
    /// Largest relative residual over the fresh probes.
    pub residual: f64,
}

/// `F̃ ≈ U diag(s) V*` with `UᵀU = I`, `VᵀMV = I`.
#[derive(Debug, Clone)]
pub struct LowRankSurrogate {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
    pub n_sensors: usize,
    pub meta: SurrogateMeta,
    mass: CsrMatrix<f64>,
}

/// Orthonormalizes the columns of `z` in `⟨·,·⟩_M` with two passes of
/// classical Gram-Schmidt. Returns `(V, R)` with `z = V R`; columns that
/// are numerically dependent come back as zero with a zero row in `R`.
pub fn mass_orthonormalize(z: &DMatrix<f64>, mass: &CsrMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, k) = z.shape();
    let mut v = DMatrix::zeros(n, k);
    let mut mv = DMatrix::zeros(n, k);
    let mut r = DMatrix::zeros(k, k);
    let scale = (0..k)
        .map(|j| {
            let c = z.column(j).into_owned();
            c.dot(&spmv(mass, &c)).sqrt()
        })
        .fold(0.0, f64::max);
    for j in 0..k {
        let mut x = z.column(j).into_owned();
        for _ in 0..2 {
            if j > 0 {
                let c = mv.columns(0, j).tr_mul(&x);
                x -= v.columns(0, j) * &c;
                let mut rc = r.view_mut((0, j), (j, 1));
                rc += c;
            }
        }
        let mx = spmv(mass, &x);
        let norm = x.dot(&mx).max(0.0).sqrt();
        if norm > 1e-12 * scale {
            r[(j, j)] = norm;
            v.set_column(j, &(x / norm));
            mv.set_column(j, &(mx / norm));
        }
    }
    (v, r)
}

fn apply_columns<F>(cols: &[DVector<f64>], f: F) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    let out = cols.par_iter().map(&f).collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_columns(&out))
}

fn columns_of(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.column_iter().map(|c| c.into_owned()).collect()
}

impl LowRankSurrogate {
    /// Randomized range finder with `M`-weighted Gaussian probes.
    ///
    /// Costs `(r + p)(2 + 2·q_pow)` PDE solves plus the residual probes.
    pub fn build<O: MassAdjointOperator>(
        op: &O,
        whitening: &WhiteningOperator,
        n_sensors: usize,
        config: &SurrogateConfig,
    ) -> Result<Self> {
        let (n, q) = (op.n_params(), op.n_obs());
        let k = config.rank + config.oversampling;
        if config.rank == 0 || k > n.min(q) {
            return Err(OedError::InvalidParameter(format!(
                "rank + oversampling = {k} must lie in [1, min(q, n)] = [1, {}]",
                n.min(q)
            )));
        }
        if n_sensors == 0 || q % n_sensors != 0 {
            return Err(OedError::InvalidParameter(format!("{n_sensors} sensors do not divide q = {q}")));
        }
        check_len("whitening dimension", n, whitening.dim())?;
        let mass = op.mass();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let omega = whitening.whitened_gaussian_with(&mut rng, k);

        let mut y = apply_columns(&omega, |c| op.apply(c))?;
        let mut basis = y.clone().qr().q();
        for _ in 0..config.power_iterations {
            let z = apply_columns(&columns_of(&basis), |c| op.apply_adjoint(c))?;
            let (vz, _) = mass_orthonormalize(&z, mass);
            y = apply_columns(&columns_of(&vz), |c| op.apply(c))?;
            basis = y.clone().qr().q();
        }
        let z = apply_columns(&columns_of(&basis), |c| op.apply_adjoint(c))?;
        let (vz, r) = mass_orthonormalize(&z, mass);
        let svd = r.transpose().svd(true, true);
        let (u_hat, vt_hat) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

        let top = svd.singular_values[order[0]];
        let keep: Vec<usize> = order
            .into_iter()
            .take(config.rank)
            .filter(|&i| svd.singular_values[i] > RANK_DROP * top)
            .collect();
        if keep.len() < config.rank {
            warn!("surrogate rank reduced from {} to {}", config.rank, keep.len());
        }
        if keep.is_empty() {
            return Err(OedError::InvalidParameter("operator is numerically zero".into()));
        }
        let u = &basis * u_hat.select_columns(&keep);
        let v = &vz * vt_hat.transpose().select_columns(&keep);
        let s = DVector::from_iterator(keep.len(), keep.iter().map(|&i| svd.singular_values[i]));

        let mut out = Self {
            u,
            s,
            v,
            n_sensors,
            meta: SurrogateMeta {
                requested_rank: config.rank,
                oversampling: config.oversampling,
                power_iterations: config.power_iterations,
                seed: config.seed,
                residual: 0.0,
            },
            mass: mass.clone(),
        };
        let fresh = whitening.whitened_gaussian_with(&mut rng, config.residual_probes);
        out.meta.residual = fresh
            .iter()
            .map(|p| {
                let exact = op.apply(p)?;
                Ok((&exact - out.apply(p)).norm() / exact.norm().max(f64::MIN_POSITIVE))
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        if out.meta.residual > config.tolerance {
            warn!(
                "surrogate residual {:.3e} exceeds tolerance {:.1e}",
                out.meta.residual, config.tolerance
            );
        }
        Ok(out)
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn n_params(&self) -> usize {
        self.v.nrows()
    }

    pub fn n_obs(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.n_obs() / self.n_sensors
    }

    pub fn mass(&self) -> &CsrMatrix<f64> {
        &self.mass
    }

    /// `V* x = Vᵀ M x`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self.v.tr_mul(&spmv(&self.mass, x))
    }

    /// `F̃_r x`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.u * self.project(x).component_mul(&self.s)
    }

    /// `F̃_r* d`.
    pub fn apply_adjoint(&self, d: &DVector<f64>) -> DVector<f64> {
        &self.v * self.u.tr_mul(d).component_mul(&self.s)
    }

    /// Spectral factors of `F̃_r* W F̃_r` for sensor weights `w`.
    pub fn hessian_factors(&self, w: &[f64]) -> Result<HessianFactors> {
        check_len("design weights", self.n_sensors, w.len())?;
        let ns = self.n_sensors;
        let r = self.rank();
        let mut scaled = self.u.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= w[i % ns].max(0.0).sqrt();
        }
        let mut g = scaled.tr_mul(&scaled);
        for i in 0..r {
            for j in 0..r {
                g[(i, j)] *= self.s[i] * self.s[j];
            }
        }
        let eig = g.symmetric_eigen();
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let lambda = DVector::from_iterator(r, order.iter().map(|&i| eig.eigenvalues[i].max(0.0)));
        let y = eig.eigenvectors.select_columns(&order);
        let d = lambda.map(|l| l / (1.0 + l));
        let v = &self.v * &y;
        Ok(HessianFactors { y, lambda, d, v })
    }

    /// SMW application: `q̂ = (I − V D V*) Γ^{1/2} z` and `q = Γ^{1/2} q̂ ≈ H(w)⁻¹ z`.
    pub fn apply_h_inv(&self, f: &HessianFactors, prior: &PriorOperator, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let s = prior.apply_cov_sqrt(z);
        let coeff = f.v.tr_mul(&spmv(&self.mass, &s)).component_mul(&f.d);
        let q_hat = &s - &f.v * coeff;
        let q = prior.apply_cov_sqrt(&q_hat);
        (q_hat, q)
    }

    /// `F̃_r q̂`, the surrogate stand-in for `F q`; no PDE solves.
    pub fn apply_fq(&self, q_hat: &DVector<f64>) -> DVector<f64> {
        self.apply(q_hat)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SurrogateFile {
            format_version: SURROGATE_FORMAT_VERSION,
            n_params: self.n_params(),
            n_obs: self.n_obs(),
            n_sensors: self.n_sensors,
            rank: self.rank(),
            u: self.u.as_slice().to_vec(),
            s: self.s.as_slice().to_vec(),
            v: self.v.as_slice().to_vec(),
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Restores a surrogate written by [`to_json`](Self::to_json); the mass
    /// matrix must belong to the same mesh.
    pub fn from_json(text: &str, mass: &CsrMatrix<f64>) -> Result<Self> {
        let file: SurrogateFile = serde_json::from_str(text)?;
        if file.format_version != SURROGATE_FORMAT_VERSION {
            return Err(OedError::FormatVersion(file.format_version));
        }
        check_len("surrogate parameter dimension", mass.nrows(), file.n_params)?;
        check_len("surrogate left factor", file.n_obs * file.rank, file.u.len())?;
        check_len("surrogate singular values", file.rank, file.s.len())?;
        check_len("surrogate right factor", file.n_params * file.rank, file.v.len())?;
        Ok(Self {
            u: DMatrix::from_vec(file.n_obs, file.rank, file.u),
            s: DVector::from_vec(file.s),
            v: DMatrix::from_vec(file.n_params, file.rank, file.v),
            n_sensors: file.n_sensors,
            meta: file.meta,
            mass: mass.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path, mass: &CsrMatrix<f64>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, mass)
    }

    /// `VᵀMV`, for orthonormality checks.
    pub fn right_gram(&self) -> DMatrix<f64> {
        self.v.tr_mul(&spmm(&self.mass, &self.v))
    }
}

#[derive(Serialize, Deserialize)]
struct SurrogateFile {
    format_version: u32,
    n_params: usize,
    n_obs: usize,
    n_sensors: usize,
    rank: usize,
    u: Vec<f64>,
    s: Vec<f64>,
    v: Vec<f64>,
    meta: SurrogateMeta,
}

/// `F̃_r* W F̃_r = V Λ V*` for one design, with `D = Λ(I + Λ)⁻¹`.
#[derive(Debug, Clone)]
pub struct HessianFactors {
    /// Eigenvectors of the small Gram matrix `S Uᵀ W U S`.
    pub y: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub d: DVector<f64>,
    /// `M`-orthonormal eigenvectors in parameter space.
    pub v: DMatrix<f64>,
}
