//! Trace-estimator A-optimal objective `Θ(w)` and its gradient.
//!
//! With `sᵢ = Γ^{1/2} zᵢ` fixed, `⟨zᵢ, H(w)⁻¹zᵢ⟩_M = ‖sᵢ‖²_M − Σₖ Dₖ(V_r* sᵢ)ₖ²`,
//! so an evaluation needs only the `r × r` eigenproblem and small dense
//! products. Both terms are dominated by the prior's near-constant mode, so
//! the value is accumulated as `‖(I − V_r V_r*) sᵢ‖²_M + Σₖ (Yᵀcᵢ)ₖ² / (1 + λₖ)`
//! to avoid cancellation. [`OedObjective::evaluate_literal`] runs the same computation
//! probe by probe through the SMW operators, as a cross-check.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Result};
use crate::prior::PriorOperator;
use crate::sparse::{bilinear, spmv};
use crate::surrogate::{HessianFactors, LowRankSurrogate};
use crate::whitening::WhiteningOperator;

/// Whitened Gaussian probes, fixed for a whole optimization run.
#[derive(Debug, Clone)]
pub struct TraceEstimatorSet {
    pub vectors: Vec<DVector<f64>>,
    pub seed: u64,
}

impl TraceEstimatorSet {
    pub fn new(whitening: &WhiteningOperator, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            vectors: whitening.whitened_gaussian_with(&mut rng, count),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// `Θ(w)` and `∇Θ(w)`.
#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub value: f64,
    pub gradient: DVector<f64>,
}

#[derive(Debug)]
pub struct OedObjective<'a> {
    surrogate: &'a LowRankSurrogate,
    prior: &'a PriorOperator,
    estimators: TraceEstimatorSet,
    /// `‖sᵢ − V_r cᵢ‖²_M`, the part of `sᵢ` the surrogate cannot see.
    tail_norms: DVector<f64>,
    /// Columns `cᵢ = V* sᵢ` (r × N).
    coords: DMatrix<f64>,
    /// `U diag(S)` (q × r).
    us: DMatrix<f64>,
}

impl<'a> OedObjective<'a> {
    pub fn new(surrogate: &'a LowRankSurrogate, prior: &'a PriorOperator, estimators: TraceEstimatorSet) -> Result<Self> {
        check_len("prior dimension", surrogate.n_params(), prior.dim())?;
        let n_tr = estimators.len();
        let r = surrogate.rank();
        let mut tail_norms = DVector::zeros(n_tr);
        let mut coords = DMatrix::zeros(r, n_tr);
        for (i, z) in estimators.vectors.iter().enumerate() {
            check_len("trace estimator vector", surrogate.n_params(), z.len())?;
            let s = prior.apply_cov_sqrt(z);
            let ms = spmv(prior.mass(), &s);
            let c = surrogate.v.tr_mul(&ms);
            let tail = &s - &surrogate.v * &c;
            tail_norms[i] = bilinear(prior.mass(), &tail, &tail);
            coords.set_column(i, &c);
        }
        let mut us = surrogate.u.clone();
        for (k, mut col) in us.column_iter_mut().enumerate() {
            col *= surrogate.s[k];
        }
        Ok(Self {
            surrogate,
            prior,
            estimators,
            tail_norms,
            coords,
            us,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.surrogate.n_sensors
    }

    pub fn estimators(&self) -> &TraceEstimatorSet {
        &self.estimators
    }

    pub fn surrogate(&self) -> &LowRankSurrogate {
        self.surrogate
    }

    pub fn prior(&self) -> &PriorOperator {
        self.prior
    }

    /// `Θ(w)` only.
    pub fn value(&self, w: &[f64]) -> Result<f64> {
        let f = self.surrogate.hessian_factors(w)?;
        Ok(self.value_from(&f, &f.y.tr_mul(&self.coords)))
    }

    fn value_from(&self, f: &HessianFactors, proj: &DMatrix<f64>) -> f64 {
        let seen: f64 = proj
            .column_iter()
            .map(|c| c.iter().zip(f.lambda.iter()).map(|(x, l)| x * x / (1.0 + l)).sum::<f64>())
            .sum();
        (self.tail_norms.sum() + seen) / self.estimators.len() as f64
    }

    pub fn evaluate(&self, w: &[f64]) -> Result<ObjectiveValue> {
        let f = self.surrogate.hessian_factors(w)?;
        let n_tr = self.estimators.len() as f64;
        let proj = f.y.tr_mul(&self.coords);
        let mut weighted = proj.clone();
        for (k, mut row) in weighted.row_iter_mut().enumerate() {
            row *= f.d[k];
        }
        let value = self.value_from(&f, &proj);
        // V* q̂ᵢ = cᵢ − Y D Yᵀ cᵢ, then d̄ᵢ = U S V* q̂ᵢ
        let reduced = &self.coords - &f.y * weighted;
        let dbar = &self.us * reduced;
        Ok(ObjectiveValue {
            value,
            gradient: self.sensor_sums(&dbar, n_tr),
        })
    }

    /// `−(1/N) Σᵢ Σ_ℓ d̄ᵢ[ℓ·Ns + j]²` from the columns `d̄ᵢ`.
    fn sensor_sums(&self, dbar: &DMatrix<f64>, n_tr: f64) -> DVector<f64> {
        let ns = self.n_sensors();
        let mut g = DVector::zeros(ns);
        for col in dbar.column_iter() {
            for (idx, x) in col.iter().enumerate() {
                g[idx % ns] -= x * x;
            }
        }
        g / n_tr
    }

    /// The per-probe SMW evaluation: `qᵢ = H⁻¹zᵢ` through [`LowRankSurrogate::apply_h_inv`]
    /// and `d̄ᵢ` through [`LowRankSurrogate::apply_fq`].
    pub fn evaluate_literal(&self, w: &[f64]) -> Result<ObjectiveValue> {
        let f: HessianFactors = self.surrogate.hessian_factors(w)?;
        let n_tr = self.estimators.len() as f64;
        let mut value = 0.0;
        let mut dbar = DMatrix::zeros(self.surrogate.n_obs(), self.estimators.len());
        for (i, z) in self.estimators.vectors.iter().enumerate() {
            let (q_hat, q) = self.surrogate.apply_h_inv(&f, self.prior, z);
            value += bilinear(self.prior.mass(), z, &q);
            dbar.set_column(i, &self.surrogate.apply_fq(&q_hat));
        }
        Ok(ObjectiveValue {
            value: value / n_tr,
            gradient: self.sensor_sums(&dbar, n_tr),
        })
    }
}
