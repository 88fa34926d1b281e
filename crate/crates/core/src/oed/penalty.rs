//! Sparsifying penalties on the design weights.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{OedError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    /// `Φ(w) = Σ wᵢ`.
    L1,
    /// `Φ(w) = Σ f_ε(wᵢ)`, a C¹ surrogate of the number of nonzeros.
    PhiEps { eps: f64 },
}

/// The cubic in `t = (x − ε/2)/(3ε/2)` joining the linear and flat pieces.
#[inline]
fn cubic_in_t(t: f64) -> (f64, f64) {
    (0.5 + t * (1.5 + t * (-1.5 + 0.5 * t)), 1.5 + t * (-3.0 + 1.5 * t))
}

/// `f_ε(x)` and `f_ε′(x)`.
pub fn f_eps(x: f64, eps: f64) -> (f64, f64) {
    if x <= 0.5 * eps {
        (x / eps, 1.0 / eps)
    } else if x <= 2.0 * eps {
        let h = 1.5 * eps;
        let (p, dp) = cubic_in_t((x - 0.5 * eps) / h);
        (p, dp / h)
    } else {
        (1.0, 0.0)
    }
}

/// Monomial coefficients `[a₀, a₁, a₂, a₃]` of the middle branch in `x`.
pub fn cubic_coefficients(eps: f64) -> [f64; 4] {
    // p(t) = Σ bₖ tᵏ with t = (x − c)/h
    let b = [0.5, 1.5, -1.5, 0.5];
    let (c, h) = (0.5 * eps, 1.5 * eps);
    let mut a = [0.0; 4];
    let binom = [[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [1.0, 2.0, 1.0, 0.0], [1.0, 3.0, 3.0, 1.0]];
    for k in 0..4 {
        let scale = b[k] / h.powi(k as i32);
        for j in 0..=k {
            a[j] += scale * binom[k][j] * (-c).powi((k - j) as i32);
        }
    }
    a
}

impl Penalty {
    pub fn validate(&self) -> Result<()> {
        match self {
            Penalty::L1 => Ok(()),
            Penalty::PhiEps { eps } if *eps > 0.0 && eps.is_finite() => Ok(()),
            Penalty::PhiEps { eps } => Err(OedError::InvalidParameter(format!("penalty eps must be positive, got {eps}"))),
        }
    }

    /// `(Φ(w), ∇Φ(w))`, without the factor `γ`.
    pub fn value_grad(&self, w: &[f64]) -> Result<(f64, DVector<f64>)> {
        self.validate()?;
        if let Some((index, &value)) = w.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(OedError::WeightDomain { index, value });
        }
        Ok(match self {
            Penalty::L1 => (w.iter().sum(), DVector::from_element(w.len(), 1.0)),
            Penalty::PhiEps { eps } => {
                let mut grad = DVector::zeros(w.len());
                let mut value = 0.0;
                for (i, &x) in w.iter().enumerate() {
                    let (f, df) = f_eps(x, *eps);
                    value += f;
                    grad[i] = df;
                }
                (value, grad)
            }
        })
    }
}
