//! Implicit-Euler advection-diffusion solves and their discrete adjoints.
//!
//! Every step solves `(M + dt(κK + C)) u^{k+1} = M u^k` with one shared
//! factorization. The adjoint is the exact transpose of the discrete
//! recursion, so adjoint tests hold to rounding.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DVector;
use nalgebra_sparse::CsrMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, OedError, Result};
use crate::fem::{assemble_advection, FemOperators};
use crate::mesh::{parse_fields, Mesh};
use crate::sparse::{linear_combination, spmv, spmv_into, BandLu};

/// Smallest diffusion accepted without `allow_low_kappa`.
pub const MIN_KAPPA: f64 = 1e-4;

/// Source of the transport velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VelocityField {
    /// Cellular gyre flow damped to zero near the holes, scaled to unit peak speed.
    Gyre { cutoff: f64 },
    Zero,
    /// Per-node values, in mesh node order.
    Nodal { values: Vec<[f64; 2]> },
}

impl Default for VelocityField {
    fn default() -> Self {
        VelocityField::Gyre { cutoff: 0.1 }
    }
}

fn smoothstep(t: f64) -> (f64, f64) {
    if t >= 1.0 {
        (1.0, 0.0)
    } else if t <= 0.0 {
        (0.0, 0.0)
    } else {
        (t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t))
    }
}

/// Cutoff `χ` and its gradient at `p`.
fn cutoff(mesh: &Mesh, p: [f64; 2], width: f64) -> (f64, [f64; 2]) {
    let mut chi = 1.0;
    let mut grad = [0.0; 2];
    for h in &mesh.holes {
        let dx = (h.x0 - p[0]).max(p[0] - h.x1).max(0.0);
        let dy = (h.y0 - p[1]).max(p[1] - h.y1).max(0.0);
        let d = dx.hypot(dy);
        let (s, ds) = smoothstep(d / width);
        let mut gd = [0.0; 2];
        if d > 0.0 && ds != 0.0 {
            let sx = if p[0] < h.x0 { -1.0 } else { 1.0 };
            let sy = if p[1] < h.y0 { -1.0 } else { 1.0 };
            gd = [sx * dx / d * ds / width, sy * dy / d * ds / width];
        }
        // product rule over holes
        grad = [grad[0] * s + chi * gd[0], grad[1] * s + chi * gd[1]];
        chi *= s;
    }
    (chi, grad)
}

impl VelocityField {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let values = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let f = parse_fields::<f64>(l, 2, i + 1)?;
                Ok([f[0], f[1]])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VelocityField::Nodal { values })
    }

    /// Nodal velocity on `mesh`.
    ///
    /// The gyre is `∇^⊥(χψ)` with `ψ = −sin(πx)sin(πy)/π`, which keeps it
    /// divergence-free while vanishing on the hole walls.
    pub fn nodal_values(&self, mesh: &Mesh) -> Result<Vec<[f64; 2]>> {
        let values = match self {
            VelocityField::Zero => vec![[0.0; 2]; mesh.n_nodes()],
            VelocityField::Nodal { values } => {
                check_len("velocity", mesh.n_nodes(), values.len())?;
                values.clone()
            }
            VelocityField::Gyre { cutoff: width } => {
                if !(*width > 0.0) {
                    return Err(OedError::InvalidParameter(format!("velocity cutoff must be positive, got {width}")));
                }
                let mut v: Vec<[f64; 2]> = mesh
                    .nodes
                    .iter()
                    .map(|&p| {
                        let (sx, cx) = (PI * p[0]).sin_cos();
                        let (sy, cy) = (PI * p[1]).sin_cos();
                        let psi = -sx * sy / PI;
                        let (chi, g) = cutoff(mesh, p, *width);
                        // (∂_y, −∂_x) of χψ
                        [chi * (-sx * cy) + psi * g[1], chi * (cx * sy) - psi * g[0]]
                    })
                    .collect();
                let peak = v.iter().map(|w| w[0].hypot(w[1])).fold(0.0, f64::max);
                if peak > 0.0 {
                    v.iter_mut().for_each(|w| *w = [w[0] / peak, w[1] / peak]);
                }
                v
            }
        };
        if let Some(i) = values.iter().position(|w| !(w[0].is_finite() && w[1].is_finite())) {
            return Err(OedError::InvalidParameter(format!("velocity is not finite at node {i}")));
        }
        Ok(values)
    }
}

/// Time discretization and diffusion settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    pub kappa: f64,
    pub final_time: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub allow_low_kappa: bool,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            kappa: 1e-3,
            final_time: 4.0,
            n_steps: 64,
            allow_low_kappa: false,
        }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || !(self.final_time > 0.0) || self.n_steps == 0 {
            return Err(OedError::InvalidParameter(format!(
                "transport needs kappa > 0, T > 0 and at least one step (got {self:?})"
            )));
        }
        if self.kappa < MIN_KAPPA && !self.allow_low_kappa {
            return Err(OedError::InvalidParameter(format!(
                "kappa = {} is below {MIN_KAPPA}; unstabilized advection needs allow_low_kappa",
                self.kappa
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.final_time / self.n_steps as f64
    }
}

/// Number of PDE solves performed so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SolveCounts {
    pub forward: usize,
    pub adjoint: usize,
}

#[derive(Debug)]
pub struct TransportOperators {
    config: TransportConfig,
    mass: CsrMatrix<f64>,
    mass_lu: BandLu,
    advection: CsrMatrix<f64>,
    step: CsrMatrix<f64>,
    step_lu: BandLu,
    forward_count: AtomicUsize,
    adjoint_count: AtomicUsize,
}

impl TransportOperators {
    pub fn new(mesh: &Mesh, fem: &FemOperators, velocity: &VelocityField, config: TransportConfig) -> Result<Self> {
        config.validate()?;
        let v = velocity.nodal_values(mesh)?;
        let advection = assemble_advection(mesh, &v)?;
        let dt = config.dt();
        let transport = linear_combination(config.kappa, &fem.stiffness, 1.0, &advection);
        let step = linear_combination(1.0, &fem.mass, dt, &transport);
        let step_lu = BandLu::factor(&step)?;
        let mass_lu = BandLu::factor(&fem.mass)?;
        Ok(Self {
            config,
            mass: fem.mass.clone(),
            mass_lu,
            advection,
            step,
            step_lu,
            forward_count: AtomicUsize::new(0),
            adjoint_count: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &TransportConfig {
        &self.config
    }

    pub fn n_steps(&self) -> usize {
        self.config.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.config.dt()
    }

    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }

    pub fn advection(&self) -> &CsrMatrix<f64> {
        &self.advection
    }

    /// The implicit-Euler step matrix `M + dt(κK + C)`.
    pub fn step_matrix(&self) -> &CsrMatrix<f64> {
        &self.step
    }

    pub fn counts(&self) -> SolveCounts {
        SolveCounts {
            forward: self.forward_count.load(Ordering::Relaxed),
            adjoint: self.adjoint_count.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counts(&self) {
        self.forward_count.store(0, Ordering::Relaxed);
        self.adjoint_count.store(0, Ordering::Relaxed);
    }

    /// Trajectory `u⁰ = m, …, u^{N_t}`.
    pub fn forward_solve(&self, m: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        check_len("initial condition", self.dim(), m.len())?;
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let mut traj = Vec::with_capacity(self.n_steps() + 1);
        traj.push(m.clone());
        for k in 0..self.n_steps() {
            let mut next = DVector::zeros(self.dim());
            spmv_into(&self.mass, traj[k].as_slice(), next.as_mut_slice());
            self.step_lu.solve_in_place(next.as_mut_slice());
            if next.iter().any(|x| !x.is_finite()) {
                return Err(OedError::NonFinite { step: k + 1 });
            }
            traj.push(next);
        }
        Ok(traj)
    }

    /// Euclidean transpose of the trajectory map: for loads `g_k` on each
    /// time level returns `Σ_k ((A⁻¹M)^k)ᵀ g_k`.
    pub fn transpose_solve(&self, loads: &[DVector<f64>]) -> Result<DVector<f64>> {
        check_len("adjoint loads", self.n_steps() + 1, loads.len())?;
        for g in loads {
            check_len("adjoint load", self.dim(), g.len())?;
        }
        self.adjoint_count.fetch_add(1, Ordering::Relaxed);
        let n = self.dim();
        let mut p = loads[self.n_steps()].clone();
        let mut tmp = vec![0.0; n];
        for k in (0..self.n_steps()).rev() {
            self.step_lu.solve_transpose_in_place(p.as_mut_slice());
            spmv_into(&self.mass, p.as_slice(), &mut tmp);
            p.as_mut_slice().copy_from_slice(&tmp);
            p += &loads[k];
            if p.iter().any(|x| !x.is_finite()) {
                return Err(OedError::NonFinite { step: k });
            }
        }
        Ok(p)
    }

    /// Adjoint in the mass-weighted inner product: `M⁻¹` applied to
    /// [`transpose_solve`](Self::transpose_solve).
    pub fn adjoint_solve(&self, loads: &[DVector<f64>]) -> Result<DVector<f64>> {
        Ok(self.mass_lu.solve(&self.transpose_solve(loads)?))
    }

    /// Total mass `1ᵀ M u`.
    pub fn total_mass(&self, u: &DVector<f64>) -> f64 {
        spmv(&self.mass, u).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble;
    use crate::mesh::{build_structured_mesh, default_holes};
    use crate::sparse::to_dense;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(res: usize, velocity: VelocityField, config: TransportConfig) -> (Mesh, FemOperators, TransportOperators) {
        let mesh = build_structured_mesh(res, &default_holes()).unwrap();
        let fem = assemble(&mesh).unwrap();
        let ops = TransportOperators::new(&mesh, &fem, &velocity, config).unwrap();
        (mesh, fem, ops)
    }

    fn short() -> TransportConfig {
        TransportConfig {
            n_steps: 8,
            ..Default::default()
        }
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn rejects_low_kappa_without_override() {
        let mut cfg = TransportConfig {
            kappa: 5e-5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.allow_low_kappa = true;
        assert!(cfg.validate().is_ok());
        assert!(TransportConfig { n_steps: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn gyre_is_finite_normalized_and_vanishes_on_holes() {
        let mesh = build_structured_mesh(16, &default_holes()).unwrap();
        let v = VelocityField::default().nodal_values(&mesh).unwrap();
        let peak = v.iter().map(|w| w[0].hypot(w[1])).fold(0.0, f64::max);
        assert!((peak - 1.0).abs() < 1e-14);
        for (p, w) in mesh.nodes.iter().zip(&v) {
            if mesh.holes.iter().any(|h| h.distance(*p) < 1e-12) {
                assert!(w[0].hypot(w[1]) < 1e-14);
            }
        }
    }

    #[test]
    fn gyre_is_divergence_free() {
        // central differences of the unnormalized field away from the hole walls
        let mesh = build_structured_mesh(8, &default_holes()).unwrap();
        let eval = |p: [f64; 2]| {
            let m = Mesh {
                nodes: vec![p],
                triangles: vec![],
                boundary: vec![],
                holes: mesh.holes.clone(),
            };
            let (sx, cx) = (PI * p[0]).sin_cos();
            let (sy, cy) = (PI * p[1]).sin_cos();
            let psi = -sx * sy / PI;
            let (chi, g) = cutoff(&m, p, 0.1);
            [chi * (-sx * cy) + psi * g[1], chi * (cx * sy) - psi * g[0]]
        };
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
            if mesh.holes.iter().any(|r| r.distance(p) < 0.01) {
                continue;
            }
            let div = (eval([p[0] + h, p[1]])[0] - eval([p[0] - h, p[1]])[0]
                + eval([p[0], p[1] + h])[1]
                - eval([p[0], p[1] - h])[1])
                / (2.0 * h);
            assert!(div.abs() < 1e-6, "divergence {div} at {p:?}");
        }
    }

    #[test]
    fn velocity_file_round_trip() {
        let v = VelocityField::from_text("0.5 -1\n\n2 3e-1\n").unwrap();
        assert_eq!(v, VelocityField::Nodal { values: vec![[0.5, -1.0], [2.0, 0.3]] });
        assert!(matches!(VelocityField::from_text("1 2 3\n"), Err(OedError::Parse { line: 1, .. })));
    }

    #[test]
    fn zero_and_constant_states() {
        let (_, fem, ops) = setup(7, VelocityField::Zero, short());
        let zero = ops.forward_solve(&DVector::zeros(fem.n)).unwrap();
        assert!(zero.iter().all(|u| u.amax() == 0.0));
        let one = ops.forward_solve(&DVector::from_element(fem.n, 1.0)).unwrap();
        assert_eq!(one.len(), 9);
        for u in &one {
            assert!((u.add_scalar(-1.0)).amax() < 1e-12);
        }
        // the gyre does not change the steady constant either
        let (_, fem, ops) = setup(7, VelocityField::default(), short());
        let one = ops.forward_solve(&DVector::from_element(fem.n, 1.0)).unwrap();
        assert!((one[8].add_scalar(-1.0)).amax() < 1e-10);
    }

    #[test]
    fn mass_is_conserved_under_divergence_free_flow() {
        let (_, fem, ops) = setup(10, VelocityField::default(), short());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random(fem.n, &mut rng);
        let traj = ops.forward_solve(&m).unwrap();
        // discrete budget: 1ᵀM(u^{k+1} − u^k) = −dt (Cᵀ1)ᵀ u^{k+1}, since K1 = 0
        let flux = crate::sparse::spmv_transpose(ops.advection(), &DVector::from_element(fem.n, 1.0));
        for k in 0..8 {
            let change = ops.total_mass(&traj[k + 1]) - ops.total_mass(&traj[k]);
            let expected = -ops.dt() * flux.dot(&traj[k + 1]);
            assert!((change - expected).abs() < 1e-14 * (1.0 + traj[k].amax()));
        }
        let (_, fem, ops) = setup(10, VelocityField::Zero, short());
        let traj = ops.forward_solve(&random(fem.n, &mut rng)).unwrap();
        let m0 = ops.total_mass(&traj[0]);
        for u in &traj {
            assert!((ops.total_mass(u) - m0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_dense_recursion() {
        let (_, fem, ops) = setup(6, VelocityField::Zero, short());
        let dt = ops.dt();
        let m = to_dense(&fem.mass);
        let a = &m + to_dense(&fem.stiffness) * (dt * 1e-3);
        let step = a.lu().solve(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u0 = random(fem.n, &mut rng);
        let traj = ops.forward_solve(&u0).unwrap();
        let mut u = u0.clone();
        for k in 1..=8 {
            u = &step * &u;
            assert!((&traj[k] - &u).norm() <= 1e-10 * u.norm());
        }
    }

    #[test]
    fn adjoint_identity() {
        let (_, fem, ops) = setup(7, VelocityField::default(), short());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let m = random(fem.n, &mut rng);
            let loads: Vec<_> = (0..=8).map(|_| random(fem.n, &mut rng)).collect();
            let traj = ops.forward_solve(&m).unwrap();
            let lhs: f64 = traj.iter().zip(&loads).map(|(u, g)| u.dot(g)).sum();
            let p = ops.adjoint_solve(&loads).unwrap();
            let rhs = crate::sparse::bilinear(&fem.mass, &m, &p);
            assert!((lhs - rhs).abs() <= 1e-11 * lhs.abs().max(1.0));
        }
        assert_eq!(ops.counts(), SolveCounts { forward: 5, adjoint: 5 });
        ops.reset_counts();
        assert_eq!(ops.counts(), SolveCounts::default());
    }

    #[test]
    fn single_final_load_matches_dense_transpose() {
        let (_, fem, ops) = setup(6, VelocityField::Zero, short());
        let m = to_dense(&fem.mass);
        let a = &m + to_dense(&fem.stiffness) * (ops.dt() * 1e-3);
        let step = a.lu().solve(&m).unwrap();
        let mut total = DMatrix::identity(fem.n, fem.n);
        for _ in 0..8 {
            total = &step * total;
        }
        let mut loads = vec![DVector::zeros(fem.n); 9];
        loads[8][3] = 1.0;
        let p = ops.transpose_solve(&loads).unwrap();
        let row = total.row(3).transpose();
        assert!((p - &row).amax() <= 1e-10 * row.amax());
        assert!(ops.transpose_solve(&vec![DVector::zeros(fem.n); 9]).unwrap().amax() == 0.0);
    }

    #[test]
    fn diffusion_stays_near_initial_range() {
        let (_, fem, ops) = setup(32, VelocityField::Zero, TransportConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = DVector::from_fn(fem.n, |_, _| rng.random::<f64>());
        let traj = ops.forward_solve(&m).unwrap();
        let (lo, hi) = (m.min(), m.max());
        let overshoot = traj
            .iter()
            .map(|u| (lo - u.min()).max(u.max() - hi))
            .fold(f64::MIN, f64::max);
        eprintln!("overshoot {overshoot:e}");
        assert!(overshoot <= 1e-8);
    }

    #[test]
    fn non_finite_state_is_reported() {
        let (_, fem, ops) = setup(6, VelocityField::Zero, short());
        let mut m = DVector::zeros(fem.n);
        m[0] = f64::NAN;
        assert!(matches!(ops.forward_solve(&m), Err(OedError::NonFinite { step: 1 })));
    }
}
