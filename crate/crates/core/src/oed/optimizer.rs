//! L-BFGS-B for box constraints `0 ≤ w ≤ 1`.
//!
//! Each iteration finds the generalized Cauchy point of the limited-memory
//! model along the projected gradient path, minimizes the model over the
//! variables still free there, and backtracks along the resulting direction.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    /// Stop once the projected-gradient norm fell by this factor.
    pub grad_reduction: f64,
    pub memory: usize,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Primal-dual interior-point iteration instead of gradient projection.
    #[serde(default)]
    pub barrier: Option<BarrierConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierConfig {
    /// Initial barrier weight relative to the largest initial gradient entry.
    pub mu0: f64,
    /// Linear reduction factor for `μ`; the update is `min(shrink·μ, μ^1.5)`.
    pub shrink: f64,
    /// The barrier subproblem counts as solved once its error is below `kappa·μ`.
    pub kappa: f64,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self {
            mu0: 0.1,
            shrink: 0.2,
            kappa: 10.0,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iter: 150,
            grad_reduction: 1e4,
            memory: 10,
            armijo: 1e-4,
            max_backtracks: 40,
            barrier: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

/// Objective, penalty (already scaled by `γ`) and the gradient of their sum.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    pub penalty: f64,
    pub gradient: DVector<f64>,
}

impl Evaluation {
    pub fn total(&self) -> f64 {
        self.objective + self.penalty
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub objective: f64,
    pub penalty: f64,
    pub projected_grad_norm: f64,
    pub n_active_sensors: usize,
}

#[derive(Debug, Clone)]
pub struct OptimizerResult {
    pub w: Vec<f64>,
    pub objective: f64,
    pub penalty: f64,
    pub status: Status,
    pub iterations: usize,
    pub log: Vec<IterationLog>,
}

/// Relative weight above which a sensor counts as active.
pub const ACTIVE_THRESHOLD: f64 = 4e-3;

pub fn count_active(w: &[f64]) -> usize {
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    w.iter().filter(|&&x| x / total > ACTIVE_THRESHOLD).count()
}

/// Norm of the gradient with outward-pointing components at active bounds removed.
fn projected_gradient(w: &[f64], g: &DVector<f64>, lo: f64, hi: f64) -> f64 {
    w.iter()
        .zip(g.iter())
        .filter(|(&x, &gi)| !((x <= lo && gi > 0.0) || (x >= hi && gi < 0.0)))
        .map(|(_, gi)| gi * gi)
        .sum::<f64>()
        .sqrt()
}

/// Minimizes `eval(w)` over `[0, 1]ⁿ` starting from `w0`.
pub fn minimize<F>(eval: F, w0: &[f64], config: &OptimizerConfig) -> Result<OptimizerResult>
where
    F: Fn(&[f64]) -> Result<Evaluation>,
{
    match config.barrier {
        None => minimize_box(&eval, w0, config, 0.0, 1.0, None),
        Some(b) => minimize_interior(&eval, w0, config, &b),
    }
}

/// Primal-dual interior-point iteration with a damped dense BFGS model of
/// the objective Hessian. Bound multipliers are kept explicitly; the barrier
/// weight shrinks once the barrier subproblem is solved to `kappa·μ`.
fn minimize_interior<F>(eval: &F, w0: &[f64], config: &OptimizerConfig, b: &BarrierConfig) -> Result<OptimizerResult>
where
    F: Fn(&[f64]) -> Result<Evaluation>,
{
    let n = w0.len();
    let mut w: Vec<f64> = w0.iter().map(|x| x.clamp(1e-2, 1.0 - 1e-2)).collect();
    let mut cur = eval(&w)?;
    let start: Vec<f64> = w0.iter().map(|x| x.clamp(0.0, 1.0)).collect();
    let first = eval(&start)?;
    let target = projected_gradient(&start, &first.gradient, 0.0, 1.0) / config.grad_reduction;
    let scale = cur.gradient.amax().max(1.0);
    let mu_floor = target / (10.0 * (2.0 * n as f64).sqrt());
    let mut mu_rel = b.mu0;
    let mut mu = (mu_rel * scale).max(mu_floor);
    let mut zl = DVector::from_fn(n, |i, _| mu / w[i]);
    let mut zu = DVector::from_fn(n, |i, _| mu / (1.0 - w[i]));
    let mut hess = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;

    let kkt = |w: &[f64], g: &DVector<f64>, zl: &DVector<f64>, zu: &DVector<f64>| {
        let stat = (g - zl + zu).norm();
        let comp = (0..n)
            .map(|i| (w[i] * zl[i]).powi(2) + ((1.0 - w[i]) * zu[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        (stat, comp)
    };
    let entry = |iter, e: &Evaluation, w: &[f64], stat| IterationLog {
        iter,
        objective: e.objective,
        penalty: e.penalty,
        projected_grad_norm: stat,
        n_active_sensors: count_active(w),
    };
    let mut log = vec![entry(0, &cur, &w, kkt(&w, &cur.gradient, &zl, &zu).0)];
    let mut status = Status::MaxIterations;
    let mut iter = 0;
    loop {
        let (stat, comp) = kkt(&w, &cur.gradient, &zl, &zu);
        if stat <= target && comp <= target {
            status = Status::Converged;
            break;
        }
        // barrier subproblem error; shrink μ (possibly repeatedly) once it is small
        loop {
            let err = (0..n)
                .map(|i| {
                    let s = (cur.gradient[i] - zl[i] + zu[i]).abs();
                    let cl = (w[i] * zl[i] - mu).abs();
                    let cu = ((1.0 - w[i]) * zu[i] - mu).abs();
                    s.max(cl).max(cu)
                })
                .fold(0.0, f64::max);
            if err > b.kappa * mu || mu <= mu_floor {
                break;
            }
            mu_rel = (b.shrink * mu_rel).min(mu_rel.powf(1.5));
            mu = (mu_rel * scale).max(mu_floor);
        }
        if iter >= config.max_iter {
            break;
        }

        let sigma = DVector::from_fn(n, |i, _| zl[i] / w[i] + zu[i] / (1.0 - w[i]));
        let rhs = DVector::from_fn(n, |i, _| -(cur.gradient[i] - mu / w[i] + mu / (1.0 - w[i])));
        let mut kmat = hess.clone();
        for i in 0..n {
            kmat[(i, i)] += sigma[i];
        }
        let dw = match kmat.cholesky() {
            Some(c) => c.solve(&rhs),
            None => DVector::from_fn(n, |i, _| rhs[i] / (hess[(i, i)].abs() + sigma[i])),
        };
        let dzl = DVector::from_fn(n, |i, _| mu / w[i] - zl[i] - zl[i] / w[i] * dw[i]);
        let dzu = DVector::from_fn(n, |i, _| mu / (1.0 - w[i]) - zu[i] + zu[i] / (1.0 - w[i]) * dw[i]);

        let tau = (1.0 - mu_rel).max(0.99);
        let mut alpha_p: f64 = 1.0;
        for i in 0..n {
            if dw[i] < 0.0 {
                alpha_p = alpha_p.min(-tau * w[i] / dw[i]);
            } else if dw[i] > 0.0 {
                alpha_p = alpha_p.min(tau * (1.0 - w[i]) / dw[i]);
            }
        }
        let mut alpha_d: f64 = 1.0;
        for (z, dz) in [(&zl, &dzl), (&zu, &dzu)] {
            for i in 0..n {
                if dz[i] < 0.0 {
                    alpha_d = alpha_d.min(-tau * z[i] / dz[i]);
                }
            }
        }

        let barrier = |x: &[f64], e: &Evaluation| e.total() - mu * x.iter().map(|v| v.ln() + (1.0 - v).ln()).sum::<f64>();
        let phi0 = barrier(&w, &cur);
        let slope = -rhs.dot(&dw);
        let mut alpha = alpha_p;
        let mut accepted = None;
        for _ in 0..config.max_backtracks {
            let trial: Vec<f64> = (0..n).map(|i| w[i] + alpha * dw[i]).collect();
            let e = eval(&trial)?;
            let phi = barrier(&trial, &e);
            if phi.is_finite() && phi <= phi0 + config.armijo * alpha * slope.min(0.0) {
                accepted = Some((trial, e));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, e)) = accepted else {
            status = Status::LineSearchFailed;
            break;
        };
        zl += &dzl * alpha_d;
        zu += &dzu * alpha_d;
        for i in 0..n {
            // keep multipliers within a factor of the primal-dual centre
            let (cl, cu) = (mu / next[i], mu / (1.0 - next[i]));
            zl[i] = zl[i].clamp(cl / 1e10, cl * 1e10);
            zu[i] = zu[i].clamp(cu / 1e10, cu * 1e10);
        }

        let s = DVector::from_fn(n, |i, _| next[i] - w[i]);
        let y = &e.gradient - &cur.gradient;
        damped_bfgs(&mut hess, &s, &y, &mut scaled);
        w = next;
        cur = e;
        iter += 1;
        log.push(entry(iter, &cur, &w, kkt(&w, &cur.gradient, &zl, &zu).0));
    }
    Ok(OptimizerResult {
        w,
        objective: cur.objective,
        penalty: cur.penalty,
        status,
        iterations: iter,
        log,
    })
}

/// Powell-damped BFGS update; the first usable pair also rescales the identity.
fn damped_bfgs(hess: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>, scaled: &mut bool) {
    let ss = s.dot(s);
    if !(ss > 0.0) {
        return;
    }
    let sy = s.dot(y);
    if !*scaled && sy > 0.0 {
        *hess *= y.dot(y) / sy;
        *scaled = true;
    }
    let bs = &*hess * s;
    let sbs = s.dot(&bs);
    if !(sbs > 0.0) {
        return;
    }
    let r = if sy >= 0.2 * sbs {
        y.clone()
    } else {
        let t = 0.8 * sbs / (sbs - sy);
        y * t + &bs * (1.0 - t)
    };
    let sr = s.dot(&r);
    if !(sr > 0.0) {
        return;
    }
    hess.ger(1.0 / sr, &r, &r, 1.0);
    hess.ger(-1.0 / sbs, &bs, &bs, 1.0);
}

/// Limited-memory pairs in compact form `B = θI − W M Wᵀ` with `W = [Y  θS]`.
struct Memory {
    s: VecDeque<DVector<f64>>,
    y: VecDeque<DVector<f64>>,
    cap: usize,
    theta: f64,
    w: DMatrix<f64>,
    m: DMatrix<f64>,
}

impl Memory {
    fn new(n: usize, cap: usize) -> Self {
        Self {
            s: VecDeque::new(),
            y: VecDeque::new(),
            cap,
            theta: 1.0,
            w: DMatrix::zeros(n, 0),
            m: DMatrix::zeros(0, 0),
        }
    }

    fn clear(&mut self) {
        let n = self.w.nrows();
        *self = Self::new(n, self.cap);
    }

    /// Skips pairs with too little curvature; returns whether the pair was kept.
    fn push(&mut self, s: DVector<f64>, y: DVector<f64>) -> bool {
        let sy = s.dot(&y);
        let yy = y.dot(&y);
        if !(sy > f64::EPSILON * yy) || self.cap == 0 {
            return false;
        }
        if self.s.len() == self.cap {
            self.s.pop_front();
            self.y.pop_front();
        }
        self.theta = yy / sy;
        self.s.push_back(s);
        self.y.push_back(y);
        self.rebuild()
    }

    fn rebuild(&mut self) -> bool {
        let k = self.s.len();
        let n = self.w.nrows();
        let mut w = DMatrix::zeros(n, 2 * k);
        for j in 0..k {
            w.set_column(j, &self.y[j]);
            w.set_column(k + j, &(&self.s[j] * self.theta));
        }
        let mut mid = DMatrix::zeros(2 * k, 2 * k);
        for i in 0..k {
            mid[(i, i)] = -self.s[i].dot(&self.y[i]);
            for j in 0..k {
                if i > j {
                    let l = self.s[i].dot(&self.y[j]);
                    mid[(k + i, j)] = l;
                    mid[(j, k + i)] = l;
                }
                mid[(k + i, k + j)] = self.theta * self.s[i].dot(&self.s[j]);
            }
        }
        match mid.try_inverse() {
            Some(m) => {
                self.w = w;
                self.m = m;
                true
            }
            None => {
                self.clear();
                false
            }
        }
    }
}

/// Generalized Cauchy point of the quadratic model along the projected
/// steepest-descent path. Returns the point and `c = Wᵀ(x_cp − x)`.
fn cauchy_point(x: &[f64], g: &DVector<f64>, lo: f64, hi: f64, mem: &Memory) -> (Vec<f64>, DVector<f64>) {
    let n = x.len();
    let theta = mem.theta;
    let k2 = mem.w.ncols();
    let mut t = vec![f64::INFINITY; n];
    let mut d = vec![0.0; n];
    for i in 0..n {
        if g[i] < 0.0 {
            t[i] = (x[i] - hi) / g[i];
        } else if g[i] > 0.0 {
            t[i] = (x[i] - lo) / g[i];
        }
        if t[i] > 0.0 {
            d[i] = -g[i];
        }
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| t[i] > 0.0 && t[i].is_finite()).collect();
    order.sort_by(|&a, &b| t[a].total_cmp(&t[b]));

    let dvec = DVector::from_column_slice(&d);
    let mut p = mem.w.tr_mul(&dvec);
    let mut c = DVector::zeros(k2);
    let mut f1 = -dvec.dot(&dvec);
    let mut f2 = -theta * f1 - p.dot(&(&mem.m * &p));
    let mut xcp = x.to_vec();
    if f1 >= 0.0 {
        return (xcp, c);
    }
    let mut dt_min = -f1 / f2.max(f64::MIN_POSITIVE);
    let mut t_old = 0.0;
    let mut next = 0;
    while next < order.len() {
        let b = order[next];
        let dt = t[b] - t_old;
        if dt_min < dt {
            break;
        }
        let xb = if d[b] > 0.0 { hi } else { lo };
        let zb = xb - x[b];
        xcp[b] = xb;
        c += &p * dt;
        let wb = mem.w.row(b).transpose();
        let mwb = &mem.m * &wb;
        let gb = g[b];
        f1 += dt * f2 + gb * gb + theta * gb * zb - gb * mwb.dot(&c);
        f2 += -theta * gb * gb - 2.0 * gb * mwb.dot(&p) - gb * gb * mwb.dot(&wb);
        p += &wb * gb;
        d[b] = 0.0;
        t_old = t[b];
        next += 1;
        dt_min = -f1 / f2.max(f64::MIN_POSITIVE);
    }
    let dt_min = dt_min.max(0.0);
    let t_end = t_old + dt_min;
    for &i in &order[next..] {
        xcp[i] = x[i] + t_end * d[i];
    }
    for i in 0..n {
        if t[i].is_infinite() {
            xcp[i] = x[i];
        }
    }
    c += &p * dt_min;
    (xcp, c)
}

/// Minimizes the quadratic model over the variables left free at the
/// Cauchy point, then projects back onto the box.
fn subspace_step(x: &[f64], g: &DVector<f64>, xcp: &[f64], c: &DVector<f64>, lo: f64, hi: f64, mem: &Memory) -> Vec<f64> {
    let free: Vec<usize> = (0..x.len()).filter(|&i| xcp[i] > lo && xcp[i] < hi).collect();
    if free.is_empty() || mem.w.ncols() == 0 {
        return xcp.to_vec();
    }
    let theta = mem.theta;
    let k2 = mem.w.ncols();
    let mc = &mem.m * c;
    let wz = DMatrix::from_fn(free.len(), k2, |r, j| mem.w[(free[r], j)]);
    let r = DVector::from_fn(free.len(), |r, _| {
        let i = free[r];
        g[i] + theta * (xcp[i] - x[i]) - mem.w.row(i).dot(&mc.transpose())
    });
    let v = &mem.m * wz.tr_mul(&r);
    let nmat = DMatrix::identity(k2, k2) - (&mem.m * wz.tr_mul(&wz)) / theta;
    let Some(v) = nmat.lu().solve(&v) else {
        return xcp.to_vec();
    };
    let du = -&r / theta - (&wz * v) / (theta * theta);
    let mut out = xcp.to_vec();
    for (k, &i) in free.iter().enumerate() {
        out[i] = (xcp[i] + du[k]).clamp(lo, hi);
    }
    out
}

fn minimize_box<F>(
    eval: &F,
    w0: &[f64],
    config: &OptimizerConfig,
    lo: f64,
    hi: f64,
    target: Option<f64>,
) -> Result<OptimizerResult>
where
    F: Fn(&[f64]) -> Result<Evaluation>,
{
    let n = w0.len();
    let mut w: Vec<f64> = w0.iter().map(|x| x.clamp(lo, hi)).collect();
    let mut cur = eval(&w)?;
    let pg0 = projected_gradient(&w, &cur.gradient, lo, hi);
    let target = target.unwrap_or(pg0 / config.grad_reduction);
    let mut mem = Memory::new(n, config.memory);
    let mut log = vec![IterationLog {
        iter: 0,
        objective: cur.objective,
        penalty: cur.penalty,
        projected_grad_norm: pg0,
        n_active_sensors: count_active(&w),
    }];
    let mut status = Status::MaxIterations;
    let mut iter = 0;
    while iter < config.max_iter {
        let pg = log.last().map(|l| l.projected_grad_norm).unwrap_or(pg0);
        if pg <= target || pg == 0.0 {
            status = Status::Converged;
            break;
        }
        let mut accepted = None;
        for attempt in 0..2 {
            let (xcp, c) = cauchy_point(&w, &cur.gradient, lo, hi, &mem);
            let mut xbar = subspace_step(&w, &cur.gradient, &xcp, &c, lo, hi, &mem);
            let mut dir = DVector::from_fn(n, |i, _| xbar[i] - w[i]);
            if dir.dot(&cur.gradient) >= 0.0 {
                xbar = xcp;
                dir = DVector::from_fn(n, |i, _| xbar[i] - w[i]);
            }
            let slope = dir.dot(&cur.gradient);
            if slope < 0.0 {
                let mut alpha = if mem.s.is_empty() { (1.0 / dir.norm()).min(1.0) } else { 1.0 };
                for _ in 0..config.max_backtracks {
                    let trial: Vec<f64> = (0..n).map(|i| (w[i] + alpha * dir[i]).clamp(lo, hi)).collect();
                    let e = eval(&trial)?;
                    if e.total().is_finite() && e.total() <= cur.total() + config.armijo * alpha * slope {
                        accepted = Some((trial, e));
                        break;
                    }
                    alpha *= 0.5;
                }
            }
            if accepted.is_some() || attempt == 1 || mem.s.is_empty() {
                break;
            }
            mem.clear();
        }
        let Some((next, e)) = accepted else {
            status = Status::LineSearchFailed;
            break;
        };
        let s = DVector::from_fn(n, |i, _| next[i] - w[i]);
        let y = &e.gradient - &cur.gradient;
        mem.push(s, y);
        w = next;
        cur = e;
        iter += 1;
        log.push(IterationLog {
            iter,
            objective: cur.objective,
            penalty: cur.penalty,
            projected_grad_norm: projected_gradient(&w, &cur.gradient, lo, hi),
            n_active_sensors: count_active(&w),
        });
    }
    if status == Status::MaxIterations && log.last().is_some_and(|l| l.projected_grad_norm <= target) {
        status = Status::Converged;
    }
    Ok(OptimizerResult {
        w,
        objective: cur.objective,
        penalty: cur.penalty,
        status,
        iterations: iter,
        log,
    })
}
