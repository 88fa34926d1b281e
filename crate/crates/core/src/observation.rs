//! Point observations in space and piecewise-linear interpolation in time.
//!
//! Observation vectors are time-major: entry `ℓ·Ns + j` is sensor `j` at
//! observation time `ℓ`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{check_len, OedError, Result};
use crate::mesh::{parse_fields, Location, Mesh, Rect};

/// Grid spacing giving about 120 candidates on the default domain.
pub const DEFAULT_SENSOR_SPACING: f64 = 1.0 / 12.0;
/// Minimum distance of a candidate sensor to a hole.
pub const DEFAULT_SENSOR_CLEARANCE: f64 = 0.02;

/// Cell-centred grid of spacing `spacing` over the unit square, without the
/// points closer than `clearance` to a hole.
pub fn default_sensor_grid(spacing: f64, holes: &[Rect], clearance: f64) -> Result<Vec<[f64; 2]>> {
    if !(spacing > 0.0 && spacing <= 1.0) || !(clearance >= 0.0) {
        return Err(OedError::InvalidParameter(format!(
            "sensor spacing must lie in (0, 1] and clearance be nonnegative (got {spacing}, {clearance})"
        )));
    }
    let count = (1.0 / spacing).floor() as usize;
    let offset = 0.5 * (1.0 - (count - 1) as f64 * spacing);
    let mut points = Vec::new();
    for iy in 0..count {
        for ix in 0..count {
            let p = [offset + ix as f64 * spacing, offset + iy as f64 * spacing];
            if holes.iter().all(|h| h.distance(p) > clearance) {
                points.push(p);
            }
        }
    }
    Ok(points)
}

/// `count` equally spaced times in `[start, end]`.
pub fn equispaced_times(start: f64, end: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![start],
        _ => (0..count)
            .map(|l| start + (end - start) * l as f64 / (count - 1) as f64)
            .collect(),
    }
}

pub fn read_sensor_file(path: &Path) -> Result<Vec<[f64; 2]>> {
    parse_sensors(&std::fs::read_to_string(path)?)
}

pub fn parse_sensors(text: &str) -> Result<Vec<[f64; 2]>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f = parse_fields::<f64>(l, 2, i + 1)?;
            Ok([f[0], f[1]])
        })
        .collect()
}

pub fn sensors_to_text(points: &[[f64; 2]]) -> String {
    let mut s = String::new();
    for p in points {
        let _ = writeln!(s, "{:?} {:?}", p[0], p[1]);
    }
    s
}

/// Interpolation of one observation time onto the time-step grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeWeights {
    pub step: usize,
    /// Weights on steps `step` and `step + 1`.
    pub weights: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct ObservationSetup {
    sensors: Vec<[f64; 2]>,
    locations: Vec<(Location, [usize; 3])>,
    times: Vec<f64>,
    time_weights: Vec<TimeWeights>,
    noise_std: Vec<f64>,
    n_steps: usize,
}

impl ObservationSetup {
    /// Locates the sensors and builds the time interpolation for a run of
    /// `n_steps` steps up to `final_time`. Noise is unit-variance.
    pub fn new(mesh: &Mesh, sensors: Vec<[f64; 2]>, times: Vec<f64>, final_time: f64, n_steps: usize) -> Result<Self> {
        if sensors.is_empty() || times.is_empty() {
            return Err(OedError::InvalidParameter("at least one sensor and one observation time are required".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(OedError::InvalidParameter("observation times must be strictly increasing".into()));
        }
        if times.iter().any(|t| !(*t >= 0.0 && *t <= final_time)) {
            return Err(OedError::InvalidParameter(format!("observation times must lie in [0, {final_time}]")));
        }
        if n_steps == 0 {
            return Err(OedError::InvalidParameter("at least one time step is required".into()));
        }
        let locations = sensors
            .iter()
            .map(|&p| {
                let loc = mesh.locate(p)?;
                Ok((loc, mesh.triangles[loc.triangle]))
            })
            .collect::<Result<Vec<_>>>()?;
        let dt = final_time / n_steps as f64;
        let time_weights = times
            .iter()
            .map(|&t| {
                let s = t / dt;
                let step = (s.floor() as usize).min(n_steps - 1);
                let theta = (s - step as f64).clamp(0.0, 1.0);
                TimeWeights {
                    step,
                    weights: [1.0 - theta, theta],
                }
            })
            .collect();
        let ns = sensors.len();
        Ok(Self {
            sensors,
            locations,
            times,
            time_weights,
            noise_std: vec![1.0; ns],
            n_steps,
        })
    }

    /// Per-sensor noise standard deviations (diagonal noise covariance).
    pub fn with_noise(mut self, noise_std: Vec<f64>) -> Result<Self> {
        check_len("noise standard deviations", self.n_sensors(), noise_std.len())?;
        if let Some(i) = noise_std.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(OedError::InvalidParameter(format!("noise standard deviation {i} must be positive")));
        }
        self.noise_std = noise_std;
        Ok(self)
    }

    pub fn sensors(&self) -> &[[f64; 2]] {
        &self.sensors
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time_weights(&self) -> &[TimeWeights] {
        &self.time_weights
    }

    pub fn noise_std(&self) -> &[f64] {
        &self.noise_std
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Observation dimension `q = Ns·Nτ`.
    pub fn dim(&self) -> usize {
        self.n_sensors() * self.n_times()
    }

    pub fn index(&self, sensor: usize, time: usize) -> usize {
        time * self.n_sensors() + sensor
    }

    /// Inverse of [`index`](Self::index): `(sensor, time)`.
    pub fn split_index(&self, flat: usize) -> (usize, usize) {
        (flat % self.n_sensors(), flat / self.n_sensors())
    }

    /// Expands per-sensor values to the time-major observation layout.
    pub fn expand(&self, per_sensor: &[f64]) -> DVector<f64> {
        let ns = self.n_sensors();
        DVector::from_fn(self.dim(), |i, _| per_sensor[i % ns])
    }

    fn point_value(&self, j: usize, u: &DVector<f64>) -> f64 {
        let (loc, nodes) = &self.locations[j];
        (0..3).map(|a| loc.barycentric[a] * u[nodes[a]]).sum()
    }

    /// Samples a trajectory of `n_steps + 1` states.
    pub fn observe(&self, trajectory: &[DVector<f64>]) -> Result<DVector<f64>> {
        check_len("trajectory", self.n_steps + 1, trajectory.len())?;
        let ns = self.n_sensors();
        let mut d = DVector::zeros(self.dim());
        for (l, tw) in self.time_weights.iter().enumerate() {
            for j in 0..ns {
                d[l * ns + j] = tw.weights[0] * self.point_value(j, &trajectory[tw.step])
                    + tw.weights[1] * self.point_value(j, &trajectory[tw.step + 1]);
            }
        }
        Ok(d)
    }

    /// Transpose of [`observe`](Self::observe): nodal loads on each time level.
    pub fn scatter(&self, d: &DVector<f64>, n_nodes: usize) -> Result<Vec<DVector<f64>>> {
        check_len("observation vector", self.dim(), d.len())?;
        let ns = self.n_sensors();
        let mut loads = vec![DVector::zeros(n_nodes); self.n_steps + 1];
        for (l, tw) in self.time_weights.iter().enumerate() {
            for j in 0..ns {
                let (loc, nodes) = &self.locations[j];
                let value = d[l * ns + j];
                for (s, w) in tw.weights.iter().enumerate() {
                    for a in 0..3 {
                        loads[tw.step + s][nodes[a]] += w * loc.barycentric[a] * value;
                    }
                }
            }
        }
        Ok(loads)
    }
}
