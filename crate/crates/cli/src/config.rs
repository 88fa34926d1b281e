//! Experiment configuration: a TOML file with one table per stage.
//!
//! Every field has a default, so an empty file describes the default 2D
//! problem. Seeds left unset are derived from the top-level `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use oed_core::mesh::{build_structured_mesh, default_holes, Mesh, Rect};
use oed_core::model::{Model, ModelSettings};
use oed_core::observation::{default_sensor_grid, equispaced_times, read_sensor_file};
use oed_core::oed::{ContinuationConfig, OptimizerConfig, TraceEstimatorSet};
use oed_core::oed::optimizer::BarrierConfig;
use oed_core::surrogate::SurrogateConfig;
use oed_core::transport::{TransportConfig, VelocityField};
use oed_core::whitening::{WhiteningMode, WhiteningOperator};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OedConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub mesh: MeshSection,
    pub prior: PriorSection,
    pub transport: TransportSection,
    pub observation: ObservationSection,
    pub whitening: WhiteningSection,
    pub surrogate: SurrogateSection,
    pub estimator: EstimatorSection,
    pub penalty: PenaltySection,
    pub optimizer: OptimizerSection,
    pub spectrum: SpectrumSection,
    pub compare: CompareSection,
    pub trace_study: TraceStudySection,
    pub rank_study: RankStudySection,
}

impl Default for OedConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            mesh: MeshSection::default(),
            prior: PriorSection::default(),
            transport: TransportSection::default(),
            observation: ObservationSection::default(),
            whitening: WhiteningSection::default(),
            surrogate: SurrogateSection::default(),
            estimator: EstimatorSection::default(),
            penalty: PenaltySection::default(),
            optimizer: OptimizerSection::default(),
            spectrum: SpectrumSection::default(),
            compare: CompareSection::default(),
            trace_study: TraceStudySection::default(),
            rank_study: RankStudySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSection {
    pub resolution: usize,
    pub holes: Vec<Rect>,
    /// Mesh file; replaces `resolution` and `holes` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for MeshSection {
    fn default() -> Self {
        Self {
            resolution: oed_core::DEFAULT_RESOLUTION,
            holes: default_holes(),
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self { alpha: 8e-3, beta: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    pub kappa: f64,
    pub final_time: f64,
    pub n_steps: usize,
    pub allow_low_kappa: bool,
    pub velocity: VelocityField,
    /// Nodal velocity file; replaces `velocity` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub velocity_file: Option<PathBuf>,
}

impl Default for TransportSection {
    fn default() -> Self {
        let t = TransportConfig::default();
        Self {
            kappa: t.kappa,
            final_time: t.final_time,
            n_steps: t.n_steps,
            allow_low_kappa: t.allow_low_kappa,
            velocity: VelocityField::default(),
            velocity_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationSection {
    pub spacing: f64,
    pub clearance: f64,
    /// Sensor file with one `x y` pair per line; replaces the grid when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensor_file: Option<PathBuf>,
    pub n_times: usize,
    pub window: [f64; 2],
    pub noise_std: f64,
}

impl Default for ObservationSection {
    fn default() -> Self {
        Self {
            spacing: oed_core::observation::DEFAULT_SENSOR_SPACING,
            clearance: oed_core::observation::DEFAULT_SENSOR_CLEARANCE,
            sensor_file: None,
            n_times: 19,
            window: [1.0, 4.0],
            noise_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhiteningChoice {
    Auto,
    Dense,
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WhiteningSection {
    pub mode: WhiteningChoice,
    pub degree: usize,
}

impl Default for WhiteningSection {
    fn default() -> Self {
        Self {
            mode: WhiteningChoice::Auto,
            degree: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSection {
    pub rank: usize,
    pub oversampling: usize,
    pub power_iterations: usize,
    pub residual_probes: usize,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        let s = SurrogateConfig::default();
        Self {
            rank: s.rank,
            oversampling: s.oversampling,
            power_iterations: s.power_iterations,
            residual_probes: s.residual_probes,
            tolerance: s.tolerance,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    pub n_tr: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self { n_tr: 100, seed: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// Plain ℓ1 design.
    L1,
    /// ℓ1 warm start followed by `Φ_ε` continuation.
    PhiEps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltySection {
    pub kind: PenaltyKind,
    /// Defaults to 0.05 for `phi_eps` and 60 for `l1`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Continuation uses `ε_i = eps_ratio^i` for `i = 1..=eps_count`.
    pub eps_count: usize,
    pub eps_ratio: f64,
    pub binary_tol: f64,
    pub initial_weight: f64,
}

impl Default for PenaltySection {
    fn default() -> Self {
        Self {
            kind: PenaltyKind::PhiEps,
            gamma: None,
            eps_count: 10,
            eps_ratio: 2.0 / 3.0,
            binary_tol: 1e-3,
            initial_weight: 0.5,
        }
    }
}

impl PenaltySection {
    pub fn default_gamma(kind: PenaltyKind) -> f64 {
        match kind {
            PenaltyKind::L1 => 60.0,
            PenaltyKind::PhiEps => 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub max_iter: usize,
    pub grad_reduction: f64,
    pub memory: usize,
    /// Primal-dual interior-point iteration instead of L-BFGS-B.
    pub interior_point: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            max_iter: o.max_iter,
            grad_reduction: o.grad_reduction,
            memory: o.memory,
            interior_point: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSection {
    /// Extra sensor-grid spacings for the refinement sweep.
    pub sensor_spacings: Vec<f64>,
    /// Singular values below `rank_tol·σ₁` do not count towards the numerical rank.
    pub rank_tol: f64,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        Self {
            sensor_spacings: Vec::new(),
            rank_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    /// Dense posterior when `n` allows it, else the surrogate.
    Auto,
    Dense,
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub n_random: usize,
    /// Further sensor counts at which ℓ1, random and uniform designs are compared.
    pub sensor_counts: Vec<usize>,
    pub exact: TraceMode,
    pub gamma_bracket: [f64; 2],
    pub bisect_iter: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            n_random: 20,
            sensor_counts: Vec::new(),
            exact: TraceMode::Auto,
            gamma_bracket: [1e-3, 1e3],
            bisect_iter: 40,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyDesign {
    /// The continuation design of the `design` command.
    Optimal,
    /// All weights one half.
    Half,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceStudySection {
    pub n_tr: Vec<usize>,
    pub repetitions: usize,
    pub design: StudyDesign,
}

impl Default for TraceStudySection {
    fn default() -> Self {
        Self {
            n_tr: vec![1, 5, 10, 20, 100],
            repetitions: 30,
            design: StudyDesign::Optimal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankStudySection {
    pub ranks: Vec<usize>,
    pub gamma: f64,
}

impl Default for RankStudySection {
    fn default() -> Self {
        Self {
            ranks: vec![10, 20, 40, 60, 80],
            gamma: 50.0,
        }
    }
}

/// Seeds after defaults are filled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub surrogate: u64,
    pub estimator: u64,
    pub compare: u64,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl OedConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Applies `section.key=value`; the value is read as TOML, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Override(assignment.to_string()))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(CliError::Override(assignment.to_string()));
        }
        let mut root = toml::Value::try_from(&*self)?;
        let mut node = &mut root;
        for part in &path[..path.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| CliError::Override(assignment.to_string()))?;
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        node.as_table_mut()
            .ok_or_else(|| CliError::Override(assignment.to_string()))?
            .insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
        *self = root.try_into()?;
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            surrogate: self.surrogate.seed.unwrap_or(self.seed),
            estimator: self.estimator.seed.unwrap_or(self.seed.wrapping_add(1)),
            compare: self.compare.seed.unwrap_or(self.seed.wrapping_add(2)),
        }
    }

    pub fn gamma(&self) -> f64 {
        self.penalty.gamma.unwrap_or(PenaltySection::default_gamma(self.penalty.kind))
    }

    /// Fills derived defaults and checks ranges.
    pub fn resolve(mut self) -> Result<Self> {
        let seeds = self.seeds();
        self.surrogate.seed = Some(seeds.surrogate);
        self.estimator.seed = Some(seeds.estimator);
        self.compare.seed = Some(seeds.compare);
        self.penalty.gamma = Some(self.gamma());
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("prior.alpha", self.prior.alpha),
            ("prior.beta", self.prior.beta),
            ("transport.kappa", self.transport.kappa),
            ("transport.final_time", self.transport.final_time),
            ("observation.spacing", self.observation.spacing),
            ("observation.noise_std", self.observation.noise_std),
            ("optimizer.grad_reduction", self.optimizer.grad_reduction),
            ("penalty.eps_ratio", self.penalty.eps_ratio),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.transport.n_steps == 0 || self.observation.n_times == 0 {
            return Err(invalid("transport.n_steps and observation.n_times must be at least 1"));
        }
        let [t0, t1] = self.observation.window;
        if !(0.0 <= t0 && t0 <= t1 && t1 <= self.transport.final_time) {
            return Err(invalid(format!(
                "observation window [{t0}, {t1}] must lie in [0, {}]",
                self.transport.final_time
            )));
        }
        if self.mesh.file.is_none() && self.mesh.resolution < 2 {
            return Err(invalid("mesh.resolution must be at least 2"));
        }
        if self.surrogate.rank == 0 || self.estimator.n_tr == 0 {
            return Err(invalid("surrogate.rank and estimator.n_tr must be at least 1"));
        }
        if !(self.penalty.eps_ratio < 1.0) {
            return Err(invalid("penalty.eps_ratio must lie in (0, 1)"));
        }
        if !(self.gamma() >= 0.0) {
            return Err(invalid("penalty.gamma must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.penalty.initial_weight) {
            return Err(invalid("penalty.initial_weight must lie in [0, 1]"));
        }
        let [lo, hi] = self.compare.gamma_bracket;
        if !(lo > 0.0 && hi > lo) {
            return Err(invalid("compare.gamma_bracket must satisfy 0 < lo < hi"));
        }
        if self.trace_study.n_tr.contains(&0) || self.trace_study.repetitions == 0 {
            return Err(invalid("trace_study needs positive probe counts and repetitions"));
        }
        if self.rank_study.ranks.contains(&0) || !(self.rank_study.gamma >= 0.0) {
            return Err(invalid("rank_study needs positive ranks and a nonnegative gamma"));
        }
        if self.spectrum.sensor_spacings.iter().any(|&h| !(h > 0.0 && h <= 1.0)) {
            return Err(invalid("spectrum.sensor_spacings must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn build_mesh(&self) -> Result<Mesh> {
        Ok(match &self.mesh.file {
            Some(path) => Mesh::read(path)?,
            None => build_structured_mesh(self.mesh.resolution, &self.mesh.holes)?,
        })
    }

    pub fn sensors(&self, mesh: &Mesh, spacing: f64) -> Result<Vec<[f64; 2]>> {
        Ok(match &self.observation.sensor_file {
            Some(path) => read_sensor_file(path)?,
            None => default_sensor_grid(spacing, &mesh.holes, self.observation.clearance)?,
        })
    }

    pub fn model_settings(&self, n_sensors: usize) -> Result<ModelSettings> {
        let velocity = match &self.transport.velocity_file {
            Some(path) => VelocityField::read(path)?,
            None => self.transport.velocity.clone(),
        };
        let [t0, t1] = self.observation.window;
        Ok(ModelSettings {
            alpha: self.prior.alpha,
            beta: self.prior.beta,
            velocity,
            transport: TransportConfig {
                kappa: self.transport.kappa,
                final_time: self.transport.final_time,
                n_steps: self.transport.n_steps,
                allow_low_kappa: self.transport.allow_low_kappa,
            },
            times: equispaced_times(t0, t1, self.observation.n_times),
            noise_std: Some(vec![self.observation.noise_std; n_sensors]),
            whitening: match self.whitening.mode {
                WhiteningChoice::Auto => None,
                WhiteningChoice::Dense => Some(WhiteningMode::Dense),
                WhiteningChoice::Iterative => Some(WhiteningMode::iterative(self.whitening.degree)),
            },
        })
    }

    /// Model on the configured mesh with the sensor grid of the given spacing.
    pub fn build_model_with_spacing(&self, spacing: f64) -> Result<Model> {
        let mesh = self.build_mesh()?;
        let sensors = self.sensors(&mesh, spacing)?;
        let settings = self.model_settings(sensors.len())?;
        Ok(Model::build(mesh, sensors, &settings)?)
    }

    pub fn build_model(&self) -> Result<Model> {
        self.build_model_with_spacing(self.observation.spacing)
    }

    pub fn surrogate_config(&self) -> SurrogateConfig {
        SurrogateConfig {
            rank: self.surrogate.rank,
            oversampling: self.surrogate.oversampling,
            power_iterations: self.surrogate.power_iterations,
            seed: self.seeds().surrogate,
            residual_probes: self.surrogate.residual_probes,
            tolerance: self.surrogate.tolerance,
        }
    }

    pub fn estimators(&self, whitening: &WhiteningOperator) -> TraceEstimatorSet {
        TraceEstimatorSet::new(whitening, self.estimator.n_tr, self.seeds().estimator)
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            max_iter: self.optimizer.max_iter,
            grad_reduction: self.optimizer.grad_reduction,
            memory: self.optimizer.memory,
            barrier: self.optimizer.interior_point.then(BarrierConfig::default),
            ..OptimizerConfig::default()
        }
    }

    pub fn continuation_config(&self) -> ContinuationConfig {
        ContinuationConfig {
            gamma: self.gamma(),
            eps_schedule: (1..=self.penalty.eps_count)
                .map(|i| self.penalty.eps_ratio.powi(i as i32))
                .collect(),
            binary_tol: self.penalty.binary_tol,
            initial_weight: self.penalty.initial_weight,
            optimizer: self.optimizer_config(),
        }
    }
}
