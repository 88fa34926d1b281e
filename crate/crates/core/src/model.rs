//! All discretized operators of one problem instance.

use crate::error::Result;
use crate::fem::{assemble, FemOperators};
use crate::forward_map::ForwardMap;
use crate::mesh::Mesh;
use crate::observation::ObservationSetup;
use crate::prior::PriorOperator;
use crate::transport::{TransportConfig, TransportOperators, VelocityField};
use crate::whitening::{WhiteningMode, WhiteningOperator};

/// Physical and discretization settings other than the mesh and sensors.
#[derive(Debug, Clone)]
pub struct ModelSettings {
    pub alpha: f64,
    pub beta: f64,
    pub velocity: VelocityField,
    pub transport: TransportConfig,
    pub times: Vec<f64>,
    /// Per-sensor noise standard deviations; `None` means unit noise.
    pub noise_std: Option<Vec<f64>>,
    /// `None` selects by problem size.
    pub whitening: Option<WhiteningMode>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            alpha: 8e-3,
            beta: 1e-2,
            velocity: VelocityField::default(),
            transport: TransportConfig::default(),
            times: crate::observation::equispaced_times(1.0, 4.0, 19),
            noise_std: None,
            whitening: None,
        }
    }
}

#[derive(Debug)]
pub struct Model {
    pub mesh: Mesh,
    pub fem: FemOperators,
    pub prior: PriorOperator,
    pub transport: TransportOperators,
    pub observations: ObservationSetup,
    pub whitening: WhiteningOperator,
}

impl Model {
    pub fn build(mesh: Mesh, sensors: Vec<[f64; 2]>, settings: &ModelSettings) -> Result<Self> {
        mesh.validate()?;
        let fem = assemble(&mesh)?;
        let prior = PriorOperator::new(&fem, settings.alpha, settings.beta)?;
        let transport = TransportOperators::new(&mesh, &fem, &settings.velocity, settings.transport)?;
        let mut observations = ObservationSetup::new(
            &mesh,
            sensors,
            settings.times.clone(),
            settings.transport.final_time,
            settings.transport.n_steps,
        )?;
        if let Some(sigma) = &settings.noise_std {
            observations = observations.with_noise(sigma.clone())?;
        }
        let mode = settings.whitening.unwrap_or_else(|| WhiteningMode::auto(fem.n));
        let whitening = WhiteningOperator::new(&fem, mode)?;
        Ok(Self {
            mesh,
            fem,
            prior,
            transport,
            observations,
            whitening,
        })
    }

    pub fn forward_map(&self) -> ForwardMap<'_> {
        ForwardMap {
            transport: &self.transport,
            observations: &self.observations,
            prior: &self.prior,
        }
    }

    pub fn n_params(&self) -> usize {
        self.fem.n
    }

    pub fn n_sensors(&self) -> usize {
        self.observations.n_sensors()
    }
}
