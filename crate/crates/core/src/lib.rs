pub mod error;
pub mod fem;
pub mod forward_map;
pub mod mesh;
pub mod model;
pub mod observation;
pub mod oed;
pub mod posterior;
pub mod prior;
pub mod sparse;
pub mod surrogate;
pub mod transport;
pub mod whitening;

pub use error::{OedError, Result};

pub const DEFAULT_RESOLUTION: usize = 32;
