pub mod analytic;
pub mod dataset;
pub mod error;
pub mod identification;
pub mod io;
pub mod model;
pub mod profiles;
pub mod simulator;
pub mod synthetic;
pub mod validation;

pub use dataset::{Dataset, DatasetMeta};
pub use error::{Error, Result};
pub use model::{CellState, ModelParams};
pub use simulator::{CurrentProfile, SimOptions, SimulationTrace};
