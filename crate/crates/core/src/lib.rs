pub mod baselines;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod expfam;
pub mod filter;
pub mod metrics;
pub mod nn;
pub mod observations;
pub mod rng;
pub mod simulate;

pub use dynamics::{DynamicsModel, GaussianNoise};
pub use error::{Error, Result};
pub use expfam::{Family, MeanParams, NaturalParams};
pub use filter::{Evkf, EvkfConfig, FilterState};
pub use observations::ObservationModel;
pub use rng::FilterRng;
pub use simulate::{System, Trajectory};
