//! Differentiable toy network, synthetic task and trainer.

pub mod baseline;
pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod task;
pub mod train;

pub use model::{Formulation, NetKernel, Network, NetworkConfig, StageConfig};
pub use params::ParamSet;
pub use task::{generate_task, SyntheticTask, TaskSpec};
pub use train::{extract_stage_spectra, train, Hyper, TrainingHistory};
