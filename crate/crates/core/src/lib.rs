//! Nonlocal diffusion blocks as dynamical systems.
//!
//! The numerical core is generic over the scalar type (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`, which is what the experiments
//! and checks use.

pub mod dynamics;
pub mod error;
pub mod kernels;
pub mod matrix;
pub mod net;
pub mod nonlocal_ops;
pub mod rng;
pub mod scalar;
pub mod spectrum;

pub use error::{LabError, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Mat = Matrix<f64>;
pub type Field = kernels::FeatureField<f64>;
pub type Kernel = kernels::KernelMatrix<f64>;
pub type KernelSpec = kernels::AffinityKernelSpec<f64>;
pub type Report = spectrum::SpectrumReport<f64>;
