//! Numerical laboratory for L2-regularized factorized matrix models: spectra,
//! balance diagnostics, losses, optimizers, closed-form oracles, a sweep
//! harness and an attention checkpoint analyzer.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! harness and checkpoint analyzer work in `f64`.

pub mod ckpt;
pub mod error;
pub mod factorized;
pub mod harness;
pub mod matrix;
pub mod objectives;
pub mod optim;
pub mod oracles;
pub mod scalar;
pub mod spectra;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Factorization64 = factorized::Factorization<f64>;
pub type Factorization32 = factorized::Factorization<f32>;
pub type DeepChain64 = factorized::DeepChain<f64>;
pub type DeepChain32 = factorized::DeepChain<f32>;
pub type Model64 = optim::Model<f64>;
pub type SvdResult64 = spectra::SvdResult<f64>;
pub type SpectrumReport64 = spectra::SpectrumReport<f64>;
