//! Binary neural network training where the gradient of `sign` is estimated
//! by a truncated Fourier series plus a learned noise-adaptation module.
//!
//! Module map:
//! - [`tensor`], [`autograd`], [`optim`]: dense tensors, a reverse-mode tape
//!   with custom-backward nodes, SGD/Adam.
//! - [`surrogate`]: `sign` and its backward rules (STE, Fourier, baselines).
//! - [`adapter`]: the noise-adaptation module and its composite binarizer.
//! - [`binary`]: binary conv layers, bit-packed XNOR-popcount inference,
//!   model zoo and checkpoints.
//! - [`train`]: schedules, datasets, the training loop and ablation sweeps.
//! - [`analysis`]: numerical checks of the series (MSE, spectra, gradients).

pub mod adapter;
pub mod analysis;
pub mod autograd;
pub mod binary;
pub mod error;
pub mod optim;
pub mod scalar;
pub mod surrogate;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
