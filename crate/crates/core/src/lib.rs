//! Single-pass diffusion-transformer MIMO channel estimation.
//!
//! A lightweight denoising transformer is trained under variance-exploding
//! corruption to predict clean angular-domain channels directly; at
//! inference the angular least-squares estimate and its noise level drive a
//! single network forward pass. Classical LS and LMMSE estimators are
//! included as baselines, along with a synthetic clustered-multipath channel
//! simulator and a finite-difference-checked autodiff tensor core.

pub mod autograd;
pub mod channel;
pub mod complex;
pub mod dataset;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod transforms;

pub use autograd::Var;
pub use complex::ComplexMatrix;
pub use error::{ConfigError, FormatError, TensorError};
pub use tensor::Tensor;
