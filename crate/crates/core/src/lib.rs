//! Dual-branch conditional diffusion for separating two-source image
//! mixtures, with wavelet/frequency-domain cross-branch suppression.
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod rng;
pub mod spectral;
pub mod suppression;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
