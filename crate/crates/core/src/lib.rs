//! Volumetric segmentation numerics: separable Haar wavelet pyramids,
//! sub-pixel convolution upsampling, a small reverse-mode autodiff engine,
//! and the encoder-decoder network, losses, metrics and preprocessing built
//! on them.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod preprocess;
pub mod scalar;
pub mod train;
pub mod volume;
pub mod wavelet;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use volume::{concat_channels, crop_to_nonzero, resample, Interp, LabelVolume, Volume4};
