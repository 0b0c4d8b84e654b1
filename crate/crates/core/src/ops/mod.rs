//! Operators of the network: convolutions, periodic shuffling, the
//! sub-pixel upsampling block, normalization and activations.

pub mod activation;
pub mod checkerboard;
pub mod conv;
pub mod norm;
pub mod shuffle;
pub mod subpixel;

pub use activation::{leaky_relu, tanh_act, LEAKY_SLOPE};
pub use checkerboard::{
    checkerboard_csv, checkerboard_experiment, checkerboard_metric, checkerboard_trial, CheckerboardRow,
    CheckerboardSetup, UpsampleMethod,
};
pub use conv::{conv3d, decompose_transposed, transposed_conv3d, transposed_extent, ConvKernel, TransposedDecomposition};
pub use norm::instance_norm;
pub use shuffle::{pixel_shuffle, pixel_unshuffle, ShuffleFactors};
pub use subpixel::{subpixel_block, SubpixelParams, EXPAND_KERNEL, PROJECT_KERNEL};
