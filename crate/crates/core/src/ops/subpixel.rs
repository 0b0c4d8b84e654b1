//! Sub-pixel convolution upsampling block.
//!
//! ```text
//! x (C) --5x5x5 conv--> tanh (2C) --3x3x3 conv--> leaky_relu (r * out_C) --shuffle--> (out_C)
//! ```
//!
//! The second convolution reads every intermediate channel, so each of the
//! `r` output phases of a voxel mixes all `2C` expanded features.

use super::activation::{leaky_relu, tanh_act, LEAKY_SLOPE};
use super::conv::{conv3d, ConvKernel};
use super::shuffle::{pixel_shuffle, ShuffleFactors};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::Volume4;

pub const EXPAND_KERNEL: [usize; 3] = [5, 5, 5];
pub const PROJECT_KERNEL: [usize; 3] = [3, 3, 3];

#[derive(Clone, Debug, PartialEq)]
pub struct SubpixelParams<T> {
    /// `C -> 2C`, 5x5x5, same padding.
    pub expand: ConvKernel<T>,
    /// `2C -> r * out_C`, 3x3x3, same padding.
    pub project: ConvKernel<T>,
}

impl<T: Scalar> SubpixelParams<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, f: ShuffleFactors) -> Self {
        SubpixelParams {
            expand: ConvKernel::zeros(2 * in_channels, in_channels, EXPAND_KERNEL).with_padding([2; 3]),
            project: ConvKernel::zeros(f.ratio() * out_channels, 2 * in_channels, PROJECT_KERNEL)
                .with_padding([1; 3]),
        }
    }

    pub fn check(&self, in_channels: usize, out_channels: usize, f: ShuffleFactors) -> Result<()> {
        let e = &self.expand;
        let p = &self.project;
        let ok = e.in_channels == in_channels
            && e.out_channels == 2 * in_channels
            && e.size == EXPAND_KERNEL
            && e.padding == [2; 3]
            && e.stride == [1; 3]
            && p.in_channels == 2 * in_channels
            && p.out_channels == f.ratio() * out_channels
            && p.size == PROJECT_KERNEL
            && p.padding == [1; 3]
            && p.stride == [1; 3];
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "sub-pixel parameters do not map {in_channels} -> {out_channels} channels at ratio {}",
                f.ratio()
            )))
        }
    }
}

pub fn subpixel_block<T: Scalar>(
    x: &Volume4<T>,
    out_channels: usize,
    f: ShuffleFactors,
    params: &SubpixelParams<T>,
) -> Result<Volume4<T>> {
    params.check(x.channels(), out_channels, f)?;
    let expanded = tanh_act(&conv3d(x, &params.expand)?);
    let projected = leaky_relu(&conv3d(&expanded, &params.project)?, T::lit(LEAKY_SLOPE));
    pixel_shuffle(&projected, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_follow_stride() {
        assert_eq!(ShuffleFactors::new([2, 2, 2]).unwrap().ratio(), 8);
        assert_eq!(ShuffleFactors::new([1, 2, 2]).unwrap().ratio(), 4);
    }

    #[test]
    fn zero_parameters_give_zero_upscaled_output() {
        let f = ShuffleFactors::new([2, 2, 2]).unwrap();
        let x = Volume4::<f32>::filled([3, 3, 3, 4], 0.7);
        let p = SubpixelParams::zeros(4, 2, f);
        let y = subpixel_block(&x, 2, f, &p).unwrap();
        assert_eq!(y.shape(), [6, 6, 6, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_parameters() {
        let f = ShuffleFactors::new([1, 2, 2]).unwrap();
        let x = Volume4::<f32>::zeros([2, 2, 2, 3]);
        let p = SubpixelParams::zeros(3, 2, ShuffleFactors::new([2, 2, 2]).unwrap());
        assert!(matches!(subpixel_block(&x, 2, f, &p), Err(Error::Dimension(_))));
    }
}
