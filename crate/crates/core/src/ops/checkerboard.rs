//! Phase-imbalance measure for periodic upsampling artifacts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::conv::{transposed_conv3d, ConvKernel};
use super::shuffle::ShuffleFactors;
use super::subpixel::{subpixel_block, SubpixelParams};
use crate::error::{Error, Result};
use crate::optim::{kaiming_normal, leaky_gain};
use crate::scalar::Scalar;
use crate::volume::Volume4;

const EPS: f64 = 1e-12;

/// Splits `y` into the `r` sub-lattices `(i mod r1, j mod r2, k mod r3)` and
/// returns `(max phase mean |y| - min phase mean |y|) / (mean |y| + eps)`.
pub fn checkerboard_metric<T: Scalar>(y: &Volume4<T>, f: ShuffleFactors) -> Result<f64> {
    let s = y.spatial();
    let r = f.axes();
    if (0..3).any(|a| !s[a].is_multiple_of(r[a])) {
        return Err(Error::dim(format!(
            "spatial shape {s:?} not divisible by factors {r:?}"
        )));
    }
    let c = y.channels();
    let mut sums = vec![0f64; f.ratio()];
    let mut total = 0f64;
    for i in 0..s[0] {
        for j in 0..s[1] {
            for k in 0..s[2] {
                let phase = ((i % r[0]) * r[1] + j % r[1]) * r[2] + k % r[2];
                let o = y.offset(i, j, k, 0);
                let mag: f64 = y.data()[o..o + c].iter().map(|v| v.abs().as_f64()).sum();
                sums[phase] += mag;
                total += mag;
            }
        }
    }
    let per_phase = (y.len() / f.ratio()) as f64;
    let means: Vec<f64> = sums.iter().map(|s| s / per_phase).collect();
    let max = means.iter().copied().fold(f64::MIN, f64::max);
    let min = means.iter().copied().fold(f64::MAX, f64::min);
    Ok((max - min) / (total / y.len() as f64 + EPS))
}

/// Settings for the upsampling-artifact comparison on constant input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckerboardSetup {
    /// Transposed-convolution kernel extent (isotropic).
    pub kernel: usize,
    /// Upsampling factor for both methods (isotropic).
    pub stride: usize,
    /// Input extent per axis.
    pub size: usize,
    pub channels: usize,
}

impl Default for CheckerboardSetup {
    fn default() -> Self {
        CheckerboardSetup {
            kernel: 3,
            stride: 2,
            size: 12,
            channels: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMethod {
    Transposed,
    Subpixel,
}

impl UpsampleMethod {
    pub fn name(self) -> &'static str {
        match self {
            UpsampleMethod::Transposed => "transposed_conv",
            UpsampleMethod::Subpixel => "subpixel_block",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckerboardRow {
    pub seed: u64,
    pub method: UpsampleMethod,
    pub imbalance: f64,
}

/// Largest centred sub-range of `lo..hi` whose length is a multiple of `m`.
fn aligned(lo: usize, hi: usize, m: usize) -> (usize, usize) {
    let len = (hi.saturating_sub(lo)) / m * m;
    (lo, len)
}

/// One seed: a randomly initialized transposed convolution and sub-pixel
/// block (fan-in scaled normal weights, zero bias) upsample the same
/// constant input. Each output is measured away from the zero-padded
/// border, where the input really is constant.
pub fn checkerboard_trial(setup: CheckerboardSetup, seed: u64) -> Result<[CheckerboardRow; 2]> {
    let CheckerboardSetup {
        kernel,
        stride,
        size,
        channels,
    } = setup;
    if kernel < stride || stride < 2 || channels == 0 {
        return Err(Error::arg(format!(
            "need kernel >= stride >= 2 and channels > 0, got kernel {kernel}, stride {stride}"
        )));
    }
    let f = ShuffleFactors::new([stride; 3])?;
    // the sub-pixel path reads 2 + 1 input voxels beyond each output voxel
    let margin = 3 * stride;
    if size * stride < 2 * margin + stride || (size - 1) * stride + 1 < 2 * (kernel - 1) + stride {
        return Err(Error::arg(format!("input size {size} too small for an interior measurement")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = leaky_gain(0.01);
    let x = Volume4::<f64>::filled([size, size, size, channels], 1.0);

    let taps = kernel.pow(3);
    let tk = ConvKernel::new(
        kaiming_normal(channels * channels * taps, channels * taps, gain, &mut rng),
        vec![0.0; channels],
        channels,
        channels,
        [kernel; 3],
        [stride; 3],
        [0; 3],
    )?;
    let y = transposed_conv3d(&x, &tk)?;
    // voxels closer than kernel - 1 to either end miss some taps
    let (lo, len) = aligned(kernel - 1, (size - 1) * stride + 1, stride);
    let transposed = checkerboard_metric(&y.crop([lo; 3], [len; 3])?, f)?;

    let mut params = SubpixelParams::<f64>::zeros(channels, channels, f);
    let e = &mut params.expand;
    e.weights = kaiming_normal(e.weights.len(), channels * e.taps(), gain, &mut rng);
    let p = &mut params.project;
    p.weights = kaiming_normal(p.weights.len(), 2 * channels * p.taps(), gain, &mut rng);
    let z = subpixel_block(&x, channels, f, &params)?;
    let (lo, len) = aligned(margin, size * stride - margin, stride);
    let subpixel = checkerboard_metric(&z.crop([lo; 3], [len; 3])?, f)?;

    Ok([
        CheckerboardRow {
            seed,
            method: UpsampleMethod::Transposed,
            imbalance: transposed,
        },
        CheckerboardRow {
            seed,
            method: UpsampleMethod::Subpixel,
            imbalance: subpixel,
        },
    ])
}

/// Rows for `count` consecutive seeds starting at `first_seed`, transposed
/// convolution first within a seed.
pub fn checkerboard_experiment(setup: CheckerboardSetup, first_seed: u64, count: usize) -> Result<Vec<CheckerboardRow>> {
    let mut rows = Vec::with_capacity(2 * count);
    for seed in (first_seed..).take(count) {
        rows.extend(checkerboard_trial(setup, seed)?);
    }
    Ok(rows)
}

pub fn checkerboard_csv(rows: &[CheckerboardRow]) -> String {
    let mut out = String::from("seed,method,phase_imbalance\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.seed, r.method.name(), r.imbalance));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_volume_has_no_imbalance() {
        let y = Volume4::<f64>::filled([4, 4, 4, 2], -1.5);
        let f = ShuffleFactors::new([2, 2, 2]).unwrap();
        assert_eq!(checkerboard_metric(&y, f).unwrap(), 0.0);
        assert_eq!(checkerboard_metric(&Volume4::<f64>::zeros([2, 2, 2, 1]), f).unwrap(), 0.0);
    }

    #[test]
    fn two_phase_lattice() {
        // a = 2 on even k, b = 0 on odd k: (2 - 0) / ((2 + 0) / 2) = 2
        let y = Volume4::<f64>::from_fn([2, 2, 4, 1], |_, _, k, _| if k % 2 == 0 { 2.0 } else { 0.0 });
        let f = ShuffleFactors::new([1, 1, 2]).unwrap();
        assert!((checkerboard_metric(&y, f).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn transposed_trials_are_uneven() {
        let setup = CheckerboardSetup::default();
        for seed in 0..3 {
            let [t, s] = checkerboard_trial(setup, seed).unwrap();
            assert_eq!(t.method, UpsampleMethod::Transposed);
            assert!(t.imbalance > 0.0);
            assert!(s.imbalance.is_finite());
        }
    }

    #[test]
    fn csv_lists_both_methods() {
        let rows = checkerboard_experiment(CheckerboardSetup { size: 8, channels: 2, ..Default::default() }, 0, 2).unwrap();
        let csv = checkerboard_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(2).unwrap().starts_with("0,subpixel_block,"));
    }

    #[test]
    fn indivisible_shape() {
        let y = Volume4::<f64>::zeros([3, 2, 2, 1]);
        assert!(checkerboard_metric(&y, ShuffleFactors::new([2, 2, 2]).unwrap()).is_err());
    }
}
