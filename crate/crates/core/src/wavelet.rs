//! Separable Haar wavelet transforms on volumes and the multi-scale input
//! pyramid fed to the encoder.
//!
//! Sample pairs are `(x[2k], x[2k + 1])`:
//!
//! ```text
//! cA[k] = (x[2k] + x[2k+1]) / sqrt(2)
//! cD[k] = (x[2k] - x[2k+1]) / sqrt(2)
//! ```
//!
//! A 3D transform applies the 1D step along the flagged axes in i, j, k
//! order. Band `b` of the result has bit `a - 1 - t` set when the high-pass
//! filter was applied on the `t`-th transformed axis (first transformed axis
//! is the most significant bit), so with all three axes `i -> bit 2`,
//! `j -> bit 1`, `k -> bit 0` and band 0 is the approximation `cA`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{concat_channels, Shape3, Volume4};

/// Haar analysis filters acting on a sample pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HaarFilters<T> {
    pub low: [T; 2],
    pub high: [T; 2],
}

impl<T: Scalar> HaarFilters<T> {
    pub fn new() -> Self {
        let r = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        HaarFilters {
            low: [r, r],
            high: [r, -r],
        }
    }
}

impl<T: Scalar> Default for HaarFilters<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn dwt1d<T: Scalar>(x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if x.len() < 2 || !x.len().is_multiple_of(2) {
        return Err(Error::arg(format!(
            "dwt1d needs an even length >= 2, got {}; pad the signal first",
            x.len()
        )));
    }
    let f = HaarFilters::<T>::new();
    let (ca, cd) = x
        .chunks_exact(2)
        .map(|p| {
            (
                f.low[0] * p[0] + f.low[1] * p[1],
                f.high[0] * p[0] + f.high[1] * p[1],
            )
        })
        .unzip();
    Ok((ca, cd))
}

pub fn idwt1d<T: Scalar>(ca: &[T], cd: &[T]) -> Result<Vec<T>> {
    if ca.len() != cd.len() {
        return Err(Error::arg(format!(
            "approximation has {} coefficients, detail has {}",
            ca.len(),
            cd.len()
        )));
    }
    let f = HaarFilters::<T>::new();
    let mut x = Vec::with_capacity(2 * ca.len());
    for (&a, &d) in ca.iter().zip(cd) {
        // synthesis is the transpose of the orthonormal analysis matrix
        x.push(f.low[0] * a + f.high[0] * d);
        x.push(f.low[1] * a + f.high[1] * d);
    }
    Ok(x)
}

/// Stride between consecutive samples along `axis` and the number of
/// independent lanes laid out as (outer, inner) around it.
fn axis_layout(shape: [usize; 4], axis: usize) -> (usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn analyze_axis<T: Scalar>(v: &Volume4<T>, axis: usize) -> (Volume4<T>, Volume4<T>) {
    let shape = v.shape();
    let n = shape[axis];
    let mut half = shape;
    half[axis] = n / 2;
    let (outer, inner) = axis_layout(shape, axis);
    let f = HaarFilters::<T>::new();
    let mut lo = Volume4::zeros(half);
    let mut hi = Volume4::zeros(half);
    let src = v.data();
    for o in 0..outer {
        for k in 0..n / 2 {
            let a = (o * n + 2 * k) * inner;
            let b = a + inner;
            let dst = (o * (n / 2) + k) * inner;
            for t in 0..inner {
                let (x0, x1) = (src[a + t], src[b + t]);
                lo.data_mut()[dst + t] = f.low[0] * x0 + f.low[1] * x1;
                hi.data_mut()[dst + t] = f.high[0] * x0 + f.high[1] * x1;
            }
        }
    }
    let mut spacing = v.spacing();
    spacing[axis] *= 2.0;
    (lo.spacing_from(spacing), hi.spacing_from(spacing))
}

fn synthesize_axis<T: Scalar>(lo: &Volume4<T>, hi: &Volume4<T>, axis: usize) -> Volume4<T> {
    let half = lo.shape();
    let n = half[axis];
    let mut full = half;
    full[axis] = 2 * n;
    let (outer, inner) = axis_layout(half, axis);
    let f = HaarFilters::<T>::new();
    let mut out = Volume4::zeros(full);
    for o in 0..outer {
        for k in 0..n {
            let src = (o * n + k) * inner;
            let a = (o * 2 * n + 2 * k) * inner;
            let b = a + inner;
            for t in 0..inner {
                let (ca, cd) = (lo.data()[src + t], hi.data()[src + t]);
                out.data_mut()[a + t] = f.low[0] * ca + f.high[0] * cd;
                out.data_mut()[b + t] = f.low[1] * ca + f.high[1] * cd;
            }
        }
    }
    let mut spacing = lo.spacing();
    spacing[axis] /= 2.0;
    out.spacing_from(spacing)
}

pub type AxisFlags = [bool; 3];

/// Result of one separable transform: `2^a` bands for `a` flagged axes.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet<T> {
    pub bands: Vec<Volume4<T>>,
    pub axis_flags: AxisFlags,
}

impl<T: Scalar> SubbandSet<T> {
    pub fn approximation(&self) -> &Volume4<T> {
        &self.bands[0]
    }

    pub fn details(&self) -> &[Volume4<T>] {
        &self.bands[1..]
    }

    /// All bands stacked along channels in band order.
    pub fn concatenated(&self) -> Result<Volume4<T>> {
        let parts: Vec<&Volume4<T>> = self.bands.iter().collect();
        concat_channels(&parts)
    }

    pub fn transformed_axes(&self) -> usize {
        self.axis_flags.iter().filter(|&&f| f).count()
    }
}

pub fn dwt3d<T: Scalar>(v: &Volume4<T>, axis_flags: AxisFlags) -> Result<SubbandSet<T>> {
    let s = v.spatial();
    for axis in 0..3 {
        if axis_flags[axis] && !s[axis].is_multiple_of(2) {
            return Err(Error::arg(format!(
                "axis {axis} has odd size {} and cannot be transformed",
                s[axis]
            )));
        }
    }
    let mut bands = vec![v.clone()];
    for axis in (0..3).filter(|&a| axis_flags[a]) {
        bands = bands
            .iter()
            .flat_map(|b| {
                let (lo, hi) = analyze_axis(b, axis);
                [lo, hi]
            })
            .collect();
    }
    Ok(SubbandSet { bands, axis_flags })
}

pub fn idwt3d<T: Scalar>(set: &SubbandSet<T>) -> Result<Volume4<T>> {
    let expected = 1usize << set.transformed_axes();
    if set.bands.len() != expected {
        return Err(Error::arg(format!(
            "{} bands for {} transformed axes, expected {expected}",
            set.bands.len(),
            set.transformed_axes()
        )));
    }
    let shape = set.bands[0].shape();
    if let Some(idx) = set.bands.iter().position(|b| b.shape() != shape) {
        return Err(Error::arg(format!(
            "band {idx} has shape {:?}, band 0 has {shape:?}",
            set.bands[idx].shape()
        )));
    }
    let mut bands = set.bands.clone();
    for axis in (0..3).rev().filter(|&a| set.axis_flags[a]) {
        bands = bands
            .chunks_exact(2)
            .map(|pair| synthesize_axis(&pair[0], &pair[1], axis))
            .collect();
    }
    Ok(bands.pop().expect("one band remains"))
}

/// Per-level transforms of successive approximation coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid<T> {
    pub levels: Vec<SubbandSet<T>>,
}

impl<T: Scalar> WaveletPyramid<T> {
    /// Concatenated band volume of level `t` (1-based, matching encoder stages).
    pub fn stacked(&self, t: usize) -> Result<Volume4<T>> {
        let level = t
            .checked_sub(1)
            .and_then(|i| self.levels.get(i))
            .ok_or_else(|| Error::arg(format!("pyramid has no level {t}")))?;
        level.concatenated()
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

pub fn stride_flags(stride: Shape3) -> Result<AxisFlags> {
    let mut flags = [false; 3];
    for (a, &s) in stride.iter().enumerate() {
        flags[a] = match s {
            1 => false,
            2 => true,
            other => {
                return Err(Error::config(format!(
                    "stride {other} on axis {a}; only 1 or 2 are supported"
                )))
            }
        };
    }
    Ok(flags)
}

/// Transforms the input, then each level's approximation, once per stride
/// triple. Axes with stride 2 are transformed; odd-sized transformed axes
/// are edge-padded by one voxel first.
pub fn build_pyramid<T: Scalar>(input: &Volume4<T>, schedule: &[Shape3]) -> Result<WaveletPyramid<T>> {
    let flags = schedule
        .iter()
        .map(|&s| stride_flags(s))
        .collect::<Result<Vec<_>>>()?;
    let mut levels: Vec<SubbandSet<T>> = Vec::with_capacity(schedule.len());
    for f in flags {
        let source = levels.last().map_or(input, |l| l.approximation());
        let s = source.spatial();
        let pad: Shape3 = std::array::from_fn(|a| usize::from(f[a] && s[a] % 2 == 1));
        let set = if pad == [0, 0, 0] {
            dwt3d(source, f)?
        } else {
            dwt3d(&source.pad_edge(pad), f)?
        };
        levels.push(set);
    }
    Ok(WaveletPyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const R2: f64 = std::f64::consts::SQRT_2;

    fn random_volume(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Volume4<f64> {
        Volume4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn haar_filter_identities() {
        let f = HaarFilters::<f64>::new();
        assert!((f.low[0] + f.low[1] - R2).abs() < 1e-12);
        assert!((f.high[0] + f.high[1]).abs() < 1e-12);
        assert!((f.low[0].powi(2) + f.low[1].powi(2) - 1.0).abs() < 1e-12);
        assert!((f.high[0].powi(2) + f.high[1].powi(2) - 1.0).abs() < 1e-12);
        assert!((f.low[0] * f.high[0] + f.low[1] * f.high[1]).abs() < 1e-12);
    }

    #[test]
    fn dwt1d_hand_values() {
        let (a, d) = dwt1d(&[1.0f64, 1.0, 1.0, 1.0]).unwrap();
        assert!(a.iter().all(|&x| (x - R2).abs() < 1e-12));
        assert!(d.iter().all(|&x| x.abs() < 1e-12));
        let (a, d) = dwt1d(&[1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert!((a[0] - 3.0 / R2).abs() < 1e-12 && (a[1] - 7.0 / R2).abs() < 1e-12);
        assert!(d.iter().all(|&x| (x + 1.0 / R2).abs() < 1e-12));
    }

    #[test]
    fn dwt1d_rejects_odd_length() {
        let err = dwt1d(&[1.0f32, 2.0, 3.0]).unwrap_err();
        assert!(err.to_string().contains("pad"));
        assert!(dwt1d::<f32>(&[]).is_err());
    }

    #[test]
    fn idwt1d_hand_values() {
        let x = idwt1d(&[R2, R2], &[0.0, 0.0]).unwrap();
        assert!(x.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let x = idwt1d(&[1.0f64], &[1.0]).unwrap();
        assert!((x[0] - R2).abs() < 1e-12 && x[1].abs() < 1e-12);
        assert!(idwt1d(&[1.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn one_dimensional_round_trip_on_seeded_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst = 0f32;
        for _ in 0..1000 {
            let n = 2 * rng.random_range(1..40);
            let x: Vec<f32> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let (a, d) = dwt1d(&x).unwrap();
            let y = idwt1d(&a, &d).unwrap();
            for (p, q) in x.iter().zip(&y) {
                worst = worst.max((p - q).abs() / p.abs().max(1.0));
            }
        }
        assert!(worst < 1e-6, "worst error {worst}");
    }

    #[test]
    fn constant_volume_concentrates_in_approximation() {
        let v = Volume4::<f64>::filled([4, 4, 4, 1], 0.75);
        let set = dwt3d(&v, [true; 3]).unwrap();
        assert_eq!(set.bands.len(), 8);
        // scalar oracle: 8 voxels times (1/sqrt 2)^3
        let oracle = 8.0 * 0.75 * (1.0 / R2).powi(3);
        assert!((oracle - 2.0 * R2 * 0.75).abs() < 1e-12);
        assert!(set.bands[0].data().iter().all(|&x| (x - oracle).abs() < 1e-12));
        for band in set.details() {
            assert!(band.data().iter().all(|&x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn partial_flags_give_four_bands() {
        let v = Volume4::<f64>::zeros([6, 4, 8, 2]);
        let set = dwt3d(&v, [false, true, true]).unwrap();
        assert_eq!(set.bands.len(), 4);
        assert!(set.bands.iter().all(|b| b.shape() == [6, 2, 4, 2]));
        assert!(dwt3d(&Volume4::<f64>::zeros([3, 4, 4, 1]), [true, true, true]).is_err());
    }

    /// Brute-force separable oracle: the 1D transform applied to each lane,
    /// axis by axis, with explicit index bookkeeping.
    fn separable_oracle(v: &Volume4<f64>) -> Vec<Volume4<f64>> {
        let [h, w, d, _] = v.shape();
        let mut out = Vec::new();
        for bi in 0..2 {
            for bj in 0..2 {
                for bk in 0..2 {
                    out.push(Volume4::from_fn([h / 2, w / 2, d / 2, 1], |i, j, k, _| {
                        let mut acc = 0.0;
                        for di in 0..2 {
                            for dj in 0..2 {
                                for dk in 0..2 {
                                    let sign = |bit: usize, off: usize| {
                                        if bit == 1 && off == 1 {
                                            -1.0
                                        } else {
                                            1.0
                                        }
                                    };
                                    acc += sign(bi, di)
                                        * sign(bj, dj)
                                        * sign(bk, dk)
                                        * v.get(2 * i + di, 2 * j + dj, 2 * k + dk, 0);
                                }
                            }
                        }
                        acc / (2.0 * R2)
                    }));
                }
            }
        }
        out
    }

    #[test]
    fn three_dimensional_transform_matches_separable_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let v = random_volume(&mut rng, [4, 4, 4, 1]);
            let set = dwt3d(&v, [true; 3]).unwrap();
            for (band, oracle) in set.bands.iter().zip(separable_oracle(&v)) {
                assert!(band.max_abs_diff(&oracle) < 1e-6);
            }
        }
    }

    #[test]
    fn synthesis_of_single_voxel_bands() {
        // cA = 1, cD_l = 0 except band 7 (high on every axis) = 1
        let mut bands = vec![Volume4::<f64>::zeros([1, 1, 1, 1]); 8];
        bands[0].set(0, 0, 0, 0, 1.0);
        bands[7].set(0, 0, 0, 0, 1.0);
        let v = idwt3d(&SubbandSet {
            bands,
            axis_flags: [true; 3],
        })
        .unwrap();
        // x(a,b,c) = (1 + (-1)^(a+b+c)) / (2 sqrt 2)
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let parity = if (i + j + k) % 2 == 0 { 1.0 } else { -1.0 };
                    let expect = (1.0 + parity) / (2.0 * R2);
                    assert!((v.get(i, j, k, 0) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_bands_reconstruct_zero() {
        let set = SubbandSet {
            bands: vec![Volume4::<f32>::zeros([2, 3, 1, 2]); 4],
            axis_flags: [true, false, true],
        };
        let v = idwt3d(&set).unwrap();
        assert_eq!(v.shape(), [4, 3, 2, 2]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn inconsistent_bands_are_rejected() {
        let mut set = dwt3d(&Volume4::<f64>::zeros([2, 2, 2, 1]), [true; 3]).unwrap();
        set.bands[3] = Volume4::zeros([1, 1, 2, 1]);
        assert!(idwt3d(&set).is_err());
        set.bands.pop();
        assert!(idwt3d(&set).is_err());
    }

    #[test]
    fn pyramid_shapes() {
        let v = Volume4::<f64>::zeros([8, 8, 8, 1]);
        let p = build_pyramid(&v, &[[2, 2, 2]]).unwrap();
        assert_eq!(p.depth(), 1);
        assert_eq!(p.stacked(1).unwrap().shape(), [4, 4, 4, 8]);
        let p = build_pyramid(&v, &[[1, 2, 2], [2, 2, 2]]).unwrap();
        assert_eq!(p.stacked(1).unwrap().shape(), [8, 4, 4, 4]);
        assert_eq!(p.stacked(2).unwrap().shape(), [4, 2, 2, 8]);
        assert_eq!(build_pyramid(&v, &[]).unwrap().depth(), 0);
        assert!(matches!(
            build_pyramid(&v, &[[3, 2, 2]]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pyramid_pads_odd_axes() {
        let v = Volume4::<f64>::filled([5, 4, 4, 1], 1.0);
        let p = build_pyramid(&v, &[[2, 2, 2]]).unwrap();
        assert_eq!(p.levels[0].approximation().spatial(), [3, 2, 2]);
        // edge replication keeps a constant input constant
        assert!(p.levels[0].details().iter().all(|b| b.data().iter().all(|x| x.abs() < 1e-12)));
    }

    #[test]
    fn pyramid_levels_equal_manual_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_volume(&mut rng, [8, 16, 16, 1]);
        let sched = [[1, 2, 2], [2, 2, 2], [2, 2, 2]];
        let p = build_pyramid(&v, &sched).unwrap();
        let mut current = v.clone();
        for (t, s) in sched.iter().enumerate() {
            let set = dwt3d(&current, stride_flags(*s).unwrap()).unwrap();
            assert_eq!(set, p.levels[t]);
            current = set.bands[0].clone();
        }
    }

    fn flags_strategy() -> impl Strategy<Value = AxisFlags> {
        (1u8..8).prop_map(|m| [m & 4 != 0, m & 2 != 0, m & 1 != 0])
    }

    proptest! {
        #[test]
        fn reconstruction_and_energy(
            flags in flags_strategy(),
            dims in (1usize..4, 1usize..4, 1usize..4, 1usize..3),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [2 * dims.0, 2 * dims.1, 2 * dims.2, dims.3];
            let v: Volume4<f32> = Volume4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0));
            let set = dwt3d(&v, flags).unwrap();
            prop_assert_eq!(set.bands.len(), 1 << set.transformed_axes());
            let back = idwt3d(&set).unwrap();
            prop_assert!(back.max_abs_diff(&v) < 1e-6);
            let e_in: f64 = v.data().iter().map(|&x| (x as f64).powi(2)).sum();
            let e_out: f64 = set.bands.iter().flat_map(|b| b.data()).map(|&x| (x as f64).powi(2)).sum();
            prop_assert!((e_in - e_out).abs() <= 1e-4 * e_in.max(1e-12));
        }
    }
}
