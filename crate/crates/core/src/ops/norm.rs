//! Instance normalization: per-channel standardization over the spatial
//! axes of one sample, followed by a per-channel affine map.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::Volume4;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel statistics saved by the forward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn instance_norm_raw<T: Scalar>(
    x: &[T],
    channels: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormStats<T>) {
    let n = T::lit((x.len() / channels) as f64);
    let mut mean = vec![T::zero(); channels];
    for voxel in x.chunks_exact(channels) {
        for (m, &v) in mean.iter_mut().zip(voxel) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); channels];
    for voxel in x.chunks_exact(channels) {
        for c in 0..channels {
            let d = voxel[c] - mean[c];
            var[c] += d * d;
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / n + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for (idx, &v) in x.iter().enumerate() {
        let c = idx % channels;
        let h = (v - mean[c]) * inv_std[c];
        normalized[idx] = h;
        y[idx] = gamma[c] * h + beta[c];
    }
    (y, NormStats { normalized, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn instance_norm_backward<T: Scalar>(
    dy: &[T],
    channels: usize,
    gamma: &[T],
    stats: &NormStats<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::lit((dy.len() / channels) as f64);
    let mut dbeta = vec![T::zero(); channels];
    let mut dgamma = vec![T::zero(); channels];
    for (idx, &g) in dy.iter().enumerate() {
        let c = idx % channels;
        dbeta[c] += g;
        dgamma[c] += g * stats.normalized[idx];
    }
    let mut dx = vec![T::zero(); dy.len()];
    for (idx, &g) in dy.iter().enumerate() {
        let c = idx % channels;
        let h = stats.normalized[idx];
        dx[idx] = gamma[c] * stats.inv_std[c] * (g - dbeta[c] / n - h * dgamma[c] / n);
    }
    (dx, dgamma, dbeta)
}

pub fn instance_norm<T: Scalar>(x: &Volume4<T>, gamma: &[T], beta: &[T], eps: T) -> Result<Volume4<T>> {
    let c = x.channels();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dim(format!(
            "affine parameters have lengths {}/{} for {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    let (y, _) = instance_norm_raw(x.data(), c, gamma, beta, eps);
    Volume4::new(y, x.shape(), x.spacing())
}
