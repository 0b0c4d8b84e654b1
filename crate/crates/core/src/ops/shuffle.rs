//! Periodic shuffling between channels and space.
//!
//! Output voxel `(r1 i + a, r2 j + b, r3 k + c, ch)` of [`pixel_shuffle`] is
//! input `(i, j, k, ch * r + a r2 r3 + b r3 + c)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Shape3, Volume4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ShuffleFactors([usize; 3]);

impl ShuffleFactors {
    pub fn new(factors: Shape3) -> Result<Self> {
        if factors.contains(&0) {
            return Err(Error::arg(format!("shuffle factors {factors:?} must be >= 1")));
        }
        Ok(ShuffleFactors(factors))
    }

    pub fn axes(&self) -> Shape3 {
        self.0
    }

    /// Phase count `r1 * r2 * r3`.
    pub fn ratio(&self) -> usize {
        self.0.iter().product()
    }
}

/// Source offset in the low-resolution volume for every high-resolution
/// element, used by both directions so they are exact inverses.
fn for_each_pair(lo_shape: [usize; 4], f: ShuffleFactors, mut visit: impl FnMut(usize, usize)) {
    let [r1, r2, r3] = f.0;
    let r = f.ratio();
    let [h, w, d, c_lo] = lo_shape;
    let c_hi = c_lo / r;
    let (w_hi, d_hi) = (w * r2, d * r3);
    for i in 0..h {
        for a in 0..r1 {
            for j in 0..w {
                for b in 0..r2 {
                    for k in 0..d {
                        for c in 0..r3 {
                            let phase = (a * r2 + b) * r3 + c;
                            let hi_base = (((i * r1 + a) * w_hi + j * r2 + b) * d_hi + k * r3 + c) * c_hi;
                            let lo_base = ((i * w + j) * d + k) * c_lo + phase;
                            for ch in 0..c_hi {
                                visit(hi_base + ch, lo_base + ch * r);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn pixel_shuffle<T: Scalar>(x: &Volume4<T>, f: ShuffleFactors) -> Result<Volume4<T>> {
    let r = f.ratio();
    let [h, w, d, c] = x.shape();
    if c % r != 0 {
        return Err(Error::dim(format!(
            "{c} channels are not divisible by shuffle ratio {r}"
        )));
    }
    let [r1, r2, r3] = f.0;
    let mut out = Volume4::zeros([h * r1, w * r2, d * r3, c / r]);
    let src = x.data();
    let dst = out.data_mut();
    for_each_pair(x.shape(), f, |hi, lo| dst[hi] = src[lo]);
    let sp = x.spacing();
    Ok(out.spacing_from([sp[0] / r1 as f64, sp[1] / r2 as f64, sp[2] / r3 as f64]))
}

pub fn pixel_unshuffle<T: Scalar>(x: &Volume4<T>, f: ShuffleFactors) -> Result<Volume4<T>> {
    let [h, w, d, c] = x.shape();
    let [r1, r2, r3] = f.0;
    if h % r1 != 0 || w % r2 != 0 || d % r3 != 0 {
        return Err(Error::dim(format!(
            "spatial shape {:?} not divisible by factors {:?}",
            x.spatial(),
            f.0
        )));
    }
    let lo_shape = [h / r1, w / r2, d / r3, c * f.ratio()];
    let mut out = Volume4::zeros(lo_shape);
    let src = x.data();
    let dst = out.data_mut();
    for_each_pair(lo_shape, f, |hi, lo| dst[lo] = src[hi]);
    let sp = x.spacing();
    Ok(out.spacing_from([sp[0] * r1 as f64, sp[1] * r2 as f64, sp[2] * r3 as f64]))
}
