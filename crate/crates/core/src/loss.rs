//! Deep-supervision training loss: per-head soft Dice plus cross-entropy,
//! combined with halving weights.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{LabelVolume, Shape3, Volume4};

/// Added to the Dice numerator and denominator so a class-free batch has a
/// defined loss.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probability floor inside the logarithm of the cross-entropy.
pub const CE_EPS: f64 = 1e-7;

pub const NUM_HEADS: usize = 5;

/// Weight of head `i` (1-based): `2^-(i-1) / sum_{m=0}^{heads} 2^-m`.
///
/// The normalizer has one more term than there are heads, so the weights
/// sum to `62/63` for five heads rather than to one.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepSupWeights {
    rationals: Vec<(u64, u64)>,
}

impl DeepSupWeights {
    pub fn new(heads: usize) -> Self {
        assert!((1..=62).contains(&heads), "unsupported head count {heads}");
        // scale numerator and denominator by 2^heads to stay integral
        let denominator: u64 = (0..=heads).map(|m| 1u64 << (heads - m)).sum();
        let rationals = (1..=heads)
            .map(|i| {
                let num = 1u64 << (heads - (i - 1));
                let g = gcd(num, denominator);
                (num / g, denominator / g)
            })
            .collect();
        DeepSupWeights { rationals }
    }

    /// Exact `(numerator, denominator)` per head.
    pub fn rationals(&self) -> &[(u64, u64)] {
        &self.rationals
    }

    pub fn values<T: Scalar>(&self) -> Vec<T> {
        self.rationals
            .iter()
            .map(|&(n, d)| T::lit(n as f64 / d as f64))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rationals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rationals.is_empty()
    }
}

impl Default for DeepSupWeights {
    fn default() -> Self {
        Self::new(NUM_HEADS)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub(crate) fn dice_loss_value<T: Scalar>(s: &[T], g: &[T], smooth: T) -> T {
    let (mut inter, mut gs, mut ss) = (T::zero(), T::zero(), T::zero());
    for (&p, &t) in s.iter().zip(g) {
        inter += p * t;
        gs += t;
        ss += p;
    }
    T::one() - (T::lit(2.0) * inter + smooth) / (gs + ss + smooth)
}

pub(crate) fn dice_loss_grad<T: Scalar>(s: &[T], g: &[T], smooth: T) -> Vec<T> {
    let (mut inter, mut gs, mut ss) = (T::zero(), T::zero(), T::zero());
    for (&p, &t) in s.iter().zip(g) {
        inter += p * t;
        gs += t;
        ss += p;
    }
    let num = T::lit(2.0) * inter + smooth;
    let den = gs + ss + smooth;
    g.iter()
        .map(|&t| -(T::lit(2.0) * t) / den + num / (den * den))
        .collect()
}

pub(crate) fn cross_entropy_value<T: Scalar>(s: &[T], g: &[T], voxels: usize, eps: T) -> T {
    let mut acc = T::zero();
    for (&p, &t) in s.iter().zip(g) {
        if t != T::zero() {
            acc += t * p.max(eps).min(T::one()).ln();
        }
    }
    -acc / T::lit(voxels as f64)
}

pub(crate) fn cross_entropy_grad<T: Scalar>(s: &[T], g: &[T], voxels: usize, eps: T) -> Vec<T> {
    let n = T::lit(voxels as f64);
    s.iter()
        .zip(g)
        .map(|(&p, &t)| {
            if t == T::zero() || p < eps || p > T::one() {
                T::zero()
            } else {
                -t / (n * p)
            }
        })
        .collect()
}

fn check_pair<T: Scalar>(s: &Volume4<T>, g: &Volume4<T>) -> Result<()> {
    if s.shape() != g.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} and ground truth {:?} differ",
            s.shape(),
            g.shape()
        )));
    }
    Ok(())
}

/// Soft Dice loss over classes and voxels jointly.
pub fn dice_loss<T: Scalar>(s: &Volume4<T>, g: &Volume4<T>) -> Result<f64> {
    check_pair(s, g)?;
    Ok(dice_loss_value(s.data(), g.data(), T::lit(DICE_SMOOTH)).as_f64())
}

/// Mean per-voxel cross-entropy with probabilities clamped to `[eps, 1]`.
pub fn ce_loss<T: Scalar>(s: &Volume4<T>, g: &Volume4<T>) -> Result<f64> {
    check_pair(s, g)?;
    Ok(cross_entropy_value(s.data(), g.data(), s.voxels(), T::lit(CE_EPS)).as_f64())
}

/// Integer reduction factors from `full` down to `head`.
pub fn head_factors(full: Shape3, head: Shape3) -> Result<Shape3> {
    let mut f = [0; 3];
    for a in 0..3 {
        if head[a] == 0 || !full[a].is_multiple_of(head[a]) {
            return Err(Error::dim(format!(
                "head shape {head:?} does not divide label shape {full:?}"
            )));
        }
        f[a] = full[a] / head[a];
    }
    Ok(f)
}

/// Per-head loss nodes and their weighted total.
pub struct LossTerms {
    pub total: Var,
    pub per_head: Vec<Var>,
}

/// Weighted deep-supervision loss over class-logit heads (head 0 is full
/// resolution). Each head is softmaxed and compared with the label reduced
/// to its grid by nearest-neighbour sampling.
pub fn total_loss<T: Scalar>(graph: &mut Graph<T>, heads: &[Var], label: &LabelVolume) -> Result<LossTerms> {
    let weights = DeepSupWeights::new(NUM_HEADS);
    if heads.len() != weights.len() {
        return Err(Error::config(format!(
            "{} decoder heads, deep supervision expects {}",
            heads.len(),
            weights.len()
        )));
    }
    let mut per_head = Vec::with_capacity(heads.len());
    for &head in heads {
        let spatial = graph.value(head).spatial();
        let target = label.downsample(head_factors(label.shape(), spatial)?)?.one_hot::<T>();
        let probs = graph.softmax(head);
        let dice = graph.dice_loss(probs, &target, T::lit(DICE_SMOOTH))?;
        let ce = graph.cross_entropy(probs, &target, T::lit(CE_EPS))?;
        per_head.push(graph.weighted_sum(&[dice, ce], &[T::one(), T::one()])?);
    }
    let total = graph.weighted_sum(&per_head, &weights.values())?;
    Ok(LossTerms { total, per_head })
}
