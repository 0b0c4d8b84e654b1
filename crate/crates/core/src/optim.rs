//! Momentum SGD, the poly learning-rate schedule, and weight initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const INITIAL_LR: f64 = 0.01;
pub const MOMENTUM: f64 = 0.99;
pub const WEIGHT_DECAY: f64 = 3e-5;
pub const POLY_EXPONENT: f64 = 0.99;

/// `lr0 * (1 - epoch / max_epochs)^0.99`.
pub fn poly_lr(initial: f64, epoch: usize, max_epochs: usize) -> f64 {
    assert!(max_epochs > 0, "max_epochs must be positive");
    let frac = 1.0 - epoch as f64 / max_epochs as f64;
    initial * frac.max(0.0).powf(POLY_EXPONENT)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: INITIAL_LR,
            momentum: MOMENTUM,
            weight_decay: WEIGHT_DECAY,
        }
    }
}

/// One update of a named parameter vector with its momentum buffer:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
/// ```
///
/// A non-finite gradient leaves both `param` and `velocity` untouched.
pub fn sgd_step<T: Scalar>(
    name: &str,
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    cfg: SgdConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::arg(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::dim(format!(
            "parameter {name}: {} values, {} gradients, {} momentum entries",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient in parameter {name} at index {i}"
        )));
    }
    let (lr, m, wd) = (T::lit(cfg.lr), T::lit(cfg.momentum), T::lit(cfg.weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = m * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Gain for leaky ReLU with the given negative slope.
pub fn leaky_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

/// Fan-in scaled normal samples: `N(0, (gain / sqrt(fan_in))^2)`.
pub fn kaiming_normal<T: Scalar>(len: usize, fan_in: usize, gain: f64, rng: &mut impl Rng) -> Vec<T> {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite standard deviation");
    (0..len).map(|_| T::lit(dist.sample(rng))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn poly_schedule_points() {
        assert_eq!(poly_lr(0.01, 0, 100), 0.01);
        assert!((poly_lr(0.01, 50, 100) - 0.01 * 0.5f64.powf(0.99)).abs() < 1e-15);
        assert!((poly_lr(0.01, 50, 100) - 0.0050348).abs() < 1e-7);
        assert_eq!(poly_lr(0.01, 100, 100), 0.0);
        assert!(poly_lr(0.01, 30, 60) < poly_lr(0.01, 29, 60));
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        let mut p = vec![0.5f64, -1.25, 3.0];
        let before = p.clone();
        let mut v = vec![0.0; 3];
        let cfg = SgdConfig { weight_decay: 0.0, ..Default::default() };
        sgd_step("w", &mut p, &[0.0; 3], &mut v, cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_from_rest() {
        let mut p = vec![2.0f64, -4.0];
        let g = [0.5, 0.25];
        let mut v = vec![0.0; 2];
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.01 };
        sgd_step("w", &mut p, &g, &mut v, cfg).unwrap();
        assert!((p[0] - (2.0 - 0.1 * (0.5 + 0.01 * 2.0))).abs() < 1e-15);
        assert!((p[1] - (-4.0 - 0.1 * (0.25 - 0.01 * 4.0))).abs() < 1e-15);
    }

    #[test]
    fn two_steps_on_a_quadratic() {
        // f(x) = 1.5 x^2, grad 3x
        let cfg = SgdConfig { lr: 0.05, momentum: 0.8, weight_decay: 0.1 };
        let (mut x, mut vel) = (1.0f64, 0.0f64);
        let mut p = vec![x];
        let mut v = vec![0.0];
        for _ in 0..2 {
            let g = 3.0 * p[0];
            sgd_step("x", &mut p, &[g], &mut v, cfg).unwrap();
            vel = 0.8 * vel + 3.0 * x + 0.1 * x;
            x -= 0.05 * vel;
        }
        assert_eq!(p[0], x);
        // by hand: v1 = 3.1, x1 = 0.845; v2 = 2.48 + 2.6195 = 5.0995, x2 = 0.590025
        assert!((p[0] - 0.590025).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = vec![1.0f32, 2.0];
        let mut v = vec![0.0; 2];
        let err = sgd_step("dec1.head.w", &mut p, &[0.0, f32::NAN], &mut v, SgdConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("dec1.head.w")));
        assert_eq!(err.exit_code(), 4);
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn kaiming_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = kaiming_normal(20000, 50, leaky_gain(0.01), &mut rng);
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / (1.0 + 1e-4) / 50.0;
        assert!((var / expect - 1.0).abs() < 0.05);
    }
}
