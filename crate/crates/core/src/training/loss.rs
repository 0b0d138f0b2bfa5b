use crate::error::{ensure_dim, Error, Result};
use crate::numerics::Scalar;

use super::TrainConfig;

/// Positive-class weight `alpha + beta * context_length`.
pub fn class1_weight(cfg: &TrainConfig, context_length: usize) -> Result<f64> {
    let w = cfg.alpha + cfg.beta * context_length as f64;
    if !(w > 0.0) || !w.is_finite() {
        return Err(Error::Contract(format!(
            "class-1 weight must be positive, got {w} (alpha={}, beta={}, L={context_length})",
            cfg.alpha, cfg.beta
        )));
    }
    Ok(w)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Weighted binary cross-entropy of one logit.
#[inline]
pub(crate) fn bce_term<T: Scalar>(z: T, y: bool, w1: T) -> T {
    if y {
        w1 * softplus(-z)
    } else {
        softplus(z)
    }
}

/// Derivative of [`bce_term`] with respect to `z`.
#[inline]
pub(crate) fn bce_grad<T: Scalar>(z: T, y: bool, w1: T) -> T {
    if y {
        w1 * (sigmoid(z) - T::one())
    } else {
        sigmoid(z)
    }
}

/// Mean over tokens of `-[w1 * y * ln σ(z) + (1 - y) * ln(1 - σ(z))]`.
pub fn bce_loss<T: Scalar>(logits: &[T], labels: &[bool], w1: T) -> Result<T> {
    ensure_dim("bce labels", logits.len(), labels.len())?;
    if logits.is_empty() {
        return Err(Error::Contract("bce over zero tokens".into()));
    }
    if !(w1 > T::zero()) {
        return Err(Error::Contract(format!("class-1 weight must be positive, got {w1}")));
    }
    let total: T = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| bce_term(z, y, w1))
        .sum();
    Ok(total / T::of(logits.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn naive(logits: &[f64], labels: &[bool], w1: f64) -> f64 {
        let mut s = 0.0;
        for (&z, &y) in logits.iter().zip(labels) {
            // complement evaluated as its own sigmoid, not as 1 - p
            let p = 1.0 / (1.0 + (-z).exp());
            let not_p = 1.0 / (1.0 + z.exp());
            s += if y { -w1 * p.ln() } else { -not_p.ln() };
        }
        s / logits.len() as f64
    }

    #[test]
    fn weight_formula() {
        let mut cfg = TrainConfig {
            alpha: 1.0,
            beta: 0.0,
            ..TrainConfig::default()
        };
        assert_eq!(class1_weight(&cfg, 12345).unwrap(), 1.0);
        cfg.alpha = 0.0;
        cfg.beta = 1.0 / 64.0;
        assert_eq!(class1_weight(&cfg, 64000).unwrap(), 1000.0);
        assert_eq!(class1_weight(&TrainConfig::default(), 1024).unwrap(), 17.0);
        cfg.beta = 0.0;
        assert!(class1_weight(&cfg, 10).is_err());
    }

    #[test]
    fn weight_is_affine() {
        let cfg = TrainConfig {
            alpha: 0.7,
            beta: 0.03,
            ..TrainConfig::default()
        };
        for (a, b) in [(1, 2), (100, 1000), (64, 64000)] {
            let lhs = class1_weight(&cfg, a).unwrap() + class1_weight(&cfg, b).unwrap();
            let rhs = class1_weight(&cfg, a + b).unwrap() + cfg.alpha;
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_logit_positive() {
        let l = bce_loss(&[0.0f64], &[true], 1.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_separation_goes_to_zero() {
        let l = bce_loss(&[60.0f64, -60.0], &[true, false], 5.0).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn matches_naive_formula() {
        let mut rng = Rng::new(10);
        for _ in 0..100 {
            let z: Vec<f64> = (0..17).map(|_| (rng.next_f64() - 0.5) * 40.0).collect();
            let y: Vec<bool> = (0..17).map(|_| rng.next_u64() & 1 == 1).collect();
            let w1 = 0.1 + rng.next_f64() * 20.0;
            let a = bce_loss(&z, &y, w1).unwrap();
            let b = naive(&z, &y, w1);
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn finite_for_extreme_logits() {
        for z in [-1e300, -745.0, 0.0, 745.0, 1e300] {
            for y in [true, false] {
                assert!(bce_loss(&[z], &[y], 3.0f64).unwrap().is_finite());
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(bce_loss(&[0.0f64], &[true, false], 1.0).is_err());
        assert!(bce_loss(&[0.0f64], &[true], 0.0).is_err());
    }
}
