//! Online linear quantile regression on forecast uncertainty features.
//!
//! Each model predicts the `ε`-quantile of the forecast error as `βᵀσ` and is
//! trained by subgradient steps on the pinball loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Control;
use crate::error::{Error, Result};
use crate::forecaster::UncertaintyVector;

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;

/// `L(y, ŷ) = (y − ŷ)·ε` if `y ≥ ŷ`, else `(ŷ − y)·(1 − ε)`.
pub fn pinball_loss(y: f64, y_hat: f64, epsilon: f64) -> f64 {
    if y >= y_hat {
        (y - y_hat) * epsilon
    } else {
        (y_hat - y) * (1.0 - epsilon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileModel {
    pub beta: Vec<f64>,
    pub epsilon: f64,
    pub zeta: f64,
}

impl QuantileModel {
    /// Zero-initialized model.
    pub fn new(dim: usize, epsilon: f64, zeta: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "feature dimension must be positive"));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::invalid("epsilon", format!("must lie in (0, 1), got {epsilon}")));
        }
        if !(zeta >= 0.0 && zeta.is_finite()) {
            return Err(Error::invalid("zeta", format!("must be nonnegative, got {zeta}")));
        }
        Ok(Self {
            beta: vec![0.0; dim],
            epsilon,
            zeta,
        })
    }

    /// Weights drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(dim: usize, epsilon: f64, zeta: f64, scale: f64, rng: &mut R) -> Result<Self> {
        let mut m = Self::new(dim, epsilon, zeta)?;
        if scale > 0.0 {
            for b in &mut m.beta {
                *b = rng.gen_range(-scale..=scale);
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    fn check_dim(&self, sigma: &UncertaintyVector) -> Result<()> {
        if sigma.dim() != self.dim() {
            return Err(Error::LengthMismatch {
                what: "uncertainty features",
                expected: self.dim(),
                got: sigma.dim(),
            });
        }
        Ok(())
    }

    /// Predicted error quantile `βᵀσ`.
    pub fn predict(&self, sigma: &UncertaintyVector) -> Result<f64> {
        self.check_dim(sigma)?;
        Ok(dot(&self.beta, sigma.as_slice()))
    }

    /// One pinball-loss subgradient step toward the observed error `e`.
    pub fn update(&mut self, sigma: &UncertaintyVector, e: f64) -> Result<()> {
        if !e.is_finite() {
            return Err(Error::NonFinite("observed error"));
        }
        let pred = self.predict(sigma)?;
        let step = if e >= pred {
            self.zeta * self.epsilon
        } else {
            -self.zeta * (1.0 - self.epsilon)
        };
        for (b, s) in self.beta.iter_mut().zip(sigma.as_slice()) {
            *b += step * s;
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("quantile weights"));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn qr_predict(m: &QuantileModel, sigma: &UncertaintyVector) -> Result<f64> {
    m.predict(sigma)
}

pub fn qr_update(m: &QuantileModel, sigma: &UncertaintyVector, e: f64) -> Result<QuantileModel> {
    let mut next = m.clone();
    next.update(sigma, e)?;
    Ok(next)
}

/// Lower and upper quantile models for one (step, control dimension) slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantilePair {
    pub lower: QuantileModel,
    pub upper: QuantileModel,
}

/// Quantile models for every prediction step and both control dimensions,
/// at levels `α/2` and `1 − α/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileBank {
    /// Indexed `[step][dim]`.
    pub slots: Vec<[QuantilePair; 2]>,
}

/// Per-step lower and upper error quantiles, one value per control dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorQuantiles {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

impl QuantileBank {
    pub fn new(horizon: usize, dim: usize, alpha: f64, zeta: f64) -> Result<Self> {
        Self::build(horizon, dim, alpha, |eps| QuantileModel::new(dim, eps, zeta))
    }

    pub fn random<R: Rng + ?Sized>(
        horizon: usize,
        dim: usize,
        alpha: f64,
        zeta: f64,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(horizon, dim, alpha, |eps| {
            QuantileModel::random(dim, eps, zeta, scale, rng)
        })
    }

    fn build(
        horizon: usize,
        dim: usize,
        alpha: f64,
        mut make: impl FnMut(f64) -> Result<QuantileModel>,
    ) -> Result<Self> {
        if horizon == 0 || dim == 0 {
            return Err(Error::invalid(
                "horizon",
                "horizon and feature dimension must be positive",
            ));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
        }
        let mut slots = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let mut pair = || -> Result<QuantilePair> {
                Ok(QuantilePair {
                    lower: make(alpha / 2.0)?,
                    upper: make(1.0 - alpha / 2.0)?,
                })
            };
            slots.push([pair()?, pair()?]);
        }
        Ok(Self { slots })
    }

    pub fn horizon(&self) -> usize {
        self.slots.len()
    }

    pub fn model_count(&self) -> usize {
        self.slots.len() * 4
    }

    fn slot(&self, step: usize) -> Result<&[QuantilePair; 2]> {
        self.slots.get(step).ok_or(Error::LengthMismatch {
            what: "prediction step",
            expected: self.slots.len(),
            got: step + 1,
        })
    }

    pub fn predict(&self, step: usize, sigma: &UncertaintyVector) -> Result<ErrorQuantiles> {
        let slot = self.slot(step)?;
        let mut q = ErrorQuantiles {
            lower: [0.0; 2],
            upper: [0.0; 2],
        };
        for d in 0..2 {
            q.lower[d] = slot[d].lower.predict(sigma)?;
            q.upper[d] = slot[d].upper.predict(sigma)?;
        }
        Ok(q)
    }

    pub fn predict_all(&self, sigma: &[UncertaintyVector]) -> Result<Vec<ErrorQuantiles>> {
        if sigma.len() != self.horizon() {
            return Err(Error::LengthMismatch {
                what: "uncertainty steps",
                expected: self.horizon(),
                got: sigma.len(),
            });
        }
        sigma.iter().enumerate().map(|(k, s)| self.predict(k, s)).collect()
    }

    /// Updates the four models of `step` with the observed error `u − û`.
    pub fn update(&mut self, step: usize, sigma: &UncertaintyVector, error: Control) -> Result<()> {
        self.slot(step)?;
        let slot = &mut self.slots[step];
        for d in 0..2 {
            let e = error.get(d);
            slot[d].lower.update(sigma, e)?;
            slot[d].upper.update(sigma, e)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sig(v: &[f64]) -> UncertaintyVector {
        UncertaintyVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball_loss(0.3, 0.3, 0.5), 0.0);
        assert!((pinball_loss(1.0, 0.0, 0.9) - 0.9).abs() < 1e-15);
        assert!((pinball_loss(0.0, 1.0, 0.9) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn predict_examples() {
        let m = QuantileModel::new(3, 0.5, 0.01).unwrap();
        assert_eq!(m.predict(&sig(&[4.0, 1.0, 2.0])).unwrap(), 0.0);
        let m = QuantileModel {
            beta: vec![1.0, 0.0, 0.0],
            ..m
        };
        assert_eq!(m.predict(&sig(&[2.0, 5.0, 1.0])).unwrap(), 2.0);
        let m = QuantileModel {
            beta: vec![0.5, 0.5],
            epsilon: 0.5,
            zeta: 0.01,
        };
        assert_eq!(qr_predict(&m, &sig(&[2.0, 4.0])).unwrap(), 3.0);
        assert!(matches!(m.predict(&sig(&[1.0])), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn update_examples() {
        let frozen = QuantileModel::new(1, 0.9, 0.0).unwrap();
        assert_eq!(qr_update(&frozen, &sig(&[1.0]), 5.0).unwrap(), frozen);

        let m = QuantileModel::new(1, 0.9, 0.1).unwrap();
        let up = qr_update(&m, &sig(&[1.0]), 1.0).unwrap();
        assert!((up.beta[0] - 0.09).abs() < 1e-15);
        let down = qr_update(&m, &sig(&[1.0]), -1.0).unwrap();
        assert!((down.beta[0] + 0.01).abs() < 1e-15);
        // tie takes the y ≥ ŷ branch
        let tie = qr_update(&m, &sig(&[1.0]), 0.0).unwrap();
        assert!(tie.beta[0] > 0.0);
    }

    #[test]
    fn invalid_levels_rejected() {
        assert!(QuantileModel::new(2, 0.0, 0.1).is_err());
        assert!(QuantileModel::new(2, 1.0, 0.1).is_err());
        assert!(QuantileModel::new(0, 0.5, 0.1).is_err());
        assert!(QuantileBank::new(6, 2, 1.2, 0.01).is_err());
    }

    #[test]
    fn bank_layout() {
        let bank = QuantileBank::new(6, 4, 0.1, 0.01).unwrap();
        assert_eq!(bank.model_count(), 24);
        for slot in &bank.slots {
            for pair in slot {
                assert!((pair.lower.epsilon - 0.05).abs() < 1e-15);
                assert!((pair.upper.epsilon - 0.95).abs() < 1e-15);
                assert_eq!(pair.lower.dim(), 4);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = QuantileBank::random(6, 4, 0.1, 0.01, 0.1, &mut rng).unwrap();
        assert!(r.slots[0][0].lower.beta.iter().any(|b| *b != 0.0));
    }

    #[test]
    fn bank_update_touches_only_its_step() {
        let mut bank = QuantileBank::new(3, 2, 0.1, 0.1).unwrap();
        bank.update(1, &sig(&[1.0, 0.5]), Control::new(1.0, -1.0)).unwrap();
        assert!(bank.slots[0][0].upper.beta.iter().all(|b| *b == 0.0));
        assert!(bank.slots[1][0].upper.beta[0] > 0.0);
        assert!(bank.slots[1][1].lower.beta[0] < 0.0);
        assert!(bank.update(3, &sig(&[1.0, 0.5]), Control::ZERO).is_err());
    }

    /// Upper quantile above lower quantile after training on symmetric noise.
    #[test]
    fn upper_dominates_lower_after_training() {
        let mut ok = 0;
        let trials = 40;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 1.0).unwrap();
            let mut lo = QuantileModel::new(2, 0.1, 0.01).unwrap();
            let mut hi = QuantileModel::new(2, 0.9, 0.01).unwrap();
            for _ in 0..3000 {
                let s: f64 = rng.gen_range(0.0..2.0);
                let sigma = sig(&[1.0, s]);
                let e = noise.sample(&mut rng) * (0.5 + s);
                lo.update(&sigma, e).unwrap();
                hi.update(&sigma, e).unwrap();
            }
            let probe = sig(&[1.0, rng.gen_range(0.0..2.0)]);
            if hi.predict(&probe).unwrap() >= lo.predict(&probe).unwrap() {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.95 * trials as f64, "{ok}/{trials}");
    }

    proptest! {
        #[test]
        fn pinball_is_nonnegative(y in -10.0..10.0f64, yh in -10.0..10.0f64, eps in 0.01..0.99f64) {
            prop_assert!(pinball_loss(y, yh, eps) >= 0.0);
        }

        /// The update direction is minus the finite-difference gradient of the
        /// pinball loss in β.
        #[test]
        fn update_matches_finite_difference_gradient(
            beta in proptest::collection::vec(-2.0..2.0f64, 3),
            s in proptest::collection::vec(0.0..3.0f64, 3),
            e in -5.0..5.0f64,
            eps in 0.05..0.95f64,
        ) {
            let sigma = sig(&s);
            let pred: f64 = beta.iter().zip(&s).map(|(b, x)| b * x).sum();
            prop_assume!((e - pred).abs() > 1e-3);
            let zeta = 0.1;
            let m = QuantileModel { beta: beta.clone(), epsilon: eps, zeta };
            let next = qr_update(&m, &sigma, e).unwrap();
            let h = 1e-7;
            for j in 0..3 {
                let mut bp = beta.clone();
                let mut bm = beta.clone();
                bp[j] += h;
                bm[j] -= h;
                let lp = pinball_loss(e, bp.iter().zip(&s).map(|(b, x)| b * x).sum(), eps);
                let lm = pinball_loss(e, bm.iter().zip(&s).map(|(b, x)| b * x).sum(), eps);
                let grad = (lp - lm) / (2.0 * h);
                let step = next.beta[j] - beta[j];
                prop_assert!((step + zeta * grad).abs() < 1e-6, "j {} step {} grad {}", j, step, grad);
            }
        }
    }
}
