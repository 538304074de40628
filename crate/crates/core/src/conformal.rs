//! Rolling conformal calibration of the quantile-regression intervals.
//!
//! One conformal parameter `θ[k]` per prediction step offset widens (or
//! shrinks) the interval `[û + ê_lo − φ(θ), û + ê_hi + φ(θ)]`. After the true
//! control at that offset is observed, `θ[k] += ξ·(miss − α)`, so the long-run
//! miss rate tracks `α` regardless of how the forecast errors are distributed.

use serde::{Deserialize, Serialize};

use crate::dynamics::Control;
use crate::error::{Error, Result};
use crate::quantreg::ErrorQuantiles;

pub const DEFAULT_LEARNING_RATE: f64 = 0.05;

/// Per-agent significance level giving a total miscoverage of `gamma` over
/// `n` conditionally independent agents: `α = 1 − (1 − γ)^(1/n)`.
pub fn corrected_alpha(gamma: f64, n: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid("gamma", format!("must lie in [0, 1), got {gamma}")));
    }
    if n == 0 {
        return Err(Error::invalid("n", "agent count must be at least 1"));
    }
    // −expm1(ln(1 − γ)/n) avoids cancellation for small γ
    Ok(-((-gamma).ln_1p() / n as f64).exp_m1())
}

/// Map from the conformal parameter to the interval widening.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Stretch {
    #[default]
    Linear,
    /// `sign(θ)·(e^{c|θ|} − 1)`.
    Exponential { c: f64 },
}

impl Stretch {
    pub fn apply(&self, theta: f64) -> f64 {
        match *self {
            Stretch::Linear => theta,
            Stretch::Exponential { c } => theta.signum() * (c * theta.abs()).exp_m1(),
        }
    }
}

pub fn stretch(theta: f64, mode: Stretch) -> f64 {
    mode.apply(theta)
}

/// Axis-aligned box over `(u1, u2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInterval {
    pub lower: Control,
    pub upper: Control,
}

impl ControlInterval {
    pub fn new(lower: Control, upper: Control) -> Result<Self> {
        if !lower.is_finite() || !upper.is_finite() {
            return Err(Error::NonFinite("control interval"));
        }
        if lower.u1 > upper.u1 || lower.u2 > upper.u2 {
            return Err(Error::invalid("interval", "lower bound exceeds upper bound"));
        }
        Ok(Self { lower, upper })
    }

    /// Zero-width box at `u`.
    pub fn point(u: Control) -> Self {
        Self { lower: u, upper: u }
    }

    pub fn contains(&self, u: &Control) -> bool {
        u.u1 >= self.lower.u1 && u.u1 <= self.upper.u1 && u.u2 >= self.lower.u2 && u.u2 <= self.upper.u2
    }

    pub fn center(&self) -> Control {
        Control::new(
            0.5 * (self.lower.u1 + self.upper.u1),
            0.5 * (self.lower.u2 + self.upper.u2),
        )
    }

    pub fn width(&self) -> [f64; 2] {
        [self.upper.u1 - self.lower.u1, self.upper.u2 - self.lower.u2]
    }

    /// Bounds along one control dimension.
    pub fn bounds(&self, dim: usize) -> (f64, f64) {
        (self.lower.get(dim), self.upper.get(dim))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlIntervalSequence {
    pub t0: f64,
    pub dt: f64,
    pub boxes: Vec<ControlInterval>,
}

impl ControlIntervalSequence {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalState {
    /// One parameter per prediction step offset.
    pub theta: Vec<f64>,
    pub xi: f64,
    pub alpha: f64,
}

impl ConformalState {
    pub fn new(horizon: usize, xi: f64, alpha: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("horizon", "must be positive"));
        }
        if !(xi >= 0.0 && xi.is_finite()) {
            return Err(Error::invalid("xi", format!("must be nonnegative, got {xi}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
        }
        Ok(Self {
            theta: vec![0.0; horizon],
            xi,
            alpha,
        })
    }

    pub fn horizon(&self) -> usize {
        self.theta.len()
    }

    /// In-place update from the observed controls at each offset; returns the
    /// miss indicators. A miss is the observed control leaving the box in any
    /// dimension.
    pub fn observe(&mut self, observed: &[Control], issued: &[ControlInterval]) -> Result<Vec<bool>> {
        if observed.len() != self.theta.len() || issued.len() != self.theta.len() {
            return Err(Error::LengthMismatch {
                what: "conformal update",
                expected: self.theta.len(),
                got: observed.len().min(issued.len()),
            });
        }
        let misses: Vec<bool> = observed.iter().zip(issued).map(|(u, b)| !b.contains(u)).collect();
        for (k, &miss) in misses.iter().enumerate() {
            self.observe_one(k, miss);
        }
        Ok(misses)
    }

    pub fn observe_one(&mut self, k: usize, miss: bool) {
        let m = if miss { 1.0 } else { 0.0 };
        self.theta[k] += self.xi * (m - self.alpha);
    }
}

pub fn rolling_update(
    cs: &ConformalState,
    u_obs: &[Control],
    i_past: &ControlIntervalSequence,
) -> Result<ConformalState> {
    let mut next = cs.clone();
    next.observe(u_obs, &i_past.boxes)?;
    Ok(next)
}

/// Calibrated box per step:
/// `[û + ê_lo − φ(θ[k]), û + ê_hi + φ(θ[k])]`, collapsed to its midpoint in any
/// dimension where the bounds cross.
pub fn calibrated_interval(
    u_hat: &[Control],
    quantiles: &[ErrorQuantiles],
    theta: &[f64],
    mode: Stretch,
) -> Result<Vec<ControlInterval>> {
    let h = u_hat.len();
    if quantiles.len() != h || theta.len() != h {
        return Err(Error::LengthMismatch {
            what: "calibrated interval inputs",
            expected: h,
            got: if quantiles.len() != h {
                quantiles.len()
            } else {
                theta.len()
            },
        });
    }
    let mut out = Vec::with_capacity(h);
    for k in 0..h {
        let w = mode.apply(theta[k]);
        let mut lo = [0.0; 2];
        let mut hi = [0.0; 2];
        for d in 0..2 {
            let u = u_hat[k].get(d);
            lo[d] = u + quantiles[k].lower[d] - w;
            hi[d] = u + quantiles[k].upper[d] + w;
            if lo[d] > hi[d] {
                let mid = 0.5 * (lo[d] + hi[d]);
                lo[d] = mid;
                hi[d] = mid;
            }
        }
        out.push(ControlInterval::new(Control::from_array(lo), Control::from_array(hi))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corrected_alpha_examples() {
        assert!((corrected_alpha(0.05, 1).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(corrected_alpha(0.0, 7).unwrap(), 0.0);
        // 1 − 0.95^(1/3) evaluated at 50 digits: 0.016952427508441...
        assert!((corrected_alpha(0.05, 3).unwrap() - 0.016_952_427_508_441).abs() < 1e-12);
        assert!(corrected_alpha(1.0, 3).is_err());
        assert!(corrected_alpha(-0.1, 3).is_err());
        assert!(corrected_alpha(0.05, 0).is_err());
    }

    #[test]
    fn stretch_examples() {
        assert_eq!(stretch(0.0, Stretch::Linear), 0.0);
        assert_eq!(stretch(0.0, Stretch::Exponential { c: 2.0 }), 0.0);
        assert_eq!(stretch(0.3, Stretch::Linear), 0.3);
        let e = stretch(2f64.ln(), Stretch::Exponential { c: 1.0 });
        assert!((e - 1.0).abs() < 1e-15);
        assert!((stretch(-(2f64.ln()), Stretch::Exponential { c: 1.0 }) + 1.0).abs() < 1e-15);
    }

    fn q(lo: f64, hi: f64) -> ErrorQuantiles {
        ErrorQuantiles {
            lower: [lo; 2],
            upper: [hi; 2],
        }
    }

    #[test]
    fn calibrated_interval_examples() {
        let u = [Control::new(0.5, 0.5)];
        let b = calibrated_interval(&u, &[q(-0.1, 0.1)], &[0.0], Stretch::Linear).unwrap();
        assert!((b[0].lower.u1 - 0.4).abs() < 1e-12 && (b[0].upper.u1 - 0.6).abs() < 1e-12);
        assert!((b[0].lower.u2 - 0.4).abs() < 1e-12 && (b[0].upper.u2 - 0.6).abs() < 1e-12);

        let b = calibrated_interval(&u, &[q(-0.1, 0.1)], &[0.05], Stretch::Linear).unwrap();
        assert!((b[0].lower.u1 - 0.35).abs() < 1e-12 && (b[0].upper.u1 - 0.65).abs() < 1e-12);

        let z = [Control::ZERO];
        let b = calibrated_interval(&z, &[q(0.2, -0.2)], &[0.0], Stretch::Linear).unwrap();
        assert_eq!(b[0], ControlInterval::point(Control::ZERO));

        assert!(calibrated_interval(&z, &[q(0.0, 0.0)], &[0.0, 0.0], Stretch::Linear).is_err());
    }

    #[test]
    fn rolling_update_examples() {
        let seq = |b: ControlInterval| ControlIntervalSequence {
            t0: 0.0,
            dt: 0.5,
            boxes: vec![b],
        };
        let unit = ControlInterval::new(Control::new(-1.0, -1.0), Control::new(1.0, 1.0)).unwrap();

        let frozen = ConformalState::new(1, 0.0, 0.05).unwrap();
        let next = rolling_update(&frozen, &[Control::new(5.0, 0.0)], &seq(unit)).unwrap();
        assert_eq!(next.theta, vec![0.0]);

        let cs = ConformalState::new(1, 0.1, 0.05).unwrap();
        let covered = rolling_update(&cs, &[Control::ZERO], &seq(unit)).unwrap();
        assert!((covered.theta[0] + 0.005).abs() < 1e-15);
        // outside in the second dimension only still counts as a miss
        let missed = rolling_update(&cs, &[Control::new(0.0, 1.5)], &seq(unit)).unwrap();
        assert!((missed.theta[0] - 0.095).abs() < 1e-15);

        assert!(rolling_update(&cs, &[Control::ZERO, Control::ZERO], &seq(unit)).is_err());
    }

    proptest! {
        #[test]
        fn theta_moves_are_bounded(
            xi in 0.0..1.0f64,
            alpha in 0.01..0.99f64,
            u in (-3.0..3.0f64, -3.0..3.0f64),
        ) {
            let mut cs = ConformalState::new(1, xi, alpha).unwrap();
            let b = ControlInterval::new(Control::new(-1.0, -1.0), Control::new(1.0, 1.0)).unwrap();
            let before = cs.theta[0];
            cs.observe(&[Control::new(u.0, u.1)], &[b]).unwrap();
            prop_assert!((cs.theta[0] - before).abs() <= xi * alpha.max(1.0 - alpha) + 1e-15);
        }

        #[test]
        fn corrected_alpha_is_monotone(gamma in 0.001..0.9f64, n in 1usize..20) {
            let a = corrected_alpha(gamma, n).unwrap();
            prop_assert!(corrected_alpha(gamma, n + 1).unwrap() < a);
            prop_assert!(corrected_alpha(gamma + 0.05, n).unwrap() > a);
            // union of n independent α-misses recovers γ
            prop_assert!((1.0 - (1.0 - a).powi(n as i32) - gamma).abs() < 1e-12);
        }

        #[test]
        fn intervals_are_ordered(
            u in (-5.0..5.0f64, -5.0..5.0f64),
            lo in (-2.0..2.0f64, -2.0..2.0f64),
            hi in (-2.0..2.0f64, -2.0..2.0f64),
            theta in -3.0..3.0f64,
        ) {
            let quant = ErrorQuantiles { lower: [lo.0, lo.1], upper: [hi.0, hi.1] };
            for mode in [Stretch::Linear, Stretch::Exponential { c: 1.5 }] {
                let b = calibrated_interval(&[Control::new(u.0, u.1)], &[quant], &[theta], mode).unwrap();
                prop_assert!(b[0].lower.u1 <= b[0].upper.u1);
                prop_assert!(b[0].lower.u2 <= b[0].upper.u2);
            }
        }
    }
}
