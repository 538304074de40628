//! Forecasting interface and the two reference forecasters.
//!
//! A forecaster maps an agent's observed history to `h` predicted controls
//! `û` plus one nonnegative uncertainty feature vector `σ` per predicted step.
//! Ground-truth controls are recovered from state histories by finite
//! differences ([`estimate_controls`]).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_unchecked, AgentState, Control, ControlSequence, Trajectory};
use crate::error::{Error, Result};

/// Default number of history states a forecaster needs.
pub const DEFAULT_CONTEXT: usize = 8;
/// Number of GMM-derived features.
pub const GMM_FEATURE_DIM: usize = 6;

const PSD_TOL: f64 = 1e-9;
const WEIGHT_TOL: f64 = 1e-9;

/// Nonnegative feature vector describing forecast uncertainty at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UncertaintyVector(Vec<f64>);

impl UncertaintyVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("sigma", "feature vector must be nonempty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sigma"));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("sigma", "features must be nonnegative"));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<f64>> for UncertaintyVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<UncertaintyVector> for Vec<f64> {
    fn from(v: UncertaintyVector) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmMode {
    pub weight: f64,
    pub mean: Control,
    /// Covariance over `(u1, u2)`.
    pub cov: [[f64; 2]; 2],
}

/// Per prediction step, a Gaussian mixture over controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmForecast {
    pub steps: Vec<Vec<GmmMode>>,
}

impl GmmForecast {
    pub fn validate(&self) -> Result<()> {
        for modes in &self.steps {
            if modes.is_empty() {
                return Err(Error::invalid("gmm", "a step has no modes"));
            }
            let total: f64 = modes.iter().map(|m| m.weight).sum();
            if modes.iter().any(|m| m.weight < 0.0 || !m.weight.is_finite()) || (total - 1.0).abs() > WEIGHT_TOL {
                return Err(Error::invalid(
                    "gmm",
                    format!("weights must be nonnegative and sum to 1, got {total}"),
                ));
            }
            for m in modes {
                check_psd(&m.cov)?;
            }
        }
        Ok(())
    }
}

fn check_psd(c: &[[f64; 2]; 2]) -> Result<()> {
    if c.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gmm covariance"));
    }
    if (c[0][1] - c[1][0]).abs() > PSD_TOL {
        return Err(Error::invalid("gmm", "covariance is not symmetric"));
    }
    let half_trace = 0.5 * (c[0][0] + c[1][1]);
    let disc = (0.5 * (c[0][0] - c[1][1])).hypot(c[0][1]);
    if half_trace - disc < -PSD_TOL {
        return Err(Error::invalid("gmm", "covariance has a negative eigenvalue"));
    }
    Ok(())
}

/// Uncertainty features of one GMM step:
/// `[1, √var(u1), √var(u2), |cov(u1,u2)|, max mode-mean distance, weight entropy]`,
/// taken from the highest-weighted mode (first on ties).
pub fn gmm_uncertainty_features(g: &GmmForecast, step: usize) -> Result<UncertaintyVector> {
    let modes = g
        .steps
        .get(step)
        .ok_or_else(|| Error::invalid("step", format!("{step} out of range for {} steps", g.steps.len())))?;
    if modes.is_empty() {
        return Err(Error::invalid("gmm", "a step has no modes"));
    }
    for m in modes {
        check_psd(&m.cov)?;
    }
    let mut top = &modes[0];
    for m in &modes[1..] {
        if m.weight > top.weight {
            top = m;
        }
    }
    let mut spread: f64 = 0.0;
    for (i, a) in modes.iter().enumerate() {
        for b in &modes[i + 1..] {
            spread = spread.max((a.mean.u1 - b.mean.u1).hypot(a.mean.u2 - b.mean.u2));
        }
    }
    let entropy: f64 = modes
        .iter()
        .filter(|m| m.weight > 0.0)
        .map(|m| -m.weight * m.weight.ln())
        .sum();
    UncertaintyVector::new(vec![
        1.0,
        top.cov[0][0].max(0.0).sqrt(),
        top.cov[1][1].max(0.0).sqrt(),
        top.cov[0][1].abs(),
        spread,
        entropy.max(0.0),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    /// Predicted controls for steps `t .. t+h`.
    pub u_hat: ControlSequence,
    /// One feature vector per predicted step.
    pub sigma: Vec<UncertaintyVector>,
    pub gmm: Option<GmmForecast>,
}

impl Forecast {
    pub fn horizon(&self) -> usize {
        self.u_hat.len()
    }
}

/// Everything a forecaster may look at when predicting one agent.
#[derive(Debug, Clone)]
pub struct ForecastQuery<'a> {
    pub agent_id: u32,
    /// Timestep index at which the forecast is issued.
    pub step: usize,
    /// Observed states up to and including `step`.
    pub history: &'a Trajectory,
    /// True future controls, only consumed by oracle forecasters.
    pub truth: Option<&'a [Control]>,
    /// Multiplier on injected noise (oracle forecasters only).
    pub noise_gain: f64,
}

pub trait Forecaster: Send + Sync {
    fn horizon(&self) -> usize;
    /// Minimum number of history states.
    fn context(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn predict(&self, query: &ForecastQuery<'_>) -> Result<Forecast>;
}

/// Finite-difference controls from consecutive states:
/// `u1 = Δv/dt`, `u2 = wrap(Δθ)/dt`.
pub fn estimate_controls(history: &Trajectory) -> Result<ControlSequence> {
    if history.len() < 2 {
        return Err(Error::InsufficientHistory {
            need: 2,
            got: history.len(),
        });
    }
    let dt = history.dt;
    let controls = history
        .states
        .windows(2)
        .map(|w| Control::new((w[1].v - w[0].v) / dt, wrap_unchecked(w[1].theta - w[0].theta) / dt))
        .collect();
    ControlSequence::new(history.t0, dt, controls)
}

/// Speed and heading from a position-only track by forward differences; the
/// final sample repeats the previous speed and heading.
pub fn reconstruct_states(positions: &[[f64; 2]], dt: f64) -> Result<Vec<AgentState>> {
    if positions.len() < 2 {
        return Err(Error::InsufficientHistory {
            need: 2,
            got: positions.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", "must be positive"));
    }
    let mut out = Vec::with_capacity(positions.len());
    let mut last = (0.0, 0.0);
    for (i, p) in positions.iter().enumerate() {
        if let Some(next) = positions.get(i + 1) {
            let (dx, dy) = (next[0] - p[0], next[1] - p[1]);
            let heading = if dx == 0.0 && dy == 0.0 { last.1 } else { dy.atan2(dx) };
            last = (dx.hypot(dy) / dt, heading);
        }
        out.push(AgentState::new(p[0], p[1], last.0, last.1));
    }
    Ok(out)
}

fn check_context(query: &ForecastQuery<'_>, need: usize) -> Result<()> {
    if query.history.len() < need {
        return Err(Error::InsufficientHistory {
            need,
            got: query.history.len(),
        });
    }
    Ok(())
}

/// Repeats the mean of the last two estimated controls, wrapped in a
/// three-mode GMM whose covariance grows linearly with the prediction step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantControlGmm {
    pub horizon: usize,
    pub context: usize,
    /// Mode weights; the first mode is centred on the point forecast.
    pub weights: [f64; 3],
    /// Mean offsets of the three modes from the point forecast.
    pub offsets: [Control; 3],
    /// Diagonal covariance of every mode at the first step.
    pub base_var: [f64; 2],
    /// Off-diagonal covariance at the first step.
    pub base_cov: f64,
    /// Zeroes the variance/covariance features (spread and entropy are kept).
    pub drop_covariance_features: bool,
}

impl Default for ConstantControlGmm {
    fn default() -> Self {
        Self {
            horizon: crate::dynamics::DEFAULT_HORIZON,
            context: DEFAULT_CONTEXT,
            weights: [0.6, 0.2, 0.2],
            offsets: [Control::ZERO, Control::new(0.5, 0.1), Control::new(-0.5, -0.1)],
            base_var: [0.04, 0.01],
            base_cov: 0.002,
            drop_covariance_features: false,
        }
    }
}

impl Forecaster for ConstantControlGmm {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn context(&self) -> usize {
        self.context.max(3)
    }

    fn feature_dim(&self) -> usize {
        GMM_FEATURE_DIM
    }

    fn predict(&self, query: &ForecastQuery<'_>) -> Result<Forecast> {
        check_context(query, self.context())?;
        let est = estimate_controls(query.history)?;
        let n = est.len();
        let recent = &est.controls[n.saturating_sub(2)..];
        let mean = Control::new(
            recent.iter().map(|c| c.u1).sum::<f64>() / recent.len() as f64,
            recent.iter().map(|c| c.u2).sum::<f64>() / recent.len() as f64,
        );
        let mut steps = Vec::with_capacity(self.horizon);
        for k in 0..self.horizon {
            let g = (k + 1) as f64;
            let cov = [
                [self.base_var[0] * g, self.base_cov * g],
                [self.base_cov * g, self.base_var[1] * g],
            ];
            steps.push(
                (0..3)
                    .map(|i| GmmMode {
                        weight: self.weights[i],
                        mean: Control::new(mean.u1 + self.offsets[i].u1, mean.u2 + self.offsets[i].u2),
                        cov,
                    })
                    .collect(),
            );
        }
        let gmm = GmmForecast { steps };
        gmm.validate()?;
        let sigma = (0..self.horizon)
            .map(|k| {
                let mut f = gmm_uncertainty_features(&gmm, k)?;
                if self.drop_covariance_features {
                    for v in &mut f.0[1..4] {
                        *v = 0.0;
                    }
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        let t0 = query.history.time(query.history.len() - 1);
        Ok(Forecast {
            u_hat: ControlSequence::new(t0, query.history.dt, vec![mean; self.horizon])?,
            sigma,
            gmm: Some(gmm),
        })
    }
}

/// Returns the true future controls plus seeded Gaussian noise. The reported
/// features are `[1, std·(1 + growth·k)]`; they do not see `noise_gain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleNoise {
    pub horizon: usize,
    pub context: usize,
    pub std: f64,
    pub step_growth: f64,
    pub seed: u64,
}

impl Default for OracleNoise {
    fn default() -> Self {
        Self {
            horizon: crate::dynamics::DEFAULT_HORIZON,
            context: DEFAULT_CONTEXT,
            std: 0.2,
            step_growth: 0.25,
            seed: 0,
        }
    }
}

impl OracleNoise {
    pub fn step_std(&self, k: usize) -> f64 {
        self.std * (1.0 + self.step_growth * k as f64)
    }
}

/// Seed of the noise stream for one `(agent, step)` pair.
pub fn stream_seed(seed: u64, agent_id: u32, step: usize) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed
        ^ (agent_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (step as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Forecaster for OracleNoise {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn context(&self) -> usize {
        self.context.max(1)
    }

    fn feature_dim(&self) -> usize {
        2
    }

    fn predict(&self, query: &ForecastQuery<'_>) -> Result<Forecast> {
        check_context(query, self.context())?;
        let truth = query
            .truth
            .ok_or_else(|| Error::invalid("truth", "oracle forecaster needs the true future"))?;
        if truth.is_empty() {
            return Err(Error::invalid("truth", "true future is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, query.agent_id, query.step));
        let mut u_hat = Vec::with_capacity(self.horizon);
        let mut sigma = Vec::with_capacity(self.horizon);
        for k in 0..self.horizon {
            // past the recording, hold the last known control
            let base = truth[k.min(truth.len() - 1)];
            let s = self.step_std(k);
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            let scale = s * query.noise_gain;
            u_hat.push(Control::new(base.u1 + scale * n1, base.u2 + scale * n2));
            sigma.push(UncertaintyVector::new(vec![1.0, s])?);
        }
        let t0 = query.history.time(query.history.len() - 1);
        Ok(Forecast {
            u_hat: ControlSequence::new(t0, query.history.dt, u_hat)?,
            sigma,
            gmm: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::rollout;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn traj(states: Vec<AgentState>) -> Trajectory {
        Trajectory::new(0.0, 0.5, states).unwrap()
    }

    #[test]
    fn estimate_examples() {
        let still = traj(vec![AgentState::default(); 4]);
        let u = estimate_controls(&still).unwrap();
        assert_eq!(u.len(), 3);
        assert!(u.controls.iter().all(|c| *c == Control::ZERO));

        let ramp = traj(vec![
            AgentState::new(0.0, 0.0, 0.0, 0.0),
            AgentState::new(0.0, 0.0, 0.5, 0.0),
            AgentState::new(0.0, 0.0, 1.0, 0.0),
        ]);
        let u = estimate_controls(&ramp).unwrap();
        assert_eq!(u.controls, vec![Control::new(1.0, 0.0); 2]);

        let turn = traj(vec![
            AgentState::new(0.0, 0.0, 0.0, 0.0),
            AgentState::new(0.0, 0.0, 0.0, PI / 4.0),
            AgentState::new(0.0, 0.0, 0.0, PI / 2.0),
        ]);
        let u = estimate_controls(&turn).unwrap();
        for c in &u.controls {
            assert!((c.u2 - PI / 2.0).abs() < 1e-12);
        }

        assert!(estimate_controls(&traj(vec![AgentState::default()])).is_err());
    }

    #[test]
    fn estimate_wraps_across_pi() {
        let t = traj(vec![
            AgentState::new(0.0, 0.0, 1.0, PI - 0.1),
            AgentState::new(0.0, 0.0, 1.0, -PI + 0.1),
        ]);
        let u = estimate_controls(&t).unwrap();
        assert!((u.controls[0].u2 - 0.4).abs() < 1e-9);
    }

    #[test]
    fn reconstruct_from_positions() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]];
        let s = reconstruct_states(&pts, 0.5).unwrap();
        assert!((s[0].v - 2.0).abs() < 1e-12 && s[0].theta.abs() < 1e-12);
        assert!((s[1].v - 2.0).abs() < 1e-12 && (s[1].theta - PI / 2.0).abs() < 1e-12);
        assert_eq!(s[2].v, s[1].v);
    }

    fn mode(w: f64, m: (f64, f64), cov: [[f64; 2]; 2]) -> GmmMode {
        GmmMode {
            weight: w,
            mean: Control::new(m.0, m.1),
            cov,
        }
    }

    #[test]
    fn gmm_feature_examples() {
        let g = GmmForecast {
            steps: vec![vec![mode(1.0, (0.3, 0.1), [[0.0; 2]; 2])]],
        };
        let f = gmm_uncertainty_features(&g, 0).unwrap();
        assert_eq!(f.as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let id = [[1.0, 0.0], [0.0, 1.0]];
        let g = GmmForecast {
            steps: vec![vec![mode(0.5, (0.0, 0.0), id), mode(0.5, (2.0, 0.0), id)]],
        };
        let f = gmm_uncertainty_features(&g, 0).unwrap();
        assert!((f.as_slice()[4] - 2.0).abs() < 1e-12);
        assert!((f.as_slice()[5] - 2f64.ln()).abs() < 1e-12);

        let g = GmmForecast {
            steps: vec![vec![
                mode(1.0, (0.0, 0.0), [[0.25, 0.0], [0.0, 0.04]]),
                mode(0.0, (1.0, 0.0), id),
                mode(0.0, (0.0, 3.0), id),
            ]],
        };
        let f = gmm_uncertainty_features(&g, 0).unwrap();
        assert_eq!(f.as_slice()[5], 0.0);
        assert!((f.as_slice()[1] - 0.5).abs() < 1e-12);
        assert!((f.as_slice()[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn gmm_rejects_indefinite_covariance() {
        let g = GmmForecast {
            steps: vec![vec![mode(1.0, (0.0, 0.0), [[1.0, 2.0], [2.0, 1.0]])]],
        };
        assert!(gmm_uncertainty_features(&g, 0).is_err());
        assert!(gmm_uncertainty_features(&g, 3).is_err());
    }

    fn straight_history(n: usize, v: f64) -> Trajectory {
        let states = (0..n)
            .map(|i| AgentState::new(i as f64 * v * 0.5, 0.0, v, 0.0))
            .collect();
        traj(states)
    }

    #[test]
    fn constant_control_on_constant_velocity() {
        let f = ConstantControlGmm::default();
        let h = straight_history(8, 3.0);
        let q = ForecastQuery {
            agent_id: 1,
            step: 7,
            history: &h,
            truth: None,
            noise_gain: 1.0,
        };
        let out = f.predict(&q).unwrap();
        assert_eq!(out.u_hat.len(), 6);
        assert_eq!(out.sigma.len(), 6);
        assert!(out.u_hat.controls.iter().all(|c| *c == Control::ZERO));
        assert_eq!(out.u_hat.t0, 3.5);
        // variance features grow with the step
        assert!(out.sigma[5].as_slice()[1] > out.sigma[0].as_slice()[1]);

        let short = straight_history(5, 3.0);
        let q = ForecastQuery { history: &short, ..q };
        assert!(matches!(f.predict(&q), Err(Error::InsufficientHistory { .. })));
    }

    #[test]
    fn dropped_covariance_features_are_zero() {
        let f = ConstantControlGmm {
            drop_covariance_features: true,
            ..Default::default()
        };
        let h = straight_history(8, 3.0);
        let q = ForecastQuery {
            agent_id: 1,
            step: 7,
            history: &h,
            truth: None,
            noise_gain: 1.0,
        };
        let out = f.predict(&q).unwrap();
        for s in &out.sigma {
            assert_eq!(&s.as_slice()[1..4], &[0.0, 0.0, 0.0]);
            assert!(s.as_slice()[4] > 0.0);
        }
    }

    fn truth() -> Vec<Control> {
        (0..6).map(|k| Control::new(0.1 * k as f64, -0.05 * k as f64)).collect()
    }

    #[test]
    fn oracle_without_noise_is_exact() {
        let f = OracleNoise {
            std: 0.0,
            ..Default::default()
        };
        let h = straight_history(8, 1.0);
        let t = truth();
        let q = ForecastQuery {
            agent_id: 4,
            step: 7,
            history: &h,
            truth: Some(&t),
            noise_gain: 1.0,
        };
        assert_eq!(f.predict(&q).unwrap().u_hat.controls, t);
    }

    #[test]
    fn oracle_noise_replays_seeded_stream() {
        let f = OracleNoise {
            std: 0.2,
            seed: 11,
            ..Default::default()
        };
        let h = straight_history(8, 1.0);
        let t = truth();
        let q = ForecastQuery {
            agent_id: 2,
            step: 30,
            history: &h,
            truth: Some(&t),
            noise_gain: 1.0,
        };
        let out = f.predict(&q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(11, 2, 30));
        for k in 0..6 {
            let s = 0.2 * (1.0 + 0.25 * k as f64);
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            assert_eq!(out.u_hat.controls[k].u1, t[k].u1 + s * n1);
            assert_eq!(out.u_hat.controls[k].u2, t[k].u2 + s * n2);
            assert_eq!(out.sigma[k].as_slice(), &[1.0, s]);
        }
        // a different agent sees an independent stream
        let other = f
            .predict(&ForecastQuery {
                agent_id: 3,
                ..q.clone()
            })
            .unwrap();
        assert_ne!(other.u_hat.controls, out.u_hat.controls);
        // identical query, identical output
        assert_eq!(f.predict(&q).unwrap(), out);
    }

    proptest! {
        #[test]
        fn estimated_controls_reproduce_speed_and_heading(
            v0 in 0.0..10.0f64,
            th0 in -3.0..3.0f64,
            us in proptest::collection::vec((-2.0..2.0f64, -0.8..0.8f64), 1..12),
        ) {
            let controls: Vec<Control> = us.iter().map(|&(a, b)| Control::new(a, b)).collect();
            let seq = ControlSequence::new(0.0, 0.5, controls).unwrap();
            let hist = rollout(&AgentState::new(0.0, 0.0, v0, th0), &seq).unwrap();
            let est = estimate_controls(&hist).unwrap();
            let again = rollout(hist.first(), &est).unwrap();
            for (a, b) in again.states.iter().zip(&hist.states) {
                prop_assert!((a.v - b.v).abs() < 1e-9);
                prop_assert!(crate::dynamics::wrap_unchecked(a.theta - b.theta).abs() < 1e-9);
                prop_assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6);
            }
        }

        #[test]
        fn forecast_length_contract(h in 1usize..10, step in 0usize..100) {
            let hist = straight_history(9, 2.0);
            let t = truth();
            let q = ForecastQuery { agent_id: 0, step, history: &hist, truth: Some(&t), noise_gain: 1.0 };
            let a = OracleNoise { horizon: h, ..Default::default() }.predict(&q).unwrap();
            let b = ConstantControlGmm { horizon: h, ..Default::default() }.predict(&q).unwrap();
            prop_assert_eq!(a.u_hat.len(), h);
            prop_assert_eq!(a.sigma.len(), h);
            prop_assert_eq!(b.u_hat.len(), h);
            prop_assert_eq!(b.sigma.len(), h);
        }
    }
}
