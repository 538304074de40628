//! Extended Dubins car: state `(x, y, v, θ)`, controls `(acceleration, turn rate)`.
//!
//! ```text
//! ẋ = v cos θ,  ẏ = v sin θ,  v̇ = u1,  θ̇ = u2
//! ```
//!
//! Integration is classical RK4. Speed is not clamped; heading is kept in
//! `(−π, π]`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default prediction step in seconds.
pub const DEFAULT_DT: f64 = 0.5;
/// Default prediction horizon in steps.
pub const DEFAULT_HORIZON: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
}

impl AgentState {
    /// Builds a state, wrapping the heading. Non-finite heading is left as-is
    /// and rejected later by whatever consumes the state.
    pub fn new(x: f64, y: f64, v: f64, theta: f64) -> Self {
        let theta = wrap_angle(theta).unwrap_or(theta);
        Self { x, y, v, theta }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.v, self.theta]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.v.is_finite() && self.theta.is_finite()
    }

    pub fn distance_xy(&self, other: &AgentState) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    /// Longitudinal acceleration, m/s².
    pub u1: f64,
    /// Turn rate, rad/s.
    pub u2: f64,
}

impl Control {
    pub const ZERO: Control = Control { u1: 0.0, u2: 0.0 };

    pub fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }

    pub fn is_finite(&self) -> bool {
        self.u1.is_finite() && self.u2.is_finite()
    }

    pub fn get(&self, dim: usize) -> f64 {
        match dim {
            0 => self.u1,
            1 => self.u2,
            _ => panic!("control has two dimensions, got index {dim}"),
        }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.u1, self.u2]
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        Self { u1: a[0], u2: a[1] }
    }
}

/// Uniformly sampled state sequence starting at `t0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<AgentState>,
}

impl Trajectory {
    pub fn new(t0: f64, dt: f64, states: Vec<AgentState>) -> Result<Self> {
        check_dt(dt)?;
        if states.is_empty() {
            return Err(Error::invalid("states", "trajectory must be nonempty"));
        }
        Ok(Self { t0, dt, states })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn first(&self) -> &AgentState {
        &self.states[0]
    }

    pub fn last(&self) -> &AgentState {
        self.states.last().expect("trajectory is nonempty")
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }
}

/// Uniformly spaced controls; control `k` acts over `[t0 + k·dt, t0 + (k+1)·dt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence {
    pub t0: f64,
    pub dt: f64,
    pub controls: Vec<Control>,
}

impl ControlSequence {
    pub fn new(t0: f64, dt: f64, controls: Vec<Control>) -> Result<Self> {
        check_dt(dt)?;
        if controls.is_empty() {
            return Err(Error::invalid("controls", "control sequence must be nonempty"));
        }
        if controls.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("controls"));
        }
        Ok(Self { t0, dt, controls })
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::invalid("dt", format!("must be positive and finite, got {dt}")));
    }
    Ok(())
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::NonFinite("angle"));
    }
    Ok(wrap_unchecked(a))
}

pub(crate) fn wrap_unchecked(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    // rem_euclid of odd multiples of π lands a few ulps either side of ±π
    if (r + PI).abs() < 1e-12 {
        r = PI;
    }
    r
}

#[inline]
fn field(s: [f64; 4], u: Control) -> [f64; 4] {
    let (sin, cos) = s[3].sin_cos();
    [s[2] * cos, s[2] * sin, u.u1, u.u2]
}

/// One RK4 step without wrapping or validation; `dt` may be negative.
#[inline]
pub(crate) fn rk4(s: [f64; 4], u: Control, dt: f64) -> [f64; 4] {
    let add = |a: [f64; 4], k: [f64; 4], h: f64| [a[0] + h * k[0], a[1] + h * k[1], a[2] + h * k[2], a[3] + h * k[3]];
    let k1 = field(s, u);
    let k2 = field(add(s, k1, 0.5 * dt), u);
    let k3 = field(add(s, k2, 0.5 * dt), u);
    let k4 = field(add(s, k3, dt), u);
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Longest RK4 substep used by [`integrate`], seconds.
pub const MAX_SUBSTEP: f64 = 0.01;

/// Integrates `dt` seconds (any sign) and wraps the heading. The interval is
/// split into a power-of-two number of RK4 substeps no longer than
/// [`MAX_SUBSTEP`], so binary-exact steps stay exact.
pub(crate) fn integrate(s: &AgentState, u: Control, dt: f64) -> AgentState {
    let n = ((dt.abs() / MAX_SUBSTEP).ceil().max(1.0) as u64).next_power_of_two();
    let h = dt / n as f64;
    let mut o = s.as_array();
    for _ in 0..n {
        o = rk4(o, u, h);
    }
    AgentState {
        x: o[0],
        y: o[1],
        v: o[2],
        theta: wrap_unchecked(o[3]),
    }
}

pub fn dubins_step(s: &AgentState, u: Control, dt: f64) -> Result<AgentState> {
    check_dt(dt)?;
    if !s.is_finite() {
        return Err(Error::NonFinite("state"));
    }
    if !u.is_finite() {
        return Err(Error::NonFinite("control"));
    }
    Ok(integrate(s, u, dt))
}

/// Forward simulation; the result has one more state than there are controls.
pub fn rollout(s0: &AgentState, u_seq: &ControlSequence) -> Result<Trajectory> {
    if u_seq.controls.is_empty() {
        return Err(Error::invalid("controls", "control sequence must be nonempty"));
    }
    let mut states = Vec::with_capacity(u_seq.len() + 1);
    let mut s = *s0;
    if !s.is_finite() {
        return Err(Error::NonFinite("state"));
    }
    s.theta = wrap_unchecked(s.theta);
    states.push(s);
    for &u in &u_seq.controls {
        s = dubins_step(&s, u, u_seq.dt)?;
        states.push(s);
    }
    Trajectory::new(u_seq.t0, u_seq.dt, states)
}
