//! Synthetic scenario families.
//!
//! Every trajectory is a rollout of recorded piecewise-constant controls, so
//! finite-difference control estimates recover the controls and the states
//! regenerate from them.

use std::f64::consts::{FRAC_PI_2, PI};
use std::str::FromStr;

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reachcal::dynamics::{rollout, wrap_angle, AgentState, Control, ControlSequence, DEFAULT_DT, DEFAULT_HORIZON};
use reachcal::forecaster::{stream_seed, DEFAULT_CONTEXT};
use reachcal::harness::{AgentRecord, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Ego heading north through a junction, one agent crossing west to east.
    Intersection,
    /// Ego behind a slow leader with oncoming traffic in the other lane.
    Corridor,
    /// Agents on constant-speed, constant-turn-rate arcs.
    RandomConstantTurn,
    /// Smoothly varying controls; oracle noise triples halfway through.
    ShiftingNoise,
}

impl FromStr for Family {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "intersection" => Family::Intersection,
            "corridor" => Family::Corridor,
            "random-constant-turn" => Family::RandomConstantTurn,
            "shifting-noise" => Family::ShiftingNoise,
            other => bail!(
                "unknown scenario kind `{other}` (expected intersection, corridor, random-constant-turn or shifting-noise)"
            ),
        })
    }
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Intersection => "intersection",
            Family::Corridor => "corridor",
            Family::RandomConstantTurn => "random-constant-turn",
            Family::ShiftingNoise => "shifting-noise",
        }
    }
}

/// Family parameters; `None` picks the family default.
#[derive(Debug, Clone, Copy, Default)]
pub struct GenerateOptions {
    /// Non-ego agents.
    pub agents: Option<usize>,
    pub calib_steps: Option<usize>,
    pub eval_steps: Option<usize>,
}

/// Evaluated predictions in a calibration-only run are `calib − h − context + 2`;
/// the shifting-noise default yields 2000 of them.
pub const SHIFTING_NOISE_CALIB: usize = 2000 + DEFAULT_HORIZON + DEFAULT_CONTEXT - 2;

/// Default calibration length of the intersection and corridor families,
/// long enough for the conformal offsets to settle after their initial rise.
pub const TRAFFIC_CALIB: usize = 200;

/// `count` scenes named `<kind>-<seed>-<index>`.
pub fn generate(family: Family, count: usize, seed: u64, opts: GenerateOptions) -> Result<Vec<(String, Scenario)>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, family as u32, i));
            let sc = match family {
                Family::Intersection => intersection(&mut rng, opts),
                Family::Corridor => corridor(&mut rng, opts),
                Family::RandomConstantTurn => constant_turn(&mut rng, opts),
                Family::ShiftingNoise => shifting_noise(&mut rng, opts),
            }?;
            Ok((format!("{}-{seed}-{i:03}", family.name()), sc))
        })
        .collect()
}

fn record(id: u32, s0: AgentState, controls: Vec<Control>) -> Result<AgentRecord> {
    let seq = ControlSequence::new(0.0, DEFAULT_DT, controls)?;
    let traj = rollout(&s0, &seq)?;
    Ok(AgentRecord {
        id,
        states: traj.states.iter().map(|s| s.as_array().to_vec()).collect(),
    })
}

/// Like [`record`], with the rollout moved rigidly so that its state at
/// `step` sits at `pose` (position and heading; the speed is `v0`).
fn record_through(id: u32, v0: f64, controls: Vec<Control>, step: usize, pose: [f64; 3]) -> Result<AgentRecord> {
    let mut rec = record(id, AgentState::new(0.0, 0.0, v0, 0.0), controls)?;
    let anchor = rec.states[step].clone();
    let rot = pose[2] - anchor[3];
    let (sin, cos) = rot.sin_cos();
    for s in &mut rec.states {
        let (dx, dy) = (s[0] - anchor[0], s[1] - anchor[1]);
        s[0] = pose[0] + cos * dx - sin * dy;
        s[1] = pose[1] + sin * dx + cos * dy;
        s[3] = wrap_angle(s[3] + rot)?;
    }
    Ok(rec)
}

/// Zero-mean sinusoidal controls with random phase and frequency.
fn wavy(rng: &mut ChaCha8Rng, n: usize, a1: f64, a2: f64) -> Vec<Control> {
    let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let (w1, w2) = (rng.gen_range(0.15..0.4), rng.gen_range(0.1..0.3));
    (0..n)
        .map(|i| {
            let t = i as f64;
            Control::new(a1 * (w1 * t + p1).sin(), a2 * (w2 * t + p2).sin())
        })
        .collect()
}

/// Scales accelerations so the rolled-out speed stays at or above `floor`.
fn keep_moving(v0: f64, controls: &mut [Control], floor: f64) {
    let mut v = v0;
    for u in controls {
        if v + u.u1 * DEFAULT_DT < floor {
            u.u1 = (floor - v) / DEFAULT_DT;
        }
        v += u.u1 * DEFAULT_DT;
    }
}

fn intersection(rng: &mut ChaCha8Rng, opts: GenerateOptions) -> Result<Scenario> {
    let calib = opts.calib_steps.unwrap_or(TRAFFIC_CALIB);
    let eval = opts.eval_steps.unwrap_or(8);
    let n = calib + eval;
    let dt = DEFAULT_DT;

    // ego is ~15 m short of the junction when calibration ends
    let ve = rng.gen_range(4.0..6.0);
    let ego_start = AgentState::new(
        rng.gen_range(-0.5..0.5),
        -(15.0 + ve * calib as f64 * dt),
        ve,
        FRAC_PI_2,
    );
    let mut ego_u = vec![Control::ZERO; n];
    // the recorded driver yields: brakes at the end of calibration, then goes
    for u in ego_u.iter_mut().skip(calib).take(3) {
        u.u1 = -1.2;
    }
    for u in ego_u.iter_mut().skip(calib + 5) {
        u.u1 = 0.8;
    }
    keep_moving(ve, &mut ego_u, 0.5);

    let mut agents = vec![record(0, ego_start, ego_u)?];
    let crossers = opts.agents.unwrap_or(1).max(1);
    for j in 0..crossers {
        // reaches the junction a few steps into evaluation
        let v = rng.gen_range(5.0..8.0);
        let arrive = calib + rng.gen_range(1..=5) + 4 * j;
        let lane = rng.gen_range(-1.0..1.0);
        let mut u = wavy(rng, n, 0.4, 0.03);
        keep_moving(v, &mut u, 2.0);
        agents.push(record_through(j as u32 + 1, v, u, arrive.min(n - 1), [0.0, lane, 0.0])?);
    }
    Ok(Scenario {
        dt,
        agents,
        ego_id: 0,
        goal: [0.0, 25.0],
        calib_steps: calib,
        eval_steps: eval,
        noise_profile: None,
    })
}

fn corridor(rng: &mut ChaCha8Rng, opts: GenerateOptions) -> Result<Scenario> {
    let calib = opts.calib_steps.unwrap_or(TRAFFIC_CALIB);
    let eval = opts.eval_steps.unwrap_or(8);
    let n = calib + eval;
    let dt = DEFAULT_DT;
    let tc = calib as f64 * dt;

    // leader holds a slow speed; the recorded ego settles in behind it
    let vl = rng.gen_range(2.0..4.0);
    let gap = rng.gen_range(14.0..20.0);
    let ve = rng.gen_range(5.0..7.0);
    let ego_start = AgentState::new(-ve * tc, 0.0, ve, 0.0);
    let mut ego_u = vec![Control::ZERO; n];
    let brake = ((vl - ve) / (4.0 * dt)).max(-2.0);
    for u in ego_u.iter_mut().skip(calib).take(4) {
        u.u1 = brake;
    }
    keep_moving(ve, &mut ego_u, vl.min(ve));

    let mut lead_u = wavy(rng, n, 0.3, 0.0);
    keep_moving(vl, &mut lead_u, 1.0);

    let vo = rng.gen_range(4.0..6.0);
    let meet = rng.gen_range(40.0..60.0);
    let mut onc_u = wavy(rng, n, 0.3, 0.0);
    keep_moving(vo, &mut onc_u, 2.0);

    // leader and oncoming traffic are placed by their state at `calib`
    let mut agents = vec![
        record(0, ego_start, ego_u)?,
        record_through(1, vl, lead_u, calib, [gap, 0.0, 0.0])?,
        record_through(2, vo, onc_u.clone(), calib, [meet, 6.0, PI])?,
    ];
    for j in 2..opts.agents.unwrap_or(2) {
        // extra traffic further down the oncoming lane
        let pose = [meet + 15.0 * (j - 1) as f64, 6.0, PI];
        agents.push(record_through(j as u32 + 1, vo, onc_u.clone(), calib, pose)?);
    }
    Ok(Scenario {
        dt,
        agents,
        ego_id: 0,
        goal: [40.0, 0.0],
        calib_steps: calib,
        eval_steps: eval,
        noise_profile: None,
    })
}

fn constant_turn(rng: &mut ChaCha8Rng, opts: GenerateOptions) -> Result<Scenario> {
    let calib = opts.calib_steps.unwrap_or(24);
    let eval = opts.eval_steps.unwrap_or(8);
    let n = calib + eval;
    let mut agents = Vec::new();
    for id in 0..=opts.agents.unwrap_or(4) as u32 {
        let s0 = AgentState::new(
            rng.gen_range(-30.0..30.0),
            rng.gen_range(-30.0..30.0),
            rng.gen_range(2.0..8.0),
            rng.gen_range(-PI..PI),
        );
        let u = Control::new(0.0, rng.gen_range(-0.3..0.3));
        agents.push(record(id, s0, vec![u; n])?);
    }
    Ok(Scenario {
        dt: DEFAULT_DT,
        agents,
        ego_id: 0,
        goal: [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)],
        calib_steps: calib,
        eval_steps: eval,
        noise_profile: None,
    })
}

fn shifting_noise(rng: &mut ChaCha8Rng, opts: GenerateOptions) -> Result<Scenario> {
    let calib = opts.calib_steps.unwrap_or(SHIFTING_NOISE_CALIB);
    let eval = opts.eval_steps.unwrap_or(0);
    let n = calib + eval;
    let mut agents = vec![record(0, AgentState::new(0.0, 0.0, 0.0, 0.0), vec![Control::ZERO; n])?];
    for id in 1..=opts.agents.unwrap_or(1) as u32 {
        let v = rng.gen_range(3.0..6.0);
        let s0 = AgentState::new(
            rng.gen_range(-20.0..20.0),
            rng.gen_range(-20.0..20.0),
            v,
            rng.gen_range(-PI..PI),
        );
        let mut u = wavy(rng, n, 0.6, 0.2);
        keep_moving(v, &mut u, 1.0);
        agents.push(record(id, s0, u)?);
    }
    let mut profile = vec![1.0; n / 2];
    profile.push(3.0);
    Ok(Scenario {
        dt: DEFAULT_DT,
        agents,
        ego_id: 0,
        goal: [10.0, 0.0],
        calib_steps: calib,
        eval_steps: eval,
        noise_profile: Some(profile),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse() {
        for k in ["intersection", "corridor", "random-constant-turn", "shifting-noise"] {
            assert_eq!(k.parse::<Family>().unwrap().name(), k);
        }
        assert!("roundabout".parse::<Family>().is_err());
    }

    #[test]
    fn intersection_is_two_agents() {
        let scenes = generate(Family::Intersection, 1, 7, GenerateOptions::default()).unwrap();
        let sc = &scenes[0].1;
        assert_eq!(sc.agents.len(), 2);
        let tracks = sc.tracks().unwrap();
        // ego heads north, the other agent east, and their paths cross
        assert!((tracks[0].states[0].theta - FRAC_PI_2).abs() < 1e-12);
        let cross = &tracks[1].states;
        assert!(cross[0].x < 0.0 && cross.last().unwrap().x > 0.0);
        let at = cross.iter().position(|s| s.x.abs() < 1e-9).unwrap();
        assert!(at > sc.calib_steps && cross[at].theta.abs() < 1e-9 && cross[at].y.abs() <= 1.0);
    }

    #[test]
    fn shifting_noise_profile_steps_up() {
        let sc = &generate(Family::ShiftingNoise, 1, 1, GenerateOptions::default()).unwrap()[0].1;
        let half = sc.total_steps() / 2;
        assert_eq!(sc.noise_gain(half - 1), 1.0);
        assert_eq!(sc.noise_gain(half), 3.0);
    }

    #[test]
    fn speeds_stay_positive() {
        for fam in [Family::Intersection, Family::Corridor] {
            for (_, sc) in generate(fam, 5, 3, GenerateOptions::default()).unwrap() {
                for t in sc.tracks().unwrap() {
                    assert!(t.states.iter().all(|s| s.v > 0.0));
                }
            }
        }
    }
}
