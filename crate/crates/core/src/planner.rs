//! Ego reach-avoid planning against the agents' time-indexed tubes.
//!
//! The ego's exact-time reachable sets are propagated with obstacle columns
//! removed along every characteristic, a state chain is traced backward from
//! the earliest snapshot that touches the goal, and per-step controls track
//! that chain forward from the true start. Every plan is re-checked against
//! the inflated obstacles at ten sub-points per step before it is accepted.

use serde::{Deserialize, Serialize};

use crate::conformal::ControlInterval;
use crate::dynamics::{integrate, rollout, AgentState, Control, ControlSequence, Trajectory};
use crate::error::{Error, Result};
use crate::reachability::{control_samples, project_xy, propagate, Grid4, SpatialSet, TubeOptions, ValueGrid};

pub const DEFAULT_FOOTPRINT_RADIUS: f64 = 2.0;
/// Sub-points per step used by the timing-rule safety check.
pub const SAFETY_SUBPOINTS: usize = 10;
/// Control samples per dimension for chain extraction and tracking.
pub const EXTRACTION_SAMPLES: usize = 7;

/// Agents' planar tubes per prediction step, dilated by the footprints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSchedule {
    /// `steps[k − 1][i]` is agent `i`'s set for `t + kΔt`.
    pub steps: Vec<Vec<SpatialSet>>,
    /// Dilation radius, normally `r_ego + r_agent`.
    pub inflation: f64,
}

impl ObstacleSchedule {
    pub fn new(steps: Vec<Vec<SpatialSet>>, inflation: f64) -> Result<Self> {
        if !(inflation >= 0.0 && inflation.is_finite()) {
            return Err(Error::invalid(
                "inflation",
                format!("must be nonnegative, got {inflation}"),
            ));
        }
        Ok(Self { steps, inflation })
    }

    pub fn empty(horizon: usize) -> Self {
        Self {
            steps: vec![Vec::new(); horizon],
            inflation: 0.0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Whether `p` lies in the inflated obstacle region of step `k` (1-based):
    /// within `inflation` plus half a cell diagonal of an occupied node.
    /// Steps beyond the horizon carry no obstacles.
    pub fn blocks(&self, k: usize, p: [f64; 2]) -> bool {
        if k == 0 || k > self.steps.len() {
            return false;
        }
        self.steps[k - 1].iter().any(|set| {
            let reach = self.inflation + set.half_cell_diagonal();
            let r2 = reach * reach;
            set.occupied().any(|c| {
                let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                dx * dx + dy * dy <= r2
            })
        })
    }

    /// Columns of `grid` whose node lies within `inflation + pad` (plus the
    /// obstacle's half cell diagonal) of an occupied obstacle node at step `k`.
    pub fn column_mask(&self, k: usize, grid: &Grid4, pad: f64) -> Vec<bool> {
        let (ax, ay) = (grid.axes[0], grid.axes[1]);
        let mut mask = vec![false; ax.n * ay.n];
        if k == 0 || k > self.steps.len() {
            return mask;
        }
        let (dx, dy) = (ax.spacing(), ay.spacing());
        for set in &self.steps[k - 1] {
            let reach = self.inflation + pad + set.half_cell_diagonal();
            let r2 = reach * reach;
            for c in set.occupied() {
                let x0 = ((c[0] - reach - ax.min) / dx).ceil().max(0.0) as usize;
                let x1 = ((c[0] + reach - ax.min) / dx).floor();
                let y0 = ((c[1] - reach - ay.min) / dy).ceil().max(0.0) as usize;
                let y1 = ((c[1] + reach - ay.min) / dy).floor();
                if x1 < 0.0 || y1 < 0.0 {
                    continue;
                }
                let x1 = (x1 as usize).min(ax.n - 1);
                let y1 = (y1 as usize).min(ay.n - 1);
                for ix in x0..=x1 {
                    let ddx = ax.value(ix) - c[0];
                    for iy in y0..=y1 {
                        let ddy = ay.value(iy) - c[1];
                        if ddx * ddx + ddy * ddy <= r2 {
                            mask[ix * ay.n + iy] = true;
                        }
                    }
                }
            }
        }
        mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanKind {
    /// Tracks the extracted chain to the goal or fallback target.
    Extracted,
    /// First step of the extracted plan, then braking.
    ExtractedThenStop,
    /// Brake to standstill and hold.
    Stop,
    /// Zero controls.
    Hold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub controls: ControlSequence,
    pub trajectory: Trajectory,
    pub feasible: bool,
    pub target_reached: bool,
    pub kind: PlanKind,
    /// Goal, or the fallback target when the goal is out of reach.
    pub target: [f64; 2],
}

impl Plan {
    fn from_controls(
        ego0: &AgentState,
        t0: f64,
        dt: f64,
        controls: Vec<Control>,
        kind: PlanKind,
        target: [f64; 2],
        target_reached: bool,
        obs: &ObstacleSchedule,
    ) -> Result<Self> {
        let controls = ControlSequence::new(t0, dt, controls)?;
        let trajectory = rollout(ego0, &controls)?;
        let feasible = is_safe(&trajectory, &controls, obs);
        Ok(Self {
            controls,
            trajectory,
            feasible,
            target_reached,
            kind,
            target,
        })
    }

    pub fn first_control(&self) -> Control {
        self.controls.controls[0]
    }
}

/// Steps (1-based) at which some sub-point of `traj` on `((k − 1)Δt, kΔt]`
/// lies inside the inflated obstacles of step `k`.
pub fn violations(traj: &Trajectory, controls: &ControlSequence, obs: &ObstacleSchedule) -> Vec<usize> {
    let mut out = Vec::new();
    for (k, u) in controls.controls.iter().enumerate() {
        let start = &traj.states[k];
        let hit = (1..=SAFETY_SUBPOINTS).any(|j| {
            let s = integrate(start, *u, controls.dt * j as f64 / SAFETY_SUBPOINTS as f64);
            obs.blocks(k + 1, s.xy())
        });
        if hit {
            out.push(k + 1);
        }
    }
    out
}

pub fn is_safe(traj: &Trajectory, controls: &ControlSequence, obs: &ObstacleSchedule) -> bool {
    violations(traj, controls, obs).is_empty()
}

/// Ego snapshots `V_0..V_h` at multiples of `dt`, with obstacle columns
/// removed during each step. Obstacles are padded by the ego grid's half cell
/// diagonal so that unblocked nodes keep their whole cell clear.
pub fn reach_avoid_tube(
    ego0: &AgentState,
    obs: &ObstacleSchedule,
    ego_box: &ControlInterval,
    grid: Grid4,
    dt: f64,
    opts: &TubeOptions,
) -> Result<Vec<ValueGrid>> {
    if obs.horizon() == 0 {
        return Err(Error::invalid("obstacles", "schedule must cover at least one step"));
    }
    if obs.blocks(1, ego0.xy()) {
        return Err(Error::InfeasibleStart);
    }
    let pad = 0.5 * grid.xy_cell_diagonal();
    let masks: Vec<Vec<bool>> = (1..=obs.horizon()).map(|k| obs.column_mask(k, &grid, pad)).collect();
    let boxes = vec![*ego_box; obs.horizon()];
    Ok(propagate(ego0, &boxes, grid, dt, opts, Some(&masks))?.reach)
}

/// Occupied cell of the last snapshot's projection closest to `goal`; ties go
/// to the lexicographically smaller `(x, y)`.
pub fn fallback_target(snapshots: &[ValueGrid], goal: [f64; 2]) -> Result<[f64; 2]> {
    let last = snapshots.last().ok_or(Error::EmptyTube)?;
    nearest_cell(&project_xy(last), goal).ok_or(Error::EmptyTube)
}

fn nearest_cell(set: &SpatialSet, goal: [f64; 2]) -> Option<[f64; 2]> {
    let mut best: Option<([f64; 2], f64)> = None;
    for ix in 0..set.x.n {
        for iy in 0..set.y.n {
            if !set.get(ix, iy) {
                continue;
            }
            let c = set.cell_center(ix, iy);
            let d = (c[0] - goal[0]).hypot(c[1] - goal[1]);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((c, d));
            }
        }
    }
    best.map(|(c, _)| c)
}

/// Value-minimizing node with `V ≤ 0` whose position is within `tol` of
/// `target`.
fn seed_node(v: &ValueGrid, target: [f64; 2], tol: f64) -> Option<AgentState> {
    let g = v.grid;
    let [ax, ay, av, at] = g.axes;
    let mut best: Option<(usize, f64)> = None;
    for ix in 0..ax.n {
        for iy in 0..ay.n {
            if (ax.value(ix) - target[0]).hypot(ay.value(iy) - target[1]) > tol {
                continue;
            }
            let base = g.index(ix, iy, 0, 0);
            for j in 0..av.n * at.n {
                let val = v.values[base + j];
                if val <= 0.0 && best.is_none_or(|(_, b)| val < b) {
                    best = Some((base + j, val));
                }
            }
        }
    }
    best.map(|(i, _)| {
        let [ix, iy, iv, it] = g.unflatten(i);
        g.node(ix, iy, iv, it)
    })
}

/// Whether the sub-points of one step from `s` under `u` avoid step `k`.
fn step_clear(s: &AgentState, u: Control, dt: f64, k: usize, obs: &ObstacleSchedule) -> bool {
    (1..=SAFETY_SUBPOINTS).all(|j| {
        let p = integrate(s, u, dt * j as f64 / SAFETY_SUBPOINTS as f64);
        !obs.blocks(k, p.xy())
    })
}

/// Traces a state chain backward from `seed` at step `k_star` through the
/// snapshots: each step applies the control whose backward characteristic
/// lands lowest in the previous snapshot, which is the discrete form of
/// picking the Hamiltonian optimum. Returns `chain[k]` for `k = 0..=k_star`.
fn backward_chain(
    snapshots: &[ValueGrid],
    seed: AgentState,
    k_star: usize,
    ego_box: &ControlInterval,
    dt: f64,
    obs: &ObstacleSchedule,
) -> Vec<AgentState> {
    let controls = control_samples(ego_box, EXTRACTION_SAMPLES);
    let mut chain = vec![seed; k_star + 1];
    let mut z = seed;
    for k in (1..=k_star).rev() {
        let mut best: Option<(AgentState, f64)> = None;
        for &u in &controls {
            let prev = integrate(&z, u, -dt);
            let mut val = snapshots[k - 1].interpolate(&prev);
            if !step_clear(&prev, u, dt, k, obs) {
                val += 1.0e3;
            }
            if best.is_none_or(|(_, b)| val < b) {
                best = Some((prev, val));
            }
        }
        z = best.expect("control samples are nonempty").0;
        chain[k - 1] = z;
    }
    chain
}

/// Forward controls from `ego0` that follow the chain's positions. Each step
/// looks one step further ahead, and controls whose step clears the
/// obstacles are preferred. The chain's speeds and headings only matter
/// through the positions they produce: its first state lies anywhere in the
/// initial ball, which on a coarse speed axis is far from the true start.
fn track_chain(
    ego0: &AgentState,
    chain: &[AgentState],
    ego_box: &ControlInterval,
    dt: f64,
    obs: &ObstacleSchedule,
) -> Vec<Control> {
    let controls = control_samples(ego_box, EXTRACTION_SAMPLES);
    let gap = |s: &AgentState, k: usize| (s.x - chain[k].x).hypot(s.y - chain[k].y);
    let last = chain.len() - 1;
    let mut s = *ego0;
    let mut out = Vec::with_capacity(last);
    for k in 1..=last {
        let mut best: Option<(Control, AgentState, bool, f64)> = None;
        for &u in &controls {
            let next = integrate(&s, u, dt);
            let clear = step_clear(&s, u, dt, k, obs);
            let mut cost = gap(&next, k);
            if k < last {
                cost += controls
                    .iter()
                    .map(|&w| gap(&integrate(&next, w, dt), k + 1))
                    .fold(f64::INFINITY, f64::min);
            }
            let better = match best {
                None => true,
                Some((_, _, bc, bd)) => (clear && !bc) || (clear == bc && cost < bd),
            };
            if better {
                best = Some((u, next, clear, cost));
            }
        }
        let (u, next, _, _) = best.expect("control samples are nonempty");
        out.push(u);
        s = next;
    }
    out
}

/// Braking control toward standstill within the box.
pub fn stop_control(s: &AgentState, ego_box: &ControlInterval, dt: f64) -> Control {
    let (lo, hi) = ego_box.bounds(0);
    let (tlo, thi) = ego_box.bounds(1);
    Control::new((-s.v / dt).clamp(lo, hi), 0.0f64.clamp(tlo, thi))
}

fn stop_controls(
    ego0: &AgentState,
    first: Option<Control>,
    steps: usize,
    ego_box: &ControlInterval,
    dt: f64,
) -> Vec<Control> {
    let mut s = *ego0;
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let u = match (k, first) {
            (0, Some(u)) => u,
            _ => stop_control(&s, ego_box, dt),
        };
        s = integrate(&s, u, dt);
        out.push(u);
    }
    out
}

/// Plan toward `goal` from the reach-avoid snapshots.
///
/// Every step whose snapshot touches the goal is tried in order; the first
/// one whose actual rollout comes within `tol` of the goal and stays clear of
/// the obstacles wins. Snapshots over-approximate what is reachable, so an
/// early step may fail in practice. Without a winner the closest safe attempt
/// is kept. When no snapshot touches the goal the plan heads for
/// [`fallback_target`] instead. `target_reached` reports whether the returned
/// rollout actually reaches the goal.
pub fn extract_plan(
    snapshots: &[ValueGrid],
    ego0: &AgentState,
    goal: [f64; 2],
    tol: f64,
    ego_box: &ControlInterval,
    dt: f64,
    t0: f64,
    obs: &ObstacleSchedule,
) -> Result<Plan> {
    if snapshots.len() < 2 {
        return Err(Error::invalid(
            "snapshots",
            "need the initial set and at least one step",
        ));
    }
    let h = snapshots.len() - 1;
    if (ego0.x - goal[0]).hypot(ego0.y - goal[1]) <= tol {
        let controls = stop_controls(ego0, None, h, ego_box, dt);
        return Plan::from_controls(ego0, t0, dt, controls, PlanKind::Stop, goal, true, obs);
    }
    let attempt = |k: usize, seed: AgentState, target: [f64; 2]| -> Result<(Plan, f64)> {
        let chain = backward_chain(snapshots, seed, k, ego_box, dt, obs);
        let mut controls = track_chain(ego0, &chain, ego_box, dt, obs);
        // brake for the rest of the horizon
        let end = rollout(ego0, &ControlSequence::new(t0, dt, controls.clone())?)?;
        controls.extend(stop_controls(end.last(), None, h - k, ego_box, dt));
        let mut plan = Plan::from_controls(ego0, t0, dt, controls, PlanKind::Extracted, target, false, obs)?;
        let closest = closest_approach(&plan.trajectory, target);
        plan.target_reached = (closest_approach(&plan.trajectory, goal)) <= tol;
        Ok((plan, closest))
    };
    let mut best: Option<(Plan, f64)> = None;
    let keep = |cand: (Plan, f64), best: &mut Option<(Plan, f64)>| {
        let better = match best {
            None => true,
            Some((b, bd)) => (cand.0.feasible && !b.feasible) || (cand.0.feasible == b.feasible && cand.1 < *bd),
        };
        if better {
            *best = Some(cand);
        }
    };
    for k in 1..=h {
        if let Some(seed) = seed_node(&snapshots[k], goal, tol) {
            let cand = attempt(k, seed, goal)?;
            if cand.0.target_reached && cand.0.feasible {
                return Ok(cand.0);
            }
            keep(cand, &mut best);
        }
    }
    if let Some((plan, _)) = best {
        return Ok(plan);
    }
    let target = fallback_target(snapshots, goal)?;
    let cell_tol = 0.5 * snapshots[0].grid.xy_cell_diagonal();
    for k in 1..=h {
        if let Some(seed) = seed_node(&snapshots[k], target, cell_tol) {
            keep(attempt(k, seed, target)?, &mut best);
        }
    }
    best.map(|(p, _)| p).ok_or(Error::EmptyTube)
}

fn closest_approach(traj: &Trajectory, p: [f64; 2]) -> f64 {
    traj.states
        .iter()
        .map(|s| (s.x - p[0]).hypot(s.y - p[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Candidate plans in order of preference: the extracted plan, its first step
/// followed by braking, braking, and zero controls. Returns the first
/// feasible one, or the braking plan flagged infeasible.
pub fn plan_with_fallbacks(
    extracted: Option<Plan>,
    ego0: &AgentState,
    horizon: usize,
    ego_box: &ControlInterval,
    dt: f64,
    t0: f64,
    goal: [f64; 2],
    obs: &ObstacleSchedule,
) -> Result<Plan> {
    let mut candidates = Vec::new();
    if let Some(p) = extracted {
        let first = p.first_control();
        let target = p.target;
        candidates.push(p);
        let c = stop_controls(ego0, Some(first), horizon, ego_box, dt);
        candidates.push(Plan::from_controls(
            ego0,
            t0,
            dt,
            c,
            PlanKind::ExtractedThenStop,
            target,
            false,
            obs,
        )?);
    }
    let stop = Plan::from_controls(
        ego0,
        t0,
        dt,
        stop_controls(ego0, None, horizon, ego_box, dt),
        PlanKind::Stop,
        goal,
        false,
        obs,
    )?;
    candidates.push(stop.clone());
    candidates.push(Plan::from_controls(
        ego0,
        t0,
        dt,
        vec![Control::ZERO; horizon],
        PlanKind::Hold,
        goal,
        false,
        obs,
    )?);
    Ok(candidates.into_iter().find(|p| p.feasible).unwrap_or(stop))
}

/// Full planning cycle: reach-avoid tube, extraction and fallbacks. Never
/// fails on blocked starts or empty tubes; those yield an infeasible brake.
pub fn plan_cycle(
    ego0: &AgentState,
    goal: [f64; 2],
    tol: f64,
    ego_box: &ControlInterval,
    grid: Grid4,
    dt: f64,
    t0: f64,
    obs: &ObstacleSchedule,
    opts: &TubeOptions,
) -> Result<Plan> {
    let h = obs.horizon().max(1);
    let extracted = match reach_avoid_tube(ego0, obs, ego_box, grid, dt, opts) {
        Ok(snaps) => match extract_plan(&snaps, ego0, goal, tol, ego_box, dt, t0, obs) {
            Ok(p) => Some(p),
            Err(Error::EmptyTube) => None,
            Err(e) => return Err(e),
        },
        Err(Error::InfeasibleStart) | Err(Error::OutsideGrid { .. }) => None,
        Err(e) => return Err(e),
    };
    plan_with_fallbacks(extracted, ego0, h, ego_box, dt, t0, goal, obs)
}
