//! Episode replay over recorded scenarios, and the evaluation metrics.
//!
//! Non-ego agents always replay their recordings. The ego replays its own
//! recording through the calibration horizon and afterwards executes the
//! first step of a fresh plan every Δt. Predictions issued at `s` are scored
//! at `s + h`, when all of their targets have been observed; quantile models
//! and the conformal parameter are updated at that point, before the next
//! prediction is made.

use std::collections::BTreeMap;
use std::ops::{Bound, RangeBounds};

use serde::{Deserialize, Serialize};

use crate::config::{QuantileInit, RunConfig, RunMode};
use crate::conformal::{calibrated_interval, ConformalState, ControlInterval};
use crate::dynamics::{AgentState, Control, Trajectory};
use crate::error::{Error, Result};
use crate::forecaster::{estimate_controls, reconstruct_states, Forecast, ForecastQuery};
use crate::planner::{plan_cycle, ObstacleSchedule, Plan};
use crate::quantreg::QuantileBank;
use crate::reachability::{generate_tubes, SpatialSet};

/// One recorded agent. Rows are `[x, y, v, θ]`, or `[x, y]` when only
/// positions were recorded; speed and heading are then reconstructed by
/// finite differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub id: u32,
    pub states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub dt: f64,
    pub agents: Vec<AgentRecord>,
    pub ego_id: u32,
    pub goal: [f64; 2],
    pub calib_steps: usize,
    pub eval_steps: usize,
    /// Gain on oracle forecast noise per timestep; the last entry holds
    /// beyond the end. Absent means a gain of one throughout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_profile: Option<Vec<f64>>,
}

/// Resolved recording of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u32,
    pub states: Vec<AgentState>,
    /// `controls[i]` takes `states[i]` to `states[i + 1]`.
    pub controls: Vec<Control>,
}

impl Scenario {
    pub fn total_steps(&self) -> usize {
        self.calib_steps + self.eval_steps
    }

    pub fn noise_gain(&self, t: usize) -> f64 {
        match &self.noise_profile {
            Some(p) if !p.is_empty() => p[t.min(p.len() - 1)],
            _ => 1.0,
        }
    }

    /// Validates the scenario and resolves every agent's states and
    /// controls, sorted by id.
    pub fn tracks(&self) -> Result<Vec<Track>> {
        let bad = |msg: String| Error::InvalidScenario(msg);
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(bad(format!("dt must be positive, got {}", self.dt)));
        }
        if !self.goal.iter().all(|g| g.is_finite()) {
            return Err(bad("goal must be finite".into()));
        }
        if let Some(p) = &self.noise_profile {
            if p.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
                return Err(bad("noise profile entries must be nonnegative".into()));
            }
        }
        let need = self.total_steps() + 1;
        let mut tracks = Vec::with_capacity(self.agents.len());
        for a in &self.agents {
            if a.states.len() < need {
                return Err(bad(format!(
                    "agent {} has {} states, calibration + evaluation need {need}",
                    a.id,
                    a.states.len()
                )));
            }
            let width = a.states[0].len();
            if !(width == 2 || width == 4) || a.states.iter().any(|r| r.len() != width) {
                return Err(bad(format!(
                    "agent {} rows must all be [x, y] or [x, y, v, theta]",
                    a.id
                )));
            }
            if a.states.iter().flatten().any(|v| !v.is_finite()) {
                return Err(bad(format!("agent {} has non-finite entries", a.id)));
            }
            let states = if width == 4 {
                a.states
                    .iter()
                    .map(|r| AgentState::new(r[0], r[1], r[2], r[3]))
                    .collect()
            } else {
                let xy: Vec<[f64; 2]> = a.states.iter().map(|r| [r[0], r[1]]).collect();
                reconstruct_states(&xy, self.dt)?
            };
            let traj = Trajectory::new(0.0, self.dt, states)?;
            let controls = estimate_controls(&traj)?.controls;
            tracks.push(Track {
                id: a.id,
                states: traj.states,
                controls,
            });
        }
        tracks.sort_by_key(|t| t.id);
        if tracks.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(bad("agent ids must be unique".into()));
        }
        if !tracks.iter().any(|t| t.id == self.ego_id) {
            return Err(bad(format!("ego id {} is not among the agents", self.ego_id)));
        }
        Ok(tracks)
    }
}

/// What one selected agent received at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStep {
    pub id: u32,
    pub state: AgentState,
    pub forecast: Forecast,
    /// Conformal parameter used for the intervals.
    pub theta: Vec<f64>,
    pub intervals: Vec<ControlInterval>,
    /// `sets[k − 1]` is the planar tube at `t + kΔt`; empty when no tube was
    /// computed at this timestep.
    pub sets: Vec<SpatialSet>,
    pub areas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub ego: AgentState,
    /// Ids of the agents closest to the ego, nearest first.
    pub selected: Vec<u32>,
    pub agents: Vec<AgentStep>,
    pub plan: Option<Plan>,
}

/// Scoring of one agent's prediction issued at `issued`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub issued: usize,
    pub agent: u32,
    /// Controls actually applied at `issued + k`, `k = 0..h`.
    pub observed: Vec<Control>,
    /// Observed control outside its box, per step.
    pub misses: Vec<bool>,
    /// Recorded positions at `issued + k`, `k = 1..=h`.
    pub positions: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPath {
    pub id: u32,
    pub xy: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub alpha: f64,
    pub calibrated: bool,
    pub horizon: usize,
    pub dt: f64,
    pub goal: [f64; 2],
    pub steps: Vec<StepRecord>,
    pub evaluations: Vec<Evaluation>,
    /// Executed ego states over the evaluation segment, from the end of
    /// calibration to the end of the recording.
    pub ego: Vec<AgentState>,
    /// Recorded ego positions over the same timesteps.
    pub ego_truth: Vec<[f64; 2]>,
    /// Recorded positions of every other agent over the same timesteps.
    pub others: Vec<AgentPath>,
}

impl EpisodeLog {
    pub fn step(&self, t: usize) -> Option<&StepRecord> {
        let first = self.steps.first()?.t;
        self.steps.get(t.checked_sub(first)?).filter(|s| s.t == t)
    }

    pub fn final_ego(&self) -> Option<&AgentState> {
        self.ego.last()
    }
}

struct Models {
    bank: QuantileBank,
    conformal: ConformalState,
}

/// Runs one episode. See the module docs for the timeline.
pub fn run_episode(sc: &Scenario, cfg: &RunConfig) -> Result<EpisodeLog> {
    cfg.validate()?;
    let tracks = sc.tracks()?;
    if (sc.dt - cfg.dt).abs() > 1e-9 {
        return Err(Error::InvalidScenario(format!(
            "scenario dt {} differs from configured dt {}",
            sc.dt, cfg.dt
        )));
    }
    let forecaster = cfg.build_forecaster();
    let h = cfg.horizon;
    let context = forecaster.context();
    if sc.calib_steps + 1 < context {
        return Err(Error::InsufficientHistory {
            need: context,
            got: sc.calib_steps + 1,
        });
    }
    let ego_track = tracks.iter().find(|t| t.id == sc.ego_id).expect("checked by tracks()");
    let others: Vec<&Track> = tracks.iter().filter(|t| t.id != sc.ego_id).collect();
    let alpha = cfg.alpha_for(others.len().max(1))?;

    let mut rng = {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed)
    };
    let mut make_models = || -> Result<Models> {
        let dim = forecaster.feature_dim();
        let bank = match cfg.quantile_init {
            QuantileInit::Zero => QuantileBank::new(h, dim, alpha, cfg.zeta)?,
            QuantileInit::Random => QuantileBank::random(h, dim, alpha, cfg.zeta, cfg.quantile_init_scale, &mut rng)?,
        };
        Ok(Models {
            bank,
            conformal: ConformalState::new(h, cfg.xi, alpha)?,
        })
    };
    let mut models: BTreeMap<Option<u32>, Models> = BTreeMap::new();
    if cfg.per_agent_state {
        for o in &others {
            models.insert(Some(o.id), make_models()?);
        }
    } else {
        models.insert(None, make_models()?);
    }
    let key = |id: u32| if cfg.per_agent_state { Some(id) } else { None };

    let end = sc.total_steps();
    let t0 = context - 1;
    let mut ego = ego_track.states[t0];
    let mut ego_states = Vec::with_capacity(end + 1 - t0);
    let mut steps: Vec<StepRecord> = Vec::with_capacity(end - t0);
    let mut evaluations = Vec::new();
    let opts = cfg.tube_options();
    let spec = cfg.grid_spec();
    let ego_box = cfg.ego_box();

    for t in t0..=end {
        ego_states.push(ego);
        if t >= t0 + h {
            let s = t - h;
            let record = &steps[s - t0];
            for a in &record.agents {
                let track = others.iter().find(|o| o.id == a.id).expect("selected from others");
                let observed = track.controls[s..s + h].to_vec();
                let misses: Vec<bool> = observed.iter().zip(&a.intervals).map(|(u, b)| !b.contains(u)).collect();
                let m = models.get_mut(&key(a.id)).expect("models exist for every key");
                for k in 0..h {
                    let u = observed[k];
                    let u_hat = a.forecast.u_hat.controls[k];
                    m.bank
                        .update(k, &a.forecast.sigma[k], Control::new(u.u1 - u_hat.u1, u.u2 - u_hat.u2))?;
                    if !cfg.no_conformal {
                        m.conformal.observe_one(k, misses[k]);
                    }
                }
                evaluations.push(Evaluation {
                    issued: s,
                    agent: a.id,
                    observed,
                    misses,
                    positions: track.states[s + 1..=s + h].iter().map(|p| p.xy()).collect(),
                });
            }
        }
        if t == end {
            break;
        }

        let mut selected: Vec<&Track> = others.clone();
        selected.sort_by(|a, b| {
            let (da, db) = (a.states[t].distance_xy(&ego), b.states[t].distance_xy(&ego));
            da.total_cmp(&db).then(a.id.cmp(&b.id))
        });
        selected.truncate(cfg.n_closest);

        let mut agents = Vec::with_capacity(selected.len());
        for track in &selected {
            let history = Trajectory::new(
                (t + 1 - context) as f64 * sc.dt,
                sc.dt,
                track.states[t + 1 - context..=t].to_vec(),
            )?;
            let truth = &track.controls[t..(t + h).min(track.controls.len())];
            let forecast = forecaster.predict(&ForecastQuery {
                agent_id: track.id,
                step: t,
                history: &history,
                truth: Some(truth),
                noise_gain: sc.noise_gain(t),
            })?;
            let m = &models[&key(track.id)];
            let quantiles = m.bank.predict_all(&forecast.sigma)?;
            let theta = if cfg.no_conformal {
                vec![0.0; h]
            } else {
                m.conformal.theta.clone()
            };
            let intervals = calibrated_interval(&forecast.u_hat.controls, &quantiles, &theta, cfg.stretch_mode())?;
            agents.push(AgentStep {
                id: track.id,
                state: track.states[t],
                forecast,
                theta,
                intervals,
                sets: Vec::new(),
                areas: Vec::new(),
            });
        }

        if cfg.mode == RunMode::Full && t + h >= sc.calib_steps {
            let tubes: Vec<Result<Vec<SpatialSet>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = agents
                    .iter()
                    .map(|a| {
                        scope.spawn(move || {
                            let grid = spec.fit(&a.state, &a.intervals, sc.dt, opts.initial_radius)?;
                            generate_tubes(&a.state, &a.intervals, grid, sc.dt, &opts)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("tube worker panicked"))
                    .collect()
            });
            for (a, sets) in agents.iter_mut().zip(tubes) {
                a.sets = sets?;
                a.areas = a.sets.iter().map(SpatialSet::area).collect();
            }
        }

        let mut plan = None;
        let next = if cfg.mode == RunMode::Full && t >= sc.calib_steps {
            let schedule: Vec<Vec<SpatialSet>> = (0..h)
                .map(|k| agents.iter().map(|a| a.sets[k].clone()).collect())
                .collect();
            let obs = ObstacleSchedule::new(schedule, cfg.inflation())?;
            let grid = spec.fit(&ego, &vec![ego_box; h], sc.dt, opts.initial_radius)?;
            let p = plan_cycle(
                &ego,
                sc.goal,
                cfg.goal_tol,
                &ego_box,
                grid,
                sc.dt,
                t as f64 * sc.dt,
                &obs,
                &opts,
            )?;
            let next = p.trajectory.states[1];
            plan = Some(p);
            next
        } else {
            ego_track.states[t + 1]
        };

        steps.push(StepRecord {
            t,
            ego,
            selected: selected.iter().map(|s| s.id).collect(),
            agents,
            plan,
        });
        ego = next;
    }

    let calib = sc.calib_steps.max(t0);
    Ok(EpisodeLog {
        alpha,
        calibrated: !cfg.no_conformal,
        horizon: h,
        dt: sc.dt,
        goal: sc.goal,
        steps,
        evaluations,
        ego: ego_states[calib - t0..].to_vec(),
        ego_truth: ego_track.states[calib..=end].iter().map(|s| s.xy()).collect(),
        others: others
            .iter()
            .map(|o| AgentPath {
                id: o.id,
                xy: o.states[calib..=end].iter().map(|s| s.xy()).collect(),
            })
            .collect(),
    })
}

fn check_step(log: &EpisodeLog, k: usize) -> Result<()> {
    if k == 0 || k > log.horizon {
        return Err(Error::invalid(
            "k",
            format!("prediction step must lie in 1..={}, got {k}", log.horizon),
        ));
    }
    Ok(())
}

fn in_range<R: RangeBounds<usize>>(r: &R, s: usize) -> bool {
    let lo = match r.start_bound() {
        Bound::Included(&a) => s >= a,
        Bound::Excluded(&a) => s > a,
        Bound::Unbounded => true,
    };
    let hi = match r.end_bound() {
        Bound::Included(&b) => s <= b,
        Bound::Excluded(&b) => s < b,
        Bound::Unbounded => true,
    };
    lo && hi
}

/// Fraction of timesteps at which every evaluated agent's recorded position
/// at `t + kΔt` lies in its planar tube. Only timesteps with tubes count.
pub fn coverage_rate(log: &EpisodeLog, k: usize) -> Result<f64> {
    coverage_rate_in(log, k, ..)
}

/// [`coverage_rate`] restricted to predictions issued within `issued`.
pub fn coverage_rate_in<R: RangeBounds<usize>>(log: &EpisodeLog, k: usize, issued: R) -> Result<f64> {
    check_step(log, k)?;
    let mut joint: BTreeMap<usize, bool> = BTreeMap::new();
    for e in log.evaluations.iter().filter(|e| in_range(&issued, e.issued)) {
        let Some(step) = log.step(e.issued) else { continue };
        let Some(a) = step.agents.iter().find(|a| a.id == e.agent) else {
            continue;
        };
        if a.sets.len() < k {
            continue;
        }
        let covered = a.sets[k - 1].contains(e.positions[k - 1]);
        *joint.entry(e.issued).or_insert(true) &= covered;
    }
    if joint.is_empty() {
        return Err(Error::EmptyLog(" with tubes".into()));
    }
    Ok(joint.values().filter(|&&c| c).count() as f64 / joint.len() as f64)
}

/// Fraction of (agent, timestep) predictions whose observed control at
/// offset `k` left its box.
pub fn miss_rate<R: RangeBounds<usize>>(log: &EpisodeLog, k: usize, issued: R) -> Result<f64> {
    check_step(log, k)?;
    let hits: Vec<bool> = log
        .evaluations
        .iter()
        .filter(|e| in_range(&issued, e.issued))
        .map(|e| e.misses[k - 1])
        .collect();
    if hits.is_empty() {
        return Err(Error::EmptyLog(String::new()));
    }
    Ok(hits.iter().filter(|&&m| m).count() as f64 / hits.len() as f64)
}

/// Fraction of timesteps at which at least one agent's box missed at
/// offset `k`.
pub fn union_miss_rate<R: RangeBounds<usize>>(log: &EpisodeLog, k: usize, issued: R) -> Result<f64> {
    check_step(log, k)?;
    let mut any: BTreeMap<usize, bool> = BTreeMap::new();
    for e in log.evaluations.iter().filter(|e| in_range(&issued, e.issued)) {
        *any.entry(e.issued).or_insert(false) |= e.misses[k - 1];
    }
    if any.is_empty() {
        return Err(Error::EmptyLog(String::new()));
    }
    Ok(any.values().filter(|&&m| m).count() as f64 / any.len() as f64)
}

/// Mean planar tube area at offset `k` over all logged tubes.
pub fn mean_area(log: &EpisodeLog, k: usize) -> Result<f64> {
    check_step(log, k)?;
    let areas: Vec<f64> = log
        .steps
        .iter()
        .flat_map(|s| &s.agents)
        .filter(|a| a.areas.len() >= k)
        .map(|a| a.areas[k - 1])
        .collect();
    if areas.is_empty() {
        return Err(Error::EmptyLog(" with tubes".into()));
    }
    Ok(areas.iter().sum::<f64>() / areas.len() as f64)
}

fn min_separation(ego: impl Iterator<Item = [f64; 2]> + Clone, others: &[AgentPath]) -> f64 {
    let mut best = f64::INFINITY;
    for path in others {
        for (e, o) in ego.clone().zip(&path.xy) {
            best = best.min((e[0] - o[0]).hypot(e[1] - o[1]));
        }
    }
    best
}

/// Executed ego's closest approach to any other agent divided by the
/// recorded ego's. `None` when the recorded ego touches an agent.
pub fn conservatism(log: &EpisodeLog) -> Result<Option<f64>> {
    if log.ego.is_empty() || log.others.is_empty() {
        return Err(Error::EmptyLog(" with an ego and other agents".into()));
    }
    let planned = min_separation(log.ego.iter().map(|s| s.xy()), &log.others);
    let truth = min_separation(log.ego_truth.iter().copied(), &log.others);
    Ok(if truth > 0.0 { Some(planned / truth) } else { None })
}

/// `1 − |goal − final| / |goal − start|` in the plane.
pub fn progress(log: &EpisodeLog) -> Result<f64> {
    let (Some(start), Some(end)) = (log.ego.first(), log.ego.last()) else {
        return Err(Error::EmptyLog(String::new()));
    };
    let g = log.goal;
    let d0 = (g[0] - start.x).hypot(g[1] - start.y);
    if d0 == 0.0 {
        return Err(Error::invalid("goal", "start coincides with the goal"));
    }
    Ok(1.0 - (g[0] - end.x).hypot(g[1] - end.y) / d0)
}

/// Whether the executed ego ever comes within `radius` of another agent's
/// recorded position at the same timestep (boundary included).
pub fn collision_check(log: &EpisodeLog, radius: f64) -> bool {
    log.others.iter().any(|p| {
        log.ego
            .iter()
            .zip(&p.xy)
            .any(|(e, o)| (e.x - o[0]).hypot(e.y - o[1]) <= radius)
    })
}
