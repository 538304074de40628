//! Run configuration: every tunable of an episode, with defaults and range
//! checks.
//!
//! The struct is flat so that `key=value` pairs map one-to-one onto fields;
//! [`RunConfig::from_pairs`] applies them in order over the defaults.

use serde::{Deserialize, Serialize};

use crate::conformal::{corrected_alpha, ControlInterval, Stretch};
use crate::dynamics::Control;
use crate::error::{Error, Result};
use crate::forecaster::{ConstantControlGmm, Forecaster, OracleNoise};
use crate::reachability::{GridSpec, Scheme, TubeOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ForecasterKind {
    #[default]
    Gmm,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StretchKind {
    #[default]
    Linear,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileInit {
    #[default]
    Zero,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Predict, build tubes, plan and step the ego.
    #[default]
    Full,
    /// Predict and calibrate only; the ego replays its recording.
    Calibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Total miscoverage over the selected agents.
    pub gamma: f64,
    /// Agents considered per timestep (closest to the ego).
    pub n_closest: usize,
    /// Per-agent miscoverage; overrides the value derived from `gamma`.
    pub alpha: Option<f64>,
    pub dt: f64,
    pub horizon: usize,
    /// History states fed to the forecaster.
    pub history: usize,
    /// Conformal learning rate.
    pub xi: f64,
    /// Quantile regression learning rate.
    pub zeta: f64,
    pub stretch: StretchKind,
    pub stretch_c: f64,
    pub forecaster: ForecasterKind,
    pub oracle_std: f64,
    pub oracle_growth: f64,
    /// Ablation: zero the GMM variance and covariance features.
    pub no_covariance_features: bool,
    /// Ablation: freeze the conformal parameter at zero.
    pub no_conformal: bool,
    /// Keep quantile and conformal state per agent instead of shared.
    pub per_agent_state: bool,
    pub quantile_init: QuantileInit,
    pub quantile_init_scale: f64,
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub grid_nv: usize,
    pub grid_ntheta: usize,
    pub grid_width_x: f64,
    pub grid_width_y: f64,
    pub grid_v_min: f64,
    pub grid_v_max: f64,
    pub grid_fit_speed: bool,
    pub grid_speed_margin: f64,
    pub grid_fit_heading: bool,
    pub grid_heading_margin: f64,
    pub scheme: Scheme,
    pub initial_radius: f64,
    pub dilation: f64,
    pub ego_u1_min: f64,
    pub ego_u1_max: f64,
    pub ego_u2_min: f64,
    pub ego_u2_max: f64,
    pub r_ego: f64,
    pub r_agent: f64,
    pub goal_tol: f64,
    pub mode: RunMode,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grid = GridSpec::default();
        let tube = TubeOptions::default();
        let oracle = OracleNoise::default();
        Self {
            gamma: 0.05,
            n_closest: 3,
            alpha: None,
            dt: crate::dynamics::DEFAULT_DT,
            horizon: crate::dynamics::DEFAULT_HORIZON,
            history: crate::forecaster::DEFAULT_CONTEXT,
            xi: crate::conformal::DEFAULT_LEARNING_RATE,
            zeta: crate::quantreg::DEFAULT_LEARNING_RATE,
            stretch: StretchKind::Linear,
            stretch_c: 1.0,
            forecaster: ForecasterKind::Gmm,
            oracle_std: oracle.std,
            oracle_growth: oracle.step_growth,
            no_covariance_features: false,
            no_conformal: false,
            per_agent_state: false,
            quantile_init: QuantileInit::Zero,
            quantile_init_scale: 0.1,
            grid_nx: grid.nx,
            grid_ny: grid.ny,
            grid_nv: grid.nv,
            grid_ntheta: grid.ntheta,
            grid_width_x: grid.width_x,
            grid_width_y: grid.width_y,
            grid_v_min: grid.v_min,
            grid_v_max: grid.v_max,
            grid_fit_speed: grid.fit_speed,
            grid_speed_margin: grid.speed_margin,
            grid_fit_heading: grid.fit_heading,
            grid_heading_margin: grid.heading_margin,
            scheme: tube.scheme,
            initial_radius: tube.initial_radius,
            dilation: tube.dilation,
            ego_u1_min: -4.0,
            ego_u1_max: 2.0,
            ego_u2_min: -0.5,
            ego_u2_max: 0.5,
            r_ego: crate::planner::DEFAULT_FOOTPRINT_RADIUS,
            r_agent: crate::planner::DEFAULT_FOOTPRINT_RADIUS,
            goal_tol: 2.0,
            mode: RunMode::Full,
            seed: 0,
        }
    }
}

fn field_error(name: &'static str, reason: impl Into<String>) -> Error {
    Error::invalid(name, reason)
}

fn check(ok: bool, name: &'static str, what: &str, value: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(field_error(name, format!("{what}, got {value}")))
    }
}

impl RunConfig {
    /// Applies `key=value` pairs over the defaults, later pairs winning.
    /// Values are read as JSON when they parse as JSON and as bare strings
    /// otherwise, so `mode=calibration` and `alpha=0.1` both work.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        Self::default().with_pairs(pairs)
    }

    pub fn with_pairs<'a, I>(&self, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let serde_json::Value::Object(mut map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config serializes to an object")
        };
        for (key, raw) in pairs {
            let key = key.trim();
            if !map.contains_key(key) {
                return Err(field_error("config", format!("unknown key `{key}`")));
            }
            let raw = raw.trim();
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            map.insert(key.to_string(), value);
        }
        let cfg: RunConfig =
            serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| field_error("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a `key=value` file; blank lines and `#` comments are skipped.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| field_error("config", format!("line {} is not key=value: `{line}`", i + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        check(
            (0.0..1.0).contains(&self.gamma),
            "gamma",
            "must lie in [0, 1)",
            self.gamma,
        )?;
        check(self.n_closest >= 1, "n_closest", "must be at least 1", self.n_closest)?;
        if let Some(a) = self.alpha {
            check(a > 0.0 && a < 1.0, "alpha", "must lie in (0, 1)", a)?;
        } else {
            check(
                self.gamma > 0.0,
                "gamma",
                "must be positive unless alpha is given",
                self.gamma,
            )?;
        }
        check(self.dt > 0.0 && self.dt.is_finite(), "dt", "must be positive", self.dt)?;
        check(self.horizon >= 1, "horizon", "must be at least 1", self.horizon)?;
        check(self.history >= 3, "history", "must be at least 3", self.history)?;
        check(self.xi > 0.0 && self.xi.is_finite(), "xi", "must be positive", self.xi)?;
        check(
            self.zeta > 0.0 && self.zeta.is_finite(),
            "zeta",
            "must be positive",
            self.zeta,
        )?;
        check(
            self.stretch_c > 0.0 && self.stretch_c.is_finite(),
            "stretch_c",
            "must be positive",
            self.stretch_c,
        )?;
        check(
            self.oracle_std >= 0.0 && self.oracle_std.is_finite(),
            "oracle_std",
            "must be nonnegative",
            self.oracle_std,
        )?;
        check(
            self.oracle_growth >= 0.0,
            "oracle_growth",
            "must be nonnegative",
            self.oracle_growth,
        )?;
        check(
            self.quantile_init_scale >= 0.0,
            "quantile_init_scale",
            "must be nonnegative",
            self.quantile_init_scale,
        )?;
        for (name, n) in [
            ("grid_nx", self.grid_nx),
            ("grid_ny", self.grid_ny),
            ("grid_nv", self.grid_nv),
        ] {
            check(n >= 3, name, "must be at least 3", n)?;
        }
        check(
            self.grid_ntheta >= 4,
            "grid_ntheta",
            "must be at least 4",
            self.grid_ntheta,
        )?;
        check(
            self.grid_width_x > 0.0,
            "grid_width_x",
            "must be positive",
            self.grid_width_x,
        )?;
        check(
            self.grid_width_y > 0.0,
            "grid_width_y",
            "must be positive",
            self.grid_width_y,
        )?;
        check(
            self.grid_v_min < self.grid_v_max,
            "grid_v_max",
            "must exceed grid_v_min",
            self.grid_v_max,
        )?;
        check(
            self.grid_speed_margin >= 0.0,
            "grid_speed_margin",
            "must be nonnegative",
            self.grid_speed_margin,
        )?;
        check(
            self.grid_heading_margin >= 0.0,
            "grid_heading_margin",
            "must be nonnegative",
            self.grid_heading_margin,
        )?;
        check(
            self.initial_radius > 0.0,
            "initial_radius",
            "must be positive",
            self.initial_radius,
        )?;
        check(self.dilation >= 0.0, "dilation", "must be nonnegative", self.dilation)?;
        check(
            self.ego_u1_min <= self.ego_u1_max,
            "ego_u1_max",
            "must be at least ego_u1_min",
            self.ego_u1_max,
        )?;
        check(
            self.ego_u2_min <= self.ego_u2_max,
            "ego_u2_max",
            "must be at least ego_u2_min",
            self.ego_u2_max,
        )?;
        check(self.r_ego >= 0.0, "r_ego", "must be nonnegative", self.r_ego)?;
        check(self.r_agent >= 0.0, "r_agent", "must be nonnegative", self.r_agent)?;
        check(self.goal_tol > 0.0, "goal_tol", "must be positive", self.goal_tol)?;
        Ok(())
    }

    /// Per-agent miscoverage when `n` agents are considered.
    pub fn alpha_for(&self, n: usize) -> Result<f64> {
        match self.alpha {
            Some(a) => Ok(a),
            None => corrected_alpha(self.gamma, n.clamp(1, self.n_closest)),
        }
    }

    pub fn stretch_mode(&self) -> Stretch {
        match self.stretch {
            StretchKind::Linear => Stretch::Linear,
            StretchKind::Exponential => Stretch::Exponential { c: self.stretch_c },
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            nx: self.grid_nx,
            ny: self.grid_ny,
            nv: self.grid_nv,
            ntheta: self.grid_ntheta,
            width_x: self.grid_width_x,
            width_y: self.grid_width_y,
            v_min: self.grid_v_min,
            v_max: self.grid_v_max,
            fit_speed: self.grid_fit_speed,
            speed_margin: self.grid_speed_margin,
            fit_heading: self.grid_fit_heading,
            heading_margin: self.grid_heading_margin,
        }
    }

    pub fn tube_options(&self) -> TubeOptions {
        TubeOptions {
            initial_radius: self.initial_radius,
            dilation: self.dilation,
            ..TubeOptions::with_scheme(self.scheme)
        }
    }

    pub fn ego_box(&self) -> ControlInterval {
        ControlInterval {
            lower: Control::new(self.ego_u1_min, self.ego_u2_min),
            upper: Control::new(self.ego_u1_max, self.ego_u2_max),
        }
    }

    pub fn inflation(&self) -> f64 {
        self.r_ego + self.r_agent
    }

    pub fn build_forecaster(&self) -> Box<dyn Forecaster> {
        match self.forecaster {
            ForecasterKind::Gmm => Box::new(ConstantControlGmm {
                horizon: self.horizon,
                context: self.history,
                drop_covariance_features: self.no_covariance_features,
                ..ConstantControlGmm::default()
            }),
            ForecasterKind::Oracle => Box::new(OracleNoise {
                horizon: self.horizon,
                context: self.history,
                std: self.oracle_std,
                step_growth: self.oracle_growth,
                seed: self.seed,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let cfg = RunConfig::from_pairs([]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!((cfg.gamma, cfg.n_closest, cfg.dt, cfg.horizon), (0.05, 3, 0.5, 6));
        assert_eq!(cfg.history, 8);
    }

    #[test]
    fn out_of_range_names_the_field() {
        match RunConfig::from_pairs([("gamma", "1.5")]) {
            Err(Error::InvalidArgument { name, .. }) => assert_eq!(name, "gamma"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_pairs([("xi", "0")]) {
            Err(Error::InvalidArgument { name, .. }) => assert_eq!(name, "xi"),
            other => panic!("{other:?}"),
        }
        let err = RunConfig::from_pairs([("gama", "0.1")]).unwrap_err();
        assert!(err.to_string().contains("gama"));
    }

    #[test]
    fn later_pairs_win() {
        let cfg = RunConfig::from_pairs([("gamma", "0.1"), ("gamma", "0.2"), ("mode", "calibration")]).unwrap();
        assert_eq!(cfg.gamma, 0.2);
        assert_eq!(cfg.mode, RunMode::Calibration);
        let cfg = RunConfig::from_pairs([("alpha", "0.1"), ("scheme", "upwind")]).unwrap();
        assert_eq!(cfg.alpha, Some(0.1));
        assert_eq!(cfg.scheme, Scheme::Upwind);
    }

    #[test]
    fn file_pairs_parse() {
        let pairs = RunConfig::parse_pairs("# comment\ngamma = 0.1\n\nseed=4 # trailing\n").unwrap();
        assert_eq!(pairs, vec![("gamma".into(), "0.1".into()), ("seed".into(), "4".into())]);
        assert!(RunConfig::parse_pairs("gamma 0.1").is_err());
    }

    #[test]
    fn alpha_follows_agent_count() {
        let cfg = RunConfig::default();
        assert!((cfg.alpha_for(1).unwrap() - 0.05).abs() < 1e-15);
        assert!((cfg.alpha_for(3).unwrap() - 0.016_952_427_508_441).abs() < 1e-12);
        // more agents than considered use N
        assert_eq!(cfg.alpha_for(7).unwrap(), cfg.alpha_for(3).unwrap());
    }
}
