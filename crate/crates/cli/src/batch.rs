//! Batch execution and the CSV/JSON result tables.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use reachcal::config::RunConfig;
use reachcal::harness::{
    collision_check, conservatism, coverage_rate, mean_area, miss_rate, progress, run_episode, EpisodeLog, Scenario,
};
use serde::{Deserialize, Serialize};

/// Per-episode summary, written as `episode-<scene>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub scene: String,
    pub calibrated: bool,
    pub alpha: Option<f64>,
    /// Indexed by prediction step − 1; `None` where the metric is undefined.
    pub coverage: Vec<Option<f64>>,
    pub area: Vec<Option<f64>>,
    pub miss: Vec<Option<f64>>,
    pub progress: Option<f64>,
    pub collision: Option<bool>,
    pub conservatism: Option<f64>,
    pub error: Option<String>,
}

impl SceneSummary {
    pub fn failed(scene: &str, calibrated: bool, horizon: usize, error: String) -> Self {
        Self {
            scene: scene.to_string(),
            calibrated,
            alpha: None,
            coverage: vec![None; horizon],
            area: vec![None; horizon],
            miss: vec![None; horizon],
            progress: None,
            collision: None,
            conservatism: None,
            error: Some(error),
        }
    }
}

pub fn summarize(scene: &str, log: &EpisodeLog, collision_radius: f64) -> SceneSummary {
    let per_step = |f: &dyn Fn(usize) -> reachcal::Result<f64>| (1..=log.horizon).map(|k| f(k).ok()).collect();
    let has_paths = !log.ego.is_empty() && !log.others.is_empty();
    SceneSummary {
        scene: scene.to_string(),
        calibrated: log.calibrated,
        alpha: Some(log.alpha),
        coverage: per_step(&|k| coverage_rate(log, k)),
        area: per_step(&|k| mean_area(log, k)),
        miss: per_step(&|k| miss_rate(log, k, ..)),
        progress: progress(log).ok(),
        collision: has_paths.then(|| collision_check(log, collision_radius)),
        conservatism: conservatism(log).ok().flatten(),
        error: None,
    }
}

/// Runs every scene in parallel; results keep the input order.
pub fn run_scenes(
    cfg: &RunConfig,
    scenes: &[(String, Result<Scenario, String>)],
    keep_logs: bool,
) -> Vec<(SceneSummary, Option<EpisodeLog>)> {
    let calibrated = !cfg.no_conformal;
    scenes
        .par_iter()
        .map(|(name, sc)| {
            let run = sc
                .as_ref()
                .map_err(|e| e.clone())
                .and_then(|sc| run_episode(sc, cfg).map_err(|e| e.to_string()));
            match run {
                Ok(log) => {
                    let summary = summarize(name, &log, cfg.inflation());
                    (summary, keep_logs.then_some(log))
                }
                Err(e) => (SceneSummary::failed(name, calibrated, cfg.horizon, e), None),
            }
        })
        .collect()
}

/// Sample mean and standard error; the error of a single sample is zero.
pub fn mean_se(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((mean, (var / n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub step: usize,
    pub coverage_mean: Option<f64>,
    pub coverage_se: Option<f64>,
    pub area_mean: Option<f64>,
    pub area_se: Option<f64>,
    pub miss_mean: Option<f64>,
    pub miss_se: Option<f64>,
    pub calibrated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningRow {
    pub scene: String,
    pub progress: Option<f64>,
    /// 1 for a collision; the rate in the summary rows.
    pub collision: Option<f64>,
    pub conservatism: Option<f64>,
    pub calibrated: bool,
    pub error: String,
}

fn column(summaries: &[SceneSummary], f: impl Fn(&SceneSummary) -> Option<f64>) -> Option<(f64, f64)> {
    mean_se(&summaries.iter().filter_map(f).collect::<Vec<_>>())
}

pub fn coverage_table(summaries: &[SceneSummary], horizon: usize, calibrated: bool) -> Vec<CoverageRow> {
    (1..=horizon)
        .map(|k| {
            let at = |v: &Vec<Option<f64>>| v.get(k - 1).copied().flatten();
            let cov = column(summaries, |s| at(&s.coverage));
            let area = column(summaries, |s| at(&s.area));
            let miss = column(summaries, |s| at(&s.miss));
            CoverageRow {
                step: k,
                coverage_mean: cov.map(|c| c.0),
                coverage_se: cov.map(|c| c.1),
                area_mean: area.map(|c| c.0),
                area_se: area.map(|c| c.1),
                miss_mean: miss.map(|c| c.0),
                miss_se: miss.map(|c| c.1),
                calibrated,
            }
        })
        .collect()
}

/// One row per scene, then `mean` and `se` rows over the scenes that ran.
pub fn planning_table(summaries: &[SceneSummary], calibrated: bool) -> Vec<PlanningRow> {
    let collision = |s: &SceneSummary| s.collision.map(|c| if c { 1.0 } else { 0.0 });
    let mut rows: Vec<PlanningRow> = summaries
        .iter()
        .map(|s| PlanningRow {
            scene: s.scene.clone(),
            progress: s.progress,
            collision: collision(s),
            conservatism: s.conservatism,
            calibrated: s.calibrated,
            error: s.error.clone().unwrap_or_default(),
        })
        .collect();
    let p = column(summaries, |s| s.progress);
    let c = column(summaries, collision);
    let r = column(summaries, |s| s.conservatism);
    for (name, pick) in [("mean", 0usize), ("se", 1)] {
        let get = |v: Option<(f64, f64)>| v.map(|x| if pick == 0 { x.0 } else { x.1 });
        rows.push(PlanningRow {
            scene: name.to_string(),
            progress: get(p),
            collision: get(c),
            conservatism: get(r),
            calibrated,
            error: String::new(),
        });
    }
    rows
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

/// Scenario files matching `pattern`, sorted, named by file stem.
pub fn load_scenes(pattern: &str) -> Result<Vec<(String, Result<Scenario, String>)>> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .with_context(|| format!("bad scenario glob `{pattern}`"))?
        .collect::<std::result::Result<_, _>>()?;
    paths.sort();
    if paths.is_empty() {
        bail!("no scenario files match `{pattern}`");
    }
    Ok(paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let sc = fs::read_to_string(p)
                .map_err(|e| e.to_string())
                .and_then(|text| serde_json::from_str::<Scenario>(&text).map_err(|e| format!("{}: {e}", p.display())));
            (name, sc)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct BatchReport {
    pub summaries: Vec<SceneSummary>,
    pub coverage: Vec<CoverageRow>,
    pub planning: Vec<PlanningRow>,
}

/// Runs `scenes` and writes `coverage.csv`, `planning.csv` and one
/// `episode-<scene>.json` summary per scene into `out`; with `full_logs`
/// also `log-<scene>.json` holding the complete episode log.
pub fn run_batch(
    cfg: &RunConfig,
    scenes: &[(String, Result<Scenario, String>)],
    out: &Path,
    full_logs: bool,
) -> Result<BatchReport> {
    if scenes.is_empty() {
        bail!("batch needs at least one scenario");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let results = run_scenes(cfg, scenes, full_logs);
    let calibrated = !cfg.no_conformal;
    let summaries: Vec<SceneSummary> = results.iter().map(|r| r.0.clone()).collect();
    let coverage = coverage_table(&summaries, cfg.horizon, calibrated);
    let planning = planning_table(&summaries, calibrated);
    fs::write(out.join("coverage.csv"), to_csv(&coverage)?)?;
    fs::write(out.join("planning.csv"), to_csv(&planning)?)?;
    for (summary, log) in &results {
        fs::write(
            out.join(format!("episode-{}.json", summary.scene)),
            serde_json::to_string_pretty(summary)?,
        )?;
        if let Some(log) = log {
            fs::write(
                out.join(format!("log-{}.json", summary.scene)),
                serde_json::to_string(log)?,
            )?;
        }
    }
    Ok(BatchReport {
        summaries,
        coverage,
        planning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_standard_error() {
        assert_eq!(mean_se(&[]), None);
        assert_eq!(mean_se(&[0.7]), Some((0.7, 0.0)));
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        // sample variance 5/3, over n = 4
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn failed_scenes_are_rows_with_errors() {
        let s = SceneSummary::failed("bad", true, 2, "boom".into());
        let rows = planning_table(&[s], true);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].error, "boom");
        assert_eq!(rows[1].progress, None);
        let csv = String::from_utf8(to_csv(&coverage_table(&[], 2, false)).unwrap()).unwrap();
        assert_eq!(
            csv,
            "step,coverage_mean,coverage_se,area_mean,area_se,miss_mean,miss_se,calibrated\n1,,,,,,,false\n2,,,,,,,false\n"
        );
    }
}
