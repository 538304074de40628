//! Library side of the `reachcal` command: configuration loading, synthetic
//! scenario families, batch runs with CSV/JSON output and SVG rendering.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use reachcal::config::RunConfig;

pub mod batch;
pub mod render;
pub mod scenarios;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "REACHCAL_OUT";

/// Defaults, then `key=value` lines from `path`, then `overrides`; the last
/// assignment of a key wins.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut pairs = Vec::new();
    if let Some(p) = path {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        pairs.extend(RunConfig::parse_pairs(&text)?);
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{o}` is not key=value"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(RunConfig::from_pairs(
        pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())),
    )?)
}
