use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use reachcal::harness::EpisodeLog;
use reachcal_cli::batch::{load_scenes, run_batch};
use reachcal_cli::render::render_scene;
use reachcal_cli::scenarios::{generate, Family, GenerateOptions};
use reachcal_cli::{parse_config, OUT_DIR_ENV};

#[derive(Parser)]
#[command(
    name = "reachcal",
    version,
    about = "Calibrated occupancy tubes and reach-avoid planning over recorded scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenario files.
    Generate {
        /// intersection, corridor, random-constant-turn or shifting-noise
        #[arg(long)]
        kind: Family,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Non-ego agents (family default when omitted).
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        calib: Option<usize>,
        #[arg(long)]
        eval: Option<usize>,
        #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
        out: PathBuf,
    },
    /// Run every scenario matching a glob and write the result tables.
    Run {
        #[arg(long)]
        scenarios: String,
        /// key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Configuration override, `key=value`; repeatable, wins over the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
        out: PathBuf,
        /// Also write complete episode logs (needed by `render`).
        #[arg(long)]
        full_logs: bool,
    },
    /// Render one timestep of a complete episode log as SVG.
    Render {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        t: usize,
        /// Output file; defaults to `scene-<t>.svg` next to the log.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate {
            kind,
            count,
            seed,
            agents,
            calib,
            eval,
            out,
        } => {
            let opts = GenerateOptions {
                agents,
                calib_steps: calib,
                eval_steps: eval,
            };
            fs::create_dir_all(&out)?;
            for (name, sc) in generate(kind, count, seed, opts)? {
                let path = out.join(format!("{name}.json"));
                fs::write(&path, serde_json::to_string_pretty(&sc)?)?;
                println!("{}", path.display());
            }
        }
        Command::Run {
            scenarios,
            config,
            overrides,
            out,
            full_logs,
        } => {
            let cfg = parse_config(config.as_deref(), &overrides)?;
            let scenes = load_scenes(&scenarios)?;
            let report = run_batch(&cfg, &scenes, &out, full_logs)?;
            let failed = report.summaries.iter().filter(|s| s.error.is_some()).count();
            println!(
                "{} scenes, {} failed; results in {}",
                report.summaries.len(),
                failed,
                out.display()
            );
            for s in report.summaries.iter().filter(|s| s.error.is_some()) {
                eprintln!("{}: {}", s.scene, s.error.as_deref().unwrap_or_default());
            }
        }
        Command::Render { log, t, out } => {
            let text = fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
            let parsed: EpisodeLog = serde_json::from_str(&text)?;
            let svg = render_scene(&parsed, t)?;
            let out = out.unwrap_or_else(|| log.with_file_name(format!("scene-{t}.svg")));
            fs::write(&out, svg)?;
            println!("{}", out.display());
        }
        Command::Config { config, overrides } => {
            let cfg = parse_config(config.as_deref(), &overrides)?;
            for (k, v) in serde_json::to_value(&cfg)?.as_object().expect("config is an object") {
                println!("{k} = {v}");
            }
        }
    }
    Ok(())
}
