//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when the
//! episode aborts on a collision or the artifacts cannot be written.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};

use crate::artifacts::{write_artifacts, Outcome};
use crate::config::{resolve, ConfigDocument, ConfigError, Overrides};
use crate::scenario::{run_scenario, Mode, ScenarioConfig, ScenarioError, ScenarioKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_ABORT: i32 = 2;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioArg {
    LaneAdvise,
    GapCreate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Active,
    Passive,
}

/// Simulate a robot car that probes a human driver's hidden preference and
/// then nudges the driver toward a traffic goal.
#[derive(Debug, Parser)]
#[command(name = "active-probe", version)]
struct Args {
    /// Which driving scenario to run.
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,

    /// Active probing or passive observation.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,

    /// TOML file overriding the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Directory for the timeseries, beliefs and summary files.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,

    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,

    #[arg(long)]
    seed: Option<u64>,
}

fn effective_config(args: &Args) -> Result<ScenarioConfig, ConfigError> {
    let document = args.config.as_deref().map(ConfigDocument::load).transpose()?;
    let overrides = Overrides {
        kind: args.scenario.map(|s| match s {
            ScenarioArg::LaneAdvise => ScenarioKind::LaneAdvise,
            ScenarioArg::GapCreate => ScenarioKind::GapCreate,
        }),
        mode: args.mode.map(|m| match m {
            ModeArg::Active => Mode::Active,
            ModeArg::Passive => Mode::Passive,
        }),
        duration: args.duration,
        seed: args.seed,
    };
    resolve(document.as_ref(), &overrides)
}

/// Parses `argv` (program name first), runs the episode and writes its
/// artifacts. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let config = match effective_config(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };

    let (log, outcome, code) = match run_scenario(&config) {
        Ok(log) => (log, Outcome::Completed, EXIT_OK),
        Err(ScenarioError::Collision { time, first, second, partial }) => {
            eprintln!("collision at t = {time:.1} s between {first} and {second}; run aborted");
            (*partial, Outcome::Collision { time, first, second }, EXIT_ABORT)
        }
        Err(e @ (ScenarioError::InvalidConfig(_) | ScenarioError::Plan(_))) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
        Err(e) => {
            eprintln!("run failed: {e}");
            return EXIT_ABORT;
        }
    };

    match write_artifacts(&args.out, &log, &config, outcome) {
        Ok(paths) => {
            if let Some(est) = log.estimate {
                println!("estimate at t = {:.1} s: MAP {:.2}, mean {:.2}", est.time, est.map, est.mean);
            }
            println!("wrote {}", paths.summary.parent().unwrap_or(&args.out).display());
            code
        }
        Err(e) => {
            eprintln!("{e}");
            EXIT_ABORT
        }
    }
}
