//! Run artifacts: per-step time series, belief snapshots and a JSON summary.
//!
//! CSV files use commas and `\n` line ends; floats carry 9 significant
//! digits. Writing is all-or-nothing: if any file fails, the files already
//! written are removed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::scenario::{
    cumulative_abs_control, velocity_deviation, AtomicObjective, Estimate, Mode, PhaseChange, RunLog,
    ScenarioConfig, ScenarioKind, VehicleClass,
};

pub const TIMESERIES_FILE: &str = "timeseries.csv";
pub const BELIEFS_FILE: &str = "beliefs.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Significant digits of every float in the CSV files.
pub const SIGNIFICANT_DIGITS: usize = 9;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("cannot encode summary: {0}")]
    Encode(#[from] serde_json::Error),
}

/// `x` with [`SIGNIFICANT_DIGITS`] significant digits, trailing zeros
/// dropped. Plain notation for exponents in `-5..9`, scientific otherwise.
pub fn format_float(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if (-5..SIGNIFICANT_DIGITS as i32).contains(&exp) {
        let decimals = (SIGNIFICANT_DIGITS as i32 - 1 - exp) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}", trim_zeros(mantissa.to_string()), exp)
    }
}

fn trim_zeros(mut s: String) -> String {
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

/// Renders a probability vector with [`SIGNIFICANT_DIGITS`] digits per
/// entry so that the rendered entries still sum to the original total.
///
/// Rounding each entry to nearest can leave the row sum off by more than
/// 1e-9 (thirty entries of 1/30 sum to 0.999999999). Entries start at the
/// nearest rendering; the ones closest to a rounding boundary are then
/// rounded the other way while that brings the sum closer. Every entry stays
/// within one unit of its last digit.
pub fn render_distribution(ps: &[f64]) -> Vec<String> {
    let mut out: Vec<String> = ps.iter().map(|&p| format_float(p)).collect();
    let rendered: Vec<f64> = out.iter().map(|s| s.parse().expect("rendered float parses")).collect();
    let mut alternatives: Vec<(f64, usize, f64)> = Vec::new();
    for (i, (&p, &r)) in ps.iter().zip(&rendered).enumerate() {
        if p == r || r == 0.0 || !r.is_finite() {
            continue;
        }
        // Measured on the exact value: `r` may have rounded up into the next decade.
        let unit = 10f64.powi(p.abs().log10().floor() as i32 - (SIGNIFICANT_DIGITS as i32 - 1));
        let alt = if p > r { r + unit } else { r - unit };
        alternatives.push(((alt - p).abs() / unit, i, alt));
    }
    alternatives.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut error = rendered.iter().sum::<f64>() - ps.iter().sum::<f64>();
    for (_, i, alt) in alternatives {
        let delta = alt - rendered[i];
        if (error + delta).abs() < error.abs() {
            out[i] = format_float(alt);
            error += delta;
        }
    }
    out
}

pub fn timeseries_header(background: usize) -> Vec<String> {
    let mut cols: Vec<String> = [
        "t", "phase", "robot_x", "robot_v", "robot_lane", "robot_a", "human_x", "human_v", "human_lane", "human_a",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for i in 0..background {
        cols.extend([format!("bg{i}_x"), format!("bg{i}_v"), format!("bg{i}_a")]);
    }
    cols
}

pub fn render_timeseries(log: &RunLog) -> String {
    let n_bg = log.records.first().map_or(0, |r| r.state.background.len());
    let mut out = timeseries_header(n_bg).join(",");
    out.push('\n');
    for r in &log.records {
        let s = &r.state;
        let f = format_float;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            f(r.time),
            r.phase.as_str(),
            f(s.robot.x),
            f(s.robot.v),
            s.robot.lane,
            f(r.robot_accel),
            f(s.human.x),
            f(s.human.v),
            s.human.lane,
            f(r.human_accel)
        );
        for (b, a) in s.background.iter().zip(&r.background_accel) {
            let _ = write!(out, ",{},{},{}", f(b.x), f(b.v), f(*a));
        }
        out.push('\n');
    }
    out
}

pub fn render_beliefs(log: &RunLog, hypotheses: usize) -> String {
    let mut out = String::from("t");
    for i in 1..=hypotheses {
        let _ = write!(out, ",p{i}");
    }
    out.push('\n');
    for snap in &log.snapshots {
        out.push_str(&format_float(snap.time));
        for p in render_distribution(&snap.probabilities) {
            out.push(',');
            out.push_str(&p);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Extrema {
    pub min: f64,
    pub max: f64,
    pub last: f64,
}

impl Extrema {
    fn of(series: &[f64]) -> Self {
        Self {
            min: series.iter().copied().fold(f64::INFINITY, f64::min),
            max: series.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            last: series.last().copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerClass<T> {
    pub robot: T,
    pub human: T,
    pub background: T,
}

impl<T> PerClass<T> {
    fn build(mut f: impl FnMut(VehicleClass) -> T) -> Self {
        Self { robot: f(VehicleClass::Robot), human: f(VehicleClass::Human), background: f(VehicleClass::Background) }
    }
}

/// How the episode ended.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Collision { time: f64, first: String, second: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct ToolInfo {
    pub name: &'static str,
    pub version: &'static str,
}

impl ToolInfo {
    pub const CURRENT: ToolInfo = ToolInfo { name: env!("CARGO_PKG_NAME"), version: env!("CARGO_PKG_VERSION") };
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary<'a> {
    pub tool: ToolInfo,
    pub outcome: Outcome,
    pub scenario: ScenarioKind,
    pub mode: Mode,
    pub records: usize,
    pub estimate: Option<Estimate>,
    pub probe_termination: Option<f64>,
    pub influence_start: Option<f64>,
    pub human_lane_change: Option<f64>,
    pub robot_lane_change: Option<f64>,
    pub objectives: &'a [AtomicObjective],
    pub phases: &'a [PhaseChange],
    /// Class-averaged `v(t) - v(0)`, m/s.
    pub velocity_deviation: PerClass<Extrema>,
    /// Class-averaged integral of `|a|`, m/s.
    pub cumulative_abs_control: PerClass<f64>,
    /// Every setting the run used.
    pub config: &'a ScenarioConfig,
}

impl<'a> Summary<'a> {
    pub fn new(log: &'a RunLog, config: &'a ScenarioConfig, outcome: Outcome) -> Self {
        Self {
            tool: ToolInfo::CURRENT,
            outcome,
            scenario: config.kind,
            mode: config.mode,
            records: log.records.len(),
            estimate: log.estimate,
            probe_termination: log.probe_termination,
            influence_start: log.influence_start,
            human_lane_change: log.human_lane_change,
            robot_lane_change: log.robot_lane_change,
            objectives: &log.objectives,
            phases: &log.phases,
            velocity_deviation: PerClass::build(|c| Extrema::of(&velocity_deviation(log, c))),
            cumulative_abs_control: PerClass::build(|c| cumulative_abs_control(log, c)),
            config,
        }
    }

    pub fn render(&self) -> Result<String, serde_json::Error> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }
}

/// Paths of the three artifact files of a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactPaths {
    pub timeseries: PathBuf,
    pub beliefs: PathBuf,
    pub summary: PathBuf,
}

impl ArtifactPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            timeseries: dir.join(TIMESERIES_FILE),
            beliefs: dir.join(BELIEFS_FILE),
            summary: dir.join(SUMMARY_FILE),
        }
    }
}

/// Writes all three artifacts into `dir`, creating it if needed.
pub fn write_artifacts(
    dir: &Path,
    log: &RunLog,
    config: &ScenarioConfig,
    outcome: Outcome,
) -> Result<ArtifactPaths, ArtifactError> {
    let paths = ArtifactPaths::in_dir(dir);
    let contents = [
        (&paths.timeseries, render_timeseries(log)),
        (&paths.beliefs, render_beliefs(log, config.model.grid.len())),
        (&paths.summary, Summary::new(log, config, outcome).render()?),
    ];
    std::fs::create_dir_all(dir).map_err(|source| ArtifactError::Io { path: dir.to_path_buf(), source })?;
    let mut written: Vec<&PathBuf> = Vec::new();
    for (path, text) in &contents {
        if let Err(source) = std::fs::write(path, text) {
            for p in written.iter().chain(std::iter::once(path)) {
                let _ = std::fs::remove_file(p);
            }
            return Err(ArtifactError::Io { path: path.to_path_buf(), source });
        }
        written.push(path);
    }
    Ok(paths)
}
