//! Run configuration: a TOML file with `[system]`, `[estimator]` and `[study]`
//! tables, plus `--set key=value` overrides applied on top.

use std::path::{Path, PathBuf};

use fastslow::dynamics::{build_fixture, FastSlowSystem, FixtureSpec, FastSpace, LORENZ_REFERENCE_POINT};
use fastslow::homogenize::EstimatorParams;
use fastslow::SeedSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Frozen,
    EstimateCoefficients,
    CellOracle,
    LorenzStudy,
    HeatStudy,
    Convergence,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Frozen => "frozen",
            Command::EstimateCoefficients => "estimate-coefficients",
            Command::CellOracle => "cell-oracle",
            Command::LorenzStudy => "lorenz-study",
            Command::HeatStudy => "heat-study",
            Command::Convergence => "convergence",
        }
    }

    fn default_fixture(self) -> &'static str {
        match self {
            Command::LorenzStudy => "lorenz",
            _ => "heat",
        }
    }
}

/// How ensemble members choose their fast initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialMode {
    /// Every member starts at `eta`.
    Fixed,
    /// Members are spread along a frozen-flow path started at `eta`.
    Attractor,
}

/// Study-level settings. Unused fields are ignored by commands that do not need them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub xi: Vec<f64>,
    /// Fast initial state; the fixture's reference point when absent.
    pub eta: Option<Vec<f64>>,
    pub epsilons: Vec<f64>,
    pub members: usize,
    pub horizon: f64,
    /// Fast-time step of the full system.
    pub dt_fast: f64,
    /// Step of the limiting SDE.
    pub dt_limit: f64,
    pub record_spacing: f64,
    pub initial: InitialMode,
    pub attractor_burn_in: f64,
    pub attractor_spacing: f64,
    pub path_deltas: Vec<f64>,
    pub path_runs: usize,
    pub histogram_bins: usize,
    /// Limit diffusion `σ²`; the fixture's reference value when absent.
    pub sigma2: Option<f64>,
    pub bump_centers: Vec<f64>,
    pub convergence_times: Vec<f64>,
    pub x_grid: Vec<f64>,
    /// Noise strengths whose correlation decay is checked against δ = 0 by
    /// `estimate-coefficients`; empty skips the check.
    pub stability_deltas: Vec<f64>,
    pub cell_grid: usize,
    /// Step of `simulate` and `frozen`, in their own time units.
    pub dt: f64,
    pub record_every: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            xi: vec![0.0],
            eta: None,
            epsilons: vec![0.8, 0.2],
            members: 1000,
            horizon: 10.0,
            dt_fast: 1e-3,
            dt_limit: 1e-3,
            record_spacing: 0.01,
            initial: InitialMode::Attractor,
            attractor_burn_in: 10.0,
            attractor_spacing: 5.0,
            path_deltas: vec![0.0, 0.5],
            path_runs: 1,
            histogram_bins: 40,
            sigma2: None,
            bump_centers: vec![0.0],
            convergence_times: (1..=10).map(f64::from).collect(),
            x_grid: vec![0.0],
            stability_deltas: Vec::new(),
            cell_grid: 2048,
            dt: 1e-3,
            record_every: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    command: Command,
    seed: Option<u64>,
    out: Option<PathBuf>,
    system: Option<toml::Table>,
    #[serde(default)]
    estimator: EstimatorParams,
    #[serde(default)]
    study: StudyConfig,
}

/// A validated run description.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub out: PathBuf,
    pub system: FixtureSpec,
    pub estimator: EstimatorParams,
    pub study: StudyConfig,
}

impl RunConfig {
    pub fn epsilon(&self) -> f64 {
        self.system.epsilon
    }

    pub fn build_system(&self) -> Result<FastSlowSystem, CliError> {
        build_fixture(&self.system).map_err(|e| CliError::Config(format!("system: {e}")))
    }

    pub fn eta(&self, system: &FastSlowSystem) -> Vec<f64> {
        self.study.eta.clone().unwrap_or_else(|| reference_point(system))
    }
}

/// The fixture's customary fast initial state.
pub fn reference_point(system: &FastSlowSystem) -> Vec<f64> {
    match system.fast_space() {
        FastSpace::Unbounded if system.m() == 3 => LORENZ_REFERENCE_POINT.to_vec(),
        _ => vec![0.1; system.m()],
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn parse_config(path: &Path, overrides: &CliOverrides) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text, overrides)
}

pub fn parse_config_str(text: &str, overrides: &CliOverrides) -> Result<RunConfig, CliError> {
    let mut table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("parse error: {e}")))?;
    for set in &overrides.sets {
        apply_override(&mut table, set)?;
    }
    if table.get("estimator").and_then(|e| e.get("seed")).is_some() {
        return Err(CliError::Config("estimator.seed: set the top-level seed instead".into()));
    }
    let raw: RawConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("invalid config: {}", e.message().trim())))?;

    let seed = overrides
        .seed
        .or(raw.seed)
        .ok_or_else(|| CliError::Config("seed: required field is missing".into()))?;
    let out = overrides.out.clone().or(raw.out).unwrap_or_else(|| PathBuf::from("out"));

    let mut system_table = raw.system.unwrap_or_default();
    system_table
        .entry("fixture")
        .or_insert_with(|| toml::Value::String(raw.command.default_fixture().into()));
    if raw.command == Command::HeatStudy || raw.command == Command::LorenzStudy {
        let expected = raw.command.default_fixture();
        if system_table.get("fixture").and_then(|v| v.as_str()) != Some(expected) {
            return Err(CliError::Config(format!("system.fixture: {} requires fixture {expected:?}", raw.command.as_str())));
        }
    }
    // the heat fixtures are noise driven and have no δ = 0 version
    if system_table.get("fixture").and_then(|v| v.as_str()).is_some_and(|f| f.starts_with("heat")) {
        system_table.entry("delta").or_insert(toml::Value::Float(1.0));
    }
    let system: FixtureSpec = toml::Value::Table(system_table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("system: {}", e.message().trim())))?;

    let mut config = RunConfig { command: raw.command, seed, out, system, estimator: raw.estimator, study: raw.study };
    config.estimator.seed = SeedSpec::new(seed);
    validate(&mut config)?;
    Ok(config)
}

/// `key=value` with a dotted key; a bare `epsilon`, `delta` or `fixture` addresses `[system]`.
fn apply_override(table: &mut toml::Table, set: &str) -> Result<(), CliError> {
    let (key, value) = set
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {set:?} is not key=value")))?;
    let key = key.trim();
    let mut path: Vec<&str> = key.split('.').collect();
    if path.len() == 1 && matches!(path[0], "epsilon" | "delta" | "fixture" | "coupling") {
        path.insert(0, "system");
    }
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let value = parse_value(value.trim());
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cursor = table;
    for p in parents {
        let entry = cursor.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

/// A TOML literal when it parses as one, a bare string otherwise.
fn parse_value(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn validate(config: &mut RunConfig) -> Result<(), CliError> {
    let system = config.build_system()?;
    let s = &config.study;
    let field = |name: &str, msg: &str| Err(CliError::Config(format!("study.{name}: {msg}")));
    if s.xi.len() != system.d() {
        return field("xi", &format!("expected {} components", system.d()));
    }
    if let Some(eta) = &s.eta {
        if eta.len() != system.m() {
            return field("eta", &format!("expected {} components", system.m()));
        }
    }
    for (name, v) in [
        ("horizon", s.horizon),
        ("dt_fast", s.dt_fast),
        ("dt_limit", s.dt_limit),
        ("record_spacing", s.record_spacing),
        ("attractor_spacing", s.attractor_spacing),
        ("dt", s.dt),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return field(name, "must be positive");
        }
    }
    if !(s.attractor_burn_in >= 0.0) {
        return field("attractor_burn_in", "must be nonnegative");
    }
    if s.record_spacing > s.horizon {
        return field("record_spacing", "exceeds the horizon");
    }
    if s.path_deltas.iter().any(|d| !(*d >= 0.0)) {
        return field("path_deltas", "must be nonnegative");
    }
    if s.stability_deltas.iter().any(|d| !(*d > 0.0)) {
        return field("stability_deltas", "must be positive");
    }
    if s.histogram_bins == 0 || s.path_runs == 0 || s.record_every == 0 {
        return field("histogram_bins", "bin, run and recording counts must be positive");
    }
    if s.sigma2.is_some_and(|v| !(v >= 0.0)) {
        return field("sigma2", "must be nonnegative");
    }
    if s.bump_centers.is_empty() {
        return field("bump_centers", "at least one observable is required");
    }
    if matches!(config.command, Command::LorenzStudy | Command::Convergence) {
        if s.epsilons.is_empty() || s.epsilons.iter().any(|e| !(*e > 0.0)) {
            return field("epsilons", "must be a nonempty list of positive values");
        }
        if s.members < 30 {
            return field("members", "at least 30 members are needed for distribution comparisons");
        }
        if s.convergence_times.is_empty()
            || s.convergence_times.iter().any(|t| !(*t > 0.0) || *t > s.horizon * (1.0 + 1e-12))
        {
            return field("convergence_times", "times must be nonempty and lie in (0, horizon]");
        }
    }
    if s.x_grid.is_empty() {
        return field("x_grid", "at least one point is required");
    }
    if s.cell_grid < 8 {
        return field("cell_grid", "at least 8 cells are required");
    }
    if config.estimator.y0.is_empty() {
        config.estimator.y0 = config.eta(&system);
    }
    let needs_estimator = matches!(
        config.command,
        Command::EstimateCoefficients | Command::HeatStudy | Command::Convergence
    );
    if needs_estimator {
        config
            .estimator
            .validate(&system)
            .map_err(|e| CliError::Config(format!("estimator: {e}")))?;
    }
    Ok(())
}
