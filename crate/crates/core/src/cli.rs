//! Batch commands behind the `agentvol` binary: simulate, fit, attribute,
//! control and features. Every command reads and writes plain files under
//! one output directory so stages can be rerun independently.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{
    build_report, sigma2_mu_ratio, write_reports_csv, AttributionError, AttributionReport, ControlResidual,
    RatioPoint, ReportOptions,
};
use crate::estimation::{fit_day, DayFits, EstimationError, FitConfig, Ridge};
use crate::model::{spectral_radius, BasisDictionary, HawkesModel, ModelError};
use crate::pipeline::{
    classify_records, compute_features, decile_conditional_mean, read_events_csv, read_features_csv, read_raw_csv,
    shuffle_control, write_events_csv, write_features_csv, DailyAgentFeatures, DecileSummary, IngestStats,
    PipelineError, PresenceTable, DEFAULT_SESSION, FEATURE_NAMES,
};
use crate::simulation::{simulate_thinning_with, SimOptions, SimulationError};
use crate::stream::{EventStream, Session};
use crate::types::AgentId;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {field}: {message}")]
    Config { field: String, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error("{path}: {source}")]
    Pipeline { path: PathBuf, source: PipelineError },
}

impl CliError {
    fn config(field: &str, message: impl Into<String>) -> Self {
        CliError::Config { field: field.to_string(), message: message.into() }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn pipe_err(path: &Path) -> impl FnOnce(PipelineError) -> CliError + '_ {
    move |source| CliError::Pipeline { path: path.to_path_buf(), source }
}

/// Exit code for a command that completed with some failed items.
pub const EXIT_PARTIAL: i32 = 3;
/// Exit code for a command that could not run.
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionaryConfig {
    /// Number of exponential decays.
    pub len: usize,
    /// Shortest time scale, seconds.
    pub tau_min: f64,
    /// Longest time scale, seconds.
    pub tau_max: f64,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        Self { len: 10, tau_min: 1e-6, tau_max: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Seconds after midnight.
    pub open: f64,
    pub close: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { open: DEFAULT_SESSION.0, close: DEFAULT_SESSION.1 }
    }
}

/// Run settings, read from a TOML file; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Pre-classified events: one CSV file or a directory of per-day CSVs.
    pub events: Option<PathBuf>,
    /// Raw order records: one CSV file or a directory of per-day CSVs.
    pub raw: Option<PathBuf>,
    /// Optional presence-at-best table for `features`.
    pub presence: Option<PathBuf>,
    /// Features table for decile summaries in `attribute`.
    pub features: Option<PathBuf>,
    /// Model file for `simulate`.
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub dictionary: DictionaryConfig,
    pub baseline_bins: usize,
    pub session: SessionConfig,
    pub min_events: usize,
    /// Relative ridge on the normalised Gram matrix.
    pub ridge: f64,
    pub seed: u64,
    pub control_replicates: usize,
    /// Width of the centred window of the endogeneity ratio, days.
    pub window_days: usize,
    /// Days to simulate.
    pub days: usize,
    /// Price units per half-tick.
    pub half_tick: f64,
    /// Reference price for annualised volatility.
    pub p0: Option<f64>,
    /// Re-invert without the agent for impact fractions.
    pub exact_rho: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            events: None,
            raw: None,
            presence: None,
            features: None,
            model: None,
            out: PathBuf::from("out"),
            dictionary: DictionaryConfig::default(),
            baseline_bins: 17,
            session: SessionConfig::default(),
            min_events: 1000,
            ridge: 1e-8,
            seed: 0,
            control_replicates: 10,
            window_days: 20,
            days: 1,
            half_tick: 0.25,
            p0: None,
            exact_rho: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    /// Checks every numeric field before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dictionary;
        if d.len == 0 {
            return Err(CliError::config("dictionary.len", "must be positive"));
        }
        if !(d.tau_min > 0.0 && d.tau_min.is_finite()) {
            return Err(CliError::config("dictionary.tau_min", "must be positive"));
        }
        if !(d.tau_max.is_finite() && d.tau_max > d.tau_min) {
            return Err(CliError::config("dictionary.tau_max", "must exceed tau_min"));
        }
        if self.baseline_bins == 0 {
            return Err(CliError::config("baseline_bins", "must be positive"));
        }
        if !(self.session.open >= 0.0 && self.session.close > self.session.open && self.session.close.is_finite()) {
            return Err(CliError::config("session", "need 0 <= open < close"));
        }
        if self.min_events == 0 {
            return Err(CliError::config("min_events", "must be positive"));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(CliError::config("ridge", "must be nonnegative"));
        }
        if self.control_replicates == 0 {
            return Err(CliError::config("control_replicates", "must be positive"));
        }
        if self.window_days == 0 {
            return Err(CliError::config("window_days", "must be positive"));
        }
        if self.days == 0 {
            return Err(CliError::config("days", "must be positive"));
        }
        if !(self.half_tick > 0.0) {
            return Err(CliError::config("half_tick", "must be positive"));
        }
        if let Some(p0) = self.p0 {
            if !(p0 > 0.0) {
                return Err(CliError::config("p0", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn session(&self) -> Result<Session, CliError> {
        Session::new(self.session.open, self.session.close).map_err(|e| CliError::config("session", e.to_string()))
    }

    pub fn fit_config(&self) -> Result<FitConfig, CliError> {
        let d = &self.dictionary;
        let basis = if d.len == 1 {
            BasisDictionary::new(vec![1.0 / d.tau_max])
        } else {
            BasisDictionary::log_spaced(d.len, d.tau_min, d.tau_max)
        }
        .map_err(|e| CliError::config("dictionary", e.to_string()))?;
        Ok(FitConfig {
            basis,
            baseline_bins: self.baseline_bins,
            min_events: self.min_events,
            ridge: Ridge::Relative(self.ridge),
        })
    }

    fn report_options(&self) -> ReportOptions {
        ReportOptions { half_tick: self.half_tick, p0: self.p0, exact_rho: self.exact_rho }
    }
}

#[derive(Debug, Parser)]
#[command(name = "agentvol", version, about = "Multi-agent Hawkes fits and per-agent volatility attribution")]
pub struct Cli {
    /// TOML run configuration; unset fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Random seed, overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overrides the config (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate event streams from a model file; writes events and truth.json.
    Simulate(SimulateArgs),
    /// Fit every eligible agent plus the pooled remainder, per day; writes fits/<day>.json.
    Fit(FitArgs),
    /// Stitch fits and attribute volatility; writes report.json, report.csv, ratio.csv.
    Attribute(AttributeArgs),
    /// Fit label-shuffled control days; writes control/<day>.json and control/residuals.csv.
    Control(ControlArgs),
    /// Classify raw records and compute agent features; writes events/, features.csv.
    Features(FeaturesArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Model file (JSON).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Number of days.
    #[arg(long)]
    pub days: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// events.csv or a directory of per-day CSV files.
    #[arg(long)]
    pub events: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    /// Directory of per-day fits (default `<out>/fits`).
    #[arg(long)]
    pub fits: Option<PathBuf>,
    /// features.csv for decile summaries.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Shuffled replicates per day.
    #[arg(long)]
    pub replicates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// raw.csv or a directory of per-day raw CSV files.
    #[arg(long)]
    pub raw: Option<PathBuf>,
    /// Presence table (`day,agent_id,presence_pct`).
    #[arg(long)]
    pub presence: Option<PathBuf>,
}

/// Result of a command that ran to the end.
#[derive(Debug, Default)]
pub struct Outcome {
    pub messages: Vec<String>,
    /// Items that failed while others succeeded.
    pub failures: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            EXIT_PARTIAL
        }
    }
}

/// Resolves config and flags, then runs the command.
pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    match &cli.command {
        Command::Simulate(a) => {
            if a.model.is_some() {
                cfg.model.clone_from(&a.model);
            }
            if let Some(d) = a.days {
                cfg.days = d;
            }
        }
        Command::Fit(a) => {
            if a.events.is_some() {
                cfg.events.clone_from(&a.events);
            }
        }
        Command::Attribute(a) => {
            if a.features.is_some() {
                cfg.features.clone_from(&a.features);
            }
        }
        Command::Control(a) => {
            if a.events.is_some() {
                cfg.events.clone_from(&a.events);
            }
            if let Some(r) = a.replicates {
                cfg.control_replicates = r;
            }
        }
        Command::Features(a) => {
            if a.raw.is_some() {
                cfg.raw.clone_from(&a.raw);
            }
            if a.presence.is_some() {
                cfg.presence.clone_from(&a.presence);
            }
        }
    }
    cfg.validate()?;
    let work = || match &cli.command {
        Command::Simulate(_) => cmd_simulate(&cfg),
        Command::Fit(_) => cmd_fit(&cfg),
        Command::Attribute(a) => cmd_attribute(&cfg, a.fits.as_deref()),
        Command::Control(_) => cmd_control(&cfg),
        Command::Features(_) => cmd_features(&cfg),
    };
    match cli.jobs {
        Some(0) => Err(CliError::config("jobs", "must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::config("jobs", e.to_string()))?
            .install(work),
        None => work(),
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Parse { path: path.into(), message: e.to_string() })?;
    use std::io::Write;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse { path: path.into(), message: e.to_string() })
}

/// Per-day inputs: a single file (day named after its stem) or every `.csv`
/// in a directory, sorted by name.
pub fn day_files(path: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        Ok(files.into_iter().map(|p| (stem(&p), p)).collect())
    } else if path.is_file() {
        Ok(vec![(stem(path), path.to_path_buf())])
    } else {
        Err(CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        })
    }
}

fn load_day(path: &Path, day: &str, session: Session) -> Result<(EventStream, IngestStats), CliError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    read_events_csv(std::io::BufReader::new(f), day, session).map_err(pipe_err(path))
}

fn write_stream(path: &Path, stream: &EventStream) -> Result<(), CliError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    write_events_csv(stream, BufWriter::new(f)).map_err(pipe_err(path))
}

fn events_path(cfg: &RunConfig) -> PathBuf {
    cfg.events.clone().unwrap_or_else(|| {
        let dir = cfg.out.join("events");
        if dir.is_dir() {
            dir
        } else {
            cfg.out.join("events.csv")
        }
    })
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let path = cfg.model.as_deref().ok_or_else(|| CliError::Usage("simulate needs --model".into()))?;
    let model: HawkesModel = read_json(path)?;
    let radius = spectral_radius(&model.phi())?;
    if radius >= 1.0 {
        return Err(ModelError::Unstable { spectral_radius: radius }.into());
    }
    let session = cfg.session()?;
    ensure_dir(&cfg.out)?;
    let horizon = session.length();
    let names: Vec<String> =
        if cfg.days == 1 { vec!["events".into()] } else { (0..cfg.days).map(|d| format!("day{d:03}")).collect() };
    let streams: Vec<Result<EventStream, SimulationError>> = names
        .par_iter()
        .enumerate()
        .map(|(d, name)| {
            let opts = SimOptions { open: session.open, day: name.clone(), ..Default::default() };
            simulate_thinning_with(&model, horizon, cfg.seed.wrapping_add(d as u64), &opts)
        })
        .collect();
    let mut out = Outcome::default();
    if cfg.days == 1 {
        let s = streams.into_iter().next().unwrap()?;
        write_stream(&cfg.out.join("events.csv"), &s)?;
        out.messages.push(format!("simulated {} events", s.len()));
    } else {
        let dir = cfg.out.join("events");
        ensure_dir(&dir)?;
        for (name, s) in names.iter().zip(streams) {
            let s = s?;
            write_stream(&dir.join(format!("{name}.csv")), &s)?;
            out.messages.push(format!("{name}: simulated {} events", s.len()));
        }
    }
    write_json(&cfg.out.join("truth.json"), &model)?;
    Ok(out)
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let files = day_files(&events_path(cfg))?;
    let session = cfg.session()?;
    let fit_cfg = cfg.fit_config()?;
    let dir = cfg.out.join("fits");
    ensure_dir(&dir)?;
    let results: Vec<(String, Result<DayFits, CliError>)> = files
        .par_iter()
        .map(|(day, path)| {
            let r = load_day(path, day, session).and_then(|(s, _)| fit_day(&s, &fit_cfg).map_err(CliError::from));
            (day.clone(), r)
        })
        .collect();
    let mut out = Outcome::default();
    let mut ok = 0;
    let mut last_err = None;
    for (day, r) in results {
        match r {
            Ok(fits) => {
                write_json(&dir.join(format!("{day}.json")), &fits)?;
                let failed: usize = fits.fits.iter().chain(fits.remainder.iter()).map(|f| f.failed.iter().filter(|x| **x).count()).sum();
                out.messages.push(format!(
                    "{day}: {} agent fits, remainder {}, {} folded, {} failed components",
                    fits.fits.len(),
                    if fits.remainder.is_some() { "fitted" } else { "absent" },
                    fits.folded.len(),
                    failed
                ));
                for n in &fits.notes {
                    out.messages.push(format!("{day}: {n}"));
                }
                if failed > 0 {
                    out.failures.push(format!("{day}: {failed} components failed"));
                }
                ok += 1;
            }
            Err(e) => {
                out.failures.push(format!("{day}: {e}"));
                last_err = Some(e);
            }
        }
    }
    if ok == 0 {
        return Err(last_err.unwrap_or_else(|| CliError::Usage("no event files found".into())));
    }
    Ok(out)
}

/// Agents with their own fit on at least one day, ascending.
pub fn agent_universe<'a>(days: impl IntoIterator<Item = &'a DayFits>) -> Vec<AgentId> {
    let set: BTreeSet<AgentId> = days.into_iter().flat_map(|d| d.fits.iter().map(|f| f.agent)).collect();
    set.into_iter().collect()
}

fn load_fits(dir: &Path) -> Result<Vec<DayFits>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files.iter().map(|p| read_json(p)).collect()
}

/// Per-day shuffled-label comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDay {
    pub day: String,
    pub replicates: usize,
    pub residuals: Vec<ControlResidual>,
    #[serde(default)]
    pub failures: Vec<String>,
}

/// Unstable or otherwise unreportable day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDay {
    pub day: String,
    pub reason: String,
    pub spectral_radius: Option<f64>,
}

/// One entry of the daily endogeneity series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub day: String,
    #[serde(flatten)]
    pub point: RatioPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub agents: Vec<AgentId>,
    pub days: Vec<AttributionReport>,
    pub skipped: Vec<SkippedDay>,
    pub ratio: Vec<RatioRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deciles: Vec<DecileSummary>,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Attribution of one day of fits over a fixed agent universe.
pub fn attribute_day(fits: &DayFits, agents: &[AgentId], opts: &ReportOptions) -> Result<AttributionReport, CliError> {
    let global = fits.global(agents)?;
    let mut report = build_report(&fits.day, &global, opts)?;
    report.flags.extend(fits.notes.iter().cloned());
    Ok(report)
}

fn decile_targets(report: &AttributionReport, agent: AgentId, horizon: f64) -> Vec<(&'static str, Option<f64>)> {
    let row = report.agent(agent);
    let ctl = report.control.iter().find(|c| c.agent == agent);
    let n_events = row.map(|r| r.intensity * horizon).filter(|n| *n > 0.0);
    vec![
        ("xi", row.and_then(|r| r.xi_mean)),
        ("rho_sigma2_per_event", row.and_then(|r| r.rho).zip(n_events).map(|(rho, n)| rho * report.sigma2 / n)),
        ("f", row.and_then(|r| r.f)),
        ("rho_residual", ctl.map(|c| c.rho_residual)),
    ]
}

pub fn cmd_attribute(cfg: &RunConfig, fits_dir: Option<&Path>) -> Result<Outcome, CliError> {
    let dir = fits_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join("fits"));
    let all = load_fits(&dir)?;
    if all.is_empty() {
        return Err(CliError::Usage(format!("no fits in {}", dir.display())));
    }
    let agents = agent_universe(&all);
    let opts = cfg.report_options();
    let mut out = Outcome::default();
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    let mut horizons = Vec::new();
    for fits in &all {
        match attribute_day(fits, &agents, &opts) {
            Ok(mut r) => {
                let ctl_path = cfg.out.join("control").join(format!("{}.json", fits.day));
                if ctl_path.is_file() {
                    let ctl: ControlDay = read_json(&ctl_path)?;
                    r.control = ctl.residuals;
                }
                out.messages.push(format!("{}: sigma2 {:.6} half-ticks^2/s", r.day, r.sigma2));
                horizons.push(fits.session.length());
                reports.push(r);
            }
            Err(CliError::Estimation(EstimationError::UnstableGlobal { spectral_radius, .. })) => {
                out.failures.push(format!("{}: unstable, spectral radius {spectral_radius:.6}", fits.day));
                skipped.push(SkippedDay { day: fits.day.clone(), reason: "unstable".into(), spectral_radius: Some(spectral_radius) });
            }
            Err(e) => {
                out.failures.push(format!("{}: {e}", fits.day));
                skipped.push(SkippedDay { day: fits.day.clone(), reason: e.to_string(), spectral_radius: None });
            }
        }
    }

    let mut ratio = Vec::new();
    if !reports.is_empty() {
        let series: Vec<_> = reports.iter().map(|r| (r.mu_bar(), r.u())).collect();
        for (r, p) in reports.iter().zip(sigma2_mu_ratio(&series, cfg.window_days)?) {
            ratio.push(RatioRow { day: r.day.clone(), point: p });
        }
    }

    let mut notes = Vec::new();
    let mut deciles = Vec::new();
    if let Some(path) = &cfg.features {
        let f = fs::File::open(path).map_err(io_err(path))?;
        let features = read_features_csv(f).map_err(pipe_err(path))?;
        for name in FEATURE_NAMES {
            let mut by_target: Vec<(&'static str, Vec<(f64, f64)>)> = Vec::new();
            for (r, horizon) in reports.iter().zip(&horizons) {
                for row in features.iter().filter(|x| x.day == r.day) {
                    let Some(x) = row.feature(name) else { continue };
                    for (target, y) in decile_targets(r, row.agent, *horizon) {
                        let Some(y) = y else { continue };
                        match by_target.iter_mut().find(|(t, _)| *t == target) {
                            Some((_, v)) => v.push((x, y)),
                            None => by_target.push((target, vec![(x, y)])),
                        }
                    }
                }
            }
            for (target, obs) in by_target {
                match decile_conditional_mean(name, target, &obs) {
                    Ok(d) => deciles.push(d),
                    Err(e) => notes.push(format!("deciles of {target} by {name}: {e}")),
                }
            }
        }
    }

    ensure_dir(&cfg.out)?;
    let csv_path = cfg.out.join("report.csv");
    let f = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    write_reports_csv(&reports, BufWriter::new(f))?;
    let ratio_path = cfg.out.join("ratio.csv");
    let mut w = csv::Writer::from_path(&ratio_path)
        .map_err(|e| CliError::Parse { path: ratio_path.clone(), message: e.to_string() })?;
    let csv_err = |e: csv::Error| CliError::Parse { path: ratio_path.clone(), message: e.to_string() };
    w.write_record(["day", "sigma2", "sigma2_mu", "ratio", "window_days", "truncated"]).map_err(csv_err)?;
    for row in &ratio {
        let p = &row.point;
        w.write_record([
            row.day.clone(),
            p.sigma2.to_string(),
            p.sigma2_mu.to_string(),
            p.ratio.to_string(),
            p.window_days.to_string(),
            p.truncated.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&ratio_path))?;
    let report = RunReport { schema_version: 1, agents, days: reports, skipped, ratio, deciles, notes };
    write_json(&cfg.out.join("report.json"), &report)?;
    Ok(out)
}

/// Seed of one control replicate, mixed from the run seed, day and replicate.
fn replicate_seed(seed: u64, day: &str, replicate: usize) -> u64 {
    // FNV-1a over the day label
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in day.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h ^ (replicate as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Actual-minus-control residuals of one day.
pub fn control_day(
    stream: &EventStream,
    fit_cfg: &FitConfig,
    opts: &ReportOptions,
    replicates: usize,
    seed: u64,
) -> Result<ControlDay, CliError> {
    let actual_fits = fit_day(stream, fit_cfg)?;
    let agents: Vec<AgentId> = actual_fits.fits.iter().map(|f| f.agent).collect();
    let actual = attribute_day(&actual_fits, &agents, opts)?;
    let mut failures = Vec::new();
    let mut controls = Vec::new();
    for r in 0..replicates {
        let shuffled = shuffle_control(stream, replicate_seed(seed, &stream.day, r));
        let rep = fit_day(&shuffled, fit_cfg)
            .map_err(CliError::from)
            .and_then(|f| attribute_day(&f, &agents, opts));
        match rep {
            Ok(rep) => controls.push(rep),
            Err(e) => failures.push(format!("replicate {r}: {e}")),
        }
    }
    let residuals = actual
        .agents
        .iter()
        .filter(|a| !a.agent.is_rest())
        .filter_map(|a| {
            let rho_actual = a.rho?;
            let rhos: Vec<f64> = controls.iter().filter_map(|c| c.agent(a.agent).and_then(|x| x.rho)).collect();
            if rhos.is_empty() {
                return None;
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            // residuals average per-replicate differences so identical replicates give exactly zero
            let rho_diffs: Vec<f64> = rhos.iter().map(|c| rho_actual - c).collect();
            let xis: Vec<f64> = controls.iter().filter_map(|c| c.agent(a.agent).and_then(|x| x.xi_mean)).collect();
            let xi_control = (!xis.is_empty()).then(|| mean(&xis));
            let xi_residual = a.xi_mean.filter(|_| !xis.is_empty()).map(|x| {
                let diffs: Vec<f64> = xis.iter().map(|c| x - c).collect();
                mean(&diffs)
            });
            Some(ControlResidual {
                agent: a.agent,
                rho_actual,
                rho_control: mean(&rhos),
                rho_residual: mean(&rho_diffs),
                xi_actual: a.xi_mean,
                xi_control,
                xi_residual,
                replicates: rhos.len(),
            })
        })
        .collect();
    Ok(ControlDay { day: stream.day.clone(), replicates, residuals, failures })
}

pub fn cmd_control(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let files = day_files(&events_path(cfg))?;
    let session = cfg.session()?;
    let fit_cfg = cfg.fit_config()?;
    let opts = cfg.report_options();
    let dir = cfg.out.join("control");
    ensure_dir(&dir)?;
    let results: Vec<(String, Result<ControlDay, CliError>)> = files
        .par_iter()
        .map(|(day, path)| {
            let r = load_day(path, day, session)
                .and_then(|(s, _)| control_day(&s, &fit_cfg, &opts, cfg.control_replicates, cfg.seed));
            (day.clone(), r)
        })
        .collect();
    let mut out = Outcome::default();
    let mut rows = Vec::new();
    let mut last_err = None;
    let mut ok = 0;
    for (day, r) in results {
        match r {
            Ok(c) => {
                write_json(&dir.join(format!("{day}.json")), &c)?;
                out.messages.push(format!("{day}: {} residuals over {} replicates", c.residuals.len(), c.replicates));
                for f in &c.failures {
                    out.failures.push(format!("{day}: {f}"));
                }
                rows.extend(c.residuals.into_iter().map(|r| (day.clone(), r)));
                ok += 1;
            }
            Err(e) => {
                out.failures.push(format!("{day}: {e}"));
                last_err = Some(e);
            }
        }
    }
    if ok == 0 {
        return Err(last_err.unwrap_or_else(|| CliError::Usage("no event files found".into())));
    }
    let path = dir.join("residuals.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Parse { path: path.clone(), message: e.to_string() })?;
    w.write_record(["day", "agent_id", "rho_actual", "rho_control", "rho_residual", "xi_residual", "replicates"])
        .map_err(|e| CliError::Parse { path: path.clone(), message: e.to_string() })?;
    for (day, r) in rows {
        w.write_record([
            day,
            r.agent.0.to_string(),
            r.rho_actual.to_string(),
            r.rho_control.to_string(),
            r.rho_residual.to_string(),
            r.xi_residual.map(|x| x.to_string()).unwrap_or_default(),
            r.replicates.to_string(),
        ])
        .map_err(|e| CliError::Parse { path: path.clone(), message: e.to_string() })?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DayIngest {
    day: String,
    raw: IngestStats,
    classified: IngestStats,
}

pub fn cmd_features(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let raw = cfg.raw.as_deref().ok_or_else(|| CliError::Usage("features needs --raw".into()))?;
    let files = day_files(raw)?;
    let session = cfg.session()?;
    let presence = match &cfg.presence {
        Some(p) => PresenceTable::read(fs::File::open(p).map_err(io_err(p))?).map_err(pipe_err(p))?,
        None => PresenceTable::default(),
    };
    let dir = cfg.out.join("events");
    ensure_dir(&dir)?;
    let mut out = Outcome::default();
    let mut features: Vec<DailyAgentFeatures> = Vec::new();
    let mut ingest = Vec::new();
    for (day, path) in &files {
        let f = fs::File::open(path).map_err(io_err(path))?;
        let (records, raw_stats) = read_raw_csv(std::io::BufReader::new(f), session).map_err(pipe_err(path))?;
        let (stream, stats) = classify_records(&records, day, session).map_err(pipe_err(path))?;
        write_stream(&dir.join(format!("{day}.csv")), &stream)?;
        let agents: BTreeSet<AgentId> = records.iter().map(|r| r.agent).collect();
        features.extend(agents.into_iter().map(|a| compute_features(&records, &stream, a, presence.get(day, a))));
        out.messages.push(format!(
            "{day}: {} events from {} records ({} deep-book, {} passive, {} out of session)",
            stream.len(),
            stats.rows,
            stats.deep_book,
            stats.passive_fills,
            raw_stats.out_of_session
        ));
        ingest.push(DayIngest { day: day.clone(), raw: raw_stats, classified: stats });
    }
    let path = cfg.out.join("features.csv");
    let f = fs::File::create(&path).map_err(io_err(&path))?;
    write_features_csv(&features, BufWriter::new(f)).map_err(pipe_err(&path))?;
    write_json(&cfg.out.join("ingest.json"), &ingest)?;
    Ok(out)
}
