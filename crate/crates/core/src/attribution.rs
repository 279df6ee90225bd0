//! Volatility attribution from a branching summary: long-run squared
//! volatility, average volatility per event, agent impact fractions,
//! exogenous fractions and the daily endogeneity ratio.
//!
//! Everything is in half-ticks and seconds until [`annualize`].

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::GlobalModel;
use crate::linalg::{Matrix, Vector};
use crate::model::{compute_r, BranchingSummary, ModelError};
use crate::types::{AgentId, Component, EventType, TypeFamily, N_TYPES};

/// Trading seconds per year: 8.5 hours a day, 252 days.
pub const SECONDS_PER_YEAR: f64 = 8.5 * 3600.0 * 252.0;

/// Default window of the endogeneity ratio in days (centred on the day).
pub const DEFAULT_WINDOW_DAYS: usize = 20;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("squared volatility is zero")]
    ZeroSigma,
    #[error("agent {0} has zero total intensity")]
    ZeroIntensity(AgentId),
    #[error("agent {0} has no components")]
    UnknownAgent(AgentId),
    #[error("empty daily series")]
    EmptySeries,
    #[error("reference price must be positive, got {0}")]
    NonpositivePrice(f64),
    #[error("squared volatility must be nonnegative, got {0}")]
    NegativeVariance(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn check_len(expected: usize, found: usize) -> Result<(), AttributionError> {
    if expected != found {
        return Err(AttributionError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Signed price response to one event of each component: `sum_i delta_i R[i][m]`.
fn price_response(r: &Matrix, delta: &Vector) -> Vector {
    r.tr_mul(delta)
}

/// `sum_m Lambda_m (sum_i delta_i R[i][m])^2`.
pub fn sigma2_asymptotic(summary: &BranchingSummary, delta: &Vector) -> Result<f64, AttributionError> {
    check_len(summary.dim(), delta.len())?;
    let w = price_response(&summary.r, delta);
    Ok(summary.lambda.iter().zip(w.iter()).map(|(l, w)| l * w * w).sum())
}

/// Average volatility caused by one event of each component, `|sum_j delta_j R[j][m]|`.
pub fn xi_per_event(summary: &BranchingSummary, delta: &Vector) -> Result<Vector, AttributionError> {
    check_len(summary.dim(), delta.len())?;
    Ok(price_response(&summary.r, delta).abs())
}

/// Reaction weights `u_i = sum_j R[j][i] xi_j^2`; `sum_i mu_i u_i = sigma^2`.
pub fn u_vector(summary: &BranchingSummary, delta: &Vector) -> Result<Vector, AttributionError> {
    check_len(summary.dim(), delta.len())?;
    let w = price_response(&summary.r, delta);
    Ok(summary.r.tr_mul(&w.component_mul(&w)))
}

fn agent_mask(components: &[Component], agent: AgentId) -> Result<Vec<bool>, AttributionError> {
    let mask: Vec<bool> = components.iter().map(|c| c.agent == agent).collect();
    if !mask.iter().any(|m| *m) {
        return Err(AttributionError::UnknownAgent(agent));
    }
    Ok(mask)
}

/// Fraction of the squared volatility that disappears with `agent` and
/// everything it triggers, keeping the full reaction matrix.
pub fn rho_impact(
    summary: &BranchingSummary,
    delta: &Vector,
    mu_bar: &Vector,
    components: &[Component],
    agent: AgentId,
) -> Result<f64, AttributionError> {
    let n = summary.dim();
    check_len(n, delta.len())?;
    check_len(n, mu_bar.len())?;
    check_len(n, components.len())?;
    let sigma2 = sigma2_asymptotic(summary, delta)?;
    if sigma2 == 0.0 {
        return Err(AttributionError::ZeroSigma);
    }
    let removed = agent_mask(components, agent)?;
    let r = &summary.r;
    let mut rest = 0.0;
    for i in (0..n).filter(|i| !removed[*i]) {
        let w: f64 = (0..n).filter(|j| !removed[*j]).map(|j| delta[j] * r[(j, i)]).sum();
        if w == 0.0 {
            continue;
        }
        let rate: f64 = (0..n).filter(|j| !removed[*j]).map(|j| r[(i, j)] * mu_bar[j]).sum();
        rest += rate * w * w;
    }
    Ok(1.0 - rest / sigma2)
}

/// Same as [`rho_impact`] but re-inverts `I - Phi` with the agent removed.
pub fn rho_impact_exact(
    summary: &BranchingSummary,
    delta: &Vector,
    mu_bar: &Vector,
    components: &[Component],
    agent: AgentId,
) -> Result<f64, AttributionError> {
    let n = summary.dim();
    check_len(n, delta.len())?;
    check_len(n, mu_bar.len())?;
    check_len(n, components.len())?;
    let sigma2 = sigma2_asymptotic(summary, delta)?;
    if sigma2 == 0.0 {
        return Err(AttributionError::ZeroSigma);
    }
    let removed = agent_mask(components, agent)?;
    let keep: Vec<usize> = (0..n).filter(|i| !removed[*i]).collect();
    if keep.is_empty() {
        return Ok(1.0);
    }
    let k = keep.len();
    let phi = Matrix::from_fn(k, k, |a, b| summary.phi[(keep[a], keep[b])]);
    let r = compute_r(&phi)?;
    let mu = Vector::from_fn(k, |a, _| mu_bar[keep[a]]);
    let d = Vector::from_fn(k, |a, _| delta[keep[a]]);
    let lambda = &r * &mu;
    let w = r.tr_mul(&d);
    let rest: f64 = lambda.iter().zip(w.iter()).map(|(l, w)| l * w * w).sum();
    Ok(1.0 - rest / sigma2)
}

/// `sum_alpha mu_bar / sum_alpha Lambda` over the agent's components.
pub fn exogenous_fraction(
    mu_bar: &Vector,
    lambda: &Vector,
    components: &[Component],
    agent: AgentId,
) -> Result<f64, AttributionError> {
    check_len(components.len(), mu_bar.len())?;
    check_len(components.len(), lambda.len())?;
    let mask = agent_mask(components, agent)?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in (0..mask.len()).filter(|i| mask[*i]) {
        num += mu_bar[i];
        den += lambda[i];
    }
    if den <= 0.0 {
        return Err(AttributionError::ZeroIntensity(agent));
    }
    Ok(num / den)
}

/// Fractional annual volatility from half-ticks^2 per second.
pub fn annualize(sigma2: f64, half_tick: f64, p0: f64) -> Result<f64, AttributionError> {
    if !(p0 > 0.0) {
        return Err(AttributionError::NonpositivePrice(p0));
    }
    if !(sigma2 >= 0.0) {
        return Err(AttributionError::NegativeVariance(sigma2));
    }
    Ok((sigma2 * SECONDS_PER_YEAR).sqrt() * half_tick / p0)
}

/// One day of the endogeneity-ratio series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub sigma2: f64,
    /// Squared volatility with the reaction weights replaced by their window mean.
    pub sigma2_mu: f64,
    pub ratio: f64,
    /// Number of days averaged.
    pub window_days: usize,
    /// Window cut short by the start or end of the series.
    pub truncated: bool,
}

/// `sigma2_t / sigma2_mu_t` for each day, where `sigma2_mu_t` uses the mean
/// of `u` over days `[t - window/2, t + window/2]` clipped to the series.
pub fn sigma2_mu_ratio(daily: &[(Vector, Vector)], window: usize) -> Result<Vec<RatioPoint>, AttributionError> {
    let Some((first, _)) = daily.first() else {
        return Err(AttributionError::EmptySeries);
    };
    let n = first.len();
    for (mu, u) in daily {
        check_len(n, mu.len())?;
        check_len(n, u.len())?;
    }
    let half = window / 2;
    let days = daily.len();
    (0..days)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(days - 1);
            let count = hi - lo + 1;
            let mut u_bar = Vector::zeros(n);
            for (_, u) in &daily[lo..=hi] {
                u_bar += u;
            }
            u_bar /= count as f64;
            let (mu, u) = &daily[t];
            let sigma2 = mu.dot(u);
            let sigma2_mu = mu.dot(&u_bar);
            Ok(RatioPoint {
                sigma2,
                sigma2_mu,
                ratio: sigma2 / sigma2_mu,
                window_days: count,
                truncated: count < 2 * half + 1,
            })
        })
        .collect()
}

/// Intensity-weighted mean of `xi` over the components of one agent and family.
pub fn family_xi(
    components: &[Component],
    xi: &Vector,
    lambda: &Vector,
    agent: AgentId,
    family: TypeFamily,
) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, c) in components.iter().enumerate() {
        if c.agent == agent && c.kind.family() == family {
            num += lambda[i] * xi[i];
            den += lambda[i];
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Per-component attribution figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    pub agent: AgentId,
    #[serde(rename = "type")]
    pub kind: EventType,
    pub lambda: f64,
    pub mu_bar: f64,
    pub delta: f64,
    pub xi: f64,
    pub u: f64,
}

/// Per-agent attribution figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRow {
    pub agent: AgentId,
    /// Absent when the day's volatility is zero.
    pub rho: Option<f64>,
    /// Absent when the agent has no events.
    pub f: Option<f64>,
    /// Total event rate, events per second.
    pub intensity: f64,
    /// Intensity-weighted mean volatility per event over all the agent's components.
    pub xi_mean: Option<f64>,
    pub absent: bool,
}

/// Difference between an agent's figures on actual and on shuffled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlResidual {
    pub agent: AgentId,
    pub rho_actual: f64,
    pub rho_control: f64,
    pub rho_residual: f64,
    pub xi_actual: Option<f64>,
    pub xi_control: Option<f64>,
    pub xi_residual: Option<f64>,
    /// Control replicates that produced a value.
    pub replicates: usize,
}

/// Attribution of one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub day: String,
    /// Half-ticks squared per second.
    pub sigma2: f64,
    pub sigma_annualized: Option<f64>,
    pub spectral_radius: f64,
    pub components: Vec<ComponentRow>,
    pub agents: Vec<AgentRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub control: Vec<ControlResidual>,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl AttributionReport {
    pub fn agent(&self, agent: AgentId) -> Option<&AgentRow> {
        self.agents.iter().find(|a| a.agent == agent)
    }

    pub fn mu_bar(&self) -> Vector {
        Vector::from_iterator(self.components.len(), self.components.iter().map(|c| c.mu_bar))
    }

    pub fn u(&self) -> Vector {
        Vector::from_iterator(self.components.len(), self.components.iter().map(|c| c.u))
    }
}

/// Report options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Price units per half-tick.
    pub half_tick: f64,
    /// Reference price for annualization; skipped when absent.
    pub p0: Option<f64>,
    /// Re-invert without the agent when computing impact fractions.
    pub exact_rho: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { half_tick: 0.25, p0: None, exact_rho: false }
    }
}

/// Full attribution of a stitched day model.
pub fn build_report(day: &str, global: &GlobalModel, opts: &ReportOptions) -> Result<AttributionReport, AttributionError> {
    let summary = &global.summary;
    let components = global.model.components();
    let delta = global.model.jump_vector();
    let mu_bar = global.mu_bar();
    let sigma2 = sigma2_asymptotic(summary, &delta)?;
    let xi = xi_per_event(summary, &delta)?;
    let u = u_vector(summary, &delta)?;
    let mut flags = Vec::new();
    for c in &global.negative_baselines {
        flags.push(format!("negative recovered baseline for {c}"));
    }

    let rows = components
        .iter()
        .enumerate()
        .map(|(i, c)| ComponentRow {
            agent: c.agent,
            kind: c.kind,
            lambda: summary.lambda[i],
            mu_bar: mu_bar[i],
            delta: delta[i],
            xi: xi[i],
            u: u[i],
        })
        .collect();

    let mut agents = Vec::new();
    for chunk in components.chunks(N_TYPES) {
        let agent = chunk[0].agent;
        let rho = if sigma2 > 0.0 {
            Some(if opts.exact_rho {
                rho_impact_exact(summary, &delta, &mu_bar, components, agent)?
            } else {
                rho_impact(summary, &delta, &mu_bar, components, agent)?
            })
        } else {
            flags.push(format!("zero volatility, impact of {agent} undefined"));
            None
        };
        let f = exogenous_fraction(&mu_bar, &summary.lambda, components, agent).ok();
        let intensity: f64 =
            components.iter().zip(summary.lambda.iter()).filter(|(c, _)| c.agent == agent).map(|(_, l)| l).sum();
        let (mut num, mut den) = (0.0, 0.0);
        for i in (0..components.len()).filter(|i| components[*i].agent == agent) {
            num += summary.lambda[i] * xi[i];
            den += summary.lambda[i];
        }
        agents.push(AgentRow {
            agent,
            rho,
            f,
            intensity,
            xi_mean: (den > 0.0).then(|| num / den),
            absent: global.absent.contains(&agent),
        });
    }

    let sigma_annualized = match opts.p0 {
        Some(p0) => Some(annualize(sigma2.max(0.0), opts.half_tick, p0)?),
        None => None,
    };
    Ok(AttributionReport {
        day: day.to_string(),
        sigma2,
        sigma_annualized,
        spectral_radius: summary.rho_spec,
        components: rows,
        agents,
        control: Vec::new(),
        flags,
    })
}

/// Flat CSV row: one per component (`kind = component`) and one per agent (`kind = agent`).
#[derive(Debug, Clone, Serialize)]
struct CsvRow<'a> {
    day: &'a str,
    kind: &'static str,
    agent: AgentId,
    #[serde(rename = "type")]
    event_type: Option<EventType>,
    lambda: Option<f64>,
    mu_bar: Option<f64>,
    delta: Option<f64>,
    xi: Option<f64>,
    u: Option<f64>,
    rho: Option<f64>,
    f: Option<f64>,
    intensity: Option<f64>,
    rho_residual: Option<f64>,
    xi_residual: Option<f64>,
    sigma2: f64,
}

/// Writes reports as flat CSV for plotting.
pub fn write_reports_csv<W: Write>(reports: &[AttributionReport], out: W) -> Result<(), AttributionError> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        for c in &r.components {
            w.serialize(CsvRow {
                day: &r.day,
                kind: "component",
                agent: c.agent,
                event_type: Some(c.kind),
                lambda: Some(c.lambda),
                mu_bar: Some(c.mu_bar),
                delta: Some(c.delta),
                xi: Some(c.xi),
                u: Some(c.u),
                rho: None,
                f: None,
                intensity: None,
                rho_residual: None,
                xi_residual: None,
                sigma2: r.sigma2,
            })?;
        }
        for a in &r.agents {
            let ctl = r.control.iter().find(|c| c.agent == a.agent);
            w.serialize(CsvRow {
                day: &r.day,
                kind: "agent",
                agent: a.agent,
                event_type: None,
                lambda: None,
                mu_bar: None,
                delta: None,
                xi: a.xi_mean,
                u: None,
                rho: a.rho,
                f: a.f,
                intensity: Some(a.intensity),
                rho_residual: ctl.map(|c| c.rho_residual),
                xi_residual: ctl.and_then(|c| c.xi_residual),
                sigma2: r.sigma2,
            })?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
