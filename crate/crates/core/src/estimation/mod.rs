//! Per-agent, per-day least-squares fits of the agent-vs-market model and
//! their stitching into one global kernel matrix.
//!
//! Each agent's response to the rest of the market is assumed not to depend
//! on who in the market acted, so an `8M`-component fit splits into `M`
//! independent 16-source fits (8 own types, 8 pooled market types).

pub mod features;
pub mod global;
pub mod normal;
pub mod solve;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::model::{BasisDictionary, ModelError, PiecewiseBaseline};
use crate::stream::{EventStream, Session};
use crate::types::{AgentId, EventType, N_TYPES};

pub use features::{filter_events, FeatureLayout, FilteredFeatures, Flow};
pub use global::{assemble_global, FitSlot, GlobalModel};
pub use normal::{assemble_all, assemble_normal_equations, NormalEquations};
pub use solve::{solve_least_squares, GramSolver, Ridge};

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("evaluation times or events out of order at index {index}")]
    UnsortedInput { index: usize },
    #[error("session has zero length")]
    EmptyHorizon,
    #[error("normal equations could not be factored")]
    SingularSystem,
    #[error("invalid ridge {0}")]
    InvalidRidge(f64),
    #[error("agent {agent} has {found} events, {required} required")]
    InsufficientEvents { agent: AgentId, found: usize, required: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("stitched kernel matrix is unstable (spectral radius {spectral_radius})")]
    UnstableGlobal { spectral_radius: f64, phi: Box<Matrix> },
    #[error("no agent reaches the minimum event count")]
    NoEligibleAgents,
    #[error("fits are not compatible: {0}")]
    IncompatibleFits(String),
    #[error("no fitted agent to assemble")]
    NoFits,
}

/// Version of the per-day fit JSON.
pub const FIT_SCHEMA_VERSION: u32 = 1;

/// Estimation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub basis: BasisDictionary,
    /// Equal-width baseline bins over the session.
    pub baseline_bins: usize,
    /// Minimum number of events for an agent to get its own fit.
    pub min_events: usize,
    pub ridge: Ridge,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            basis: BasisDictionary::log_spaced(10, 1e-6, 1.0).expect("valid default dictionary"),
            baseline_bins: 17,
            min_events: 1000,
            ridge: Ridge::default(),
        }
    }
}

/// Output of one agent-vs-market fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentFitResult {
    pub agent: AgentId,
    pub day: String,
    /// Session length in seconds.
    pub horizon: f64,
    pub decays: Vec<f64>,
    /// Baseline bin edges, seconds from open.
    pub edges: Vec<f64>,
    /// `[target][bin]`
    pub baseline_steps: Vec<Vec<f64>>,
    /// `[target][source][l]`, response to the agent's own events.
    pub self_coeffs: Vec<Vec<Vec<f64>>>,
    /// `[target][source][l]`, response to everyone else's events.
    pub market_coeffs: Vec<Vec<Vec<f64>>>,
    /// Mean signed jump per type; zero for non-price types.
    pub delta_hat: Vec<f64>,
    /// Minimised contrast per target type.
    pub contrast: Vec<f64>,
    pub event_counts: Vec<usize>,
    /// Targets whose solve failed; their coefficients are zero.
    pub failed: Vec<bool>,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl AgentFitResult {
    /// Integrated self kernel `target <- source`.
    pub fn self_phi(&self, target: usize, source: usize) -> f64 {
        self.self_coeffs[target][source].iter().sum()
    }

    /// Integrated market kernel `target <- source`.
    pub fn market_phi(&self, target: usize, source: usize) -> f64 {
        self.market_coeffs[target][source].iter().sum()
    }

    /// Duration-weighted mean of the baseline steps of one target.
    pub fn mean_baseline(&self, target: usize) -> f64 {
        let total = self.edges.last().copied().unwrap_or(0.0) - self.edges.first().copied().unwrap_or(0.0);
        if total <= 0.0 {
            return 0.0;
        }
        self.baseline_steps[target]
            .iter()
            .zip(self.edges.windows(2))
            .map(|(v, w)| v * (w[1] - w[0]))
            .sum::<f64>()
            / total
    }

    pub fn total_events(&self) -> usize {
        self.event_counts.iter().sum()
    }
}

/// Mean signed jump per type, falling back to `+1`/`-1` below three price events.
pub fn estimate_jumps(stream: &EventStream, agent: AgentId) -> Vec<f64> {
    let mut sums = [0.0; N_TYPES];
    let mut counts = [0usize; N_TYPES];
    for e in stream.events().iter().filter(|e| e.agent == agent && e.kind.is_price_move()) {
        sums[e.kind.index()] += e.delta;
        counts[e.kind.index()] += 1;
    }
    EventType::ALL
        .iter()
        .map(|k| {
            let i = k.index();
            match k {
                EventType::PriceUp | EventType::PriceDown if counts[i] >= 3 => sums[i] / counts[i] as f64,
                EventType::PriceUp => 1.0,
                EventType::PriceDown => -1.0,
                _ => 0.0,
            }
        })
        .collect()
}

/// Fits the eight target types of `agent` against the pooled rest of the stream.
pub fn fit_agent_vs_market(
    stream: &EventStream,
    agent: AgentId,
    config: &FitConfig,
) -> Result<AgentFitResult, EstimationError> {
    let found = stream.agent_event_count(agent);
    if found < config.min_events || found == 0 {
        return Err(EstimationError::InsufficientEvents { agent, found, required: config.min_events });
    }
    let horizon = stream.session.length();
    let bins = config.baseline_bins.max(1);
    let layout = FeatureLayout::new(
        PiecewiseBaseline::equal_edges(bins, horizon),
        config.basis.decays().to_vec(),
    );
    let ne = assemble_all(stream, agent, &layout)?;
    let solver = GramSolver::factor(&ne.a, config.ridge)?;

    let nl = layout.n_decays();
    let mut baseline_steps = vec![vec![0.0; bins]; N_TYPES];
    let mut self_coeffs = vec![vec![vec![0.0; nl]; N_TYPES]; N_TYPES];
    let mut market_coeffs = vec![vec![vec![0.0; nl]; N_TYPES]; N_TYPES];
    let mut contrast = vec![0.0; N_TYPES];
    let mut failed = vec![false; N_TYPES];
    let mut flags = Vec::new();

    for target in EventType::ALL {
        let ti = target.index();
        let theta = match solver.solve(&ne.b[ti]) {
            Ok(th) => th,
            Err(e) => {
                failed[ti] = true;
                flags.push(format!("target {target}: {e}"));
                continue;
            }
        };
        let c = ne.contrast(target, &theta);
        if !c.is_finite() {
            failed[ti] = true;
            flags.push(format!("target {target}: non-finite contrast"));
            continue;
        }
        contrast[ti] = c;
        baseline_steps[ti].copy_from_slice(&theta.as_slice()[..bins]);
        for src in 0..N_TYPES {
            for l in 0..nl {
                self_coeffs[ti][src][l] = theta[layout.kernel_index(Flow::SelfFlow, src, l)];
                market_coeffs[ti][src][l] = theta[layout.kernel_index(Flow::Market, src, l)];
            }
        }
    }
    if agent.is_rest() {
        flags.push("remainder fitted with the same minimum event count".to_string());
    }

    Ok(AgentFitResult {
        agent,
        day: stream.day.clone(),
        horizon,
        decays: layout.decays.clone(),
        edges: layout.edges.clone(),
        baseline_steps,
        self_coeffs,
        market_coeffs,
        delta_hat: estimate_jumps(stream, agent),
        contrast,
        event_counts: ne.counts.to_vec(),
        failed,
        flags,
    })
}

/// Per-type event counts of one slot of a day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub agent: AgentId,
    pub counts: Vec<usize>,
}

/// All fits of one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayFits {
    pub schema_version: u32,
    pub day: String,
    pub session: Session,
    /// Agents with their own fit, ascending.
    pub fits: Vec<AgentFitResult>,
    /// Pooled fit of every other agent, when it has enough events.
    pub remainder: Option<AgentFitResult>,
    /// Agents folded into the remainder for lack of events.
    pub folded: Vec<AgentId>,
    /// Event counts of every selected agent and of the remainder.
    pub counts: Vec<SlotCounts>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl DayFits {
    pub fn fit_for(&self, agent: AgentId) -> Option<&AgentFitResult> {
        if agent.is_rest() {
            return self.remainder.as_ref();
        }
        self.fits.iter().find(|f| f.agent == agent)
    }

    pub fn counts_for(&self, agent: AgentId) -> [usize; N_TYPES] {
        let mut out = [0; N_TYPES];
        if let Some(c) = self.counts.iter().find(|c| c.agent == agent) {
            for (o, v) in out.iter_mut().zip(&c.counts) {
                *o = *v;
            }
        }
        out
    }

    /// Slots over `agents` followed by the remainder.
    pub fn slots<'a>(&'a self, agents: &[AgentId]) -> Vec<FitSlot<'a>> {
        agents
            .iter()
            .copied()
            .filter(|a| !a.is_rest())
            .chain(std::iter::once(AgentId::REST))
            .map(|agent| FitSlot { agent, fit: self.fit_for(agent) })
            .collect()
    }

    /// Empirical mean intensities (count / session length) in slot order.
    pub fn empirical_lambda(&self, slots: &[FitSlot<'_>]) -> crate::linalg::Vector {
        let horizon = self.session.length();
        let mut v = Vec::with_capacity(slots.len() * N_TYPES);
        for s in slots {
            v.extend(self.counts_for(s.agent).iter().map(|c| *c as f64 / horizon));
        }
        crate::linalg::Vector::from_vec(v)
    }

    /// Global model over `agents` (plus the remainder).
    pub fn global(&self, agents: &[AgentId]) -> Result<GlobalModel, EstimationError> {
        let slots = self.slots(agents);
        let lambda = self.empirical_lambda(&slots);
        assemble_global(&slots, &lambda)
    }
}

/// Fits every agent with enough events plus the pooled remainder, in parallel.
pub fn fit_day(stream: &EventStream, config: &FitConfig) -> Result<DayFits, EstimationError> {
    let mut selected = Vec::new();
    let mut folded = Vec::new();
    for a in stream.agents().into_iter().filter(|a| !a.is_rest()) {
        if stream.agent_event_count(a) >= config.min_events {
            selected.push(a);
        } else {
            folded.push(a);
        }
    }
    if selected.is_empty() {
        return Err(EstimationError::NoEligibleAgents);
    }
    let merged = stream.with_rest_merged(&selected);
    let mut notes = Vec::new();

    let mut targets = selected.clone();
    let rest_count = merged.agent_event_count(AgentId::REST);
    if rest_count >= config.min_events && rest_count > 0 {
        targets.push(AgentId::REST);
    } else {
        notes.push(format!(
            "remainder has {rest_count} events (< {}); treated as absent",
            config.min_events
        ));
    }

    let results: Vec<(AgentId, Result<AgentFitResult, EstimationError>)> = targets
        .par_iter()
        .map(|a| (*a, fit_agent_vs_market(&merged, *a, config)))
        .collect();

    let mut fits = Vec::new();
    let mut remainder = None;
    for (a, r) in results {
        match r {
            Ok(f) if a.is_rest() => remainder = Some(f),
            Ok(f) => fits.push(f),
            Err(e) => notes.push(format!("agent {a}: fit failed: {e}; treated as absent")),
        }
    }
    let counts = selected
        .iter()
        .copied()
        .chain(std::iter::once(AgentId::REST))
        .map(|a| SlotCounts { agent: a, counts: merged.counts(a).to_vec() })
        .collect();

    Ok(DayFits {
        schema_version: FIT_SCHEMA_VERSION,
        day: stream.day.clone(),
        session: stream.session,
        fits,
        remainder,
        folded,
        counts,
        notes,
    })
}
