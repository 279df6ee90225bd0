//! Exponentially filtered self/market flows and the feature layout shared by
//! the normal equations.

use crate::stream::EventStream;
use crate::types::{AgentId, N_TYPES};

use super::EstimationError;

/// Feature vector layout of one agent-vs-market fit:
/// `[bins | self(type, l) | market(type, l)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayout {
    /// Baseline bin edges in seconds from session open.
    pub edges: Vec<f64>,
    /// Basis decays; may be empty for a kernel-free (pure baseline) fit.
    pub decays: Vec<f64>,
}

/// Which flow a source event belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    /// The focus agent's own events.
    SelfFlow = 0,
    /// Everyone else, pooled.
    Market = 1,
}

impl FeatureLayout {
    pub fn new(edges: Vec<f64>, decays: Vec<f64>) -> Self {
        Self { edges, decays }
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn n_decays(&self) -> usize {
        self.decays.len()
    }

    /// Number of kernel features (both flows).
    pub fn n_kernel(&self) -> usize {
        2 * N_TYPES * self.n_decays()
    }

    pub fn dim(&self) -> usize {
        self.n_bins() + self.n_kernel()
    }

    /// Index of a kernel feature inside the full vector.
    pub fn kernel_index(&self, flow: Flow, type_index: usize, l: usize) -> usize {
        self.n_bins() + self.register_index(flow, type_index, l)
    }

    /// Index of a kernel feature inside the register block.
    pub fn register_index(&self, flow: Flow, type_index: usize, l: usize) -> usize {
        ((flow as usize) * N_TYPES + type_index) * self.n_decays() + l
    }

    /// Decay of register `r`.
    pub fn register_decay(&self, r: usize) -> f64 {
        self.decays[r % self.n_decays()]
    }

    /// Bin of an offset from open; offsets at or past the last edge map to the last bin.
    pub fn bin_of(&self, offset: f64) -> usize {
        let k = self.edges.partition_point(|e| *e <= offset);
        k.saturating_sub(1).min(self.n_bins() - 1)
    }
}

/// Exponential state registers `sum_e decay_l * exp(-decay_l (t - t_e))`,
/// one per (flow, type, l).
#[derive(Debug, Clone)]
pub struct Registers {
    values: Vec<f64>,
    factors: Vec<f64>,
    decays: Vec<f64>,
    now: f64,
}

impl Registers {
    pub fn new(layout: &FeatureLayout, start: f64) -> Self {
        Self {
            values: vec![0.0; layout.n_kernel()],
            factors: vec![0.0; layout.n_decays()],
            decays: layout.decays.clone(),
            now: start,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Decays every register to time `t >= now`.
    pub fn advance(&mut self, t: f64) {
        let dt = t - self.now;
        if dt > 0.0 && !self.decays.is_empty() {
            for (f, d) in self.factors.iter_mut().zip(&self.decays) {
                *f = (-d * dt).exp();
            }
            let nl = self.decays.len();
            for chunk in self.values.chunks_mut(nl) {
                for (v, f) in chunk.iter_mut().zip(&self.factors) {
                    *v *= f;
                }
            }
        }
        if t > self.now {
            self.now = t;
        }
    }

    /// Registers an event at the current time.
    pub fn push(&mut self, layout: &FeatureLayout, flow: Flow, type_index: usize) {
        for (l, d) in self.decays.iter().enumerate() {
            self.values[layout.register_index(flow, type_index, l)] += d;
        }
    }
}

/// Feature rows `X(t)` at a list of evaluation times.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredFeatures {
    pub layout: FeatureLayout,
    pub times: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl FilteredFeatures {
    /// Self-flow feature `N_l^type` at row `i`.
    pub fn self_feature(&self, i: usize, type_index: usize, l: usize) -> f64 {
        self.rows[i][self.layout.kernel_index(Flow::SelfFlow, type_index, l)]
    }

    pub fn market_feature(&self, i: usize, type_index: usize, l: usize) -> f64 {
        self.rows[i][self.layout.kernel_index(Flow::Market, type_index, l)]
    }
}

/// Evaluates the baseline indicators and the filtered self/market flows of
/// `focus` at each of `eval_times` (absolute clock, nondecreasing). Events at
/// exactly an evaluation time are not yet counted (left limit).
pub fn filter_events(
    stream: &EventStream,
    focus: AgentId,
    layout: &FeatureLayout,
    eval_times: &[f64],
) -> Result<FilteredFeatures, EstimationError> {
    if let Some(i) = eval_times.windows(2).position(|w| w[1] < w[0]) {
        return Err(EstimationError::UnsortedInput { index: i + 1 });
    }
    let events = stream.events();
    if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
        return Err(EstimationError::UnsortedInput { index: i + 1 });
    }
    let open = stream.session.open;
    let mut regs = Registers::new(layout, open);
    let mut next = 0;
    let mut rows = Vec::with_capacity(eval_times.len());
    for &t in eval_times {
        while next < events.len() && events[next].t < t {
            let e = &events[next];
            regs.advance(e.t);
            let flow = if e.agent == focus { Flow::SelfFlow } else { Flow::Market };
            regs.push(layout, flow, e.kind.index());
            next += 1;
        }
        regs.advance(t);
        let mut row = vec![0.0; layout.dim()];
        row[layout.bin_of(t - open)] = 1.0;
        row[layout.n_bins()..].copy_from_slice(regs.values());
        rows.push(row);
    }
    Ok(FilteredFeatures { layout: layout.clone(), times: eval_times.to_vec(), rows })
}
