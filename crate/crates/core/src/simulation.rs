//! Synthetic order-flow generation from a [`HawkesModel`].
//!
//! [`simulate_thinning`] is the workhorse (Ogata thinning over the exponential
//! state recursion); [`simulate_cluster`] draws the same law through the
//! immigrant/offspring construction and serves as an independent check for
//! nonnegative kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use thiserror::Error;

use crate::model::{HawkesModel, ModelError};
use crate::stream::{Event, EventStream, Session, StreamError};

pub const DEFAULT_MAX_EVENTS: usize = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error("horizon must be positive, got {0}")]
    InvalidHorizon(f64),
    #[error("explosion guard tripped after {events} events")]
    ExplosionGuard { events: usize },
    #[error("cluster simulation needs nonnegative kernels; coefficient {target}<-{from}[{l}] is negative")]
    NegativeKernel { target: usize, from: usize, l: usize },
    #[error("cluster simulation needs nonnegative baselines; component {component} is negative")]
    NegativeBaseline { component: usize },
    #[error("baseline covers [{start}, {end}) but the horizon is {horizon}")]
    BaselineCoverage { start: f64, end: f64, horizon: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("path spans {span}s, need at least {needed}s for tau={tau}")]
    InsufficientSpan { span: f64, needed: f64, tau: f64 },
}

/// Knobs shared by both simulators.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    /// Abort once this many events have been generated.
    pub max_events: usize,
    /// Clock value of session open; model times are offsets from it.
    pub open: f64,
    pub day: String,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { max_events: DEFAULT_MAX_EVENTS, open: 0.0, day: "sim".to_string() }
    }
}

fn check_inputs(model: &HawkesModel, horizon: f64) -> Result<(), SimulationError> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(SimulationError::InvalidHorizon(horizon));
    }
    let b = model.baseline();
    if b.start() > 0.0 || b.end() < horizon {
        return Err(SimulationError::BaselineCoverage { start: b.start(), end: b.end(), horizon });
    }
    Ok(())
}

fn finish(model: &HawkesModel, opts: &SimOptions, horizon: f64, mut raw: Vec<(f64, usize)>) -> Result<EventStream, SimulationError> {
    let comps = model.components();
    raw.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(comps[a.1].agent.cmp(&comps[b.1].agent))
            .then(comps[a.1].kind.cmp(&comps[b.1].kind))
    });
    let events = raw
        .into_iter()
        .map(|(t, c)| Event::new(opts.open + t, comps[c].agent, comps[c].kind, model.jumps()[c]))
        .collect();
    let session = Session::new(opts.open, opts.open + horizon)?;
    Ok(EventStream::new(opts.day.clone(), session, events)?)
}

/// Thinning simulation with default options.
pub fn simulate_thinning(model: &HawkesModel, horizon: f64, seed: u64) -> Result<EventStream, SimulationError> {
    simulate_thinning_with(model, horizon, seed, &SimOptions::default())
}

/// Ogata thinning of the intensity `max(0, mu(t) + sum_l E[target][l])`.
///
/// `E[target][l]` aggregates the `l`-th exponential state of every source
/// weighted by its coefficient, so it decays by `exp(-decay_l dt)` and jumps by
/// `alpha[target][source][l] * decay_l` at each source event. The dominating
/// rate is refreshed after every candidate and at every baseline edge.
pub fn simulate_thinning_with(
    model: &HawkesModel,
    horizon: f64,
    seed: u64,
    opts: &SimOptions,
) -> Result<EventStream, SimulationError> {
    check_inputs(model, horizon)?;
    let n = model.dim();
    let basis = model.basis();
    let decays = basis.decays();
    let nl = decays.len();
    let kernels = model.kernels();
    let baseline = model.baseline();
    let edges = baseline.edges();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut excite = vec![0.0_f64; n * nl];
    let mut factors = vec![0.0_f64; nl];
    let mut intens = vec![0.0_f64; n];
    let mut out: Vec<(f64, usize)> = Vec::new();
    let mut now = 0.0_f64;

    let decay_to = |excite: &mut [f64], factors: &mut [f64], dt: f64| {
        if dt <= 0.0 {
            return;
        }
        for (f, d) in factors.iter_mut().zip(decays) {
            *f = (-d * dt).exp();
        }
        for row in excite.chunks_mut(nl) {
            for (e, f) in row.iter_mut().zip(factors.iter()) {
                *e *= f;
            }
        }
    };

    while now < horizon {
        let bin = baseline.bin_index(now).expect("baseline covers the horizon");
        let next_edge = edges[bin + 1].min(horizon);
        let bound: f64 = (0..n)
            .map(|t| {
                let pos: f64 = excite[t * nl..(t + 1) * nl].iter().map(|e| e.max(0.0)).sum();
                (baseline.value(t, bin) + pos).max(0.0)
            })
            .sum();
        if bound <= 0.0 {
            decay_to(&mut excite, &mut factors, next_edge - now);
            now = next_edge;
            continue;
        }
        let u: f64 = rng.random();
        let candidate = now - (1.0 - u).ln() / bound;
        if candidate >= next_edge {
            decay_to(&mut excite, &mut factors, next_edge - now);
            now = next_edge;
            continue;
        }
        decay_to(&mut excite, &mut factors, candidate - now);
        now = candidate;
        let mut total = 0.0;
        for t in 0..n {
            let v = baseline.value(t, bin) + excite[t * nl..(t + 1) * nl].iter().sum::<f64>();
            intens[t] = v.max(0.0);
            total += intens[t];
        }
        let accept: f64 = rng.random::<f64>() * bound;
        if accept >= total {
            continue;
        }
        let mut pick = n - 1;
        let mut cum = 0.0;
        for (t, v) in intens.iter().enumerate() {
            cum += v;
            if accept < cum {
                pick = t;
                break;
            }
        }
        out.push((now, pick));
        if out.len() > opts.max_events {
            return Err(SimulationError::ExplosionGuard { events: out.len() });
        }
        for t in 0..n {
            let cell = kernels.cell(t, pick);
            for l in 0..nl {
                excite[t * nl + l] += cell[l] * decays[l];
            }
        }
    }
    finish(model, opts, horizon, out)
}

/// Cluster simulation with default options.
pub fn simulate_cluster(model: &HawkesModel, horizon: f64, seed: u64) -> Result<EventStream, SimulationError> {
    simulate_cluster_with(model, horizon, seed, &SimOptions::default())
}

/// Immigrants from the piecewise baseline; every event of source `s` spawns,
/// for each target `t` and basis element `l`, `Poisson(alpha[t][s][l])`
/// children at `Exp(decay_l)` lags. Offspring past the horizon are dropped.
pub fn simulate_cluster_with(
    model: &HawkesModel,
    horizon: f64,
    seed: u64,
    opts: &SimOptions,
) -> Result<EventStream, SimulationError> {
    check_inputs(model, horizon)?;
    let n = model.dim();
    let kernels = model.kernels();
    let decays = model.basis().decays();
    for t in 0..n {
        for s in 0..n {
            if let Some(l) = kernels.cell(t, s).iter().position(|a| *a < 0.0) {
                return Err(SimulationError::NegativeKernel { target: t, from: s, l });
            }
        }
    }
    let rho = crate::model::spectral_radius(&model.phi())?;
    if rho >= 1.0 {
        return Err(ModelError::Unstable { spectral_radius: rho }.into());
    }
    let baseline = model.baseline();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(f64, usize)> = Vec::new();

    for c in 0..n {
        for (k, w) in baseline.edges().windows(2).enumerate() {
            let (a, b) = (w[0].max(0.0), w[1].min(horizon));
            if b <= a {
                continue;
            }
            let rate = baseline.value(c, k);
            if rate < 0.0 {
                return Err(SimulationError::NegativeBaseline { component: c });
            }
            let mean = rate * (b - a);
            if mean > 0.0 {
                let count = Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize;
                for _ in 0..count {
                    out.push((a + rng.random::<f64>() * (b - a), c));
                }
            }
        }
    }
    let lags: Vec<Exp<f64>> = decays.iter().map(|d| Exp::new(*d).expect("positive decay")).collect();
    let mut head = 0;
    while head < out.len() {
        let (t0, s) = out[head];
        head += 1;
        for t in 0..n {
            for (l, a) in kernels.cell(t, s).iter().enumerate() {
                if *a <= 0.0 {
                    continue;
                }
                let k = Poisson::new(*a).expect("positive mean").sample(&mut rng) as usize;
                for _ in 0..k {
                    let child = t0 + lags[l].sample(&mut rng);
                    if child < horizon {
                        out.push((child, t));
                    }
                }
            }
        }
        if out.len() > opts.max_events {
            return Err(SimulationError::ExplosionGuard { events: out.len() });
        }
    }
    finish(model, opts, horizon, out)
}

/// Mid-price path of a stream: `P(t) = P0 + sum of jumps at times <= t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePath {
    pub p0: f64,
    pub session: Session,
    jumps: Vec<(f64, f64)>,
}

impl PricePath {
    pub fn jumps(&self) -> &[(f64, f64)] {
        &self.jumps
    }

    pub fn final_price(&self) -> f64 {
        self.p0 + self.jumps.iter().map(|j| j.1).sum::<f64>()
    }

    pub fn price_at(&self, t: f64) -> f64 {
        let k = self.jumps.partition_point(|j| j.0 <= t);
        self.p0 + self.jumps[..k].iter().map(|j| j.1).sum::<f64>()
    }
}

pub fn build_price_path(stream: &EventStream, p0: f64) -> PricePath {
    let jumps = stream
        .events()
        .iter()
        .filter(|e| e.kind.is_price_move())
        .map(|e| (e.t, e.delta))
        .collect();
    PricePath { p0, session: stream.session, jumps }
}

/// Mean squared increment over consecutive non-overlapping windows of
/// length `tau` from session open, divided by `tau`.
pub fn realized_variance(path: &PricePath, tau: f64) -> Result<f64, SimulationError> {
    let span = path.session.length();
    if !(tau > 0.0) || span < 10.0 * tau {
        return Err(SimulationError::InsufficientSpan { span, needed: 10.0 * tau, tau });
    }
    let windows = (span / tau).floor() as usize;
    let mut sums = vec![0.0_f64; windows];
    for (t, d) in &path.jumps {
        // window w covers (open + w tau, open + (w+1) tau]
        let x = (t - path.session.open) / tau;
        let w = if x > 0.0 { (x.ceil() as usize).saturating_sub(1) } else { continue };
        if w < windows {
            sums[w] += d;
        }
    }
    Ok(sums.iter().map(|s| s * s).sum::<f64>() / windows as f64 / tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{toy_model, BasisDictionary, KernelMatrix, PiecewiseBaseline};
    use crate::types::{AgentId, Component, EventType};

    fn poisson_model(rate: f64, horizon: f64) -> HawkesModel {
        let basis = BasisDictionary::new(vec![1.0]).unwrap();
        HawkesModel::new(
            vec![
                Component::new(AgentId(0), EventType::PriceUp),
                Component::new(AgentId(0), EventType::PriceDown),
            ],
            KernelMatrix::zeros(2, basis),
            PiecewiseBaseline::constant(&[rate, rate], horizon).unwrap(),
            vec![1.0, -1.0],
        )
        .unwrap()
    }

    #[test]
    fn thinning_poisson_counts() {
        let m = poisson_model(1.0, 1e4);
        let s = simulate_thinning(&m, 1e4, 7).unwrap();
        for kind in [EventType::PriceUp, EventType::PriceDown] {
            let c = s.counts(AgentId(0))[kind.index()] as f64;
            assert!((c - 1e4).abs() < 4.0 * 100.0, "{kind}: {c}");
        }
    }

    #[test]
    fn thinning_toy_rate() {
        let m = toy_model(0.5, 0.2, 0.3, 1.0, 1e5).unwrap();
        let s = simulate_thinning(&m, 1e5, 11).unwrap();
        for kind in [EventType::PriceUp, EventType::PriceDown] {
            let rate = s.counts(AgentId(0))[kind.index()] as f64 / 1e5;
            assert!((rate - 1.0).abs() < 0.03, "{kind}: {rate}");
        }
    }

    #[test]
    fn cluster_toy_rate() {
        let m = toy_model(0.5, 0.2, 0.3, 1.0, 1e5).unwrap();
        let s = simulate_cluster(&m, 1e5, 11).unwrap();
        for kind in [EventType::PriceUp, EventType::PriceDown] {
            let rate = s.counts(AgentId(0))[kind.index()] as f64 / 1e5;
            assert!((rate - 1.0).abs() < 0.03, "{kind}: {rate}");
        }
    }

    #[test]
    fn cluster_zero_kernels_is_poisson() {
        let m = poisson_model(2.0, 1e3);
        let s = simulate_cluster(&m, 1e3, 3).unwrap();
        let c = s.counts(AgentId(0))[0] as f64;
        assert!((c - 2000.0).abs() < 4.0 * 2000f64.sqrt());
    }

    #[test]
    fn explosion_guard_on_supercritical_model() {
        let m = toy_model(0.5, 0.6, 0.6, 1.0, 1e4).unwrap();
        let opts = SimOptions { max_events: 50_000, ..SimOptions::default() };
        let err = simulate_thinning_with(&m, 1e4, 1, &opts).unwrap_err();
        assert!(matches!(err, SimulationError::ExplosionGuard { .. }));
    }

    #[test]
    fn cluster_rejects_negative_kernels() {
        let basis = BasisDictionary::new(vec![1.0]).unwrap();
        let k = KernelMatrix::from_nested(basis, &[vec![vec![0.1], vec![-0.1]], vec![vec![0.0], vec![0.1]]]).unwrap();
        let m = HawkesModel::new(
            vec![
                Component::new(AgentId(0), EventType::PriceUp),
                Component::new(AgentId(0), EventType::PriceDown),
            ],
            k,
            PiecewiseBaseline::constant(&[1.0, 1.0], 10.0).unwrap(),
            vec![1.0, -1.0],
        )
        .unwrap();
        assert!(matches!(
            simulate_cluster(&m, 10.0, 0),
            Err(SimulationError::NegativeKernel { target: 0, from: 1, l: 0 })
        ));
        // thinning accepts signed kernels with a clamped intensity
        assert!(simulate_thinning(&m, 10.0, 0).is_ok());
    }

    #[test]
    fn deterministic_per_seed() {
        let m = toy_model(0.5, 0.2, 0.3, 1.0, 1e3).unwrap();
        let a = simulate_thinning(&m, 1e3, 99).unwrap();
        let b = simulate_thinning(&m, 1e3, 99).unwrap();
        let c = simulate_thinning(&m, 1e3, 100).unwrap();
        let bits = |s: &EventStream| s.events().iter().map(|e| e.t.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn piecewise_baseline_respected() {
        let basis = BasisDictionary::new(vec![1.0]).unwrap();
        let m = HawkesModel::new(
            vec![Component::new(AgentId(0), EventType::LimitBid)],
            KernelMatrix::zeros(1, basis),
            PiecewiseBaseline::new(vec![0.0, 1000.0, 2000.0], vec![vec![0.0, 5.0]]).unwrap(),
            vec![0.0],
        )
        .unwrap();
        let s = simulate_thinning(&m, 2000.0, 5).unwrap();
        assert!(s.events().iter().all(|e| e.t >= 1000.0));
        assert!((s.len() as f64 - 5000.0).abs() < 4.0 * 5000f64.sqrt());
    }

    #[test]
    fn price_path_examples() {
        let sess = Session::new(0.0, 100.0).unwrap();
        let empty = EventStream::empty("d", sess);
        let p = build_price_path(&empty, 4500.0);
        assert_eq!(p.final_price(), 4500.0);

        let ev = vec![
            Event::new(1.0, AgentId(0), EventType::PriceUp, 1.0),
            Event::new(2.0, AgentId(0), EventType::LimitBid, 0.0),
            Event::new(3.0, AgentId(0), EventType::PriceDown, -1.0),
            Event::new(4.0, AgentId(0), EventType::PriceUp, 2.0),
        ];
        let s = EventStream::new("d", sess, ev).unwrap();
        let p = build_price_path(&s, 10.0);
        assert_eq!(p.final_price(), 12.0);
        assert_eq!(p.price_at(3.5), 10.0);
        assert_eq!(p.jumps().len(), 3);
    }

    #[test]
    fn realized_variance_alternating_is_zero() {
        let sess = Session::new(0.0, 101.0).unwrap();
        let ev = (1..=100)
            .map(|i| {
                if i % 2 == 1 {
                    Event::new(i as f64, AgentId(0), EventType::PriceUp, 1.0)
                } else {
                    Event::new(i as f64, AgentId(0), EventType::PriceDown, -1.0)
                }
            })
            .collect();
        let s = EventStream::new("d", sess, ev).unwrap();
        let p = build_price_path(&s, 0.0);
        assert_eq!(realized_variance(&p, 2.0).unwrap(), 0.0);
        assert!(matches!(realized_variance(&p, 20.2), Err(SimulationError::InsufficientSpan { .. })));
    }

    #[test]
    fn realized_variance_poisson_limit() {
        // two independent unit-rate Poisson jump streams: RV/tau -> 2
        let m = poisson_model(1.0, 2e4);
        let mut vals = Vec::new();
        for seed in 0..20 {
            let s = simulate_thinning(&m, 2e4, seed).unwrap();
            vals.push(realized_variance(&build_price_path(&s, 0.0), 100.0).unwrap());
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * sd / n.sqrt() + 1e-9, "mean {mean} sd {sd}");
    }
}
