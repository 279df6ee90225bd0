//! Exact normal equations of the least-squares contrast
//! `C(theta) = T^-1 int lambda^2 - 2 T^-1 sum_events lambda(t-)`.
//!
//! With `lambda(s) = theta . X(s)` the contrast is `theta' A theta - 2 b' theta`
//! where `A = T^-1 int X X'` and `b = T^-1 sum X(t-)`. Every entry of `A` is
//! integrated in closed form: two kernel features generated by events at
//! `u' <= u` contribute `d_f d_g exp(-d_g (u - u')) (1 - exp(-(d_f + d_g)(T - u))) / (d_f + d_g)`,
//! which is accumulated pairwise through the register values, so the cost per
//! event is linear in the number of features.

use crate::linalg::{Matrix, Vector};
use crate::stream::EventStream;
use crate::types::{AgentId, EventType, N_TYPES};

use super::features::{FeatureLayout, Flow, Registers};
use super::EstimationError;

/// Quadratic form of the contrast for every target type of one focus agent.
/// `A` is shared; `b` differs per target.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub layout: FeatureLayout,
    pub a: Matrix,
    pub b: Vec<Vector>,
    /// Focus-agent event counts per target type.
    pub counts: [usize; N_TYPES],
    /// Session length `T` in seconds.
    pub horizon: f64,
}

impl NormalEquations {
    /// `theta' A theta - 2 b' theta` for one target type.
    pub fn contrast(&self, target: EventType, theta: &Vector) -> f64 {
        (theta.transpose() * &self.a * theta)[(0, 0)] - 2.0 * self.b[target.index()].dot(theta)
    }
}

/// Builds `A` and all eight `b` vectors for `focus` over the stream's session.
pub fn assemble_all(
    stream: &EventStream,
    focus: AgentId,
    layout: &FeatureLayout,
) -> Result<NormalEquations, EstimationError> {
    let horizon = stream.session.length();
    if !(horizon > 0.0) {
        return Err(EstimationError::EmptyHorizon);
    }
    let events = stream.events();
    if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
        return Err(EstimationError::UnsortedInput { index: i + 1 });
    }
    let open = stream.session.open;
    let nb = layout.n_bins();
    let nl = layout.n_decays();
    let nk = layout.n_kernel();
    let d = layout.dim();
    let decays = &layout.decays;
    let edges = &layout.edges;

    let mut g = vec![0.0_f64; d * d];
    let mut b = vec![vec![0.0_f64; d]; N_TYPES];
    let mut counts = [0usize; N_TYPES];

    for k in 0..nb {
        let lo = edges[k].max(0.0);
        let hi = edges[k + 1].min(horizon);
        if hi > lo {
            g[k * d + k] = hi - lo;
        }
    }

    let mut regs = Registers::new(layout, 0.0);
    let mut pair = vec![0.0_f64; nl * nl];
    let mut i = 0;
    while i < events.len() {
        let u = events[i].t - open;
        let mut j = i;
        while j < events.len() && events[j].t - open == u {
            j += 1;
        }
        regs.advance(u);

        // left-limit features for every focus event in this timestamp group
        let bin = layout.bin_of(u);
        for e in &events[i..j] {
            if e.agent == focus {
                let row = &mut b[e.kind.index()];
                row[bin] += 1.0;
                for (r, v) in regs.values().iter().enumerate() {
                    row[nb + r] += v;
                }
                counts[e.kind.index()] += 1;
            }
        }

        let rem = horizon - u;
        for lf in 0..nl {
            for lg in 0..nl {
                let s = decays[lf] + decays[lg];
                pair[lf * nl + lg] = -(-s * rem).exp_m1() / s;
            }
        }

        for e in &events[i..j] {
            let flow = if e.agent == focus { Flow::SelfFlow } else { Flow::Market };
            let ty = e.kind.index();
            for lf in 0..nl {
                let rf = layout.register_index(flow, ty, lf);
                let f = nb + rf;
                let df = decays[lf];
                // pairs with strictly earlier (or earlier-processed simultaneous) events
                for (rg, sg) in regs.values().iter().enumerate() {
                    if *sg == 0.0 {
                        continue;
                    }
                    let lg = rg % nl;
                    let v = df * sg * pair[lf * nl + lg];
                    g[f * d + nb + rg] += v;
                    g[(nb + rg) * d + f] += v;
                }
                // the event paired with itself
                for lg in 0..nl {
                    let fg = nb + layout.register_index(flow, ty, lg);
                    g[f * d + fg] += df * decays[lg] * pair[lf * nl + lg];
                }
                // overlap with baseline indicators
                for k in bin..nb {
                    let lo = edges[k].max(u) - u;
                    let hi = edges[k + 1].min(horizon) - u;
                    if hi <= lo {
                        continue;
                    }
                    if df * lo > 745.0 {
                        break;
                    }
                    let v = (-df * lo).exp() - (-df * hi).exp();
                    g[k * d + f] += v;
                    g[f * d + k] += v;
                }
            }
            regs.push(layout, flow, ty);
        }
        i = j;
    }
    debug_assert_eq!(nk + nb, d);

    let a = Matrix::from_row_slice(d, d, &g) / horizon;
    let b = b.into_iter().map(|row| Vector::from_vec(row) / horizon).collect();
    Ok(NormalEquations { layout: layout.clone(), a, b, counts, horizon })
}

/// `(A, b)` for a single target type of `focus`.
pub fn assemble_normal_equations(
    stream: &EventStream,
    focus: AgentId,
    target: EventType,
    layout: &FeatureLayout,
) -> Result<(Matrix, Vector), EstimationError> {
    let ne = assemble_all(stream, focus, layout)?;
    let b = ne.b[target.index()].clone();
    Ok((ne.a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::features::filter_events;
    use crate::estimation::solve::{solve_least_squares, Ridge};
    use crate::stream::{Event, Session};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stream_from(times: &[(f64, u32, EventType)], open: f64, close: f64) -> EventStream {
        let ev = times
            .iter()
            .map(|(t, a, k)| {
                let d = match k {
                    EventType::PriceUp => 1.0,
                    EventType::PriceDown => -1.0,
                    _ => 0.0,
                };
                Event::new(*t, AgentId(*a), *k, d)
            })
            .collect();
        EventStream::new("d", Session::new(open, close).unwrap(), ev).unwrap()
    }

    #[test]
    fn kernel_free_single_interval_gives_rate() {
        let times: Vec<_> = (0..40).map(|i| (0.25 * i as f64, 1, EventType::LimitAsk)).collect();
        let s = stream_from(&times, 0.0, 20.0);
        let layout = FeatureLayout::new(vec![0.0, 20.0], vec![]);
        let (a, b) = assemble_normal_equations(&s, AgentId(1), EventType::LimitAsk, &layout).unwrap();
        let theta = solve_least_squares(&a, &b, Ridge::Absolute(0.0)).unwrap();
        assert_abs_diff_eq!(theta[0], 40.0 / 20.0, epsilon = 1e-12);
    }

    #[test]
    fn kernel_free_bins_separate() {
        // 3 events in [0, 2), 10 in [2, 7), none in [7, 10)
        let mut times: Vec<_> = (0..3).map(|i| (0.5 * i as f64, 1, EventType::CancelBid)).collect();
        times.extend((0..10).map(|i| (2.0 + 0.4 * i as f64, 1, EventType::CancelBid)));
        let s = stream_from(&times, 0.0, 10.0);
        let layout = FeatureLayout::new(vec![0.0, 2.0, 7.0, 10.0], vec![]);
        let (a, b) = assemble_normal_equations(&s, AgentId(1), EventType::CancelBid, &layout).unwrap();
        let theta = solve_least_squares(&a, &b, Ridge::Absolute(0.0)).unwrap();
        assert_abs_diff_eq!(theta[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(theta[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(theta[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_events_give_zero_solution() {
        let s = stream_from(&[], 0.0, 5.0);
        let layout = FeatureLayout::new(vec![0.0, 5.0], vec![1.0]);
        let ne = assemble_all(&s, AgentId(1), &layout).unwrap();
        assert!(ne.b.iter().all(|b| b.iter().all(|v| *v == 0.0)));
        let theta = solve_least_squares(&ne.a, &ne.b[0], Ridge::Absolute(1e-9)).unwrap();
        assert!(theta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = 0.0;
        let mut times = Vec::new();
        while times.len() < 40 {
            t += rng.random::<f64>() * 0.2;
            let a = rng.random_range(1..4u32);
            let k = EventType::ALL[rng.random_range(2..8)];
            times.push((t, a, k));
        }
        let s = stream_from(&times, 0.0, t + 1.0);
        let layout = FeatureLayout::new(vec![0.0, 2.0, t + 1.0], vec![0.5, 3.0]);
        let ne = assemble_all(&s, AgentId(1), &layout).unwrap();
        assert_abs_diff_eq!(ne.a.clone(), ne.a.transpose(), epsilon = 1e-12);
        let eig = nalgebra::SymmetricEigen::new(ne.a.clone());
        assert!(eig.eigenvalues.min() > -1e-10);
    }

    /// Brute-force contrast: midpoint quadrature of `lambda^2` on a 1e-4 grid
    /// plus the event sum at left limits, both from `filter_events`.
    fn quadrature_contrast(
        s: &EventStream,
        focus: AgentId,
        target: EventType,
        layout: &FeatureLayout,
        theta: &Vector,
    ) -> f64 {
        let horizon = s.session.length();
        let step = 1e-4;
        let n = (horizon / step).round() as usize;
        let grid: Vec<f64> = (0..n).map(|i| s.session.open + (i as f64 + 0.5) * step).collect();
        let f = filter_events(s, focus, layout, &grid).unwrap();
        let sq: f64 = f
            .rows
            .iter()
            .map(|r| {
                let l: f64 = r.iter().zip(theta.iter()).map(|(x, w)| x * w).sum();
                l * l
            })
            .sum::<f64>()
            * step;
        let ev_times: Vec<f64> = s
            .events()
            .iter()
            .filter(|e| e.agent == focus && e.kind == target)
            .map(|e| e.t)
            .collect();
        let fe = filter_events(s, focus, layout, &ev_times).unwrap();
        let lin: f64 = fe
            .rows
            .iter()
            .map(|r| r.iter().zip(theta.iter()).map(|(x, w)| x * w).sum::<f64>())
            .sum();
        sq / horizon - 2.0 * lin / horizon
    }

    #[test]
    fn quadratic_form_matches_quadrature() {
        for seed in 0..4u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = 0.0;
            let mut times = Vec::new();
            let n_events = rng.random_range(10..50);
            while times.len() < n_events {
                t += 1e-3 * (1.0 + (rng.random::<f64>() * 80.0).floor());
                let a = rng.random_range(1..3u32);
                let k = EventType::ALL[rng.random_range(0..4)];
                times.push((t, a, k));
            }
            let close = t + 0.5;
            let s = stream_from(&times, 0.0, close);
            let layout = FeatureLayout::new(vec![0.0, close / 2.0, close], vec![0.7, 4.0]);
            let ne = assemble_all(&s, AgentId(1), &layout).unwrap();
            let theta = Vector::from_fn(layout.dim(), |_, _| rng.random::<f64>() - 0.3);
            for target in [EventType::PriceUp, EventType::TradeAsk] {
                let exact = ne.contrast(target, &theta);
                let brute = quadrature_contrast(&s, AgentId(1), target, &layout, &theta);
                assert!(
                    (exact - brute).abs() <= 1e-4 * brute.abs().max(1.0),
                    "seed {seed}: {exact} vs {brute}"
                );
            }
        }
    }

    #[test]
    fn simultaneous_events_use_left_limits() {
        let times = [(1.0, 1, EventType::LimitAsk), (1.0, 1, EventType::LimitAsk)];
        let s = stream_from(&times, 0.0, 3.0);
        let layout = FeatureLayout::new(vec![0.0, 3.0], vec![1.0]);
        let ne = assemble_all(&s, AgentId(1), &layout).unwrap();
        let b = &ne.b[EventType::LimitAsk.index()];
        assert_abs_diff_eq!(b[0], 2.0 / 3.0, epsilon = 1e-15);
        assert!(b.iter().skip(1).all(|v| *v == 0.0));
    }
}
