//! Acceptance criteria A1 to A10. Each test prints one `PASS`/`FAIL` line
//! and then asserts, so `cargo test --test acceptance -- --nocapture`
//! gives a one-line-per-criterion summary.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agentvol::attribution::{
    build_report, rho_impact, sigma2_asymptotic, u_vector, xi_per_event, ReportOptions,
};
use agentvol::cli::control_day;
use agentvol::estimation::{
    assemble_global, fit_agent_vs_market, fit_day, FitConfig, FitSlot, Ridge,
};
use agentvol::model::{
    compute_r, toy_model, BasisDictionary, BranchingSummary, HawkesModel, KernelMatrix, PiecewiseBaseline,
};
use agentvol::pipeline::shuffle_control;
use agentvol::simulation::{build_price_path, realized_variance, simulate_thinning};
use agentvol::types::{agent_components, AgentId, Component, EventType, N_TYPES};
use agentvol::{Event, EventStream, Matrix, Session, Vector};

fn verdict(id: &str, pass: bool, detail: String) {
    println!("{id} {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{id}: {detail}");
}

fn fit_config(decays: Vec<f64>, min_events: usize) -> FitConfig {
    FitConfig {
        basis: BasisDictionary::new(decays).unwrap(),
        baseline_bins: 1,
        min_events,
        ridge: Ridge::default(),
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Closed-form inverse of `I - [[s, c], [c, s]]`.
fn toy_r_closed_form(s: f64, c: f64) -> [[f64; 2]; 2] {
    let det = (1.0 - s) * (1.0 - s) - c * c;
    [[(1.0 - s) / det, c / det], [c / det, (1.0 - s) / det]]
}

fn neumann(phi: &Matrix, tol: f64) -> Matrix {
    let n = phi.nrows();
    let mut sum = Matrix::identity(n, n);
    let mut term = Matrix::identity(n, n);
    for _ in 0..100_000 {
        term = &term * phi;
        sum += &term;
        if term.amax() < tol {
            break;
        }
    }
    sum
}

#[test]
fn a1_branching_algebra() {
    let start = Instant::now();
    let mut worst_closed = 0.0_f64;
    let mut worst_series = 0.0_f64;
    let mut points = 0;
    for s in [0.0, 0.15, 0.3, 0.45, 0.6] {
        for c in [0.0, 0.1, 0.2, 0.3] {
            points += 1;
            let phi = Matrix::from_row_slice(2, 2, &[s, c, c, s]);
            let r = compute_r(&phi).unwrap();
            let want = toy_r_closed_form(s, c);
            let series = neumann(&phi, 1e-16);
            for i in 0..2 {
                for j in 0..2 {
                    worst_closed = worst_closed.max((r[(i, j)] - want[i][j]).abs());
                    worst_series = worst_series.max((r[(i, j)] - series[(i, j)]).abs());
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "A1",
        points == 20 && worst_closed <= 1e-12 && worst_series <= 1e-8 && elapsed < Duration::from_secs(1),
        format!("{points} points, closed-form err {worst_closed:.2e}, series err {worst_series:.2e}, {elapsed:?}"),
    );
}

#[test]
fn a2_toy_volatility_closure() {
    let start = Instant::now();
    // 2 mu / ((1 - s - c) (1 - s + c)^2) with mu 0.5, s 0.2, c 0.3
    let want = 2.0 * 0.5 / ((1.0 - 0.2 - 0.3) * (1.0 - 0.2 + 0.3_f64).powi(2));
    let horizon = 1e4;
    let model = toy_model(0.5, 0.2, 0.3, 1.0, horizon).unwrap();
    let rvs: Vec<f64> = (0..30)
        .map(|seed| {
            let s = simulate_thinning(&model, horizon, 2000 + seed).unwrap();
            realized_variance(&build_price_path(&s, 0.0), 500.0).unwrap()
        })
        .collect();
    let (mean, se) = mean_se(&rvs);
    let rel = (mean - want) / want;
    let elapsed = start.elapsed();
    verdict(
        "A2",
        rel.abs() <= 0.05 && elapsed < Duration::from_secs(120),
        format!("mean RV(500)/500 {mean:.6} (se {se:.4}) vs {want:.6}, rel err {rel:+.4}, {elapsed:?}"),
    );
}

#[test]
fn a3_parameter_recovery() {
    let start = Instant::now();
    let horizon = 5e4;
    let model = toy_model(0.5, 0.2, 0.3, 1.0, horizon).unwrap();
    let cfg = fit_config(vec![1.0, 10.0], 1000);
    let (up, down) = (0usize, 1usize);
    let mut good = 0;
    let mut worst_phi = 0.0_f64;
    let mut worst_mu = 0.0_f64;
    for seed in 0..20 {
        let s = simulate_thinning(&model, horizon, 3000 + seed).unwrap();
        let f = fit_agent_vs_market(&s, AgentId(0), &cfg).unwrap();
        let phi_err = [
            f.self_phi(up, up) - 0.2,
            f.self_phi(down, down) - 0.2,
            f.self_phi(up, down) - 0.3,
            f.self_phi(down, up) - 0.3,
        ]
        .iter()
        .fold(0.0_f64, |m, e| m.max(e.abs()));
        let mu_err = [up, down].iter().fold(0.0_f64, |m, t| m.max((f.mean_baseline(*t) - 0.5).abs() / 0.5));
        worst_phi = worst_phi.max(phi_err);
        worst_mu = worst_mu.max(mu_err);
        if phi_err <= 0.05 && mu_err <= 0.10 {
            good += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "A3",
        good >= 16 && elapsed < Duration::from_secs(300),
        format!("{good}/20 seeds within tolerance, worst |dPhi| {worst_phi:.4}, worst mu rel err {worst_mu:.4}, {elapsed:?}"),
    );
}

#[test]
fn a4_poisson_null() {
    let horizon = 5e4;
    let model = toy_model(0.5, 0.0, 0.0, 1.0, horizon).unwrap();
    let s = simulate_thinning(&model, horizon, 4242).unwrap();
    let day = fit_day(&s, &fit_config(vec![1.0, 10.0], 1000)).unwrap();
    let global = day.global(&[AgentId(0)]).unwrap();
    let report = build_report("null", &global, &ReportOptions::default()).unwrap();
    let max_phi = global.summary.phi.amax();
    let f = report.agent(AgentId(0)).and_then(|a| a.f).unwrap();
    let counts = s.counts(AgentId(0));
    let poisson: f64 = (counts[EventType::PriceUp.index()] + counts[EventType::PriceDown.index()]) as f64 / horizon;
    let rel = (report.sigma2 - poisson) / poisson;
    verdict(
        "A4",
        max_phi < 0.05 && (0.9..=1.1).contains(&f) && rel.abs() <= 0.10,
        format!("max |Phi| {max_phi:.4}, f {f:.4}, sigma2 {:.5} vs sum Lambda delta^2 {poisson:.5} ({rel:+.4})", report.sigma2),
    );
}

/// Random stable kernel matrix with mixed-sign entries, scaled to a
/// spectral radius well below one.
fn random_stable(rng: &mut ChaCha8Rng, n: usize) -> (Matrix, Vector, Vector) {
    let raw = Matrix::from_fn(n, n, |_, _| {
        if rng.random_bool(0.3) {
            0.0
        } else {
            rng.random_range(-0.2..1.0)
        }
    });
    // row-sum bound on |Phi| caps the spectral radius
    let bound = (0..n).map(|i| raw.row(i).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0_f64, f64::max);
    let target = rng.random_range(0.05..0.9);
    let phi = if bound > 0.0 { raw * (target / bound) } else { raw };
    let mu = Vector::from_fn(n, |_, _| rng.random_range(0.01..2.0));
    let delta = Vector::from_fn(n, |_, _| match rng.random_range(0..3) {
        0 => 1.0,
        1 => -1.0,
        _ => 0.0,
    });
    (phi, mu, delta)
}

#[test]
fn a5_algebraic_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_xi = 0.0_f64;
    let mut worst_u = 0.0_f64;
    let mut draws = 0;
    while draws < 100 {
        let n = rng.random_range(1..=24);
        let (phi, mu, delta) = random_stable(&mut rng, n);
        let summary = BranchingSummary::from_phi(phi, &mu).unwrap();
        let Ok(sigma2) = sigma2_asymptotic(&summary, &delta) else { continue };
        if sigma2 == 0.0 {
            continue;
        }
        let xi = xi_per_event(&summary, &delta).unwrap();
        let u = u_vector(&summary, &delta).unwrap();
        let via_xi: f64 = summary.lambda.iter().zip(xi.iter()).map(|(l, x)| l * x * x).sum();
        let via_u: f64 = mu.iter().zip(u.iter()).map(|(m, u)| m * u).sum();
        let scale = sigma2.max(1.0);
        worst_xi = worst_xi.max((via_xi - sigma2).abs() / scale);
        worst_u = worst_u.max((via_u - sigma2).abs() / scale);
        draws += 1;
    }
    verdict(
        "A5",
        worst_xi <= 1e-10 && worst_u <= 1e-10,
        format!("{draws} draws, max |sum Lambda xi^2 - sigma2| {worst_xi:.2e}, max |sum mu u - sigma2| {worst_u:.2e}"),
    );
}

fn unit_jump(kind: EventType) -> f64 {
    match kind {
        EventType::PriceUp => 1.0,
        EventType::PriceDown => -1.0,
        _ => 0.0,
    }
}

fn price_components(agents: &[AgentId]) -> Vec<Component> {
    agent_components(agents).into_iter().filter(|c| c.kind.is_price_move()).collect()
}

fn jumps_of(comps: &[Component]) -> Vector {
    Vector::from_iterator(comps.len(), comps.iter().map(|c| unit_jump(c.kind)))
}

#[test]
fn a6_rho_sanity() {
    // single agent
    let comps = price_components(&[AgentId(1)]);
    let phi = Matrix::from_row_slice(2, 2, &[0.2, 0.3, 0.3, 0.2]);
    let mu = Vector::from_vec(vec![0.5, 0.5]);
    let single = BranchingSummary::from_phi(phi.clone(), &mu).unwrap();
    let rho_single = rho_impact(&single, &jumps_of(&comps), &mu, &comps, AgentId(1)).unwrap();

    // two independent copies
    let comps2 = price_components(&[AgentId(1), AgentId(2)]);
    let mut phi2 = Matrix::zeros(4, 4);
    phi2.view_mut((0, 0), (2, 2)).copy_from(&phi);
    phi2.view_mut((2, 2), (2, 2)).copy_from(&phi);
    let mu2 = Vector::from_vec(vec![0.5; 4]);
    let pair = BranchingSummary::from_phi(phi2.clone(), &mu2).unwrap();
    let d2 = jumps_of(&comps2);
    let rho1 = rho_impact(&pair, &d2, &mu2, &comps2, AgentId(1)).unwrap();
    let rho2 = rho_impact(&pair, &d2, &mu2, &comps2, AgentId(2)).unwrap();

    // third agent with no baseline and no kernels
    let comps3 = price_components(&[AgentId(1), AgentId(2), AgentId(3)]);
    let mut phi3 = Matrix::zeros(6, 6);
    phi3.view_mut((0, 0), (4, 4)).copy_from(&phi2);
    let mu3 = Vector::from_vec(vec![0.5, 0.5, 0.5, 0.5, 0.0, 0.0]);
    let triple = BranchingSummary::from_phi(phi3, &mu3).unwrap();
    let rho0 = rho_impact(&triple, &jumps_of(&comps3), &mu3, &comps3, AgentId(3)).unwrap();

    verdict(
        "A6",
        rho_single == 1.0 && (rho1 - 0.5).abs() <= 1e-10 && (rho2 - 0.5).abs() <= 1e-10 && rho0.abs() <= 1e-10,
        format!("single {rho_single}, pair ({rho1:.12}, {rho2:.12}), idle agent {rho0:.2e}"),
    );
}

/// Per-path RV(tau)/tau at each tau of the signature plot.
fn signature(phi_s: f64, phi_c: f64, seed0: u64) -> Vec<[f64; 4]> {
    let horizon = 1e5;
    let model = toy_model(0.5, phi_s, phi_c, 1.0, horizon).unwrap();
    (0..30)
        .map(|k| {
            let s = simulate_thinning(&model, horizon, seed0 + k).unwrap();
            let path = build_price_path(&s, 0.0);
            let mut out = [0.0; 4];
            for (o, tau) in out.iter_mut().zip([1.0, 10.0, 100.0, 1000.0]) {
                *o = realized_variance(&path, tau).unwrap();
            }
            out
        })
        .collect()
}

/// Largest paired step against the expected direction, in standard errors.
fn worst_violation(paths: &[[f64; 4]], decreasing: bool) -> f64 {
    (0..3)
        .map(|k| {
            let steps: Vec<f64> = paths
                .iter()
                .map(|p| if decreasing { p[k + 1] - p[k] } else { p[k] - p[k + 1] })
                .collect();
            let (m, se) = mean_se(&steps);
            m / se
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn a7_signature_plot_direction() {
    let cross = signature(0.1, 0.5, 7000);
    let selfx = signature(0.5, 0.1, 8000);
    let z_cross = worst_violation(&cross, true);
    let z_self = worst_violation(&selfx, false);
    let means = |p: &[[f64; 4]]| -> Vec<String> {
        (0..4).map(|k| format!("{:.3}", p.iter().map(|x| x[k]).sum::<f64>() / p.len() as f64)).collect()
    };
    verdict(
        "A7",
        z_cross <= 3.0 && z_self <= 3.0,
        format!(
            "cross-dominant {:?} worst z {z_cross:+.2}; self-dominant {:?} worst z {z_self:+.2}",
            means(&cross),
            means(&selfx)
        ),
    );
}

/// Two agents on price moves; cross-agent blocks differ from own blocks.
fn two_agent_market(own: [[f64; 2]; 2], other: [[f64; 2]; 2], mu: f64, horizon: f64) -> HawkesModel {
    let comps = price_components(&[AgentId(1), AgentId(2)]);
    let nested: Vec<Vec<Vec<f64>>> = (0..4)
        .map(|t| {
            (0..4)
                .map(|s| {
                    let block = if t / 2 == s / 2 { own } else { other };
                    vec![block[t % 2][s % 2]]
                })
                .collect()
        })
        .collect();
    HawkesModel::new(
        comps,
        KernelMatrix::from_nested(BasisDictionary::new(vec![1.0]).unwrap(), &nested).unwrap(),
        PiecewiseBaseline::constant(&[mu; 4], horizon).unwrap(),
        vec![1.0, -1.0, 1.0, -1.0],
    )
    .unwrap()
}

#[test]
fn a8_stitching_exactness() {
    let horizon = 2e4;
    let model = two_agent_market([[0.1, 0.2], [0.2, 0.1]], [[0.05, 0.1], [0.1, 0.05]], 0.3, horizon);
    let s = simulate_thinning(&model, horizon, 88).unwrap();
    let day = fit_day(&s, &fit_config(vec![1.0, 5.0], 1000)).unwrap();
    let (a, b) = (day.fit_for(AgentId(1)).unwrap(), day.fit_for(AgentId(2)).unwrap());
    let slots = [
        FitSlot { agent: AgentId(1), fit: Some(a) },
        FitSlot { agent: AgentId(9), fit: None },
        FitSlot { agent: AgentId(2), fit: Some(b) },
    ];
    let mut lambda = Vector::zeros(3 * N_TYPES);
    let two = [slots[0], slots[2]];
    let lam2 = day.empirical_lambda(&two);
    lambda.rows_mut(0, N_TYPES).copy_from(&lam2.rows(0, N_TYPES));
    lambda.rows_mut(2 * N_TYPES, N_TYPES).copy_from(&lam2.rows(N_TYPES, N_TYPES));
    let g3 = assemble_global(&slots, &lambda).unwrap();
    let g2 = assemble_global(&two, &lam2).unwrap();
    let k = g3.model.kernels();

    let mut mismatches = 0;
    let fits = [Some(a), None, Some(b)];
    for (ti, tf) in fits.iter().enumerate() {
        for (si, _) in fits.iter().enumerate() {
            for t in 0..N_TYPES {
                for src in 0..N_TYPES {
                    let cell = k.cell(ti * N_TYPES + t, si * N_TYPES + src);
                    let want: Vec<f64> = match (tf, fits[si]) {
                        (Some(f), Some(_)) if ti == si => f.self_coeffs[t][src].clone(),
                        (Some(f), Some(_)) => f.market_coeffs[t][src].clone(),
                        _ => vec![0.0; cell.len()],
                    };
                    let same = cell.len() == want.len()
                        && cell.iter().zip(&want).all(|(x, y)| x.to_bits() == y.to_bits());
                    if !same {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    let map = |i: usize| if i < N_TYPES { i } else { i + N_TYPES };
    let mut r_err = 0.0_f64;
    for i in 0..2 * N_TYPES {
        for j in 0..2 * N_TYPES {
            r_err = r_err.max((g2.summary.r[(i, j)] - g3.summary.r[(map(i), map(j))]).abs());
        }
    }
    verdict(
        "A8",
        mismatches == 0 && r_err <= 1e-12 && g3.absent == vec![AgentId(9)],
        format!("{mismatches} mismatched kernel cells, restricted R err {r_err:.2e}, absent {:?}", g3.absent),
    );
}

fn random_day(rng: &mut ChaCha8Rng, index: usize) -> EventStream {
    let session = Session::new(0.0, 100.0).unwrap();
    let n_agents = rng.random_range(1..6u32);
    let n = rng.random_range(0..200);
    let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
    times.sort_by(f64::total_cmp);
    let events = times
        .into_iter()
        .map(|t| {
            let kind = EventType::ALL[rng.random_range(0..N_TYPES)];
            Event::new(t, AgentId(rng.random_range(0..n_agents)), kind, unit_jump(kind))
        })
        .collect();
    EventStream::new(format!("r{index}"), session, events).unwrap()
}

#[test]
fn a9_controls() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut broken = 0;
    for i in 0..1000 {
        let day = random_day(&mut rng, i);
        let shuffled = shuffle_control(&day, rng.random());
        let same = day.len() == shuffled.len()
            && day.agents().iter().all(|a| day.counts(*a) == shuffled.counts(*a))
            && day.events().iter().zip(shuffled.events()).all(|(x, y)| x.t == y.t && x.kind == y.kind && x.delta == y.delta);
        if !same {
            broken += 1;
        }
    }

    let horizon = 2e4;
    let model = toy_model(0.5, 0.2, 0.3, 1.0, horizon).unwrap();
    let s = simulate_thinning(&model, horizon, 99).unwrap();
    let ctl = control_day(&s, &fit_config(vec![1.0], 1000), &ReportOptions::default(), 3, 1).unwrap();
    let residuals: Vec<(f64, Option<f64>)> = ctl.residuals.iter().map(|r| (r.rho_residual, r.xi_residual)).collect();
    let zero = !residuals.is_empty() && residuals.iter().all(|(r, x)| *r == 0.0 && x.is_none_or(|x| x == 0.0));
    verdict(
        "A9",
        broken == 0 && zero,
        format!("{broken}/1000 shuffled days changed counts, one-agent residuals {residuals:?}"),
    );
}

#[test]
fn a10_hawkes_beats_poisson() {
    let horizon = 3e4;
    // cross-excitation between opposite moves dominates, within and across agents
    let model = two_agent_market([[0.05, 0.2], [0.2, 0.05]], [[0.05, 0.2], [0.2, 0.05]], 0.3, horizon);
    let cfg = fit_config(vec![1.0, 10.0], 1000);
    let mut wins = 0;
    let mut detail = Vec::new();
    for d in 0..30 {
        let s = simulate_thinning(&model, horizon, 10_000 + d).unwrap();
        let rv = realized_variance(&build_price_path(&s, 0.0), 100.0).unwrap();
        let day = fit_day(&s, &cfg).unwrap();
        let global = day.global(&[AgentId(1), AgentId(2)]).unwrap();
        let hawkes = build_report("d", &global, &ReportOptions::default()).unwrap().sigma2;
        let moves = s.events().iter().filter(|e| e.kind.is_price_move()).count();
        let poisson = moves as f64 / horizon;
        if (hawkes - rv).abs() < (poisson - rv).abs() {
            wins += 1;
        }
        if d < 3 {
            detail.push(format!("rv {rv:.3} hawkes {hawkes:.3} poisson {poisson:.3}"));
        }
    }
    verdict("A10", wins >= 27, format!("Hawkes closer on {wins}/30 days; e.g. {}", detail.join("; ")));
}
