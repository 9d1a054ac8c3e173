use conic::{Cone, InteriorPoint};
use gridflex::ccopf::*;
use gridflex::metrics::GaussianProfile;
use gridflex::netmodel::{Bus, Line, Network, ProsumerAssets};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// fixtures

fn assets(pv_cap: f64, battery: bool) -> ProsumerAssets {
    let b = if battery { 3.5 } else { 0.0 };
    ProsumerAssets {
        pv_cap,
        batt_p_min: -b,
        batt_p_max: b,
        soc_min: if battery { 4.0 } else { 0.0 },
        soc_max: if battery { 10.0 } else { 0.0 },
        soc_init: if battery { 7.0 } else { 0.0 },
        eta: 0.95,
        power_factor: 0.9,
    }
}

fn bus(id: u32, prosumer: Option<ProsumerAssets>) -> Bus {
    Bus {
        id,
        prosumer,
        v_min: 0.94f64.powi(2),
        v_max: 1.06f64.powi(2),
        slack: id == 0,
    }
}

fn line(from: u32, to: u32, r: f64, x: f64, s_max: f64) -> Line {
    Line { from, to, r, x, s_max }
}

fn network(buses: Vec<Bus>, lines: Vec<Line>) -> Network {
    Network {
        buses,
        lines,
        slack_v: 1.0,
        base_mva: 0.1,
        base_kv: 0.4,
    }
}

fn flat(v: f64, slots: usize) -> Vec<f64> {
    vec![v; slots]
}

fn forecast(id: u32, demand: Vec<f64>, pv: Vec<f64>, sd: f64, spv: f64) -> NodeForecast {
    let n = demand.len();
    NodeForecast {
        bus_id: id,
        demand: GaussianProfile { mu: demand, sigma: flat(sd, n) },
        pv: GaussianProfile { mu: pv, sigma: flat(spv, n) },
    }
}

fn backend() -> InteriorPoint {
    InteriorPoint::new(OpfConfig::default().solver)
}

/// Full pipeline from forecasts to a solved problem.
fn run(
    net: &Network,
    fc: &[NodeForecast],
    levels: &ChanceLevels,
    cfg: &OpfConfig,
    strategy: BinaryStrategy,
) -> (OpfProblem, OpfSolution) {
    let unc = UncertaintySpec::from_forecasts(fc);
    let m = build_margins(net, &unc, &net.path_sensitivities().unwrap(), levels).unwrap();
    let p = assemble_problem(net, fc, &m, cfg).unwrap();
    let s = solve(&p, &backend(), strategy).unwrap();
    (p, s)
}

/// Bell-shaped day on the bundled feeder, restricted to `slots`.
fn bundled_forecasts(net: &Network, slots: &[usize], sigma_scale: f64) -> Vec<NodeForecast> {
    net.prosumer_buses()
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let d: Vec<f64> = slots
                .iter()
                .map(|&t| 0.6 + 0.8 * (-((t as f64 - 38.0) / 5.0).powi(2)).exp() + 0.02 * i as f64)
                .collect();
            let pv: Vec<f64> = slots
                .iter()
                .map(|&t| {
                    let h = (t as f64 - 24.0) / 7.0;
                    if (12..=36).contains(&t) {
                        5.0 * (-h * h).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let n = slots.len();
            NodeForecast {
                bus_id: net.buses[b].id,
                demand: GaussianProfile { mu: d, sigma: flat(0.2 * sigma_scale, n) },
                pv: GaussianProfile {
                    sigma: pv.iter().map(|p| 0.15 * p * sigma_scale).collect(),
                    mu: pv,
                },
            }
        })
        .collect()
}

/// Independent standard normal CDF: composite Simpson on the density.
fn cdf_oracle(z: f64) -> f64 {
    let n = 4000;
    let h = z / n as f64;
    let f = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(0.0) + f(z);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

// ---------------------------------------------------------------------------
// quantile

#[test]
fn quantile_inverts_an_independent_cdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        let z = normal_quantile(p).unwrap();
        assert!((cdf_oracle(z) - p).abs() <= 1e-9, "p {p} z {z}");
    }
    assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
}

#[test]
fn quantile_at_95_matches_bisection() {
    let (mut lo, mut hi) = (0.0, 4.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if cdf_oracle(mid) < 0.95 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z = normal_quantile(0.95).unwrap();
    assert!((z - lo).abs() < 1e-4 && (z - 1.6449).abs() < 1e-4);
}

#[test]
fn quantile_rejects_out_of_range() {
    for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
        assert!(matches!(normal_quantile(p), Err(OpfError::QuantileRange(_))));
    }
    let bad = ChanceLevels { xi_v: 0.5, ..Default::default() };
    assert!(matches!(bad.validate(), Err(OpfError::ChanceLevel { name: "xi_v", .. })));
}

// ---------------------------------------------------------------------------
// margins

fn single_line(r: f64, x: f64, pf: f64) -> Network {
    let mut a = assets(5.0, false);
    a.power_factor = pf;
    network(vec![bus(0, None), bus(1, Some(a))], vec![line(0, 1, r, x, 1.0)])
}

fn unc_single(sigma_kw: f64, slots: usize) -> UncertaintySpec {
    UncertaintySpec {
        bus_ids: vec![1],
        sigma_d: vec![flat(0.0, slots)],
        sigma_pv: vec![flat(sigma_kw, slots)],
        covariance: None,
    }
}

#[test]
fn single_line_margin_by_hand() {
    let net = single_line(0.02, 0.01, 1.0);
    let sigma_kw = net.pu_to_kw(0.1);
    let unc = unc_single(sigma_kw, 1);
    let m = build_margins(&net, &unc, &net.path_sensitivities().unwrap(), &ChanceLevels::default()).unwrap();
    let z = 1.6448536269514722;
    assert!((m.voltage[1][0] - z * 2.0 * 0.02 * 0.1).abs() < 1e-12);
    assert!((m.voltage[1][0] - 6.58e-3).abs() < 1e-5);
    assert_eq!(m.voltage[0][0], 0.0);
    assert!((m.flow[0][0] - z * 0.1).abs() < 1e-12);

    // implied violation rate of the linearized voltage rise
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 40_000;
    let hits = (0..n)
        .filter(|_| {
            let d: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            2.0 * 0.02 * 0.1 * d > m.voltage[1][0]
        })
        .count();
    let rate = hits as f64 / n as f64;
    assert!((rate - 0.05).abs() < 0.006, "{rate}");
}

#[test]
fn zero_sigma_gives_zero_margins_and_halving_halves() {
    let net = Network::bundled();
    let sens = net.path_sensitivities().unwrap();
    let fc = bundled_forecasts(&net, &[20, 24, 40], 1.0);
    let unc = UncertaintySpec::from_forecasts(&fc);
    let lv = ChanceLevels::default();
    let zero = build_margins(&net, &unc.scaled(0.0), &sens, &lv).unwrap();
    assert!(zero.voltage.iter().chain(&zero.flow).flatten().all(|&m| m == 0.0));
    let full = build_margins(&net, &unc, &sens, &lv).unwrap();
    let half = build_margins(&net, &unc.scaled(0.5), &sens, &lv).unwrap();
    for (a, b) in full.voltage.iter().chain(&full.flow).zip(half.voltage.iter().chain(&half.flow)) {
        for (x, y) in a.iter().zip(b) {
            assert!((0.5 * x - y).abs() <= 1e-15 + 1e-12 * x.abs());
        }
    }
    assert!(full.voltage.iter().skip(1).all(|r| r[0] > 0.0));
}

#[test]
fn covariance_margin_matches_quadratic_form() {
    let net = Network::bundled();
    let sens = net.path_sensitivities().unwrap();
    let pros = net.prosumer_buses();
    let np = pros.len();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Σ = B Bᵀ in kW²
    let b: Vec<Vec<f64>> = (0..np).map(|_| (0..np).map(|_| rng.random_range(-0.3..0.3)).collect()).collect();
    let cov: Vec<Vec<f64>> = (0..np)
        .map(|i| (0..np).map(|j| (0..np).map(|k| b[i][k] * b[j][k]).sum()).collect())
        .collect();
    let unc = UncertaintySpec {
        bus_ids: pros.iter().map(|&p| net.buses[p].id).collect(),
        sigma_d: vec![vec![0.0]; np],
        sigma_pv: vec![vec![0.0]; np],
        covariance: Some(vec![cov.clone()]),
    };
    let lv = ChanceLevels::default();
    let m = build_margins(&net, &unc, &sens, &lv).unwrap();
    let kappa = (1.0 - 0.81f64).sqrt() / 0.9;
    let z = 1.6448536269514722;
    let pu = net.kw_to_pu(1.0);
    for i in [3usize, 17, 25] {
        let a: Vec<f64> = pros.iter().map(|&k| 2.0 * (sens.r[i][k] + kappa * sens.x[i][k]) * pu).collect();
        let q: f64 = (0..np).map(|u| (0..np).map(|w| a[u] * cov[u][w] * a[w]).sum::<f64>()).sum();
        assert!((m.voltage[i][0] - z * q.sqrt()).abs() < 1e-12);
    }
    // a diagonal covariance reproduces the independent model
    let diag = UncertaintySpec {
        covariance: Some(vec![(0..np).map(|i| (0..np).map(|j| if i == j { 0.5 } else { 0.0 }).collect()).collect()]),
        ..unc.clone()
    };
    let ind = UncertaintySpec {
        sigma_d: vec![vec![0.5f64.sqrt()]; np],
        covariance: None,
        ..unc
    };
    let (a, b) = (
        build_margins(&net, &diag, &sens, &lv).unwrap(),
        build_margins(&net, &ind, &sens, &lv).unwrap(),
    );
    for (x, y) in a.voltage.iter().chain(&a.flow).flatten().zip(b.voltage.iter().chain(&b.flow).flatten()) {
        assert!((x - y).abs() < 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn margins_are_monotone(
        scale in 0.01f64..3.0,
        bump in 1.0f64..2.0,
        who in 0usize..25,
        xi in 0.01f64..0.4,
        dxi in 0.001f64..0.09,
    ) {
        let net = Network::bundled();
        let sens = net.path_sensitivities().unwrap();
        let fc = bundled_forecasts(&net, &[24], scale);
        let unc = UncertaintySpec::from_forecasts(&fc);
        let mut up = unc.clone();
        up.sigma_d[who][0] *= bump;
        up.sigma_pv[who][0] *= bump;
        let lv = ChanceLevels { xi_v: xi, xi_l: xi, xi_p: 0.05 };
        let strict = ChanceLevels { xi_v: xi - dxi * xi, xi_l: xi - dxi * xi, xi_p: 0.05 };
        let base = build_margins(&net, &unc, &sens, &lv).unwrap();
        let more = build_margins(&net, &up, &sens, &lv).unwrap();
        let tight = build_margins(&net, &unc, &sens, &strict).unwrap();
        for ((a, b), c) in base.voltage.iter().chain(&base.flow).flatten()
            .zip(more.voltage.iter().chain(&more.flow).flatten())
            .zip(tight.voltage.iter().chain(&tight.flow).flatten())
        {
            prop_assert!(*b >= *a - 1e-15);
            prop_assert!(*c >= *a - 1e-15);
        }
    }
}

// ---------------------------------------------------------------------------
// assembly

#[test]
fn variable_counts_match_an_independent_count() {
    let net = Network::bundled();
    let fc = bundled_forecasts(&net, &(0..48).collect::<Vec<_>>(), 1.0);
    let m = Margins::zeros(net.buses.len(), net.lines.len(), 48);
    let p = assemble_problem(&net, &fc, &m, &OpfConfig::default()).unwrap();
    assert_eq!(p.layout.num_binary(), 25 * 48);
    assert_eq!(p.binaries.len(), 1200);
    // distinct variable names: 3 per line, one voltage per non-slack bus,
    // five per prosumer, one fairness value, per slot
    let labels = p.column_labels();
    let mut names = std::collections::BTreeSet::new();
    let mut continuous = 0;
    for l in &labels {
        assert!(names.insert(l.clone()), "duplicate column {l}");
        if !l.starts_with("b[") {
            continuous += 1;
        }
    }
    let lines = labels.iter().filter(|l| l.starts_with("p[")).count();
    let volts = labels.iter().filter(|l| l.starts_with("v[")).count();
    assert_eq!(lines, 25 * 48);
    assert_eq!(volts, 25 * 48);
    assert_eq!(continuous, 48 * (3 * 25 + 25 + 5 * 25 + 1));
    // every column is constrained or priced
    let cp = p.cone_problem();
    let used = |j: usize| cp.a.col(j).next().is_some() || cp.g.col(j).next().is_some() || cp.c[j] != 0.0;
    assert!((0..cp.c.len()).all(used));
}

#[test]
fn assembly_rejects_bad_battery_state() {
    let mut a = assets(5.0, true);
    a.soc_init = 12.0;
    let net = network(vec![bus(0, None), bus(1, Some(a))], vec![line(0, 1, 0.01, 0.01, 1.0)]);
    let fc = vec![forecast(1, flat(1.0, 2), flat(2.0, 2), 0.0, 0.0)];
    let m = Margins::zeros(2, 1, 2);
    assert!(matches!(
        assemble_problem(&net, &fc, &m, &OpfConfig::default()),
        Err(OpfError::InfeasibleBounds(_))
    ));
    let missing: Vec<NodeForecast> = Vec::new();
    assert!(assemble_problem(&net, &missing, &m, &OpfConfig::default()).is_err());
}

fn star(leaf_order: &[u32], pv: &[f64]) -> (Network, Vec<NodeForecast>) {
    let mut buses = vec![bus(0, None)];
    let mut lines = Vec::new();
    for &id in leaf_order {
        buses.push(bus(id, Some(assets(6.0, true))));
        lines.push(line(0, id, 0.02, 0.015, 0.5));
    }
    let fc = leaf_order
        .iter()
        .map(|&id| {
            let p = pv[id as usize - 1];
            forecast(id, vec![0.8, 1.2, 0.5], vec![p, 0.5 * p, 0.0], 0.3, 0.4)
        })
        .collect();
    (network(buses, lines), fc)
}

/// Rows as sorted `label:coef` lists with their right-hand side and cone
/// kind; cone blocks are kept whole.
fn canonical(p: &OpfProblem) -> Vec<String> {
    let labels = p.column_labels();
    let cp = p.cone_problem();
    let rows_of = |m: &conic::CscMatrix| {
        let mut rows = vec![Vec::new(); m.nrows];
        for j in 0..m.ncols {
            for (i, v) in m.col(j) {
                rows[i].push(format!("{}:{v:.12e}", labels[j]));
            }
        }
        rows.into_iter()
            .map(|mut r| {
                r.sort();
                r.join(",")
            })
            .collect::<Vec<_>>()
    };
    let mut out: Vec<String> = rows_of(&cp.a)
        .into_iter()
        .zip(&cp.b)
        .map(|(r, b)| format!("eq {r} = {b:.12e}"))
        .collect();
    let g = rows_of(&cp.g);
    let mut off = 0;
    for cone in &cp.cones {
        match *cone {
            Cone::NonNeg(d) => {
                for i in off..off + d {
                    out.push(format!("le {} <= {:.12e}", g[i], cp.h[i]));
                }
                off += d;
            }
            Cone::Soc(d) => {
                let block: Vec<String> = (off..off + d).map(|i| format!("{} | {:.12e}", g[i], cp.h[i])).collect();
                out.push(format!("soc {}", block.join(" ; ")));
                off += d;
            }
        }
    }
    out.extend(labels.iter().zip(&cp.c).filter(|(_, c)| **c != 0.0).map(|(l, c)| format!("c {l}:{c:.12e}")));
    out.sort();
    out
}

#[test]
fn symmetric_star_is_permutation_invariant() {
    let pv = [4.0, 4.0, 4.0];
    let (a, fa) = star(&[1, 2, 3], &pv);
    let (b, fb) = star(&[3, 1, 2], &pv);
    let unc = UncertaintySpec::from_forecasts(&fa);
    let ma = build_margins(&a, &unc, &a.path_sensitivities().unwrap(), &ChanceLevels::default()).unwrap();
    let unc_b = UncertaintySpec::from_forecasts(&fb);
    let mb = build_margins(&b, &unc_b, &b.path_sensitivities().unwrap(), &ChanceLevels::default()).unwrap();
    let pa = assemble_problem(&a, &fa, &ma, &OpfConfig::default()).unwrap();
    let pb = assemble_problem(&b, &fb, &mb, &OpfConfig::default()).unwrap();
    assert_eq!(canonical(&pa), canonical(&pb));

    // identical leaves: swapping which leaf is which leaves the problem fixed
    // up to relabeling, so the optimum is equal across leaves
    let sol = solve(&pa, &backend(), BinaryStrategy::RoundAndFix).unwrap();
    let env = extract_envelopes(&sol, &pa).unwrap();
    for t in 0..env.slots() {
        assert!(a.kw_to_pu(env.spread_kw(t)) <= 1e-4, "slot {t} spread {}", env.spread_kw(t));
    }
}

// ---------------------------------------------------------------------------
// 2-bus analytic family

/// Independent exact 2-bus AC solve: bus 1 injects (pp, qq) pu toward the
/// slack. Returns (v1, sending p, sending q).
fn two_bus_ac(r: f64, x: f64, v0: f64, pp: f64, qq: f64) -> (f64, f64, f64) {
    let mut v1 = v0;
    let (mut p, mut q) = (0.0, 0.0);
    for _ in 0..200 {
        let ell = (pp * pp + qq * qq) / v1;
        p = -pp + r * ell;
        q = -qq + x * ell;
        v1 = v0 - 2.0 * (r * p + x * q) + (r * r + x * x) * ell;
    }
    (v1, p, q)
}

struct TwoBus {
    r: f64,
    x: f64,
    s_max: f64,
    v_max: f64,
    pv: f64,
    cap_kw: f64,
}

fn two_bus_net(c: &TwoBus) -> Network {
    let mut b1 = bus(1, Some(assets(10.0, false)));
    b1.v_max = c.v_max;
    network(vec![bus(0, None), b1], vec![line(0, 1, c.r, c.x, c.s_max)])
}

/// Grid search over curtailed PV for the largest feasible export (pu).
fn two_bus_oracle(c: &TwoBus) -> f64 {
    let net = two_bus_net(c);
    let kappa = assets(10.0, false).kappa();
    let steps = 200_000;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=steps {
        let pv = net.kw_to_pu(c.pv) * i as f64 / steps as f64;
        let (pp, qq) = (pv, kappa * pv);
        if pp > net.kw_to_pu(c.cap_kw) + 1e-12 {
            break;
        }
        let (v1, p, q) = two_bus_ac(c.r, c.x, 1.0, pp, qq);
        let vhat = 1.0 + 2.0 * (c.r * pp + c.x * qq);
        let ok = v1 >= net.buses[1].v_min
            && vhat <= c.v_max
            && p.hypot(q) <= c.s_max
            && pp.hypot(qq) <= c.s_max;
        if ok {
            best = best.max(pp);
        }
    }
    best
}

fn two_bus_solve(c: &TwoBus) -> (OpfProblem, OpfSolution) {
    let net = two_bus_net(c);
    let fc = vec![forecast(1, vec![0.0], vec![c.pv], 0.0, 0.0)];
    let cfg = OpfConfig { export_cap_kw: c.cap_kw, ..Default::default() };
    run(&net, &fc, &ChanceLevels::default(), &cfg, BinaryStrategy::RoundAndFix)
}

#[test]
fn two_bus_slack_limits_export_all_surplus() {
    let c = TwoBus { r: 0.01, x: 0.01, s_max: 1.0, v_max: 1.2, pv: 4.0, cap_kw: 10.0 };
    let (p, s) = two_bus_solve(&c);
    let env = extract_envelopes(&s, &p).unwrap();
    assert!((env.export_kw[0][0] - 4.0).abs() < 1e-5);
    let c = TwoBus { pv: 9.0, cap_kw: 6.0, ..c };
    let (p, s) = two_bus_solve(&c);
    let env = extract_envelopes(&s, &p).unwrap();
    assert!((env.export_kw[0][0] - 6.0).abs() < 1e-5);
}

#[test]
fn two_bus_family_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..20 {
        let c = TwoBus {
            r: rng.random_range(0.05..0.4),
            x: rng.random_range(0.02..0.3),
            s_max: rng.random_range(0.03..0.15),
            v_max: rng.random_range(1.005..1.05),
            pv: rng.random_range(1.0..9.5),
            cap_kw: rng.random_range(3.0..10.0),
        };
        let oracle = two_bus_oracle(&c);
        let (p, s) = two_bus_solve(&c);
        assert!(s.is_optimal(), "case {case}: {}", s.status);
        assert!(s.pres <= 1e-6 && s.dres <= 1e-6, "case {case}");
        assert!((s.objective - oracle).abs() <= 1e-4, "case {case}: {} vs {oracle}", s.objective);
        assert!(verify_relaxation(&s, &p).is_exact(), "case {case}");
    }
}

#[test]
fn two_bus_voltage_cap_matches_closed_form() {
    let c = TwoBus { r: 0.3, x: 0.1, s_max: 1.0, v_max: 1.02, pv: 9.0, cap_kw: 10.0 };
    let (p, s) = two_bus_solve(&c);
    let kappa = assets(10.0, false).kappa();
    let closed = (c.v_max - 1.0) / (2.0 * (c.r + kappa * c.x));
    assert!(closed < p.network.kw_to_pu(9.0));
    assert!((s.objective - closed).abs() < 1e-6, "{} vs {closed}", s.objective);
    let rep = verify_relaxation(&s, &p);
    assert!(rep.is_exact() && rep.ac_voltage_mismatch < 1e-6);
}

#[test]
fn rewarding_losses_is_flagged_as_inexact() {
    let c = TwoBus { r: 0.05, x: 0.05, s_max: 0.2, v_max: 1.1, pv: 5.0, cap_kw: 10.0 };
    let net = two_bus_net(&c);
    let fc = vec![forecast(1, vec![0.0], vec![c.pv], 0.0, 0.0)];
    let cfg = OpfConfig { loss_weight: -10.0, ..Default::default() };
    let (p, s) = run(&net, &fc, &ChanceLevels::default(), &cfg, BinaryStrategy::Relaxed);
    assert!(s.is_optimal());
    let rep = verify_relaxation(&s, &p);
    assert!(!rep.is_exact() && rep.max_residual > 1e-5);
    assert!(rep.min_residual >= -1e-8);
}

#[test]
fn zero_flow_solution_has_zero_residual() {
    let net = single_line(0.02, 0.01, 0.9);
    let mut net = net;
    net.buses[1].prosumer = Some(assets(0.0, false));
    let fc = vec![forecast(1, vec![0.0, 0.0], vec![0.0, 0.0], 0.0, 0.0)];
    let (p, s) = run(&net, &fc, &ChanceLevels::default(), &OpfConfig::default(), BinaryStrategy::RoundAndFix);
    assert!(s.is_optimal());
    assert!(s.objective.abs() < 1e-7);
    let lay = &p.layout;
    for t in 0..2 {
        assert!(s.x[lay.p(t, 0)].abs() < 1e-6 && s.x[lay.q(t, 0)].abs() < 1e-6 && s.x[lay.ell(t, 0)].abs() < 1e-6);
    }
    let rep = verify_relaxation(&s, &p);
    assert!(rep.max_residual.abs() < 1e-6 && rep.is_exact());
}

#[test]
fn empty_star_exports_nothing() {
    let mut buses = vec![bus(0, None)];
    let mut lines = Vec::new();
    for id in 1..=3 {
        buses.push(bus(id, Some(assets(0.0, false))));
        lines.push(line(0, id, 0.02, 0.02, 0.3));
    }
    let net = network(buses, lines);
    let fc: Vec<NodeForecast> = (1..=3).map(|id| forecast(id, flat(0.0, 4), flat(0.0, 4), 0.0, 0.0)).collect();
    let (p, s) = run(&net, &fc, &ChanceLevels::default(), &OpfConfig::default(), BinaryStrategy::RoundAndFix);
    assert!(s.is_optimal());
    assert!(s.objective.abs() < 1e-7);
    let env = extract_envelopes(&s, &p).unwrap();
    assert!(env.export_kw.iter().flatten().all(|e| e.abs() < 1e-5));
}

// ---------------------------------------------------------------------------
// bundled feeder

#[test]
fn night_slot_floors_at_battery_discharge() {
    let net = Network::bundled();
    let d = 1.2;
    let fc: Vec<NodeForecast> = net
        .prosumer_buses()
        .iter()
        .map(|&b| forecast(net.buses[b].id, vec![d], vec![0.0], 0.0, 0.0))
        .collect();
    let (p, s) = run(&net, &fc, &ChanceLevels::default(), &OpfConfig::default(), BinaryStrategy::RoundAndFix);
    let env = extract_envelopes(&s, &p).unwrap();
    // 3.5 kW for half an hour drains 1.84 kWh of the 3 kWh above soc_min
    for k in 0..env.bus_ids.len() {
        assert!((env.export_kw[k][0] - (3.5 - d)).abs() < 1e-3, "{}", env.export_kw[k][0]);
        assert!(env.pv_kw[k][0].abs() < 1e-6);
    }
    assert!(s.complementarity_violations.is_empty());
}

#[test]
fn doubling_sigma_never_raises_the_objective() {
    let net = Network::bundled();
    let slots = [14, 20, 24, 30, 44];
    let cfg = OpfConfig::default();
    let lv = ChanceLevels::default();
    let mut prev = f64::INFINITY;
    for scale in [0.0, 1.0, 2.0, 4.0] {
        let fc = bundled_forecasts(&net, &slots, scale);
        let (_, s) = run(&net, &fc, &lv, &cfg, BinaryStrategy::RoundAndFix);
        assert!(s.is_optimal());
        assert!(s.objective <= prev + 1e-7, "scale {scale}: {} > {prev}", s.objective);
        prev = s.objective;
    }
}

#[test]
fn zero_sigma_is_the_deterministic_problem() {
    let net = Network::bundled();
    let slots = [22, 26];
    let fc = bundled_forecasts(&net, &slots, 0.0);
    let cfg = OpfConfig::default();
    let (p, s) = run(&net, &fc, &ChanceLevels::default(), &cfg, BinaryStrategy::RoundAndFix);
    let det = assemble_problem(&net, &fc, &Margins::zeros(26, 25, 2), &cfg).unwrap();
    assert_eq!(canonical(&p), canonical(&det));
    let sd = solve(&det, &backend(), BinaryStrategy::RoundAndFix).unwrap();
    assert_eq!(s.objective, sd.objective);
}

#[test]
fn monte_carlo_zero_sigma_and_inflation() {
    let net = Network::bundled();
    let slots = [20, 24, 28];
    let lv = ChanceLevels::default();
    let cfg = OpfConfig::default();

    let fc0 = bundled_forecasts(&net, &slots, 0.0);
    let (p0, s0) = run(&net, &fc0, &lv, &cfg, BinaryStrategy::RoundAndFix);
    let env0 = extract_envelopes(&s0, &p0).unwrap();
    let unc0 = UncertaintySpec::from_forecasts(&fc0);
    let mc0 = monte_carlo_validate(&net, &env0, &unc0, 1000, 3).unwrap();
    assert_eq!(mc0.max_rate(), 0.0);
    assert!(mc0.divergences.iter().all(|&d| d == 0));

    let fc = bundled_forecasts(&net, &slots, 1.0);
    let unc = UncertaintySpec::from_forecasts(&fc);
    let (p, s) = run(&net, &fc, &lv, &cfg, BinaryStrategy::RoundAndFix);
    let env = extract_envelopes(&s, &p).unwrap();
    let mc = monte_carlo_validate(&net, &env, &unc, 2000, 3).unwrap();
    assert!(mc.max_rate() <= 0.06 + 2.0 * mc.rows.iter().map(|r| r.ci_halfwidth).fold(0.0, f64::max));
    let inflated = monte_carlo_validate(&net, &env.scaled_exports(1.5), &unc, 2000, 3).unwrap();
    assert!(inflated.total_violations() > mc.total_violations());

    // same seed, same summary
    assert_eq!(monte_carlo_validate(&net, &env, &unc, 1000, 8).unwrap(), monte_carlo_validate(&net, &env, &unc, 1000, 8).unwrap());
    assert!(matches!(monte_carlo_validate(&net, &env, &unc, 999, 8), Err(OpfError::TooFewDraws(999))));

    let mut buf = Vec::new();
    mc.write_csv(&mut buf, 0).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("constraint,slot,violation_rate,ci_halfwidth\n"));
    assert_eq!(text.lines().count(), 1 + 3 * (2 * 25 + 25));
}

#[test]
fn gamma_is_the_minimum_export_and_duals_certify_it() {
    let net = Network::bundled();
    let fc = bundled_forecasts(&net, &[10, 18, 24, 40], 1.0);
    let (p, s) = run(&net, &fc, &ChanceLevels::default(), &OpfConfig::default(), BinaryStrategy::RoundAndFix);
    let env = extract_envelopes(&s, &p).unwrap();
    let cap = p.network.kw_to_pu(p.config.export_cap_kw);
    let duals = s.gamma_duals(&p);
    for t in 0..env.slots() {
        assert!((env.gamma_kw[t] - env.min_export_kw(t)).abs() < 1e-5);
        assert!(env.export_kw.iter().all(|e| e[t] <= p.config.export_cap_kw + 1e-6));
        // stationarity in γ_t: the γ-row multipliers sum to one
        let sum: f64 = duals[t].iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "slot {t}: {sum}");
        let all_capped = (0..env.bus_ids.len()).all(|k| s.x[p.layout.exp(t, k)] >= cap - 1e-6);
        let gamma = s.x[p.layout.gamma(t)];
        let certified = (0..env.bus_ids.len())
            .any(|k| duals[t][k] > 1e-6 && s.x[p.layout.exp(t, k)] - gamma <= 1e-6);
        assert!(all_capped || certified, "slot {t}");
    }
}

#[test]
fn relabeling_buses_permutes_envelopes() {
    let pv = [5.0, 3.0, 4.5];
    let (a, fa) = star(&[1, 2, 3], &pv);
    let (b, fb) = star(&[2, 3, 1], &pv);
    let lv = ChanceLevels::default();
    let cfg = OpfConfig::default();
    let (pa, sa) = run(&a, &fa, &lv, &cfg, BinaryStrategy::RoundAndFix);
    let (pb, sb) = run(&b, &fb, &lv, &cfg, BinaryStrategy::RoundAndFix);
    let (ea, eb) = (extract_envelopes(&sa, &pa).unwrap(), extract_envelopes(&sb, &pb).unwrap());
    for (ka, id) in ea.bus_ids.iter().enumerate() {
        let kb = eb.bus_ids.iter().position(|x| x == id).unwrap();
        for t in 0..ea.slots() {
            assert!((ea.export_kw[ka][t] - eb.export_kw[kb][t]).abs() < 1e-4);
        }
    }
}

#[test]
fn infeasible_flow_tightening_is_named() {
    let c = TwoBus { r: 0.01, x: 0.01, s_max: 0.04, v_max: 1.1, pv: 4.0, cap_kw: 10.0 };
    let net = two_bus_net(&c);
    // demand of 3 kW must be imported through a line whose tightened limit
    // drops below it
    let fc = vec![forecast(1, vec![3.0], vec![0.0], 1.5, 0.0)];
    let lv = ChanceLevels { xi_l: 0.01, ..Default::default() };
    let (_, s) = run(&net, &fc, &lv, &OpfConfig::default(), BinaryStrategy::RoundAndFix);
    assert_eq!(s.status, OpfStatus::Infeasible);
    assert_eq!(s.hint, Some(InfeasibilityHint::FlowMargins));
}

// ---------------------------------------------------------------------------
// binaries

fn random_battery_instance(rng: &mut ChaCha8Rng) -> (Network, Vec<NodeForecast>) {
    let slots = 4;
    let mut buses = vec![bus(0, None), bus(1, None)];
    let mut lines = vec![line(0, 1, 0.01, 0.01, 0.3)];
    for id in 2..=3 {
        let mut a = assets(rng.random_range(2.0..8.0), true);
        a.soc_min = rng.random_range(0.0..2.0);
        a.soc_max = a.soc_min + rng.random_range(1.0..4.0);
        a.soc_init = rng.random_range(a.soc_min..a.soc_max);
        a.eta = rng.random_range(0.8..0.99);
        buses.push(bus(id, Some(a)));
        lines.push(line(1, id, rng.random_range(0.01..0.2), rng.random_range(0.01..0.1), rng.random_range(0.04..0.2)));
    }
    let fc = (2..=3)
        .map(|id| {
            let d: Vec<f64> = (0..slots).map(|_| rng.random_range(0.0..3.0)).collect();
            let pv: Vec<f64> = (0..slots).map(|_| rng.random_range(0.0..8.0)).collect();
            forecast(id, d, pv, rng.random_range(0.0..0.5), rng.random_range(0.0..0.5))
        })
        .collect();
    (network(buses, lines), fc)
}

#[test]
fn rounding_matches_enumeration_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let lv = ChanceLevels::default();
    let cfg = OpfConfig::default();
    for case in 0..50 {
        let (net, fc) = random_battery_instance(&mut rng);
        let unc = UncertaintySpec::from_forecasts(&fc);
        let m = build_margins(&net, &unc, &net.path_sensitivities().unwrap(), &lv).unwrap();
        let p = assemble_problem(&net, &fc, &m, &cfg).unwrap();
        assert_eq!(p.binaries.len(), 8);
        let h = solve(&p, &backend(), BinaryStrategy::RoundAndFix).unwrap();
        let e = solve(&p, &backend(), BinaryStrategy::Enumerate).unwrap();
        assert_eq!(h.status, e.status, "case {case}");
        if e.is_optimal() {
            assert!((h.objective - e.objective).abs() <= 1e-3, "case {case}: {} vs {}", h.objective, e.objective);
            assert!(e.complementarity_violations.is_empty());
        }
    }
}

#[test]
fn enumeration_limit_is_enforced() {
    let net = Network::bundled();
    let fc = bundled_forecasts(&net, &[24], 1.0);
    let (p, _) = {
        let unc = UncertaintySpec::from_forecasts(&fc);
        let m = build_margins(&net, &unc, &net.path_sensitivities().unwrap(), &ChanceLevels::default()).unwrap();
        (assemble_problem(&net, &fc, &m, &OpfConfig::default()).unwrap(), ())
    };
    assert!(matches!(solve(&p, &backend(), BinaryStrategy::Enumerate), Err(OpfError::Config(_))));
}

#[test]
fn bundled_day_is_exact_and_calibrated() {
    let net = Network::bundled();
    let slots: Vec<usize> = (0..48).collect();
    let fc = bundled_forecasts(&net, &slots, 1.0);
    let (p, s) = run(&net, &fc, &ChanceLevels::default(), &OpfConfig::default(), BinaryStrategy::RoundAndFix);
    assert!(s.is_optimal());
    assert!(s.pres <= 1e-6 && s.dres <= 1e-6 && s.gap <= 1e-6);
    let rep = verify_relaxation(&s, &p);
    assert!(rep.is_exact(), "max residual {}", rep.max_residual);
    assert!(rep.min_residual >= -1e-8);
    assert!(rep.ac_diverged.is_empty() && rep.ac_voltage_mismatch < 1e-6 && rep.ac_flow_mismatch < 1e-6);
    let env = extract_envelopes(&s, &p).unwrap();
    let mc = monte_carlo_validate(&net, &env, &UncertaintySpec::from_forecasts(&fc), 10_000, 1).unwrap();
    assert!(mc.max_rate() <= 0.06, "{}", mc.max_rate());
}
