use std::path::PathBuf;

use nalgebra::DMatrix;
use voltguard::eval::{evaluate, EvalConfig};
use voltguard::grid::{build_rx_matrices, load_network, GridMatrices, RadialNetwork};
use voltguard::lyapunov::{certify, certify_exponential};
use voltguard::policy::{stability_gain_bound, MonotonePolicy, PolicyInit};
use voltguard::rl::{train, TrainConfig};
use voltguard::scenario::{generate, load_timeseries, replay, ScenarioConfig, ScenarioKind, TimeSeries};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn open(name: &str) -> (RadialNetwork, GridMatrices) {
    let net = load_network(data(name)).unwrap();
    let gm = build_rx_matrices(&net).unwrap();
    (net, gm)
}

#[test]
fn chain_file_matrices_and_gain_bound() {
    let (net, gm) = open("chain.json");
    let expect = DMatrix::from_row_slice(2, 2, &[0.2, 0.2, 0.2, 0.6]);
    assert!((&gm.x - expect).amax() < 1e-12);
    // sigma_min = 0.4 - sqrt(0.08), sigma_max = 0.4 + sqrt(0.08)
    let (lo, hi) = (0.4 - 0.08f64.sqrt(), 0.4 + 0.08f64.sqrt());
    let g = stability_gain_bound(&gm.x_sub(&net.controlled_indices())).unwrap();
    assert!((g - 2.0 * lo / (hi * hi)).abs() < 1e-12);
    assert!((g - 0.5026).abs() < 1e-4, "{g}");
}

#[test]
fn fresh_policy_certifies_on_chain_and_exponential_is_tighter() {
    let (net, gm) = open("chain.json");
    let p = MonotonePolicy::init(&net, &PolicyInit::default()).unwrap();
    let c = certify(&gm, &net, &p, 0.01).unwrap();
    assert!(c.passed);
    let e = certify_exponential(&gm, &net, &p, 0.01, 0.75).unwrap();
    assert!(e.dt_max < c.dt_max);
    assert!(e.min_eig_upper < c.min_eig_upper);
    let over = certify(&gm, &net, &p, c.dt_max * 1.01).unwrap();
    assert!(!over.passed);
}

#[test]
fn bundled_three_phase_feeder_is_certifiable() {
    let (net, gm) = open("feeder13_3ph.json");
    assert!(gm.certificate.pd);
    assert_eq!(net.controlled_indices().len(), 3 * net.controlled().len());
    let p = MonotonePolicy::init(&net, &PolicyInit::default()).unwrap();
    assert!(certify(&gm, &net, &p, 1.0).unwrap().passed);
}

#[test]
fn two_bus_toy_training_stabilizes_held_out_scenarios() {
    let (net, gm) = open("chain.json");
    let cfg = TrainConfig {
        episodes: 500,
        seed: 3,
        checkpoint_every: 100,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    let out = train(&net, &gm, &cfg, |ep, p| {
        assert!(certify(&gm, &net, p, cfg.dt).unwrap().passed, "checkpoint {ep}");
        seen.push(ep);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![0, 100, 200, 300, 400, 500]);
    assert!(certify(&gm, &net, &out.policy, cfg.dt).unwrap().passed);
    let scenarios = generate(&net, &gm, &ScenarioConfig::new(ScenarioKind::Mixed, 100, 77)).unwrap();
    let rep = evaluate(&net, &gm, &out.policy, &scenarios, &EvalConfig::default()).unwrap();
    assert_eq!(rep.scenarios.iter().filter(|s| s.stabilized).count(), 100);
}

#[test]
fn replay_of_bundled_profile_stays_in_band() {
    let (net, gm) = open("feeder13.json");
    let ts = load_timeseries(data("profile_feeder13.csv")).unwrap();
    let p = MonotonePolicy::init(
        &net,
        &PolicyInit {
            slope: 2.0,
            ..PolicyInit::default()
        },
    )
    .unwrap();
    assert!(certify(&gm, &net, &p, 1.0).unwrap().passed);
    let rep = replay(&net, &p, &ts, 1.0, 4).unwrap();
    assert!(rep.failures.is_empty());
    let frac = rep.in_band_fraction_after_recovery(&net, 1e-3).unwrap();
    assert!(frac >= 0.99, "{frac}");
    // Without control the profile does leave the band.
    let limits = net.state_limits();
    let idx = net.controlled_indices();
    let outside = rep
        .uncontrolled
        .iter()
        .any(|v| v.iter().zip(&idx).any(|(x, &i)| !limits[i].contains(*x)));
    assert!(outside);
}

#[test]
fn all_zero_series_gives_flat_traces() {
    let (net, _) = open("feeder13.json");
    let ts = load_timeseries(data("profile_feeder13.csv")).unwrap();
    let zero = |m: &Vec<Vec<f64>>| m.iter().map(|r| vec![0.0; r.len()]).collect();
    let flat = TimeSeries {
        load_p_kw: zero(&ts.load_p_kw),
        load_q_kvar: zero(&ts.load_q_kvar),
        pv_p_kw: zero(&ts.pv_p_kw),
        ..ts
    };
    let p = MonotonePolicy::init(&net, &PolicyInit::default()).unwrap();
    let rep = replay(&net, &p, &flat, 1.0, 4).unwrap();
    for (u, c) in rep.uncontrolled.iter().zip(&rep.controlled) {
        assert!(u.iter().chain(c).all(|v| (v - net.v0()).abs() < 1e-12));
    }
    assert!(rep.actions.iter().flatten().all(|a| *a == 0.0));
}
