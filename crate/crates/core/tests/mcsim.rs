use std::sync::Arc;

use eqhjb::hjbgrid::{classical_hjb, HjbGrids, HjbOptions};
use eqhjb::lq::{lq_equilibrium_feedback, solve_riccati_volterra, LQModel};
use eqhjb::mcsim::*;
use eqhjb::merton::{merton_equilibrium_feedback, solve_merton_equilibrium};
use eqhjb::model::{ControlSet, GeneralModel};
use eqhjb::oracle::{lq_inconsistency_gap, lq_optimal_pair, lq_riccati_closed_form, LqExampleParams, MertonParams};
use eqhjb::{Error, TimeGrid};
use smallvec::smallvec;

fn lq_example(sigma: f64, g: impl Fn(f64) -> f64 + Send + Sync + 'static) -> GeneralModel {
    GeneralModel::scalar_lq(
        1.0,
        Arc::new(|_| 0.0),
        Arc::new(|_| 1.0),
        Arc::new(move |_| sigma),
        Arc::new(|_, _| 0.0),
        Arc::new(|_, _| 1.0),
        Arc::new(g),
    )
    .unwrap()
}

/// `ū(s) = −P(s, t0)X(s)`, the control that is optimal from time `t0`.
fn precommitted(p: &LqExampleParams, t0: f64) -> Policy {
    let p = p.clone();
    Policy::feedback(move |s, x| smallvec![-lq_riccati_closed_form(&p, t0, s.max(t0)).unwrap() * x])
}

#[test]
fn frozen_dynamics_keep_paths_constant() {
    let model = GeneralModel::new("still", 1.0, ControlSet::interval(0.0, 1.0).unwrap()).unwrap();
    let policy = Policy::feedback(|_, _| smallvec![0.5]);
    let bundle = simulate_paths(&model, &policy, 0.0, 1.7, &SimOptions::new(16, 0.01, 3)).unwrap();
    assert!(bundle.states.iter().all(|&x| x == 1.7));
    let unit = model.clone().with_terminal_cost(|_, _| 1.0);
    let est = estimate_cost(&unit, &bundle, 0.0).unwrap();
    assert_eq!((est.mean, est.std_error), (1.0, 0.0));
    let check = moment_bound_check(&bundle, 2).unwrap();
    assert!(check.pass);
    assert!((check.worst_ratio - 1.7f64.powi(2) / (1.0 + 1.7f64.powi(2))).abs() < 1e-12);
}

#[test]
fn identical_seeds_give_identical_bundles() {
    let model = lq_example(0.5, |t| 1.0 + t);
    let p = LqExampleParams::new(0.5, 1.0, |t| 1.0 + t).unwrap();
    let policy = precommitted(&p, 0.0);
    let opts = SimOptions::new(500, 0.01, 42);
    let a = simulate_paths(&model, &policy, 0.0, 1.0, &opts).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = single.install(|| simulate_paths(&model, &policy, 0.0, 1.0, &opts).unwrap());
    assert_eq!(a.states, b.states);
    assert_eq!(a.controls, b.controls);
    let ca = estimate_cost(&model, &a, 0.0).unwrap();
    let cb = single.install(|| estimate_cost(&model, &b, 0.0).unwrap());
    assert_eq!(ca, cb);
    let c = simulate_paths(&model, &policy, 0.0, 1.0, &SimOptions::new(500, 0.01, 43)).unwrap();
    assert_ne!(a.states, c.states);
}

#[test]
fn closed_loop_terminal_mean_matches_closed_form() {
    let sigma = 0.5;
    let p = LqExampleParams::new(sigma, 1.0, |t| 1.0 + t).unwrap();
    let model = lq_example(sigma, |t| 1.0 + t);
    let opts = SimOptions::new(20_000, 1e-3, 7).with_scheme(Scheme::LogEuler);
    let run = simulate_costs(&model, &precommitted(&p, 0.0), 0.0, Start::Common(1.0), &[0.0], &opts).unwrap();
    let est = CostEstimate::from_samples(&run.terminal, 0.0);
    // E e^{σW(T) − σ²T/2} = 1, so the mean is the optimal state at w = σT/2
    let want = lq_optimal_pair(&p, 0.0, 1.0, 1.0, 0.5 * sigma).unwrap().0;
    assert!((est.mean - want).abs() <= 3.0 * est.std_error, "{est:?} vs {want}");

    let cost = CostEstimate::from_samples(&run.costs[0], 0.0);
    let want = lq_riccati_closed_form(&p, 0.0, 0.0).unwrap();
    assert!((cost.mean - want).abs() <= 3.0 * cost.std_error, "{cost:?} vs {want}");
}

#[test]
fn paired_gap_matches_closed_form() {
    let sigma = 1.0;
    let p = LqExampleParams::new(sigma, 1.0, |t| 1.0 + t).unwrap();
    let model = lq_example(sigma, |t| 1.0 + t);
    let opts = SimOptions::new(20_000, 1e-3, 11).with_scheme(Scheme::LogEuler);
    let gap = inconsistency_gap(&model, &precommitted(&p, 0.0), &precommitted(&p, 0.5), 0.0, 0.5, 1.0, &opts).unwrap();
    let oracle: Vec<f64> = gap.increments.iter().map(|&w| lq_inconsistency_gap(&p, 0.0, 0.5, 1.0, w).unwrap()).collect();
    let paired = CostEstimate::paired(&gap.gaps, &oracle, 0.5);
    assert!(gap.estimate.mean > 0.0);
    assert!(paired.mean.abs() <= 3.0 * paired.std_error, "{paired:?}");
}

#[test]
fn pairing_reduces_variance() {
    let sigma = 1.0;
    let p = LqExampleParams::new(sigma, 1.0, |t| 1.0 + t).unwrap();
    let model = lq_example(sigma, |t| 1.0 + t);
    let (a, b) = (precommitted(&p, 0.0), precommitted(&p, 0.5));
    let mut ratios: Vec<f64> = (0..100u64)
        .map(|trial| {
            let opts = SimOptions::new(200, 1e-2, 1000 + trial).with_scheme(Scheme::LogEuler);
            let other = SimOptions { seed: 5000 + trial, ..opts.clone() };
            let ca = simulate_costs(&model, &a, 0.5, Start::Common(1.0), &[0.5], &opts).unwrap();
            let cb = simulate_costs(&model, &b, 0.5, Start::Common(1.0), &[0.5], &opts).unwrap();
            let cu = simulate_costs(&model, &b, 0.5, Start::Common(1.0), &[0.5], &other).unwrap();
            let paired = CostEstimate::paired(&ca.costs[0], &cb.costs[0], 0.5).std_error;
            let unpaired = CostEstimate::paired(&ca.costs[0], &cu.costs[0], 0.5).std_error;
            paired / unpaired
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[50] < 1.0, "median SE ratio {}", ratios[50]);
}

#[test]
fn merton_wealth_stays_positive() {
    let params = MertonParams::hyperbolic(0.03, 0.08, 0.25, 0.5, 0.8, 1.0).unwrap();
    let eq = Arc::new(solve_merton_equilibrium(&params, &TimeGrid::uniform(1.0, 200).unwrap(), 1e-10, 1000).unwrap());
    let (r, mu, sig) = (0.03, 0.08, 0.25);
    let model = GeneralModel::new("merton-wealth", 1.0, ControlSet::boxed(vec![-1e6, 0.0], vec![1e6, 1e6]).unwrap())
        .unwrap()
        .with_drift(move |_, x, u| r * x + (mu - r) * u[0] - u[1])
        .with_controlled_diffusion(move |_, _, u| sig * u[0])
        .with_multiplicative_dynamics(true);
    let policy = Policy::feedback(move |t, x| {
        let (u, c) = merton_equilibrium_feedback(&eq, t, x).unwrap();
        smallvec![u, c]
    });
    let opts = SimOptions::new(2_000, 1e-3, 5).with_scheme(Scheme::LogEuler);
    let bundle = simulate_paths(&model, &policy, 0.0, 1.0, &opts).unwrap();
    assert!(bundle.states.iter().all(|&x| x > 0.0));
}

#[test]
fn spike_with_the_feedback_itself_changes_nothing() {
    let model = lq_example(0.5, |t| 1.0 + t);
    let psi = Policy::feedback(|_, _| smallvec![-0.25]);
    let report =
        spike_deviation_test(&model, &psi, 0.0, 1.0, &[0.2, 0.1], &[smallvec![-0.25]], &SimOptions::new(500, 1e-2, 1))
            .unwrap();
    assert!(report.rows.iter().all(|r| r.delta.mean == 0.0 && r.delta.std_error == 0.0));
}

#[test]
fn lq_equilibrium_resists_spikes() {
    let sigma = 0.5;
    let lq = LQModel::scalar_multiplicative(sigma, 1.0, |t| 1.0 + t);
    let sol = Arc::new(solve_riccati_volterra(&lq, &TimeGrid::uniform(1.0, 200).unwrap()).unwrap());
    let psi = Policy::feedback(move |t, x| smallvec![lq_equilibrium_feedback(&sol, t, &[x])[0]]);
    let model = lq_example(sigma, |t| 1.0 + t);
    let devs: Vec<_> = [-2.0, -1.0, 0.0, 1.0].iter().map(|&u| smallvec![u]).collect();
    let opts = SimOptions::new(4_000, 1e-3, 9);
    let report = spike_deviation_test(&model, &psi, 0.0, 1.0, &[0.2, 0.1, 0.05], &devs, &opts).unwrap();
    assert!(report.pass, "{report:#?}");
}

#[test]
fn moment_constant_carries_to_the_full_horizon() {
    let sigma = 0.5;
    let p = LqExampleParams::new(sigma, 1.0, |t| 1.0 + t).unwrap();
    let model = lq_example(sigma, |t| 1.0 + t);
    let bundle = simulate_paths(&model, &precommitted(&p, 0.0), 0.0, 1.0, &SimOptions::new(2_000, 1e-3, 2)).unwrap();
    assert!(moment_bound_check(&bundle, 2).unwrap().pass);
    assert!(moment_bound_check(&bundle, 4).unwrap().pass);
    assert!(moment_bound_check(&bundle, 3).is_err());
}

#[test]
fn cubic_drift_trips_the_moment_check() {
    // X' = X³ from X = 1 explodes at t = 1/2
    let model = GeneralModel::new("cubic", 0.48, ControlSet::interval(0.0, 1.0).unwrap())
        .unwrap()
        .with_drift(|_, x, _| x * x * x)
        .with_diffusion(|_, _| 0.01);
    let zero = Policy::feedback(|_, _| smallvec![0.0]);
    let bundle = simulate_paths(&model, &zero, 0.0, 1.0, &SimOptions::new(200, 1e-4, 3)).unwrap();
    let check = moment_bound_check(&bundle, 2).unwrap();
    assert!(!check.pass);
    assert!(check.violation.unwrap() < 0.48);

    let long = GeneralModel::new("cubic", 1.0, ControlSet::interval(0.0, 1.0).unwrap())
        .unwrap()
        .with_drift(|_, x, _| x * x * x);
    let err = simulate_paths(&long, &zero, 0.0, 1.0, &SimOptions::new(4, 1e-3, 3)).unwrap_err();
    assert!(matches!(err, Error::Blowup { path: 0, .. }), "{err:?}");
}

#[test]
fn rejects_bad_inputs() {
    let plain = GeneralModel::new("plain", 1.0, ControlSet::interval(0.0, 1.0).unwrap()).unwrap();
    let zero = Policy::feedback(|_, _| smallvec![0.0]);
    let log = SimOptions::new(4, 1e-2, 0).with_scheme(Scheme::LogEuler);
    assert!(simulate_paths(&plain, &zero, 0.0, 1.0, &log).is_err());
    assert!(simulate_paths(&plain, &zero, 0.0, 1.0, &SimOptions::new(0, 1e-2, 0)).is_err());
    let bundle = simulate_paths(&plain, &zero, 0.5, 1.0, &SimOptions::new(4, 1e-2, 0)).unwrap();
    assert!(estimate_cost(&plain, &bundle, 0.7).is_err());
    assert!(spike_deviation_test(&plain, &zero, 0.9, 1.0, &[0.2], &[smallvec![1.0]], &SimOptions::new(4, 1e-2, 0)).is_err());
}

#[test]
fn bellman_identity_on_time_consistent_data() {
    let model = lq_example(0.3, |_| 1.5);
    let grids = HjbGrids::uniform(1.0, 200, -3.0, 3.0, 240).unwrap();
    let v = classical_hjb(&model, 0.0, &grids, &HjbOptions::default()).unwrap();
    let policy = Policy::grid(GridPolicy::from_solution(&grids, &v.psi).unwrap());
    let opts = SimOptions::new(20_000, 5e-3, 21);
    let (j_t, j_tau) = (0, 100);
    let x = 1.0;
    let k = 160;
    assert!((grids.space.x(k) - x).abs() < 1e-12);
    let check =
        bellman_spot_check(&model, &policy, &grids.space, v.at(j_t)[k], v.at(j_tau), 0.0, 0.5, x, 5e-3, &opts).unwrap();
    assert!(check.pass, "{check:?}");
}
