use std::sync::Arc;

use eqhjb::lq::*;
use eqhjb::oracle::{lq_riccati_closed_form, LqExampleParams};
use eqhjb::quad::fitted_order;
use eqhjb::{Error, TimeGrid};
use nalgebra::{dmatrix, DMatrix};

fn deterministic_scalar(g: impl Fn(f64) -> f64 + Send + Sync + 'static) -> LQModel {
    LQModel::new(1, 1, 1.0).with_b(scalar1(|_| 1.0)).with_g(scalar1(g))
}

fn s(m: &DMatrix<f64>) -> f64 {
    m[(0, 0)]
}

/// Classical matrix Riccati `P' = -(PA + AᵀP + A₁ᵀPA₁ + Q - SᵀM⁻¹S)` by RK4 with a fine step.
fn classical_riccati(model: &LQModel, t_end: f64, n: usize) -> Vec<(f64, DMatrix<f64>)> {
    let rate = |t: f64, p: &DMatrix<f64>| {
        let (a, a1, b, b1) = ((model.a)(t), (model.a1)(t), (model.b)(t), (model.b1)(t));
        let m = (model.r)(t, t) + b1.transpose() * p * &b1;
        let sgain = b.transpose() * p + b1.transpose() * p * &a1;
        let corr = sgain.transpose() * m.try_inverse().unwrap() * &sgain;
        -(p * &a + a.transpose() * p + a1.transpose() * p * &a1 + (model.q)(t, t) - corr)
    };
    let h = t_end / n as f64;
    let mut p = (model.g)(0.0);
    let mut out = vec![(t_end, p.clone())];
    for k in (0..n).rev() {
        let t = (k + 1) as f64 * h;
        let k1 = rate(t, &p);
        let k2 = rate(t - 0.5 * h, &(&p - &k1 * (0.5 * h)));
        let k3 = rate(t - 0.5 * h, &(&p - &k2 * (0.5 * h)));
        let k4 = rate(t - h, &(&p - &k3 * h));
        p -= (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        out.push((k as f64 * h, p.clone()));
    }
    out.reverse();
    out
}

#[test]
fn zero_data_gives_zero_solution() {
    let model = LQModel::new(2, 1, 1.0).with_b(Arc::new(|_| dmatrix![1.0; 0.5]));
    let sol = solve_riccati_volterra(&model, &TimeGrid::uniform(1.0, 16).unwrap()).unwrap();
    for j in 0..=16 {
        assert_eq!(sol.p_diag(j).amax(), 0.0);
        assert_eq!(sol.gamma(j).amax(), 0.0);
    }
}

#[test]
fn scalar_deterministic_matches_closed_form() {
    let g = 2.0;
    let sol = solve_riccati_volterra_deterministic(&deterministic_scalar(move |_| g), &TimeGrid::uniform(1.0, 64).unwrap()).unwrap();
    for j in 0..=64 {
        let t = j as f64 / 64.0;
        let exact = g / (1.0 + g * (1.0 - t));
        assert!((s(&sol.p_diag(j)) - exact).abs() < 1e-7 * exact, "t={t} {} vs {exact}", s(&sol.p_diag(j)));
    }
    assert!(sol.phi_residual.unwrap() < 1e-7, "{:?}", sol.phi_residual);
    let u = lq_equilibrium_feedback(&sol, 0.0, &[2.0]);
    assert!((u[0] + 2.0 * g / (1.0 + g)).abs() < 1e-7);
    assert_eq!(lq_equilibrium_feedback(&sol, 0.3, &[0.0])[0], 0.0);
}

#[test]
fn no_control_authority_gives_lyapunov_solution() {
    let (a, q) = (0.4, 0.7);
    let model = LQModel::new(1, 1, 1.0)
        .with_a(scalar1(move |_| a))
        .with_q(scalar2(move |_, _| q))
        .with_g(scalar1(|tau| 1.0 + tau));
    let grid = TimeGrid::uniform(1.0, 32).unwrap();
    let sol = solve_riccati_volterra_deterministic(&model, &grid).unwrap();
    for j in 0..=32 {
        assert_eq!(s(sol.gamma(j)), 0.0);
        for i in 0..=j {
            let (tau, t) = (grid.t(i), grid.t(j));
            let e = (2.0 * a * (1.0 - t)).exp();
            let exact = e * (1.0 + tau) + q * (e - 1.0) / (2.0 * a);
            assert!((s(&sol.p(i, j)) - exact).abs() < 1e-7, "({tau},{t}) {} vs {exact}", s(&sol.p(i, j)));
        }
    }
    assert_eq!(lq_equilibrium_feedback(&sol, 0.5, &[3.0])[0], 0.0);
}

#[test]
fn terminal_rows_and_symmetry() {
    let model = LQModel::new(2, 1, 1.0)
        .with_b(Arc::new(|_| dmatrix![0.0; 1.0]))
        .with_a(Arc::new(|_| dmatrix![0.0, 1.0; 0.0, 0.0]))
        .with_a1(Arc::new(|t| dmatrix![0.2, 0.0; 0.1, 0.3 * t]))
        .with_q(Arc::new(|tau, t| dmatrix![1.0 + tau, 0.2; 0.2, 0.5 + t]))
        .with_g(Arc::new(|tau| dmatrix![1.0 + tau, 0.3; 0.3, 2.0 - tau]));
    let grid = TimeGrid::uniform(1.0, 20).unwrap();
    let sol = solve_riccati_volterra(&model, &grid).unwrap();
    for i in 0..=20 {
        assert_eq!(sol.p(i, 20), (model.g)(grid.t(i)));
        for j in i..=20 {
            let p = sol.p(i, j);
            assert!((&p - p.transpose()).amax() <= 1e-12);
            assert!(p.symmetric_eigenvalues().min() > -1e-8);
        }
    }
}

#[test]
fn tau_independent_matrix_data_matches_classical_riccati() {
    let model = LQModel::new(2, 2, 1.0)
        .with_a(Arc::new(|t| dmatrix![-0.1, 1.0; 0.3 * t, 0.2]))
        .with_a1(Arc::new(|_| dmatrix![0.3, 0.0; 0.1, 0.2]))
        .with_b(Arc::new(|_| dmatrix![1.0, 0.0; 0.2, 1.0]))
        .with_b1(Arc::new(|t| dmatrix![0.1 * t, 0.0; 0.0, 0.2]))
        .with_q(Arc::new(|_, t| dmatrix![1.0 + t, 0.1; 0.1, 1.0]))
        .with_r(Arc::new(|_, t| dmatrix![1.0, 0.0; 0.0, 2.0 + t]))
        .with_g(Arc::new(|_| dmatrix![2.0, 0.5; 0.5, 1.0]));
    let grid = TimeGrid::uniform(1.0, 64).unwrap();
    let sol = solve_riccati_volterra(&model, &grid).unwrap();
    let oracle = classical_riccati(&model, 1.0, 64 * 64);
    for j in 0..=64 {
        let want = &oracle[j * 64].1;
        assert!((sol.p_diag(j) - want).amax() <= 1e-6 * want.amax(), "t={}", grid.t(j));
        for i in 0..j {
            assert!((sol.p(i, j) - sol.p_diag(j)).amax() <= 1e-8);
        }
    }
}

#[test]
fn marching_and_fixed_point_agree() {
    let model = LQModel::scalar_multiplicative(0.5, 1.0, |tau| 1.0 + tau);
    let grid = TimeGrid::uniform(1.0, 40).unwrap();
    let march = solve_riccati_volterra(&model, &grid).unwrap();
    let opts = RiccatiOptions { mode: SolverMode::FixedPoint, ..Default::default() };
    let fp = solve_riccati_volterra_with(&model, &grid, &opts).unwrap();
    assert!(fp.iteration_log.len() > 2);
    assert!(fp.iteration_log.last().unwrap() <= &1e-12);
    for j in 0..=40 {
        for i in 0..=j {
            assert!((s(&march.p(i, j)) - s(&fp.p(i, j))).abs() < 1e-8);
        }
    }
}

#[test]
fn marching_is_fourth_order() {
    let model = LQModel::scalar_multiplicative(1.0, 1.0, |tau| 1.0 + tau * tau);
    let reference = solve_riccati_volterra(&model, &TimeGrid::uniform(1.0, 1024).unwrap()).unwrap();
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    for n in [16, 32, 64] {
        let sol = solve_riccati_volterra(&model, &TimeGrid::uniform(1.0, n).unwrap()).unwrap();
        let err = (0..=n).map(|j| (s(&sol.p_diag(j)) - s(&reference.p_diag(j * 1024 / n))).abs()).fold(0.0, f64::max);
        hs.push(1.0 / n as f64);
        errs.push(err);
    }
    let order = fitted_order(&hs, &errs);
    assert!(order >= 3.5, "order {order}, errors {errs:?}");
}

#[test]
fn deterministic_integral_form_by_nested_quadrature() {
    // P(t) = Φ(T,t)²G(t) + ∫ Φ(s,t)²Γ(s)² ds, Φ(s,t) = exp(-∫_t^s Γ)
    let model = deterministic_scalar(|tau| 1.0 + tau);
    let sol = solve_riccati_volterra_deterministic(&model, &TimeGrid::uniform(1.0, 256).unwrap()).unwrap();
    assert!(sol.phi_residual.unwrap() < 1e-9);
    let gam = |s: f64| -lq_equilibrium_feedback(&sol, s, &[1.0])[0];
    let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize| {
        let h = (b - a) / n as f64;
        (0..=n).map(|k| f(a + k as f64 * h) * if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 }).sum::<f64>() * h / 3.0
    };
    for t in [0.0, 0.25, 0.5, 0.75] {
        let phi = |s: f64| (-simpson(&gam, t, s, 200)).exp();
        let p = phi(1.0).powi(2) * (1.0 + t) + simpson(&|s| (phi(s) * gam(s)).powi(2), t, 1.0, 200);
        let j = (t * 256.0) as usize;
        assert!((p - s(&sol.p_diag(j))).abs() < 1e-4, "t={t}: {p} vs {}", s(&sol.p_diag(j)));
    }
}

#[test]
fn singular_gain_is_reported() {
    let model = LQModel::new(1, 2, 1.0)
        .with_b(Arc::new(|_| dmatrix![1.0, 1.0]))
        .with_r(Arc::new(|_, _| dmatrix![1.0, 0.0; 0.0, 1e-14]))
        .with_g(scalar1(|_| 1.0));
    let err = solve_riccati_volterra(&model, &TimeGrid::uniform(1.0, 16).unwrap()).unwrap_err();
    assert!(matches!(err, Error::SingularGain { .. }), "{err:?}");
}

#[test]
fn invalid_inputs_are_rejected() {
    let model = deterministic_scalar(|_| 1.0);
    assert!(matches!(solve_riccati_volterra(&model, &TimeGrid::uniform(1.0, 4).unwrap()), Err(Error::InvalidGrid(_))));
    assert!(matches!(solve_riccati_volterra(&model, &TimeGrid::uniform(2.0, 16).unwrap()), Err(Error::InvalidGrid(_))));
    let bad_r = deterministic_scalar(|_| 1.0).with_r(scalar2(|_, _| 0.0));
    assert!(matches!(solve_riccati_volterra(&bad_r, &TimeGrid::uniform(1.0, 16).unwrap()), Err(Error::Domain(_))));
    let stochastic = LQModel::scalar_multiplicative(0.3, 1.0, |_| 1.0);
    assert!(solve_riccati_volterra_deterministic(&stochastic, &TimeGrid::uniform(1.0, 16).unwrap()).is_err());
}

#[test]
fn single_player_game_is_precommitment() {
    let model = LQModel::scalar_multiplicative(1.0, 1.0, |tau| 1.0 + tau);
    let game = lq_partition_game(&model, &TimeGrid::uniform(1.0, 1).unwrap()).unwrap();
    let oracle = LqExampleParams::new(1.0, 1.0, |t| 1.0 + t).unwrap();
    for (&t, v) in game.fine.nodes().iter().zip(&game.values) {
        let want = lq_riccati_closed_form(&oracle, 0.0, t).unwrap();
        assert!((s(v) - want).abs() < 1e-10, "t={t}");
    }
}

#[test]
fn tau_independent_game_is_classical_for_any_partition() {
    let model = LQModel::scalar_multiplicative(0.7, 1.0, |_| 1.5);
    let oracle = LqExampleParams::new(0.7, 1.0, |_| 1.5).unwrap();
    for n in [1, 3, 8] {
        let game = lq_partition_game(&model, &TimeGrid::uniform(1.0, n).unwrap()).unwrap();
        for (&t, v) in game.fine.nodes().iter().zip(&game.values) {
            assert!((s(v) - lq_riccati_closed_form(&oracle, 0.0, t).unwrap()).abs() < 1e-10);
        }
        for (k, lv) in game.left_values.iter().enumerate() {
            let t = game.partition.t(k + 1);
            assert!((s(lv) - lq_riccati_closed_form(&oracle, 0.0, t).unwrap()).abs() < 1e-10);
        }
    }
}

#[test]
fn game_converges_at_first_order() {
    let model = LQModel::scalar_multiplicative(1.0, 1.0, |tau| 1.0 + tau);
    let sol = solve_riccati_volterra(&model, &TimeGrid::uniform(1.0, 1024).unwrap()).unwrap();
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    for n in [4, 16, 64, 256] {
        let game = lq_partition_game(&model, &TimeGrid::uniform(1.0, n).unwrap()).unwrap();
        hs.push(1.0 / n as f64);
        errs.push(game.sup_distance(&sol));
    }
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    let order = fitted_order(&hs, &errs);
    assert!(order >= 0.9, "order {order}, errors {errs:?}");
}

#[test]
fn deterministic_equilibrium_matches_fine_partition_game() {
    let model = deterministic_scalar(|tau| 1.0 + tau);
    let sol = solve_riccati_volterra_deterministic(&model, &TimeGrid::uniform(1.0, 512).unwrap()).unwrap();
    let game = lq_partition_game_with(&model, &TimeGrid::uniform(1.0, 512).unwrap(), 4).unwrap();
    // first-order game error at N = 512
    assert!(game.sup_distance(&sol) < 2e-3, "{}", game.sup_distance(&sol));
}
