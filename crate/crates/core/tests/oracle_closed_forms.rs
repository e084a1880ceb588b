//! Closed forms checked against independent integrations.

use eqhjb::oracle::*;
use proptest::prelude::*;

fn rk4_backward(f: impl Fn(f64, f64) -> f64, y_end: f64, t_end: f64, t_start: f64, n: usize) -> f64 {
    let h = (t_end - t_start) / n as f64;
    let mut y = y_end;
    let mut t = t_end;
    for _ in 0..n {
        let k1 = f(t, y);
        let k2 = f(t - 0.5 * h, y - 0.5 * h * k1);
        let k3 = f(t - 0.5 * h, y - 0.5 * h * k2);
        let k4 = f(t - h, y - h * k3);
        y -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        t -= h;
    }
    y
}

fn example() -> LqExampleParams {
    LqExampleParams::new(1.0, 1.0, |t| 1.0 + t).unwrap()
}

#[test]
fn riccati_terminal_and_stationary_values() {
    let p = example();
    for t in [0.0, 0.3, 0.9] {
        assert_eq!(lq_riccati_closed_form(&p, t, 1.0).unwrap(), 1.0 + t);
    }
    let flat = LqExampleParams::new(1.0, 2.0, |_| 1.0).unwrap();
    for s in [0.0, 0.7, 1.5, 2.0] {
        assert!((lq_riccati_closed_form(&flat, 0.0, s).unwrap() - 1.0).abs() < 1e-15);
    }
    assert!(lq_riccati_closed_form(&p, 0.5, 0.4).is_err());
    assert!(lq_riccati_closed_form(&p, 0.5, 1.2).is_err());
}

#[test]
fn riccati_matches_rk4_of_the_ode() {
    // P_s = P² - σ²P, P(T) = g(t)
    for (sigma, t) in [(1.0, 0.0), (0.3, 0.2), (1.7, 0.5)] {
        let p = LqExampleParams::new(sigma, 1.0, |t| 1.0 + t).unwrap();
        let g = p.g(t);
        for s in [t, 0.5 * (t + 1.0), 0.95] {
            let rk = rk4_backward(|_, y| y * y - sigma * sigma * y, g, 1.0, s, 4000);
            let cf = lq_riccati_closed_form(&p, t, s).unwrap();
            assert!((rk - cf).abs() < 1e-11, "σ={sigma} t={t} s={s}: rk={rk} cf={cf}");
        }
    }
}

#[test]
fn riccati_residual_under_central_differences() {
    let p = example();
    let h = 1e-4;
    for k in 1..50 {
        let s = 0.02 * k as f64;
        let t = 0.0;
        let d = (lq_riccati_closed_form(&p, t, s + h).unwrap() - lq_riccati_closed_form(&p, t, s - h).unwrap()) / (2.0 * h);
        let v = lq_riccati_closed_form(&p, t, s).unwrap();
        assert!((d - (v * v - v)).abs() <= 1e-6, "residual at s={s}");
    }
}

#[test]
fn optimal_pair_trivial_cases() {
    let p = example();
    let (x, u) = lq_optimal_pair(&p, 0.2, 1.5, 0.2, 0.0).unwrap();
    assert!((x - 1.5).abs() < 1e-15);
    assert!((u + lq_riccati_closed_form(&p, 0.2, 0.2).unwrap() * 1.5).abs() < 1e-14);
    assert_eq!(lq_optimal_pair(&p, 0.0, 0.0, 0.7, 0.4).unwrap(), (0.0, 0.0));
}

#[test]
fn optimal_pair_matches_pathwise_integration() {
    // σ=1, g≡2, T=1, t=0, s=0.5, w=0.3, x=1; Euler-Maruyama with the
    // increment spread evenly over the path, dt = 1e-4.
    let p = LqExampleParams::new(1.0, 1.0, |_| 2.0).unwrap();
    let (t, s, w, x0) = (0.0, 0.5, 0.3, 1.0);
    let n = 5000;
    let dt = (s - t) / n as f64;
    let dw = w / n as f64;
    // log-scheme is exact for frozen coefficients, so compare to an Euler path
    // in log space: d ln X = (-P - σ²/2)ds + σ dW
    let mut lx: f64 = 0.0;
    for k in 0..n {
        let sa = t + k as f64 * dt;
        let pa = lq_riccati_closed_form(&p, t, sa).unwrap();
        let pb = lq_riccati_closed_form(&p, t, sa + dt).unwrap();
        lx += -0.5 * (pa + pb) * dt - 0.5 * dt + dw;
    }
    let x_num = x0 * lx.exp();
    let (xb, ub) = lq_optimal_pair(&p, t, x0, s, w).unwrap();
    assert!((x_num - xb).abs() < 1e-7, "{x_num} vs {xb}");
    let pp = lq_riccati_closed_form(&p, t, s).unwrap();
    assert!((ub + pp * xb).abs() < 1e-14);
}

#[test]
fn gap_zero_cases_and_positive_case() {
    let flat = LqExampleParams::new(1.0, 1.0, |_| 1.3).unwrap();
    assert_eq!(lq_inconsistency_gap(&flat, 0.0, 0.5, 1.0, 0.2).unwrap(), 0.0);
    let p = example();
    assert_eq!(lq_inconsistency_gap(&p, 0.0, 0.5, 0.0, 0.2).unwrap(), 0.0);
    let gap = lq_inconsistency_gap(&p, 0.0, 0.5, 1.0, 0.0).unwrap();
    assert!(gap > 0.0);
    // independently: both costs from their own closed forms
    let (y, _) = lq_optimal_pair(&p, 0.0, 1.0, 0.5, 0.0).unwrap();
    let diff = lq_restricted_cost(&p, 0.0, 0.5, y).unwrap() - lq_reoptimized_cost(&p, 0.5, y).unwrap();
    assert!((gap - diff).abs() < 1e-14 * (1.0 + gap.abs()), "{gap} vs {diff}");
    // frozen from a 30-digit quadrature of the restricted and reoptimized costs
    assert!((gap - 0.011_124_079_117_370_377).abs() < 1e-13, "gap = {gap:.16}");
}

#[test]
fn restricted_cost_by_quadrature() {
    // J(τ,y;ū|) = ∫_τ^T E[ū²] ds + g(τ)E[X̄(T)²], with E e^{2σW(s-τ)} = e^{2σ²(s-τ)}
    let p = example();
    let (t, tau, y) = (0.1, 0.6, 0.8);
    let s2: f64 = 1.0;
    let gt = p.g(t);
    let den = s2 + gt * ((s2 * (1.0 - tau)).exp() - 1.0);
    let n = 20000;
    let mut acc = 0.0;
    for k in 0..=n {
        let s = tau + (1.0 - tau) * k as f64 / n as f64;
        let coef = s2 * gt * (s2 * (1.0 - s)).exp() / den;
        let m2 = (-s2 * (s - tau) + 2.0 * s2 * (s - tau)).exp();
        let wgt = if k == 0 || k == n { 0.5 } else { 1.0 };
        acc += wgt * coef * coef * m2 * y * y;
    }
    acc *= (1.0 - tau) / n as f64;
    let xt2 = (s2 / den).powi(2) * (-s2 * (1.0 - tau) + 2.0 * s2 * (1.0 - tau)).exp() * y * y;
    let total = acc + p.g(tau) * xt2;
    let cf = lq_restricted_cost(&p, t, tau, y).unwrap();
    assert!((total - cf).abs() < 1e-8, "{total} vs {cf}");
}

proptest! {
    #[test]
    fn gap_is_nonnegative(x in -3.0f64..3.0, w in -2.0f64..2.0, tau in 0.05f64..0.95, sigma in 0.1f64..2.0) {
        let p = LqExampleParams::new(sigma, 1.0, |t| 1.0 + t * t).unwrap();
        let gap = lq_inconsistency_gap(&p, 0.0, tau, x, w).unwrap();
        prop_assert!(gap >= 0.0);
        if x != 0.0 { prop_assert!(gap > 0.0); }
    }
}

fn classical() -> MertonParams {
    MertonParams::classical(0.05, 0.1, 0.2, 0.5, 0.1, 1.0).unwrap()
}

#[test]
fn merton_parameters_validate() {
    assert!(MertonParams::classical(0.05, 0.04, 0.2, 0.5, 0.1, 1.0).is_err());
    assert!(MertonParams::classical(0.05, 0.1, 0.2, 0.96, 0.1, 1.0).is_err());
    assert!(MertonParams::classical(0.05, 0.1, -0.2, 0.5, 0.1, 1.0).is_err());
    let p = classical();
    // λ = [2rσ²(1-β) + (μ-r)²]β / (2σ²(1-β))
    assert!((p.lambda() - 0.05625).abs() < 1e-15);
}

#[test]
fn merton_value_boundary_cases() {
    let p = classical();
    assert_eq!(merton_value(&p, 0.2, 0.4, 0.0).unwrap(), 0.0);
    assert_eq!(merton_value(&p, 0.2, 0.4, -1.0).unwrap(), f64::NEG_INFINITY);
    let v = merton_value(&p, 0.3, 1.0, 4.0).unwrap();
    assert!((v - p.rho(0.3) * 2.0).abs() < 1e-14);
}

#[test]
fn merton_value_matches_bernoulli_ode() {
    // ψ' = -(λ/(1-β))ψ - ν^{1/(1-β)}, ψ(T) = ρ(t)^{1/(1-β)}; V^t(s,y) = ψ(s)^{1-β}y^β
    for p in [classical(), MertonParams::hyperbolic(0.03, 0.08, 0.25, 0.3, 2.0, 2.0).unwrap()] {
        let q = 1.0 / (1.0 - p.beta);
        let l = p.lambda();
        for t in [0.0, 0.4] {
            let psi = rk4_backward(|s, y| -(l * q) * y - p.nu(t, s).powf(q), p.rho(t).powf(q), p.horizon, t, 4000);
            let v = merton_value(&p, t, t, 1.7).unwrap();
            let ode = psi.powf(1.0 - p.beta) * 1.7f64.powf(p.beta);
            assert!((v - ode).abs() < 1e-10 * v.abs(), "{} t={t}: {v} vs {ode}", p.label);
        }
    }
}

#[test]
fn merton_value_is_concave_in_wealth() {
    let p = MertonParams::hyperbolic(0.03, 0.08, 0.25, 0.3, 2.0, 2.0).unwrap();
    for (y1, y2) in [(0.1, 3.0), (1.0, 1.5), (0.01, 10.0)] {
        let m = merton_value(&p, 0.1, 0.5, 0.5 * (y1 + y2)).unwrap();
        let avg = 0.5 * (merton_value(&p, 0.1, 0.5, y1).unwrap() + merton_value(&p, 0.1, 0.5, y2).unwrap());
        assert!(m >= avg);
    }
}

#[test]
fn precommit_feedback_cases() {
    let p = classical();
    assert_eq!(merton_precommit_feedback(&p, 0.0, 0.3, 0.0).unwrap(), (0.0, 0.0));
    assert!(merton_precommit_feedback(&p, 0.0, 0.3, -1.0).is_err());
    let tiny = MertonParams::classical(0.05, 0.05 + 1e-12, 0.2, 0.5, 0.1, 1.0).unwrap();
    assert!(merton_precommit_feedback(&tiny, 0.0, 0.3, 1.0).unwrap().0.abs() < 1e-10);
    let (u, c) = merton_precommit_feedback(&p, 0.0, 0.0, 1.0).unwrap();
    assert!((u - 0.05 / (0.04 * 0.5)).abs() < 1e-14);
    let a = (p.lambda() - 0.1) / (1.0 - p.beta);
    let expect = a / (a * a.exp() + a.exp() - 1.0);
    assert!((c - expect).abs() < 1e-10 * expect, "{c} vs {expect}");
    assert!((classical_consumption_coefficient(1e-12, 0.7) - 1.0 / 1.7).abs() < 1e-11);
    assert!((classical_consumption_coefficient(1e-5, 0.7) - 1e-5 / ((1.0 + 1e-5) * (0.7e-5f64).exp() - 1.0)).abs() < 1e-9);
}

#[test]
fn inconsistency_indicator_cases() {
    assert!(!merton_inconsistency_indicator(&classical(), 0.1, 0.6).unwrap());
    let hyp = MertonParams::hyperbolic(0.05, 0.1, 0.2, 0.5, 1.0, 1.0).unwrap();
    assert!(merton_inconsistency_indicator(&hyp, 0.1, 0.6).unwrap());
    let (l, r) = merton_indicator_integrals(&hyp, 0.1, 0.6);
    assert!((l - r).abs() > 1e-4);
    let tfree = MertonParams::new(0.05, 0.1, 0.2, 0.5, 1.0, |_, s| 1.0 / (1.0 + s), |_| 0.7, "t-free").unwrap();
    assert!(!merton_inconsistency_indicator(&tfree, 0.1, 0.6).unwrap());
    assert!(merton_inconsistency_indicator(&hyp, 0.6, 0.6).is_err());
}

#[test]
fn allocation_max_matches_scan() {
    let (g, f) = concave_allocation_max(1.0, 1.0, 0.5).unwrap();
    assert_eq!(g, 0.5);
    assert!((f - 2f64.sqrt()).abs() < 1e-15);
    let (g, _) = concave_allocation_max(1.0, 1e-12, 0.5).unwrap();
    assert!(g > 1.0 - 1e-11);
    assert!(concave_allocation_max(0.0, 1.0, 0.5).is_err());
    let (a1, a2, b) = (2.0, 3.0, 0.3);
    let (gs, fs) = concave_allocation_max(a1, a2, b).unwrap();
    let mut best = (0.0, f64::NEG_INFINITY);
    for k in 0..=100_000 {
        let gm = k as f64 * 1e-5;
        let v = concave_allocation_objective(a1, a2, b, gm);
        if v > best.1 {
            best = (gm, v);
        }
    }
    assert!((best.0 - gs).abs() <= 1e-5);
    assert!((best.1 - fs).abs() <= 1e-9);
}

proptest! {
    #[test]
    fn allocation_max_dominates(a1 in 0.01f64..10.0, a2 in 0.01f64..10.0, b in 0.05f64..0.95) {
        let (gs, fs) = concave_allocation_max(a1, a2, b).unwrap();
        for k in 0..=200 {
            let gm = k as f64 / 200.0;
            let v = concave_allocation_objective(a1, a2, b, gm);
            prop_assert!(v <= fs * (1.0 + 1e-12));
            if (v - fs).abs() <= 1e-12 * fs { prop_assert!((gm - gs).abs() < 1e-2); }
        }
        prop_assert!((concave_allocation_objective(a1, a2, b, gs) - fs).abs() < 1e-6 * fs);
    }
}
