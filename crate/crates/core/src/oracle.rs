//! Closed-form ground truth for the scalar LQ example and the Merton problem.

use std::fmt;
use std::sync::Arc;

use crate::error::{domain, Error, Result};
use crate::quad::adaptive_simpson;

/// Absolute tolerance for the pre-commitment quadratures.
pub const TOL_QUAD: f64 = 1e-10;

/// Largest utility exponent accepted before `1/(1-β)` exponents lose precision.
pub const BETA_MAX: f64 = 0.95;

/// `dX = u ds + σX dW`, cost `E[∫u² ds + g(t)X(T)²]`.
#[derive(Clone)]
pub struct LqExampleParams {
    pub sigma: f64,
    pub horizon: f64,
    g: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for LqExampleParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LqExampleParams").field("sigma", &self.sigma).field("horizon", &self.horizon).finish()
    }
}

impl LqExampleParams {
    pub fn new(sigma: f64, horizon: f64, g: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        if !(sigma > 0.0) {
            return domain(format!("σ must be positive, got {sigma}"));
        }
        if !(horizon > 0.0) {
            return domain(format!("T must be positive, got {horizon}"));
        }
        for k in 0..=64 {
            let t = horizon * k as f64 / 64.0;
            let v = g(t);
            if !(v > 0.0) || !v.is_finite() {
                return domain(format!("g({t}) = {v} must be positive"));
            }
        }
        Ok(Self { sigma, horizon, g: Arc::new(g) })
    }

    pub fn g(&self, t: f64) -> f64 {
        (self.g)(t)
    }

    fn e(&self, s: f64) -> f64 {
        (self.sigma * self.sigma * (self.horizon - s)).exp()
    }

    fn denom(&self, t: f64, s: f64) -> f64 {
        self.sigma * self.sigma + self.g(t) * (self.e(s) - 1.0)
    }

    fn check(&self, lo: f64, hi: f64, what: &str) -> Result<()> {
        let eps = 1e-12 * self.horizon;
        if lo > hi + eps || lo < -eps || hi > self.horizon + eps {
            return domain(format!("{what}: need 0 <= {lo} <= {hi} <= T = {}", self.horizon));
        }
        Ok(())
    }
}

/// `P(s,t) = σ²g(t)e^{σ²(T-s)} / (σ² + g(t)(e^{σ²(T-s)} - 1))` for `t <= s <= T`.
pub fn lq_riccati_closed_form(p: &LqExampleParams, t: f64, s: f64) -> Result<f64> {
    p.check(t, s, "riccati")?;
    Ok(p.sigma * p.sigma * p.g(t) * p.e(s) / p.denom(t, s))
}

/// Optimal state and control at time `s` for the problem started at `(t, x)`,
/// given the Brownian increment `w = W(s) - W(t)`.
pub fn lq_optimal_pair(p: &LqExampleParams, t: f64, x: f64, s: f64, w: f64) -> Result<(f64, f64)> {
    p.check(t, s, "optimal pair")?;
    let s2 = p.sigma * p.sigma;
    let expo = (-0.5 * s2 * (s - t) + p.sigma * w).exp();
    let xb = p.denom(t, s) / p.denom(t, t) * expo * x;
    let ub = -s2 * p.g(t) * p.e(s) / p.denom(t, t) * expo * x;
    Ok((xb, ub))
}

/// Cost at `(τ, y)` of continuing with the control that is optimal from time `t`,
/// measured with the time-`τ` terminal weight.
pub fn lq_restricted_cost(p: &LqExampleParams, t: f64, tau: f64, y: f64) -> Result<f64> {
    p.check(t, tau, "restricted cost")?;
    let s2 = p.sigma * p.sigma;
    let e = p.e(tau);
    let gt = p.g(t);
    let d = p.denom(t, tau);
    Ok((s2 * gt * gt * (e - 1.0) + s2 * s2 * p.g(tau)) * e * y * y / (d * d))
}

/// Optimal cost `P(τ,τ)y²` from `(τ, y)`.
pub fn lq_reoptimized_cost(p: &LqExampleParams, tau: f64, y: f64) -> Result<f64> {
    Ok(lq_riccati_closed_form(p, tau, tau)? * y * y)
}

/// `J(τ, X̄(τ); ū|) - J(τ, X̄(τ); û)` for the realized increment `w = W(τ) - W(t)`.
pub fn lq_inconsistency_gap(p: &LqExampleParams, t: f64, tau: f64, x: f64, w: f64) -> Result<f64> {
    if !(t < tau && tau < p.horizon) || t < 0.0 {
        return domain(format!("gap needs 0 <= t < τ < T, got t={t}, τ={tau}"));
    }
    let (xt, _) = lq_optimal_pair(p, t, x, tau, w)?;
    let s2 = p.sigma * p.sigma;
    let e = p.e(tau);
    let dg = p.g(t) - p.g(tau);
    let dt = p.denom(t, tau);
    Ok(s2 * s2 * (e - 1.0) * e * dg * dg * xt * xt / (dt * dt * p.denom(tau, tau)))
}

pub type Kernel = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type Terminal = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `dX = [rX + (μ-r)u - c]ds + σu dW`, reward `E[∫ν(τ,s)c^β ds + ρ(τ)X(T)^β]`.
#[derive(Clone)]
pub struct MertonParams {
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
    pub beta: f64,
    pub horizon: f64,
    nu: Kernel,
    rho: Terminal,
    pub label: String,
}

impl fmt::Debug for MertonParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MertonParams")
            .field("r", &self.r)
            .field("mu", &self.mu)
            .field("sigma", &self.sigma)
            .field("beta", &self.beta)
            .field("horizon", &self.horizon)
            .field("label", &self.label)
            .finish()
    }
}

impl MertonParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        r: f64,
        mu: f64,
        sigma: f64,
        beta: f64,
        horizon: f64,
        nu: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        rho: impl Fn(f64) -> f64 + Send + Sync + 'static,
        label: impl Into<String>,
    ) -> Result<Self> {
        if !(mu > r && r > 0.0) {
            return domain(format!("need μ > r > 0, got μ={mu}, r={r}"));
        }
        if !(sigma > 0.0) {
            return domain(format!("σ must be positive, got {sigma}"));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return domain(format!("β must lie in (0,1), got {beta}"));
        }
        if beta > BETA_MAX {
            return domain(format!("β = {beta} exceeds {BETA_MAX}; 1/(1-β) exponents lose precision"));
        }
        if !(horizon > 0.0) {
            return domain(format!("T must be positive, got {horizon}"));
        }
        let p = Self { r, mu, sigma, beta, horizon, nu: Arc::new(nu), rho: Arc::new(rho), label: label.into() };
        for i in 0..=32 {
            let tau = horizon * i as f64 / 32.0;
            let v = p.rho(tau);
            if !(v > 0.0) || !v.is_finite() {
                return domain(format!("ρ({tau}) = {v} must be positive"));
            }
            for j in i..=32 {
                let t = horizon * j as f64 / 32.0;
                let v = p.nu(tau, t);
                if !(v > 0.0) || !v.is_finite() {
                    return domain(format!("ν({tau}, {t}) = {v} must be positive"));
                }
            }
        }
        Ok(p)
    }

    /// Exponential discounting: `ν = e^{-δ(s-τ)}`, `ρ = e^{-δ(T-τ)}`.
    pub fn classical(r: f64, mu: f64, sigma: f64, beta: f64, delta: f64, horizon: f64) -> Result<Self> {
        Self::new(
            r,
            mu,
            sigma,
            beta,
            horizon,
            move |tau, s| (-delta * (s - tau)).exp(),
            move |tau| (-delta * (horizon - tau)).exp(),
            format!("exponential(delta={delta})"),
        )
    }

    /// Hyperbolic discounting: `ν = 1/(1+κ(s-τ))`, `ρ = 1/(1+κ(T-τ))`.
    pub fn hyperbolic(r: f64, mu: f64, sigma: f64, beta: f64, kappa: f64, horizon: f64) -> Result<Self> {
        if !(kappa >= 0.0) {
            return domain(format!("κ must be nonnegative, got {kappa}"));
        }
        Self::new(
            r,
            mu,
            sigma,
            beta,
            horizon,
            move |tau, s| 1.0 / (1.0 + kappa * (s - tau)),
            move |tau| 1.0 / (1.0 + kappa * (horizon - tau)),
            format!("hyperbolic(kappa={kappa})"),
        )
    }

    pub fn nu(&self, tau: f64, s: f64) -> f64 {
        (self.nu)(tau, s)
    }

    pub fn rho(&self, tau: f64) -> f64 {
        (self.rho)(tau)
    }

    /// Growth rate of `E[X^β]` under the optimal investment with no consumption.
    pub fn lambda(&self) -> f64 {
        let (r, mu, s2, b) = (self.r, self.mu, self.sigma * self.sigma, self.beta);
        (2.0 * r * s2 * (1.0 - b) + (mu - r) * (mu - r)) * b / (2.0 * s2 * (1.0 - b))
    }

    /// Investment per unit wealth, `(μ-r)/(σ²(1-β))`.
    pub fn investment_fraction(&self) -> f64 {
        (self.mu - self.r) / (self.sigma * self.sigma * (1.0 - self.beta))
    }

    fn check(&self, t: f64, s: f64) -> Result<()> {
        let eps = 1e-12 * self.horizon;
        if t < -eps || t > s + eps || s > self.horizon + eps {
            return domain(format!("need 0 <= t <= s <= T, got t={t}, s={s}"));
        }
        Ok(())
    }

    /// `[e^{λ(T-s)/(1-β)}ρ(t)^{1/(1-β)} + ∫_s^T e^{λ(τ-s)/(1-β)}ν(t,τ)^{1/(1-β)}dτ]`.
    fn bracket(&self, t: f64, s: f64) -> f64 {
        let q = 1.0 / (1.0 - self.beta);
        let l = self.lambda() * q;
        let head = (l * (self.horizon - s)).exp() * self.rho(t).powf(q);
        let tail = adaptive_simpson(|tau| (l * (tau - s)).exp() * self.nu(t, tau).powf(q), s, self.horizon, TOL_QUAD);
        head + tail
    }
}

/// Pre-commitment value `V^t(s, y)`; negative wealth maps to `-∞`.
pub fn merton_value(p: &MertonParams, t: f64, s: f64, y: f64) -> Result<f64> {
    p.check(t, s)?;
    if y < 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    Ok(p.bracket(t, s).powf(1.0 - p.beta) * y.powf(p.beta))
}

/// Pre-commitment feedbacks `(ū, c̄)` at `(s, y)` for the problem started at time `t`.
pub fn merton_precommit_feedback(p: &MertonParams, t: f64, s: f64, y: f64) -> Result<(f64, f64)> {
    p.check(t, s)?;
    if y < 0.0 {
        return domain(format!("wealth must be nonnegative, got {y}"));
    }
    if y == 0.0 {
        return Ok((0.0, 0.0));
    }
    let q = 1.0 / (1.0 - p.beta);
    let u = p.investment_fraction() * y;
    let c = p.nu(t, s).powf(q) * y / p.bracket(t, s);
    Ok((u, c.max(0.0)))
}

/// Consumption per unit wealth for exponential discounting at time-to-go `d = T - s`,
/// `a/((1+a)e^{ad} - 1)` with `a = (λ-δ)/(1-β)`; `1/(1+d)` when `a = 0`.
pub fn classical_consumption_coefficient(a: f64, d: f64) -> f64 {
    if a.abs() < 1e-8 {
        // series in a: 1/(1+d) - a·d(d+2)/(2(1+d)²) + O(a²)
        return 1.0 / (1.0 + d) - a * d * (d + 2.0) / (2.0 * (1.0 + d) * (1.0 + d));
    }
    a / ((1.0 + a) * (a * d).exp() - 1.0)
}

/// True when `∫_{t̄}^T [e^{λs}ν(t,s)/ρ(t)]^{1/(1-β)} ds` differs between `t` and `t̄`,
/// which makes the pre-commitment solution inconsistent.
pub fn merton_inconsistency_indicator(p: &MertonParams, t: f64, t_bar: f64) -> Result<bool> {
    if !(t >= 0.0 && t < t_bar && t_bar < p.horizon) {
        return domain(format!("need 0 <= t < t̄ < T, got t={t}, t̄={t_bar}"));
    }
    let (lhs, rhs) = merton_indicator_integrals(p, t, t_bar);
    Ok((lhs - rhs).abs() > 1e-8 * (1.0 + lhs.abs() + rhs.abs()))
}

/// Both sides of the inconsistency comparison.
pub fn merton_indicator_integrals(p: &MertonParams, t: f64, t_bar: f64) -> (f64, f64) {
    let q = 1.0 / (1.0 - p.beta);
    let l = p.lambda();
    // factor e^{-λT} keeps the integrands O(1)
    let side = |base: f64| {
        let rb = p.rho(base);
        adaptive_simpson(
            |s| ((l * (s - p.horizon)).exp() * p.nu(base, s) / rb).powf(q),
            t_bar,
            p.horizon,
            TOL_QUAD,
        )
    };
    (side(t), side(t_bar))
}

/// Maximizer and maximum of `f(γ) = α₁^{1-β}γ^β + α₂^{1-β}(1-γ)^β` on `[0,1]`.
pub fn concave_allocation_max(a1: f64, a2: f64, beta: f64) -> Result<(f64, f64)> {
    if !(a1 > 0.0 && a2 > 0.0) {
        return Err(Error::Domain(format!("allocation weights must be positive, got {a1}, {a2}")));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return domain(format!("β must lie in (0,1), got {beta}"));
    }
    Ok((a1 / (a1 + a2), (a1 + a2).powf(1.0 - beta)))
}

/// `f(γ)` from [`concave_allocation_max`].
pub fn concave_allocation_objective(a1: f64, a2: f64, beta: f64, gamma: f64) -> f64 {
    a1.powf(1.0 - beta) * gamma.powf(beta) + a2.powf(1.0 - beta) * (1.0 - gamma).powf(beta)
}
