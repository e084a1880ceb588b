//! Models whose Hamiltonian minimizer is known in closed form.

use std::sync::Arc;

use smallvec::smallvec;

use super::{ControlSet, GeneralModel};
use crate::error::{domain, Result};

/// A coefficient of `(τ, t)`.
pub type CoefTT = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// A coefficient of `(t, x)`.
pub type CoefTX = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

fn check_positive_tt(name: &str, f: &CoefTT, horizon: f64) -> Result<()> {
    for i in 0..=8 {
        let tau = horizon * i as f64 / 8.0;
        for j in i..=8 {
            let t = horizon * j as f64 / 8.0;
            let v = f(tau, t);
            if !(v > 0.0) {
                return domain(format!("{name}({tau}, {t}) = {v} must be positive"));
            }
        }
    }
    Ok(())
}

impl GeneralModel {
    /// `U = [0,1]`, `b = u`, `g = R(τ,t)·u`.
    ///
    /// The minimizer is the indicator of `p + R < 0`, discontinuous across `p + R = 0`.
    pub fn switching_linear(
        horizon: f64,
        r: CoefTT,
        sigma: CoefTX,
        terminal: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        check_positive_tt("R", &r, horizon)?;
        let (r1, r2, r3) = (r.clone(), r.clone(), r);
        Ok(Self::new("switching-linear", horizon, ControlSet::interval(0.0, 1.0)?)?
            .with_drift(|_, _, u| u[0])
            .with_diffusion(move |t, x| sigma(t, x))
            .with_running_cost(move |tau, t, _, u| r1(tau, t) * u[0])
            .with_terminal_cost(terminal)
            .with_selector(move |tau, t, _, p, _| smallvec![if p + r2(tau, t) < 0.0 { 1.0 } else { 0.0 }])
            .with_switching(move |tau, t, _, p, _| p + r3(tau, t)))
    }

    /// `U = [-1,1]`, `b = u`, `g = R(τ,t)·u²/2`; the minimizer is `-sgn(p)·min(|p|/R, 1)`.
    pub fn clipped_quadratic(
        horizon: f64,
        r: CoefTT,
        sigma: CoefTX,
        terminal: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        check_positive_tt("R", &r, horizon)?;
        let (r1, r2) = (r.clone(), r);
        Ok(Self::new("clipped-quadratic", horizon, ControlSet::interval(-1.0, 1.0)?)?
            .with_drift(|_, _, u| u[0])
            .with_diffusion(move |t, x| sigma(t, x))
            .with_running_cost(move |tau, t, _, u| 0.5 * r1(tau, t) * u[0] * u[0])
            .with_terminal_cost(terminal)
            .with_selector(move |tau, t, _, p, _| {
                let rr = r2(tau, t);
                let u = if p == 0.0 { 0.0 } else { -p.signum() * (p.abs() / rr).min(1.0) };
                smallvec![u]
            }))
    }

    /// `U = (-1,1)`, `b = u`, `g = -R(τ,t,x)·ln(1-u²)`; the minimizer is `-p/(R + √(R²+p²))`.
    pub fn log_barrier(
        horizon: f64,
        r: Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>,
        sigma: CoefTX,
        terminal: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let probe: CoefTT = {
            let r = r.clone();
            Arc::new(move |tau, t| r(tau, t, 0.0))
        };
        check_positive_tt("R", &probe, horizon)?;
        let (r1, r2) = (r.clone(), r);
        Ok(Self::new("log-barrier", horizon, ControlSet::open_interval(-1.0, 1.0)?)?
            .with_drift(|_, _, u| u[0])
            .with_diffusion(move |t, x| sigma(t, x))
            .with_running_cost(move |tau, t, x, u| -r1(tau, t, x) * (1.0 - u[0] * u[0]).ln())
            .with_terminal_cost(terminal)
            .with_selector(move |tau, t, x, p, _| {
                let rr = r2(tau, t, x);
                smallvec![-p / (rr + (rr * rr + p * p).sqrt())]
            }))
    }

    /// Scalar linear-quadratic model with unconstrained control:
    /// `b = A(t)x + B(t)u`, `σ = C(t)x`, `g = Q(τ,t)x² + R(τ,t)u²`, `h = G(τ)x²`.
    ///
    /// The value is `V = P(t)x²` where `P` solves the matrix Riccati system
    /// with the same `(A, B, C, Q, R, G)` data. Dynamics count as
    /// multiplicative, which is exact for linear feedback controls.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar_lq(
        horizon: f64,
        a: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        b: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        c: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        q: CoefTT,
        r: CoefTT,
        g: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    ) -> Result<Self> {
        check_positive_tt("R", &r, horizon)?;
        let (b1, b2) = (b.clone(), b);
        let (r1, r2) = (r.clone(), r);
        Ok(Self::new("scalar-lq", horizon, ControlSet::RealLine)?
            .with_drift(move |t, x, u| a(t) * x + b1(t) * u[0])
            .with_diffusion(move |t, x| c(t) * x)
            .with_running_cost(move |tau, t, x, u| q(tau, t) * x * x + r1(tau, t) * u[0] * u[0])
            .with_terminal_cost(move |tau, x| g(tau) * x * x)
            .with_selector(move |tau, t, _, p, _| smallvec![-b2(t) * p / (2.0 * r2(tau, t))])
            .with_multiplicative_dynamics(true))
    }
}
