//! Problem data, the Hamiltonian, and the minimizer selector ψ.
//!
//! Costs are minimized. The Hamiltonian is
//! `ℍ(τ,t,x,u,p,P) = b(t,x,u)·p + a(t,x,u)·P + g(τ,t,x,u)` with `a = σ²/2`.

mod catalog;
pub mod expr;
mod search;

use std::fmt;
use std::sync::Arc;

use smallvec::{smallvec, SmallVec};

use crate::error::{domain, Error, Result};

pub use catalog::{CoefTT, CoefTX};

/// A control value; scalar controls use one slot.
pub type Control = SmallVec<[f64; 2]>;

/// Default golden-section tolerance for the numeric selector.
pub const TOL_SEARCH: f64 = 1e-8;

/// The admissible control set `U`.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlSet {
    /// Closed interval; either bound may be infinite.
    Interval { lo: f64, hi: f64 },
    /// Open interval `(lo, hi)`.
    OpenInterval { lo: f64, hi: f64 },
    /// All of ℝ.
    RealLine,
    /// Product of closed intervals in `m` dimensions; bounds may be infinite.
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl ControlSet {
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return domain(format!("interval needs lo < hi, got [{lo}, {hi}]"));
        }
        Ok(Self::Interval { lo, hi })
    }

    pub fn open_interval(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return domain(format!("interval needs lo < hi, got ({lo}, {hi})"));
        }
        Ok(Self::OpenInterval { lo, hi })
    }

    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return domain("box bounds must be nonempty and of equal length");
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return domain("box bounds must satisfy lo < hi componentwise");
        }
        Ok(Self::Box { lo, hi })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Box { lo, .. } => lo.len(),
            _ => 1,
        }
    }

    /// Bounds of coordinate `i` (closure bounds for open intervals).
    pub fn bounds(&self, i: usize) -> (f64, f64) {
        match self {
            Self::Interval { lo, hi } | Self::OpenInterval { lo, hi } => (*lo, *hi),
            Self::RealLine => (f64::NEG_INFINITY, f64::INFINITY),
            Self::Box { lo, hi } => (lo[i], hi[i]),
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        if u.len() != self.dim() || u.iter().any(|v| v.is_nan()) {
            return false;
        }
        match self {
            Self::OpenInterval { lo, hi } => u[0] > *lo && u[0] < *hi,
            _ => (0..self.dim()).all(|i| {
                let (lo, hi) = self.bounds(i);
                u[i] >= lo && u[i] <= hi
            }),
        }
    }

    /// Componentwise clamp onto the closure of the set.
    pub fn project(&self, u: &[f64]) -> Control {
        (0..self.dim())
            .map(|i| {
                let (lo, hi) = self.bounds(i);
                u[i].clamp(lo, hi)
            })
            .collect()
    }

    /// The point of smallest norm in the closure of the set.
    pub fn smallest_norm_point(&self) -> Control {
        let zero: Control = smallvec![0.0; self.dim()];
        self.project(&zero)
    }

    pub fn is_bounded(&self) -> bool {
        (0..self.dim()).all(|i| {
            let (lo, hi) = self.bounds(i);
            lo.is_finite() && hi.is_finite()
        })
    }
}

pub(crate) type StateFn = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;
pub(crate) type CostFn = Arc<dyn Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync>;
pub(crate) type TerminalFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub(crate) type SelectorFn = Arc<dyn Fn(f64, f64, f64, f64, f64) -> Control + Send + Sync>;
pub(crate) type SwitchFn = Arc<dyn Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync>;

/// Coefficients of a scalar-state controlled diffusion with two-time costs.
///
/// Built with [`GeneralModel::new`] and the chained setters. Unset
/// coefficients default to zero.
#[derive(Clone)]
pub struct GeneralModel {
    name: String,
    horizon: f64,
    control_set: ControlSet,
    drift: StateFn,
    diffusion: StateFn,
    running_cost: CostFn,
    terminal_cost: TerminalFn,
    diffusion_control_free: bool,
    selector: Option<SelectorFn>,
    switching: Option<SwitchFn>,
    cost_floor: (f64, f64),
    multiplicative: bool,
}

impl fmt::Debug for GeneralModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralModel")
            .field("name", &self.name)
            .field("horizon", &self.horizon)
            .field("control_set", &self.control_set)
            .field("diffusion_control_free", &self.diffusion_control_free)
            .field("catalog_selector", &self.selector.is_some())
            .field("discontinuous_selector", &self.switching.is_some())
            .field("cost_floor", &self.cost_floor)
            .finish()
    }
}

impl GeneralModel {
    pub fn new(name: impl Into<String>, horizon: f64, control_set: ControlSet) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return domain(format!("horizon must be positive and finite, got {horizon}"));
        }
        Ok(Self {
            name: name.into(),
            horizon,
            control_set,
            drift: Arc::new(|_, _, _| 0.0),
            diffusion: Arc::new(|_, _, _| 0.0),
            running_cost: Arc::new(|_, _, _, _| 0.0),
            terminal_cost: Arc::new(|_, _| 0.0),
            diffusion_control_free: true,
            selector: None,
            switching: None,
            cost_floor: (0.0, 0.0),
            multiplicative: false,
        })
    }

    /// Drift `b(t, x, u)`.
    pub fn with_drift(mut self, f: impl Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(f);
        self
    }

    /// Control-free diffusion `σ(t, x)`.
    pub fn with_diffusion(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.diffusion = Arc::new(move |t, x, _| f(t, x));
        self.diffusion_control_free = true;
        self
    }

    /// Diffusion `σ(t, x, u)` that depends on the control.
    pub fn with_controlled_diffusion(mut self, f: impl Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.diffusion = Arc::new(f);
        self.diffusion_control_free = false;
        self
    }

    /// Running cost `g(τ, t, x, u)`.
    pub fn with_running_cost(mut self, f: impl Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.running_cost = Arc::new(f);
        self
    }

    /// Terminal cost `h(τ, x)`.
    pub fn with_terminal_cost(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal_cost = Arc::new(f);
        self
    }

    /// Closed-form minimizer `ψ(τ, t, x, p, P)`.
    pub fn with_selector(mut self, f: impl Fn(f64, f64, f64, f64, f64) -> Control + Send + Sync + 'static) -> Self {
        self.selector = Some(Arc::new(f));
        self
    }

    /// Marks the selector as discontinuous across the zero set of `s(τ, t, x, p, P)`.
    pub fn with_switching(mut self, f: impl Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.switching = Some(Arc::new(f));
        self
    }

    /// Declared lower bounds of `g` and `h`; both are shifted so the bounds become zero.
    pub fn with_cost_floor(mut self, g_min: f64, h_min: f64) -> Self {
        self.cost_floor = (g_min, h_min);
        self
    }

    /// Declares `b` and `σ` proportional to `x`, which admits the log-Euler scheme.
    pub fn with_multiplicative_dynamics(mut self, yes: bool) -> Self {
        self.multiplicative = yes;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn control_set(&self) -> &ControlSet {
        &self.control_set
    }

    pub fn diffusion_control_free(&self) -> bool {
        self.diffusion_control_free
    }

    pub fn has_catalog_selector(&self) -> bool {
        self.selector.is_some()
    }

    pub fn has_discontinuous_selector(&self) -> bool {
        self.switching.is_some()
    }

    /// Declared `(g_min, h_min)`; [`g`](Self::g) and [`h`](Self::h) return costs minus these.
    pub fn cost_floor(&self) -> (f64, f64) {
        self.cost_floor
    }

    pub fn multiplicative(&self) -> bool {
        self.multiplicative
    }

    #[inline]
    pub fn b(&self, t: f64, x: f64, u: &[f64]) -> f64 {
        (self.drift)(t, x, u)
    }

    #[inline]
    pub fn sigma(&self, t: f64, x: f64, u: &[f64]) -> f64 {
        (self.diffusion)(t, x, u)
    }

    /// `a = σ²/2`.
    #[inline]
    pub fn a(&self, t: f64, x: f64, u: &[f64]) -> f64 {
        let s = self.sigma(t, x, u);
        0.5 * s * s
    }

    #[inline]
    pub fn g(&self, tau: f64, t: f64, x: f64, u: &[f64]) -> f64 {
        (self.running_cost)(tau, t, x, u) - self.cost_floor.0
    }

    #[inline]
    pub fn h(&self, tau: f64, x: f64) -> f64 {
        (self.terminal_cost)(tau, x) - self.cost_floor.1
    }

    /// Switching function whose sign change marks a selector discontinuity.
    pub fn switching(&self, tau: f64, t: f64, x: f64, p: f64, pp: f64) -> Option<f64> {
        self.switching.as_ref().map(|s| s(tau, t, x, p, pp))
    }

    /// ℍ without domain checks.
    #[inline]
    pub fn ham(&self, tau: f64, t: f64, x: f64, u: &[f64], p: f64, pp: f64) -> f64 {
        self.b(t, x, u) * p + self.a(t, x, u) * pp + self.g(tau, t, x, u)
    }

    fn check_times(&self, tau: f64, t: f64) -> Result<()> {
        let eps = 1e-12 * self.horizon;
        if !(tau >= -eps && tau <= t + eps && t <= self.horizon + eps) {
            return domain(format!("need 0 <= τ <= t <= T, got τ={tau}, t={t}, T={}", self.horizon));
        }
        Ok(())
    }

    /// Samples `g` and `h` on a lattice over `[0,T]² × [x_lo, x_hi] × U` and
    /// rejects negative values.
    pub fn validate_costs(&self, x_lo: f64, x_hi: f64) -> Result<()> {
        let m = self.control_set.dim();
        let mut controls: Vec<Control> = Vec::new();
        let coord = |i: usize| -> Vec<f64> {
            let (lo, hi) = self.control_set.bounds(i);
            let (lo, hi) = (lo.max(-10.0), hi.min(10.0));
            let (lo, hi) = match self.control_set {
                ControlSet::OpenInterval { .. } => {
                    let pad = 1e-3 * (hi - lo);
                    (lo + pad, hi - pad)
                }
                _ => (lo, hi),
            };
            (0..=6).map(|k| lo + (hi - lo) * k as f64 / 6.0).collect()
        };
        if m == 1 {
            controls.extend(coord(0).into_iter().map(|v| smallvec![v]));
        } else {
            let axes: Vec<Vec<f64>> = (0..m).map(coord).collect();
            for k in 0..7usize.pow(m.min(3) as u32) {
                let mut u: Control = smallvec![0.0; m];
                let mut r = k;
                for (i, axis) in axes.iter().enumerate().take(3) {
                    u[i] = axis[r % 7];
                    r /= 7;
                }
                controls.push(u);
            }
        }
        let tol = 1e-12;
        for it in 0..=4 {
            let tau = self.horizon * it as f64 / 4.0;
            for ix in 0..=8 {
                let x = x_lo + (x_hi - x_lo) * ix as f64 / 8.0;
                let hv = self.h(tau, x);
                if hv < -tol {
                    return domain(format!(
                        "terminal cost h({tau}, {x}) = {hv} < 0; declare a lower bound with with_cost_floor"
                    ));
                }
                for jt in it..=4 {
                    let t = self.horizon * jt as f64 / 4.0;
                    for u in &controls {
                        let gv = self.g(tau, t, x, u);
                        if gv < -tol {
                            return domain(format!(
                                "running cost g({tau}, {t}, {x}, {u:?}) = {gv} < 0; declare a lower bound with with_cost_floor"
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Outcome of minimizing the Hamiltonian over `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorResult {
    pub u_star: Control,
    /// ℍ at `u_star` (ℍ + ε|u|² for regularized calls).
    pub value: f64,
    /// Whether the infimum is attained.
    pub achieved: bool,
}

/// Tolerances for the numeric selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectorOptions {
    pub tol: f64,
    /// ε used to report a near-minimizer when the infimum is not attained.
    pub regularization_eps: f64,
}

impl Default for SelectorOptions {
    fn default() -> Self {
        Self { tol: TOL_SEARCH, regularization_eps: 1e-6 }
    }
}

/// ℍ(τ,t,x,u,p,P) with domain checks.
pub fn hamiltonian(model: &GeneralModel, tau: f64, t: f64, x: f64, u: &[f64], p: f64, pp: f64) -> Result<f64> {
    model.check_times(tau, t)?;
    if !model.control_set.contains(u) {
        return domain(format!("control {u:?} is outside U = {:?}", model.control_set));
    }
    Ok(model.ham(tau, t, x, u, p, pp))
}

/// ψ(τ,t,x,p,P) with default options.
pub fn minimize_hamiltonian(model: &GeneralModel, tau: f64, t: f64, x: f64, p: f64, pp: f64) -> Result<SelectorResult> {
    minimize_hamiltonian_with(model, tau, t, x, p, pp, &SelectorOptions::default())
}

/// ψ(τ,t,x,p,P): the catalog closed form if the model has one, else a numeric search.
pub fn minimize_hamiltonian_with(
    model: &GeneralModel,
    tau: f64,
    t: f64,
    x: f64,
    p: f64,
    pp: f64,
    opts: &SelectorOptions,
) -> Result<SelectorResult> {
    model.check_times(tau, t)?;
    Ok(select_unchecked(model, tau, t, x, p, pp, opts))
}

pub(crate) fn select_unchecked(
    model: &GeneralModel,
    tau: f64,
    t: f64,
    x: f64,
    p: f64,
    pp: f64,
    opts: &SelectorOptions,
) -> SelectorResult {
    if let Some(sel) = &model.selector {
        let u = sel(tau, t, x, p, pp);
        let value = model.ham(tau, t, x, &u, p, pp);
        return SelectorResult { u_star: u, value, achieved: true };
    }
    let f = |u: &[f64]| model.ham(tau, t, x, u, p, pp);
    let (u, value, achieved) = search::minimize(&f, &model.control_set, opts.tol);
    if achieved {
        return SelectorResult { u_star: u, value, achieved };
    }
    let eps = opts.regularization_eps;
    let fe = |u: &[f64]| f(u) + eps * norm2(u);
    let (u, _, _) = search::minimize(&fe, &model.control_set, opts.tol);
    let value = f(&u);
    SelectorResult { u_star: u, value, achieved: false }
}

/// Minimizes ℍ + ε|u|²; `value` is the regularized minimum.
pub fn regularized_minimize(
    model: &GeneralModel,
    eps: f64,
    tau: f64,
    t: f64,
    x: f64,
    p: f64,
    pp: f64,
) -> Result<SelectorResult> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Domain(format!("regularization ε must be positive, got {eps}")));
    }
    model.check_times(tau, t)?;
    let f = |u: &[f64]| model.ham(tau, t, x, u, p, pp) + eps * norm2(u);
    let (u, value, achieved) = search::minimize(&f, &model.control_set, TOL_SEARCH * 1e-2);
    Ok(SelectorResult { u_star: u, value, achieved })
}

fn norm2(u: &[f64]) -> f64 {
    u.iter().map(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_set_membership() {
        let i = ControlSet::interval(0.0, 1.0).unwrap();
        assert!(i.contains(&[0.0]) && i.contains(&[1.0]) && !i.contains(&[1.5]));
        let o = ControlSet::open_interval(-1.0, 1.0).unwrap();
        assert!(!o.contains(&[1.0]) && o.contains(&[0.99]));
        assert!(ControlSet::interval(1.0, 1.0).is_err());
        assert!(ControlSet::boxed(vec![0.0, 1.0], vec![1.0, 0.5]).is_err());
        let b = ControlSet::boxed(vec![1.0, -2.0], vec![2.0, 3.0]).unwrap();
        assert_eq!(b.smallest_norm_point().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn hamiltonian_rejects_bad_domain() {
        let m = GeneralModel::new("z", 1.0, ControlSet::interval(-1.0, 1.0).unwrap()).unwrap();
        assert!(hamiltonian(&m, 0.6, 0.5, 0.0, &[0.0], 0.0, 0.0).is_err());
        assert!(hamiltonian(&m, 0.1, 0.5, 0.0, &[2.0], 0.0, 0.0).is_err());
        assert_eq!(hamiltonian(&m, 0.1, 0.5, 0.0, &[0.5], 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn cost_validation_needs_floor_for_negative_costs() {
        let m = GeneralModel::new("neg", 1.0, ControlSet::interval(-1.0, 1.0).unwrap())
            .unwrap()
            .with_running_cost(|_, _, _, u| u[0] - 1.0);
        assert!(m.validate_costs(-1.0, 1.0).is_err());
        let m = m.with_cost_floor(-2.0, 0.0);
        assert!(m.validate_costs(-1.0, 1.0).is_ok());
    }
}
