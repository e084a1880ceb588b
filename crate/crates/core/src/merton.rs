//! Equilibrium consumption-investment with general discounting.
//!
//! With `Θ(τ,t,x) = φ(τ,t)x^β` the diagonal `z(t) = φ(t,t)/ν(t,t)` solves
//!
//! ```text
//! z(t) = e^{λ(T−t) − β∫_t^T w} R(t) + ∫_t^T e^{λ(s−t) − β∫_t^s w} z(s)w(s) K(t,s) ds,
//! w = z^{1/(β−1)},  K(t,s) = ν(t,s)/ν(t,t),  R(t) = ρ(t)/ν(t,t).
//! ```
//!
//! Dividing through by `ν(t,t)` makes the equation invariant under rescaling the payoff,
//! so no normalization `ν ≤ β` is needed. When `ν(t,t) ≡ 1` this is the familiar form.

use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::grid::TimeGrid;
use crate::oracle::MertonParams;
use crate::quad::{adaptive_simpson, interp_cubic};

/// Fixed-point iteration settings.
#[derive(Debug, Clone)]
pub struct MertonOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Initial damping, halved whenever the defect grows.
    pub omega: f64,
}

impl Default for MertonOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 1000, omega: 0.5 }
    }
}

/// Envelopes for the diagonal `z`.
#[derive(Debug, Clone)]
pub struct EquilibriumBounds {
    /// `e^{(λ−λ̄)(T−t)} min R`.
    pub lower: Vec<f64>,
    /// `e^{λ(T−t)} max R · exp((K_max − β)⁺ ∫_t^T lower^{1/(β−1)})`.
    pub upper: Vec<f64>,
    /// `e^{λ(T−t)} max R`, valid only when `K ≤ β`.
    pub upper_display: Vec<f64>,
    /// `sup −ln K(t,s)/(s−t)`, sampled.
    pub lambda_bar: f64,
    pub kernel_max: f64,
}

#[derive(Debug, Clone)]
pub struct MertonEquilibrium {
    pub grid: TimeGrid,
    pub z: Vec<f64>,
    /// `φ(t,t) = ν(t,t)z(t)` for the payoff as given.
    pub phi_raw: Vec<f64>,
    /// `φ` after scaling the payoff by `scale = min(1, β/max ν)`.
    pub phi_scaled: Vec<f64>,
    pub scale: f64,
    pub bounds: EquilibriumBounds,
    pub iterations: usize,
    /// `‖F(z) − z‖_∞` at the returned iterate.
    pub residual: f64,
    beta: f64,
    lambda: f64,
    invest: f64,
}

impl MertonEquilibrium {
    /// `z(t)` by cubic interpolation.
    pub fn z_at(&self, t: f64) -> f64 {
        interp_cubic(self.grid.nodes(), &self.z, t)
    }

    /// Consumption per unit wealth, `z(t)^{1/(β−1)}`.
    pub fn consumption_coefficient(&self, t: f64) -> f64 {
        self.z_at(t).powf(1.0 / (self.beta - 1.0))
    }

    /// Investment per unit wealth.
    pub fn investment_coefficient(&self) -> f64 {
        self.invest
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Discretized fixed-point problem shared by the equilibrium and the unnormalized solver.
struct ZProblem {
    nodes: Vec<f64>,
    /// Row `j` holds `K(t_j, t_k)` for `k = j..=N`.
    kernel: Vec<Vec<f64>>,
    r: Vec<f64>,
    lambda: f64,
    beta: f64,
}

impl ZProblem {
    /// Right side of the fixed-point equation at every node, trapezoid in `s`.
    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let q = 1.0 / (self.beta - 1.0);
        let nodes = &self.nodes;
        let n = nodes.len() - 1;
        let horizon = nodes[n];
        let w: Vec<f64> = z.iter().map(|v| v.powf(q)).collect();
        // c[k] = ∫_{t_k}^T w
        let mut c = vec![0.0; n + 1];
        for k in (0..n).rev() {
            c[k] = c[k + 1] + 0.5 * (nodes[k + 1] - nodes[k]) * (w[k] + w[k + 1]);
        }
        let zw: Vec<f64> = z.iter().zip(&w).map(|(a, b)| a * b).collect();
        (0..=n)
            .into_par_iter()
            .map(|j| {
                let tj = nodes[j];
                let head = (self.lambda * (horizon - tj) - self.beta * c[j]).exp() * self.r[j];
                let row = &self.kernel[j];
                let f = |k: usize| (self.lambda * (nodes[k] - tj) - self.beta * (c[j] - c[k])).exp() * zw[k] * row[k - j];
                let mut tail = 0.0;
                let mut prev = f(j);
                for k in j + 1..=n {
                    let cur = f(k);
                    tail += 0.5 * (nodes[k] - nodes[k - 1]) * (prev + cur);
                    prev = cur;
                }
                head + tail
            })
            .collect()
    }

    fn solve(&self, lower: &[f64], upper: &[f64], opts: &MertonOptions) -> Result<(Vec<f64>, usize, f64)> {
        let n = self.nodes.len() - 1;
        let horizon = self.nodes[n];
        let project = |z: &mut [f64]| {
            for ((v, lo), hi) in z.iter_mut().zip(lower).zip(upper) {
                *v = v.clamp(*lo, *hi);
            }
        };
        let mut z: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.r)
            .map(|(&t, &r)| (self.lambda * (horizon - t)).exp() * r)
            .collect();
        project(&mut z);
        let mut omega = opts.omega;
        let mut last_defect = f64::INFINITY;
        for it in 1..=opts.max_iter {
            let fz = self.apply(&z);
            let defect = sup_diff(&fz, &z);
            if defect > last_defect {
                omega = (0.5 * omega).max(1.0 / 1024.0);
            }
            last_defect = defect;
            let mut next: Vec<f64> = z.iter().zip(&fz).map(|(a, b)| (1.0 - omega) * a + omega * b).collect();
            project(&mut next);
            let step = sup_diff(&next, &z);
            z = next;
            if step <= opts.tol {
                let residual = sup_diff(&self.apply(&z), &z);
                return Ok((z, it, residual));
            }
        }
        Err(Error::NoConvergence(format!(
            "equilibrium fixed point: defect {last_defect:e} after {} iterations",
            opts.max_iter
        )))
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_grid(params: &MertonParams, grid: &TimeGrid) -> Result<()> {
    if grid.steps() < 2 {
        return Err(Error::InvalidGrid("need at least two steps".into()));
    }
    if (grid.horizon() - params.horizon).abs() > 1e-12 * (1.0 + params.horizon) {
        return Err(Error::InvalidGrid(format!("grid ends at {} but T = {}", grid.horizon(), params.horizon)));
    }
    Ok(())
}

/// Sample `ν` on the grid's lower triangle; errors on non-positive values.
fn kernel_rows(params: &MertonParams, grid: &TimeGrid, normalize: bool) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let nodes = grid.nodes();
    let rows: Vec<Result<(Vec<f64>, f64)>> = (0..nodes.len())
        .into_par_iter()
        .map(|j| {
            let tj = nodes[j];
            let diag = params.nu(tj, tj);
            let mut row = Vec::with_capacity(nodes.len() - j);
            for &s in &nodes[j..] {
                let v = params.nu(tj, s);
                if !(v > 0.0) || !v.is_finite() {
                    return domain(format!("ν({tj}, {s}) = {v} must be positive"));
                }
                row.push(if normalize { v / diag } else { v });
            }
            let rho = params.rho(tj);
            if !(rho > 0.0) || !rho.is_finite() {
                return domain(format!("ρ({tj}) = {rho} must be positive"));
            }
            Ok((row, if normalize { rho / diag } else { rho }))
        })
        .collect();
    let mut kernel = Vec::with_capacity(nodes.len());
    let mut r = Vec::with_capacity(nodes.len());
    for row in rows {
        let (k, v) = row?;
        kernel.push(k);
        r.push(v);
    }
    Ok((kernel, r))
}

/// `sup −ln K(t,s)/(s−t)` over all node pairs of `nodes` and near-diagonal offsets.
fn sampled_lambda_bar(params: &MertonParams, nodes: &[f64], normalize: bool) -> f64 {
    let h = nodes.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let horizon = *nodes.last().unwrap();
    (0..nodes.len() - 1)
        .into_par_iter()
        .map(|i| {
            let t = nodes[i];
            let d = if normalize { params.nu(t, t) } else { 1.0 };
            let ratio = |s: f64| -(params.nu(t, s) / d).ln() / (s - t);
            let far = nodes[i + 1..].iter().map(|&s| ratio(s)).fold(f64::NEG_INFINITY, f64::max);
            [1e-2, 1e-4].iter().map(|f| ratio((t + f * h).min(horizon))).fold(far, f64::max)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

/// Lower and upper envelopes for `z` on `grid`.
///
/// `λ̄` is sampled on successive refinements of (a subsample of) the grid; if the
/// sample keeps growing by a fixed factor under refinement the kernel is reported unbounded.
pub fn equilibrium_bounds(params: &MertonParams, grid: &TimeGrid) -> Result<EquilibriumBounds> {
    bounds_for(params, grid, true)
}

fn bounds_for(params: &MertonParams, grid: &TimeGrid, normalize: bool) -> Result<EquilibriumBounds> {
    check_grid(params, grid)?;
    let stride = (grid.steps() / 256).max(1);
    let mut base: Vec<f64> = grid.nodes().iter().step_by(stride).copied().collect();
    if *base.last().unwrap() != grid.horizon() {
        base.push(grid.horizon());
    }
    let base = TimeGrid::new(base)?;
    let samples: Vec<f64> = [2, 4, 8]
        .iter()
        .map(|&f| sampled_lambda_bar(params, base.refine(f).nodes(), normalize))
        .collect();
    let lambda_bar = samples[2];
    if samples[0] > 0.0 && samples[1] >= 1.35 * samples[0] && samples[2] >= 1.35 * samples[1] {
        return Err(Error::UnboundedKernel { coarse: samples[0], fine: samples[2] });
    }

    let (kernel, r) = kernel_rows(params, grid, normalize)?;
    let kernel_max = kernel.iter().flatten().copied().fold(0.0, f64::max);
    let (r_min, r_max) = r.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    let lambda = params.lambda();
    let beta = params.beta;
    let horizon = params.horizon;
    let q = 1.0 / (beta - 1.0);
    let a = lambda - lambda_bar;
    let nodes = grid.nodes();
    let lower: Vec<f64> = nodes.iter().map(|&t| (a * (horizon - t)).exp() * r_min).collect();
    let upper_display: Vec<f64> = nodes.iter().map(|&t| (lambda * (horizon - t)).exp() * r_max).collect();
    let excess = (kernel_max - beta).max(0.0);
    let upper = nodes
        .iter()
        .zip(&upper_display)
        .map(|(&t, &u)| {
            // ∫_t^T (r_min e^{a(T−s)})^q ds in closed form
            let d = horizon - t;
            let qa = q * a;
            let int = if qa.abs() < 1e-12 { d } else { ((qa * d).exp() - 1.0) / qa };
            u * (excess * r_min.powf(q) * int).exp()
        })
        .collect();
    Ok(EquilibriumBounds { lower, upper, upper_display, lambda_bar, kernel_max })
}

pub fn solve_merton_equilibrium(
    params: &MertonParams,
    grid: &TimeGrid,
    tol: f64,
    max_iter: usize,
) -> Result<MertonEquilibrium> {
    solve_merton_equilibrium_with(params, grid, &MertonOptions { tol, max_iter, ..Default::default() })
}

pub fn solve_merton_equilibrium_with(params: &MertonParams, grid: &TimeGrid, opts: &MertonOptions) -> Result<MertonEquilibrium> {
    solve_impl(params, grid, opts, true)
}

/// The fixed-point equation with `ν` and `ρ` in place of `K` and `R` (no division by `ν(t,t)`).
///
/// Only equivalent to the equilibrium when `ν(t,t) ≡ 1`. Kept so that the envelope
/// `e^{λ(T−t)} max ρ`, which needs `ν ≤ β`, can be checked on the equation it was derived for.
pub fn solve_unnormalized_z(params: &MertonParams, grid: &TimeGrid, opts: &MertonOptions) -> Result<MertonEquilibrium> {
    solve_impl(params, grid, opts, false)
}

fn solve_impl(params: &MertonParams, grid: &TimeGrid, opts: &MertonOptions, normalize: bool) -> Result<MertonEquilibrium> {
    check_grid(params, grid)?;
    if !(opts.tol > 0.0) || !(opts.omega > 0.0 && opts.omega <= 1.0) {
        return domain(format!("need tol > 0 and ω in (0,1], got tol={}, ω={}", opts.tol, opts.omega));
    }
    let (kernel, r) = kernel_rows(params, grid, normalize)?;
    let bounds = if normalize {
        bounds_for(params, grid, true)?
    } else {
        // the sampled λ̄ is infinite once ν(t,t) < 1, so only positivity bounds the iterates below
        let r_max = r.iter().copied().fold(0.0, f64::max);
        let upper: Vec<f64> =
            grid.nodes().iter().map(|&t| (params.lambda() * (params.horizon - t)).exp() * r_max).collect();
        let kernel_max = kernel.iter().flatten().copied().fold(0.0, f64::max);
        let upper = if kernel_max <= params.beta { upper } else { vec![f64::INFINITY; r.len()] };
        EquilibriumBounds {
            lower: vec![f64::MIN_POSITIVE; r.len()],
            upper_display: grid.nodes().iter().map(|&t| (params.lambda() * (params.horizon - t)).exp() * r_max).collect(),
            upper,
            lambda_bar: f64::INFINITY,
            kernel_max,
        }
    };
    let problem = ZProblem { nodes: grid.nodes().to_vec(), kernel, r, lambda: params.lambda(), beta: params.beta };
    let (z, iterations, residual) = problem.solve(&bounds.lower, &bounds.upper, opts)?;

    let nodes = grid.nodes();
    let nu_max = nodes
        .iter()
        .enumerate()
        .flat_map(|(i, &t)| nodes[i..].iter().map(move |&s| params.nu(t, s)))
        .fold(0.0, f64::max);
    let scale = (params.beta / nu_max).min(1.0);
    let phi_raw: Vec<f64> = if normalize {
        nodes.iter().zip(&z).map(|(&t, &v)| params.nu(t, t) * v).collect()
    } else {
        z.clone()
    };
    let phi_scaled = phi_raw.iter().map(|v| scale * v).collect();
    Ok(MertonEquilibrium {
        grid: grid.clone(),
        z,
        phi_raw,
        phi_scaled,
        scale,
        bounds,
        iterations,
        residual,
        beta: params.beta,
        lambda: params.lambda(),
        invest: params.investment_fraction(),
    })
}

/// `(u, c)` per the equilibrium: `u = (μ−r)x/(σ²(1−β))`, `c = z(t)^{1/(β−1)}x`.
pub fn merton_equilibrium_feedback(eq: &MertonEquilibrium, t: f64, x: f64) -> Result<(f64, f64)> {
    if !(x >= 0.0) {
        return domain(format!("wealth must be nonnegative, got {x}"));
    }
    if x == 0.0 {
        return Ok((0.0, 0.0));
    }
    Ok((eq.invest * x, eq.consumption_coefficient(t) * x))
}

/// `φ(τ,t)` off the diagonal from the solved `z`, so that `Θ(τ,t,x) = φ(τ,t)x^β`.
pub fn merton_theta_offdiagonal(eq: &MertonEquilibrium, params: &MertonParams, tau: f64, t: f64) -> f64 {
    let nodes = eq.grid.nodes();
    let horizon = params.horizon;
    let q = 1.0 / (eq.beta - 1.0);
    let n = nodes.len() - 1;
    let mut c = vec![0.0; n + 1];
    for k in (0..n).rev() {
        c[k] = c[k + 1] + adaptive_simpson(|s| eq.z_at(s).powf(q), nodes[k], nodes[k + 1], 1e-13);
    }
    let cum = |s: f64| interp_cubic(nodes, &c, s);
    let wz = |s: f64| {
        let z = eq.z_at(s);
        z * z.powf(q)
    };
    let ct = cum(t);
    let head = (eq.lambda * (horizon - t) - eq.beta * ct).exp() * params.rho(tau);
    let tail = adaptive_simpson(
        |s| (eq.lambda * (s - t) - eq.beta * (ct - cum(s))).exp() * wz(s) * params.nu(tau, s),
        t,
        horizon,
        1e-12,
    );
    head + tail
}
