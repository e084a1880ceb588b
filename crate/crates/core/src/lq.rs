//! Time-inconsistent linear-quadratic problems with deterministic coefficients.
//!
//! With `Θ(τ,t,x) = ½⟨P(τ,t)x,x⟩` the equilibrium HJB system becomes a family of
//! linear matrix ODEs in `t`, one per `τ`, coupled only through the gain
//!
//! ```text
//! Γ(t) = [R(t,t) + B₁ᵀP(t,t)B₁]⁻¹ [BᵀP(t,t) + B₁ᵀP(t,t)A₁]
//! P_t + PÂ + ÂᵀP + Â₁ᵀPÂ₁ + Q(τ,t) + ΓᵀR(τ,t)Γ = 0,   P(τ,T) = G(τ)
//! ```
//!
//! with `Â = A − BΓ`, `Â₁ = A₁ − B₁Γ`. The solver marches this backward in `t`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::grid::{TimeGrid, TriangularGrid};
use crate::quad::lagrange_weights;

pub type Mat = DMatrix<f64>;
pub type MatFn = Arc<dyn Fn(f64) -> Mat + Send + Sync>;
pub type MatFn2 = Arc<dyn Fn(f64, f64) -> Mat + Send + Sync>;

const COND_MAX: f64 = 1e12;
const PSD_TOL: f64 = 1e-8;

/// Coefficients of
/// `dX = (AX + Bu)ds + (A₁X + B₁u)dW`,
/// `J(τ; u) = E[∫ ½(⟨Q(τ,s)X,X⟩ + ⟨R(τ,s)u,u⟩)ds + ½⟨G(τ)X(T),X(T)⟩]`.
#[derive(Clone)]
pub struct LQModel {
    pub a: MatFn,
    pub a1: MatFn,
    pub b: MatFn,
    pub b1: MatFn,
    pub q: MatFn2,
    pub r: MatFn2,
    pub g: MatFn,
    pub horizon: f64,
    pub n: usize,
    pub m: usize,
}

impl std::fmt::Debug for LQModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LQModel").field("n", &self.n).field("m", &self.m).field("horizon", &self.horizon).finish()
    }
}

/// Wrap a scalar function of one time into a 1×1 matrix function.
pub fn scalar1(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> MatFn {
    Arc::new(move |t| Mat::from_element(1, 1, f(t)))
}

/// Wrap a scalar function of `(τ, t)` into a 1×1 matrix function.
pub fn scalar2(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> MatFn2 {
    Arc::new(move |tau, t| Mat::from_element(1, 1, f(tau, t)))
}

impl LQModel {
    /// Zero dynamics and state cost, `R = I`, `G = 0`.
    pub fn new(n: usize, m: usize, horizon: f64) -> Self {
        Self {
            a: Arc::new(move |_| Mat::zeros(n, n)),
            a1: Arc::new(move |_| Mat::zeros(n, n)),
            b: Arc::new(move |_| Mat::zeros(n, m)),
            b1: Arc::new(move |_| Mat::zeros(n, m)),
            q: Arc::new(move |_, _| Mat::zeros(n, n)),
            r: Arc::new(move |_, _| Mat::identity(m, m)),
            g: Arc::new(move |_| Mat::zeros(n, n)),
            horizon,
            n,
            m,
        }
    }

    pub fn with_a(mut self, f: MatFn) -> Self {
        self.a = f;
        self
    }
    pub fn with_a1(mut self, f: MatFn) -> Self {
        self.a1 = f;
        self
    }
    pub fn with_b(mut self, f: MatFn) -> Self {
        self.b = f;
        self
    }
    pub fn with_b1(mut self, f: MatFn) -> Self {
        self.b1 = f;
        self
    }
    pub fn with_q(mut self, f: MatFn2) -> Self {
        self.q = f;
        self
    }
    pub fn with_r(mut self, f: MatFn2) -> Self {
        self.r = f;
        self
    }
    pub fn with_g(mut self, f: MatFn) -> Self {
        self.g = f;
        self
    }

    /// Scalar `dX = u ds + σX dW` with cost `∫u² + g(τ)X(T)²`, so that `V = P x²`.
    pub fn scalar_multiplicative(sigma: f64, horizon: f64, g: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(1, 1, horizon)
            .with_b(scalar1(|_| 1.0))
            .with_a1(scalar1(move |_| sigma))
            .with_g(scalar1(g))
    }

    /// Whether `A₁` and `B₁` vanish at every node of `grid`.
    pub fn is_deterministic_on(&self, grid: &TimeGrid) -> bool {
        grid.nodes().iter().all(|&t| (self.a1)(t).amax() == 0.0 && (self.b1)(t).amax() == 0.0)
    }

    fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return domain("LQ dimensions must be positive");
        }
        if grid.len() < 8 {
            return Err(Error::InvalidGrid(format!("need at least 8 time nodes, got {}", grid.len())));
        }
        if (grid.horizon() - self.horizon).abs() > 1e-12 * (1.0 + self.horizon) {
            return Err(Error::InvalidGrid(format!("grid ends at {} but T = {}", grid.horizon(), self.horizon)));
        }
        let stride = (grid.len() / 32).max(1);
        let sample: Vec<f64> = grid.nodes().iter().step_by(stride).copied().chain([grid.horizon()]).collect();
        let (n, m) = (self.n, self.m);
        for &t in &sample {
            shape(&(self.a)(t), n, n, "A")?;
            shape(&(self.a1)(t), n, n, "A1")?;
            shape(&(self.b)(t), n, m, "B")?;
            shape(&(self.b1)(t), n, m, "B1")?;
            let g = (self.g)(t);
            shape(&g, n, n, "G")?;
            check_sym(&g, "G", t, t, false)?;
            for &tau in sample.iter().filter(|&&s| s <= t) {
                let q = (self.q)(tau, t);
                shape(&q, n, n, "Q")?;
                check_sym(&q, "Q", tau, t, false)?;
                let r = (self.r)(tau, t);
                shape(&r, m, m, "R")?;
                check_sym(&r, "R", tau, t, true)?;
            }
        }
        Ok(())
    }
}

fn shape(mat: &Mat, r: usize, c: usize, name: &str) -> Result<()> {
    if mat.nrows() != r || mat.ncols() != c {
        return domain(format!("{name} is {}x{}, expected {r}x{c}", mat.nrows(), mat.ncols()));
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return domain(format!("{name} has non-finite entries"));
    }
    Ok(())
}

fn check_sym(mat: &Mat, name: &str, tau: f64, t: f64, definite: bool) -> Result<()> {
    let scale = 1.0 + mat.amax();
    if (mat - mat.transpose()).amax() > 1e-12 * scale {
        return domain(format!("{name}({tau},{t}) is not symmetric"));
    }
    let min = mat.clone().symmetric_eigenvalues().min();
    if definite && min <= 0.0 {
        return domain(format!("{name}({tau},{t}) is not positive definite (min eigenvalue {min})"));
    }
    if !definite && min < -1e-12 * scale {
        return domain(format!("{name}({tau},{t}) is not positive semidefinite (min eigenvalue {min})"));
    }
    Ok(())
}

fn symmetrize(p: &mut Mat) {
    let n = p.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

/// `[R(τ,t) + B₁ᵀPB₁]⁻¹ [BᵀP + B₁ᵀPA₁]`.
fn gain(model: &LQModel, tau: f64, t: f64, p: &Mat) -> Result<Mat> {
    let b = (model.b)(t);
    let b1 = (model.b1)(t);
    let a1 = (model.a1)(t);
    let bracket = (model.r)(tau, t) + b1.transpose() * p * &b1;
    let sv = bracket.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond <= COND_MAX) {
        return Err(Error::SingularGain { t, cond });
    }
    let rhs = b.transpose() * p + b1.transpose() * p * a1;
    bracket.lu().solve(&rhs).ok_or(Error::SingularGain { t, cond })
}

/// Closed-loop coefficients at one time.
struct Closed {
    t: f64,
    ah: Mat,
    a1h: Mat,
    gamma: Mat,
}

impl Closed {
    fn new(model: &LQModel, t: f64, gamma: Mat) -> Self {
        let ah = (model.a)(t) - (model.b)(t) * &gamma;
        let a1h = (model.a1)(t) - (model.b1)(t) * &gamma;
        Self { t, ah, a1h, gamma }
    }

    /// `dP/dt` for the row with index `tau`.
    fn rate(&self, model: &LQModel, tau: f64, p: &Mat) -> Mat {
        let qh = (model.q)(tau, self.t) + self.gamma.transpose() * (model.r)(tau, self.t) * &self.gamma;
        let pa = p * &self.ah;
        -(&pa + pa.transpose() + self.a1h.transpose() * p * &self.a1h + qh)
    }
}

/// One RK4 step of a row from `c0.t` to `c1.t` with frozen closed-loop data at the stages.
fn rk4_row(model: &LQModel, tau: f64, p: &Mat, c0: &Closed, cm: &Closed, c1: &Closed) -> Mat {
    let h = c1.t - c0.t;
    let k1 = c0.rate(model, tau, p);
    let k2 = cm.rate(model, tau, &(p + &k1 * (0.5 * h)));
    let k3 = cm.rate(model, tau, &(p + &k2 * (0.5 * h)));
    let k4 = c1.rate(model, tau, &(p + &k3 * h));
    let mut out = p + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
    symmetrize(&mut out);
    out
}

/// Weighted combination `Σ w_k M_k`.
fn combine(weights: &[f64], mats: &[&Mat]) -> Mat {
    let mut out = mats[0] * weights[0];
    for (w, m) in weights.iter().zip(mats).skip(1) {
        out += *m * *w;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMode {
    /// Backward march with a predictor-corrector on the diagonal gain.
    #[default]
    Marching,
    /// Global Picard iteration on the gain, retained for validation.
    FixedPoint,
}

#[derive(Debug, Clone)]
pub struct RiccatiOptions {
    pub mode: SolverMode,
    /// Extra nodes `T − h·2⁻ᵏ`, `k = 1..=levels`, inserted into the last interval
    /// so the multistep gain interpolation starts from tiny steps.
    pub refine_levels: usize,
    pub fixed_point_tol: f64,
    pub max_sweeps: usize,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self { mode: SolverMode::Marching, refine_levels: 10, fixed_point_tol: 1e-13, max_sweeps: 500 }
    }
}

/// Solution of the Riccati–Volterra system.
#[derive(Debug, Clone)]
pub struct RiccatiVolterraSolution {
    tri: TriangularGrid,
    n: usize,
    m: usize,
    /// `P(τ_i, t_j)` on user nodes, `n²` column-major entries per pair.
    field: Vec<f64>,
    internal: TimeGrid,
    user_index: Vec<usize>,
    gamma: Vec<Mat>,
    diag: Vec<Mat>,
    /// Marching: largest predictor-corrector change; fixed point: sup change per sweep.
    pub iteration_log: Vec<f64>,
    /// Relative residual of the state-transition integral form (deterministic solver only).
    pub phi_residual: Option<f64>,
}

impl RiccatiVolterraSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.tri.time
    }

    /// Grid actually marched: the user grid plus the refinement near `T`.
    pub fn internal_grid(&self) -> &TimeGrid {
        &self.internal
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    /// `P(τ_i, t_j)` for user nodes `i <= j`.
    pub fn p(&self, i: usize, j: usize) -> Mat {
        let k = self.tri.offset(i, j) * self.n * self.n;
        Mat::from_column_slice(self.n, self.n, &self.field[k..k + self.n * self.n])
    }

    /// `P(t_j) = P(t_j, t_j)`, read from the field storage.
    pub fn p_diag(&self, j: usize) -> Mat {
        self.p(j, j)
    }

    pub fn gamma(&self, j: usize) -> &Mat {
        &self.gamma[self.user_index[j]]
    }

    /// Diagonal at internal nodes.
    pub fn p_diag_internal(&self) -> &[Mat] {
        &self.diag
    }

    pub fn gamma_internal(&self) -> &[Mat] {
        &self.gamma
    }

    /// `Γ(t)` linearly interpolated between internal nodes.
    pub fn gamma_at(&self, t: f64) -> Mat {
        let k = self.internal.interval_index(t);
        let (t0, t1) = (self.internal.t(k), self.internal.t(k + 1));
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        &self.gamma[k] * (1.0 - w) + &self.gamma[k + 1] * w
    }

    /// `P(t,t)` by cubic interpolation over internal nodes.
    pub fn p_diag_at(&self, t: f64) -> Mat {
        let nodes = self.internal.nodes();
        let k = self.internal.interval_index(t);
        let lo = k.saturating_sub(1).min(nodes.len() - 4);
        let w = lagrange_weights(&nodes[lo..lo + 4], t);
        let mats: Vec<&Mat> = self.diag[lo..lo + 4].iter().collect();
        combine(&w, &mats)
    }
}

/// `ū = −Γ(t)x` with `Γ` linearly interpolated.
pub fn lq_equilibrium_feedback(sol: &RiccatiVolterraSolution, t: f64, x: &[f64]) -> Vec<f64> {
    let g = sol.gamma_at(t);
    let xv = nalgebra::DVector::from_column_slice(x);
    (-(g * xv)).iter().copied().collect()
}

pub fn solve_riccati_volterra(model: &LQModel, grid: &TimeGrid) -> Result<RiccatiVolterraSolution> {
    solve_riccati_volterra_with(model, grid, &RiccatiOptions::default())
}

/// Deterministic-dynamics variant: requires `A₁ = B₁ = 0` and additionally
/// evaluates the state-transition integral form as a residual.
pub fn solve_riccati_volterra_deterministic(model: &LQModel, grid: &TimeGrid) -> Result<RiccatiVolterraSolution> {
    if !model.is_deterministic_on(grid) {
        return domain("deterministic solver needs A1 = 0 and B1 = 0");
    }
    let mut sol = solve_riccati_volterra(model, grid)?;
    sol.phi_residual = Some(phi_form_residual(model, &sol));
    Ok(sol)
}

fn internal_grid(grid: &TimeGrid, levels: usize) -> (TimeGrid, Vec<usize>) {
    let nodes = grid.nodes();
    let n = nodes.len();
    let h = nodes[n - 1] - nodes[n - 2];
    let t_end = nodes[n - 1];
    let mut out: Vec<f64> = nodes[..n - 1].to_vec();
    for k in 1..=levels {
        out.push(t_end - h * 0.5f64.powi(k as i32));
    }
    out.push(t_end);
    let mut map: Vec<usize> = (0..n - 1).collect();
    map.push(out.len() - 1);
    (TimeGrid::new(out).expect("refinement keeps nodes increasing"), map)
}

/// Indices of up to four nodes `j, j+1, ...` for gain interpolation on `[t_j, t_{j+1}]`.
fn stencil(j: usize, last: usize) -> std::ops::Range<usize> {
    j..(j + 4).min(last + 1)
}

fn interp_gamma(nodes: &[f64], gamma: &[Mat], range: std::ops::Range<usize>, t: f64) -> Mat {
    let w = lagrange_weights(&nodes[range.clone()], t);
    let mats: Vec<&Mat> = gamma[range].iter().collect();
    combine(&w, &mats)
}

pub fn solve_riccati_volterra_with(
    model: &LQModel,
    grid: &TimeGrid,
    opts: &RiccatiOptions,
) -> Result<RiccatiVolterraSolution> {
    model.validate(grid)?;
    let (internal, user_index) = internal_grid(grid, opts.refine_levels);
    let nodes = internal.nodes();
    let last = nodes.len() - 1;
    let (n, m) = (model.n, model.m);

    let tri = TriangularGrid::new(grid.clone());
    let mut field = vec![0.0; tri.pairs() * n * n];
    // internal node -> user index, if any
    let mut as_user = vec![None; nodes.len()];
    for (u, &k) in user_index.iter().enumerate() {
        as_user[k] = Some(u);
    }
    let mut store = |rows: &[Mat], j: usize| {
        if let Some(uj) = as_user[j] {
            for (ui, &ki) in user_index.iter().enumerate().take(uj + 1) {
                let off = tri.offset(ui, uj) * n * n;
                field[off..off + n * n].copy_from_slice(rows[ki].as_slice());
            }
        }
    };

    let terminal: Vec<Mat> = nodes.iter().map(|&tau| (model.g)(tau)).collect();
    let mut gamma = vec![Mat::zeros(m, n); nodes.len()];
    let mut diag = vec![Mat::zeros(n, n); nodes.len()];
    gamma[last] = gain(model, nodes[last], nodes[last], &terminal[last])?;
    diag[last] = terminal[last].clone();
    let mut log = Vec::new();

    match opts.mode {
        SolverMode::Marching => {
            let mut rows = terminal.clone();
            store(&rows, last);
            let mut worst: f64 = 0.0;
            for j in (0..last).rev() {
                let (t0, t1) = (nodes[j + 1], nodes[j]);
                let tm = 0.5 * (t0 + t1);
                // predictor: extrapolate Γ(t_j) from the known nodes
                let known = (j + 1)..(j + 5).min(last + 1);
                gamma[j] = interp_gamma(nodes, &gamma, known, t1);
                let step = |gamma: &[Mat], rows: &[Mat], range: std::ops::Range<usize>| -> Vec<Mat> {
                    let c0 = Closed::new(model, t0, gamma[j + 1].clone());
                    let cm = Closed::new(model, tm, interp_gamma(nodes, gamma, stencil(j, last), tm));
                    let c1 = Closed::new(model, t1, gamma[j].clone());
                    let go = |i: usize| rk4_row(model, nodes[i], &rows[i], &c0, &cm, &c1);
                    if range.len() >= 64 {
                        range.into_par_iter().map(go).collect()
                    } else {
                        range.map(go).collect()
                    }
                };
                let pred = step(&gamma, &rows, j..j + 1).pop().unwrap();
                let corrected = gain(model, t1, t1, &pred)?;
                worst = worst.max((&corrected - &gamma[j]).amax());
                gamma[j] = corrected;
                let new_rows = step(&gamma, &rows, 0..j + 1);
                rows[..=j].clone_from_slice(&new_rows);
                diag[j] = rows[j].clone();
                gamma[j] = gain(model, t1, t1, &diag[j])?;
                store(&rows, j);
            }
            log.push(worst);
        }
        SolverMode::FixedPoint => {
            let mut sweeps = 0;
            loop {
                sweeps += 1;
                let closed: Vec<Closed> = (0..=last).map(|k| Closed::new(model, nodes[k], gamma[k].clone())).collect();
                let mids: Vec<Closed> = (0..last)
                    .map(|j| {
                        let tm = 0.5 * (nodes[j] + nodes[j + 1]);
                        Closed::new(model, tm, interp_gamma(nodes, &gamma, stencil(j, last), tm))
                    })
                    .collect();
                // each row is an independent linear ODE given Γ
                let row_diag: Vec<(Mat, Vec<(usize, Mat)>)> = (0..=last)
                    .into_par_iter()
                    .map(|i| {
                        let mut p = terminal[i].clone();
                        let mut kept = Vec::new();
                        if as_user[i].is_some() {
                            kept.push((last, p.clone()));
                        }
                        for j in (i..last).rev() {
                            p = rk4_row(model, nodes[i], &p, &closed[j + 1], &mids[j], &closed[j]);
                            if as_user[i].is_some() && as_user[j].is_some() {
                                kept.push((j, p.clone()));
                            }
                        }
                        (p, kept)
                    })
                    .collect();
                let mut change: f64 = 0.0;
                let mut new_gamma = gamma.clone();
                for (i, (p, kept)) in row_diag.into_iter().enumerate() {
                    new_gamma[i] = gain(model, nodes[i], nodes[i], &p)?;
                    change = change.max((&new_gamma[i] - &gamma[i]).amax());
                    diag[i] = p;
                    if let Some(ui) = as_user[i] {
                        for (j, pm) in kept {
                            let uj = as_user[j].unwrap();
                            let off = tri.offset(ui, uj) * n * n;
                            field[off..off + n * n].copy_from_slice(pm.as_slice());
                        }
                    }
                }
                gamma = new_gamma;
                log.push(change);
                let scale = 1.0 + gamma.iter().map(|g| g.amax()).fold(0.0, f64::max);
                if change <= opts.fixed_point_tol * scale {
                    break;
                }
                if sweeps >= opts.max_sweeps {
                    return Err(Error::NoConvergence(format!(
                        "Riccati-Volterra fixed point: change {change:e} after {sweeps} sweeps"
                    )));
                }
            }
        }
    }

    for (k, p) in diag.iter().enumerate() {
        let min = p.clone().symmetric_eigenvalues().min();
        if min < -PSD_TOL {
            log::warn!("P({0},{0}) has eigenvalue {min:e} below -{PSD_TOL:e}", nodes[k]);
        }
    }

    Ok(RiccatiVolterraSolution {
        tri,
        n,
        m,
        field,
        internal,
        user_index,
        gamma,
        diag,
        iteration_log: log,
        phi_residual: None,
    })
}

/// `max_j ‖Φ(T,t)ᵀG(t)Φ(T,t) + ∫ Φᵀ(Q + ΓᵀRΓ)Φ ds − P(t)‖ / (1 + ‖P(t)‖)` over internal nodes,
/// with `Φ` and the integral advanced together by RK4 in `s`.
fn phi_form_residual(model: &LQModel, sol: &RiccatiVolterraSolution) -> f64 {
    let nodes = sol.internal.nodes();
    let last = nodes.len() - 1;
    let gamma = &sol.gamma;
    let n = model.n;
    let ahat = |s: f64, g: &Mat| (model.a)(s) - (model.b)(s) * g;
    let at_nodes: Vec<Mat> = (0..=last).map(|k| ahat(nodes[k], &gamma[k])).collect();
    let mids: Vec<(Mat, Mat)> = (0..last)
        .map(|k| {
            let s = 0.5 * (nodes[k] + nodes[k + 1]);
            let g = interp_gamma(nodes, gamma, stencil(k, last), s);
            (ahat(s, &g), g)
        })
        .collect();
    (0..last)
        .into_par_iter()
        .map(|j| {
            let t = nodes[j];
            let weight = |s: f64, g: &Mat, phi: &Mat| {
                let qh = (model.q)(t, s) + g.transpose() * (model.r)(t, s) * g;
                phi.transpose() * qh * phi
            };
            let mut phi = Mat::identity(n, n);
            let mut acc = Mat::zeros(n, n);
            for k in j..last {
                let h = nodes[k + 1] - nodes[k];
                let (am, gm) = &mids[k];
                let sm = 0.5 * (nodes[k] + nodes[k + 1]);
                let f1 = &at_nodes[k] * &phi;
                let w1 = weight(nodes[k], &gamma[k], &phi);
                let p2 = &phi + &f1 * (0.5 * h);
                let f2 = am * &p2;
                let w2 = weight(sm, gm, &p2);
                let p3 = &phi + &f2 * (0.5 * h);
                let f3 = am * &p3;
                let w3 = weight(sm, gm, &p3);
                let p4 = &phi + &f3 * h;
                let f4 = &at_nodes[k + 1] * &p4;
                let w4 = weight(nodes[k + 1], &gamma[k + 1], &p4);
                phi += (f1 + (f2 + f3) * 2.0 + f4) * (h / 6.0);
                acc += (w1 + (w2 + w3) * 2.0 + w4) * (h / 6.0);
            }
            let rhs = phi.transpose() * (model.g)(t) * &phi + acc;
            (rhs - &sol.diag[j]).amax() / (1.0 + sol.diag[j].amax())
        })
        .reduce(|| 0.0, f64::max)
}

/// Nash equilibrium of the partition game in LQ form.
#[derive(Debug, Clone)]
pub struct LqPartitionGame {
    pub partition: TimeGrid,
    /// Fine grid the coupled ODEs were integrated on; contains every partition node.
    pub fine: TimeGrid,
    /// `V^Π(t) = Θ(ℓ^Π(t), t)` coefficient at fine nodes; right-continuous at partition nodes.
    pub values: Vec<Mat>,
    /// Value of the player ending at partition node `k` (index `k-1`), for `k = 1..N`.
    pub left_values: Vec<Mat>,
    /// Feedback gain of the active player at fine nodes.
    pub gamma: Vec<Mat>,
}

impl LqPartitionGame {
    /// `max_j ‖V^Π(t_j) − P(t_j,t_j)‖` over fine nodes, with the equilibrium diagonal interpolated.
    pub fn sup_distance(&self, sol: &RiccatiVolterraSolution) -> f64 {
        self.fine
            .nodes()
            .iter()
            .zip(&self.values)
            .map(|(&t, v)| (v - sol.p_diag_at(t)).amax())
            .fold(0.0, f64::max)
    }
}

pub fn lq_partition_game(model: &LQModel, partition: &TimeGrid) -> Result<LqPartitionGame> {
    let substeps = (1024 / partition.steps()).max(4);
    lq_partition_game_with(model, partition, substeps)
}

/// Partition game with `substeps` RK4 steps per partition interval.
///
/// One backward sweep carries the active player's Riccati equation together with
/// the pending `Θ` rows of all earlier players, which are linear in the active gain.
/// At a partition node the next pending row becomes the active Riccati equation.
pub fn lq_partition_game_with(model: &LQModel, partition: &TimeGrid, substeps: usize) -> Result<LqPartitionGame> {
    if partition.steps() < 1 {
        return Err(Error::InvalidGrid("partition needs at least one interval".into()));
    }
    let fine = partition.refine(substeps.max(1));
    model.validate(&if fine.len() >= 8 { fine.clone() } else { partition.refine(8) })?;
    let pn = partition.nodes();
    let nodes = fine.nodes();
    let last = nodes.len() - 1;
    let per = substeps.max(1);

    let mut rows: Vec<Mat> = pn[..pn.len() - 1].iter().map(|&tau| (model.g)(tau)).collect();
    let mut active = rows.len() - 1;
    let mut values = vec![Mat::zeros(0, 0); nodes.len()];
    let mut gamma = vec![Mat::zeros(0, 0); nodes.len()];
    let mut left_values = vec![Mat::zeros(0, 0); partition.steps()];
    values[last] = rows[active].clone();
    gamma[last] = gain(model, pn[active], nodes[last], &rows[active])?;
    left_values[partition.steps() - 1] = rows[active].clone();

    for j in (0..last).rev() {
        let tau_a = pn[active];
        let (t0, t1) = (nodes[j + 1], nodes[j]);
        let h = t1 - t0;
        let stage = |t: f64, state: &[Mat]| -> Result<Vec<Mat>> {
            let g = gain(model, tau_a, t, &state[active])?;
            let c = Closed::new(model, t, g);
            Ok(state.iter().enumerate().map(|(i, p)| c.rate(model, pn[i], p)).collect())
        };
        let axpy = |base: &[Mat], k: &[Mat], w: f64| -> Vec<Mat> { base.iter().zip(k).map(|(p, d)| p + d * w).collect() };
        let cur = &rows[..=active];
        let k1 = stage(t0, cur)?;
        let k2 = stage(t0 + 0.5 * h, &axpy(cur, &k1, 0.5 * h))?;
        let k3 = stage(t0 + 0.5 * h, &axpy(cur, &k2, 0.5 * h))?;
        let k4 = stage(t1, &axpy(cur, &k3, h))?;
        for i in 0..=active {
            rows[i] += (&k1[i] + (&k2[i] + &k3[i]) * 2.0 + &k4[i]) * (h / 6.0);
            symmetrize(&mut rows[i]);
        }
        values[j] = rows[active].clone();
        gamma[j] = gain(model, tau_a, t1, &rows[active])?;
        // reaching the start of the active player's interval hands over to the previous player
        if j % per == 0 && j > 0 {
            active -= 1;
            left_values[active] = rows[active].clone();
            rows.truncate(active + 1);
        }
    }

    Ok(LqPartitionGame { partition: partition.clone(), fine, values, left_values, gamma })
}
