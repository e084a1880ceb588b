//! Finite differences for the equilibrium HJB system in one space dimension.
//!
//! Every solver here is built from one backward step of the linear equation
//!
//! ```text
//! Θ_t + a(t,x)Θ_xx + b(t,x,Ψ)Θ_x + g(τ,t,x,Ψ) = 0
//! ```
//!
//! with the feedback `Ψ` frozen at the later time level: diffusion implicit,
//! drift either explicit upwind or implicit central, source explicit.
//! The control must not enter the diffusion.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{SpatialGrid1D, TimeGrid};
use crate::model::{select_unchecked, Control, GeneralModel, SelectorOptions};
use crate::quad::{fitted_order, solve_tridiagonal};

/// Time and space meshes for the grid solvers.
#[derive(Debug, Clone)]
pub struct HjbGrids {
    pub time: TimeGrid,
    pub space: SpatialGrid1D,
}

impl HjbGrids {
    pub fn new(time: TimeGrid, space: SpatialGrid1D) -> Self {
        Self { time, space }
    }

    pub fn uniform(horizon: f64, n_t: usize, x_min: f64, x_max: f64, m: usize) -> Result<Self> {
        Ok(Self { time: TimeGrid::uniform(horizon, n_t)?, space: SpatialGrid1D::new(x_min, x_max, m)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DriftScheme {
    /// Explicit one-sided differences; monotone when `Δt·|b|/h ≤ 1`. First order in `x`.
    Upwind,
    /// Implicit central differences; second order in `x`, unconditionally stable.
    #[default]
    CentralImplicit,
}

pub type BoundaryFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Closure at the two ends of the spatial box.
#[derive(Clone)]
pub enum BoundaryRule {
    /// `Θ_xx = 0`: boundary values extrapolated linearly from the two inner nodes.
    LinearExtrapolation,
    /// Prescribed `Θ(τ, t, x)` at `x_min` and `x_max`.
    Dirichlet(BoundaryFn),
}

impl std::fmt::Debug for BoundaryRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::LinearExtrapolation => write!(f, "LinearExtrapolation"),
            Self::Dirichlet(_) => write!(f, "Dirichlet(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HjbOptions {
    pub drift: DriftScheme,
    pub boundary: Option<BoundaryRule>,
    pub selector: SelectorOptions,
    /// Sup-norm change of the diagonal that ends a window's iteration.
    pub tol: f64,
    /// Sweeps allowed per window before it is halved.
    pub max_iter: usize,
    /// Initial window length; `T/4` when unset.
    pub window: Option<f64>,
}

impl Default for HjbOptions {
    fn default() -> Self {
        Self {
            drift: DriftScheme::default(),
            boundary: Some(BoundaryRule::LinearExtrapolation),
            selector: SelectorOptions::default(),
            tol: 1e-10,
            max_iter: 200,
            window: None,
        }
    }
}

/// `ℓ^Π(s)`: the left endpoint of the partition interval containing `s`, with `ℓ^Π(T) = t_{N−1}`.
pub fn partition_clock(pi: &TimeGrid, s: f64) -> f64 {
    pi.partition_clock(s)
}

/// Feedback values `Ψ(t_j, x_k)` by time level.
#[derive(Debug, Clone, Default)]
pub struct FeedbackGrid {
    pub levels: Vec<Vec<Control>>,
}

impl FeedbackGrid {
    pub fn level(&self, j: usize) -> &[Control] {
        &self.levels[j]
    }
}

/// `Θ(τ_i, t_j, x_k)` for `i <= j`; row `i` stores levels `i..=N`.
#[derive(Debug, Clone)]
pub struct BivariateField {
    rows: Vec<Vec<f64>>,
    width: usize,
}

impl BivariateField {
    fn new(n_levels: usize, width: usize) -> Self {
        Self { rows: (0..n_levels).map(|i| vec![0.0; (n_levels - i) * width]).collect(), width }
    }

    pub fn theta(&self, i: usize, j: usize) -> &[f64] {
        let off = (j - i) * self.width;
        &self.rows[i][off..off + self.width]
    }

    fn theta_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let off = (j - i) * self.width;
        &mut self.rows[i][off..off + self.width]
    }

    /// `V(t_j, ·) = Θ(t_j, t_j, ·)`, borrowed from the field.
    pub fn diag(&self, j: usize) -> &[f64] {
        self.theta(j, j)
    }

    pub fn levels(&self) -> usize {
        self.rows.len()
    }
}

/// Value and feedback on the full grid for a single frozen index.
#[derive(Debug, Clone)]
pub struct ValueGrid {
    values: Vec<f64>,
    width: usize,
    pub psi: FeedbackGrid,
    pub switching_crossings: usize,
}

impl ValueGrid {
    pub fn at(&self, j: usize) -> &[f64] {
        &self.values[j * self.width..(j + 1) * self.width]
    }
}

#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    pub grids: HjbGrids,
    pub theta: BivariateField,
    /// `Ψ(t_j,x_k) = ψ(t_j,t_j,x_k,V_x,V_xx)`.
    pub psi: FeedbackGrid,
    /// Sup-norm defect of the discrete slice equations under the final feedback.
    pub residual: f64,
    /// Total sweeps over all windows.
    pub iters: usize,
    /// Window lengths (in steps) actually used, from `T` backward.
    pub windows: Vec<usize>,
    pub switching_crossings: usize,
}

impl EquilibriumSolution {
    pub fn v(&self, j: usize) -> &[f64] {
        self.theta.diag(j)
    }
}

#[derive(Debug, Clone)]
pub struct PartitionGameSolution {
    pub grids: HjbGrids,
    pub partition: TimeGrid,
    /// Time-grid index of each partition node.
    pub partition_index: Vec<usize>,
    /// Slice of player `i` (index `τ = p_i`) on levels `partition_index[i]..=N`.
    slices: Vec<Vec<f64>>,
    /// Value of the player ending at partition node `k`, for `k = 1..=N_Π`.
    left: Vec<Vec<f64>>,
    pub psi: FeedbackGrid,
    pub switching_crossings: usize,
}

impl PartitionGameSolution {
    fn width(&self) -> usize {
        self.grids.space.len()
    }

    /// `Θ^Π(p_i, t_j, ·)` for `j >= partition_index[i]`.
    pub fn theta(&self, i: usize, j: usize) -> &[f64] {
        let w = self.width();
        let off = (j - self.partition_index[i]) * w;
        &self.slices[i][off..off + w]
    }

    /// Player index active at time level `j`, i.e. `ℓ^Π(t_j) = p_player`.
    pub fn player_at(&self, j: usize) -> usize {
        self.partition.interval_index(self.grids.time.t(j))
    }

    /// `V^Π(t_j, ·) = Θ^Π(ℓ^Π(t_j), t_j, ·)`; right-continuous at partition nodes.
    pub fn value(&self, j: usize) -> &[f64] {
        self.theta(self.player_at(j), j)
    }

    /// Left limit at partition node `k >= 1`.
    pub fn left_value(&self, k: usize) -> &[f64] {
        &self.left[k - 1]
    }
}

/// Gap between partition-game values and the equilibrium for a sequence of partitions.
#[derive(Debug, Clone)]
pub struct ConvergenceTable {
    /// `(N, ‖Π‖, sup |V^Π − V|)` over interior nodes.
    pub rows: Vec<(usize, f64, f64)>,
    pub order: f64,
}

struct Stepper<'a> {
    model: &'a GeneralModel,
    space: &'a SpatialGrid1D,
    opts: &'a HjbOptions,
    boundary: &'a BoundaryRule,
    x: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a GeneralModel, grids: &'a HjbGrids, opts: &'a HjbOptions) -> Result<Self> {
        if !model.diffusion_control_free() {
            return Err(Error::NotControlFreeDiffusion);
        }
        let boundary = opts
            .boundary
            .as_ref()
            .ok_or_else(|| Error::BoundarySpec("no boundary rule supplied".into()))?;
        if (grids.time.horizon() - model.horizon()).abs() > 1e-12 * (1.0 + model.horizon()) {
            return Err(Error::InvalidGrid(format!(
                "time grid ends at {} but T = {}",
                grids.time.horizon(),
                model.horizon()
            )));
        }
        model.validate_costs(grids.space.x_min(), grids.space.x_max())?;
        Ok(Self { model, space: &grids.space, opts, boundary, x: grids.space.nodes() })
    }

    fn terminal(&self, tau: f64) -> Vec<f64> {
        self.x.iter().map(|&x| self.model.h(tau, x)).collect()
    }

    /// One backward step `t_next → t_cur` for index `tau`. Returns the new values and
    /// whether the explicit upwind CFL bound was exceeded.
    fn step(&self, tau: f64, t_next: f64, t_cur: f64, next: &[f64], psi: &[Control]) -> (Vec<f64>, bool) {
        let m = self.space.intervals();
        let h = self.space.h();
        let dt = t_next - t_cur;
        let model = self.model;
        let n = m - 1;
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        let mut cfl = false;
        for k in 1..m {
            let x = self.x[k];
            let u = &psi[k];
            let a = model.a(t_cur, x, u);
            let b = model.b(t_next, x, u);
            let g = model.g(tau, t_next, x, u);
            let c = dt * a / (h * h);
            let r = k - 1;
            lower[r] = -c;
            diag[r] = 1.0 + 2.0 * c;
            upper[r] = -c;
            rhs[r] = next[k] + dt * g;
            match self.opts.drift {
                DriftScheme::CentralImplicit => {
                    let d = dt * b / (2.0 * h);
                    lower[r] += d;
                    upper[r] -= d;
                }
                DriftScheme::Upwind => {
                    let dx = if b > 0.0 { (next[k + 1] - next[k]) / h } else { (next[k] - next[k - 1]) / h };
                    rhs[r] += dt * b * dx;
                    cfl |= dt * b.abs() > h;
                }
            }
        }
        match self.boundary {
            BoundaryRule::LinearExtrapolation => {
                // Θ_0 = 2Θ_1 − Θ_2 and Θ_M = 2Θ_{M−1} − Θ_{M−2}
                diag[0] += 2.0 * lower[0];
                upper[0] -= lower[0];
                diag[n - 1] += 2.0 * upper[n - 1];
                lower[n - 1] -= upper[n - 1];
            }
            BoundaryRule::Dirichlet(f) => {
                rhs[0] -= lower[0] * f(tau, t_cur, self.x[0]);
                rhs[n - 1] -= upper[n - 1] * f(tau, t_cur, self.x[m]);
            }
        }
        let mut scratch = Vec::with_capacity(n);
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs, &mut scratch);
        let mut out = vec![0.0; m + 1];
        out[1..m].copy_from_slice(&rhs);
        match self.boundary {
            BoundaryRule::LinearExtrapolation => {
                out[0] = 2.0 * out[1] - out[2];
                out[m] = 2.0 * out[m - 1] - out[m - 2];
            }
            BoundaryRule::Dirichlet(f) => {
                out[0] = f(tau, t_cur, self.x[0]);
                out[m] = f(tau, t_cur, self.x[m]);
            }
        }
        (out, cfl)
    }

    /// Defect of one step, in value units, over interior nodes.
    fn step_defect(&self, tau: f64, t_next: f64, t_cur: f64, next: &[f64], cur: &[f64], psi: &[Control]) -> f64 {
        let (want, _) = self.step(tau, t_next, t_cur, next, psi);
        (1..self.space.intervals()).map(|k| (want[k] - cur[k]).abs()).fold(0.0, f64::max)
    }

    /// `ψ(τ, t, x_k, V_x, V_xx)` at every node, with central differences inside and
    /// differences consistent with the boundary rule at the ends. Also counts sign
    /// changes of the switching function along `x`.
    fn feedback(&self, tau: f64, t: f64, v: &[f64]) -> (Vec<Control>, usize) {
        let m = self.space.intervals();
        let h = self.space.h();
        let derivs = |k: usize| -> (f64, f64) {
            if k == 0 {
                ((v[1] - v[0]) / h, self.edge_second(v, 1))
            } else if k == m {
                ((v[m] - v[m - 1]) / h, self.edge_second(v, m - 1))
            } else {
                ((v[k + 1] - v[k - 1]) / (2.0 * h), (v[k + 1] - 2.0 * v[k] + v[k - 1]) / (h * h))
            }
        };
        let mut out = Vec::with_capacity(m + 1);
        let mut crossings = 0;
        let mut last_sign = 0.0;
        for k in 0..=m {
            let (p, pp) = derivs(k);
            let x = self.x[k];
            out.push(select_unchecked(self.model, tau, t, x, p, pp, &self.opts.selector).u_star);
            if let Some(s) = self.model.switching(tau, t, x, p, pp) {
                let sign = if s > 0.0 {
                    1.0
                } else if s < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                if sign != 0.0 {
                    if last_sign != 0.0 && sign != last_sign {
                        crossings += 1;
                    }
                    last_sign = sign;
                }
            }
        }
        (out, crossings)
    }

    fn edge_second(&self, v: &[f64], k: usize) -> f64 {
        match self.boundary {
            BoundaryRule::LinearExtrapolation => 0.0,
            BoundaryRule::Dirichlet(_) => {
                let h = self.space.h();
                (v[k + 1] - 2.0 * v[k] + v[k - 1]) / (h * h)
            }
        }
    }
}

fn warn_cfl(any: bool, what: &str) {
    if any {
        log::warn!("{what}: explicit upwind drift step exceeds the CFL bound dt*|b|/h <= 1; monotonicity is not guaranteed");
    }
}

/// Time-consistent HJB with the discount index frozen at `tau`; `V⁰(T,·) = h(τ,·)`.
pub fn classical_hjb(model: &GeneralModel, tau: f64, grids: &HjbGrids, opts: &HjbOptions) -> Result<ValueGrid> {
    let st = Stepper::new(model, grids, opts)?;
    let nodes = grids.time.nodes();
    let n = nodes.len() - 1;
    let width = grids.space.len();
    let mut values = vec![0.0; (n + 1) * width];
    let mut levels = vec![Vec::new(); n + 1];
    let mut crossings = 0;
    let mut cfl = false;
    let mut cur = st.terminal(tau);
    values[n * width..].copy_from_slice(&cur);
    for j in (0..n).rev() {
        let (psi, c) = st.feedback(tau, nodes[j + 1], &cur);
        crossings += c;
        let (next, bad) = st.step(tau, nodes[j + 1], nodes[j], &cur, &psi);
        cfl |= bad;
        levels[j + 1] = psi;
        cur = next;
        values[j * width..(j + 1) * width].copy_from_slice(&cur);
    }
    levels[0] = st.feedback(tau, nodes[0], &cur).0;
    warn_cfl(cfl, "classical_hjb");
    if crossings > 0 {
        log::warn!("classical_hjb: feedback crossed the selector's switching locus {crossings} times");
    }
    Ok(ValueGrid { values, width, psi: FeedbackGrid { levels }, switching_crossings: crossings })
}

/// The linear slice `Θ(τ_i, ·, ·)` on levels `i..=N` under a given feedback grid.
///
/// Returns the levels concatenated, level `j` at offset `(j − i)·(M+1)`.
pub fn solve_theta_slice(
    model: &GeneralModel,
    psi: &FeedbackGrid,
    i: usize,
    grids: &HjbGrids,
    opts: &HjbOptions,
) -> Result<Vec<f64>> {
    let st = Stepper::new(model, grids, opts)?;
    let nodes = grids.time.nodes();
    let n = nodes.len() - 1;
    if psi.levels.len() != n + 1 || psi.levels[i + 1..].iter().any(|l| l.len() != grids.space.len()) {
        return Err(Error::InvalidGrid("feedback grid must cover every level after τ_i".into()));
    }
    let tau = nodes[i];
    let width = grids.space.len();
    let mut out = vec![0.0; (n + 1 - i) * width];
    let mut cur = st.terminal(tau);
    out[(n - i) * width..].copy_from_slice(&cur);
    let mut cfl = false;
    for j in (i..n).rev() {
        let (next, bad) = st.step(tau, nodes[j + 1], nodes[j], &cur, psi.level(j + 1));
        cfl |= bad;
        cur = next;
        out[(j - i) * width..(j - i + 1) * width].copy_from_slice(&cur);
    }
    warn_cfl(cfl, "solve_theta_slice");
    Ok(out)
}

/// Nash equilibrium of the partition game on the grid.
///
/// One backward sweep carries the active player's nonlinear HJB (index frozen at
/// the player's start) and the linear slices of all earlier players, driven by the
/// active player's feedback. At a partition node the next slice becomes active.
pub fn solve_partition_game(
    model: &GeneralModel,
    pi: &TimeGrid,
    grids: &HjbGrids,
    opts: &HjbOptions,
) -> Result<PartitionGameSolution> {
    let st = Stepper::new(model, grids, opts)?;
    let nodes = grids.time.nodes();
    let n = nodes.len() - 1;
    let width = grids.space.len();
    let partition_index: Vec<usize> = pi
        .nodes()
        .iter()
        .map(|&p| grids.time.find_node(p))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::InvalidGrid("partition nodes must be time-grid nodes".into()))?;
    let players = pi.steps();
    let mut slices: Vec<Vec<f64>> =
        (0..players).map(|i| vec![0.0; (n + 1 - partition_index[i]) * width]).collect();
    let mut cur: Vec<Vec<f64>> = (0..players).map(|i| st.terminal(pi.t(i))).collect();
    let mut left = vec![Vec::new(); players];
    let mut levels = vec![Vec::new(); n + 1];
    let mut active = players - 1;
    let mut crossings = 0;
    let mut cfl = false;
    let write = |slices: &mut Vec<Vec<f64>>, i: usize, j: usize, v: &[f64]| {
        let off = (j - partition_index[i]) * width;
        slices[i][off..off + width].copy_from_slice(v);
    };
    for (i, c) in cur.iter().enumerate() {
        write(&mut slices, i, n, c);
    }
    left[players - 1] = cur[players - 1].clone();
    for j in (0..n).rev() {
        let tau_a = pi.t(active);
        let (psi, c) = st.feedback(tau_a, nodes[j + 1], &cur[active]);
        crossings += c;
        let stepped: Vec<(Vec<f64>, bool)> = (0..=active)
            .into_par_iter()
            .map(|i| st.step(pi.t(i), nodes[j + 1], nodes[j], &cur[i], &psi))
            .collect();
        for (i, (v, bad)) in stepped.into_iter().enumerate() {
            cfl |= bad;
            write(&mut slices, i, j, &v);
            cur[i] = v;
        }
        levels[j + 1] = psi;
        if active > 0 && j == partition_index[active] {
            active -= 1;
            left[active] = cur[active].clone();
        }
    }
    levels[0] = st.feedback(pi.t(0), nodes[0], &cur[0]).0;
    warn_cfl(cfl, "solve_partition_game");
    if crossings > 0 {
        log::warn!("partition game: feedback crossed the selector's switching locus {crossings} times");
    }
    Ok(PartitionGameSolution {
        grids: grids.clone(),
        partition: pi.clone(),
        partition_index,
        slices,
        left,
        psi: FeedbackGrid { levels },
        switching_crossings: crossings,
    })
}

/// Equilibrium HJB by windowed Jacobi iteration on the diagonal.
///
/// On a window `[t_a, t_e]` each sweep builds `Ψ` from the current diagonal, re-solves
/// every slice `τ_i ∈ [t_a, t_e)` from its state at `t_e`, and reads off the new diagonal.
/// Converged windows are then frozen, older slices are carried through them, and the
/// window moves back. A window that fails to settle is halved.
pub fn solve_equilibrium_hjb(model: &GeneralModel, grids: &HjbGrids, opts: &HjbOptions) -> Result<EquilibriumSolution> {
    let st = Stepper::new(model, grids, opts)?;
    let nodes = grids.time.nodes();
    let n = nodes.len() - 1;
    let width = grids.space.len();
    let mut field = BivariateField::new(n + 1, width);
    for i in 0..=n {
        let h = st.terminal(nodes[i]);
        field.theta_mut(i, n).copy_from_slice(&h);
    }
    let mut levels: Vec<Vec<Control>> = vec![Vec::new(); n + 1];
    let mut crossings = 0;
    let (psi_n, c) = st.feedback(nodes[n], nodes[n], field.diag(n));
    levels[n] = psi_n;
    crossings += c;

    let horizon = grids.time.horizon();
    let window_time = opts.window.unwrap_or(0.25 * horizon);
    let mut w = ((window_time / horizon) * n as f64).round().max(1.0) as usize;
    let mut e = n;
    let mut iters = 0;
    let mut windows = Vec::new();
    let mut cfl = false;

    while e > 0 {
        let a = e.saturating_sub(w);
        // initial guess: feedback frozen at the window's end
        for j in a..e {
            levels[j] = levels[e].clone();
        }
        let mut prev_change = f64::INFINITY;
        let mut rising = 0;
        let mut converged = false;
        for _ in 0..opts.max_iter {
            iters += 1;
            let psi = &levels;
            let rows: Vec<(usize, Vec<Vec<f64>>, bool)> = (a..e)
                .into_par_iter()
                .map(|i| {
                    let mut cur = field.theta(i, e).to_vec();
                    let mut out = vec![Vec::new(); e - i];
                    let mut bad = false;
                    for j in (i..e).rev() {
                        let (next, b) = st.step(nodes[i], nodes[j + 1], nodes[j], &cur, &psi[j + 1]);
                        bad |= b;
                        cur = next;
                        out[j - i] = cur.clone();
                    }
                    (i, out, bad)
                })
                .collect();
            let mut change: f64 = 0.0;
            for (i, out, bad) in rows {
                cfl |= bad;
                for (d, v) in out.into_iter().enumerate() {
                    let j = i + d;
                    if j == i {
                        let old = field.diag(i);
                        change = change.max(old.iter().zip(&v).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
                    }
                    field.theta_mut(i, j).copy_from_slice(&v);
                }
            }
            let fb: Vec<(Vec<Control>, usize)> =
                (a..e).into_par_iter().map(|j| st.feedback(nodes[j], nodes[j], field.diag(j))).collect();
            for (d, (psi_j, _)) in fb.into_iter().enumerate() {
                levels[a + d] = psi_j;
            }
            if !change.is_finite() {
                rising = usize::MAX;
                break;
            }
            if change <= opts.tol {
                converged = true;
                break;
            }
            rising = if change > prev_change { rising + 1 } else { 0 };
            if rising >= 3 {
                break;
            }
            prev_change = change;
        }
        if !converged {
            if w == 1 {
                return Err(Error::NoConvergence(format!(
                    "equilibrium HJB window at t = {} cannot shrink below one step",
                    nodes[e]
                )));
            }
            w /= 2;
            log::debug!("equilibrium HJB: halving window to {w} steps at t = {} (rising = {rising})", nodes[e]);
            continue;
        }
        for j in a..e {
            crossings += st.feedback(nodes[j], nodes[j], field.diag(j)).1;
        }
        // carry the older slices through the converged window
        let carried: Vec<(usize, Vec<Vec<f64>>, bool)> = (0..a)
            .into_par_iter()
            .map(|i| {
                let mut cur = field.theta(i, e).to_vec();
                let mut out = vec![Vec::new(); e - a];
                let mut bad = false;
                for j in (a..e).rev() {
                    let (next, b) = st.step(nodes[i], nodes[j + 1], nodes[j], &cur, &levels[j + 1]);
                    bad |= b;
                    cur = next;
                    out[j - a] = cur.clone();
                }
                (i, out, bad)
            })
            .collect();
        for (i, out, bad) in carried {
            cfl |= bad;
            for (d, v) in out.into_iter().enumerate() {
                field.theta_mut(i, a + d).copy_from_slice(&v);
            }
        }
        windows.push(e - a);
        e = a;
    }
    warn_cfl(cfl, "solve_equilibrium_hjb");
    if crossings > 0 {
        log::warn!("equilibrium HJB: feedback crossed the selector's switching locus {crossings} times");
    }

    let residual = (0..n)
        .into_par_iter()
        .map(|j| {
            (0..=j)
                .map(|i| st.step_defect(nodes[i], nodes[j + 1], nodes[j], field.theta(i, j + 1), field.theta(i, j), &levels[j + 1]))
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);

    Ok(EquilibriumSolution {
        grids: grids.clone(),
        theta: field,
        psi: FeedbackGrid { levels },
        residual,
        iters,
        windows,
        switching_crossings: crossings,
    })
}

/// Sup-norm gaps between partition-game values and the equilibrium over interior nodes,
/// with a least-squares order in `‖Π‖`.
pub fn refine_and_compare(
    model: &GeneralModel,
    partitions: &[TimeGrid],
    grids: &HjbGrids,
    opts: &HjbOptions,
) -> Result<ConvergenceTable> {
    if partitions.len() < 3 {
        return Err(Error::InvalidGrid("need at least three partitions".into()));
    }
    if partitions.windows(2).any(|w| !w[0].is_subset_of(&w[1])) {
        return Err(Error::InvalidGrid("partitions must be nested".into()));
    }
    let eq = solve_equilibrium_hjb(model, grids, opts)?;
    let m = grids.space.intervals();
    let mut rows = Vec::new();
    for pi in partitions {
        let game = solve_partition_game(model, pi, grids, opts)?;
        let gap = (0..grids.time.len())
            .map(|j| {
                let (vp, v) = (game.value(j), eq.v(j));
                (1..m).map(|k| (vp[k] - v[k]).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        rows.push((pi.steps(), pi.mesh(), gap));
    }
    let hs: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let gaps: Vec<f64> = rows.iter().map(|r| r.2).collect();
    Ok(ConvergenceTable { order: fitted_order(&hs, &gaps), rows })
}
