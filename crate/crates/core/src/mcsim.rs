//! Monte Carlo for the controlled SDE `dX = b(s,X,u)ds + σ(s,X,u)dW`.
//!
//! Brownian increments are keyed by `(seed, path, step)` where the step index is
//! counted from `t = 0` on a mesh of width `dt`. Two runs that cover the same
//! steps of the same path therefore see the same increments, which is how all
//! cost comparisons are paired.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::grid::{SpatialGrid1D, TimeGrid};
use crate::hjbgrid::{FeedbackGrid, HjbGrids};
use crate::model::{Control, GeneralModel};
use crate::quad::{mean_and_se, pairwise_sum};

/// Paths whose state exceeds this magnitude are reported as blown up.
pub const BLOWUP: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    Euler,
    /// Euler on `ln X`; needs `b` and `σ` proportional to `x` along the policy.
    LogEuler,
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub scheme: Scheme,
}

impl SimOptions {
    pub fn new(n_paths: usize, dt: f64, seed: u64) -> Self {
        Self { n_paths, dt, seed, scheme: Scheme::Euler }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }
}

pub type FeedbackFn = Arc<dyn Fn(f64, f64) -> Control + Send + Sync>;

/// Feedback stored on a `(t, x)` grid, interpolated bilinearly and clamped to the box.
#[derive(Debug, Clone)]
pub struct GridPolicy {
    time: TimeGrid,
    space: SpatialGrid1D,
    levels: Vec<Vec<Control>>,
}

impl GridPolicy {
    pub fn new(time: &TimeGrid, space: &SpatialGrid1D, psi: &FeedbackGrid) -> Result<Self> {
        if psi.levels.len() != time.len() || psi.levels.iter().any(|l| l.len() != space.len()) {
            return Err(Error::InvalidGrid("feedback grid does not match the (t, x) mesh".into()));
        }
        Ok(Self { time: time.clone(), space: space.clone(), levels: psi.levels.clone() })
    }

    pub fn from_solution(grids: &HjbGrids, psi: &FeedbackGrid) -> Result<Self> {
        Self::new(&grids.time, &grids.space, psi)
    }

    pub fn mesh(&self) -> f64 {
        self.time.mesh()
    }

    pub fn eval(&self, t: f64, x: f64) -> Control {
        let nodes = self.time.nodes();
        let t = t.clamp(nodes[0], nodes[nodes.len() - 1]);
        let j = self.time.interval_index(t).min(nodes.len() - 2);
        let wt = ((t - nodes[j]) / (nodes[j + 1] - nodes[j])).clamp(0.0, 1.0);
        let x = x.clamp(self.space.x_min(), self.space.x_max());
        let (k, wx) = self.space.locate(x);
        let k1 = (k + 1).min(self.space.intervals());
        let (a, b) = (&self.levels[j], &self.levels[j + 1]);
        let m = a[k].len();
        (0..m)
            .map(|d| {
                let lo = a[k][d] * (1.0 - wx) + a[k1][d] * wx;
                let hi = b[k][d] * (1.0 - wx) + b[k1][d] * wx;
                lo * (1.0 - wt) + hi * wt
            })
            .collect()
    }
}

/// A feedback law `u = Ψ(t, x)`.
#[derive(Clone)]
pub enum Policy {
    Feedback(FeedbackFn),
    Grid(Arc<GridPolicy>),
    /// Constant `u` on `[t, until)`, then `then`.
    Spike { u: Control, until: f64, then: Box<Policy> },
}

impl std::fmt::Debug for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Feedback(_) => write!(f, "Feedback(..)"),
            Self::Grid(g) => write!(f, "Grid(mesh={})", g.mesh()),
            Self::Spike { u, until, then } => write!(f, "Spike({u:?} until {until}, then {then:?})"),
        }
    }
}

impl Policy {
    pub fn feedback(f: impl Fn(f64, f64) -> Control + Send + Sync + 'static) -> Self {
        Self::Feedback(Arc::new(f))
    }

    pub fn grid(g: GridPolicy) -> Self {
        Self::Grid(Arc::new(g))
    }

    /// `u ⊕ Ψ`: hold `u` until `until`, then follow `self`.
    pub fn spiked(&self, u: Control, until: f64) -> Self {
        Self::Spike { u, until, then: Box::new(self.clone()) }
    }

    pub fn eval(&self, t: f64, x: f64) -> Control {
        match self {
            Self::Feedback(f) => f(t, x),
            Self::Grid(g) => g.eval(t, x),
            Self::Spike { u, until, then } => {
                if t < *until - 1e-12 * until.abs().max(1.0) {
                    u.clone()
                } else {
                    then.eval(t, x)
                }
            }
        }
    }

    fn grid_mesh(&self) -> Option<f64> {
        match self {
            Self::Feedback(_) => None,
            Self::Grid(g) => Some(g.mesh()),
            Self::Spike { then, .. } => then.grid_mesh(),
        }
    }
}

/// Simulated paths with every state and applied control stored.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub n_paths: usize,
    pub dt: f64,
    pub t0: f64,
    pub x0: f64,
    pub seed: u64,
    pub scheme: Scheme,
    pub times: Vec<f64>,
    /// Row-major, `n_paths × (steps+1)`.
    pub states: Vec<f64>,
    /// Row-major, `n_paths × (steps+1) × control_dim`; the last entry of a row is `Ψ(T, X(T))`.
    pub controls: Vec<f64>,
    pub control_dim: usize,
    /// `W(T) − W(t0)` per path.
    pub increments: Vec<f64>,
}

impl PathBundle {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let w = self.times.len();
        &self.states[p * w..(p + 1) * w]
    }

    pub fn state(&self, p: usize, n: usize) -> f64 {
        self.states[p * self.times.len() + n]
    }

    pub fn control(&self, p: usize, n: usize) -> &[f64] {
        let off = (p * self.times.len() + n) * self.control_dim;
        &self.controls[off..off + self.control_dim]
    }

    pub fn terminal(&self) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.state(p, self.steps())).collect()
    }
}

/// Sample mean and standard error of a cost functional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub tau: f64,
}

impl CostEstimate {
    pub fn from_samples(samples: &[f64], tau: f64) -> Self {
        let (mean, std_error) = mean_and_se(samples);
        Self { mean, std_error, n_paths: samples.len(), tau }
    }

    /// Paired estimate of `E[a − b]`.
    pub fn paired(a: &[f64], b: &[f64], tau: f64) -> Self {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        Self::from_samples(&d, tau)
    }
}

/// Mesh for a run from `t0` to `horizon`: the number of steps, the actual step, and
/// the global index of the first step.
fn mesh(t0: f64, horizon: f64, dt: f64) -> Result<(usize, f64, u64)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return domain(format!("dt must be positive, got {dt}"));
    }
    if !(t0 >= 0.0 && t0 < horizon) {
        return domain(format!("start time {t0} must lie in [0, T) with T = {horizon}"));
    }
    let steps = ((horizon - t0) / dt).round().max(1.0) as usize;
    Ok((steps, (horizon - t0) / steps as f64, (t0 / dt).round() as u64))
}

/// Standard normals keyed by `(seed, path, step)`: each step consumes exactly four
/// 32-bit words, so a path can be entered at any step.
struct Noise {
    rng: ChaCha8Rng,
}

impl Noise {
    fn new(seed: u64, path: usize, step: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path as u64);
        rng.set_word_pos(4 * step as u128);
        Self { rng }
    }

    fn next(&mut self) -> f64 {
        // Box–Muller on exactly two draws; a rejection sampler would break the keying
        let u1 = ((self.rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

struct Run<'a> {
    model: &'a GeneralModel,
    policy: &'a Policy,
    t0: f64,
    steps: usize,
    dt: f64,
    first_step: u64,
    seed: u64,
    scheme: Scheme,
}

impl Run<'_> {
    fn new<'a>(model: &'a GeneralModel, policy: &'a Policy, t0: f64, opts: &SimOptions) -> Result<Run<'a>> {
        if opts.n_paths == 0 {
            return domain("need at least one path");
        }
        if opts.scheme == Scheme::LogEuler && !model.multiplicative() {
            return domain(format!("log-Euler needs multiplicative dynamics; model '{}' does not declare them", model.name()));
        }
        if let Some(h) = policy.grid_mesh() {
            if opts.dt > h * (1.0 + 1e-9) {
                return Err(Error::InvalidGrid(format!("dt = {} exceeds the feedback grid mesh {h}", opts.dt)));
            }
        }
        let (steps, dt, first_step) = mesh(t0, model.horizon(), opts.dt)?;
        Ok(Run { model, policy, t0, steps, dt, first_step, seed: opts.seed, scheme: opts.scheme })
    }

    fn time(&self, n: usize) -> f64 {
        if n == self.steps {
            self.model.horizon()
        } else {
            self.t0 + n as f64 * self.dt
        }
    }

    /// March one path; `visit(n, t, x, u)` sees every node including `T`.
    /// Returns `W(T) − W(t0)`.
    fn path(&self, p: usize, x0: f64, mut visit: impl FnMut(usize, f64, f64, &Control)) -> Result<f64> {
        let mut noise = Noise::new(self.seed, p, self.first_step);
        let sq = self.dt.sqrt();
        let mut x = x0;
        let mut w = 0.0;
        for n in 0..self.steps {
            let t = self.time(n);
            let u = self.policy.eval(t, x);
            visit(n, t, x, &u);
            let b = self.model.b(t, x, &u);
            let s = self.model.sigma(t, x, &u);
            let dw = sq * noise.next();
            w += dw;
            x = match self.scheme {
                Scheme::Euler => x + b * self.dt + s * dw,
                Scheme::LogEuler => {
                    if x == 0.0 {
                        0.0
                    } else {
                        let (bb, ss) = (b / x, s / x);
                        x * ((bb - 0.5 * ss * ss) * self.dt + ss * dw).exp()
                    }
                }
            };
            if !(x.abs() <= BLOWUP) {
                return Err(Error::Blowup { path: p, step: n + 1, value: x.abs() });
            }
        }
        let t = self.model.horizon();
        let u = self.policy.eval(t, x);
        visit(self.steps, t, x, &u);
        Ok(w)
    }
}

/// Reports the lowest-index failing path so errors do not depend on scheduling.
fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Euler–Maruyama paths from `(t0, x0)` under `policy`, with everything stored.
pub fn simulate_paths(model: &GeneralModel, policy: &Policy, t0: f64, x0: f64, opts: &SimOptions) -> Result<PathBundle> {
    let run = Run::new(model, policy, t0, opts)?;
    let width = run.steps + 1;
    let dim = model.control_set().dim();
    let per_path: Vec<Result<(Vec<f64>, Vec<f64>, f64)>> = (0..opts.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut xs = Vec::with_capacity(width);
            let mut us = Vec::with_capacity(width * dim);
            let w = run.path(p, x0, |_, _, x, u| {
                xs.push(x);
                us.extend(u.iter().copied().chain(std::iter::repeat(0.0)).take(dim));
            })?;
            Ok((xs, us, w))
        })
        .collect();
    let per_path = first_error(per_path)?;
    let mut states = Vec::with_capacity(opts.n_paths * width);
    let mut controls = Vec::with_capacity(opts.n_paths * width * dim);
    let mut increments = Vec::with_capacity(opts.n_paths);
    for (xs, us, w) in per_path {
        states.extend(xs);
        controls.extend(us);
        increments.push(w);
    }
    Ok(PathBundle {
        n_paths: opts.n_paths,
        dt: run.dt,
        t0,
        x0,
        seed: opts.seed,
        scheme: opts.scheme,
        times: (0..width).map(|n| run.time(n)).collect(),
        states,
        controls,
        control_dim: dim,
        increments,
    })
}

/// `∫ g(τ,s,X,u)ds + h(τ,X(T))` per path by the trapezoid rule, floors added back.
pub fn path_costs(model: &GeneralModel, bundle: &PathBundle, tau: f64) -> Vec<f64> {
    let (g_min, h_min) = model.cost_floor();
    let n = bundle.steps();
    (0..bundle.n_paths)
        .into_par_iter()
        .map(|p| {
            let g: Vec<f64> = (0..=n)
                .map(|k| model.g(tau, bundle.times[k], bundle.state(p, k), bundle.control(p, k)) + g_min)
                .collect();
            let run: f64 = (0..n).map(|k| 0.5 * (bundle.times[k + 1] - bundle.times[k]) * (g[k] + g[k + 1])).sum();
            run + model.h(tau, bundle.state(p, n)) + h_min
        })
        .collect()
}

pub fn estimate_cost(model: &GeneralModel, bundle: &PathBundle, tau: f64) -> Result<CostEstimate> {
    if tau > bundle.t0 + 1e-12 {
        return domain(format!("discount index τ = {tau} is after the bundle start {}", bundle.t0));
    }
    Ok(CostEstimate::from_samples(&path_costs(model, bundle, tau), tau))
}

/// Per-path results of a run that keeps only costs.
#[derive(Debug, Clone)]
pub struct PathCosts {
    pub terminal: Vec<f64>,
    /// `W(T) − W(t0)` per path.
    pub increments: Vec<f64>,
    /// `costs[i][p]` is the cost of path `p` with discount index `taus[i]`.
    pub costs: Vec<Vec<f64>>,
}

/// Where the paths start: one state for all, or one per path.
#[derive(Debug, Clone, Copy)]
pub enum Start<'a> {
    Common(f64),
    PerPath(&'a [f64]),
}

/// Like [`simulate_paths`] followed by [`path_costs`], without storing the paths.
pub fn simulate_costs(
    model: &GeneralModel,
    policy: &Policy,
    t0: f64,
    x0: Start<'_>,
    taus: &[f64],
    opts: &SimOptions,
) -> Result<PathCosts> {
    let run = Run::new(model, policy, t0, opts)?;
    if let Start::PerPath(v) = x0 {
        if v.len() != opts.n_paths {
            return domain(format!("{} start states for {} paths", v.len(), opts.n_paths));
        }
    }
    let (g_min, h_min) = model.cost_floor();
    let per_path: Vec<Result<(f64, f64, Vec<f64>)>> = (0..opts.n_paths)
        .into_par_iter()
        .map(|p| {
            let x_start = match x0 {
                Start::Common(x) => x,
                Start::PerPath(v) => v[p],
            };
            let mut acc = vec![0.0; taus.len()];
            let mut prev: Option<(f64, Vec<f64>)> = None;
            let mut last_x = x_start;
            let w = run.path(p, x_start, |_, t, x, u| {
                let g: Vec<f64> = taus.iter().map(|&tau| model.g(tau, t, x, u) + g_min).collect();
                if let Some((tp, gp)) = &prev {
                    for i in 0..taus.len() {
                        acc[i] += 0.5 * (t - tp) * (gp[i] + g[i]);
                    }
                }
                prev = Some((t, g));
                last_x = x;
            })?;
            for (i, &tau) in taus.iter().enumerate() {
                acc[i] += model.h(tau, last_x) + h_min;
            }
            Ok((last_x, w, acc))
        })
        .collect();
    let per_path = first_error(per_path)?;
    let mut out = PathCosts {
        terminal: Vec::with_capacity(opts.n_paths),
        increments: Vec::with_capacity(opts.n_paths),
        costs: vec![Vec::with_capacity(opts.n_paths); taus.len()],
    };
    for (x, w, acc) in per_path {
        out.terminal.push(x);
        out.increments.push(w);
        for (i, c) in acc.into_iter().enumerate() {
            out.costs[i].push(c);
        }
    }
    Ok(out)
}

/// Samples behind an inconsistency-gap estimate.
#[derive(Debug, Clone)]
pub struct GapSamples {
    /// `X̄(τ)` per path under the policy chosen at `t`.
    pub x_tau: Vec<f64>,
    /// `W(τ) − W(t)` per path.
    pub increments: Vec<f64>,
    /// `J(τ, X̄(τ); ū|) − J(τ, X̄(τ); û)` per path, with shared increments after `τ`.
    pub gaps: Vec<f64>,
    pub estimate: CostEstimate,
}

/// Run `committed` from `(t, x)` to `τ`, then compare continuing with it against
/// switching to `reoptimized`, both costed with discount index `τ`.
pub fn inconsistency_gap(
    model: &GeneralModel,
    committed: &Policy,
    reoptimized: &Policy,
    t: f64,
    tau: f64,
    x: f64,
    opts: &SimOptions,
) -> Result<GapSamples> {
    if !(t < tau && tau < model.horizon()) {
        return domain(format!("need t < τ < T, got t={t}, τ={tau}"));
    }
    // the first leg is the same simulation stopped at τ
    let first = Run::new(model, committed, t, opts)?;
    let (legs, _, _) = mesh(t, tau, opts.dt)?;
    let head: Vec<Result<(f64, f64)>> = (0..opts.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut noise = Noise::new(opts.seed, p, first.first_step);
            let h = (tau - t) / legs as f64;
            let sq = h.sqrt();
            let (mut xv, mut w) = (x, 0.0);
            for n in 0..legs {
                let s = t + n as f64 * h;
                let u = committed.eval(s, xv);
                let (b, sg) = (model.b(s, xv, &u), model.sigma(s, xv, &u));
                let dw = sq * noise.next();
                w += dw;
                xv = match opts.scheme {
                    Scheme::Euler => xv + b * h + sg * dw,
                    Scheme::LogEuler if xv == 0.0 => 0.0,
                    Scheme::LogEuler => {
                        let (bb, ss) = (b / xv, sg / xv);
                        xv * ((bb - 0.5 * ss * ss) * h + ss * dw).exp()
                    }
                };
                if !(xv.abs() <= BLOWUP) {
                    return Err(Error::Blowup { path: p, step: n + 1, value: xv.abs() });
                }
            }
            Ok((xv, w))
        })
        .collect();
    let head = first_error(head)?;
    let x_tau: Vec<f64> = head.iter().map(|h| h.0).collect();
    let increments: Vec<f64> = head.iter().map(|h| h.1).collect();
    let a = simulate_costs(model, committed, tau, Start::PerPath(&x_tau), &[tau], opts)?;
    let b = simulate_costs(model, reoptimized, tau, Start::PerPath(&x_tau), &[tau], opts)?;
    let gaps: Vec<f64> = a.costs[0].iter().zip(&b.costs[0]).map(|(p, q)| p - q).collect();
    let estimate = CostEstimate::from_samples(&gaps, tau);
    Ok(GapSamples { x_tau, increments, gaps, estimate })
}

#[derive(Debug, Clone)]
pub struct SpikeRow {
    pub eps: f64,
    pub deviation: Control,
    /// `J(t,x;Ψ) − J(t,x;u⊕Ψ)`, paired.
    pub delta: CostEstimate,
}

#[derive(Debug, Clone)]
pub struct SpikeReport {
    pub t: f64,
    pub x: f64,
    pub rows: Vec<SpikeRow>,
    /// `(ε, max_u Δ, SE of that Δ)` per ε.
    pub worst: Vec<(f64, f64, f64)>,
    /// Least-squares slope of `max_u Δ` on `ε` through the origin, floored at zero.
    pub c: f64,
    /// `max_u Δ(u,ε) ≤ c·ε + 3·SE` at every ε.
    pub within_envelope: bool,
    /// `|max_u Δ|` shrinks as `ε` decreases.
    pub shrinking: bool,
    pub pass: bool,
}

/// Spike deviations from a feedback `Ψ` at `(t, x)`.
///
/// For each `ε` and constant `u`, the deviated run holds `u` on `[t, t+ε)` and
/// returns to `Ψ`; both runs share increments.
pub fn spike_deviation_test(
    model: &GeneralModel,
    psi: &Policy,
    t: f64,
    x: f64,
    eps: &[f64],
    deviations: &[Control],
    opts: &SimOptions,
) -> Result<SpikeReport> {
    if eps.is_empty() || deviations.is_empty() {
        return domain("need at least one ε and one deviation");
    }
    if let Some(&e) = eps.iter().find(|&&e| !(e > 0.0) || t + e > model.horizon() + 1e-12) {
        return domain(format!("ε = {e} must be positive with t + ε <= T"));
    }
    let base = simulate_costs(model, psi, t, Start::Common(x), &[t], opts)?;
    let mut rows = Vec::new();
    let mut worst = Vec::new();
    for &e in eps {
        let mut best: Option<(f64, f64)> = None;
        for u in deviations {
            let dev = psi.spiked(u.clone(), t + e);
            let run = simulate_costs(model, &dev, t, Start::Common(x), &[t], opts)?;
            let delta = CostEstimate::paired(&base.costs[0], &run.costs[0], t);
            if best.is_none_or(|b| delta.mean > b.0) {
                best = Some((delta.mean, delta.std_error));
            }
            rows.push(SpikeRow { eps: e, deviation: u.clone(), delta });
        }
        let (m, se) = best.unwrap_or((f64::NAN, f64::NAN));
        worst.push((e, m, se));
    }
    let num: f64 = pairwise_sum(&worst.iter().map(|w| w.0 * w.1).collect::<Vec<_>>());
    let den: f64 = pairwise_sum(&worst.iter().map(|w| w.0 * w.0).collect::<Vec<_>>());
    let c = (num / den).max(0.0);
    let within_envelope = worst.iter().all(|&(e, m, se)| m <= c * e + 3.0 * se);
    let mut by_eps = worst.clone();
    by_eps.sort_by(|a, b| b.0.total_cmp(&a.0));
    let shrinking = by_eps.windows(2).all(|w| w[1].1.abs() < w[0].1.abs());
    Ok(SpikeReport { t, x, rows, worst, c, within_envelope, shrinking, pass: within_envelope && shrinking })
}

/// Outcome of [`moment_bound_check`].
#[derive(Debug, Clone)]
pub struct MomentCheck {
    pub q: u32,
    /// Constant fitted on the first half of the horizon, times [`MOMENT_SLACK`].
    pub k: f64,
    /// `max_s E|X(s)|^q / (1 + |x0|^q + E∫|u|^q)` over the whole horizon.
    pub worst_ratio: f64,
    /// First time the ratio exceeds `k`.
    pub violation: Option<f64>,
    pub pass: bool,
}

/// Headroom applied to the fitted moment constant before it is held fixed.
pub const MOMENT_SLACK: f64 = 2.0;

/// Checks `E|X(s)|^q ≤ K(1 + |x0|^q + E∫_{t0}^s |u|^q)` along the bundle, with `K`
/// fitted on the first half of the horizon and then held fixed.
pub fn moment_bound_check(bundle: &PathBundle, q: u32) -> Result<MomentCheck> {
    if q != 2 && q != 4 {
        return domain(format!("q must be 2 or 4, got {q}"));
    }
    let n = bundle.steps();
    let qf = q as i32;
    let per_step: Vec<(f64, f64)> = (0..=n)
        .into_par_iter()
        .map(|k| {
            let xs: Vec<f64> = (0..bundle.n_paths).map(|p| bundle.state(p, k).abs().powi(qf)).collect();
            let us: Vec<f64> = (0..bundle.n_paths)
                .map(|p| bundle.control(p, k).iter().map(|v| v * v).sum::<f64>().sqrt().powi(qf))
                .collect();
            (pairwise_sum(&xs) / bundle.n_paths as f64, pairwise_sum(&us) / bundle.n_paths as f64)
        })
        .collect();
    let base = 1.0 + bundle.x0.abs().powi(qf);
    let mut control_int = 0.0;
    let mut ratios = Vec::with_capacity(n + 1);
    for k in 0..=n {
        if k > 0 {
            control_int += (bundle.times[k] - bundle.times[k - 1]) * per_step[k - 1].1;
        }
        ratios.push(per_step[k].0 / (base + control_int));
    }
    let half = bundle.t0 + 0.5 * (bundle.times[n] - bundle.t0);
    let fit = bundle.times.iter().zip(&ratios).filter(|(t, _)| **t <= half).map(|(_, r)| *r).fold(0.0, f64::max);
    let k = MOMENT_SLACK * fit;
    let violation = bundle.times.iter().zip(&ratios).find(|(_, r)| **r > k).map(|(t, _)| *t);
    let worst_ratio = ratios.iter().copied().fold(0.0, f64::max);
    if let Some(t) = violation {
        log::warn!("moment bound (q = {q}) violated at t = {t}: ratio {worst_ratio:.3e} > K = {k:.3e}");
    }
    Ok(MomentCheck { q, k, worst_ratio, violation, pass: violation.is_none() })
}

/// Dynamic-programming check of a grid value: `V(t,x)` against
/// `E[∫_t^τ g ds + V(τ, X(τ))]` under a given feedback.
#[derive(Debug, Clone)]
pub struct BellmanCheck {
    pub value: f64,
    pub estimate: CostEstimate,
    pub allowance: f64,
    pub pass: bool,
}

/// `values_tau` is `V(τ, ·)` on `space`; the model horizon is cut at `τ` by using
/// the interpolated grid value as the terminal cost. `scheme_error` is added to the
/// 3-SE band.
#[allow(clippy::too_many_arguments)]
pub fn bellman_spot_check(
    model: &GeneralModel,
    policy: &Policy,
    space: &SpatialGrid1D,
    value_t: f64,
    values_tau: &[f64],
    t: f64,
    tau: f64,
    x: f64,
    scheme_error: f64,
    opts: &SimOptions,
) -> Result<BellmanCheck> {
    if !(t < tau && tau <= model.horizon()) {
        return domain(format!("need t < τ <= T, got t={t}, τ={tau}"));
    }
    let (g_min, h_min) = model.cost_floor();
    let v_tau: Vec<f64> = values_tau.to_vec();
    let sp = space.clone();
    let cut = GeneralModel::new(format!("{}|cut", model.name()), tau, model.control_set().clone())?;
    let (m1, m2, m3) = (model.clone(), model.clone(), model.clone());
    let cut = cut
        .with_drift(move |s, y, u| m1.b(s, y, u))
        .with_controlled_diffusion(move |s, y, u| m2.sigma(s, y, u))
        .with_running_cost(move |r, s, y, u| m3.g(r, s, y, u) + g_min)
        .with_terminal_cost(move |_, y| sp.interpolate(&v_tau, y) + h_min)
        .with_cost_floor(g_min, h_min)
        .with_multiplicative_dynamics(model.multiplicative());
    let run = simulate_costs(&cut, policy, t, Start::Common(x), &[t], opts)?;
    let estimate = CostEstimate::from_samples(&run.costs[0], t);
    // the grid value carries the same floor shift as the costs
    let value = value_t + g_min * (model.horizon() - t) + h_min;
    let shifted = estimate.mean + g_min * (model.horizon() - tau);
    let allowance = 3.0 * estimate.std_error + scheme_error;
    let pass = (shifted - value).abs() <= allowance;
    Ok(BellmanCheck { value, estimate: CostEstimate { mean: shifted, ..estimate }, allowance, pass })
}
