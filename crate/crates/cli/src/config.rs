//! Run configuration: a TOML file, merged with command-line overrides.
//!
//! Every field has a default, and the fully resolved config is echoed into the
//! manifest, so a run's parameters are always on record.

use std::path::Path;
use std::sync::Arc;

use eqhjb::lq::LQModel;
use eqhjb::model::GeneralModel;
use eqhjb::oracle::{LqExampleParams, MertonParams};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SolveLq,
    SolveMerton,
    SolveHjb,
    PartitionGame,
    VerifyInconsistency,
    SpikeTest,
    ConvergenceStudy,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::SolveLq => "solve-lq",
            Self::SolveMerton => "solve-merton",
            Self::SolveHjb => "solve-hjb",
            Self::PartitionGame => "partition-game",
            Self::VerifyInconsistency => "verify-inconsistency",
            Self::SpikeTest => "spike-test",
            Self::ConvergenceStudy => "convergence-study",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMode {
    Marching,
    FixedPoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqSection {
    pub sigma: f64,
    pub horizon: f64,
    /// `g(t) = g_intercept + g_slope·t`.
    pub g_intercept: f64,
    pub g_slope: f64,
}

impl Default for LqSection {
    fn default() -> Self {
        Self { sigma: 1.0, horizon: 1.0, g_intercept: 1.0, g_slope: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discount {
    Exponential,
    Hyperbolic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MertonSection {
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
    pub beta: f64,
    pub horizon: f64,
    pub discount: Discount,
    /// `δ` for exponential, `κ` for hyperbolic.
    pub rate: f64,
    /// `t̄` in the inconsistency indicator, compared against `t = 0`.
    pub indicator_t_bar: f64,
}

impl Default for MertonSection {
    fn default() -> Self {
        Self {
            r: 0.03,
            mu: 0.08,
            sigma: 0.25,
            beta: 0.5,
            horizon: 1.0,
            discount: Discount::Exponential,
            rate: 0.1,
            indicator_t_bar: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub lq: LqSection,
    pub merton: MertonSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { lq: LqSection::default(), merton: MertonSection::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// Time steps.
    pub n_t: usize,
    /// Spatial intervals.
    pub m: usize,
    pub x_min: f64,
    pub x_max: f64,
    /// Partition sizes for the partition game and the convergence study.
    pub partitions: Vec<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { n_t: 256, m: 200, x_min: -3.0, x_max: 3.0, partitions: vec![4, 8, 16, 32] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub mode: SolverMode,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { mode: SolverMode::Marching, tol: 1e-10, max_iter: 1000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub n_paths: usize,
    pub dt: f64,
    /// Start time and state.
    pub t: f64,
    pub x: f64,
    /// Re-optimization time for `verify-inconsistency`.
    pub tau: f64,
    pub eps: Vec<f64>,
    pub deviations: Vec<f64>,
    /// Write every path of `verify-inconsistency` to `paths.csv`.
    pub dump_paths: bool,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            dt: 1e-3,
            t: 0.0,
            x: 1.0,
            tau: 0.5,
            eps: vec![0.2, 0.1, 0.05],
            deviations: vec![-2.0, -1.0, 0.0, 1.0],
            dump_paths: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub seed: u64,
    pub model: ModelSection,
    pub grid: GridSection,
    pub solver: SolverSection,
    pub mc: McSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            seed: 20240601,
            model: ModelSection::default(),
            grid: GridSection::default(),
            solver: SolverSection::default(),
            mc: McSection::default(),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg()))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Range checks plus a trial construction of every model the command uses.
    pub fn validate(&self, command: Command) -> Result<(), CliError> {
        let g = &self.grid;
        check(g.n_t >= 8, || format!("grid.n_t = {} must be at least 8", g.n_t))?;
        check(g.m >= 16, || format!("grid.m = {} must be at least 16", g.m))?;
        check(g.x_min < g.x_max, || format!("grid.x_min = {} must be below grid.x_max = {}", g.x_min, g.x_max))?;
        check(g.partitions.iter().all(|&n| n >= 1), || "grid.partitions entries must be positive".into())?;
        let s = &self.solver;
        check(s.tol > 0.0, || format!("solver.tol = {} must be positive", s.tol))?;
        check(s.max_iter >= 1, || "solver.max_iter must be positive".into())?;
        let mc = &self.mc;
        check(mc.n_paths >= 1, || "mc.n_paths must be positive".into())?;
        check(mc.dt > 0.0, || format!("mc.dt = {} must be positive", mc.dt))?;
        match command {
            Command::SolveMerton => {
                self.merton_params()?;
            }
            _ => {
                self.lq_params()?;
                let l = &self.model.lq;
                match command {
                    Command::PartitionGame | Command::ConvergenceStudy => {
                        check(g.partitions.len() >= 3, || "need at least three partitions".into())?;
                        check(g.partitions.windows(2).all(|w| w[1] % w[0] == 0), || {
                            "grid.partitions must be nested (each a multiple of the previous)".into()
                        })?;
                        if command == Command::ConvergenceStudy {
                            check(g.partitions.iter().all(|&n| g.n_t % n == 0), || {
                                "grid.n_t must be a multiple of every partition size".into()
                            })?;
                        }
                    }
                    Command::VerifyInconsistency => {
                        check(mc.t >= 0.0 && mc.t < mc.tau && mc.tau < l.horizon, || {
                            format!("need 0 <= mc.t < mc.tau < T, got t = {}, tau = {}", mc.t, mc.tau)
                        })?;
                    }
                    Command::SpikeTest => {
                        check(!mc.eps.is_empty() && !mc.deviations.is_empty(), || "mc.eps and mc.deviations must be non-empty".into())?;
                        check(mc.eps.iter().all(|&e| e > 0.0 && mc.t + e <= l.horizon), || {
                            "every mc.eps must be positive with t + eps <= T".into()
                        })?;
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn lq_params(&self) -> Result<LqExampleParams, CliError> {
        let l = self.model.lq.clone();
        LqExampleParams::new(l.sigma, l.horizon, move |t| l.g_intercept + l.g_slope * t)
            .map_err(|e| CliError::Config(format!("model.lq: {e}")))
    }

    pub fn lq_g(&self) -> impl Fn(f64) -> f64 + Send + Sync + Clone + 'static {
        let (a, b) = (self.model.lq.g_intercept, self.model.lq.g_slope);
        move |t| a + b * t
    }

    pub fn lq_model(&self) -> LQModel {
        LQModel::scalar_multiplicative(self.model.lq.sigma, self.model.lq.horizon, self.lq_g())
    }

    /// `b = u`, `σ = σx`, `g = u²`, `h = g(τ)x²` as a general model.
    pub fn lq_general(&self) -> Result<GeneralModel, CliError> {
        let l = &self.model.lq;
        let sigma = l.sigma;
        GeneralModel::scalar_lq(
            l.horizon,
            Arc::new(|_| 0.0),
            Arc::new(|_| 1.0),
            Arc::new(move |_| sigma),
            Arc::new(|_, _| 0.0),
            Arc::new(|_, _| 1.0),
            Arc::new(self.lq_g()),
        )
        .map_err(|e| CliError::Config(format!("model.lq: {e}")))
    }

    pub fn merton_params(&self) -> Result<MertonParams, CliError> {
        let m = &self.model.merton;
        let p = match m.discount {
            Discount::Exponential => MertonParams::classical(m.r, m.mu, m.sigma, m.beta, m.rate, m.horizon),
            Discount::Hyperbolic => MertonParams::hyperbolic(m.r, m.mu, m.sigma, m.beta, m.rate, m.horizon),
        };
        let p = p.map_err(|e| CliError::Config(format!("model.merton: {e}")))?;
        check(m.indicator_t_bar > 0.0 && m.indicator_t_bar < m.horizon, || {
            format!("model.merton.indicator_t_bar = {} must lie in (0, T)", m.indicator_t_bar)
        })?;
        Ok(p)
    }
}
