use std::sync::Arc;

use eqhjb::hjbgrid::{refine_and_compare, solve_equilibrium_hjb, HjbGrids, HjbOptions};
use eqhjb::lq::{lq_equilibrium_feedback, lq_partition_game, solve_riccati_volterra_with, RiccatiOptions, SolverMode as LqMode};
use eqhjb::mcsim::{inconsistency_gap, spike_deviation_test, CostEstimate, Policy, Scheme, SimOptions};
use eqhjb::merton::solve_merton_equilibrium_with;
use eqhjb::merton::MertonOptions;
use eqhjb::model::Control;
use eqhjb::oracle::{lq_inconsistency_gap, lq_riccati_closed_form, merton_inconsistency_indicator, LqExampleParams};
use eqhjb::quad::fitted_order;
use eqhjb::TimeGrid;
use serde_json::json;

use crate::config::{Command, RunConfig, SolverMode};
use crate::output::Report;
use crate::CliError;

pub fn run(command: Command, cfg: &RunConfig) -> Result<Report, CliError> {
    let mut r = Report::default();
    match command {
        Command::SolveLq => solve_lq(cfg, &mut r)?,
        Command::SolveMerton => solve_merton(cfg, &mut r)?,
        Command::SolveHjb => solve_hjb(cfg, &mut r)?,
        Command::PartitionGame => partition_game(cfg, &mut r)?,
        Command::VerifyInconsistency => verify_inconsistency(cfg, &mut r)?,
        Command::SpikeTest => spike_test(cfg, &mut r)?,
        Command::ConvergenceStudy => convergence_study(cfg, &mut r)?,
    }
    Ok(r)
}

fn lq_grid(cfg: &RunConfig) -> Result<TimeGrid, CliError> {
    Ok(TimeGrid::uniform(cfg.model.lq.horizon, cfg.grid.n_t)?)
}

fn riccati_options(cfg: &RunConfig) -> RiccatiOptions {
    let mode = match cfg.solver.mode {
        SolverMode::Marching => LqMode::Marching,
        SolverMode::FixedPoint => LqMode::FixedPoint,
    };
    RiccatiOptions { mode, max_sweeps: cfg.solver.max_iter, ..Default::default() }
}

fn hjb_options(cfg: &RunConfig) -> HjbOptions {
    HjbOptions { tol: cfg.solver.tol, max_iter: cfg.solver.max_iter.min(500), ..Default::default() }
}

fn hjb_grids(cfg: &RunConfig) -> Result<HjbGrids, CliError> {
    let g = &cfg.grid;
    Ok(HjbGrids::uniform(cfg.model.lq.horizon, g.n_t, g.x_min, g.x_max, g.m)?)
}

fn solve_lq(cfg: &RunConfig, r: &mut Report) -> Result<(), CliError> {
    let grid = lq_grid(cfg)?;
    let model = cfg.lq_model();
    let sol = r.timed("riccati-volterra", || solve_riccati_volterra_with(&model, &grid, &riccati_options(cfg)))?;
    let nodes = grid.nodes();
    r.csv(
        "p_diag.csv",
        &["t", "p", "gamma"],
        (0..nodes.len()).map(|j| vec![nodes[j], sol.p_diag(j)[(0, 0)], sol.gamma(j)[(0, 0)]]),
    )?;
    let mut field = Vec::new();
    for i in 0..nodes.len() {
        for j in i..nodes.len() {
            field.push(vec![nodes[i], nodes[j], sol.p(i, j)[(0, 0)]]);
        }
    }
    r.csv("p_field.csv", &["tau", "t", "p"], field)?;
    r.residual("iteration_change", sol.iteration_log.last().copied().unwrap_or(0.0));
    let g = cfg.lq_g();
    let last = nodes.len() - 1;
    let terminal_ok = (0..=last).all(|i| sol.p(i, last)[(0, 0)] == g(nodes[i]));
    r.check("terminal-condition", terminal_ok, "P(tau, T) = g(tau) at every node");
    let p0 = sol.p_diag(0)[(0, 0)];
    r.result("p_diag_at_0", p0);
    r.check("positive-diagonal", (0..=last).all(|j| sol.p_diag(j)[(0, 0)] > 0.0), format!("P(0,0) = {p0}"));
    Ok(())
}

fn solve_merton(cfg: &RunConfig, r: &mut Report) -> Result<(), CliError> {
    let m = &cfg.model.merton;
    let params = cfg.merton_params()?;
    let grid = TimeGrid::uniform(m.horizon, cfg.grid.n_t)?;
    let opts = MertonOptions { tol: cfg.solver.tol, max_iter: cfg.solver.max_iter, ..Default::default() };
    let eq = r.timed("merton-fixed-point", || solve_merton_equilibrium_with(&params, &grid, &opts))?;
    let b = &eq.bounds;
    let nodes = grid.nodes();
    r.csv(
        "merton_z.csv",
        &["t", "z", "phi_raw", "phi_scaled", "consumption", "lower", "upper", "upper_display"],
        (0..nodes.len()).map(|j| {
            vec![
                nodes[j],
                eq.z[j],
                eq.phi_raw[j],
                eq.phi_scaled[j],
                eq.consumption_coefficient(nodes[j]),
                b.lower[j],
                b.upper[j],
                b.upper_display[j],
            ]
        }),
    )?;
    let indicator = merton_inconsistency_indicator(&params, 0.0, m.indicator_t_bar)?;
    r.result("inconsistency_indicator", indicator);
    r.result("lambda", eq.lambda());
    r.result("lambda_bar", b.lambda_bar);
    r.result("investment_fraction", eq.investment_coefficient());
    r.result("iterations", eq.iterations);
    r.result("scale", eq.scale);
    r.residual("fixed_point_defect", eq.residual);
    r.check(
        "fixed-point-defect",
        eq.residual <= 5.0 * cfg.solver.tol,
        format!("defect {:.3e} against 5*tol = {:.3e}", eq.residual, 5.0 * cfg.solver.tol),
    );
    let within = (0..nodes.len()).all(|j| b.lower[j] <= eq.z[j] * (1.0 + 1e-12) && eq.z[j] <= b.upper[j] * (1.0 + 1e-12));
    r.check("bounds", within, "lower <= z <= upper at every node");
    r.check("terminal", eq.z[nodes.len() - 1] == params.rho(m.horizon) / params.nu(m.horizon, m.horizon), "z(T) = R(T)");
    Ok(())
}

fn solve_hjb(cfg: &RunConfig, r: &mut Report) -> Result<(), CliError> {
    let model = cfg.lq_general()?;
    let grids = hjb_grids(cfg)?;
    let opts = hjb_options(cfg);
    let eq = r.timed("equilibrium-hjb", || solve_equilibrium_hjb(&model, &grids, &opts))?;
    let rv = r.timed("riccati-volterra", || solve_riccati_volterra_with(&cfg.lq_model(), &grids.time, &riccati_options(cfg)))?;
    let nodes = grids.time.nodes();
    let mut rows = Vec::new();
    for (j, &t) in nodes.iter().enumerate() {
        for k in 0..grids.space.len() {
            rows.push(vec![t, grids.space.x(k), eq.v(j)[k], eq.psi.level(j)[k][0]]);
        }
    }
    r.csv("hjb_value.csv", &["t", "x", "v", "psi"], rows)?;
    let reach = 0.5 * grids.space.x_min().abs().min(grids.space.x_max().abs());
    let mut worst: f64 = 0.0;
    for j in 0..nodes.len() {
        let p = rv.p_diag(j)[(0, 0)];
        for k in 0..grids.space.len() {
            let x = grids.space.x(k);
            if x.abs() <= reach && x.abs() > 1e-9 {
                worst = worst.max((eq.v(j)[k] / (x * x) - p).abs() / p);
            }
        }
    }
    r.residual("hjb_step_defect", eq.residual);
    r.result("sweeps", eq.iters);
    r.result("windows", &eq.windows);
    r.result("max_relative_gap_to_riccati_volterra", worst);
    r.check("residual", eq.residual <= 10.0 * opts.tol, format!("defect {:.3e}", eq.residual));
    r.check("cross-solver", worst <= 1e-2, format!("max |V/x^2 - P|/P = {worst:.3e} on |x| <= {reach}"));
    Ok(())
}

fn partition_game(cfg: &RunConfig, r: &mut Report) -> Result<(), CliError> {
    let model = cfg.lq_model();
    let h = cfg.model.lq.horizon;
    let finest = *cfg.grid.partitions.iter().max().unwrap_or(&1);
    let grid = TimeGrid::uniform(h, cfg.grid.n_t.max(finest).div_ceil(finest) * finest)?;
    let sol = r.timed("riccati-volterra", || solve_riccati_volterra_with(&model, &grid, &riccati_options(cfg)))?;
    let mut table = Vec::new();
    for &n in &cfg.grid.partitions {
        let pi = TimeGrid::uniform(h, n)?;
        let game = r.timed(&format!("partition-game-{n}"), || lq_partition_game(&model, &pi))?;
        let gap = game.sup_distance(&sol);
        r.csv(
            &format!("partition_{n}.csv"),
            &["t", "v"],
            game.fine.nodes().iter().zip(&game.values).map(|(&t, v)| vec![t, v[(0, 0)]]),
        )?;
        table.push(vec![n as f64, pi.mesh(), gap]);
    }
    let order = fitted_order(&table.iter().map(|row| row[1]).collect::<Vec<_>>(), &table.iter().map(|row| row[2]).collect::<Vec<_>>());
    let monotone = table.windows(2).all(|w| w[1][2] < w[0][2]);
    r.csv("partition_gaps.csv", &["n", "mesh", "gap"], table)?;
    r.result("fitted_order", order);
    r.check("monotone-gaps", monotone, "sup |P^Pi - P| decreases as the partition refines");
    r.check("order", order >= 0.9, format!("fitted order {order:.3}"));
    Ok(())
}

fn precommitted(p: &LqExampleParams, t0: f64) -> Policy {
    let p = p.clone();
    Policy::feedback(move |s, x| {
        let gain = lq_riccati_closed_form(&p, t0, s.max(t0)).unwrap_or(f64::NAN);
        Control::from_slice(&[-gain * x])
    })
}

fn verify_inconsistency(cfg: &RunConfig, r: &mut Report) -> Result<(), CliError> {
    let p = cfg.lq_params()?;
    let model = cfg.lq_general()?;
    let mc = &cfg.mc;
    let opts = SimOptions::new(mc.n_paths, mc.dt, cfg.seed).with_scheme(Scheme::LogEuler);
    let gap = r.timed("paired-simulation", || {
        inconsistency_gap(&model, &precommitted(&p, mc.t), &precommitted(&p, mc.tau), mc.t, mc.tau, mc.x, &opts)
    })?;
    let oracle: Vec<f64> =
        gap.increments.iter().map(|&w| lq_inconsistency_gap(&p, mc.t, mc.tau, mc.x, w)).collect::<Result<_, _>>()?;
    let oracle_est = CostEstimate::from_samples(&oracle, mc.tau);
    let paired = CostEstimate::paired(&gap.gaps, &oracle, mc.tau);
    let agree = paired.mean.abs() <= 3.0 * paired.std_error;
    let report = json!({
        "t": mc.t, "tau": mc.tau, "x": mc.x, "n_paths": mc.n_paths, "dt": mc.dt, "seed": cfg.seed,
        "gap_estimate": gap.estimate.mean, "gap_std_error": gap.estimate.std_error,
        "closed_form_mean": oracle_est.mean, "closed_form_std_error": oracle_est.std_error,
        "paired_difference": paired.mean, "paired_std_error": paired.std_error,
        "agrees_with_closed_form": agree,
    });
    r.json("inconsistency.json", &report)?;
    if mc.dump_paths {
        r.csv(
            "paths.csv",
            &["w_tau", "x_tau", "gap", "closed_form_gap"],
            (0..gap.gaps.len()).map(|i| vec![gap.increments[i], gap.x_tau[i], gap.gaps[i], oracle[i]]),
        )?;
    }
    r.result("gap_estimate", gap.estimate.mean);
    r.result("gap_std_error", gap.estimate.std_error);
    r.check("positive-gap", gap.estimate.mean > 0.0, format!("{:.6e}", gap.estimate.mean));
    r.check(
        "closed-form-agreement",
        agree,
        format!("paired difference {:.3e} with SE {:.3e}", paired.mean, paired.std_error),
    );
    Ok(())
}

fn spike_test(cfg: &RunConfig, r: &mut Report) -> Result<(), CliError> {
    let grid = lq_grid(cfg)?;
    let sol = Arc::new(r.timed("riccati-volterra", || solve_riccati_volterra_with(&cfg.lq_model(), &grid, &riccati_options(cfg)))?);
    let psi = Policy::feedback(move |t, x| Control::from_slice(&lq_equilibrium_feedback(&sol, t, &[x])));
    let model = cfg.lq_general()?;
    let mc = &cfg.mc;
    let devs: Vec<Control> = mc.deviations.iter().map(|&u| Control::from_slice(&[u])).collect();
    let opts = SimOptions::new(mc.n_paths, mc.dt, cfg.seed);
    let rep = r.timed("spike-simulation", || spike_deviation_test(&model, &psi, mc.t, mc.x, &mc.eps, &devs, &opts))?;
    r.csv(
        "spike.csv",
        &["eps", "deviation", "delta", "std_error"],
        rep.rows.iter().map(|row| vec![row.eps, row.deviation[0], row.delta.mean, row.delta.std_error]),
    )?;
    r.result("fitted_c", rep.c);
    r.result("worst_by_eps", rep.worst.iter().map(|w| json!({"eps": w.0, "delta": w.1, "std_error": w.2})).collect::<Vec<_>>());
    r.check("envelope", rep.within_envelope, format!("max Delta <= {:.4}*eps + 3 SE", rep.c));
    r.check("shrinking", rep.shrinking, "|max Delta| decreases as eps halves");
    Ok(())
}

fn convergence_study(cfg: &RunConfig, r: &mut Report) -> Result<(), CliError> {
    let model = cfg.lq_general()?;
    let grids = hjb_grids(cfg)?;
    let parts: Vec<TimeGrid> =
        cfg.grid.partitions.iter().map(|&n| TimeGrid::uniform(cfg.model.lq.horizon, n)).collect::<Result<_, _>>()?;
    let table = r.timed("refine-and-compare", || refine_and_compare(&model, &parts, &grids, &hjb_options(cfg)))?;
    let monotone = table.rows.windows(2).all(|w| w[1].2 < w[0].2);
    r.csv("convergence.csv", &["n", "mesh", "gap"], table.rows.iter().map(|row| vec![row.0 as f64, row.1, row.2]))?;
    r.result("fitted_order", table.order);
    r.check("monotone-gaps", monotone, "sup |V^Pi - V| decreases as the partition refines");
    r.check("order", table.order >= 0.8, format!("fitted order {:.3}", table.order));
    Ok(())
}
