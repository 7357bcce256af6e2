use rand::Rng;
use serde::Serialize;
use stc_core::carleman::{carleman_sides, CarlemanWeight};
use stc_core::hum::{hum_solve, min_gramian_eig_report, EigSettings, GramianOperator};
use stc_core::negative::{
    localized_target_energy_growth, mean_obstruction_demo, peng_oscillation_report, LocalizedMode,
    NegativeSetup,
};
use stc_core::tree::peng_eta_grid;
use stc_core::{
    backward_solve, duality_pairing_check, energy_report, expectation_field, forward_solve,
    hidden_regularity_trace, rng_for, AdaptedField, BoundaryTrace, Coef, ControlPair,
    Discretization,
};

use crate::config::{streams, Controls, Field, ModeChoice, RunConfig};
use crate::error::CliError;
use crate::fields;
use crate::output::{Output, Summary};

fn draw(kind: Field, len: usize, seed: u64, stream: u64) -> Vec<f64> {
    match kind {
        Field::Zero => vec![0.0; len],
        Field::One => vec![1.0; len],
        Field::Random => {
            let mut rng = rng_for(seed, stream);
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
        }
    }
}

fn random_controls(disc: &Discretization, rng: &mut impl Rng) -> ControlPair {
    let nd = disc.n_dof();
    let n = disc.n_steps();
    let mut u = BoundaryTrace::zeros(
        disc.stencil.n_inflow(),
        disc.grid.substeps_per_level(),
        disc.grid.h,
    );
    u.levels
        .iter_mut()
        .flatten()
        .for_each(|x| *x = rng.random_range(-1.0..1.0));
    let v = AdaptedField::from_fn(nd, n, |_, _, _| rng.random_range(-1.0..1.0));
    let drift = AdaptedField::from_fn(nd, n, |_, _, _| rng.random_range(-1.0..1.0));
    ControlPair {
        u: Some(u),
        v: Some(v),
        drift: Some(drift),
    }
}

/// One random terminal datum per sample, all drawn from a single stream.
fn terminal_samples(disc: &Discretization, cfg: &RunConfig) -> Vec<Vec<f64>> {
    let len = disc.n_dof() << disc.n_steps();
    let mut rng = rng_for(cfg.seed, streams::SAMPLES);
    (0..cfg.solver.samples.max(1))
        .map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

#[derive(Serialize)]
struct CellRow {
    cell: usize,
    x: f64,
    y: f64,
}

#[derive(Serialize)]
struct BoundaryRow {
    face_id: usize,
    cell: usize,
    x: f64,
    y: f64,
    nx: f64,
    ny: f64,
    velocity: usize,
    ux: f64,
    uy: f64,
    u_dot_nu: f64,
    inflow: bool,
    length: f64,
    weight: f64,
}

pub fn geometry(cfg: &RunConfig, out: &mut Output) -> Result<Summary, CliError> {
    let disc = cfg.discretization()?;
    let g = &disc.geometry;
    out.csv(
        "cells.csv",
        g.centers.iter().enumerate().map(|(cell, x)| CellRow {
            cell,
            x: x[0],
            y: x[1],
        }),
    )?;
    let faces = g.classify_boundary();
    let n_inflow = faces.iter().filter(|f| f.inflow).count();
    out.csv(
        "boundary.csv",
        faces.iter().map(|f| BoundaryRow {
            face_id: f.face_id,
            cell: f.cell,
            x: f.position[0],
            y: f.position[1],
            nx: f.normal[0],
            ny: f.normal[1],
            velocity: f.velocity,
            ux: g.velocities[f.velocity][0],
            uy: g.velocities[f.velocity][1],
            u_dot_nu: f.sign,
            inflow: f.inflow,
            length: f.length,
            weight: f.weight(&g.vel_weights),
        }),
    )?;
    Ok(fields! {
        "dim" => g.dim,
        "n_cells" => g.n_cells(),
        "n_velocities" => g.n_velocities(),
        "n_dof" => g.n_dof(),
        "R" => g.radius,
        "cell_measure" => g.cell_measure,
        "dx" => g.dx,
        "n_boundary_pairs" => faces.len(),
        "n_inflow_pairs" => n_inflow,
        "min_control_time" => g.min_control_time(),
        "horizon" => disc.tree.horizon(),
        "horizon_exceeds_2R" => disc.tree.horizon() > g.min_control_time(),
        "n_substeps" => disc.grid.n_sub,
        "substep" => disc.grid.h,
        "cfl" => disc.grid.cfl,
    })
}

#[derive(Serialize)]
struct MeanRow {
    level: usize,
    time: f64,
    dof: usize,
    cell: usize,
    velocity: usize,
    mean: f64,
}

pub fn simulate(cfg: &RunConfig, out: &mut Output) -> Result<Summary, CliError> {
    let disc = cfg.discretization()?;
    let coeffs = cfg.coefficients(&disc)?;
    let y0 = draw(cfg.data.initial, disc.n_dof(), cfg.seed, streams::INITIAL);
    let controls = match cfg.data.controls {
        Controls::None => ControlPair::none(),
        Controls::Random => random_controls(&disc, &mut rng_for(cfg.seed, streams::CONTROLS)),
    };
    let path = forward_solve(&disc, &coeffs, &y0, &controls)?;
    let rep = energy_report(&disc, &coeffs, &controls, &path)?;
    out.csv("energy.csv", rep.levels.iter())?;
    let nv = disc.geometry.n_velocities();
    let mean = expectation_field(&path);
    out.csv(
        "mean.csv",
        mean.iter().enumerate().flat_map(|(level, m)| {
            let time = disc.tree.time(level);
            m.iter().enumerate().map(move |(dof, &mean)| MeanRow {
                level,
                time,
                dof,
                cell: dof / nv,
                velocity: dof % nv,
                mean,
            })
        }),
    )?;
    let gr = &rep.gronwall;
    Ok(fields! {
        "terminal_energy" => disc.terminal_inner(path.terminal(), path.terminal()),
        "control_energy" => controls.energy(&disc),
        "energy_defect_max" => rep.max_abs_cumulative,
        "sup_energy" => gr.sup_energy,
        "data_energy" => gr.data_energy,
        "r1" => gr.r1,
        "gronwall_c_impl" => gr.c_impl,
        "gronwall_c_required" => gr.c_required,
        "gronwall_holds" => gr.holds,
    })
}

#[derive(Serialize)]
struct HiddenRow {
    sample: usize,
    terminal_energy: f64,
    trace_energy: f64,
    ratio: f64,
}

pub fn backward(cfg: &RunConfig, out: &mut Output) -> Result<Summary, CliError> {
    let disc = cfg.discretization()?;
    let coeffs = cfg.coefficients(&disc)?;
    let mut rows = Vec::new();
    for (sample, z_t) in terminal_samples(&disc, cfg).iter().enumerate() {
        let bw = backward_solve(&disc, &coeffs, z_t)?;
        let (_, ratio) = hidden_regularity_trace(&bw, &disc)?;
        let terminal_energy = disc.terminal_inner(z_t, z_t);
        rows.push(HiddenRow {
            sample,
            terminal_energy,
            trace_energy: ratio * terminal_energy,
            ratio,
        });
    }
    let max = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let min = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let samples = rows.len();
    out.csv("hidden_regularity.csv", rows)?;
    Ok(fields! {
        "samples" => samples,
        "trace_ratio_max" => max,
        "trace_ratio_min" => min,
    })
}

#[derive(Serialize)]
struct DualityRow {
    sample: usize,
    terminal: f64,
    initial: f64,
    boundary: f64,
    internal: f64,
    drift: f64,
    residual: f64,
    relative: f64,
}

pub fn duality_check(cfg: &RunConfig, out: &mut Output) -> Result<Summary, CliError> {
    let disc = cfg.discretization()?;
    let coeffs = cfg.coefficients(&disc)?;
    let mut rng = rng_for(cfg.seed, streams::CONTROLS);
    let mut rows = Vec::new();
    for (sample, z_t) in terminal_samples(&disc, cfg).iter().enumerate() {
        let y0: Vec<f64> = (0..disc.n_dof())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let c = random_controls(&disc, &mut rng);
        let fw = forward_solve(&disc, &coeffs, &y0, &c)?;
        let bw = backward_solve(&disc, &coeffs, z_t)?;
        let r = duality_pairing_check(&disc, &coeffs, &c, &fw, &bw)?;
        rows.push(DualityRow {
            sample,
            terminal: r.terminal,
            initial: r.initial,
            boundary: r.boundary,
            internal: r.internal,
            drift: r.drift,
            residual: r.residual,
            relative: r.relative,
        });
    }
    let worst = rows.iter().map(|r| r.relative).fold(0.0, f64::max);
    let samples = rows.len();
    out.csv("duality.csv", rows)?;
    Ok(fields! {
        "samples" => samples,
        "relative_max" => worst,
        "within_1e-10" => worst <= 1e-10,
    })
}

#[derive(Serialize)]
struct CarlemanRow {
    sample: usize,
    terminal_term: f64,
    interior_term: f64,
    derived_rhs: f64,
    derived_defect: f64,
    printed_rhs: f64,
    printed_defect: f64,
    identity_imbalance: f64,
    epsilon: f64,
    defect_ok: bool,
    observability_holds: bool,
}

pub fn carleman_check(cfg: &RunConfig, out: &mut Output) -> Result<Summary, CliError> {
    let disc = cfg.discretization()?;
    let coeffs = cfg.coefficients(&disc)?;
    let (lambda, c, l1) = cfg.weight(&disc, &coeffs)?;
    let w = CarlemanWeight::new(lambda, c, disc.tree.horizon())?;
    w.check_geometry(&disc.geometry)?;
    let mut rows = Vec::new();
    for (sample, z_t) in terminal_samples(&disc, cfg).iter().enumerate() {
        let bw = backward_solve(&disc, &coeffs, z_t)?;
        let s = carleman_sides(&bw, &coeffs, &w, &disc)?;
        rows.push(CarlemanRow {
            sample,
            terminal_term: s.terminal_term,
            interior_term: s.interior_term,
            derived_rhs: s.derived.rhs,
            derived_defect: s.derived.defect,
            printed_rhs: s.printed.rhs,
            printed_defect: s.printed.defect,
            identity_imbalance: s.identity_imbalance,
            epsilon: s.epsilon,
            defect_ok: s.derived.defect >= -s.epsilon,
            observability_holds: s.observability.holds,
        });
    }
    let all_ok = rows.iter().all(|r| r.defect_ok);
    let eps_frac = rows
        .iter()
        .map(|r| r.epsilon / r.derived_rhs.abs())
        .fold(0.0, f64::max);
    let min_defect = rows
        .iter()
        .map(|r| r.derived_defect)
        .fold(f64::INFINITY, f64::min);
    let observability = rows.iter().all(|r| r.observability_holds);
    let samples = rows.len();
    out.csv("carleman.csv", rows)?;
    Ok(fields! {
        "lambda" => lambda,
        "c" => c,
        "lambda_one" => l1,
        "below_lambda_one" => lambda < l1,
        "samples" => samples,
        "defects_ok" => all_ok,
        "defect_min" => min_defect,
        "epsilon_over_rhs_max" => eps_frac,
        "observability_holds" => observability,
    })
}

pub fn observability(cfg: &RunConfig, out: &mut Output) -> Result<Summary, CliError> {
    let disc = cfg.discretization()?;
    let coeffs = cfg.coefficients(&disc)?;
    let op = GramianOperator::new(&disc, &coeffs);
    let settings = EigSettings {
        iterations: cfg.solver.eig_iterations,
        cg_tol: cfg.solver.eig_cg_tol,
        cg_max_iter: cfg.solver.eig_cg_max_iter,
        seed: cfg.seed,
    };
    let rep = min_gramian_eig_report(&op, settings)?;
    out.csv("eigen.csv", [&rep])?;
    Ok(fields! {
        "lambda_min" => rep.lambda_min,
        "observability_constant" => rep.observability_constant,
        "iterations" => rep.iterations,
        "cg_iterations" => rep.cg_iterations,
        "resolved" => rep.resolved,
        "horizon_exceeds_2R" => disc.tree.horizon() > disc.geometry.min_control_time(),
    })
}

#[derive(Serialize)]
struct TerminalRow {
    leaf: usize,
    dof: usize,
    target: f64,
    reached: f64,
}

#[derive(Serialize)]
struct BoundaryControlRow {
    level: usize,
    node: usize,
    substep: usize,
    pair: usize,
    value: f64,
}

#[derive(Serialize)]
struct DiffusionControlRow {
    level: usize,
    node: usize,
    dof: usize,
    value: f64,
}

pub fn hum(cfg: &RunConfig, out: &mut Output) -> Result<Summary, CliError> {
    let disc = cfg.discretization()?;
    let coeffs = cfg.coefficients(&disc)?;
    let nd = disc.n_dof();
    let y0 = draw(cfg.data.initial, nd, cfg.seed, streams::INITIAL);
    let y1 = draw(
        cfg.data.target,
        nd << disc.n_steps(),
        cfg.seed,
        streams::TARGET,
    );
    let sol = hum_solve(
        &disc,
        &coeffs,
        &y0,
        &y1,
        cfg.solver.tol,
        cfg.solver.max_iter,
    )?;
    let reached = forward_solve(&disc, &coeffs, &y0, &sol.controls)?;
    out.csv(
        "terminal.csv",
        y1.iter()
            .zip(reached.terminal())
            .enumerate()
            .map(|(i, (&target, &reached))| TerminalRow {
                leaf: i / nd,
                dof: i % nd,
                target,
                reached,
            }),
    )?;
    if let Some(u) = &sol.controls.u {
        let n_in = disc.stencil.n_inflow();
        let mut rows = Vec::new();
        for (level, vals) in u.levels.iter().enumerate() {
            let width = u.node_width(level);
            for (i, &value) in vals.iter().enumerate() {
                rows.push(BoundaryControlRow {
                    level,
                    node: i / width,
                    substep: disc.grid.start[level] + (i % width) / n_in,
                    pair: i % n_in,
                    value,
                });
            }
        }
        out.csv("boundary_control.csv", rows)?;
    }
    if let Some(v) = &sol.controls.v {
        out.csv(
            "diffusion_control.csv",
            v.levels().iter().enumerate().flat_map(|(level, vals)| {
                vals.iter()
                    .enumerate()
                    .map(move |(i, &value)| DiffusionControlRow {
                        level,
                        node: i / nd,
                        dof: i % nd,
                        value,
                    })
            }),
        )?;
    }
    Ok(fields! {
        "terminal_error" => sol.terminal_error,
        "relative_error" => sol.relative_error,
        "cg_iterations" => sol.cg_iterations,
        "cg_residual" => sol.cg_residual,
        "converged" => sol.converged,
        "control_energy" => sol.control_energy,
    })
}

fn setup(cfg: &RunConfig) -> NegativeSetup {
    let n = &cfg.negative;
    NegativeSetup {
        half_width: n.half_width,
        n_cells: n.cells,
        horizon: n.horizon,
        a3: n.a3,
    }
}

#[derive(Serialize)]
struct MeanDepthRow {
    depth: usize,
    mean_terminal_max_abs: f64,
    jensen_bound: f64,
    min_residual_sq: f64,
    min_energy: f64,
    iterations: usize,
    converged: bool,
}

pub fn negative_mean(cfg: &RunConfig, out: &mut Output) -> Result<Summary, CliError> {
    let s = setup(cfg);
    let mut rows = Vec::new();
    for &depth in &cfg.negative.depths {
        let disc = s.discretization(depth)?;
        let y1 = vec![1.0; disc.n_dof() << depth];
        let rep = mean_obstruction_demo(
            &disc,
            Coef::Constant(s.a3),
            &y1,
            cfg.negative.random_v,
            cfg.negative.budget,
            cfg.seed,
        )?;
        let r = &rep.rows[0];
        rows.push(MeanDepthRow {
            depth,
            mean_terminal_max_abs: rep.mean_terminal_max_abs.unwrap_or(0.0),
            jensen_bound: rep.jensen_bound.unwrap_or(0.0),
            min_residual_sq: r.min_residual_sq,
            min_energy: r.min_energy,
            iterations: r.iterations,
            converged: r.converged,
        });
    }
    let mean_zero = rows.iter().all(|r| r.mean_terminal_max_abs <= 1e-12);
    let jensen = rows
        .iter()
        .all(|r| r.min_residual_sq >= r.jensen_bound - 1e-9);
    let depths = rows.len();
    out.csv("mean.csv", rows)?;
    Ok(fields! {
        "experiment" => "mean",
        "depths" => depths,
        "mean_is_zero" => mean_zero,
        "jensen_bound_holds" => jensen,
    })
}

#[derive(Serialize)]
struct PengRow {
    depth: usize,
    sign_changes: usize,
    expected_sign_changes: usize,
}

#[derive(Serialize)]
struct IntegrandRow {
    depth: usize,
    level: usize,
    time: f64,
    eta: f64,
}

pub fn negative_peng(cfg: &RunConfig, out: &mut Output) -> Result<Summary, CliError> {
    let depths = &cfg.negative.depths;
    let horizon = cfg.negative.horizon;
    let rep = peng_oscillation_report(depths, horizon)?;
    out.csv(
        "peng.csv",
        rep.depths.iter().enumerate().map(|(i, &depth)| PengRow {
            depth,
            sign_changes: rep.sign_changes[i],
            expected_sign_changes: rep.expected_sign_changes[i],
        }),
    )?;
    out.csv(
        "integrand.csv",
        depths.iter().flat_map(|&depth| {
            (0..depth).map(move |level| IntegrandRow {
                depth,
                level,
                time: horizon * level as f64 / depth as f64,
                eta: peng_eta_grid(level, depth),
            })
        }),
    )?;
    Ok(fields! {
        "experiment" => "peng",
        "sign_changes" => rep.sign_changes,
        "expected_sign_changes" => rep.expected_sign_changes,
        "counts_match" => rep.sign_changes == rep.expected_sign_changes,
        "integrand_error" => rep.integrand_error,
        "integrand_spread" => rep.integrand_spread,
    })
}

#[derive(Serialize)]
struct LocalizedRow {
    mode: String,
    depth: usize,
    min_residual_sq: f64,
    min_energy: f64,
    iterations: usize,
    converged: bool,
}

pub fn negative_localized(cfg: &RunConfig, out: &mut Output) -> Result<Summary, CliError> {
    let s = setup(cfg);
    let modes: &[LocalizedMode] = match cfg.negative.mode {
        ModeChoice::VOffG0 => &[LocalizedMode::VOffG0],
        ModeChoice::DriftOnly => &[LocalizedMode::DriftOnly],
        ModeChoice::Both => &[LocalizedMode::VOffG0, LocalizedMode::DriftOnly],
    };
    let [a, b] = cfg.negative.g0;
    let mut rows = Vec::new();
    let mut summary = fields! { "experiment" => "localized" };
    for &mode in modes {
        let rep = localized_target_energy_growth(
            &s,
            mode,
            (a, b),
            &cfg.negative.depths,
            cfg.negative.budget,
        )?;
        summary.insert(
            format!("{}_energy_nondecreasing", rep.experiment),
            rep.energy_nondecreasing().into(),
        );
        for r in &rep.rows {
            rows.push(LocalizedRow {
                mode: rep.experiment.clone(),
                depth: r.depth,
                min_residual_sq: r.min_residual_sq,
                min_energy: r.min_energy,
                iterations: r.iterations,
                converged: r.converged,
            });
        }
    }
    out.csv("localized.csv", rows)?;
    Ok(summary)
}
