//! Demonstrations of the obstructions to exact controllability.
//!
//! All runs use the reduced model `dy + U·∇y dt = (a3 y + v) dB` on a
//! centred interval with two velocities and `a1 = a2 = 0`, `f = 0`.
//! Fixed-depth trees are finite dimensional and may well be controllable, so
//! what is asserted is exact (the mean constraint, the representation
//! integrand) or a trend across depths (growth of the least control energy).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::{rng_for, Coef, CoefficientSet};
use crate::error::{Result, StcError};
use crate::forward::{expectation_field, forward_solve, ControlPair};
use crate::geometry::{Geometry, GeometrySpec};
use crate::hum::{cgls, ControlOperator, ControlSpace};
use crate::scheme::{Discretization, SubstepRule};
use crate::tree::{peng_eta_grid, peng_sign_changes, peng_xi, AdaptedField, ScenarioTree};

/// Geometry and horizon shared by the demos.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegativeSetup {
    pub half_width: f64,
    pub n_cells: usize,
    pub horizon: f64,
    pub a3: f64,
}

impl Default for NegativeSetup {
    fn default() -> Self {
        Self {
            half_width: 0.5,
            n_cells: 16,
            horizon: 1.0,
            a3: 1.0,
        }
    }
}

impl NegativeSetup {
    pub fn discretization(&self, depth: usize) -> Result<Discretization> {
        let g = Geometry::build(&GeometrySpec::interval(
            -self.half_width,
            self.half_width,
            self.n_cells,
        ))?;
        Discretization::new(
            g,
            ScenarioTree::new(self.horizon, depth)?,
            SubstepRule::Auto,
        )
    }

    pub fn coefficients(&self) -> CoefficientSet {
        CoefficientSet {
            a3: Coef::Constant(self.a3),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    pub min_residual_sq: f64,
    pub min_energy: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstructionReport {
    pub experiment: String,
    pub depths: Vec<usize>,
    pub rows: Vec<DepthRow>,
    /// `‖E y1‖²`, a lower bound on every reachable residual².
    pub jensen_bound: Option<f64>,
    /// Largest `|E y(T)|` over the random diffusion controls tried.
    pub mean_terminal_max_abs: Option<f64>,
    pub sign_changes: Vec<usize>,
    pub expected_sign_changes: Vec<usize>,
    /// Largest deviation of the recovered integrand from `η(t_k)`.
    pub integrand_error: Option<f64>,
    /// Largest spread of the recovered integrand across nodes of a level.
    pub integrand_spread: Option<f64>,
}

impl ObstructionReport {
    fn empty(experiment: &str) -> Self {
        Self {
            experiment: experiment.into(),
            depths: Vec::new(),
            rows: Vec::new(),
            jensen_bound: None,
            mean_terminal_max_abs: None,
            sign_changes: Vec::new(),
            expected_sign_changes: Vec::new(),
            integrand_error: None,
            integrand_spread: None,
        }
    }

    /// True when the least energy does not decrease from one depth to the next.
    pub fn energy_nondecreasing(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].min_energy >= w[0].min_energy)
    }
}

fn check_depths(depths: &[usize]) -> Result<()> {
    if depths.is_empty() || depths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(StcError::InvalidParameter(
            "depths must be non-empty and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// `‖E y1‖²` for a terminal field.
pub fn jensen_bound(disc: &Discretization, y1: &[f64]) -> f64 {
    let nd = disc.n_dof();
    let leaves = y1.len() / nd;
    let mut mean = vec![0.0; nd];
    for c in y1.chunks(nd) {
        mean.iter_mut().zip(c).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= leaves as f64);
    disc.inner(&mean, &mean)
}

/// Mean obstruction with diffusion control only: `E y(T) = 0` for every
/// adapted `v`, so no target with nonzero mean is reachable.
pub fn mean_obstruction_demo(
    disc: &Discretization,
    a3: Coef,
    y1: &[f64],
    n_random_v: usize,
    cg_budget: usize,
    seed: u64,
) -> Result<ObstructionReport> {
    let coeffs = CoefficientSet {
        a3,
        ..Default::default()
    };
    let nd = disc.n_dof();
    let n = disc.n_steps();
    if y1.len() != nd << n {
        return Err(StcError::Shape(
            "target does not match the terminal level".into(),
        ));
    }
    let mut rng = rng_for(seed, 0x6d65616e);
    let mut worst = 0.0f64;
    for _ in 0..n_random_v {
        let v = AdaptedField::from_fn(nd, n, |_, _, _| rng.random_range(-1.0..1.0));
        let c = ControlPair {
            v: Some(v),
            ..Default::default()
        };
        let path = forward_solve(disc, &coeffs, &vec![0.0; nd], &c)?;
        let mean = expectation_field(&path);
        worst = worst.max(mean[n].iter().fold(0.0f64, |m, x| m.max(x.abs())));
    }
    let space = ControlSpace {
        initial: false,
        boundary: false,
        diffusion: Some(vec![true; nd]),
        drift: false,
    };
    let op = ControlOperator::new(disc, &coeffs, space);
    let sol = cgls(&op, y1, 1e-12, cg_budget)?;
    let mut rep = ObstructionReport::empty("mean");
    rep.depths.push(n);
    rep.rows.push(DepthRow {
        depth: n,
        min_residual_sq: sol.residual_sq,
        min_energy: sol.energy,
        iterations: sol.iterations,
        converged: sol.converged,
    });
    rep.jensen_bound = Some(jensen_bound(disc, y1));
    rep.mean_terminal_max_abs = Some(worst);
    Ok(rep)
}

/// Representation of `ξ = Σ η(t_k) ΔB_{k+1}` at each depth, with the sign
/// changes of the recovered integrand.
pub fn peng_oscillation_report(depths: &[usize], horizon: f64) -> Result<ObstructionReport> {
    check_depths(depths)?;
    let mut rep = ObstructionReport::empty("peng");
    let mut err = 0.0f64;
    let mut spread = 0.0f64;
    for &n in depths {
        let tree = ScenarioTree::new(horizon, n)?;
        let xi = peng_xi(&tree);
        let (x0, rho) = tree.martingale_representation(&xi)?;
        err = err.max(x0.abs());
        let mut path = Vec::with_capacity(n);
        for k in 0..n {
            let eta = peng_eta_grid(k, n);
            let lvl = rho.level(k);
            let (lo, hi) = lvl
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
                    (a.min(x), b.max(x))
                });
            spread = spread.max(hi - lo);
            err = err.max(lvl.iter().fold(0.0f64, |m, x| m.max((x - eta).abs())));
            path.push(lvl[0]);
        }
        let changes = path
            .windows(2)
            .filter(|w| w[0].signum() != w[1].signum())
            .count();
        rep.depths.push(n);
        rep.sign_changes.push(changes);
        rep.expected_sign_changes.push(peng_sign_changes(n));
    }
    rep.integrand_error = Some(err);
    rep.integrand_spread = Some(spread);
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizedMode {
    /// Boundary control plus diffusion control vanishing on `G0`.
    VOffG0,
    /// Boundary control plus a drift control; no diffusion control.
    DriftOnly,
}

/// `(1 − s²)³` on `(a, b)` rescaled to `s ∈ (−1, 1)`, normalized so that
/// `∫ ψ² dx = 1` in the grid quadrature.
pub fn bump(g: &Geometry, support: (f64, f64)) -> Result<Vec<f64>> {
    let (a, b) = support;
    if a.is_nan() || b.is_nan() || a >= b {
        return Err(StcError::InvalidParameter(format!(
            "empty support ({a}, {b})"
        )));
    }
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let raw: Vec<f64> = g
        .centers
        .iter()
        .map(|x| {
            let s = (x[0] - mid) / half;
            if s.abs() < 1.0 {
                (1.0 - s * s).powi(3)
            } else {
                0.0
            }
        })
        .collect();
    let norm2: f64 = raw.iter().map(|v| v * v).sum::<f64>() * g.cell_measure;
    if norm2 == 0.0 {
        return Err(StcError::InvalidParameter(
            "bump support contains no cell centre".into(),
        ));
    }
    Ok(raw.iter().map(|v| v / norm2.sqrt()).collect())
}

/// Target `ξ ψ` on the terminal level, the same `ψ` for every velocity.
pub fn localized_target(disc: &Discretization, psi: &[f64]) -> Vec<f64> {
    let xi = peng_xi(&disc.tree);
    let nv = disc.geometry.n_velocities();
    let nd = disc.n_dof();
    let mut out = vec![0.0; nd * xi.len()];
    for (leaf, x) in xi.iter().enumerate() {
        for p in 0..nd {
            out[leaf * nd + p] = x * psi[p / nv];
        }
    }
    out
}

/// Least-energy constrained control towards `ξψ` at each depth.
pub fn localized_target_energy_growth(
    setup: &NegativeSetup,
    mode: LocalizedMode,
    g0: (f64, f64),
    depths: &[usize],
    cg_budget: usize,
) -> Result<ObstructionReport> {
    check_depths(depths)?;
    let name = match mode {
        LocalizedMode::VOffG0 => "localized_v_off_g0",
        LocalizedMode::DriftOnly => "localized_drift_only",
    };
    let mut rep = ObstructionReport::empty(name);
    let coeffs = setup.coefficients();
    for &n in depths {
        let disc = setup.discretization(n)?;
        let g = &disc.geometry;
        let nv = g.n_velocities();
        let support = match mode {
            LocalizedMode::VOffG0 => g0,
            LocalizedMode::DriftOnly => (-setup.half_width, setup.half_width),
        };
        let psi = bump(g, support)?;
        let target = localized_target(&disc, &psi);
        let space = match mode {
            LocalizedMode::VOffG0 => ControlSpace {
                initial: true,
                boundary: true,
                diffusion: Some(
                    (0..disc.n_dof())
                        .map(|p| {
                            let x = g.centers[p / nv][0];
                            !(g0.0 < x && x < g0.1)
                        })
                        .collect(),
                ),
                drift: false,
            },
            LocalizedMode::DriftOnly => ControlSpace {
                initial: true,
                boundary: true,
                diffusion: None,
                drift: true,
            },
        };
        let op = ControlOperator::new(&disc, &coeffs, space);
        let sol = cgls(&op, &target, 1e-12, cg_budget)?;
        rep.depths.push(n);
        rep.rows.push(DepthRow {
            depth: n,
            min_residual_sq: sol.residual_sq,
            min_energy: sol.energy,
            iterations: sol.iterations,
            converged: sol.converged,
        });
    }
    Ok(rep)
}
