//! Controlled forward stochastic transport equation on the scenario tree.
//!
//! Within tree level `k`, each node runs the level's transport substeps
//!
//! ```text
//! w <- w + h (−D w + a1 w + Q w) + h B u_s + h (f + ℓ)
//! ```
//!
//! starting from `w = y_k`, then branches into
//! `y_{k+1}(n±) = w ± sqrt(dt) (a3 y_k + v_k)`. Coefficients, the source `f`
//! and the controls are read at the parent node.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, NodeCoef};
use crate::error::{Result, StcError};
use crate::geometry::BoundaryTrace;
use crate::par;
use crate::scheme::Discretization;
use crate::tree::AdaptedField;

/// Boundary control `u`, diffusion control `v` and an optional drift
/// control `ℓ`. A missing entry means the control is identically zero.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlPair {
    pub u: Option<BoundaryTrace>,
    pub v: Option<AdaptedField>,
    pub drift: Option<AdaptedField>,
}

impl ControlPair {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(u: BoundaryTrace, v: AdaptedField) -> Self {
        Self {
            u: Some(u),
            v: Some(v),
            drift: None,
        }
    }

    pub fn validate(&self, disc: &Discretization) -> Result<()> {
        let n = disc.n_steps();
        let nd = disc.n_dof();
        if let Some(u) = &self.u {
            if u.n_inflow != disc.stencil.n_inflow()
                || u.substeps != disc.grid.substeps_per_level()
                || u.n_levels() != n
            {
                return Err(StcError::Shape(
                    "boundary control does not match the inflow faces and substep grid".into(),
                ));
            }
        }
        for (name, c) in [("v", &self.v), ("drift", &self.drift)] {
            if let Some(c) = c {
                if c.width() != nd || c.n_levels() != n {
                    return Err(StcError::Shape(format!(
                        "{name} must have width {nd} on {n} levels, got width {} on {} levels",
                        c.width(),
                        c.n_levels()
                    )));
                }
            }
        }
        Ok(())
    }

    /// `|u|²_w + E Σ dt |v|² + E Σ dt |ℓ|²`.
    pub fn energy(&self, disc: &Discretization) -> f64 {
        let u = self
            .u
            .as_ref()
            .map_or(0.0, |u| u.inner_with(u, &disc.stencil.inflow_weight));
        let field = |f: &Option<AdaptedField>| {
            f.as_ref().map_or(0.0, |f| {
                (0..f.n_levels())
                    .map(|k| disc.level_inner(f.level(k), f.level(k), k))
                    .sum::<f64>()
                    * disc.tree.dt()
            })
        };
        u + field(&self.v) + field(&self.drift)
    }
}

/// Trajectory of a forward solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePath {
    pub y: AdaptedField,
    pub cfl: f64,
    pub dx: f64,
    pub n_sub: usize,
}

impl StatePath {
    pub fn terminal(&self) -> &[f64] {
        self.y.last()
    }
}

/// Coefficient views at one node.
#[derive(Clone, Copy)]
pub(crate) struct NodeCoefs<'a> {
    pub a1: NodeCoef<'a>,
    pub a2: NodeCoef<'a>,
    pub a3: NodeCoef<'a>,
    pub f: NodeCoef<'a>,
}

impl<'a> NodeCoefs<'a> {
    pub fn at(c: &'a CoefficientSet, level: usize, node: usize) -> Self {
        Self {
            a1: c.a1.at(level, node),
            a2: c.a2.at(level, node),
            a3: c.a3.at(level, node),
            f: c.f.at(level, node),
        }
    }
}

/// `out = (−D + a1 + Q) w`.
pub(crate) fn drift_apply(disc: &Discretization, c: &NodeCoefs, w: &[f64], out: &mut [f64]) {
    disc.stencil.apply(w, out);
    let nv = disc.geometry.n_velocities();
    let vw = &disc.geometry.vel_weights;
    for (p, o) in out.iter_mut().enumerate() {
        *o = c.a1.get(p) * w[p] - *o;
    }
    if !c.a2.is_zero() {
        for (i, cell) in w.chunks(nv).enumerate() {
            for j in 0..nv {
                let p = i * nv + j;
                let base = p * nv;
                let s: f64 = (0..nv).map(|m| c.a2.get(base + m) * vw[m] * cell[m]).sum();
                out[p] += s;
            }
        }
    }
}

/// `out = (−D + a1 + Q)* λ` in the quadrature inner product.
pub(crate) fn drift_apply_adjoint(
    disc: &Discretization,
    c: &NodeCoefs,
    lam: &[f64],
    out: &mut [f64],
) {
    disc.stencil.apply_adjoint(lam, out);
    let nv = disc.geometry.n_velocities();
    let vw = &disc.geometry.vel_weights;
    for (p, o) in out.iter_mut().enumerate() {
        *o = c.a1.get(p) * lam[p] - *o;
    }
    if !c.a2.is_zero() {
        for (i, cell) in lam.chunks(nv).enumerate() {
            for m in 0..nv {
                let s: f64 = (0..nv)
                    .map(|j| c.a2.get((i * nv + j) * nv + m) * vw[j] * cell[j])
                    .sum();
                out[i * nv + m] += s;
            }
        }
    }
}

/// Runs the transport substeps of one level in place on `w`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn level_transport(
    disc: &Discretization,
    c: &NodeCoefs,
    w: &mut [f64],
    tmp: &mut [f64],
    substeps: usize,
    u: Option<&[f64]>,
    drift: Option<&[f64]>,
    use_source: bool,
) {
    let h = disc.grid.h;
    let st = &disc.stencil;
    let nb = st.n_inflow();
    for s in 0..substeps {
        drift_apply(disc, c, w, tmp);
        for (x, a) in w.iter_mut().zip(tmp.iter()) {
            *x += h * a;
        }
        if use_source && !c.f.is_zero() {
            for (p, x) in w.iter_mut().enumerate() {
                *x += h * c.f.get(p);
            }
        }
        if let Some(l) = drift {
            for (x, a) in w.iter_mut().zip(l) {
                *x += h * a;
            }
        }
        if let Some(u) = u {
            let us = &u[s * nb..(s + 1) * nb];
            for b in 0..nb {
                w[st.inflow_dof[b]] += h * st.inflow_coef[b] * us[b];
            }
        }
    }
}

pub(crate) fn forward_impl(
    disc: &Discretization,
    coeffs: &CoefficientSet,
    y0: &[f64],
    controls: &ControlPair,
    use_source: bool,
) -> Result<StatePath> {
    let nd = disc.n_dof();
    let n = disc.n_steps();
    if y0.len() != nd {
        return Err(StcError::Shape(format!(
            "initial state has {} values, grid has {nd}",
            y0.len()
        )));
    }
    let g = &disc.geometry;
    coeffs.validate(g.n_cells(), g.n_velocities(), n)?;
    controls.validate(disc)?;
    let sq = disc.tree.sqrt_dt();
    let mut y = AdaptedField::zeros(nd, 0);
    y.push_level(y0.to_vec())?;
    for k in 0..n {
        let half = 1usize << k;
        let m = disc.grid.substeps(k);
        let mut next = vec![0.0; 2 * half * nd];
        let (down, up) = next.split_at_mut(half * nd);
        let cur = y.level(k);
        par::for_each_chunk2(down, nd, up, nd, |node, d, u| {
            let yk = &cur[node * nd..(node + 1) * nd];
            let c = NodeCoefs::at(coeffs, k, node);
            let mut w = yk.to_vec();
            let mut tmp = vec![0.0; nd];
            level_transport(
                disc,
                &c,
                &mut w,
                &mut tmp,
                m,
                controls.u.as_ref().map(|t| t.node(k, node)),
                controls.drift.as_ref().map(|l| l.node(k, node)),
                use_source,
            );
            let v = controls.v.as_ref().map(|v| v.node(k, node));
            for p in 0..nd {
                let mut noise = c.a3.get(p) * yk[p];
                if let Some(v) = v {
                    noise += v[p];
                }
                d[p] = w[p] - sq * noise;
                u[p] = w[p] + sq * noise;
            }
        });
        y.push_level(next)?;
    }
    Ok(StatePath {
        y,
        cfl: disc.grid.cfl,
        dx: g.dx,
        n_sub: disc.grid.n_sub,
    })
}

/// Solves the forward equation from `y0` under the given controls.
pub fn forward_solve(
    disc: &Discretization,
    coeffs: &CoefficientSet,
    y0: &[f64],
    controls: &ControlPair,
) -> Result<StatePath> {
    forward_impl(disc, coeffs, y0, controls, true)
}

/// Dense one-level maps at a node: the children are
/// `m y + b u + f ± sqrt(dt) (n y + v)`, where `u` stacks the level's
/// substep controls (substep-major) and `b`, `f` already include the
/// substep length.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMatrices {
    pub m: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub f: DVector<f64>,
}

pub fn forward_step_matrices(
    disc: &Discretization,
    coeffs: &CoefficientSet,
    level: usize,
    node: usize,
) -> Result<StepMatrices> {
    let n = disc.n_steps();
    if level >= n || node >= 1 << level {
        return Err(StcError::LevelMismatch {
            expected: n.saturating_sub(1),
            got: level,
        });
    }
    let g = &disc.geometry;
    coeffs.validate(g.n_cells(), g.n_velocities(), n)?;
    let nd = disc.n_dof();
    let nb = disc.stencil.n_inflow();
    let ms = disc.grid.substeps(level);
    let c = NodeCoefs::at(coeffs, level, node);
    let mut tmp = vec![0.0; nd];
    let mut m = DMatrix::zeros(nd, nd);
    for col in 0..nd {
        let mut w = vec![0.0; nd];
        w[col] = 1.0;
        level_transport(disc, &c, &mut w, &mut tmp, ms, None, None, false);
        m.set_column(col, &DVector::from_vec(w));
    }
    let mut b = DMatrix::zeros(nd, ms * nb);
    for col in 0..ms * nb {
        let mut w = vec![0.0; nd];
        let mut u = vec![0.0; ms * nb];
        u[col] = 1.0;
        level_transport(disc, &c, &mut w, &mut tmp, ms, Some(&u), None, false);
        b.set_column(col, &DVector::from_vec(w));
    }
    let mut w = vec![0.0; nd];
    level_transport(disc, &c, &mut w, &mut tmp, ms, None, None, true);
    let n_mat = DMatrix::from_diagonal(&DVector::from_fn(nd, |p, _| c.a3.get(p)));
    Ok(StepMatrices {
        m,
        n: n_mat,
        b,
        f: DVector::from_vec(w),
    })
}

/// Per-level mean `E y_k`.
pub fn expectation_field(path: &StatePath) -> Vec<Vec<f64>> {
    let nd = path.y.width();
    path.y
        .levels()
        .iter()
        .map(|l| {
            let nodes = l.len() / nd;
            let mut mean = vec![0.0; nd];
            for c in l.chunks(nd) {
                mean.iter_mut().zip(c).for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= nodes as f64);
            mean
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEnergy {
    pub level: usize,
    /// `E|y_{k+1}|² − E|y_k|²`.
    pub lhs: f64,
    /// Itô expansion: transport, reaction, source, boundary flux, noise.
    pub rhs: f64,
    pub residual: f64,
    /// Sum of residuals over levels `0..=k`.
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GronwallCheck {
    /// `E sup_k |y_k|²`.
    pub sup_energy: f64,
    /// `|y0|² + |f|² + |u|²_w + |v|²`.
    pub data_energy: f64,
    pub r1: f64,
    /// Constant used by the implementation's bound `e^{C r1}`.
    pub c_impl: f64,
    /// Smallest `C` for which the bound holds on this path.
    pub c_required: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub levels: Vec<LevelEnergy>,
    pub max_abs_cumulative: f64,
    pub gronwall: GronwallCheck,
}

/// Constant in the reported Gronwall bound `e^{C r1}` for horizon `T`.
pub fn gronwall_constant(horizon: f64) -> f64 {
    4.0 * (1.0 + horizon)
}

/// Discrete Itô energy balance of a forward path.
pub fn energy_report(
    disc: &Discretization,
    coeffs: &CoefficientSet,
    controls: &ControlPair,
    path: &StatePath,
) -> Result<EnergyReport> {
    let nd = disc.n_dof();
    let n = disc.n_steps();
    if path.y.n_levels() != n + 1 || path.y.width() != nd {
        return Err(StcError::Shape(
            "path does not match the discretization".into(),
        ));
    }
    controls.validate(disc)?;
    let dt = disc.tree.dt();
    let h = disc.grid.h;
    let st = &disc.stencil;
    let energy: Vec<f64> = (0..=n)
        .map(|k| disc.level_inner(path.y.level(k), path.y.level(k), k))
        .collect();
    let mut levels = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut max_abs = 0.0f64;
    for k in 0..n {
        let yk = path.y.level(k);
        let m = disc.grid.substeps(k);
        let parts = par::map_range(1 << k, |node| {
            let y = &yk[node * nd..(node + 1) * nd];
            let c = NodeCoefs::at(coeffs, k, node);
            let mut ay = vec![0.0; nd];
            drift_apply(disc, &c, y, &mut ay);
            if !c.f.is_zero() {
                ay.iter_mut()
                    .enumerate()
                    .for_each(|(p, a)| *a += c.f.get(p));
            }
            if let Some(l) = &controls.drift {
                ay.iter_mut()
                    .zip(l.node(k, node))
                    .for_each(|(a, x)| *a += x);
            }
            let mut r = 2.0 * dt * disc.inner(y, &ay);
            if let Some(u) = &controls.u {
                let un = u.node(k, node);
                let nb = st.n_inflow();
                for s in 0..m {
                    for b in 0..nb {
                        r += 2.0 * h * st.inflow_weight[b] * y[st.inflow_dof[b]] * un[s * nb + b];
                    }
                }
            }
            let v = controls.v.as_ref().map(|v| v.node(k, node));
            let noise: Vec<f64> = (0..nd)
                .map(|p| c.a3.get(p) * y[p] + v.map_or(0.0, |v| v[p]))
                .collect();
            r + dt * disc.inner(&noise, &noise)
        });
        let rhs = parts.into_iter().sum::<f64>() * disc.tree.prob(k);
        let lhs = energy[k + 1] - energy[k];
        cum += lhs - rhs;
        max_abs = max_abs.max(cum.abs());
        levels.push(LevelEnergy {
            level: k,
            lhs,
            rhs,
            residual: lhs - rhs,
            cumulative: cum,
        });
    }

    // E sup_k |y_k|² over leaves
    let nleaves = disc.tree.n_leaves();
    let sups = par::map_range(nleaves, |leaf| {
        (0..=n)
            .map(|k| {
                let node = disc.tree.ancestor(leaf, k);
                let y = path.y.node(k, node);
                disc.inner(y, y)
            })
            .fold(0.0f64, f64::max)
    });
    let sup_energy = sups.into_iter().sum::<f64>() / nleaves as f64;
    let f_energy = match &coeffs.f {
        crate::coefficients::Coef::Zero => 0.0,
        f => (0..n)
            .map(|k| {
                let parts = par::map_range(1 << k, |node| {
                    let c = f.at(k, node);
                    (0..nd)
                        .map(|p| disc.weights[p] * c.get(p).powi(2))
                        .sum::<f64>()
                });
                parts.into_iter().sum::<f64>() * disc.tree.prob(k) * dt
            })
            .sum(),
    };
    let data_energy = energy[0] + f_energy + controls.energy(disc);
    let r1 = coeffs.r1();
    let c_impl = gronwall_constant(disc.tree.horizon());
    let c_required = if sup_energy == 0.0 {
        0.0
    } else if data_energy == 0.0 {
        f64::INFINITY
    } else {
        ((sup_energy / data_energy).ln() / r1).max(0.0)
    };
    Ok(EnergyReport {
        levels,
        max_abs_cumulative: max_abs,
        gronwall: GronwallCheck {
            sup_energy,
            data_energy,
            r1,
            c_impl,
            c_required,
            holds: c_required <= c_impl,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::Coef;
    use crate::geometry::{Geometry, GeometrySpec};
    use crate::scheme::SubstepRule;
    use crate::tree::ScenarioTree;

    fn disc_1d(cells: usize, t: f64, steps: usize, rule: SubstepRule) -> Discretization {
        let g = Geometry::build(&GeometrySpec::interval(-0.5, 0.5, cells)).unwrap();
        Discretization::new(g, ScenarioTree::new(t, steps).unwrap(), rule).unwrap()
    }

    #[test]
    fn zero_data_gives_zero_path() {
        let d = disc_1d(4, 1.0, 3, SubstepRule::Auto);
        let c = CoefficientSet {
            a1: Coef::Constant(0.3),
            a3: Coef::Constant(1.0),
            ..Default::default()
        };
        let p = forward_solve(&d, &c, &[0.0; 8], &ControlPair::none()).unwrap();
        assert_eq!(p.y.max_abs(), 0.0);
    }

    #[test]
    fn single_velocity_advects_exactly() {
        let g = Geometry::build(
            &GeometrySpec::interval(-0.5, 0.5, 8).with_velocities_1d(vec![(1.0, 2.0)]),
        )
        .unwrap();
        let d = Discretization::new(
            g,
            ScenarioTree::new(0.5, 4).unwrap(),
            SubstepRule::PerLevel(1),
        )
        .unwrap();
        assert!((d.grid.cfl - 1.0).abs() < 1e-12);
        let mut y0 = vec![0.0; 8];
        y0[1] = 1.0;
        let p = forward_solve(&d, &CoefficientSet::zero(), &y0, &ControlPair::none()).unwrap();
        for k in 0..=4 {
            for n in 0..1 << k {
                let y = p.y.node(k, n);
                for (i, &v) in y.iter().enumerate() {
                    assert_eq!(v, if i == 1 + k { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn constant_kernel_adds_velocity_sum() {
        let d = disc_1d(4, 0.25, 1, SubstepRule::PerLevel(1));
        let c = CoefficientSet {
            a2: Coef::Constant(0.5),
            ..Default::default()
        };
        let zero = CoefficientSet::zero();
        let m = forward_step_matrices(&d, &c, 0, 0).unwrap().m;
        let m0 = forward_step_matrices(&d, &zero, 0, 0).unwrap().m;
        let diff = m - m0;
        let dt = d.tree.dt();
        for cell in 0..4 {
            for j in 0..2 {
                for mm in 0..2 {
                    assert!((diff[(cell * 2 + j, cell * 2 + mm)] - dt * 0.5).abs() < 1e-15);
                }
            }
        }
        assert!((diff.sum() - 16.0 * dt * 0.5).abs() < 1e-14);
    }

    #[test]
    fn noise_only_energy_recursion() {
        let g = Geometry::build(&GeometrySpec::interval(-0.5, 0.5, 3)).unwrap();
        let mut d =
            Discretization::new(g, ScenarioTree::new(1.0, 5).unwrap(), SubstepRule::Auto).unwrap();
        d.stencil = d.stencil.clone().without_transport();
        let c = CoefficientSet {
            a3: Coef::Constant(1.0),
            ..Default::default()
        };
        let y0 = vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5];
        let p = forward_solve(&d, &c, &y0, &ControlPair::none()).unwrap();
        let dt = d.tree.dt();
        for k in 0..5 {
            let e0 = d.level_inner(p.y.level(k), p.y.level(k), k);
            let e1 = d.level_inner(p.y.level(k + 1), p.y.level(k + 1), k + 1);
            assert!((e1 - (1.0 + dt) * e0).abs() < 1e-13 * e1);
        }
        let rep = energy_report(&d, &c, &ControlPair::none(), &p).unwrap();
        assert!(rep.max_abs_cumulative < 1e-12);
    }

    #[test]
    fn deterministic_path_is_its_own_mean() {
        let d = disc_1d(6, 1.0, 3, SubstepRule::Auto);
        let y0: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let c = CoefficientSet {
            a1: Coef::Constant(-0.2),
            ..Default::default()
        };
        let p = forward_solve(&d, &c, &y0, &ControlPair::none()).unwrap();
        let mean = expectation_field(&p);
        for (k, m) in mean.iter().enumerate() {
            for n in 0..1 << k {
                assert_eq!(p.y.node(k, n), m.as_slice());
            }
        }
    }

    #[test]
    fn shape_errors() {
        let d = disc_1d(4, 1.0, 2, SubstepRule::Auto);
        assert!(
            forward_solve(&d, &CoefficientSet::zero(), &[0.0; 3], &ControlPair::none()).is_err()
        );
        let bad = ControlPair {
            v: Some(AdaptedField::zeros(3, 2)),
            ..Default::default()
        };
        assert!(forward_solve(&d, &CoefficientSet::zero(), &[0.0; 8], &bad).is_err());
    }
}
