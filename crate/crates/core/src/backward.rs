//! Backward dual equation, built as the exact adjoint of the forward scheme.
//!
//! From `z_{k+1}` the level-`k` pair is
//!
//! ```text
//! Z_k = E_k[z_{k+1} ΔB_{k+1}] / dt
//! z_k = M_k* E_k[z_{k+1}] + dt N_k* Z_k
//! ```
//!
//! where `*` is the adjoint in the quadrature inner product. The transport
//! part of `M_k*` runs the substeps in reverse; the intermediate values give
//! the inflow trace (paired with the boundary control) and the drift dual
//! (paired with the source and the drift control).

use serde::{Deserialize, Serialize};

use crate::coefficients::{Coef, CoefficientSet};
use crate::error::{Result, StcError};
use crate::forward::{drift_apply_adjoint, ControlPair, NodeCoefs, StatePath};
use crate::geometry::BoundaryTrace;
use crate::par;
use crate::scheme::Discretization;
use crate::tree::{cond_expectation, cond_increment, AdaptedField};

/// Continuous coefficients of the dual equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardCoefficientSet {
    pub b1: Coef,
    /// Kernel with swapped velocity arguments.
    pub b2: Coef,
    pub b3: Coef,
    pub b4: Coef,
}

impl BackwardCoefficientSet {
    /// `|b1|⁴ + |b3|⁴ + |b4|⁴ + |b2| + 1`.
    pub fn r2(&self) -> f64 {
        [&self.b1, &self.b3, &self.b4]
            .iter()
            .map(|b| b.sup_norm().powi(4))
            .sum::<f64>()
            + self.b2.sup_norm()
            + 1.0
    }
}

/// `b1 = −a1`, `b2(U, V) = −a2(V, U)`, `b3 = −a3`, `b4 = 0`.
pub fn adjoint_from_forward(coeffs: &CoefficientSet, n_vel: usize) -> BackwardCoefficientSet {
    let swap = move |v: &[f64]| {
        let mut out = vec![0.0; v.len()];
        for (idx, x) in v.iter().enumerate() {
            let (cell, j, m) = (idx / (n_vel * n_vel), (idx / n_vel) % n_vel, idx % n_vel);
            out[(cell * n_vel + m) * n_vel + j] = -x;
        }
        out
    };
    BackwardCoefficientSet {
        b1: coeffs.a1.negated(),
        b2: match &coeffs.a2 {
            Coef::Constant(c) => Coef::Constant(-c),
            other => other.map_vectors(swap),
        },
        b3: coeffs.a3.negated(),
        b4: Coef::Zero,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardPath {
    /// Levels `0..=n_steps`; the last one is the terminal datum.
    pub z: AdaptedField,
    /// Levels `0..n_steps`.
    pub big_z: AdaptedField,
    /// `z` on the inflow faces at the end of every substep.
    pub trace: BoundaryTrace,
    /// `Σ_s h λ_{s+1}` per level, the dual of a drift-side forcing.
    pub drift_dual: AdaptedField,
}

impl BackwardPath {
    pub fn terminal(&self) -> &[f64] {
        self.z.last()
    }

    pub fn initial(&self) -> &[f64] {
        self.z.level(0)
    }
}

/// Solves the dual equation backward from the terminal datum `z_t`.
pub fn backward_solve(
    disc: &Discretization,
    coeffs: &CoefficientSet,
    z_t: &[f64],
) -> Result<BackwardPath> {
    let nd = disc.n_dof();
    let n = disc.n_steps();
    if z_t.len() != nd << n {
        return Err(StcError::Shape(format!(
            "terminal datum needs {} values, got {}",
            nd << n,
            z_t.len()
        )));
    }
    let g = &disc.geometry;
    coeffs.validate(g.n_cells(), g.n_velocities(), n)?;
    let st = &disc.stencil;
    let nb = st.n_inflow();
    let h = disc.grid.h;
    let dt = disc.tree.dt();
    let sq = disc.tree.sqrt_dt();

    let mut z_levels: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    let mut zz_levels: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut dual_levels: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut trace = BoundaryTrace::zeros(nb, disc.grid.substeps_per_level(), h);
    z_levels[n] = z_t.to_vec();
    for k in (0..n).rev() {
        let next = &z_levels[k + 1];
        let e_hat = cond_expectation(next, nd, k);
        let z_chk = cond_increment(next, nd, k, sq);
        let m = disc.grid.substeps(k);
        let mut zk = vec![0.0; nd << k];
        let mut dual = vec![0.0; nd << k];
        let tw = m * nb;
        par::for_each_chunk3(
            &mut zk,
            nd,
            &mut dual,
            nd,
            &mut trace.levels[k],
            tw.max(1),
            |node, zo, du, tr| {
                let c = NodeCoefs::at(coeffs, k, node);
                let mut lam = e_hat[node * nd..(node + 1) * nd].to_vec();
                let mut tmp = vec![0.0; nd];
                for s in (0..m).rev() {
                    for b in 0..nb {
                        tr[s * nb + b] = lam[st.inflow_dof[b]];
                    }
                    for (d, l) in du.iter_mut().zip(&lam) {
                        *d += h * l;
                    }
                    drift_apply_adjoint(disc, &c, &lam, &mut tmp);
                    for (l, a) in lam.iter_mut().zip(&tmp) {
                        *l += h * a;
                    }
                }
                let zc = &z_chk[node * nd..(node + 1) * nd];
                for p in 0..nd {
                    zo[p] = lam[p] + dt * c.a3.get(p) * zc[p];
                }
            },
        );
        if nb == 0 {
            // for_each_chunk3 skips zero-width buffers; run the level without traces
            run_level_without_trace(disc, coeffs, k, &e_hat, &z_chk, &mut zk, &mut dual);
        }
        z_levels[k] = zk;
        zz_levels[k] = z_chk;
        dual_levels[k] = dual;
    }
    Ok(BackwardPath {
        z: AdaptedField::from_levels(nd, z_levels)?,
        big_z: AdaptedField::from_levels(nd, zz_levels)?,
        trace,
        drift_dual: AdaptedField::from_levels(nd, dual_levels)?,
    })
}

fn run_level_without_trace(
    disc: &Discretization,
    coeffs: &CoefficientSet,
    k: usize,
    e_hat: &[f64],
    z_chk: &[f64],
    zk: &mut [f64],
    dual: &mut [f64],
) {
    let nd = disc.n_dof();
    let h = disc.grid.h;
    let dt = disc.tree.dt();
    let m = disc.grid.substeps(k);
    par::for_each_chunk2(zk, nd, dual, nd, |node, zo, du| {
        let c = NodeCoefs::at(coeffs, k, node);
        let mut lam = e_hat[node * nd..(node + 1) * nd].to_vec();
        let mut tmp = vec![0.0; nd];
        for _ in 0..m {
            for (d, l) in du.iter_mut().zip(&lam) {
                *d += h * l;
            }
            drift_apply_adjoint(disc, &c, &lam, &mut tmp);
            for (l, a) in lam.iter_mut().zip(&tmp) {
                *l += h * a;
            }
        }
        let zc = &z_chk[node * nd..(node + 1) * nd];
        for p in 0..nd {
            zo[p] = lam[p] + dt * c.a3.get(p) * zc[p];
        }
    });
}

/// Both sides of the discrete duality identity
/// `E⟨y_T, z_T⟩ − ⟨y_0, z_0⟩ = boundary + internal + drift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub terminal: f64,
    pub initial: f64,
    /// `E Σ h ⟨u, z|_inflow⟩_w`.
    pub boundary: f64,
    /// `E Σ dt ⟨v, Z⟩`.
    pub internal: f64,
    /// `E Σ ⟨f + ℓ, drift dual⟩`.
    pub drift: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    /// Residual over the sum of absolute values of all terms.
    pub relative: f64,
}

/// Evaluates the duality identity for a forward path and a backward path
/// built on the same discretization and coefficients.
pub fn duality_pairing_check(
    disc: &Discretization,
    coeffs: &CoefficientSet,
    controls: &ControlPair,
    forward: &StatePath,
    backward: &BackwardPath,
) -> Result<DualityReport> {
    let nd = disc.n_dof();
    let n = disc.n_steps();
    if forward.y.n_levels() != n + 1
        || backward.z.n_levels() != n + 1
        || forward.y.width() != nd
        || backward.z.width() != nd
        || !backward.trace.same_shape(&BoundaryTrace::zeros(
            disc.stencil.n_inflow(),
            disc.grid.substeps_per_level(),
            disc.grid.h,
        ))
    {
        return Err(StcError::InvalidParameter(
            "forward and backward paths come from different step data".into(),
        ));
    }
    controls.validate(disc)?;
    let dt = disc.tree.dt();
    let terminal = disc.terminal_inner(forward.terminal(), backward.terminal());
    let initial = disc.inner(forward.y.level(0), backward.initial());
    let boundary = controls.u.as_ref().map_or(0.0, |u| {
        u.inner_with(&backward.trace, &disc.stencil.inflow_weight)
    });
    let internal = controls.v.as_ref().map_or(0.0, |v| {
        (0..n)
            .map(|k| disc.level_inner(v.level(k), backward.big_z.level(k), k))
            .sum::<f64>()
            * dt
    });
    let mut drift = 0.0;
    for k in 0..n {
        let parts = par::map_range(1 << k, |node| {
            let f = coeffs.f.at(k, node);
            let l = controls.drift.as_ref().map(|l| l.node(k, node));
            let du = backward.drift_dual.node(k, node);
            (0..nd)
                .map(|p| disc.weights[p] * (f.get(p) + l.map_or(0.0, |l| l[p])) * du[p])
                .sum::<f64>()
        });
        drift += parts.into_iter().sum::<f64>() * disc.tree.prob(k);
    }
    let lhs = terminal - initial;
    let rhs = boundary + internal + drift;
    let residual = lhs - rhs;
    let scale = terminal.abs() + initial.abs() + boundary.abs() + internal.abs() + drift.abs();
    Ok(DualityReport {
        terminal,
        initial,
        boundary,
        internal,
        drift,
        lhs,
        rhs,
        residual,
        relative: if scale == 0.0 {
            0.0
        } else {
            residual.abs() / scale
        },
    })
}

/// Inflow trace of `z` and the ratio `|z|²_w / E|z_T|²`.
pub fn hidden_regularity_trace(
    path: &BackwardPath,
    disc: &Discretization,
) -> Result<(BoundaryTrace, f64)> {
    let e_t = disc.terminal_inner(path.terminal(), path.terminal());
    if e_t == 0.0 {
        return Err(StcError::UndefinedRatio);
    }
    let t = path.trace.clone();
    let w = t.inner_with(&t, &disc.stencil.inflow_weight);
    Ok((t, w / e_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{rng_for, RandomCoefSpec};
    use crate::forward::forward_solve;
    use crate::geometry::{Geometry, GeometrySpec};
    use crate::scheme::SubstepRule;
    use crate::tree::ScenarioTree;
    use rand::Rng;

    #[test]
    fn adjoint_coefficient_signs() {
        let c = CoefficientSet {
            a1: Coef::Constant(0.7),
            a3: Coef::Constant(-0.2),
            a2: Coef::Deterministic(vec![vec![1.0, 2.0, 3.0, 4.0]]),
            ..Default::default()
        };
        let b = adjoint_from_forward(&c, 2);
        assert_eq!(b.b1, Coef::Constant(-0.7));
        assert_eq!(b.b3, Coef::Constant(0.2));
        assert_eq!(
            b.b2,
            Coef::Deterministic(vec![vec![-1.0, -3.0, -2.0, -4.0]])
        );
        assert_eq!(b.b4, Coef::Zero);
        let z = adjoint_from_forward(&CoefficientSet::zero(), 2);
        assert!(z.b1.is_zero() && z.b2.is_zero() && z.b3.is_zero());
        assert_eq!(z.r2(), 1.0);
    }

    #[test]
    fn zero_terminal_gives_zero_pair() {
        let g = Geometry::build(&GeometrySpec::interval(-0.5, 0.5, 4)).unwrap();
        let d =
            Discretization::new(g, ScenarioTree::new(1.0, 3).unwrap(), SubstepRule::Auto).unwrap();
        let c = RandomCoefSpec::uniform(1.0, true).sample(4, 2, 3, &mut rng_for(3, 0));
        let b = backward_solve(&d, &c, &vec![0.0; 8 << 3]).unwrap();
        assert_eq!(b.z.max_abs(), 0.0);
        assert_eq!(b.big_z.max_abs(), 0.0);
        assert!(matches!(
            hidden_regularity_trace(&b, &d),
            Err(StcError::UndefinedRatio)
        ));
    }

    #[test]
    fn small_random_duality() {
        let g = Geometry::build(&GeometrySpec::interval(-0.5, 0.5, 2)).unwrap();
        let d =
            Discretization::new(g, ScenarioTree::new(1.0, 3).unwrap(), SubstepRule::Auto).unwrap();
        let mut rng = rng_for(11, 0);
        let mut spec = RandomCoefSpec::uniform(1.0, true);
        spec.source = 1.0;
        let c = spec.sample(2, 2, 3, &mut rng);
        let nd = d.n_dof();
        let mut u = BoundaryTrace::zeros(2, d.grid.substeps_per_level(), d.grid.h);
        u.levels
            .iter_mut()
            .flatten()
            .for_each(|x| *x = rng.random_range(-1.0..1.0));
        let v = AdaptedField::from_fn(nd, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let y0: Vec<f64> = (0..nd).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zt: Vec<f64> = (0..nd << 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ctl = ControlPair::new(u, v);
        let fw = forward_solve(&d, &c, &y0, &ctl).unwrap();
        let bw = backward_solve(&d, &c, &zt).unwrap();
        let r = duality_pairing_check(&d, &c, &ctl, &fw, &bw).unwrap();
        assert!(r.relative <= 1e-12, "{r:?}");
    }
}
