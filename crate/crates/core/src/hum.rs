//! Control synthesis by duality.
//!
//! The control-to-state map `L : x ↦ y(T)` (zero initial state, no source)
//! has the backward solver as its adjoint. The Gramian `Λ = L L*` maps a dual
//! terminal datum `z_T` to the terminal state reached under the controls
//! `u = z|inflow`, `v = Z`, and
//!
//! ```text
//! E⟨Λ z_T, z_T'⟩ = E Σ h ⟨z, z'⟩_inflow + E Σ dt ⟨Z, Z'⟩.
//! ```
//!
//! Solving `Λ z_T = y1 − ỹ(T)` by conjugate gradients gives the control of
//! least energy that steers the free solution `ỹ` onto `y1`.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backward::{backward_solve, BackwardPath};
use crate::coefficients::{rng_for, CoefficientSet};
use crate::error::{Result, StcError};
use crate::forward::{forward_impl, forward_solve, ControlPair};
use crate::geometry::BoundaryTrace;
use crate::scheme::Discretization;
use crate::tree::AdaptedField;

/// Which controls act, as a flat vector space with its energy inner product.
///
/// Layout: initial state, boundary values (level-major, then node, substep,
/// inflow pair), then diffusion values, then drift values (level, node, dof).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSpace {
    /// The initial state is free as well.
    #[serde(default)]
    pub initial: bool,
    pub boundary: bool,
    /// Per-dof mask of where the diffusion control may act; `None` disables it.
    pub diffusion: Option<Vec<bool>>,
    pub drift: bool,
}

impl ControlSpace {
    /// Boundary and unrestricted diffusion control.
    pub fn full(disc: &Discretization) -> Self {
        Self {
            initial: false,
            boundary: true,
            diffusion: Some(vec![true; disc.n_dof()]),
            drift: false,
        }
    }

    fn field_len(disc: &Discretization) -> usize {
        disc.n_dof() * ((1usize << disc.n_steps()) - 1)
    }

    fn trace_len(disc: &Discretization) -> usize {
        let nb = disc.stencil.n_inflow();
        (0..disc.n_steps())
            .map(|k| (disc.grid.substeps(k) * nb) << k)
            .sum()
    }

    pub fn dim(&self, disc: &Discretization) -> usize {
        let mut d = if self.initial { disc.n_dof() } else { 0 };
        if self.boundary {
            d += Self::trace_len(disc);
        }
        if self.diffusion.is_some() {
            d += Self::field_len(disc);
        }
        if self.drift {
            d += Self::field_len(disc);
        }
        d
    }

    /// Weights `ω_i` of the energy inner product `Σ ω_i x_i x_i'`.
    pub fn weights(&self, disc: &Discretization) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.dim(disc));
        let n = disc.n_steps();
        let h = disc.grid.h;
        let dt = disc.tree.dt();
        if self.initial {
            w.extend_from_slice(&disc.weights);
        }
        if self.boundary {
            for k in 0..n {
                let p = disc.tree.prob(k);
                for _ in 0..(disc.grid.substeps(k) << k) {
                    w.extend(disc.stencil.inflow_weight.iter().map(|wb| p * h * wb));
                }
            }
        }
        let field = |w: &mut Vec<f64>| {
            for k in 0..n {
                let p = disc.tree.prob(k);
                for _ in 0..1usize << k {
                    w.extend(disc.weights.iter().map(|wp| p * dt * wp));
                }
            }
        };
        if self.diffusion.is_some() {
            field(&mut w);
        }
        if self.drift {
            field(&mut w);
        }
        w
    }

    pub fn inner(&self, weights: &[f64], a: &[f64], b: &[f64]) -> f64 {
        weights
            .iter()
            .zip(a)
            .zip(b)
            .map(|((w, x), y)| w * x * y)
            .sum()
    }

    fn split_field(disc: &Discretization, x: &[f64], mask: Option<&[bool]>) -> AdaptedField {
        let nd = disc.n_dof();
        let mut off = 0;
        let levels = (0..disc.n_steps())
            .map(|k| {
                let len = nd << k;
                let mut l = x[off..off + len].to_vec();
                off += len;
                if let Some(m) = mask {
                    for (i, v) in l.iter_mut().enumerate() {
                        if !m[i % nd] {
                            *v = 0.0;
                        }
                    }
                }
                l
            })
            .collect();
        AdaptedField::from_levels(nd, levels).expect("layout matches")
    }

    /// Controls represented by the flat vector `x`.
    pub fn to_controls(&self, disc: &Discretization, x: &[f64]) -> ControlPair {
        let mut off = if self.initial { disc.n_dof() } else { 0 };
        let mut out = ControlPair::none();
        if self.boundary {
            let len = Self::trace_len(disc);
            let mut t = BoundaryTrace::zeros(
                disc.stencil.n_inflow(),
                disc.grid.substeps_per_level(),
                disc.grid.h,
            );
            let mut o = off;
            for l in t.levels.iter_mut() {
                let n = l.len();
                l.copy_from_slice(&x[o..o + n]);
                o += n;
            }
            out.u = Some(t);
            off += len;
        }
        if let Some(mask) = &self.diffusion {
            let len = Self::field_len(disc);
            out.v = Some(Self::split_field(disc, &x[off..off + len], Some(mask)));
            off += len;
        }
        if self.drift {
            let len = Self::field_len(disc);
            out.drift = Some(Self::split_field(disc, &x[off..off + len], None));
        }
        out
    }

    /// Initial state represented by `x` (zero unless the space frees it).
    pub fn initial_state(&self, disc: &Discretization, x: &[f64]) -> Vec<f64> {
        let nd = disc.n_dof();
        if self.initial {
            x[..nd].to_vec()
        } else {
            vec![0.0; nd]
        }
    }

    /// Flattens a control pair; entries absent from the space are dropped.
    pub fn flatten(&self, disc: &Discretization, c: &ControlPair) -> Vec<f64> {
        self.flatten_with(disc, None, c)
    }

    pub fn flatten_with(
        &self,
        disc: &Discretization,
        y0: Option<&[f64]>,
        c: &ControlPair,
    ) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim(disc));
        if self.initial {
            match y0 {
                Some(y0) => x.extend_from_slice(y0),
                None => x.extend(std::iter::repeat_n(0.0, disc.n_dof())),
            }
        }
        if self.boundary {
            match &c.u {
                Some(u) => u.levels.iter().for_each(|l| x.extend_from_slice(l)),
                None => x.extend(std::iter::repeat_n(0.0, Self::trace_len(disc))),
            }
        }
        let mut field = |f: &Option<AdaptedField>, mask: Option<&Vec<bool>>| match f {
            Some(f) => {
                let nd = disc.n_dof();
                for l in f.levels() {
                    x.extend(l.iter().enumerate().map(|(i, &v)| match mask {
                        Some(m) if !m[i % nd] => 0.0,
                        _ => v,
                    }));
                }
            }
            None => x.extend(std::iter::repeat_n(0.0, Self::field_len(disc))),
        };
        if let Some(mask) = &self.diffusion {
            field(&c.v, Some(mask));
        }
        if self.drift {
            field(&c.drift, None);
        }
        x
    }

    /// `L* r` in the energy inner product, read off a backward path from `r`.
    pub fn adjoint_from_path(&self, disc: &Discretization, bw: &BackwardPath) -> Vec<f64> {
        let dt = disc.tree.dt();
        let mut drift = bw.drift_dual.clone();
        drift.scale(1.0 / dt);
        let c = ControlPair {
            u: Some(bw.trace.clone()),
            v: Some(bw.big_z.clone()),
            drift: Some(drift),
        };
        self.flatten_with(disc, Some(bw.initial()), &c)
    }
}

/// The control-to-terminal-state map and its adjoint.
pub struct ControlOperator<'a> {
    pub disc: &'a Discretization,
    pub coeffs: &'a CoefficientSet,
    pub space: ControlSpace,
    pub weights: Vec<f64>,
}

impl<'a> ControlOperator<'a> {
    pub fn new(disc: &'a Discretization, coeffs: &'a CoefficientSet, space: ControlSpace) -> Self {
        let weights = space.weights(disc);
        Self {
            disc,
            coeffs,
            space,
            weights,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let c = self.space.to_controls(self.disc, x);
        let y0 = self.space.initial_state(self.disc, x);
        Ok(forward_impl(self.disc, self.coeffs, &y0, &c, false)?
            .y
            .into_levels()
            .pop()
            .unwrap_or_default())
    }

    pub fn adjoint(&self, r: &[f64]) -> Result<Vec<f64>> {
        let bw = backward_solve(self.disc, self.coeffs, r)?;
        Ok(self.space.adjoint_from_path(self.disc, &bw))
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        self.space.inner(&self.weights, x, x)
    }
}

/// `Λ = L L*` for boundary plus diffusion control.
pub struct GramianOperator<'a> {
    pub disc: &'a Discretization,
    pub coeffs: &'a CoefficientSet,
    applies: AtomicUsize,
}

impl<'a> GramianOperator<'a> {
    pub fn new(disc: &'a Discretization, coeffs: &'a CoefficientSet) -> Self {
        Self {
            disc,
            coeffs,
            applies: AtomicUsize::new(0),
        }
    }

    pub fn apply_count(&self) -> usize {
        self.applies.load(Ordering::Relaxed)
    }

    /// Controls induced by a dual terminal datum: `u = z|inflow`, `v = Z`.
    pub fn controls_for(&self, z_t: &[f64]) -> Result<(ControlPair, BackwardPath)> {
        let bw = backward_solve(self.disc, self.coeffs, z_t)?;
        Ok((ControlPair::new(bw.trace.clone(), bw.big_z.clone()), bw))
    }

    pub fn apply(&self, z_t: &[f64]) -> Result<Vec<f64>> {
        self.applies.fetch_add(1, Ordering::Relaxed);
        let (c, _) = self.controls_for(z_t)?;
        let y0 = vec![0.0; self.disc.n_dof()];
        let mut y = forward_impl(self.disc, self.coeffs, &y0, &c, false)?
            .y
            .into_levels();
        Ok(y.pop().unwrap_or_default())
    }

    /// `|z|²_w + E Σ dt |Z|²` for the backward path of `z_t`.
    pub fn observed_energy(&self, z_t: &[f64]) -> Result<f64> {
        let (c, _) = self.controls_for(z_t)?;
        Ok(c.energy(self.disc))
    }

    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.disc.terminal_inner(a, b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub rhs_norm: f64,
    pub converged: bool,
    pub residual_history: Vec<f64>,
}

/// Conjugate gradients for a symmetric positive semidefinite operator in the
/// inner product `inner`, from a zero initial guess. Stops when
/// `|r| <= tol |b|`. `on_iterate` sees every iterate, starting with `x_0`.
pub fn conjugate_gradient<A, I, C>(
    apply: A,
    inner: I,
    b: &[f64],
    tol: f64,
    max_iter: usize,
    mut on_iterate: C,
) -> Result<CgOutcome>
where
    A: Fn(&[f64]) -> Result<Vec<f64>>,
    I: Fn(&[f64], &[f64]) -> f64,
    C: FnMut(usize, &[f64]),
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let bnorm = inner(b, b).max(0.0).sqrt();
    let mut rr = inner(&r, &r);
    let mut history = vec![rr.max(0.0).sqrt()];
    on_iterate(0, &x);
    if bnorm == 0.0 {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            residual_norm: 0.0,
            rhs_norm: 0.0,
            converged: true,
            residual_history: history,
        });
    }
    let mut p = r.clone();
    let mut it = 0;
    while it < max_iter && rr.sqrt() > tol * bnorm {
        let ap = apply(&p)?;
        let pap = inner(&p, &ap);
        if !pap.is_finite() || !rr.is_finite() {
            return Err(StcError::NumericalBreakdown(format!(
                "non-finite value in conjugate gradients at iteration {it}"
            )));
        }
        if pap <= 0.0 {
            return Err(StcError::SingularGramian(format!(
                "search direction has curvature {pap:e} at iteration {it}"
            )));
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = inner(&r, &r);
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        it += 1;
        history.push(rr.max(0.0).sqrt());
        on_iterate(it, &x);
    }
    let residual_norm = rr.max(0.0).sqrt();
    Ok(CgOutcome {
        x,
        iterations: it,
        residual_norm,
        rhs_norm: bnorm,
        converged: residual_norm <= tol * bnorm,
        residual_history: history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CglsOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `E|L x − b|²`.
    pub residual_sq: f64,
    /// Energy `|x|²` of the iterate.
    pub energy: f64,
    pub converged: bool,
    pub residual_history: Vec<f64>,
    pub energy_history: Vec<f64>,
}

/// CGLS for `min E|L x − b|²` from `x = 0`, which converges to the
/// least-squares solution of least energy. Stops when the normal-equation
/// residual `|L*(b − Lx)|` drops below `tol` times its initial value.
pub fn cgls(op: &ControlOperator, b: &[f64], tol: f64, max_iter: usize) -> Result<CglsOutcome> {
    let disc = op.disc;
    let xin = |a: &[f64], c: &[f64]| op.space.inner(&op.weights, a, c);
    let n = op.weights.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut s = op.adjoint(&r)?;
    let mut p = s.clone();
    let mut gamma = xin(&s, &s);
    let gamma0 = gamma;
    let mut rr = disc.terminal_inner(&r, &r);
    let mut residual_history = vec![rr];
    let mut energy_history = vec![0.0];
    let mut it = 0;
    while it < max_iter && gamma > tol * tol * gamma0 && gamma0 > 0.0 {
        let q = op.apply(&p)?;
        let qq = disc.terminal_inner(&q, &q);
        if !qq.is_finite() || qq <= 0.0 {
            break;
        }
        let alpha = gamma / qq;
        for i in 0..n {
            x[i] += alpha * p[i];
        }
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= alpha * qi;
        }
        s = op.adjoint(&r)?;
        let g_new = xin(&s, &s);
        let beta = g_new / gamma;
        for i in 0..n {
            p[i] = s[i] + beta * p[i];
        }
        gamma = g_new;
        rr = disc.terminal_inner(&r, &r);
        it += 1;
        residual_history.push(rr);
        energy_history.push(xin(&x, &x));
    }
    if !rr.is_finite() {
        return Err(StcError::NumericalBreakdown(
            "non-finite residual in CGLS".into(),
        ));
    }
    Ok(CglsOutcome {
        energy: xin(&x, &x),
        x,
        iterations: it,
        residual_sq: rr,
        converged: gamma0 == 0.0 || gamma <= tol * tol * gamma0,
        residual_history,
        energy_history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumSolution {
    pub z_t_star: Vec<f64>,
    pub controls: ControlPair,
    /// `‖y(T) − y1‖` from an independent forward solve.
    pub terminal_error: f64,
    /// `terminal_error / ‖y1 − ỹ(T)‖` (zero when the free solution already hits).
    pub relative_error: f64,
    pub cg_residual: f64,
    pub cg_iterations: usize,
    pub converged: bool,
    pub control_energy: f64,
}

/// Synthesizes controls steering `y0` to `y1` (terminal field per leaf).
pub fn hum_solve(
    disc: &Discretization,
    coeffs: &CoefficientSet,
    y0: &[f64],
    y1: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<HumSolution> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(StcError::InvalidParameter(format!(
            "tolerance {tol} must be positive"
        )));
    }
    let nterm = disc.n_dof() << disc.n_steps();
    if y1.len() != nterm {
        return Err(StcError::Shape(format!(
            "target needs {nterm} values, got {}",
            y1.len()
        )));
    }
    let free = forward_solve(disc, coeffs, y0, &ControlPair::none())?;
    let b: Vec<f64> = y1.iter().zip(free.terminal()).map(|(a, f)| a - f).collect();
    let op = GramianOperator::new(disc, coeffs);
    let cg = conjugate_gradient(
        |x| op.apply(x),
        |a, c| op.inner(a, c),
        &b,
        tol,
        max_iter,
        |_, _| {},
    )?;
    if cg.x.iter().any(|v| !v.is_finite()) {
        return Err(StcError::NumericalBreakdown("non-finite dual datum".into()));
    }
    let (controls, _) = op.controls_for(&cg.x)?;
    let check = forward_solve(disc, coeffs, y0, &controls)?;
    let diff: Vec<f64> = check
        .terminal()
        .iter()
        .zip(y1)
        .map(|(a, c)| a - c)
        .collect();
    let terminal_error = disc.terminal_norm(&diff);
    if !terminal_error.is_finite() {
        return Err(StcError::NumericalBreakdown(
            "non-finite terminal state".into(),
        ));
    }
    Ok(HumSolution {
        relative_error: if cg.rhs_norm > 0.0 {
            terminal_error / cg.rhs_norm
        } else {
            0.0
        },
        control_energy: controls.energy(disc),
        z_t_star: cg.x,
        controls,
        terminal_error,
        cg_residual: cg.residual_norm,
        cg_iterations: cg.iterations,
        converged: cg.converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigReport {
    /// Rayleigh quotient of the last iterate; an upper bound on `λ_min`.
    pub lambda_min: f64,
    pub observability_constant: f64,
    pub iterations: usize,
    pub cg_iterations: usize,
    /// False when an inner solve failed, in which case `lambda_min` is only
    /// an upper bound below the resolvable range.
    pub resolved: bool,
}

/// Settings of the inverse power iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigSettings {
    pub iterations: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub seed: u64,
}

impl Default for EigSettings {
    fn default() -> Self {
        Self {
            iterations: 20,
            cg_tol: 1e-10,
            cg_max_iter: 500,
            seed: 0,
        }
    }
}

/// Inverse power iteration; never fails on a singular Gramian but marks the
/// report unresolved.
pub fn min_gramian_eig_report(op: &GramianOperator, settings: EigSettings) -> Result<EigReport> {
    if settings.iterations == 0 {
        return Err(StcError::InvalidParameter("iterations must be >= 1".into()));
    }
    let disc = op.disc;
    let n = disc.n_dof() << disc.n_steps();
    let mut rng = rng_for(settings.seed, 0x0065_6967);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let normalize = |x: &mut Vec<f64>| {
        let s = disc.terminal_norm(x);
        x.iter_mut().for_each(|v| *v /= s);
    };
    normalize(&mut x);
    let rayleigh = |x: &[f64]| -> Result<f64> { Ok(op.inner(&op.apply(x)?, x) / op.inner(x, x)) };
    let mut lambda = rayleigh(&x)?;
    let mut cg_total = 0;
    for it in 0..settings.iterations {
        let mut last = Vec::new();
        let solve = conjugate_gradient(
            |v| op.apply(v),
            |a, b| op.inner(a, b),
            &x,
            settings.cg_tol,
            settings.cg_max_iter,
            |_, xi| last = xi.to_vec(),
        );
        let (y, ok, iters) = match solve {
            Ok(out) => {
                let ok = out.converged;
                let iters = out.iterations;
                (out.x, ok, iters)
            }
            Err(StcError::SingularGramian(_)) => (last, false, settings.cg_max_iter),
            Err(e) => return Err(e),
        };
        cg_total += iters;
        let mut y = y;
        if disc.terminal_norm(&y) > 0.0 && y.iter().all(|v| v.is_finite()) {
            normalize(&mut y);
            let l = rayleigh(&y)?;
            if ok || l < lambda {
                lambda = l;
                x = y;
            }
        }
        if !ok {
            return Ok(EigReport {
                lambda_min: lambda,
                observability_constant: lambda.max(0.0).sqrt().recip(),
                iterations: it + 1,
                cg_iterations: cg_total,
                resolved: false,
            });
        }
    }
    Ok(EigReport {
        lambda_min: lambda,
        observability_constant: lambda.max(0.0).sqrt().recip(),
        iterations: settings.iterations,
        cg_iterations: cg_total,
        resolved: true,
    })
}

/// Smallest Gramian eigenvalue and the observability constant `λ_min^{-1/2}`.
/// Errors with [`StcError::SingularGramian`] when an inner solve breaks down.
pub fn min_gramian_eig(op: &GramianOperator, settings: EigSettings) -> Result<(f64, f64)> {
    let r = min_gramian_eig_report(op, settings)?;
    if !r.resolved {
        return Err(StcError::SingularGramian(format!(
            "inner solve failed; smallest eigenvalue at most {:e}",
            r.lambda_min
        )));
    }
    Ok((r.lambda_min, r.observability_constant))
}
