//! Carleman weight `θ = e^l`, `l = λ(|x|² − c(t − T/2)²)`, the pointwise
//! weighted identity for `d + U·∇ dt`, and the weighted estimate evaluated on
//! discrete backward paths.
//!
//! Throughout, `Φ = l_t + U·∇l = λ(c(T − 2t) + 2 U·x)`.

use serde::{Deserialize, Serialize};

use crate::backward::{BackwardCoefficientSet, BackwardPath};
use crate::coefficients::CoefficientSet;
use crate::error::{Result, StcError};
use crate::forward::NodeCoefs;
use crate::geometry::{Geometry, Point};
use crate::par;
use crate::scheme::Discretization;
use crate::tree::AdaptedField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarlemanWeight {
    pub lambda: f64,
    pub c: f64,
    pub horizon: f64,
}

/// Midpoint of the admissible interval `(2R/T, 1)`.
pub fn default_c(radius: f64, horizon: f64) -> Result<f64> {
    let lo = 2.0 * radius / horizon;
    if lo >= 1.0 {
        return Err(StcError::Precondition(format!(
            "no admissible c: T = {horizon} does not exceed 2R = {}",
            2.0 * radius
        )));
    }
    Ok(0.5 * (lo + 1.0))
}

/// `3 / (2(1 − c)) · (|b1|² + |b2|² + |b4|⁴ + |b4|²)`.
pub fn lambda_one(b: &BackwardCoefficientSet, c: f64) -> Result<f64> {
    if !(c > 0.0 && c < 1.0) {
        return Err(StcError::InvalidParameter(format!(
            "c = {c} outside (0, 1)"
        )));
    }
    let b4 = b.b4.sup_norm();
    Ok(3.0 / (2.0 * (1.0 - c))
        * (b.b1.sup_norm().powi(2) + b.b2.sup_norm().powi(2) + b4.powi(4) + b4 * b4))
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

impl CarlemanWeight {
    pub fn new(lambda: f64, c: f64, horizon: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(StcError::InvalidParameter(format!(
                "λ = {lambda} must be positive"
            )));
        }
        if !(c > 0.0 && c < 1.0) {
            return Err(StcError::InvalidParameter(format!(
                "c = {c} outside (0, 1)"
            )));
        }
        Ok(Self { lambda, c, horizon })
    }

    /// Errors unless `cT > 2R`.
    pub fn check_geometry(&self, g: &Geometry) -> Result<()> {
        if self.c * self.horizon <= 2.0 * g.radius {
            return Err(StcError::Precondition(format!(
                "cT = {} must exceed 2R = {}",
                self.c * self.horizon,
                2.0 * g.radius
            )));
        }
        Ok(())
    }

    pub fn l(&self, t: f64, x: Point) -> f64 {
        let s = t - 0.5 * self.horizon;
        self.lambda * (dot(x, x) - self.c * s * s)
    }

    pub fn theta(&self, t: f64, x: Point) -> f64 {
        self.l(t, x).exp()
    }

    pub fn l_t(&self, t: f64) -> f64 {
        -2.0 * self.lambda * self.c * (t - 0.5 * self.horizon)
    }

    pub fn l_tt(&self) -> f64 {
        -2.0 * self.lambda * self.c
    }

    pub fn u_dot_grad_l(&self, x: Point, u: Point) -> f64 {
        2.0 * self.lambda * dot(u, x)
    }

    pub fn phi(&self, t: f64, x: Point, u: Point) -> f64 {
        self.l_t(t) + self.u_dot_grad_l(x, u)
    }

    /// Coefficient of `p²` in the identity: `½[l_tt + U·∇(U·∇l) + 2U·∇l_t]`
    /// for a unit velocity, i.e. `λ(1 − c)`.
    pub fn bracket(&self) -> f64 {
        0.5 * (self.l_tt() + 2.0 * self.lambda)
    }

    /// `(l, θ, l_t, [U_j·∇l])` at one point.
    pub fn eval(&self, t: f64, x: Point, velocities: &[Point]) -> (f64, f64, f64, Vec<f64>) {
        let l = self.l(t, x);
        (
            l,
            l.exp(),
            self.l_t(t),
            velocities
                .iter()
                .map(|&u| self.u_dot_grad_l(x, u))
                .collect(),
        )
    }

    /// `(e^{−cλT²}, e^{4λR²})`.
    pub fn theta_bounds(&self, radius: f64) -> (f64, f64) {
        (
            (-self.c * self.lambda * self.horizon * self.horizon).exp(),
            (4.0 * self.lambda * radius * radius).exp(),
        )
    }
}

/// Axis neighbours of every cell: `[+x, −x, +y, −y]`.
fn neighbours(g: &Geometry) -> Vec<[Option<usize>; 4]> {
    let mut nb = vec![[None; 4]; g.n_cells()];
    for f in &g.interior_faces {
        let axis = if f.normal[0] != 0.0 { 0 } else { 2 };
        nb[f.left][axis] = Some(f.right);
        nb[f.right][axis + 1] = Some(f.left);
    }
    nb
}

/// Directional derivative `U·∇g` of a cell field by upwind differences,
/// falling back to the downwind side at the inflow edge of the grid.
#[derive(Debug, Clone)]
pub struct UpwindGradient {
    nb: Vec<[Option<usize>; 4]>,
    velocities: Vec<Point>,
    dx: f64,
}

impl UpwindGradient {
    pub fn new(g: &Geometry) -> Self {
        Self {
            nb: neighbours(g),
            velocities: g.velocities.clone(),
            dx: g.dx,
        }
    }

    /// `U_j·∇g` at `cell`, where `g(cell', j)` is supplied by `val`.
    pub fn at(&self, cell: usize, j: usize, val: impl Fn(usize) -> f64) -> f64 {
        let u = self.velocities[j];
        let mut acc = 0.0;
        for (axis, &ua) in u.iter().enumerate() {
            if ua == 0.0 {
                continue;
            }
            let (fwd, back) = (self.nb[cell][2 * axis], self.nb[cell][2 * axis + 1]);
            let (up, down) = if ua > 0.0 { (back, fwd) } else { (fwd, back) };
            let gi = val(cell);
            let d = match (up, down) {
                (Some(q), _) => {
                    if ua > 0.0 {
                        gi - val(q)
                    } else {
                        val(q) - gi
                    }
                }
                (None, Some(q)) => {
                    if ua > 0.0 {
                        val(q) - gi
                    } else {
                        gi - val(q)
                    }
                }
                (None, None) => 0.0,
            };
            acc += ua * d / self.dx;
        }
        acc
    }
}

/// Expected, quadrature-weighted totals of each term of the identity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IdentityTotals {
    /// `−θΦp[dq + U·∇q dt]`.
    pub lhs: f64,
    /// `−½ d[Φp²]`.
    pub differential: f64,
    /// `−½ U·∇[Φp²] dt`.
    pub transport: f64,
    /// `½[l_tt + U·∇(U·∇l) + 2U·∇l_t] p² dt`.
    pub second_order: f64,
    /// `½ Φ (dp)²`.
    pub quadratic_variation: f64,
    /// `Φ² p² dt`.
    pub square: f64,
    pub residual: f64,
}

/// Per-node (conditional mean over the two children) values of every term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityLedger {
    pub lhs: AdaptedField,
    pub differential: AdaptedField,
    pub transport: AdaptedField,
    pub second_order: AdaptedField,
    pub quadratic_variation: AdaptedField,
    pub square: AdaptedField,
    pub residual: AdaptedField,
    pub totals: IdentityTotals,
    /// `E Σ_k Σ_p W_p |residual|`, children counted separately.
    pub global_l1: f64,
}

impl IdentityLedger {
    pub const COLUMNS: [&'static str; 7] = [
        "lhs",
        "differential",
        "transport",
        "second_order",
        "quadratic_variation",
        "square",
        "residual",
    ];

    pub fn columns(&self) -> [&AdaptedField; 7] {
        [
            &self.lhs,
            &self.differential,
            &self.transport,
            &self.second_order,
            &self.quadratic_variation,
            &self.square,
            &self.residual,
        ]
    }
}

/// Evaluates every term of the weighted identity on the path `q`, with
/// `d` the one-level tree increment and `U·∇` the upwind stencil.
pub fn weighted_identity_residual(
    q: &AdaptedField,
    w: &CarlemanWeight,
    disc: &Discretization,
) -> Result<IdentityLedger> {
    let g = &disc.geometry;
    let nd = disc.n_dof();
    let n = disc.n_steps();
    if q.width() != nd || q.n_levels() != n + 1 {
        return Err(StcError::Shape(format!(
            "path must have width {nd} on {} levels",
            n + 1
        )));
    }
    let nv = g.n_velocities();
    let dt = disc.tree.dt();
    let grad = UpwindGradient::new(g);
    let mut cols: Vec<Vec<Vec<f64>>> = (0..7).map(|_| Vec::with_capacity(n)).collect();
    let mut totals = IdentityTotals::default();
    let mut l1 = 0.0;
    for k in 0..n {
        let (t0, t1) = (disc.tree.time(k), disc.tree.time(k + 1));
        let theta0: Vec<f64> = g.centers.iter().map(|&x| w.theta(t0, x)).collect();
        let theta1: Vec<f64> = g.centers.iter().map(|&x| w.theta(t1, x)).collect();
        let half = 1usize << k;
        let cur = q.level(k);
        let next = q.level(k + 1);
        let per_node = par::map_range(half, |node| {
            let qk = &cur[node * nd..(node + 1) * nd];
            let children = [
                &next[node * nd..(node + 1) * nd],
                &next[(node + half) * nd..(node + half + 1) * nd],
            ];
            let pk: Vec<f64> = (0..nd).map(|p| theta0[p / nv] * qk[p]).collect();
            let mut out = vec![[0.0f64; 7]; nd];
            let mut node_l1 = 0.0;
            for p in 0..nd {
                let (i, j) = (p / nv, p % nv);
                let x = g.centers[i];
                let u = g.velocities[j];
                let phi0 = w.phi(t0, x, u);
                let phi1 = w.phi(t1, x, u);
                let ugq = grad.at(i, j, |c| qk[c * nv + j]);
                let ugf = grad.at(i, j, |c| {
                    let y = g.centers[c];
                    w.phi(t0, y, u) * pk[c * nv + j].powi(2)
                });
                let transport = -0.5 * ugf * dt;
                let square = phi0 * phi0 * pk[p] * pk[p] * dt;
                for child in children {
                    let q1 = child[p];
                    let p1 = theta1[i] * q1;
                    let dp = p1 - pk[p];
                    let lhs = -theta0[i] * phi0 * pk[p] * (q1 - qk[p] + ugq * dt);
                    let diff = -0.5 * (phi1 * p1 * p1 - phi0 * pk[p] * pk[p]);
                    let second = 0.5 * (w.l_tt() * p1 * p1 + 2.0 * w.lambda * pk[p] * pk[p]) * dt;
                    let qv = 0.5 * phi0 * dp * dp;
                    let res = lhs - diff - transport - second - qv - square;
                    let vals = [lhs, diff, transport, second, qv, square, res];
                    for (o, v) in out[p].iter_mut().zip(vals) {
                        *o += 0.5 * v;
                    }
                    node_l1 += 0.5 * disc.weights[p] * res.abs();
                }
            }
            (out, node_l1)
        });
        let prob = disc.tree.prob(k);
        let mut level_cols = vec![vec![0.0; nd * half]; 7];
        for (node, (vals, nl1)) in per_node.into_iter().enumerate() {
            l1 += prob * nl1;
            for (p, v) in vals.iter().enumerate() {
                for c in 0..7 {
                    level_cols[c][node * nd + p] = v[c];
                }
                let wp = prob * disc.weights[p];
                totals.lhs += wp * v[0];
                totals.differential += wp * v[1];
                totals.transport += wp * v[2];
                totals.second_order += wp * v[3];
                totals.quadratic_variation += wp * v[4];
                totals.square += wp * v[5];
                totals.residual += wp * v[6];
            }
        }
        for (c, l) in level_cols.into_iter().enumerate() {
            cols[c].push(l);
        }
    }
    let mut it = cols.into_iter().map(|l| AdaptedField::from_levels(nd, l));
    let mut next = || it.next().expect("seven columns");
    Ok(IdentityLedger {
        lhs: next()?,
        differential: next()?,
        transport: next()?,
        second_order: next()?,
        quadratic_variation: next()?,
        square: next()?,
        residual: next()?,
        totals,
        global_l1: l1,
    })
}

/// Largest normalized residual of each of the four algebraic sub-identities
/// of the weighted identity, with exact derivatives of the weight. The two
/// temporal ones use tree increments, the two spatial ones use differences
/// and arithmetic means across interior faces.
pub fn sub_identity_residuals(
    q: &AdaptedField,
    w: &CarlemanWeight,
    disc: &Discretization,
) -> Result<[f64; 4]> {
    let g = &disc.geometry;
    let nd = disc.n_dof();
    let n = disc.n_steps();
    if q.width() != nd || q.n_levels() != n + 1 {
        return Err(StcError::Shape(
            "path does not match the discretization".into(),
        ));
    }
    let nv = g.n_velocities();
    let dt = disc.tree.dt();
    let mut worst = [0.0f64; 4];
    let mut scale = [0.0f64; 4];
    let mut note = |i: usize, res: f64, terms: &[f64]| {
        worst[i] = worst[i].max(res.abs());
        for t in terms {
            scale[i] = scale[i].max(t.abs());
        }
    };
    for k in 0..=n {
        let t = disc.tree.time(k);
        let lt = w.l_t(t);
        let lvl = q.level(k);
        for node in 0..1usize << k {
            let qk = &lvl[node * nd..(node + 1) * nd];
            let p_of = |c: usize, j: usize| w.theta(t, g.centers[c]) * qk[c * nv + j];
            if k < n {
                let t1 = disc.tree.time(k + 1);
                let half = 1usize << k;
                let next = q.level(k + 1);
                for child in [node, node + half] {
                    let q1 = &next[child * nd..(child + 1) * nd];
                    for (p, &qp) in q1.iter().enumerate() {
                        let (i, j) = (p / nv, p % nv);
                        let x = g.centers[i];
                        let p0 = p_of(i, j);
                        let p1 = w.theta(t1, x) * qp;
                        let dp = p1 - p0;
                        // −l_t p dp = −½ d(l_t p²) + ½ l_tt dt p₁² + ½ l_t (dp)²
                        let a = -lt * p0 * dp;
                        let d_ltp2 = w.l_t(t1) * p1 * p1 - lt * p0 * p0;
                        let b = -0.5 * d_ltp2 + 0.5 * w.l_tt() * dt * p1 * p1 + 0.5 * lt * dp * dp;
                        note(0, a - b, &[a, d_ltp2]);
                        // −(U·∇l) p dp = −½ d((U·∇l) p²) + ½ (U·∇l)_t p² + ½ (U·∇l)(dp)²
                        let gl = w.u_dot_grad_l(x, g.velocities[j]);
                        let a = -gl * p0 * dp;
                        let d_gp2 = gl * p1 * p1 - gl * p0 * p0;
                        let b = -0.5 * d_gp2 + 0.5 * gl * dp * dp;
                        note(1, a - b, &[a, d_gp2]);
                    }
                }
            }
            for f in &g.interior_faces {
                let xm = [
                    0.5 * (g.centers[f.left][0] + g.centers[f.right][0]),
                    0.5 * (g.centers[f.left][1] + g.centers[f.right][1]),
                ];
                let dx = [
                    g.centers[f.right][0] - g.centers[f.left][0],
                    g.centers[f.right][1] - g.centers[f.left][1],
                ];
                for (j, &u) in g.velocities.iter().enumerate() {
                    let (pl, pr) = (p_of(f.left, j), p_of(f.right, j));
                    let (pbar, dp) = (0.5 * (pl + pr), pr - pl);
                    let p2bar = 0.5 * (pl * pl + pr * pr);
                    let dp2 = pr * pr - pl * pl;
                    // −l_t p U·∇p = −½ U·∇(l_t p²) + ½ U·∇l_t p², with U·∇l_t = 0
                    let a = -lt * pbar * dp;
                    let b = -0.5 * (lt * pr * pr - lt * pl * pl);
                    note(2, a - b, &[a, b]);
                    // −(U·∇l) p U·∇p = −½ U·∇((U·∇l) p²) + ½ U·∇(U·∇l) p²
                    let gl = w.u_dot_grad_l(g.centers[f.left], u);
                    let gr = w.u_dot_grad_l(g.centers[f.right], u);
                    let gbar = w.u_dot_grad_l(xm, u);
                    let dg = 2.0 * w.lambda * dot(u, dx);
                    let a = -gbar * pbar * dp;
                    let d_gp2 = gr * pr * pr - gl * pl * pl;
                    let b = -0.5 * d_gp2 + 0.5 * dg * p2bar;
                    note(3, a - b, &[a, d_gp2, dp2]);
                }
            }
        }
    }
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = if scale[i] > 0.0 {
            worst[i] / scale[i]
        } else {
            worst[i]
        };
    }
    Ok(out)
}

/// One reading of the right-hand side of the weighted estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideReading {
    pub constant: f64,
    pub z_term: f64,
    pub boundary_term: f64,
    pub rhs: f64,
    /// `rhs − E∫θ²(T) z²(T)`.
    pub defect: f64,
}

/// The observability form `E|z_T|² ≤ e^{C r2²}(E∫|Z|² + |z|²_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityForm {
    pub terminal_energy: f64,
    pub observed_energy: f64,
    pub r2: f64,
    pub c_impl: f64,
    pub c_required: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarlemanSides {
    /// `E∫θ²(T) z²(T)`.
    pub terminal_term: f64,
    /// Nonnegative interior terms dropped by the estimate:
    /// `2(1−c)λ E∫θ²z² + 2E∫θ²Φ²z²`.
    pub interior_term: f64,
    /// Constants of the derivation: `C = 1/(λ(cT−2R))`, Z weight `3b3² + |Φ|`,
    /// boundary weight `|Φ|/λ`.
    pub derived: SideReading,
    /// Weights as printed: `C = 3/(λ(cT−2R))` with Z weight
    /// `b3² + 2 + |λx − cλt|`, boundary weight `c(T−2t) − 2U·x`.
    pub printed: SideReading,
    /// Discrete imbalance of the integrated identity (zero in the continuum).
    pub identity_imbalance: f64,
    /// `|imbalance| / (λ(cT − 2R))`; the defects are guaranteed `≥ −epsilon`.
    pub epsilon: f64,
    pub lambda_one: f64,
    /// True when `λ < λ₁`; the values are still computed.
    pub below_lambda_one: bool,
    pub observability: ObservabilityForm,
}

/// Constant in the reported observability bound `e^{C r2²}`.
pub fn observability_constant_impl(horizon: f64, radius: f64) -> f64 {
    4.0 * (1.0 + horizon * horizon + radius * radius)
}

/// Evaluates both sides of the weighted estimate on a backward path built
/// from `coeffs` (the forward coefficients).
pub fn carleman_sides(
    path: &BackwardPath,
    coeffs: &CoefficientSet,
    w: &CarlemanWeight,
    disc: &Discretization,
) -> Result<CarlemanSides> {
    let g = &disc.geometry;
    w.check_geometry(g)?;
    let nd = disc.n_dof();
    let nv = g.n_velocities();
    let n = disc.n_steps();
    if path.z.width() != nd || path.z.n_levels() != n + 1 {
        return Err(StcError::Shape(
            "backward path does not match the discretization".into(),
        ));
    }
    let b = crate::backward::adjoint_from_forward(coeffs, nv);
    let lam1 = lambda_one(&b, w.c)?;
    let dt = disc.tree.dt();
    let h = disc.grid.h;
    let tt = disc.tree.horizon();
    let r = g.radius;
    let gap = w.c * tt - 2.0 * r;
    let lc = w.lambda * gap;
    let vw = &g.vel_weights;

    // terminal and initial terms
    let zt = path.terminal();
    let zt_lvl = n;
    let mut terminal_term = 0.0;
    let mut t1 = 0.0;
    {
        let parts = par::map_range(1 << zt_lvl, |node| {
            let z = &zt[node * nd..(node + 1) * nd];
            let mut a = 0.0;
            let mut b = 0.0;
            for (p, (&wp, &zp)) in disc.weights.iter().zip(z).enumerate() {
                let (i, j) = (p / nv, p % nv);
                let x = g.centers[i];
                let th2 = w.theta(tt, x).powi(2);
                a += wp * th2 * zp * zp;
                b += wp * w.lambda * (w.c * tt - 2.0 * dot(g.velocities[j], x)) * th2 * zp * zp;
            }
            (a, b)
        });
        let prob = disc.tree.prob(zt_lvl);
        for (a, bb) in parts {
            terminal_term += prob * a;
            t1 += prob * bb;
        }
    }
    let z0 = path.initial();
    let i0: f64 = (0..nd)
        .map(|p| {
            let (i, j) = (p / nv, p % nv);
            let x = g.centers[i];
            disc.weights[p]
                * w.lambda
                * (w.c * tt + 2.0 * dot(g.velocities[j], x))
                * w.theta(0.0, x).powi(2)
                * z0[p]
                * z0[p]
        })
        .sum();

    // interior sums over levels
    let mut bracket = 0.0;
    let mut square = 0.0;
    let mut qv = 0.0;
    let mut model = 0.0;
    let mut z_derived = 0.0;
    let mut z_printed = 0.0;
    for k in 0..n {
        let t = disc.tree.time(k);
        let zl = path.z.level(k);
        let zz = path.big_z.level(k);
        let parts = par::map_range(1 << k, |node| {
            let c = NodeCoefs::at(coeffs, k, node);
            let z = &zl[node * nd..(node + 1) * nd];
            let big = &zz[node * nd..(node + 1) * nd];
            let mut acc = [0.0f64; 6];
            for p in 0..nd {
                let (i, j) = (p / nv, p % nv);
                let x = g.centers[i];
                let u = g.velocities[j];
                let th2 = w.theta(t, x).powi(2);
                let phi = w.phi(t, x, u);
                let wp = disc.weights[p];
                // b1 = −a1, b2(U,V) = −a2(V,U), b3 = −a3
                let mut kern = 0.0;
                if !c.a2.is_zero() {
                    for m in 0..nv {
                        kern -= c.a2.get((i * nv + m) * nv + j) * vw[m] * z[i * nv + m];
                    }
                }
                let b3 = -c.a3.get(p);
                let drift = -c.a1.get(p) * z[p] + kern + b3 * big[p];
                let xs = if g.dim == 1 { x[0] } else { dot(x, x).sqrt() };
                acc[0] += wp * th2 * z[p] * z[p];
                acc[1] += wp * th2 * phi * phi * z[p] * z[p];
                acc[2] += wp * th2 * phi * big[p] * big[p];
                acc[3] += wp * th2 * phi * z[p] * drift;
                acc[4] += wp * th2 * (3.0 * b3 * b3 + phi.abs()) * big[p] * big[p];
                acc[5] += wp
                    * th2
                    * (b3 * b3 + 2.0 + (w.lambda * xs - w.c * w.lambda * t).abs())
                    * big[p]
                    * big[p];
            }
            acc
        });
        let s = disc.tree.prob(k) * dt;
        for a in parts {
            bracket += s * a[0];
            square += s * a[1];
            qv += s * a[2];
            model += s * a[3];
            z_derived += s * a[4];
            z_printed += s * a[5];
        }
    }
    bracket *= 2.0 * (1.0 - w.c) * w.lambda;
    square *= 2.0;
    model *= -2.0;

    // boundary sums: trace of substep s sits at time (s + 1) h
    let st = &disc.stencil;
    let nb = st.n_inflow();
    let mut b_identity = 0.0;
    let mut b_derived = 0.0;
    let mut b_printed = 0.0;
    for k in 0..n {
        let m = disc.grid.substeps(k);
        let s0 = disc.grid.start[k];
        let parts = par::map_range(1 << k, |node| {
            let tr = path.trace.node(k, node);
            let mut acc = [0.0f64; 3];
            for s in 0..m {
                let t = (s0 + s + 1) as f64 * h;
                for (bi, face) in st.inflow.iter().enumerate() {
                    let x = face.position;
                    let u = g.velocities[face.velocity];
                    let wb = st.inflow_weight[bi];
                    let th2 = w.theta(t, x).powi(2);
                    let z2 = tr[s * nb + bi].powi(2);
                    let phi = w.phi(t, x, u);
                    acc[0] += wb * phi * th2 * z2;
                    acc[1] += wb * phi.abs() / w.lambda * th2 * z2;
                    acc[2] += wb * (w.c * (tt - 2.0 * t) - 2.0 * dot(u, x)) * th2 * z2;
                }
            }
            acc
        });
        let s = disc.tree.prob(k) * h;
        for a in parts {
            b_identity += s * a[0];
            b_derived += s * a[1];
            b_printed += s * a[2];
        }
    }

    let imbalance = t1 + i0 + b_identity + bracket + qv + square - model;
    let epsilon = imbalance.abs() / lc;
    let reading = |constant: f64, z_term: f64, boundary_term: f64| {
        let rhs = constant * z_term + boundary_term / gap;
        SideReading {
            constant,
            z_term,
            boundary_term,
            rhs,
            defect: rhs - terminal_term,
        }
    };
    let derived = reading(1.0 / lc, z_derived, b_derived);
    let printed = reading(3.0 / lc, z_printed, b_printed);

    let e_zt = disc.terminal_inner(zt, zt);
    let observed = path.trace.inner_with(&path.trace, &st.inflow_weight)
        + (0..n)
            .map(|k| disc.level_inner(path.big_z.level(k), path.big_z.level(k), k))
            .sum::<f64>()
            * dt;
    let r2 = b.r2();
    let c_impl = observability_constant_impl(tt, r);
    let c_required = if e_zt == 0.0 {
        0.0
    } else if observed == 0.0 {
        f64::INFINITY
    } else {
        ((e_zt / observed).ln() / (r2 * r2)).max(0.0)
    };
    Ok(CarlemanSides {
        terminal_term,
        interior_term: bracket + square,
        derived,
        printed,
        identity_imbalance: imbalance,
        epsilon,
        lambda_one: lam1,
        below_lambda_one: w.lambda < lam1,
        observability: ObservabilityForm {
            terminal_energy: e_zt,
            observed_energy: observed,
            r2,
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
    use crate::geometry::GeometrySpec;

    #[test]
    fn weight_values() {
        let w = CarlemanWeight::new(1.0, 0.5, 4.0).unwrap();
        assert_eq!(w.l(2.0, [0.0, 0.0]), 0.0);
        assert_eq!(w.theta(2.0, [0.0, 0.0]), 1.0);
        assert_eq!(w.l(0.0, [0.0, 0.0]), -2.0);
        assert!((w.theta(0.0, [0.0, 0.0]) - (-2.0f64).exp()).abs() < 1e-16);
        assert_eq!(w.l_tt(), -1.0);
        assert_eq!(w.bracket(), 0.5);
    }

    #[test]
    fn bracket_is_lambda_one_minus_c() {
        for (lam, c) in [(1.0, 0.5), (3.0, 0.9), (0.25, 0.1)] {
            let w = CarlemanWeight::new(lam, c, 2.0).unwrap();
            assert!((2.0 * w.bracket() - 2.0 * lam * (1.0 - c)).abs() < 1e-15);
        }
    }

    #[test]
    fn lambda_one_values() {
        let zero = BackwardCoefficientSet {
            b1: Coef::Zero,
            b2: Coef::Zero,
            b3: Coef::Zero,
            b4: Coef::Zero,
        };
        assert_eq!(lambda_one(&zero, 0.5).unwrap(), 0.0);
        let one = BackwardCoefficientSet {
            b1: Coef::Constant(1.0),
            ..zero.clone()
        };
        assert_eq!(lambda_one(&one, 0.5).unwrap(), 3.0);
        let two = BackwardCoefficientSet {
            b1: Coef::Constant(2.0),
            ..zero.clone()
        };
        assert_eq!(lambda_one(&two, 0.5).unwrap(), 12.0);
        assert!(lambda_one(&zero, 1.0).is_err());
    }

    #[test]
    fn midpoint_c() {
        assert_eq!(default_c(0.5, 2.0).unwrap(), 0.75);
        assert!(default_c(0.5, 1.0).is_err());
    }

    #[test]
    fn upwind_gradient_of_linear_field_is_exact() {
        let g = Geometry::build(&GeometrySpec::disk(1.0, 8, 6)).unwrap();
        let grad = UpwindGradient::new(&g);
        for c in 0..g.n_cells() {
            for (j, u) in g.velocities.iter().enumerate() {
                let d = grad.at(c, j, |q| 3.0 * g.centers[q][0] - 2.0 * g.centers[q][1]);
                assert!((d - (3.0 * u[0] - 2.0 * u[1])).abs() < 1e-12);
            }
        }
    }
}
