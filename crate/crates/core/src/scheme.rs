//! Upwind transport stencil and the transport time grid.
//!
//! The tree step `dt` carries the noise. Transport and boundary controls live
//! on a finer uniform grid of substeps of length `h`, so that the scheme stays
//! within its CFL bound and boundary controls can vary on the scale of one
//! cell crossing. Substep `s` belongs to tree level `floor(s * n_steps / n_sub)`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StcError};
use crate::geometry::{BoundaryFace, Geometry};
use crate::tree::ScenarioTree;

/// First-order upwind discretization of `U · ∇` with inflow injection.
///
/// `(D y)_p = diag_p y_p − Σ_q coef_{pq} y_q` where `q` runs over the upstream
/// neighbours of `p`. Inflow pairs contribute `inj_b · u_b` to `−D y`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportStencil {
    n_dof: usize,
    pub diag: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    // W-adjoint in CSR form
    t_row_ptr: Vec<usize>,
    t_cols: Vec<usize>,
    t_vals: Vec<f64>,
    pub inflow: Vec<BoundaryFace>,
    pub inflow_dof: Vec<usize>,
    /// `|face| · |U·ν| / |cell|`.
    pub inflow_coef: Vec<f64>,
    /// `|face| · |U·ν| · w_j`, the weight of the boundary inner product.
    pub inflow_weight: Vec<f64>,
    /// Largest outflow rate; a substep `h` is stable iff `h · kappa <= 1`.
    pub kappa: f64,
}

fn csr(n: usize, triplets: &[(usize, usize, f64)]) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut row_ptr = vec![0usize; n + 1];
    for &(r, _, _) in triplets {
        row_ptr[r + 1] += 1;
    }
    for i in 0..n {
        row_ptr[i + 1] += row_ptr[i];
    }
    let mut fill = row_ptr.clone();
    let mut cols = vec![0; triplets.len()];
    let mut vals = vec![0.0; triplets.len()];
    for &(r, c, v) in triplets {
        cols[fill[r]] = c;
        vals[fill[r]] = v;
        fill[r] += 1;
    }
    (row_ptr, cols, vals)
}

impl TransportStencil {
    pub fn new(g: &Geometry) -> Self {
        let nv = g.n_velocities();
        let n_dof = g.n_dof();
        let vol = g.cell_measure;
        let mut diag = vec![0.0; n_dof];
        let mut trip = Vec::new();
        for f in &g.interior_faces {
            for (j, u) in g.velocities.iter().enumerate() {
                let un = u[0] * f.normal[0] + u[1] * f.normal[1];
                let rate = f.length * un.abs() / vol;
                if un > 0.0 {
                    diag[g.dof(f.left, j)] += rate;
                    trip.push((g.dof(f.right, j), g.dof(f.left, j), rate));
                } else if un < 0.0 {
                    diag[g.dof(f.right, j)] += rate;
                    trip.push((g.dof(f.left, j), g.dof(f.right, j), rate));
                }
            }
        }
        let mut inflow = Vec::new();
        for face in g.classify_boundary() {
            let dof = face.cell * nv + face.velocity;
            if face.sign > 0.0 {
                diag[dof] += face.length * face.sign / vol;
            }
            if face.inflow {
                inflow.push(face);
            }
        }
        let (row_ptr, cols, vals) = csr(n_dof, &trip);
        let w = g.dof_weights();
        let t_trip: Vec<_> = trip
            .iter()
            .map(|&(p, q, c)| (q, p, c * w[p] / w[q]))
            .collect();
        let (t_row_ptr, t_cols, t_vals) = csr(n_dof, &t_trip);
        let inflow_dof = inflow.iter().map(|f| f.cell * nv + f.velocity).collect();
        let inflow_coef = inflow.iter().map(|f| f.length * (-f.sign) / vol).collect();
        let inflow_weight = inflow.iter().map(|f| f.weight(&g.vel_weights)).collect();
        let kappa = diag.iter().fold(0.0f64, |m, &d| m.max(d));
        Self {
            n_dof,
            diag,
            row_ptr,
            cols,
            vals,
            t_row_ptr,
            t_cols,
            t_vals,
            inflow,
            inflow_dof,
            inflow_coef,
            inflow_weight,
            kappa,
        }
    }

    pub fn n_dof(&self) -> usize {
        self.n_dof
    }

    /// Same faces with every transport rate set to zero (reaction-only runs).
    pub fn without_transport(mut self) -> Self {
        self.diag.iter_mut().for_each(|x| *x = 0.0);
        self.vals.iter_mut().for_each(|x| *x = 0.0);
        self.t_vals.iter_mut().for_each(|x| *x = 0.0);
        self.inflow_coef.iter_mut().for_each(|x| *x = 0.0);
        self.kappa = 0.0;
        self
    }

    pub fn n_inflow(&self) -> usize {
        self.inflow.len()
    }

    /// Upstream neighbours of `p` with their coefficients.
    pub fn upstream(&self, p: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[p]..self.row_ptr[p + 1];
        self.cols[r.clone()]
            .iter()
            .copied()
            .zip(self.vals[r].iter().copied())
    }

    /// Downstream neighbours of `q`, i.e. the rows of the W-adjoint.
    pub fn downstream(&self, q: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.t_row_ptr[q]..self.t_row_ptr[q + 1];
        self.t_cols[r.clone()]
            .iter()
            .copied()
            .zip(self.t_vals[r].iter().copied())
    }

    /// `out = D y`.
    pub fn apply(&self, y: &[f64], out: &mut [f64]) {
        for p in 0..self.n_dof {
            let mut acc = self.diag[p] * y[p];
            for k in self.row_ptr[p]..self.row_ptr[p + 1] {
                acc -= self.vals[k] * y[self.cols[k]];
            }
            out[p] = acc;
        }
    }

    /// `out = D* λ`, adjoint with respect to the quadrature inner product.
    pub fn apply_adjoint(&self, lam: &[f64], out: &mut [f64]) {
        for q in 0..self.n_dof {
            let mut acc = self.diag[q] * lam[q];
            for k in self.t_row_ptr[q]..self.t_row_ptr[q + 1] {
                acc -= self.t_vals[k] * lam[self.t_cols[k]];
            }
            out[q] = acc;
        }
    }

    /// Dense `D` (row-major), for tests and small diagnostics.
    pub fn dense(&self) -> Vec<f64> {
        let n = self.n_dof;
        let mut m = vec![0.0; n * n];
        for p in 0..n {
            m[p * n + p] = self.diag[p];
            for (q, c) in self.upstream(p) {
                m[p * n + q] -= c;
            }
        }
        m
    }
}

/// How many transport substeps each tree level receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubstepRule {
    /// Fewest uniform substeps over `[0, T]` with CFL number at most one,
    /// and never fewer than one per tree level.
    #[default]
    Auto,
    /// Exactly `m` substeps per tree level; errors if this violates CFL.
    PerLevel(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub n_sub: usize,
    pub dt: f64,
    /// Substep length.
    pub h: f64,
    /// `start[k]` is the first substep of level `k`; `start[n_steps] = n_sub`.
    pub start: Vec<usize>,
    /// `h · kappa`.
    pub cfl: f64,
}

impl TimeGrid {
    pub fn new(tree: &ScenarioTree, kappa: f64, rule: SubstepRule) -> Result<Self> {
        let n = tree.n_steps();
        let t = tree.horizon();
        let n_sub = match rule {
            SubstepRule::Auto => ((t * kappa * (1.0 - 1e-12)).ceil() as usize).max(n),
            SubstepRule::PerLevel(0) => {
                return Err(StcError::InvalidParameter(
                    "substeps per level must be >= 1".into(),
                ))
            }
            SubstepRule::PerLevel(m) => {
                let h = tree.dt() / m as f64;
                if h * kappa > 1.0 + 1e-12 {
                    return Err(StcError::Cfl {
                        substep: h,
                        bound: 1.0 / kappa,
                        min_substeps: (tree.dt() * kappa * (1.0 - 1e-12)).ceil() as usize,
                    });
                }
                n * m
            }
        };
        let start = (0..=n).map(|k| (k * n_sub).div_ceil(n)).collect();
        let h = t / n_sub as f64;
        Ok(Self {
            n_steps: n,
            n_sub,
            dt: tree.dt(),
            h,
            start,
            cfl: h * kappa,
        })
    }

    pub fn substeps(&self, level: usize) -> usize {
        self.start[level + 1] - self.start[level]
    }

    pub fn substeps_per_level(&self) -> Vec<usize> {
        (0..self.n_steps).map(|k| self.substeps(k)).collect()
    }

    pub fn level_of(&self, s: usize) -> usize {
        s * self.n_steps / self.n_sub
    }

    /// Time at the start of substep `s`.
    pub fn substep_time(&self, s: usize) -> f64 {
        s as f64 * self.h
    }
}

/// Everything the solvers need about the discretization, bundled once.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub geometry: Geometry,
    pub tree: ScenarioTree,
    pub stencil: TransportStencil,
    pub grid: TimeGrid,
    pub weights: Vec<f64>,
}

impl Discretization {
    pub fn new(geometry: Geometry, tree: ScenarioTree, rule: SubstepRule) -> Result<Self> {
        let stencil = TransportStencil::new(&geometry);
        let grid = TimeGrid::new(&tree, stencil.kappa, rule)?;
        let weights = geometry.dof_weights();
        Ok(Self {
            geometry,
            tree,
            stencil,
            grid,
            weights,
        })
    }

    pub fn n_dof(&self) -> usize {
        self.stencil.n_dof()
    }

    pub fn n_steps(&self) -> usize {
        self.tree.n_steps()
    }

    /// `⟨a, b⟩_W` on a single node.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.weights)
            .map(|((x, y), w)| w * x * y)
            .sum()
    }

    /// `E ⟨a, b⟩_W` over all nodes of one level.
    pub fn level_inner(&self, a: &[f64], b: &[f64], level: usize) -> f64 {
        let nd = self.n_dof();
        let parts = crate::par::map_range(1 << level, |n| {
            let r = n * nd..(n + 1) * nd;
            self.inner(&a[r.clone()], &b[r])
        });
        parts.into_iter().sum::<f64>() * self.tree.prob(level)
    }

    /// `E ⟨a, b⟩_W` for terminal-level fields.
    pub fn terminal_inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.level_inner(a, b, self.n_steps())
    }

    pub fn terminal_norm(&self, a: &[f64]) -> f64 {
        self.terminal_inner(a, a).max(0.0).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeometrySpec;

    #[test]
    fn interval_stencil_is_backward_difference() {
        let g = Geometry::build(&GeometrySpec::interval(-0.5, 0.5, 4)).unwrap();
        let s = TransportStencil::new(&g);
        assert_eq!(s.kappa, 4.0);
        // velocity +1 (index 1): y = cell index
        let y: Vec<f64> = (0..8).map(|p| (p / 2) as f64).collect();
        let mut out = vec![0.0; 8];
        s.apply(&y, &mut out);
        for c in 0..4 {
            let plus = out[c * 2 + 1];
            let minus = out[c * 2];
            let want_plus = if c == 0 { 0.0 } else { 4.0 };
            let want_minus = if c == 3 { 4.0 * 3.0 } else { -4.0 };
            assert_eq!(plus, want_plus);
            assert_eq!(minus, want_minus);
        }
        assert_eq!(s.n_inflow(), 2);
        assert_eq!(s.inflow_coef, vec![4.0, 4.0]);
        assert_eq!(s.inflow_weight, vec![1.0, 1.0]);
    }

    #[test]
    fn adjoint_is_weighted_transpose() {
        let g = Geometry::build(&GeometrySpec::disk(1.0, 5, 6)).unwrap();
        let s = TransportStencil::new(&g);
        let n = s.n_dof();
        let w = g.dof_weights();
        let a: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let b: Vec<f64> = (0..n).map(|i| ((i * 17 % 7) as f64 - 3.0) / 2.0).collect();
        let mut da = vec![0.0; n];
        let mut dsb = vec![0.0; n];
        s.apply(&a, &mut da);
        s.apply_adjoint(&b, &mut dsb);
        let lhs: f64 = (0..n).map(|i| w[i] * da[i] * b[i]).sum();
        let rhs: f64 = (0..n).map(|i| w[i] * a[i] * dsb[i]).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn auto_grid_reaches_cfl_one() {
        let g = Geometry::build(&GeometrySpec::interval(-0.5, 0.5, 32)).unwrap();
        let s = TransportStencil::new(&g);
        let tree = ScenarioTree::new(1.5, 10).unwrap();
        let grid = TimeGrid::new(&tree, s.kappa, SubstepRule::Auto).unwrap();
        assert_eq!(grid.n_sub, 48);
        assert!((grid.cfl - 1.0).abs() < 1e-12);
        assert_eq!(grid.substeps_per_level().iter().sum::<usize>(), 48);
        for s in 0..grid.n_sub {
            let k = grid.level_of(s);
            assert!(grid.start[k] <= s && s < grid.start[k + 1]);
        }
    }

    #[test]
    fn per_level_rule_reports_cfl_bound() {
        let tree = ScenarioTree::new(1.0, 4).unwrap();
        match TimeGrid::new(&tree, 10.0, SubstepRule::PerLevel(2)) {
            Err(StcError::Cfl {
                bound,
                min_substeps,
                ..
            }) => {
                assert_eq!(bound, 0.1);
                assert_eq!(min_substeps, 3);
            }
            other => panic!("expected CFL error, got {other:?}"),
        }
        assert!(TimeGrid::new(&tree, 10.0, SubstepRule::PerLevel(3)).is_ok());
    }

    #[test]
    fn grid_never_starves_a_level() {
        let tree = ScenarioTree::new(1.0, 7).unwrap();
        let grid = TimeGrid::new(&tree, 0.5, SubstepRule::Auto).unwrap();
        assert_eq!(grid.n_sub, 7);
        assert!(grid.substeps_per_level().iter().all(|&m| m == 1));
    }
}
