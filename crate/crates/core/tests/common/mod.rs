//! Dense reference implementations built directly from the geometry.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use stc_core::{
    rng_for, AdaptedField, BoundaryTrace, Coef, CoefficientSet, ControlPair, Discretization,
    Geometry, GeometrySpec, RandomCoefSpec, ScenarioTree, SubstepRule,
};

pub fn interval(lo: f64, hi: f64, cells: usize, horizon: f64, steps: usize) -> Discretization {
    let g = Geometry::build(&GeometrySpec::interval(lo, hi, cells)).unwrap();
    Discretization::new(
        g,
        ScenarioTree::new(horizon, steps).unwrap(),
        SubstepRule::Auto,
    )
    .unwrap()
}

/// Interval with the single velocity +1 of weight 2.
pub fn one_velocity(cells: usize, horizon: f64, steps: usize) -> Discretization {
    let spec = GeometrySpec::interval(-0.5, 0.5, cells).with_velocities_1d(vec![(1.0, 2.0)]);
    let g = Geometry::build(&spec).unwrap();
    Discretization::new(
        g,
        ScenarioTree::new(horizon, steps).unwrap(),
        SubstepRule::Auto,
    )
    .unwrap()
}

pub fn disk(radius: f64, axis: usize, nv: usize, horizon: f64, steps: usize) -> Discretization {
    let g = Geometry::build(&GeometrySpec::disk(radius, axis * axis, nv)).unwrap();
    Discretization::new(
        g,
        ScenarioTree::new(horizon, steps).unwrap(),
        SubstepRule::Auto,
    )
    .unwrap()
}

pub fn weights(g: &Geometry) -> Vec<f64> {
    let mut w = Vec::new();
    for _ in 0..g.centers.len() {
        for &vw in &g.vel_weights {
            w.push(g.cell_measure * vw);
        }
    }
    w
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Inflow pairs `(dof, |face|·|U·ν|/|cell|, |face|·|U·ν|·w_j)`, side-major.
pub fn inflow_pairs(g: &Geometry) -> Vec<(usize, f64, f64)> {
    let nv = g.velocities.len();
    let mut out = Vec::new();
    for side in &g.boundary_sides {
        for (j, &u) in g.velocities.iter().enumerate() {
            let un = dot(u, side.normal);
            if un <= 0.0 {
                out.push((
                    side.cell * nv + j,
                    side.length * un.abs() / g.cell_measure,
                    side.length * un.abs() * g.vel_weights[j],
                ));
            }
        }
    }
    out
}

/// Upwind finite-volume transport matrix: cell average of the net outward flux.
pub fn transport_matrix(g: &Geometry) -> DMatrix<f64> {
    let nv = g.velocities.len();
    let nd = g.centers.len() * nv;
    let vol = g.cell_measure;
    let mut d = DMatrix::zeros(nd, nd);
    for f in &g.interior_faces {
        for (j, &u) in g.velocities.iter().enumerate() {
            let flux = f.length * dot(u, f.normal);
            let (l, r) = (f.left * nv + j, f.right * nv + j);
            let up = if flux > 0.0 { l } else { r };
            d[(l, up)] += flux / vol;
            d[(r, up)] -= flux / vol;
        }
    }
    for side in &g.boundary_sides {
        for (j, &u) in g.velocities.iter().enumerate() {
            let flux = side.length * dot(u, side.normal);
            if flux > 0.0 {
                let p = side.cell * nv + j;
                d[(p, p)] += flux / vol;
            }
        }
    }
    d
}

pub fn values(c: &Coef, level: usize, node: usize, width: usize) -> Vec<f64> {
    let v = c.at(level, node);
    (0..width).map(|i| v.get(i)).collect()
}

/// Node operator `A = −D + a1 + Q`, inflow injection `B`, source and `a3`.
pub struct NodeOps {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a3: DVector<f64>,
}

pub fn node_ops(disc: &Discretization, coeffs: &CoefficientSet, k: usize, node: usize) -> NodeOps {
    let g = &disc.geometry;
    let nv = g.velocities.len();
    let nd = g.centers.len() * nv;
    let mut a = -transport_matrix(g);
    let a1 = values(&coeffs.a1, k, node, nd);
    let a2 = values(&coeffs.a2, k, node, nd * nv);
    for p in 0..nd {
        a[(p, p)] += a1[p];
        let i = p / nv;
        for m in 0..nv {
            a[(p, i * nv + m)] += a2[p * nv + m] * g.vel_weights[m];
        }
    }
    let pairs = inflow_pairs(g);
    let mut b = DMatrix::zeros(nd, pairs.len());
    for (col, &(dof, coef, _)) in pairs.iter().enumerate() {
        b[(dof, col)] = coef;
    }
    NodeOps {
        a,
        b,
        f: DVector::from_vec(values(&coeffs.f, k, node, nd)),
        a3: DVector::from_vec(values(&coeffs.a3, k, node, nd)),
    }
}

/// Forward recursion with dense matrices; returns one vector per level.
pub fn dense_forward(
    disc: &Discretization,
    coeffs: &CoefficientSet,
    y0: &[f64],
    c: &ControlPair,
) -> Vec<Vec<f64>> {
    let nd = y0.len();
    let n = disc.tree.n_steps();
    let h = disc.grid.h;
    let sq = disc.tree.dt().sqrt();
    let eye = DMatrix::<f64>::identity(nd, nd);
    let mut levels = vec![y0.to_vec()];
    for k in 0..n {
        let ms = disc.grid.substeps(k);
        let mut next = vec![0.0; nd << (k + 1)];
        for node in 0..1usize << k {
            let ops = node_ops(disc, coeffs, k, node);
            let nb = ops.b.ncols();
            let y = DVector::from_column_slice(&levels[k][node * nd..(node + 1) * nd]);
            let step = &eye + &ops.a * h;
            let mut w = y.clone();
            for s in 0..ms {
                w = &step * w + &ops.f * h;
                if let Some(l) = &c.drift {
                    w += DVector::from_column_slice(l.node(k, node)) * h;
                }
                if let Some(u) = &c.u {
                    let us = DVector::from_column_slice(&u.node(k, node)[s * nb..(s + 1) * nb]);
                    w += &ops.b * us * h;
                }
            }
            let mut noise = ops.a3.component_mul(&y);
            if let Some(v) = &c.v {
                noise += DVector::from_column_slice(v.node(k, node));
            }
            let down = &w - &noise * sq;
            let up = &w + &noise * sq;
            next[node * nd..(node + 1) * nd].copy_from_slice(down.as_slice());
            let u_node = node + (1 << k);
            next[u_node * nd..(u_node + 1) * nd].copy_from_slice(up.as_slice());
        }
        levels.push(next);
    }
    levels
}

pub struct DenseBackward {
    pub z: Vec<Vec<f64>>,
    pub big_z: Vec<Vec<f64>>,
    /// Per level, node-major then substep then inflow pair.
    pub trace: Vec<Vec<f64>>,
    pub dual: Vec<Vec<f64>>,
}

/// Backward recursion through the weighted transposes of the forward maps.
pub fn dense_backward(
    disc: &Discretization,
    coeffs: &CoefficientSet,
    z_t: &[f64],
) -> DenseBackward {
    let g = &disc.geometry;
    let nd = g.centers.len() * g.velocities.len();
    let n = disc.tree.n_steps();
    let h = disc.grid.h;
    let dt = disc.tree.dt();
    let sq = dt.sqrt();
    let w = DVector::from_vec(weights(g));
    let w_inv = w.map(|x| 1.0 / x);
    let eye = DMatrix::<f64>::identity(nd, nd);
    let pairs = inflow_pairs(g);
    let mut z = vec![Vec::new(); n + 1];
    let mut big_z = vec![Vec::new(); n];
    let mut trace = vec![Vec::new(); n];
    let mut dual = vec![Vec::new(); n];
    z[n] = z_t.to_vec();
    for k in (0..n).rev() {
        let ms = disc.grid.substeps(k);
        let half = 1usize << k;
        let mut zk = vec![0.0; nd * half];
        let mut zz = vec![0.0; nd * half];
        let mut tr = vec![0.0; half * ms * pairs.len()];
        let mut du = vec![0.0; nd * half];
        for node in 0..half {
            let ops = node_ops(disc, coeffs, k, node);
            let adj = DMatrix::from_diagonal(&w_inv)
                * (&eye + &ops.a * h).transpose()
                * DMatrix::from_diagonal(&w);
            let zd = DVector::from_column_slice(&z[k + 1][node * nd..(node + 1) * nd]);
            let zu =
                DVector::from_column_slice(&z[k + 1][(node + half) * nd..(node + half + 1) * nd]);
            let cz = (&zu - &zd) / (2.0 * sq);
            let mut lam = (&zu + &zd) / 2.0;
            let mut acc = DVector::zeros(nd);
            for s in (0..ms).rev() {
                for (b, &(dof, _, _)) in pairs.iter().enumerate() {
                    tr[(node * ms + s) * pairs.len() + b] = lam[dof];
                }
                acc += &lam * h;
                lam = &adj * lam;
            }
            let out = lam + ops.a3.component_mul(&cz) * dt;
            zk[node * nd..(node + 1) * nd].copy_from_slice(out.as_slice());
            zz[node * nd..(node + 1) * nd].copy_from_slice(cz.as_slice());
            du[node * nd..(node + 1) * nd].copy_from_slice(acc.as_slice());
        }
        z[k] = zk;
        big_z[k] = zz;
        trace[k] = tr;
        dual[k] = du;
    }
    DenseBackward {
        z,
        big_z,
        trace,
        dual,
    }
}

pub fn random_coeffs(disc: &Discretization, seed: u64, bound: f64, source: f64) -> CoefficientSet {
    let g = &disc.geometry;
    let spec = RandomCoefSpec {
        source,
        ..RandomCoefSpec::uniform(bound, true)
    };
    spec.sample(
        g.centers.len(),
        g.velocities.len(),
        disc.tree.n_steps(),
        &mut rng_for(seed, 1),
    )
}

pub fn random_vec(n: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, stream);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_field(disc: &Discretization, seed: u64, stream: u64) -> AdaptedField {
    let nd = disc.n_dof();
    let mut rng = rng_for(seed, stream);
    AdaptedField::from_fn(nd, disc.tree.n_steps(), |_, _, _| {
        rng.random_range(-1.0..1.0)
    })
}

pub fn random_trace(disc: &Discretization, seed: u64, stream: u64) -> BoundaryTrace {
    let mut t = BoundaryTrace::zeros(
        disc.stencil.n_inflow(),
        disc.grid.substeps_per_level(),
        disc.grid.h,
    );
    let mut rng = rng_for(seed, stream);
    t.levels
        .iter_mut()
        .flatten()
        .for_each(|x| *x = rng.random_range(-1.0..1.0));
    t
}

pub fn random_controls(disc: &Discretization, seed: u64) -> ControlPair {
    ControlPair {
        u: Some(random_trace(disc, seed, 10)),
        v: Some(random_field(disc, seed, 11)),
        drift: Some(random_field(disc, seed, 12)),
    }
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(1e-300f64, |m, x| m.max(x.abs()));
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

/// Gramian assembled from the dense forward recursion, symmetrized in the
/// terminal weights: `M^{1/2} L E^{-1} Lᵀ M^{1/2}`.
pub fn dense_gramian(disc: &Discretization, coeffs: &CoefficientSet) -> DMatrix<f64> {
    let nd = disc.n_dof();
    let n = disc.tree.n_steps();
    let nt = nd << n;
    let y0 = vec![0.0; nd];
    let zero = BoundaryTrace::zeros(
        disc.stencil.n_inflow(),
        disc.grid.substeps_per_level(),
        disc.grid.h,
    );
    let pairs = inflow_pairs(&disc.geometry);
    let w = weights(&disc.geometry);
    let mut cols = Vec::new();
    let mut energy = Vec::new();
    // boundary unit controls
    for k in 0..n {
        for i in 0..zero.levels[k].len() {
            let mut u = zero.clone();
            u.levels[k][i] = 1.0;
            let c = ControlPair {
                u: Some(u),
                ..Default::default()
            };
            cols.push(dense_forward(disc, coeffs, &y0, &c).pop().unwrap());
            energy.push(disc.tree.prob(k) * disc.grid.h * pairs[i % pairs.len()].2);
        }
    }
    // diffusion unit controls
    for k in 0..n {
        for i in 0..nd << k {
            let mut v = AdaptedField::zeros(nd, n);
            v.level_mut(k)[i] = 1.0;
            let c = ControlPair {
                v: Some(v),
                ..Default::default()
            };
            cols.push(dense_forward(disc, coeffs, &y0, &c).pop().unwrap());
            energy.push(disc.tree.prob(k) * disc.tree.dt() * w[i % nd]);
        }
    }
    let l = DMatrix::from_fn(nt, cols.len(), |r, c| cols[c][r]);
    let e_inv = DMatrix::from_diagonal(&DVector::from_iterator(
        energy.len(),
        energy.iter().map(|e| 1.0 / e),
    ));
    let m_half = DMatrix::from_diagonal(&DVector::from_fn(nt, |r, _| {
        (disc.tree.prob(n) * w[r % nd]).sqrt()
    }));
    &m_half * &l * e_inv * l.transpose() * &m_half
}
