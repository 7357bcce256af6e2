mod common;

use common::*;
use nalgebra::{DVector, SymmetricEigen};
use stc_core::hum::{
    cgls, conjugate_gradient, hum_solve, min_gramian_eig, min_gramian_eig_report, ControlOperator,
    ControlSpace, EigSettings, GramianOperator,
};
use stc_core::{forward_solve, CoefficientSet, ControlPair};

#[test]
fn toy_gramian_matches_dense_eigensolve() {
    // two cells, one velocity, one step
    let disc = one_velocity(2, 1.0, 1);
    for coeffs in [
        CoefficientSet::zero(),
        random_coeffs(&disc, 3, 1.0, 0.0),
        random_coeffs(&disc, 8, 1.0, 0.0),
    ] {
        let g = dense_gramian(&disc, &coeffs);
        let eig = SymmetricEigen::new(g.clone()).eigenvalues.min();
        let op = GramianOperator::new(&disc, &coeffs);
        let (lam, constant) = min_gramian_eig(&op, EigSettings::default()).unwrap();
        assert!((lam - eig).abs() < 1e-9 * eig.max(1.0), "{lam} vs {eig}");
        assert!((constant - lam.powf(-0.5)).abs() < 1e-12 * constant);
    }
}

#[test]
fn matrix_free_gramian_matches_dense_assembly() {
    let disc = interval(-0.5, 0.5, 4, 1.2, 2);
    let coeffs = random_coeffs(&disc, 5, 1.0, 0.0);
    let g = dense_gramian(&disc, &coeffs);
    let op = GramianOperator::new(&disc, &coeffs);
    let nd = disc.n_dof();
    let w = weights(&disc.geometry);
    let p = disc.tree.prob(2);
    let z = random_vec(nd << 2, 5, 1);
    let gz = op.apply(&z).unwrap();
    // G acts on M^{1/2} z and returns M^{1/2} Λ z
    let mz = DVector::from_fn(z.len(), |r, _| (p * w[r % nd]).sqrt() * z[r]);
    let expect = &g * mz;
    for r in 0..z.len() {
        let got = (p * w[r % nd]).sqrt() * gz[r];
        assert!((got - expect[r]).abs() < 1e-12 * (1.0 + got.abs()));
    }
}

#[test]
fn gramian_is_symmetric_and_semidefinite() {
    let disc = disk(1.0, 4, 4, 3.0, 3);
    let coeffs = random_coeffs(&disc, 2, 1.0, 0.0);
    let op = GramianOperator::new(&disc, &coeffs);
    let n = disc.n_dof() << 3;
    for s in 0..10 {
        let a = random_vec(n, s, 1);
        let b = random_vec(n, s, 2);
        let (ga, gb) = (op.apply(&a).unwrap(), op.apply(&b).unwrap());
        let (x, y) = (op.inner(&ga, &b), op.inner(&a, &gb));
        assert!((x - y).abs() <= 1e-12 * (x.abs() + y.abs()).max(1e-300));
        let q = op.inner(&ga, &a) / op.inner(&a, &a);
        assert!(q >= -1e-12);
        // quadratic form is the observed energy
        let e = op.observed_energy(&a).unwrap();
        assert!((op.inner(&ga, &a) - e).abs() < 1e-12 * e);
    }
    assert_eq!(op.apply_count(), 20);
}

#[test]
fn manufactured_target_is_recovered() {
    let disc = interval(-0.5, 0.5, 16, 1.5, 6);
    let coeffs = random_coeffs(&disc, 4, 1.0, 0.5);
    let op = GramianOperator::new(&disc, &coeffs);
    let y0 = random_vec(disc.n_dof(), 4, 1);
    let z_star = random_vec(disc.n_dof() << 6, 4, 2);
    let free = forward_solve(&disc, &coeffs, &y0, &ControlPair::none()).unwrap();
    let lz = op.apply(&z_star).unwrap();
    let y1: Vec<f64> = free
        .terminal()
        .iter()
        .zip(&lz)
        .map(|(a, b)| a + b)
        .collect();
    let sol = hum_solve(&disc, &coeffs, &y0, &y1, 1e-12, 500).unwrap();
    assert!(sol.converged);
    assert!(sol.relative_error <= 1e-8, "{}", sol.relative_error);
    let dz: Vec<f64> = sol
        .z_t_star
        .iter()
        .zip(&z_star)
        .map(|(a, b)| a - b)
        .collect();
    assert!(disc.terminal_norm(&dz) <= 1e-6 * disc.terminal_norm(&z_star));
}

#[test]
fn characteristics_give_the_control() {
    // One velocity at CFL one: the inflow value fed at substep s sits in
    // cell N-1-s at the final time, and nothing else is needed.
    let disc = one_velocity(8, 1.5, 4);
    assert_eq!(disc.grid.n_sub, 12);
    let coeffs = CoefficientSet::zero();
    let y0 = random_vec(8, 1, 1);
    let profile = random_vec(8, 1, 2);
    let y1: Vec<f64> = (0..16).flat_map(|_| profile.clone()).collect();
    let sol = hum_solve(&disc, &coeffs, &y0, &y1, 1e-13, 100).unwrap();
    assert!(sol.terminal_error < 1e-10);
    let u = sol.controls.u.as_ref().unwrap();
    for k in 0..4 {
        for node in 0..1usize << k {
            let vals = u.node(k, node);
            for (i, &val) in vals.iter().enumerate() {
                let s = disc.grid.start[k] + i;
                let expect = if s >= 4 { profile[11 - s] } else { 0.0 };
                assert!(
                    (val - expect).abs() < 1e-10,
                    "substep {s}: {val} vs {expect}"
                );
            }
        }
    }
    assert!(sol.controls.v.as_ref().unwrap().max_abs() < 1e-10);
}

#[test]
fn conjugate_gradient_error_decreases() {
    let disc = interval(-0.5, 0.5, 8, 1.5, 4);
    let coeffs = random_coeffs(&disc, 6, 1.0, 0.0);
    let op = GramianOperator::new(&disc, &coeffs);
    let b = random_vec(disc.n_dof() << 4, 6, 1);
    let exact = conjugate_gradient(
        |x| op.apply(x),
        |a, c| op.inner(a, c),
        &b,
        1e-14,
        2000,
        |_, _| {},
    )
    .unwrap();
    let mut iterates = Vec::new();
    let out = conjugate_gradient(
        |x| op.apply(x),
        |a, c| op.inner(a, c),
        &b,
        1e-10,
        2000,
        |_, x| iterates.push(x.to_vec()),
    )
    .unwrap();
    assert!(out.converged);
    assert_eq!(iterates.len(), out.iterations + 1);
    let err = |x: &Vec<f64>| {
        let d: Vec<f64> = x.iter().zip(&exact.x).map(|(a, c)| a - c).collect();
        op.inner(&op.apply(&d).unwrap(), &d)
    };
    let errs: Vec<f64> = iterates.iter().map(err).collect();
    for w in errs.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-20, "{errs:?}");
    }
}

#[test]
fn least_energy_control_is_optimal_among_perturbations() {
    let disc = interval(-0.5, 0.5, 8, 1.5, 4);
    let coeffs = random_coeffs(&disc, 7, 1.0, 0.0);
    let space = ControlSpace::full(&disc);
    let op = ControlOperator::new(&disc, &coeffs, space);
    let gram = GramianOperator::new(&disc, &coeffs);
    let target = random_vec(disc.n_dof() << 4, 7, 1);
    let best = cgls(&op, &target, 1e-13, 2000).unwrap();
    assert!(best.residual_sq < 1e-20);
    for s in 0..5 {
        // project a random control onto the kernel of L
        let delta = random_vec(op.weights.len(), s, 9);
        let ld = op.apply(&delta).unwrap();
        let w = conjugate_gradient(
            |x| gram.apply(x),
            |a, c| gram.inner(a, c),
            &ld,
            1e-13,
            2000,
            |_, _| {},
        )
        .unwrap();
        let back = op.adjoint(&w.x).unwrap();
        let kernel: Vec<f64> = delta.iter().zip(&back).map(|(a, b)| a - b).collect();
        let reach = op.apply(&kernel).unwrap();
        assert!(disc.terminal_norm(&reach) < 1e-8 * disc.terminal_norm(&ld));
        for eps in [-0.1, 0.3] {
            let x: Vec<f64> = best
                .x
                .iter()
                .zip(&kernel)
                .map(|(a, k)| a + eps * k)
                .collect();
            assert!(op.energy(&x) >= best.energy * (1.0 - 1e-10));
        }
        let cross = op.space.inner(&op.weights, &best.x, &kernel);
        assert!(cross.abs() < 1e-7 * op.energy(&kernel).sqrt() * best.energy.sqrt());
    }
}

#[test]
fn unresolved_inverse_iteration_is_reported() {
    // T below 2R on a CFL-one grid: part of the domain never sees the inflow
    let disc = interval(-0.5, 0.5, 8, 0.5, 4);
    let zero = CoefficientSet::zero();
    let op = GramianOperator::new(&disc, &zero);
    let settings = EigSettings {
        cg_max_iter: 50,
        ..Default::default()
    };
    let rep = min_gramian_eig_report(&op, settings).unwrap();
    assert!(!rep.resolved);
    assert!(rep.lambda_min < 1e-12);
    assert!(min_gramian_eig(&op, settings).is_err());
}
