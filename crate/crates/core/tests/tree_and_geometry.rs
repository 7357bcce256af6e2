mod common;

use common::*;
use proptest::prelude::*;
use stc_core::tree::{peng_eta, peng_sign_changes, peng_xi};
use stc_core::{weighted_inflow_norm, AdaptedField, Domain, Geometry, GeometrySpec, ScenarioTree};

/// Mean of a terminal variable over the leaves below `node` at `level`.
fn leaf_average(xi: &[f64], n: usize, level: usize, node: usize) -> f64 {
    let below: Vec<f64> = (0..1usize << n)
        .filter(|&leaf| leaf & ((1 << level) - 1) == node)
        .map(|leaf| xi[leaf])
        .collect();
    below.iter().sum::<f64>() / below.len() as f64
}

fn walk(leaf: usize, n: usize, sqrt_dt: f64) -> Vec<f64> {
    // partial sums of the increments along the path of `leaf`
    let mut w = vec![0.0];
    for i in 0..n {
        let step = if leaf >> i & 1 == 1 {
            sqrt_dt
        } else {
            -sqrt_dt
        };
        w.push(w[i] + step);
    }
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conditional_expectation_is_a_leaf_average(n in 1usize..7, seed in 0u64..1000) {
        let tree = ScenarioTree::new(1.0, n).unwrap();
        let xi = random_vec(1 << n, seed, 0);
        let (_, rho) = tree.martingale_representation(&xi).unwrap();
        // rebuild the martingale level by level and compare with leaf averages
        let mut m = AdaptedField::zeros(1, 0);
        m.push_level(vec![leaf_average(&xi, n, 0, 0)]).unwrap();
        for k in 0..n {
            m.push_level((0..2usize << k).map(|node| leaf_average(&xi, n, k + 1, node)).collect()).unwrap();
        }
        for k in (0..n).rev() {
            let ce = tree.conditional_expectation(&m, k).unwrap();
            for (node, v) in ce.iter().enumerate() {
                prop_assert!((v - leaf_average(&xi, n, k, node)).abs() < 1e-12);
            }
        }
        prop_assert_eq!(rho.n_levels(), n);
    }

    #[test]
    fn representation_round_trip(n in 1usize..9, seed in 0u64..1000, horizon in 0.1f64..3.0) {
        let tree = ScenarioTree::new(horizon, n).unwrap();
        let xi = random_vec(1 << n, seed, 1);
        let (x0, rho) = tree.martingale_representation(&xi).unwrap();
        let back = tree.ito_integral(&rho).unwrap();
        prop_assert!((x0 - tree.mean_terminal(&xi)).abs() < 1e-12);
        for (a, b) in back.iter().zip(&xi) {
            prop_assert!((x0 + a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ito_isometry(n in 1usize..9, seed in 0u64..1000) {
        let tree = ScenarioTree::new(1.3, n).unwrap();
        let mut rng_vals = random_vec((1 << n) - 1, seed, 2).into_iter();
        let rho = AdaptedField::from_fn(1, n, |_, _, _| rng_vals.next().unwrap());
        let i = tree.ito_integral(&rho).unwrap();
        let lhs = i.iter().map(|x| x * x).sum::<f64>() / i.len() as f64;
        let rhs: f64 = (0..n)
            .map(|k| rho.level(k).iter().map(|r| r * r).sum::<f64>() * tree.prob(k) * tree.dt())
            .sum();
        prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs));
    }

    #[test]
    fn ito_integral_of_unit_integrand_is_the_walk(n in 1usize..9) {
        let tree = ScenarioTree::new(2.0, n).unwrap();
        let one = AdaptedField::from_fn(1, n, |_, _, _| 1.0);
        let i = tree.ito_integral(&one).unwrap();
        for (leaf, v) in i.iter().enumerate() {
            prop_assert!((v - walk(leaf, n, tree.sqrt_dt())[n]).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_expectation_is_linear(n in 1usize..7, seed in 0u64..1000, a in -3.0f64..3.0) {
        let tree = ScenarioTree::new(1.0, n).unwrap();
        let x = random_vec(1 << n, seed, 3);
        let y = random_vec(1 << n, seed, 4);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
        let lift = |v: Vec<f64>| {
            let mut f = AdaptedField::zeros(1, n + 1);
            f.level_mut(n).copy_from_slice(&v);
            f
        };
        let (fx, fy, fm) = (lift(x), lift(y), lift(mix));
        let k = n - 1;
        let ex = tree.conditional_expectation(&fx, k).unwrap();
        let ey = tree.conditional_expectation(&fy, k).unwrap();
        let em = tree.conditional_expectation(&fm, k).unwrap();
        for i in 0..ex.len() {
            prop_assert!((em[i] - (a * ex[i] + ey[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_product_norm_is_a_norm(seed in 0u64..1000, s in -4.0f64..4.0) {
        let g = Geometry::build(&GeometrySpec::disk(1.0, 36, 4)).unwrap();
        let a = random_vec(g.n_dof(), seed, 5);
        let b = random_vec(g.n_dof(), seed, 6);
        let scaled: Vec<f64> = a.iter().map(|x| s * x).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let n = |v: &[f64]| g.norm_sq(v).sqrt();
        prop_assert!((n(&scaled) - s.abs() * n(&a)).abs() < 1e-12 * (1.0 + n(&a)));
        prop_assert!(n(&sum) <= n(&a) + n(&b) + 1e-12);
    }

    #[test]
    fn inflow_norm_is_a_norm(seed in 0u64..1000, s in -4.0f64..4.0) {
        let disc = interval(-0.5, 0.5, 8, 1.0, 3);
        let a = random_trace(&disc, seed, 7);
        let b = random_trace(&disc, seed, 8);
        let mut scaled = a.clone();
        scaled.scale(s);
        let mut sum = a.clone();
        sum.axpy(1.0, &b);
        let n = |t| weighted_inflow_norm(t, &disc.geometry).unwrap();
        prop_assert!((n(&scaled) - s.abs() * n(&a)).abs() < 1e-12 * (1.0 + n(&a)));
        prop_assert!(n(&sum) <= n(&a) + n(&b) + 1e-12);
    }
}

#[test]
fn peng_switch_count_matches_float_schedule() {
    for n in [2usize, 3, 5, 8, 12, 16, 64, 100] {
        let direct = (1..n)
            .filter(|&k| {
                let t = |k: usize| peng_eta(k as f64 / n as f64, 1.0).unwrap();
                t(k) != t(k - 1)
            })
            .count();
        assert_eq!(peng_sign_changes(n), direct, "n = {n}");
    }
    assert_eq!([2, 8, 16].map(peng_sign_changes), [1, 3, 4]);
}

#[test]
fn peng_integrand_is_recovered() {
    for n in [2usize, 5, 10] {
        let tree = ScenarioTree::new(1.0, n).unwrap();
        let (x0, rho) = tree.martingale_representation(&peng_xi(&tree)).unwrap();
        assert!(x0.abs() < 1e-12);
        for k in 0..n {
            let eta = peng_eta(k as f64 / n as f64, 1.0).unwrap();
            assert!(rho.level(k).iter().all(|r| (r - eta).abs() < 1e-12));
        }
    }
}

#[test]
fn interval_geometry_by_hand() {
    let g = Geometry::build(&GeometrySpec::interval(-0.3, 0.7, 5)).unwrap();
    assert_eq!(g.n_cells(), 5);
    assert!((g.cell_measure - 0.2).abs() < 1e-15);
    let total: f64 = (0..g.n_cells()).map(|_| g.cell_measure).sum();
    assert!((total - 1.0).abs() < 1e-14);
    for (i, c) in g.centers.iter().enumerate() {
        assert!((c[0] - (-0.3 + 0.2 * (i as f64 + 0.5))).abs() < 1e-14);
    }
    assert_eq!(g.interior_faces.len(), 4);
    assert_eq!(g.boundary_sides.len(), 2);
    // farthest boundary point from the origin
    assert!((g.radius - 0.7).abs() < 1e-15);
    assert!((g.min_control_time() - 1.4).abs() < 1e-15);
    // velocity +1 enters on the left, -1 on the right
    let inflow = g.inflow_faces();
    assert_eq!(inflow.len(), 2);
    for f in inflow {
        let u = g.velocities[f.velocity][0];
        assert_eq!(f.cell, if u > 0.0 { 0 } else { 4 });
    }
}

#[test]
fn disk_geometry_by_brute_force() {
    let spec = GeometrySpec::disk(1.0, 100, 8);
    let g = Geometry::build(&spec).unwrap();
    let Domain::Disk { radius } = g.domain else {
        panic!("expected a disk")
    };
    let total = g.cell_measure * g.n_cells() as f64;
    assert!((total - std::f64::consts::PI * radius * radius).abs() < 1e-12);
    for c in &g.centers {
        assert!(c[0].hypot(c[1]) < radius);
    }
    // each active cell has four sides; shared ones are interior faces
    let key = |c: [f64; 2]| ((c[0] / g.dx).floor() as i64, (c[1] / g.dx).floor() as i64);
    let active: std::collections::HashSet<_> = g.centers.iter().map(|&c| key(c)).collect();
    let mut shared = 0;
    let mut exposed = 0;
    for &(i, j) in &active {
        for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            if active.contains(&(i + di, j + dj)) {
                shared += 1;
            } else {
                exposed += 1;
            }
        }
    }
    assert_eq!(g.interior_faces.len(), shared / 2);
    assert_eq!(g.boundary_sides.len(), exposed);
    // inflow pairs: U·ν <= 0
    let mut count = 0;
    for s in &g.boundary_sides {
        for u in &g.velocities {
            if u[0] * s.normal[0] + u[1] * s.normal[1] <= 0.0 {
                count += 1;
            }
        }
    }
    assert_eq!(g.inflow_faces().len(), count);
    let vsum: f64 = g.vel_weights.iter().sum();
    assert!((vsum - 2.0 * std::f64::consts::PI).abs() < 1e-12);
}
