mod common;

use common::*;
use compartment::estimation::{
    build_l, normal_equations, project_constraint, update_theta, ConstraintKind, CovarianceConstraint,
};
use compartment::graph::GraphOperators;
use compartment::mesh::{CompartmentMesh, Role};
use compartment::model::{assemble, dynamics_matrix, input_matrix, predict, regression_matrix};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn cases() -> ProptestConfig {
    ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() }
}

fn small_mesh(nx: usize, ny: usize, nz: usize, refine: &[usize]) -> CompartmentMesh {
    let mut mesh = CompartmentMesh::build_grid(nx, ny, nz, [1e-3, 2e-3, 5e-4], |_, _, layer| {
        if layer == 0 { Role::Igbt } else { Role::Copper }
    })
    .unwrap()
    .with_max_level(2);
    for &pick in refine {
        let candidates: Vec<usize> = mesh
            .compartments()
            .iter()
            .filter(|c| !c.is_ambient() && c.refinement_level < 2)
            .map(|c| c.index)
            .collect();
        mesh = mesh.refine(candidates[pick % candidates.len()]).unwrap();
    }
    mesh
}

proptest! {
    #![proptest_config(cases())]

    #[test]
    fn refined_adjacency_is_symmetric(
        nx in 1usize..4, ny in 1usize..4, nz in 1usize..4,
        refine in proptest::collection::vec(0usize..1000, 0..4),
    ) {
        let base = small_mesh(nx, ny, nz, &[]);
        let mesh = small_mesh(nx, ny, nz, &refine);
        prop_assert!(mesh.validate().is_ok());
        prop_assert!((mesh.total_volume() - base.total_volume()).abs() < 1e-12 * base.total_volume());
        for a in mesh.adjacency() {
            prop_assert!(a.weight > 0.0 && a.weight <= 1.0 + 1e-12);
            prop_assert!(mesh.adjacency().iter().any(|b| b.from == a.to && b.to == a.from && b.weight == a.weight));
        }
    }

    #[test]
    fn dynamics_rows_sum_to_one(seed in any::<u64>(), n in 3usize..8, dtau in 0.1f64..2.0) {
        let mut r = rng(seed);
        let ops = random_ops(&mut r, n);
        let theta = random_theta(&mut r, &ops, dtau);
        if let Ok(a) = dynamics_matrix(&ops, &theta) {
            for i in 0..n {
                prop_assert!((a.row(i).sum() - 1.0).abs() < 1e-10);
            }
            let ambient_row_is_identity = a.row(n - 1).iter().enumerate().all(|(j, v)| *v == if j == n - 1 { 1.0 } else { 0.0 });
            prop_assert!(ambient_row_is_identity);
        }
    }

    #[test]
    fn prediction_is_offset_equivariant(seed in any::<u64>(), offset in -50.0f64..50.0) {
        let mut r = rng(seed);
        let ops = random_ops(&mut r, 5);
        let theta = random_theta(&mut r, &ops, 1.0);
        let model = assemble(&ops, &theta, &[4], DMatrix::identity(5, 5), DMatrix::identity(1, 1)).unwrap();
        let inputs = gaussian(&mut r, 2, 60).abs();
        let x0 = gaussian(&mut r, 5, 1).column(0).add_scalar(25.0);
        let base = predict(&model, &x0, &inputs).unwrap();
        let shifted = predict(&model, &x0.add_scalar(offset), &inputs).unwrap();
        prop_assert!((shifted.states.add_scalar(-offset) - base.states).amax() < 1e-9);
    }

    #[test]
    fn regression_identity_holds(seed in any::<u64>(), n in 3usize..8, dtau in 0.1f64..2.0) {
        let mut r = rng(seed);
        let ops = random_ops(&mut r, n);
        let theta = random_theta(&mut r, &ops, dtau);
        let a = dynamics_matrix(&ops, &theta);
        prop_assume!(a.is_ok());
        let a = a.unwrap();
        let b = input_matrix(&ops, &theta).unwrap();
        let x = gaussian(&mut r, n, 1).column(0).add_scalar(40.0);
        let p: DVector<f64> = gaussian(&mut r, 2, 1).column(0).abs();
        let lhs = &a * &x + &b * &p;
        let rhs = &x + regression_matrix(&ops, &x, &p).unwrap() * theta.vector() * dtau;
        prop_assert!((&lhs - &rhs).amax() < 1e-10 * lhs.amax());
    }

    #[test]
    fn scalar_identity_update_ignores_q(seed in any::<u64>(), q1 in 1e-6f64..10.0, q2 in 1e-6f64..10.0) {
        let mut r = rng(seed);
        let ops = random_ops(&mut r, 4);
        let m = random_moments(&mut r, 4, 2, 12, true);
        let stats = stats_of(&m);
        let solve = |q: f64| {
            let w = CovarianceConstraint::ScalarIdentity { q }.inverse(4).unwrap();
            let (normal, rhs) = normal_equations(&stats, &ops, &w, 1.0).unwrap();
            update_theta(&normal, &rhs).unwrap()
        };
        let (a, b) = (solve(q1), solve(q2));
        prop_assert!((&a - &b).norm() <= 1e-9 * a.norm());
    }

    #[test]
    fn projection_is_idempotent(seed in any::<u64>(), n in 3usize..7) {
        let mut r = rng(seed);
        let ops = random_ops(&mut r, n);
        let l = build_l(&ops);
        let ll = &l * l.transpose();
        let near_family = &ll * 2e-4 + DMatrix::identity(n, n) * 1e-4 + random_spd(&mut r, n, 1e-6);
        for target in [random_spd(&mut r, n, 1e-3), near_family] {
            for kind in [ConstraintKind::ScalarIdentity, ConstraintKind::Diagonal, ConstraintKind::AlphaLLBetaI] {
                let start = CovarianceConstraint::initial(kind, n, 1e-2, Some(ll.clone())).unwrap();
                let once = project_constraint(&target, &start).unwrap();
                let twice = project_constraint(&once.covariance(n), &once).unwrap();
                let (a, b) = (once.covariance(n), twice.covariance(n));
                prop_assert!((&a - &b).norm() <= 1e-12 * a.norm(), "{kind}: {:?} vs {:?}", once.params(), twice.params());
            }
        }
    }

    #[test]
    fn coupling_pattern_lies_inside_dynamics_pattern(seed in any::<u64>(), n in 3usize..8) {
        let mut r = rng(seed);
        let ops = random_ops(&mut r, n);
        let theta = random_theta(&mut r, &ops, 0.1);
        let a = dynamics_matrix(&ops, &theta).unwrap();
        let l = build_l(&ops);
        for i in 0..n {
            for j in 0..n {
                if l[(i, j)] != 0.0 {
                    prop_assert!(a[(i, j)] != 0.0);
                }
            }
        }
        prop_assert!(l.column(n - 1).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn toy_rows_sum_to_one() {
    use compartment::datagen::{build_toy, SchemeChoice, ToySpec};
    let toy = build_toy(&ToySpec::reduced()).unwrap();
    for choice in [SchemeChoice::Weak, SchemeChoice::Strong] {
        let ops: &GraphOperators = toy.ops(choice);
        let a = dynamics_matrix(ops, &toy.true_theta(choice)).unwrap();
        for i in 0..ops.n() {
            assert!((a.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }
}
