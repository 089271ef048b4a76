mod common;

use common::*;
use compartment::datagen::{generate_dataset, NoiseSpec};
use compartment::estimation::{run_em, ConstraintKind, EmConfig, EmProblem, StopReason};
use compartment::graph::{Edge, GraphOperators, Source};
use compartment::model::{dynamics_matrix, input_matrix, regression_matrix, ThetaParams};
use compartment::Error;
use nalgebra::{DMatrix, DVector};

struct Data {
    ops: GraphOperators,
    truth: ThetaParams,
    observed: Vec<usize>,
    y: DMatrix<f64>,
    inputs: DMatrix<f64>,
    initial: DVector<f64>,
}

fn fully_observed(seed: u64, n: usize, steps: usize, noise: NoiseSpec, r_var: f64) -> Data {
    let mut r = rng(seed);
    let ops = random_ops(&mut r, n);
    let truth = random_theta(&mut r, &ops, 1.0);
    let observed: Vec<usize> = (0..n).collect();
    let inputs = DMatrix::from_fn(2, steps, |p, t| if (t / (40 + 17 * p)) % 2 == 0 { 2.0 } else { 0.0 });
    let initial = DVector::from_element(n, 25.0);
    let traj = generate_dataset(&ops, &truth, &observed, noise, &inputs, &initial, r_var, seed).unwrap();
    Data { ops, truth, observed, y: traj.observations, inputs, initial }
}

fn problem(d: &Data) -> EmProblem<'_> {
    EmProblem { ops: &d.ops, observed: &d.observed, observations: &d.y, inputs: &d.inputs, initial: &d.initial }
}

/// Least squares on one-step differences of the measurements via SVD.
fn direct_least_squares(d: &Data) -> DVector<f64> {
    let (n, len) = (d.ops.n(), d.y.ncols());
    let p = d.ops.n_theta();
    let mut design = DMatrix::zeros(n * (len - 1), p);
    let mut target = DVector::zeros(n * (len - 1));
    for t in 0..len - 1 {
        let yt = d.y.column(t).into_owned();
        let m = regression_matrix(&d.ops, &yt, &d.inputs.column(t).into_owned()).unwrap();
        design.view_mut((t * n, 0), (n, p)).copy_from(&m);
        target.rows_mut(t * n, n).copy_from(&((d.y.column(t + 1) - &yt) / d.truth.dtau));
    }
    design.svd(true, true).solve(&target, 1e-14).unwrap()
}

#[test]
fn one_iteration_matches_least_squares_under_full_observation() {
    for seed in [1, 2, 3] {
        let d = fully_observed(seed, 5, 3000, NoiseSpec::Isotropic { sigma2: 1e-4 }, 1e-14);
        let mut cfg = EmConfig::new(ThetaParams::uniform(2, 2, 0.03, 1.0), ConstraintKind::ScalarIdentity, DMatrix::identity(5, 5) * 1e-14);
        cfg.max_iter = 1;
        cfg.q_init = 1e-4;
        let res = run_em(&problem(&d), &cfg).unwrap();
        let em = res.theta.vector();
        let ols = direct_least_squares(&d);
        let err = (&em - &ols).amax() / ols.amax();
        assert!(err < 1e-8, "seed {seed}: relative difference {err:e}\nEM {em}\nLS {ols}");
        assert_eq!(res.trace.len(), 1);
        assert_eq!(res.stop, StopReason::MaxIter);
    }
}

#[test]
fn single_edge_recovered_in_one_iteration() {
    let ops = GraphOperators::new(
        2,
        1,
        1,
        vec![Edge { tail: 1, head: 0, class: 0, scale: 1.0 }],
        vec![Source { compartment: 0, class: 0, scale: 1.0, gain_scale: 1.0 }],
    )
    .unwrap();
    let truth = ThetaParams::new(vec![0.04], vec![0.2], 1.0).unwrap();
    let inputs = DMatrix::from_fn(1, 200, |_, t| if (t / 13) % 2 == 0 { 3.0 } else { 0.0 });
    let initial = DVector::from_element(2, 25.0);
    let traj = generate_dataset(&ops, &truth, &[0, 1], NoiseSpec::None, &inputs, &initial, 0.0, 0).unwrap();
    let d = Data { ops, truth, observed: vec![0, 1], y: traj.observations, inputs, initial };
    let mut cfg = EmConfig::new(ThetaParams::uniform(1, 1, 0.01, 1.0), ConstraintKind::ScalarIdentity, DMatrix::identity(2, 2) * 1e-12);
    cfg.max_iter = 1;
    let res = run_em(&problem(&d), &cfg).unwrap();
    assert!((res.theta.k[0] - 0.04).abs() < 1e-6 * 0.04, "{:?}", res.theta);
    assert!((res.theta.z[0] - 0.2).abs() < 1e-6 * 0.2, "{:?}", res.theta);
}

#[test]
fn isotropic_noise_level_is_recovered() {
    let d = fully_observed(21, 5, 5000, NoiseSpec::Isotropic { sigma2: 1e-4 }, 1e-8);
    for kind in [ConstraintKind::ScalarIdentity, ConstraintKind::Diagonal] {
        let mut cfg = EmConfig::new(d.truth.clone(), kind, DMatrix::identity(5, 5) * 1e-8);
        cfg.max_iter = 5;
        let res = run_em(&problem(&d), &cfg).unwrap();
        let last = res.trace.records.last().unwrap();
        let level = last.q_full_trace / 5.0;
        assert!((level - 1e-4).abs() < 0.2e-4, "{kind}: trace/n = {level:e}");
        for q in res.constraint.params() {
            assert!((q - 1e-4).abs() < 0.2e-4, "{kind}: {q:e}");
        }
    }
}

#[test]
fn noiseless_data_converges_to_the_truth() {
    let d = fully_observed(5, 4, 2000, NoiseSpec::None, 0.0);
    let mut cfg = EmConfig::new(ThetaParams::uniform(2, 2, 0.01, 1.0), ConstraintKind::ScalarIdentity, DMatrix::identity(4, 4) * 1e-10);
    cfg.max_iter = 200;
    let res = run_em(&problem(&d), &cfg).unwrap();
    let err = (res.theta.vector() - d.truth.vector()).component_div(&d.truth.vector()).amax();
    assert!(err < 1e-6, "relative error {err:e} after {} iterations", res.trace.len());
}

#[test]
fn trace_records_every_iteration() {
    let d = fully_observed(6, 4, 300, NoiseSpec::Isotropic { sigma2: 1e-4 }, 1e-6);
    let mut cfg = EmConfig::new(ThetaParams::uniform(2, 2, 0.01, 1.0), ConstraintKind::AlphaLLBetaI, DMatrix::identity(4, 4) * 1e-6);
    cfg.max_iter = 7;
    cfg.theta_tol = 1e-300;
    let res = run_em(&problem(&d), &cfg).unwrap();
    assert_eq!(res.trace.len(), 7);
    assert_eq!(res.trace.constraint_names, vec!["alpha", "beta"]);
    for (i, rec) in res.trace.records.iter().enumerate() {
        assert_eq!(rec.iteration, i + 1);
        assert_eq!(rec.constraint_params.len(), 2);
        assert!(rec.dare_residual < 1e-8 && rec.dlyap_residual < 1e-8);
    }
}

#[test]
fn unidentifiable_class_is_reported() {
    // the second conductance class has no edge at all
    let ops = GraphOperators::new(
        3,
        2,
        1,
        vec![Edge { tail: 2, head: 0, class: 0, scale: 1.0 }, Edge { tail: 0, head: 1, class: 0, scale: 1.0 }],
        vec![Source { compartment: 0, class: 0, scale: 1.0, gain_scale: 1.0 }],
    )
    .unwrap();
    let truth = ThetaParams::new(vec![0.05, 0.05], vec![0.1], 1.0).unwrap();
    let inputs = DMatrix::from_fn(1, 100, |_, t| (t % 10) as f64 * 0.3);
    let initial = DVector::from_element(3, 25.0);
    let observed = vec![0, 1, 2];
    let traj = generate_dataset(&ops, &truth, &observed, NoiseSpec::None, &inputs, &initial, 0.0, 0).unwrap();
    let d = Data { ops, truth, observed, y: traj.observations, inputs, initial };
    let cfg = EmConfig::new(ThetaParams::uniform(2, 1, 0.01, 1.0), ConstraintKind::ScalarIdentity, DMatrix::identity(3, 3) * 1e-8);
    let failure = run_em(&problem(&d), &cfg).unwrap_err();
    match failure.error {
        Error::Identifiability { ref indices, .. } => assert_eq!(indices, &vec![1]),
        ref other => panic!("unexpected error {other:?}"),
    }
    assert!(failure.trace.is_empty());
}

#[test]
fn aat_noise_has_the_requested_covariance() {
    let mut r = rng(31);
    let ops = random_ops(&mut r, 6);
    let theta = random_theta(&mut r, &ops, 1.0);
    let steps = 100_000;
    let inputs = DMatrix::from_fn(2, steps, |p, t| if (t / (50 + p)) % 2 == 0 { 1.0 } else { 0.0 });
    let initial = DVector::from_element(6, 25.0);
    let sigma2 = 1e-4;
    let traj = generate_dataset(&ops, &theta, &[5], NoiseSpec::Aat { sigma2 }, &inputs, &initial, 1e-6, 8).unwrap();
    let a = dynamics_matrix(&ops, &theta).unwrap();
    let b = input_matrix(&ops, &theta).unwrap();
    let x = &traj.states;
    let head = x.columns(0, steps - 1);
    let residuals = x.columns(1, steps - 1) - &a * head - &b * inputs.columns(0, steps - 1);
    let sample = &residuals * residuals.transpose() / (steps - 1) as f64;
    let expected = &a * a.transpose() * sigma2;
    let err = rel_err(&sample, &expected);
    assert!(err < 0.1, "relative Frobenius error {err}");
}
