mod common;

use common::*;
use manidsdp_core::admm::{
    adapt_rank, escape_direction, kkt_residuals, solve, solve_observed, update_multipliers,
    update_sigma, update_y, AdmmParams, Status,
};
use manidsdp_core::bqp::{brute_force, relax, BqpInstance};
use manidsdp_core::eig::EigenMode;
use manidsdp_core::matrix::BlockSymMatrix;
use manidsdp_core::oblique::{Factor, SubproblemContext};
use manidsdp_core::operator::LinearOperator;
use manidsdp_core::problem::Problem;
use manidsdp_core::trace::to_csv_string;
use nalgebra::{DMatrix, DVector};
use std::time::Instant;

/// Three-branch penalty rule, written out independently.
fn sigma_oracle(sigma: f64, r: f64, b: f64, g: f64, p: &AdmmParams) -> f64 {
    let ratio = r / (1.0 + b);
    let raw = if ratio < p.tau1 * g {
        sigma / p.gamma
    } else if ratio > p.tau2 * g {
        sigma * p.gamma
    } else {
        sigma
    };
    raw.clamp(p.sigma_min, p.sigma_max)
}

#[test]
fn sigma_update_branches_and_boundaries() {
    let p = AdmmParams::default();
    // (sigma, r, b, g, expected)
    let cases = [
        (1.0, 0.05, 0.0, 1.0, 0.5),
        (1.0, 0.1, 0.0, 1.0, 1.0),
        (1.0, 0.5, 0.0, 1.0, 1.0),
        (1.0, 1.0, 0.0, 1.0, 1.0),
        (1.0, 2.0, 0.0, 1.0, 2.0),
        (1.0, 3.0, 2.0, 1.0, 1.0),
        (1.0, 0.0, 0.0, 0.0, 1.0),
        (1.0, 1e-3, 0.0, 0.0, 2.0),
        (1.5e-3, 0.0, 0.0, 1.0, 1e-3),
        (1e-3, 0.0, 0.0, 1.0, 1e-3),
        (0.6e7, 5.0, 0.0, 1.0, 1e7),
        (1e7, 5.0, 0.0, 1.0, 1e7),
    ];
    for (sigma, r, b, g, want) in cases {
        assert_eq!(
            update_sigma(sigma, r, b, g, &p),
            want,
            "({sigma}, {r}, {b}, {g})"
        );
    }
}

#[test]
fn sigma_update_matches_rule_on_grid() {
    let p = AdmmParams {
        tau1: 0.25,
        tau2: 4.0,
        gamma: 3.0,
        sigma_min: 0.01,
        sigma_max: 100.0,
        ..AdmmParams::default()
    };
    let sigmas = [0.01, 0.02, 0.03, 1.0, 40.0, 99.0, 100.0];
    let vals = [0.0, 1e-9, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 1e9];
    for &s in &sigmas {
        for &r in &vals {
            for &b in &[0.0, 1.0] {
                for &g in &vals {
                    let got = update_sigma(s, r, b, g, &p);
                    assert_eq!(got, sigma_oracle(s, r, b, g, &p));
                    assert!((p.sigma_min..=p.sigma_max).contains(&got));
                }
            }
        }
    }
}

fn two_by_two_problem() -> Problem {
    let op = LinearOperator::from_entries(vec![2], vec![vec![(0, 0, 1, 1.0)]]).unwrap();
    Problem::new(
        op,
        DVector::from_element(1, 1.0),
        BlockSymMatrix::zeros(&[2]),
        None,
    )
    .unwrap()
}

#[test]
fn kkt_dual_residual_example() {
    let p = two_by_two_problem();
    let x = BlockSymMatrix::from_dense(vec![DMatrix::from_diagonal(&DVector::from_vec(vec![
        -1.0, 2.0,
    ]))])
    .unwrap();
    let s = BlockSymMatrix::identity(&[2]);
    let y = DVector::zeros(1);
    let r = kkt_residuals(&p, &s, &y, &x, (3.0, 1.0), EigenMode::Full).unwrap();
    assert!((r.eta_d - 1.0 / 3.0).abs() < 1e-15);
    assert!((r.eta_g - 2.0 / 5.0).abs() < 1e-15);
    // A*(0) - I - 0 has norm sqrt 2; ||C|| = 0.
    assert!((r.eta_p - 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(r.eta_max(), r.eta_p);

    let psd = BlockSymMatrix::identity(&[2]);
    let r = kkt_residuals(&p, &s, &y, &psd, (1.0, 1.0), EigenMode::Full).unwrap();
    assert_eq!((r.eta_d, r.eta_g), (0.0, 0.0));
}

#[test]
fn escape_direction_examples() {
    let x = BlockSymMatrix::from_dense(vec![DMatrix::from_diagonal(&DVector::from_vec(vec![
        1.0, -2.0, 3.0,
    ]))])
    .unwrap();
    let esc = escape_direction(&x, 3, 1e-8, EigenMode::Full).unwrap();
    assert_eq!(esc[0].delta(), 1);
    assert!((esc[0].eigenvalues[0] + 2.0).abs() < 1e-14);
    let v = esc[0].v.column(0);
    assert!((v[1].abs() - 1.0).abs() < 1e-14 && v[0].abs() < 1e-14 && v[2].abs() < 1e-14);

    let psd = BlockSymMatrix::from_dense(vec![DMatrix::from_diagonal(&DVector::from_vec(vec![
        0.0, 1.0,
    ]))])
    .unwrap();
    assert_eq!(
        escape_direction(&psd, 3, 1e-8, EigenMode::Full).unwrap()[0].delta(),
        0
    );

    // Tiny negative eigenvalue within tolerance is ignored.
    let tiny = BlockSymMatrix::from_dense(vec![DMatrix::from_diagonal(&DVector::from_vec(vec![
        -1e-12, 5.0,
    ]))])
    .unwrap();
    assert_eq!(
        escape_direction(&tiny, 3, 1e-8, EigenMode::Full).unwrap()[0].delta(),
        0
    );
}

#[test]
fn escape_direction_keeps_at_most_delta_max_most_negative() {
    let d = DVector::from_vec(vec![-1.0, -4.0, 2.0, -3.0, -2.0]);
    let x = BlockSymMatrix::from_dense(vec![DMatrix::from_diagonal(&d)]).unwrap();
    let esc = escape_direction(&x, 3, 1e-8, EigenMode::Full).unwrap();
    assert_eq!(esc[0].eigenvalues.len(), 3);
    for (a, b) in esc[0].eigenvalues.iter().zip([-4.0, -3.0, -2.0]) {
        assert!((a - b).abs() < 1e-14);
    }
    let vtv = esc[0].v.transpose() * &esc[0].v;
    assert!((vtv - DMatrix::identity(3, 3)).norm() < 1e-14);
}

#[test]
fn escape_curvature_matches_certificate() {
    let mut found = 0;
    let mut seed = 0;
    while found < 50 {
        seed += 1;
        let Some(c) = escape_case(seed) else { continue };
        found += 1;
        let scale = c.predicted.abs();
        assert!(
            c.grad_dot.abs() <= 1e-12 * c.grad_norm.max(1.0),
            "seed {seed}"
        );
        assert!(c.predicted < 0.0);
        assert!(
            (c.curvature - c.predicted).abs() <= 1e-10 * scale,
            "seed {seed}"
        );
        assert!(
            (c.dense_predicted - c.predicted).abs() <= 1e-10 * scale,
            "seed {seed}"
        );
    }
}

#[test]
fn adapt_rank_drops_null_columns_and_pads() {
    let y = Factor::new(vec![DMatrix::from_row_slice(
        3,
        3,
        &[1.0, 0.0, 0.0, 0.6, 0.8, 0.0, 0.0, -1.0, 0.0],
    )])
    .unwrap();
    let c = adapt_rank(&y, &[0], 1e-6);
    assert_eq!(c.factor_sizes(), vec![2]);
    assert!(
        (c.gram().to_dense_blocks()[0].clone() - y.gram().to_dense_blocks()[0].clone()).norm()
            < 1e-14
    );

    let padded = adapt_rank(&y, &[2], 1e-6);
    assert_eq!(padded.factor_sizes(), vec![4]);
    assert!(padded.blocks()[0].columns(2, 2).iter().all(|&v| v == 0.0));
}

#[test]
fn adapt_rank_preserves_gram_of_low_rank_factor() {
    let mut r = rng(77);
    let base = random_factor(&mut r, &[12], &[2]);
    let mix = random_matrix(&mut r, 2, 5);
    let raw = &base.blocks()[0] * mix;
    let rows: Vec<_> = raw
        .row_iter()
        .map(|row| row.clone_owned() / row.norm())
        .collect();
    let y = Factor::new(vec![DMatrix::from_rows(&rows)]).unwrap();
    let c = adapt_rank(&y, &[0], 1e-8);
    assert_eq!(c.factor_sizes(), vec![2]);
    let (g0, g1) = (y.gram().to_dense_blocks(), c.gram().to_dense_blocks());
    assert!(max_abs_diff(&g0, &g1) < 1e-12);
    assert!(c.row_norm_error() < 1e-14);
}

#[test]
fn multiplier_update_matches_certificate() {
    for seed in 0..10 {
        let d = draw(seed);
        let ctx = SubproblemContext::new(&d.problem, d.sigma, &d.x_tilde).unwrap();
        let s = d.y.gram();
        let y = update_y(&d.problem, &s).unwrap();
        let oracle = DenseOracle::new(&d.problem);
        let want_y = oracle.y_of(&d.y);
        assert!((&y - &want_y).norm() <= 1e-10 * want_y.norm().max(1.0));

        let mult = update_multipliers(&d.problem, &d.x_tilde, d.sigma, &s, &y).unwrap();
        let cert = ctx.dual_certificate(&d.y).unwrap().to_dense_blocks();
        let x = mult.x.to_dense_blocks();
        assert!(
            max_abs_diff(&x, &cert) <= 1e-10 * frob(&cert).max(1.0),
            "seed {seed}"
        );
        let z = ctx.multiplier_z(&d.y).unwrap();
        assert!((&mult.z - z).norm() <= 1e-10 * frob(&cert).max(1.0));
        // New X~ stays in the null space of A.
        let ax = d.problem.op().apply(&mult.x_tilde).unwrap();
        assert!(ax.norm() <= 1e-10 * (1.0 + mult.x_tilde.norm()));
    }
}

fn toy() -> BqpInstance {
    BqpInstance::dense(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
        DVector::zeros(2),
    )
    .unwrap()
}

#[test]
fn toy_instance_bound_is_exact() {
    let inst = toy();
    let (min, _) = brute_force(&inst).unwrap();
    assert_eq!(min, -2.0);
    let start = Instant::now();
    let sol = solve(&relax(&inst).unwrap(), &AdmmParams::default()).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
    assert_eq!(sol.status, Status::Converged);
    assert!((sol.dual_objective() - min).abs() <= 1e-6);
}

#[test]
fn iterates_keep_invariants() {
    let inst = manidsdp_core::bqp::gen_random(manidsdp_core::bqp::BqpKind::Dense, 6, 1, 4).unwrap();
    let p = relax(&inst).unwrap();
    let params = AdmmParams::default();
    let mut seen = 0;
    let sol = solve_observed(&p, &params, |state, rec| {
        seen += 1;
        assert!(state.factor.row_norm_error() <= 1e-12);
        assert!(state.sigma >= params.sigma_min && state.sigma <= params.sigma_max);
        let ax = p.op().apply(&state.x_tilde).unwrap();
        assert!(ax.norm() <= 1e-8 * (1.0 + state.x_tilde.norm()));
        assert_eq!(rec.k, state.k);
        assert!(rec.eta_max >= rec.eta_p && rec.eta_max >= rec.eta_d && rec.eta_max >= rec.eta_g);
        assert!(rec.p.iter().all(|&q| q >= 1));
        assert!((rec.dual_obj - p.b().dot(&state.y)).abs() <= 1e-12 * rec.dual_obj.abs().max(1.0));
    })
    .unwrap();
    assert_eq!(seen, sol.trace.len());
    assert_eq!(sol.status, Status::Converged);
    assert!(sol.final_record().unwrap().eta_max <= params.tol);
}

#[test]
fn iteration_cap_is_reported() {
    let inst = manidsdp_core::bqp::gen_random(manidsdp_core::bqp::BqpKind::Dense, 8, 1, 2).unwrap();
    let params = AdmmParams {
        max_outer_iters: 1,
        tol: 1e-30,
        ..AdmmParams::default()
    };
    let sol = solve(&relax(&inst).unwrap(), &params).unwrap();
    assert_eq!(sol.status, Status::MaxIterations);
    assert_eq!(sol.trace.len(), 1);
}

#[test]
fn untimed_traces_are_reproducible() {
    let inst = manidsdp_core::bqp::gen_random(manidsdp_core::bqp::BqpKind::Dense, 7, 1, 9).unwrap();
    let p = relax(&inst).unwrap();
    let params = AdmmParams {
        record_wall_time: false,
        ..AdmmParams::default()
    };
    let a = to_csv_string(&solve(&p, &params).unwrap().trace).unwrap();
    let b = to_csv_string(&solve(&p, &params).unwrap().trace).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_parameters_are_rejected() {
    let p = relax(&toy()).unwrap();
    for params in [
        AdmmParams {
            gamma: 1.0,
            ..AdmmParams::default()
        },
        AdmmParams {
            sigma0: 1e9,
            ..AdmmParams::default()
        },
        AdmmParams {
            tau1: 2.0,
            tau2: 1.0,
            ..AdmmParams::default()
        },
        AdmmParams {
            p0: Some(0),
            ..AdmmParams::default()
        },
        AdmmParams {
            tol: 0.0,
            ..AdmmParams::default()
        },
    ] {
        assert!(solve(&p, &params).is_err());
    }
}
