mod common;

use common::*;
use manidsdp_core::bqp::{relax, BqpInstance};
use manidsdp_core::matrix::BlockSymMatrix;
use manidsdp_core::oblique::{project_tangent, Factor, SubproblemContext, TangentVector};
use manidsdp_core::problem::Problem;
use manidsdp_core::rtr::{solve_subproblem, truncated_cg, Termination, TrustRegionParams};
use nalgebra::{DMatrix, DVector};

fn toy_problem() -> Problem {
    let inst = BqpInstance::dense(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
        DVector::zeros(2),
    )
    .unwrap();
    relax(&inst).unwrap()
}

fn tight(grad_tol: f64) -> TrustRegionParams {
    TrustRegionParams {
        grad_tol,
        max_outer: 500,
        ..TrustRegionParams::default()
    }
}

#[test]
fn toy_subproblem_reaches_tight_gradient_quickly() {
    let p = toy_problem();
    let ctx = SubproblemContext::new(&p, 1.0, &BlockSymMatrix::zeros(p.block_sizes())).unwrap();
    for seed in 0..5 {
        let y0 = random_factor(&mut rng(seed), p.block_sizes(), &[2]);
        let (y, rep) = solve_subproblem(&ctx, y0, None, &tight(1e-10)).unwrap();
        assert_eq!(
            rep.termination,
            Termination::GradientTolerance,
            "seed {seed}"
        );
        assert!(rep.grad_norm <= 1e-10);
        assert!(
            rep.outer_iterations < 50,
            "seed {seed}: {} iterations",
            rep.outer_iterations
        );
        assert!(y.row_norm_error() <= 1e-12);
        // Stationarity: X Y = grad / 2.
        let x = ctx.dual_certificate(&y).unwrap().to_dense_blocks();
        assert!((&x[0] * &y.blocks()[0]).norm() <= 1e-10);
    }
}

#[test]
fn start_at_optimum_takes_no_step() {
    // b = 0 and C = -S0 make Psi(Y0) = 0 = min with zero gradient.
    let mut r = rng(3);
    let base = random_problem(&mut r, &[7], 9);
    let y0 = random_factor(&mut r, &[7], &[3]);
    let c = y0
        .gram()
        .to_dense_blocks()
        .into_iter()
        .map(|s| -s)
        .collect();
    let p = Problem::new(
        base.op().clone(),
        DVector::zeros(9),
        BlockSymMatrix::from_dense(c).unwrap(),
        None,
    )
    .unwrap();
    let ctx = SubproblemContext::new(&p, 1.0, &BlockSymMatrix::zeros(&[7])).unwrap();
    let (y, rep) = solve_subproblem(&ctx, y0.clone(), None, &tight(1e-10)).unwrap();
    assert_eq!(rep.outer_iterations, 0);
    assert_eq!(rep.termination, Termination::GradientTolerance);
    assert!(rep.value.abs() <= 1e-12);
    assert_eq!(y.blocks(), y0.blocks());
}

#[test]
fn more_iterations_never_increase_the_value() {
    let mut r = rng(8);
    let p = random_problem(&mut r, &[10], 14);
    let xt = random_null_multiplier(&mut r, &p, 0.5);
    let ctx = SubproblemContext::new(&p, 2.0, &xt).unwrap();
    let y0 = random_factor(&mut r, &[10], &[3]);
    let mut prev = ctx.value(&y0).unwrap();
    for k in 1..=15 {
        let params = TrustRegionParams {
            max_outer: k,
            grad_tol: 1e-14,
            ..TrustRegionParams::default()
        };
        let (_, rep) = solve_subproblem(&ctx, y0.clone(), None, &params).unwrap();
        assert!(
            rep.value <= prev + 1e-12 * prev.abs().max(1.0),
            "k {k}: {} > {prev}",
            rep.value
        );
        prev = rep.value;
    }
}

#[test]
fn warm_direction_is_taken_when_it_decreases() {
    let mut r = rng(21);
    let p = random_problem(&mut r, &[9], 12);
    let ctx = SubproblemContext::new(&p, 1.0, &BlockSymMatrix::zeros(&[9])).unwrap();
    let y0 = random_factor(&mut r, &[9], &[3]);
    let descent = ctx.gradient(&y0).unwrap().scaled(-1e-3);
    let params = TrustRegionParams {
        max_outer: 0,
        ..TrustRegionParams::default()
    };
    let (y, rep) = solve_subproblem(&ctx, y0.clone(), Some(&descent), &params).unwrap();
    assert!(rep.warm_step_accepted);
    assert!(ctx.value(&y).unwrap() < ctx.value(&y0).unwrap());
}

#[test]
fn truncated_cg_respects_radius_and_decreases_model() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let p = random_problem(&mut r, &[8], 10);
        let xt = random_null_multiplier(&mut r, &p, 1.0);
        let ctx = SubproblemContext::new(&p, 1.5, &xt).unwrap();
        let y = random_factor(&mut r, &[8], &[3]);
        let g = ctx.gradient(&y).unwrap();
        for delta in [1e-3, 1e-1, 10.0] {
            let res = truncated_cg(|u| ctx.hessian(&y, u), &g, delta, 0.1, 1.0, 200).unwrap();
            assert!(res.step.norm() <= delta * (1.0 + 1e-10), "seed {seed}");
            assert!(res.step.tangency_error(&y) <= 1e-10 * res.step.norm().max(1.0));
            let hs = ctx.hessian(&y, &res.step).unwrap();
            let direct = g.inner(&res.step) + 0.5 * res.step.inner(&hs);
            let tracked = res.model_change(&g);
            assert!(direct < 0.0);
            assert!((direct - tracked).abs() <= 1e-9 * direct.abs().max(1e-12));
        }
    }
}

#[test]
fn truncated_cg_with_zero_gradient_returns_zero() {
    let mut r = rng(4);
    let y = random_factor(&mut r, &[5], &[2]);
    let g = TangentVector::zeros_like(&y);
    let res = truncated_cg(|u| Ok(u.clone()), &g, 1.0, 0.1, 1.0, 10).unwrap();
    assert_eq!(res.iterations, 0);
    assert_eq!(res.step.norm(), 0.0);
}

#[test]
fn solve_is_deterministic() {
    let mut r = rng(9);
    let p = random_problem(&mut r, &[9, 5], 16);
    let xt = random_null_multiplier(&mut r, &p, 0.5);
    let ctx = SubproblemContext::new(&p, 1.0, &xt).unwrap();
    let y0: Factor = random_factor(&mut r, &[9, 5], &[3, 2]);
    let a = solve_subproblem(&ctx, y0.clone(), None, &tight(1e-9)).unwrap();
    let b = solve_subproblem(&ctx, y0, None, &tight(1e-9)).unwrap();
    assert_eq!(a.0.blocks(), b.0.blocks());
    assert_eq!(a.1, b.1);
}

#[test]
fn hessian_is_linear_in_direction() {
    let mut r = rng(12);
    let p = random_problem(&mut r, &[6], 7);
    let ctx = SubproblemContext::new(&p, 1.0, &BlockSymMatrix::zeros(&[6])).unwrap();
    let y = random_factor(&mut r, &[6], &[2]);
    let u = project_tangent(&y, &random_ambient(&mut r, &y)).unwrap();
    let hu = ctx.hessian(&y, &u).unwrap();
    let v = project_tangent(&y, &random_ambient(&mut r, &y)).unwrap();
    let hv = ctx.hessian(&y, &v).unwrap();
    let mut w = u.scaled(2.0);
    w.axpy(-3.0, &v);
    let mut want = hu.scaled(2.0);
    want.axpy(-3.0, &hv);
    let mut diff = ctx.hessian(&y, &w).unwrap();
    diff.axpy(-1.0, &want);
    assert!(diff.norm() <= 1e-12 * want.norm().max(1.0));
}
