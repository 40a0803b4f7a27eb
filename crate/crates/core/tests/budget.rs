//! Large-instance cost of one gradient plus one Hessian-vector product.
mod common;

use common::*;
use manidsdp_core::matrix::BlockSymMatrix;
use manidsdp_core::oblique::{project_tangent, SubproblemContext};
use manidsdp_core::operator::LinearOperator;
use manidsdp_core::problem::Problem;
use nalgebra::DVector;
use std::time::Instant;

#[test]
fn gradient_and_hessian_at_n_ten_thousand_within_one_second() {
    let n = 10_000;
    let mut r = rng(11);
    // Disjoint off-diagonal supports keep AA* diagonal.
    let constraints: Vec<Vec<(usize, usize, usize, f64)>> = (0..n / 2)
        .map(|i| vec![(0, 2 * i, 2 * i + 1, 1.0 + normal(&mut r).abs())])
        .collect();
    let m = constraints.len();
    let op = LinearOperator::from_entries(vec![n], constraints).unwrap();
    let b = DVector::from_fn(m, |_, _| normal(&mut r));
    let problem = Problem::new(op, b, BlockSymMatrix::zeros(&[n]), None).unwrap();
    let ctx = SubproblemContext::new(&problem, 2.0, &BlockSymMatrix::zeros(&[n])).unwrap();
    let y = random_factor(&mut r, &[n], &[10]);
    let u = project_tangent(&y, &random_ambient(&mut r, &y)).unwrap();

    let start = Instant::now();
    let eval = ctx.evaluate(&y).unwrap();
    let g = ctx.gradient(&y).unwrap();
    let h = ctx.hessian_at(&y, &eval, &u).unwrap();
    let elapsed = start.elapsed();

    assert!(g.norm().is_finite() && h.norm().is_finite());
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
}
