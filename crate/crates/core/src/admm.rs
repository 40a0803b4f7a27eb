//! Outer dual ADMM loop: subproblem dispatch, closed-form `y` update,
//! multiplier updates, saddle escape, penalty adaptation, factorization-size
//! management, KKT residuals and termination.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eig::{extreme_eigenpairs, EigenMode};
use crate::error::{Error, Result};
use crate::matrix::BlockSymMatrix;
use crate::oblique::{Factor, SubproblemContext, TangentVector};
use crate::problem::Problem;
use crate::rtr::{solve_subproblem, InnerReport, TrustRegionParams};
use crate::trace::TraceRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmParams {
    pub sigma0: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub gamma: f64,
    pub tau1: f64,
    pub tau2: f64,
    /// Initial factorization size; `None` means `max(2, ceil(log2 m))`.
    pub p0: Option<usize>,
    pub tol: f64,
    pub max_outer_iters: usize,
    pub max_time_s: Option<f64>,
    /// Maximum escape directions per block and round.
    pub escape_max_dirs: usize,
    /// Escape rounds allowed within one outer iteration.
    pub max_escape_rounds: usize,
    pub rank_tol: f64,
    /// Eigenvalues below `-eig_neg_rtol * (1 + |lambda_max|)` trigger an escape.
    pub eig_neg_rtol: f64,
    pub eig_mode: EigenMode,
    /// Inner tolerance schedule: `max(0.1 * min(1, eta_prev) * grad_tol_scale, grad_floor)`.
    pub grad_tol_scale: f64,
    pub grad_floor: f64,
    pub seed: u64,
    /// When false, trace rows record `time_s = 0` so traces are reproducible byte for byte.
    pub record_wall_time: bool,
    pub trust_region: TrustRegionParams,
}

impl Default for AdmmParams {
    fn default() -> Self {
        Self {
            sigma0: 1.0,
            sigma_min: 1e-3,
            sigma_max: 1e7,
            gamma: 2.0,
            tau1: 0.1,
            tau2: 1.0,
            p0: None,
            tol: 1e-8,
            max_outer_iters: 300,
            max_time_s: None,
            escape_max_dirs: 3,
            max_escape_rounds: 8,
            rank_tol: 1e-4,
            eig_neg_rtol: 1e-8,
            eig_mode: EigenMode::Auto,
            grad_tol_scale: 1e-2,
            grad_floor: 1e-12,
            seed: 0,
            record_wall_time: true,
            trust_region: TrustRegionParams::default(),
        }
    }
}

impl AdmmParams {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return bad(format!(
                "need sigma_max > sigma_min > 0, got sigma_min = {}, sigma_max = {}",
                self.sigma_min, self.sigma_max
            ));
        }
        if !(self.sigma0 >= self.sigma_min && self.sigma0 <= self.sigma_max) {
            return bad(format!(
                "sigma0 = {} outside [{}, {}]",
                self.sigma0, self.sigma_min, self.sigma_max
            ));
        }
        if !(self.gamma > 1.0) {
            return bad(format!("gamma must exceed 1, got {}", self.gamma));
        }
        if !(self.tau1 > 0.0 && self.tau2 >= self.tau1) {
            return bad(format!(
                "need tau2 >= tau1 > 0, got tau1 = {}, tau2 = {}",
                self.tau1, self.tau2
            ));
        }
        if self.p0 == Some(0) {
            return bad("p0 must be at least 1".into());
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return bad(format!(
                "rank_tol must lie in (0, 1), got {}",
                self.rank_tol
            ));
        }
        if !(self.eig_neg_rtol >= 0.0) {
            return bad(format!(
                "eig_neg_rtol must be nonnegative, got {}",
                self.eig_neg_rtol
            ));
        }
        if !(self.grad_tol_scale > 0.0 && self.grad_floor >= 0.0) {
            return bad("grad_tol_scale must be positive and grad_floor nonnegative".into());
        }
        self.trust_region.validate()
    }

    pub fn initial_rank(&self, m: usize) -> usize {
        self.p0
            .unwrap_or_else(|| 2.max((m.max(1) as f64).log2().ceil() as usize))
    }

    /// Inner gradient tolerance given the previous outer iteration's `eta_max`.
    pub fn inner_grad_tol(&self, prev_eta_max: Option<f64>) -> f64 {
        let eta = prev_eta_max.unwrap_or(1.0).min(1.0);
        (0.1 * eta * self.grad_tol_scale).max(self.grad_floor)
    }
}

/// Iterate of the outer loop after the multiplier updates of iteration `k`.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub factor: Factor,
    pub y: DVector<f64>,
    pub x_tilde: BlockSymMatrix,
    pub z: DVector<f64>,
    pub x: BlockSymMatrix,
    /// Penalty that produced this iterate.
    pub sigma: f64,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIterations,
    TimeLimit,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub s: BlockSymMatrix,
    pub y: DVector<f64>,
    pub x: BlockSymMatrix,
    pub z: DVector<f64>,
    pub x_tilde: BlockSymMatrix,
    pub factor: Factor,
    pub trace: Vec<TraceRecord>,
    pub status: Status,
}

impl Solution {
    /// `b^T y`.
    pub fn dual_objective(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.dual_obj)
    }

    pub fn final_record(&self) -> Option<&TraceRecord> {
        self.trace.last()
    }
}

/// `y = (AA*)^{-1} A(S + C)`.
pub fn update_y(problem: &Problem, s: &BlockSymMatrix) -> Result<DVector<f64>> {
    let a_s = problem.op().apply(s)?;
    problem.op().gram_solve(&(a_s + problem.a_c()))
}

/// Result of the multiplier step.
#[derive(Debug, Clone)]
pub struct Multipliers {
    pub x_tilde: BlockSymMatrix,
    pub z: DVector<f64>,
    pub x: BlockSymMatrix,
    /// `||A*(y) - S - C||`
    pub residual_norm: f64,
}

/// `R = A*(y) - S - C`.
pub fn primal_residual(
    problem: &Problem,
    s: &BlockSymMatrix,
    y: &DVector<f64>,
) -> Result<BlockSymMatrix> {
    let mut r = problem.op().adjoint(y)?;
    r.axpy(-1.0, s)?;
    r.axpy(-1.0, problem.c())?;
    Ok(r)
}

/// `diag(M S)` for symmetric `S`, concatenated over blocks.
fn diag_of_product(m: &BlockSymMatrix, s: &BlockSymMatrix) -> DVector<f64> {
    let mut out = Vec::with_capacity(s.total_size());
    for (mb, sb) in m.blocks().iter().zip(s.blocks()) {
        let (md, sd) = (mb.to_dense(), sb.to_dense());
        out.extend((0..md.nrows()).map(|i| md.row(i).dot(&sd.row(i))));
    }
    DVector::from_vec(out)
}

/// `X~ <- X~ - sigma R`, `z <- diag((X~ + D) S)`, `X <- X~ + D - Diag(z)`.
pub fn update_multipliers(
    problem: &Problem,
    x_tilde: &BlockSymMatrix,
    sigma: f64,
    s: &BlockSymMatrix,
    y: &DVector<f64>,
) -> Result<Multipliers> {
    let r = primal_residual(problem, s, y)?;
    let residual_norm = r.norm();
    let mut xt = x_tilde.densify();
    xt.axpy(-sigma, &r)?;
    let mut xd = xt.clone();
    xd.axpy(1.0, problem.d())?;
    let z = diag_of_product(&xd, s);
    let x = xd.sub_diag(&z)?;
    Ok(Multipliers {
        x_tilde: xt,
        z,
        x,
        residual_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub eta_p: f64,
    pub eta_d: f64,
    pub eta_g: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Residuals {
    pub fn eta_max(&self) -> f64 {
        self.eta_p.max(self.eta_d).max(self.eta_g)
    }
}

/// Smallest and largest eigenvalue over all blocks.
pub fn spectrum_extremes(x: &BlockSymMatrix, mode: EigenMode) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for b in x.blocks() {
        let e = extreme_eigenpairs(&b.to_dense(), 1, mode)?;
        lo = lo.min(e.lambda_min);
        hi = hi.max(e.lambda_max);
    }
    Ok((lo, hi))
}

/// Relative primal infeasibility, dual infeasibility and duality gap.
///
/// `objectives` is `(primal, dual)`; the gap is
/// `|primal - dual| / (1 + |primal| + |dual|)`.
pub fn kkt_residuals(
    problem: &Problem,
    s: &BlockSymMatrix,
    y: &DVector<f64>,
    x: &BlockSymMatrix,
    objectives: (f64, f64),
    mode: EigenMode,
) -> Result<Residuals> {
    let eta_p = primal_residual(problem, s, y)?.norm() / (1.0 + problem.c_norm());
    let (lambda_min, lambda_max) = spectrum_extremes(x, mode)?;
    let eta_d = (-lambda_min).max(0.0) / (1.0 + lambda_max.abs());
    let (p, d) = objectives;
    let eta_g = (p - d).abs() / (1.0 + p.abs() + d.abs());
    Ok(Residuals {
        eta_p,
        eta_d,
        eta_g,
        lambda_min,
        lambda_max,
    })
}

/// `<C, X + Diag(z)> + sum(z)`: objective of the primal problem paired with the dual SDP.
pub fn primal_objective(problem: &Problem, x: &BlockSymMatrix, z: &DVector<f64>) -> Result<f64> {
    let xz = x.sub_diag(&(-z))?;
    Ok(problem.c().inner(&xz)? + z.sum())
}

/// Negative-curvature directions of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct EscapeBlock {
    /// Orthonormal eigenvectors as columns, `n_k x delta_k`.
    pub v: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl EscapeBlock {
    pub fn delta(&self) -> usize {
        self.v.ncols()
    }
}

/// Up to `delta_max` eigenvectors per block whose eigenvalues lie below
/// `-neg_rtol * (1 + |lambda_max(X)|)`, most negative first.
pub fn escape_direction(
    x: &BlockSymMatrix,
    delta_max: usize,
    neg_rtol: f64,
    mode: EigenMode,
) -> Result<Vec<EscapeBlock>> {
    let spectra = x
        .blocks()
        .iter()
        .map(|b| extreme_eigenpairs(&b.to_dense(), delta_max, mode))
        .collect::<Result<Vec<_>>>()?;
    let lambda_max = spectra
        .iter()
        .map(|e| e.lambda_max)
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = -neg_rtol * (1.0 + lambda_max.abs());
    Ok(x.blocks()
        .iter()
        .zip(spectra)
        .map(|(b, e)| {
            let chosen: Vec<_> = e
                .lowest
                .into_iter()
                .filter(|(l, _)| *l < threshold)
                .take(delta_max)
                .collect();
            let n = b.size();
            let mut v = DMatrix::zeros(n, chosen.len());
            for (j, (_, vec)) in chosen.iter().enumerate() {
                v.set_column(j, vec);
            }
            EscapeBlock {
                v,
                eigenvalues: chosen.iter().map(|(l, _)| *l).collect(),
            }
        })
        .collect())
}

/// `U = [0, V]` per block at a factor already padded with `delta_k` zero columns.
pub fn escape_tangent(padded: &Factor, escape: &[EscapeBlock]) -> TangentVector {
    TangentVector::from_blocks(
        padded
            .blocks()
            .iter()
            .zip(escape)
            .map(|(y, e)| {
                let mut u = DMatrix::zeros(y.nrows(), y.ncols());
                let d = e.delta();
                if d > 0 {
                    u.columns_mut(y.ncols() - d, d).copy_from(&e.v);
                }
                u
            })
            .collect(),
    )
}

/// Penalty update driven by the balance between the primal residual and the
/// subproblem's final gradient norm.
pub fn update_sigma(
    sigma: f64,
    r_norm: f64,
    b_norm: f64,
    grad_norm: f64,
    params: &AdmmParams,
) -> f64 {
    let ratio = r_norm / (1.0 + b_norm);
    if ratio < params.tau1 * grad_norm {
        (sigma / params.gamma).max(params.sigma_min)
    } else if ratio > params.tau2 * grad_norm {
        (params.gamma * sigma).min(params.sigma_max)
    } else {
        sigma
    }
}

/// Per block: drop numerically null directions of `Y_k` (singular values
/// below `rank_tol` times the largest), then append `deltas[k]` zero columns.
pub fn adapt_rank(y: &Factor, deltas: &[usize], rank_tol: f64) -> Factor {
    let blocks = y
        .blocks()
        .iter()
        .zip(deltas)
        .map(|(yk, &d)| {
            let compressed = compress_block(yk, rank_tol);
            let p = compressed.ncols();
            compressed.resize_horizontally(p + d, 0.0)
        })
        .collect();
    Factor::from_blocks_unchecked(blocks)
}

fn compress_block(y: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let p = y.ncols();
    if p <= 1 {
        return y.clone();
    }
    // Right singular vectors from the small p x p Gram matrix.
    let gram = y.transpose() * y;
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });
    let sv: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
        .collect();
    let rank = sv.iter().filter(|&&s| s >= rank_tol * sv[0]).count().max(1);
    if rank == p {
        return y.clone();
    }
    let mut basis = DMatrix::zeros(p, rank);
    for (j, &i) in order.iter().take(rank).enumerate() {
        basis.set_column(j, &eig.eigenvectors.column(i));
    }
    let mut out = y * basis;
    for i in 0..out.nrows() {
        let n = out.row(i).norm();
        if n > 0.0 {
            out.row_mut(i).unscale_mut(n);
        }
    }
    out
}

/// Runs the outer loop to `eta_max <= tol` or a cap.
pub fn solve(problem: &Problem, params: &AdmmParams) -> Result<Solution> {
    solve_observed(problem, params, |_, _| {})
}

/// Like [`solve`], calling `observer` after every outer iteration.
pub fn solve_observed<F>(
    problem: &Problem,
    params: &AdmmParams,
    mut observer: F,
) -> Result<Solution>
where
    F: FnMut(&AdmmState, &TraceRecord),
{
    params.validate()?;
    let start = Instant::now();
    let sizes = problem.block_sizes().to_vec();
    let p0 = params.initial_rank(problem.m());
    let ranks: Vec<usize> = sizes.iter().map(|&n| p0.min(n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut factor = Factor::random(&sizes, &ranks, &mut rng);
    let mut x_tilde = BlockSymMatrix::zeros(&sizes);
    let mut sigma = params.sigma0;
    let b_norm = problem.b().norm();
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut prev_eta: Option<f64> = None;
    let mut last: Option<AdmmState> = None;
    let mut status = Status::MaxIterations;

    for k in 0..params.max_outer_iters {
        if let Some(limit) = params.max_time_s {
            if start.elapsed().as_secs_f64() > limit {
                status = Status::TimeLimit;
                break;
            }
        }
        let step = outer_step(problem, params, &x_tilde, sigma, factor, prev_eta).map_err(|e| {
            Error::Solve {
                iteration: k,
                source: Box::new(e),
                trace: trace.clone(),
            }
        })?;
        let OuterStep {
            factor: new_factor,
            s,
            y,
            mult,
            inner,
            inner_iters,
            cg_iters,
            escape_delta,
        } = step;

        let primal_obj = primal_objective(problem, &mult.x, &mult.z)?;
        let dual_obj = problem.b().dot(&y);
        let res = kkt_residuals(
            problem,
            &s,
            &y,
            &mult.x,
            (primal_obj, dual_obj),
            params.eig_mode,
        )
        .map_err(|e| Error::Solve {
            iteration: k,
            source: Box::new(e),
            trace: trace.clone(),
        })?;
        let record = TraceRecord {
            k,
            eta_p: res.eta_p,
            eta_d: res.eta_d,
            eta_g: res.eta_g,
            eta_max: res.eta_max(),
            primal_obj,
            dual_obj,
            sigma,
            p: new_factor.factor_sizes(),
            inner_iters,
            cg_iters,
            escape_delta,
            time_s: if params.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::debug!(
            "iter {k}: eta_p {:.2e} eta_d {:.2e} eta_g {:.2e} dual {:.12e} sigma {:.1e} p {:?} inner {} cg {}",
            record.eta_p,
            record.eta_d,
            record.eta_g,
            record.dual_obj,
            sigma,
            record.p,
            inner_iters,
            cg_iters
        );
        let state = AdmmState {
            factor: new_factor.clone(),
            y,
            x_tilde: mult.x_tilde.clone(),
            z: mult.z.clone(),
            x: mult.x.clone(),
            sigma,
            k,
        };
        observer(&state, &record);
        let converged = record.eta_max <= params.tol;
        prev_eta = Some(record.eta_max);
        trace.push(record);
        x_tilde = mult.x_tilde;

        if converged {
            status = Status::Converged;
            last = Some(state);
            break;
        }
        sigma = update_sigma(sigma, mult.residual_norm, b_norm, inner.grad_norm, params);
        factor = adapt_rank(&new_factor, &vec![0; sizes.len()], params.rank_tol);
        last = Some(state);
    }

    let state = match last {
        Some(s) => s,
        None => {
            return Err(Error::InvalidParameter(
                "solver stopped before completing an iteration".into(),
            ))
        }
    };
    Ok(Solution {
        s: state.factor.gram(),
        y: state.y,
        x: state.x,
        z: state.z,
        x_tilde: state.x_tilde,
        factor: state.factor,
        trace,
        status,
    })
}

struct OuterStep {
    factor: Factor,
    s: BlockSymMatrix,
    y: DVector<f64>,
    mult: Multipliers,
    inner: InnerReport,
    inner_iters: usize,
    cg_iters: usize,
    escape_delta: usize,
}

/// Subproblem solve with saddle escapes, then the `y` and multiplier updates.
fn outer_step(
    problem: &Problem,
    params: &AdmmParams,
    x_tilde: &BlockSymMatrix,
    sigma: f64,
    factor: Factor,
    prev_eta: Option<f64>,
) -> Result<OuterStep> {
    let ctx = SubproblemContext::new(problem, sigma, x_tilde)?;
    let tr = TrustRegionParams {
        grad_tol: params.inner_grad_tol(prev_eta),
        ..params.trust_region.clone()
    };
    let (mut factor, mut inner) = solve_subproblem(&ctx, factor, None, &tr)?;
    let mut inner_iters = inner.outer_iterations;
    let mut cg_iters = inner.cg_iterations;
    let mut escape_delta = 0;

    for _ in 0..params.max_escape_rounds {
        if params.escape_max_dirs == 0 {
            break;
        }
        let eval = ctx.evaluate(&factor)?;
        let cert = ctx.dual_certificate_from(&factor, &eval)?;
        let escape = escape_direction(
            &cert,
            params.escape_max_dirs,
            params.eig_neg_rtol,
            params.eig_mode,
        )?;
        let deltas: Vec<usize> = escape.iter().map(EscapeBlock::delta).collect();
        if deltas.iter().all(|&d| d == 0) {
            break;
        }
        escape_delta += deltas.iter().sum::<usize>();
        let padded = adapt_rank(&factor, &deltas, params.rank_tol);
        let u = escape_tangent(&padded, &escape);
        let (f, rep) = solve_subproblem(&ctx, padded, Some(&u), &tr)?;
        factor = f;
        inner_iters += rep.outer_iterations;
        cg_iters += rep.cg_iterations;
        inner = rep;
    }

    let s = factor.gram();
    let y = update_y(problem, &s)?;
    let mult = update_multipliers(problem, x_tilde, sigma, &s, &y)?;
    Ok(OuterStep {
        factor,
        s,
        y,
        mult,
        inner,
        inner_iters,
        cg_iters,
        escape_delta,
    })
}
