//! Geometry of the product oblique manifold `{Y : every row of Y has unit norm}`
//! and the analytic Riemannian gradient and Hessian of the factorized
//! augmented-Lagrangian subproblem.
//!
//! The subproblem objective is written with the multiplier `y` eliminated
//! through its closed form `y(S) = (AA*)^{-1} A(S + C)`:
//!
//! ```text
//! Phi(S) = <D, S + C> + <X~, R(S)> + sigma/2 ||R(S)||^2,   R(S) = S + C - A*(y(S))
//! Psi(Y) = Phi(Y Y^T)
//! ```
//!
//! so that `grad Phi(S) = P(X~) + D + sigma R(S)` with `P` the orthogonal
//! projector onto the null space of `A`. Because `D` and `A*(y)` live in the
//! range of `A*`, `grad Phi(S)` is never materialized: its action on a skinny
//! matrix is assembled from `X~ V`, `A*(coef) V`, `C V` and `Y (Y^T V)`.
//!
//! The metric is the Euclidean one inherited from the ambient space and the
//! retraction is row normalization of `Y + U`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::BlockSymMatrix;
use crate::problem::Problem;

type Blocks = Vec<DMatrix<f64>>;

/// Rows of `Y + U` at or below this norm make the retraction fail.
pub const RETRACTION_MIN_ROW_NORM: f64 = 1e-14;
/// Tolerance on unit row norms accepted by [`Factor::new`].
pub const UNIT_ROW_TOL: f64 = 1e-12;

/// Point on the product oblique manifold: one `n_k x p_k` block per cone.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    blocks: Vec<DMatrix<f64>>,
}

impl Factor {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        for (k, b) in blocks.iter().enumerate() {
            for (i, row) in b.row_iter().enumerate() {
                let err = (row.norm() - 1.0).abs();
                if err > UNIT_ROW_TOL {
                    return Err(Error::InvalidData(format!(
                        "row {i} of block {k} has norm error {err:e}"
                    )));
                }
            }
        }
        Ok(Self { blocks })
    }

    pub(crate) fn from_blocks_unchecked(blocks: Vec<DMatrix<f64>>) -> Self {
        Self { blocks }
    }

    /// Standard normal entries with rows normalized.
    pub fn random<R: Rng + ?Sized>(
        block_sizes: &[usize],
        factor_sizes: &[usize],
        rng: &mut R,
    ) -> Self {
        let blocks = block_sizes
            .iter()
            .zip(factor_sizes)
            .map(|(&n, &p)| {
                let mut m = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
                normalize_rows(&mut m);
                m
            })
            .collect();
        Self { blocks }
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<DMatrix<f64>> {
        self.blocks
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.nrows()).collect()
    }

    pub fn factor_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.ncols()).collect()
    }

    /// Largest deviation of a row norm from one.
    pub fn row_norm_error(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| {
                b.row_iter()
                    .map(|r| (r.norm() - 1.0).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }

    /// `S = Y Y^T` per block, dense.
    pub fn gram(&self) -> BlockSymMatrix {
        BlockSymMatrix::from_dense_unchecked(
            self.blocks.par_iter().map(|y| y * y.transpose()).collect(),
        )
    }

    /// `Y O` per block; `O` orthogonal keeps the point on the manifold.
    pub fn mul_right(&self, o: &[DMatrix<f64>]) -> Self {
        Self {
            blocks: self.blocks.iter().zip(o).map(|(y, o)| y * o).collect(),
        }
    }

    /// `[Y_k, 0_{n_k x delta_k}]` per block.
    pub fn padded(&self, deltas: &[usize]) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .zip(deltas)
                .map(|(y, &d)| y.clone().resize_horizontally(y.ncols() + d, 0.0))
                .collect(),
        }
    }

    fn check_shape(&self, u: &[DMatrix<f64>]) -> Result<()> {
        if u.len() != self.blocks.len()
            || self
                .blocks
                .iter()
                .zip(u)
                .any(|(y, u)| y.shape() != u.shape())
        {
            return Err(Error::Dimension(format!(
                "direction shapes {:?} do not match factor shapes {:?}",
                u.iter().map(|m| m.shape()).collect::<Vec<_>>(),
                self.blocks.iter().map(|m| m.shape()).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}

fn normalize_rows(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        let n = m.row(i).norm();
        if n > 0.0 {
            m.row_mut(i).unscale_mut(n);
        }
    }
}

/// Block-structured tangent (or ambient) vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    blocks: Vec<DMatrix<f64>>,
}

impl TangentVector {
    /// Wraps blocks as-is; callers are responsible for tangency.
    pub fn from_blocks(blocks: Vec<DMatrix<f64>>) -> Self {
        Self { blocks }
    }

    pub fn zeros_like(y: &Factor) -> Self {
        Self {
            blocks: y
                .blocks
                .iter()
                .map(|b| DMatrix::zeros(b.nrows(), b.ncols()))
                .collect(),
        }
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<DMatrix<f64>> {
        self.blocks
    }

    pub fn inner(&self, other: &Self) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Self) {
        for (a, b) in self.blocks.iter_mut().zip(&x.blocks) {
            *a += b * alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            blocks: self.blocks.iter().map(|b| b * alpha).collect(),
        }
    }

    /// Largest `|diag(U_k Y_k^T)|` entry: distance from the tangent space.
    pub fn tangency_error(&self, y: &Factor) -> f64 {
        self.blocks
            .iter()
            .zip(&y.blocks)
            .flat_map(|(u, y)| {
                (0..u.nrows())
                    .map(|i| u.row(i).dot(&y.row(i)).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

/// `U - Diag(U Y^T) Y` per block.
pub fn project_tangent(y: &Factor, u: &[DMatrix<f64>]) -> Result<TangentVector> {
    y.check_shape(u)?;
    Ok(TangentVector {
        blocks: y
            .blocks
            .iter()
            .zip(u)
            .map(|(y, u)| remove_normal(u.clone(), y))
            .collect(),
    })
}

/// `U - Diag(rowdot(U, Y)) Y`
fn remove_normal(mut u: DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..u.nrows() {
        let d = u.row(i).dot(&y.row(i));
        if d != 0.0 {
            let yr = y.row(i).into_owned();
            {
                let mut row = u.row_mut(i);
                row += &yr * (-d);
            }
        }
    }
    u
}

/// Row normalization of `Y + U`.
pub fn retract(y: &Factor, u: &TangentVector) -> Result<Factor> {
    y.check_shape(&u.blocks)?;
    let mut blocks = Vec::with_capacity(y.blocks.len());
    for (k, (yk, uk)) in y.blocks.iter().zip(&u.blocks).enumerate() {
        let mut m = yk + uk;
        for i in 0..m.nrows() {
            let norm = m.row(i).norm();
            if norm <= RETRACTION_MIN_ROW_NORM || !norm.is_finite() {
                return Err(Error::DegenerateRetraction {
                    block: k,
                    row: i,
                    norm,
                });
            }
            m.row_mut(i).unscale_mut(norm);
        }
        blocks.push(m);
    }
    Ok(Factor { blocks })
}

/// Function value, gradient data and multipliers at one point `Y`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    /// `y(S) = (AA*)^{-1} A(S + C)`.
    pub y: DVector<f64>,
    /// Coefficients of the range part of `grad Phi(S)`: `d - x_coef - sigma y(S)`.
    coef: DVector<f64>,
    /// `diag(grad Phi(S) S)` per block.
    z: Vec<DVector<f64>>,
    pub grad: TangentVector,
    pub grad_norm: f64,
}

impl Evaluation {
    /// `z = diag(grad Phi(S) S)` concatenated over blocks.
    pub fn z(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.z.iter().map(|z| z.len()).sum(),
            self.z.iter().flat_map(|z| z.iter().copied()),
        )
    }
}

/// Data of one factorized subproblem: fixed `sigma` and `X~`.
#[derive(Debug, Clone)]
pub struct SubproblemContext<'a> {
    problem: &'a Problem,
    sigma: f64,
    /// `None` when `X~ = 0`.
    x_tilde: Option<Vec<DMatrix<f64>>>,
    /// `(AA*)^{-1} A(X~)`, so that `P(X~) = X~ - A*(x_coef)`.
    x_coef: DVector<f64>,
    /// `<X~, C>`
    x_dot_c: f64,
    c_is_zero: bool,
}

impl<'a> SubproblemContext<'a> {
    pub fn new(problem: &'a Problem, sigma: f64, x_tilde: &BlockSymMatrix) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if x_tilde.block_sizes() != problem.block_sizes() {
            return Err(Error::Dimension(format!(
                "X~ block sizes {:?} do not match problem {:?}",
                x_tilde.block_sizes(),
                problem.block_sizes()
            )));
        }
        let (x_blocks, x_coef, x_dot_c) = if x_tilde.is_zero() {
            (None, DVector::zeros(problem.m()), 0.0)
        } else {
            let coef = problem.op().gram_solve(&problem.op().apply(x_tilde)?)?;
            let dot = x_tilde.inner(problem.c())?;
            (Some(x_tilde.to_dense_blocks()), coef, dot)
        };
        Ok(Self {
            problem,
            sigma,
            x_tilde: x_blocks,
            x_coef,
            x_dot_c,
            c_is_zero: problem.c().is_zero(),
        })
    }

    pub fn problem(&self) -> &Problem {
        self.problem
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn check(&self, y: &Factor) -> Result<()> {
        if y.block_sizes() != self.problem.block_sizes() {
            return Err(Error::Dimension(format!(
                "factor block sizes {:?} do not match problem {:?}",
                y.block_sizes(),
                self.problem.block_sizes()
            )));
        }
        Ok(())
    }

    /// `(X~ V, C V)` per block; zero parts are returned as `None`.
    fn fixed_products(&self, v: &[DMatrix<f64>]) -> (Option<Blocks>, Option<Blocks>) {
        let xv = self
            .x_tilde
            .as_ref()
            .map(|x| x.par_iter().zip(v).map(|(x, v)| x * v).collect());
        let cv = (!self.c_is_zero).then(|| {
            self.problem
                .c()
                .blocks()
                .par_iter()
                .zip(v)
                .map(|(c, v)| c.mul_dense(v))
                .collect()
        });
        (xv, cv)
    }

    /// `grad Phi(S) V` given precomputed fixed products and `Y^T V`.
    fn grad_phi_mul(
        &self,
        y: &Factor,
        coef: &DVector<f64>,
        v: &[DMatrix<f64>],
        xv: Option<Vec<DMatrix<f64>>>,
        cv: Option<&Vec<DMatrix<f64>>>,
    ) -> Vec<DMatrix<f64>> {
        let mut out = self.problem.op().adjoint_mul(coef, v);
        for (k, o) in out.iter_mut().enumerate() {
            let yk = &y.blocks[k];
            *o += (yk * (yk.transpose() * &v[k])) * self.sigma;
            if let Some(xv) = &xv {
                *o += &xv[k];
            }
            if let Some(cv) = cv {
                *o += &cv[k] * self.sigma;
            }
        }
        out
    }

    /// Value, gradient and multipliers at `Y`.
    pub fn evaluate(&self, y: &Factor) -> Result<Evaluation> {
        self.check(y)?;
        let op = self.problem.op();
        let yb = &y.blocks;
        let a_sc = op.apply_product(yb, yb) + self.problem.a_c();
        let ys = op.gram_solve(&a_sc)?;
        let (xy, cy) = self.fixed_products(yb);

        let s_sq: f64 = yb.iter().map(|y| (y.transpose() * y).norm_squared()).sum();
        let x_dot_s: f64 = xy
            .as_ref()
            .map_or(0.0, |xy| xy.iter().zip(yb).map(|(a, y)| a.dot(y)).sum());
        let s_dot_c: f64 = cy
            .as_ref()
            .map_or(0.0, |cy| cy.iter().zip(yb).map(|(a, y)| a.dot(y)).sum());
        let c_sq = self.problem.c_norm().powi(2);
        let r_sq = (s_sq + 2.0 * s_dot_c + c_sq - ys.dot(&a_sc)).max(0.0);
        let value = self.problem.d_coef().dot(&a_sc)
            + (x_dot_s + self.x_dot_c - self.x_coef.dot(&a_sc))
            + 0.5 * self.sigma * r_sq;

        let coef = self.problem.d_coef() - &self.x_coef - &ys * self.sigma;
        let gy = self.grad_phi_mul(y, &coef, yb, xy, cy.as_ref());
        let mut z = Vec::with_capacity(yb.len());
        let mut grad = Vec::with_capacity(yb.len());
        for (g, yk) in gy.iter().zip(yb) {
            let zk = DVector::from_iterator(
                yk.nrows(),
                (0..yk.nrows()).map(|i| g.row(i).dot(&yk.row(i))),
            );
            let mut gk = g.clone();
            for i in 0..yk.nrows() {
                let yr = yk.row(i).into_owned();
                {
                    let mut row = gk.row_mut(i);
                    row += &yr * (-zk[i]);
                }
            }
            gk *= 2.0;
            z.push(zk);
            grad.push(gk);
        }
        let grad = TangentVector { blocks: grad };
        let grad_norm = grad.norm();
        Ok(Evaluation {
            value,
            y: ys,
            coef,
            z,
            grad,
            grad_norm,
        })
    }

    /// `Psi(Y) = L_sigma(Y Y^T, y(Y Y^T), X~)`.
    pub fn value(&self, y: &Factor) -> Result<f64> {
        Ok(self.evaluate(y)?.value)
    }

    /// `z = diag(grad Phi(S) S)`.
    pub fn multiplier_z(&self, y: &Factor) -> Result<DVector<f64>> {
        Ok(self.evaluate(y)?.z())
    }

    /// `grad Psi(Y) = 2 X Y`.
    pub fn gradient(&self, y: &Factor) -> Result<TangentVector> {
        Ok(self.evaluate(y)?.grad)
    }

    /// `grad Phi(S)` as a dense block matrix.
    pub fn euclidean_gradient_phi(&self, y: &Factor) -> Result<BlockSymMatrix> {
        let eval = self.evaluate(y)?;
        self.grad_phi_dense(y, &eval)
    }

    fn grad_phi_dense(&self, y: &Factor, eval: &Evaluation) -> Result<BlockSymMatrix> {
        let mut g = self.problem.op().adjoint(&eval.coef)?;
        g.axpy(self.sigma, &y.gram())?;
        if !self.c_is_zero {
            g.axpy(self.sigma, self.problem.c())?;
        }
        if let Some(x) = &self.x_tilde {
            g.axpy(1.0, &BlockSymMatrix::from_dense_unchecked(x.clone()))?;
        }
        Ok(g)
    }

    /// Dual certificate `X = grad Phi(S) - Diag(grad Phi(S) S)`, dense.
    pub fn dual_certificate(&self, y: &Factor) -> Result<BlockSymMatrix> {
        let eval = self.evaluate(y)?;
        self.dual_certificate_from(y, &eval)
    }

    pub fn dual_certificate_from(&self, y: &Factor, eval: &Evaluation) -> Result<BlockSymMatrix> {
        self.grad_phi_dense(y, eval)?.sub_diag(&eval.z())
    }

    /// `X v` for the dual certificate without materializing it.
    pub fn dual_certificate_mul(
        &self,
        y: &Factor,
        eval: &Evaluation,
        v: &[DMatrix<f64>],
    ) -> Vec<DMatrix<f64>> {
        let (xv, cv) = self.fixed_products(v);
        let mut out = self.grad_phi_mul(y, &eval.coef, v, xv, cv.as_ref());
        for (o, (zk, vk)) in out.iter_mut().zip(eval.z.iter().zip(v)) {
            for i in 0..o.nrows() {
                let vr = vk.row(i).into_owned();
                {
                    let mut row = o.row_mut(i);
                    row += &vr * (-zk[i]);
                }
            }
        }
        out
    }

    /// Riemannian Hessian of `Psi` at `Y` applied to a tangent `U`.
    pub fn hessian(&self, y: &Factor, u: &TangentVector) -> Result<TangentVector> {
        let eval = self.evaluate(y)?;
        self.hessian_at(y, &eval, u)
    }

    /// Same as [`hessian`](Self::hessian), reusing an evaluation at `Y`.
    pub fn hessian_at(
        &self,
        y: &Factor,
        eval: &Evaluation,
        u: &TangentVector,
    ) -> Result<TangentVector> {
        y.check_shape(&u.blocks)?;
        let op = self.problem.op();
        let (yb, ub) = (&y.blocks, &u.blocks);
        // A(Z) with Z = Y U^T + U Y^T.
        let a_z = op.apply_product(yb, ub) * 2.0;
        let w = op.gram_solve(&a_z)?;
        let (xu, cu) = self.fixed_products(ub);
        let phi_u = self.grad_phi_mul(y, &eval.coef, ub, xu, cu.as_ref());
        let awy = op.adjoint_mul(&w, yb);

        let blocks = (0..yb.len())
            .map(|k| {
                let (yk, uk) = (&yb[k], &ub[k]);
                let yty = yk.transpose() * yk;
                let uty = uk.transpose() * yk;
                // (Z - A*(w)) Y
                let pzy = yk * uty + uk * yty - &awy[k];
                let mut h = (&phi_u[k] + pzy * self.sigma) * 2.0;
                for i in 0..h.nrows() {
                    let d = h.row(i).dot(&yk.row(i));
                    let yr = yk.row(i).into_owned();
                    {
                        let mut row = h.row_mut(i);
                        row += &yr * (-d);
                    }
                    let ur = uk.row(i).into_owned();
                    {
                        let mut row = h.row_mut(i);
                        row += &ur * (-2.0 * eval.z[k][i]);
                    }
                }
                h
            })
            .collect();
        Ok(TangentVector { blocks })
    }
}
