//! Shared fixtures: random problems, random points and a dense oracle that
//! recomputes the subproblem from explicit constraint matrices.
#![allow(dead_code)]

use manidsdp_core::admm::{escape_direction, escape_tangent};
use manidsdp_core::eig::EigenMode;
use manidsdp_core::matrix::BlockSymMatrix;
use manidsdp_core::oblique::{project_tangent, Factor, SubproblemContext, TangentVector};
use manidsdp_core::operator::LinearOperator;
use manidsdp_core::problem::Problem;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

pub fn random_sym<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let g = random_matrix(rng, n, n);
    (&g + g.transpose()) * 0.5
}

/// Random multi-block problem with sparse constraints (some spanning two
/// blocks), a generally non-diagonal `AA*` with condition number at most 1e7
/// and a nonzero `C`.
pub fn random_problem<R: Rng>(rng: &mut R, sizes: &[usize], m: usize) -> Problem {
    loop {
        let mut constraints = Vec::with_capacity(m);
        for _ in 0..m {
            let mut list: Vec<(usize, usize, usize, f64)> = Vec::new();
            let nnz = rng.random_range(1..=4);
            for _ in 0..nnz {
                let k = rng.random_range(0..sizes.len());
                let (a, b) = (rng.random_range(0..sizes[k]), rng.random_range(0..sizes[k]));
                let (r, c) = (a.min(b), a.max(b));
                if !list.iter().any(|e| (e.0, e.1, e.2) == (k, r, c)) {
                    list.push((k, r, c, normal(rng)));
                }
            }
            constraints.push(list);
        }
        let Ok(op) = LinearOperator::from_entries(sizes.to_vec(), constraints) else {
            continue;
        };
        let ev = op.gram_matrix().clone().symmetric_eigen().eigenvalues;
        if ev.min() <= 0.0 || ev.max() / ev.min() > 1e7 {
            continue;
        }
        let b = DVector::from_fn(m, |_, _| normal(rng));
        let c =
            BlockSymMatrix::from_dense(sizes.iter().map(|&n| random_sym(rng, n) * 0.3).collect())
                .unwrap();
        if let Ok(p) = Problem::new(op, b, c, None) {
            return p;
        }
    }
}

pub fn random_factor<R: Rng>(rng: &mut R, sizes: &[usize], ranks: &[usize]) -> Factor {
    Factor::random(sizes, ranks, rng)
}

/// Random ambient matrices shaped like `y`.
pub fn random_ambient<R: Rng>(rng: &mut R, y: &Factor) -> Vec<DMatrix<f64>> {
    y.blocks()
        .iter()
        .map(|b| random_matrix(rng, b.nrows(), b.ncols()))
        .collect()
}

/// Constraint matrices as dense blocks, computed from the operator's entry lists.
pub struct DenseOracle {
    pub sizes: Vec<usize>,
    pub mats: Vec<Vec<DMatrix<f64>>>,
    pub gram: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: Vec<DMatrix<f64>>,
}

fn inner(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

impl DenseOracle {
    pub fn new(p: &Problem) -> Self {
        let sizes = p.block_sizes().to_vec();
        let mats: Vec<Vec<DMatrix<f64>>> = p
            .op()
            .constraint_entries()
            .into_iter()
            .map(|list| {
                let mut blocks: Vec<DMatrix<f64>> =
                    sizes.iter().map(|&n| DMatrix::zeros(n, n)).collect();
                for (k, r, c, v) in list {
                    blocks[k][(r, c)] = v;
                    blocks[k][(c, r)] = v;
                }
                blocks
            })
            .collect();
        let m = mats.len();
        let gram = DMatrix::from_fn(m, m, |i, j| inner(&mats[i], &mats[j]));
        Self {
            sizes,
            mats,
            gram,
            b: p.b().clone(),
            c: p.c().to_dense_blocks(),
        }
    }

    pub fn apply(&self, x: &[DMatrix<f64>]) -> DVector<f64> {
        DVector::from_iterator(self.mats.len(), self.mats.iter().map(|a| inner(a, x)))
    }

    pub fn adjoint(&self, y: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> = self.sizes.iter().map(|&n| DMatrix::zeros(n, n)).collect();
        for (a, &yi) in self.mats.iter().zip(y.iter()) {
            for (o, ak) in out.iter_mut().zip(a) {
                *o += ak * yi;
            }
        }
        out
    }

    pub fn gram_solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.gram.clone().lu().solve(v).expect("AA* invertible")
    }

    /// `X - A*((AA*)^{-1} A(X))`
    pub fn project_null(&self, x: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let w = self.gram_solve(&self.apply(x));
        x.iter().zip(self.adjoint(&w)).map(|(a, b)| a - b).collect()
    }

    pub fn d(&self) -> Vec<DMatrix<f64>> {
        self.adjoint(&self.gram_solve(&self.b))
    }

    fn s_plus_c(&self, y: &Factor) -> Vec<DMatrix<f64>> {
        y.blocks()
            .iter()
            .zip(&self.c)
            .map(|(yk, ck)| yk * yk.transpose() + ck)
            .collect()
    }

    /// Augmented Lagrangian `<D, S+C> + <X~, S+C-A*(y)> + sigma/2 ||S+C-A*(y)||^2`.
    pub fn lagrangian(
        &self,
        y: &Factor,
        dual_y: &DVector<f64>,
        x_tilde: &[DMatrix<f64>],
        sigma: f64,
    ) -> f64 {
        let sc = self.s_plus_c(y);
        let r: Vec<DMatrix<f64>> = sc
            .iter()
            .zip(self.adjoint(dual_y))
            .map(|(a, b)| a - b)
            .collect();
        inner(&self.d(), &sc) + inner(x_tilde, &r) + 0.5 * sigma * inner(&r, &r)
    }

    /// Minimizer over the dual vector of the augmented Lagrangian at `S`.
    pub fn y_of(&self, y: &Factor) -> DVector<f64> {
        self.gram_solve(&self.apply(&self.s_plus_c(y)))
    }

    pub fn value(&self, y: &Factor, x_tilde: &[DMatrix<f64>], sigma: f64) -> f64 {
        self.lagrangian(y, &self.y_of(y), x_tilde, sigma)
    }

    pub fn grad_phi(&self, y: &Factor, x_tilde: &[DMatrix<f64>], sigma: f64) -> Vec<DMatrix<f64>> {
        let r = self.project_null(&self.s_plus_c(y));
        let px = self.project_null(x_tilde);
        self.d()
            .iter()
            .zip(px)
            .zip(r)
            .map(|((d, x), r)| d + x + r * sigma)
            .collect()
    }

    pub fn certificate(
        &self,
        y: &Factor,
        x_tilde: &[DMatrix<f64>],
        sigma: f64,
    ) -> Vec<DMatrix<f64>> {
        self.grad_phi(y, x_tilde, sigma)
            .into_iter()
            .zip(y.blocks())
            .map(|(g, yk)| {
                let gs = &g * yk * yk.transpose();
                let mut x = g.clone();
                for i in 0..x.nrows() {
                    x[(i, i)] -= gs[(i, i)];
                }
                x
            })
            .collect()
    }
}

/// Random symmetric matrix in the null space of `A`.
pub fn random_null_multiplier<R: Rng>(rng: &mut R, p: &Problem, scale: f64) -> BlockSymMatrix {
    let oracle = DenseOracle::new(p);
    let raw: Vec<DMatrix<f64>> = p
        .block_sizes()
        .iter()
        .map(|&n| random_sym(rng, n) * scale)
        .collect();
    BlockSymMatrix::from_dense(oracle.project_null(&raw)).unwrap()
}

/// Least-squares slope of `log(err)` against `log(t)`.
pub fn loglog_slope(ts: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn max_abs_diff(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs().max())
        .fold(0.0, f64::max)
}

pub fn frob(a: &[DMatrix<f64>]) -> f64 {
    a.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt()
}

/// One random subproblem and point: up to two blocks of size < 12, factor
/// ranks in 2..=5 (rank 1 has a trivial tangent space), `X~` in the null space of `A`.
pub struct Draw {
    pub problem: Problem,
    pub x_tilde: BlockSymMatrix,
    pub sigma: f64,
    pub y: Factor,
}

pub fn draw(seed: u64) -> Draw {
    draw_scaled(seed, 0.5)
}

pub fn draw_scaled(seed: u64, x_scale: f64) -> Draw {
    let mut r = rng(seed);
    let nb = 1 + (seed % 2) as usize;
    let sizes: Vec<usize> = (0..nb).map(|_| r.random_range(3..12)).collect();
    let total: usize = sizes.iter().map(|n| n * (n + 1) / 2).sum();
    let m = r.random_range(2..=total.min(25));
    let problem = random_problem(&mut r, &sizes, m);
    let x_tilde = random_null_multiplier(&mut r, &problem, x_scale);
    let ranks: Vec<usize> = sizes
        .iter()
        .map(|&n| r.random_range(2..=n.min(5)))
        .collect();
    let y = random_factor(&mut r, &sizes, &ranks);
    let sigma = 0.5 + 3.0 * r.random::<f64>();
    Draw {
        problem,
        x_tilde,
        sigma,
        y,
    }
}

pub fn unit_tangent(seed: u64, y: &Factor) -> TangentVector {
    let mut r = rng(seed ^ 0x5eed);
    let u = project_tangent(y, &random_ambient(&mut r, y)).unwrap();
    let n = u.norm();
    u.scaled(1.0 / n)
}

/// Quantities of one saddle-escape check at the padded point `[Y, 0]`.
pub struct EscapeCase {
    pub grad_dot: f64,
    pub grad_norm: f64,
    /// `<U, Hess U>` from the implicit Hessian.
    pub curvature: f64,
    /// `2 sum v^T X v` with `X` from the solver's certificate.
    pub predicted: f64,
    /// `2 sum v^T X v` with `X` from the dense oracle.
    pub dense_predicted: f64,
}

/// Builds an escape direction from a draw whose certificate has negative
/// spectrum; `None` if the certificate is PSD.
pub fn escape_case(seed: u64) -> Option<EscapeCase> {
    let d = draw_scaled(seed, 2.0);
    let ctx = SubproblemContext::new(&d.problem, d.sigma, &d.x_tilde).unwrap();
    let x = ctx.dual_certificate(&d.y).unwrap();
    let esc = escape_direction(&x, 3, 1e-8, EigenMode::Full).unwrap();
    if esc.iter().all(|e| e.delta() == 0) {
        return None;
    }
    let deltas: Vec<usize> = esc.iter().map(|e| e.delta()).collect();
    let padded = d.y.padded(&deltas);
    let u = escape_tangent(&padded, &esc);
    let grad = ctx.gradient(&padded).unwrap();
    let hu = ctx.hessian(&padded, &u).unwrap();
    let xd = x.to_dense_blocks();
    let dense =
        DenseOracle::new(&d.problem).certificate(&d.y, &d.x_tilde.to_dense_blocks(), d.sigma);
    let quad = |xs: &[DMatrix<f64>]| -> f64 {
        2.0 * xs
            .iter()
            .zip(&esc)
            .map(|(x, e)| (e.v.transpose() * x * &e.v).trace())
            .sum::<f64>()
    };
    Some(EscapeCase {
        grad_dot: grad.inner(&u),
        grad_norm: grad.norm(),
        curvature: u.inner(&hu),
        predicted: quad(&xd),
        dense_predicted: quad(&dense),
    })
}
