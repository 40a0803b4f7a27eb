//! Extreme eigenpairs of symmetric blocks.
//!
//! Small blocks use a full symmetric eigendecomposition. Large blocks use a
//! Lanczos iteration with full reorthogonalization, growing the Krylov space
//! until the requested Ritz pairs converge and falling back to the full
//! decomposition if they never do.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Blocks up to this size use the full decomposition in [`EigenMode::Auto`].
pub const FULL_EIG_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EigenMode {
    /// Full decomposition up to [`FULL_EIG_LIMIT`], Lanczos above.
    #[default]
    Auto,
    Full,
    Partial,
}

/// Smallest eigenpairs (ascending) plus the spectrum's extremes.
#[derive(Debug, Clone)]
pub struct ExtremeEigen {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lowest: Vec<(f64, DVector<f64>)>,
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
fn canonical_sign(mut v: DVector<f64>) -> DVector<f64> {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
    v
}

/// `k` smallest eigenpairs of the symmetric matrix `a` and its extreme eigenvalues.
pub fn extreme_eigenpairs(a: &DMatrix<f64>, k: usize, mode: EigenMode) -> Result<ExtremeEigen> {
    let n = a.nrows();
    if n == 0 {
        return Ok(ExtremeEigen {
            lambda_min: 0.0,
            lambda_max: 0.0,
            lowest: Vec::new(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigensolver input".into()));
    }
    let use_full = match mode {
        EigenMode::Full => true,
        EigenMode::Partial => false,
        EigenMode::Auto => n <= FULL_EIG_LIMIT,
    };
    if !use_full {
        match lanczos(a, k.max(1)) {
            Ok(e) => return Ok(e),
            Err(err) => log::debug!("Lanczos failed ({err}); using full decomposition"),
        }
    }
    full(a, k)
}

fn full(a: &DMatrix<f64>, k: usize) -> Result<ExtremeEigen> {
    let eig = SymmetricEigen::try_new(a.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Eigen("symmetric eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .total_cmp(&eig.eigenvalues[j])
            .then(i.cmp(&j))
    });
    let lowest = order
        .iter()
        .take(k)
        .map(|&i| {
            (
                eig.eigenvalues[i],
                canonical_sign(eig.eigenvectors.column(i).into_owned()),
            )
        })
        .collect();
    Ok(ExtremeEigen {
        lambda_min: eig.eigenvalues[order[0]],
        lambda_max: eig.eigenvalues[*order.last().unwrap()],
        lowest,
    })
}

fn lanczos(a: &DMatrix<f64>, k: usize) -> Result<ExtremeEigen> {
    let n = a.nrows();
    let scale = a.norm().max(f64::MIN_POSITIVE);
    let tol = 1e-10 * scale;
    let mut dim = n.min((4 * k + 40).max(80));
    // Deterministic start vector with no special alignment to coordinate axes.
    let start = DVector::from_fn(n, |i, _| 1.0 + ((i * 7919) % 104729) as f64 / 104729.0);
    loop {
        let (basis, alpha, beta) = krylov(a, &start, dim);
        let m = alpha.len();
        let mut t = DMatrix::from_diagonal(&alpha);
        for i in 0..m - 1 {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&i, &j| {
            eig.eigenvalues[i]
                .total_cmp(&eig.eigenvalues[j])
                .then(i.cmp(&j))
        });
        let tail = beta.get(m - 1).copied().unwrap_or(0.0);
        let residual = |j: usize| (tail * eig.eigenvectors[(m - 1, j)]).abs();
        let want: Vec<usize> = order
            .iter()
            .take(k.min(m))
            .copied()
            .chain(std::iter::once(order[m - 1]))
            .collect();
        let converged = m == n || want.iter().all(|&j| residual(j) <= tol);
        if converged {
            let lowest = order
                .iter()
                .take(k.min(m))
                .map(|&j| {
                    let v = &basis * eig.eigenvectors.column(j);
                    let v = v.normalize();
                    (eig.eigenvalues[j], canonical_sign(v))
                })
                .collect();
            return Ok(ExtremeEigen {
                lambda_min: eig.eigenvalues[order[0]],
                lambda_max: eig.eigenvalues[order[m - 1]],
                lowest,
            });
        }
        if dim >= n {
            return Err(Error::Eigen("Lanczos did not converge".into()));
        }
        dim = n.min(2 * dim);
    }
}

/// Lanczos with full reorthogonalization. Returns the basis and the
/// tridiagonal coefficients; `beta[j]` couples `q_j` and `q_{j+1}`.
fn krylov(
    a: &DMatrix<f64>,
    start: &DVector<f64>,
    dim: usize,
) -> (DMatrix<f64>, DVector<f64>, Vec<f64>) {
    let n = a.nrows();
    let mut q = DMatrix::zeros(n, dim);
    let mut alpha = Vec::with_capacity(dim);
    let mut beta = Vec::with_capacity(dim);
    q.set_column(0, &start.normalize());
    for j in 0..dim {
        let qj = q.column(j).into_owned();
        let mut w = a * &qj;
        let aj = qj.dot(&w);
        alpha.push(aj);
        // Two passes of classical Gram-Schmidt against the whole basis.
        for _ in 0..2 {
            let basis = q.columns(0, j + 1);
            let coeffs = basis.transpose() * &w;
            w -= basis * coeffs;
        }
        let b = w.norm();
        beta.push(b);
        if j + 1 == dim {
            break;
        }
        if b <= 1e-14 * (1.0 + aj.abs()) {
            // Invariant subspace found.
            let m = j + 1;
            return (q.columns(0, m).into_owned(), DVector::from_vec(alpha), beta);
        }
        q.set_column(j + 1, &(w / b));
    }
    (q, DVector::from_vec(alpha), beta)
}
