//! The constraint operator `A(X) = (<A_i, X>)_i`, its adjoint, and the
//! factorized Gram map `(AA*)^{-1}`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{has_duplicates, BlockSymMatrix, SymBlock};

/// Pivots of the Gram Cholesky factor below this (relative to the largest
/// Gram diagonal) are treated as a rank deficiency.
const GRAM_PIVOT_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    block: u32,
    row: u32,
    col: u32,
    val: f64,
}

impl Entry {
    #[inline]
    fn weight(&self) -> f64 {
        if self.row == self.col {
            self.val
        } else {
            2.0 * self.val
        }
    }
}

/// Factorization of `AA*`.
#[derive(Debug, Clone)]
pub enum GramFactor {
    /// `AA*` is diagonal; stores its diagonal.
    Diagonal(DVector<f64>),
    Cholesky(Cholesky<f64, Dyn>),
}

/// `m` sparse symmetric constraint matrices sharing one block structure.
#[derive(Debug, Clone)]
pub struct LinearOperator {
    block_sizes: Vec<usize>,
    ptr: Vec<usize>,
    entries: Vec<Entry>,
    gram: GramFactor,
}

impl LinearOperator {
    /// Builds the operator from per-constraint `(block, row, col, value)`
    /// lists (upper triangle, `row <= col`) and factorizes `AA*`.
    pub fn from_entries(
        block_sizes: Vec<usize>,
        constraints: Vec<Vec<(usize, usize, usize, f64)>>,
    ) -> Result<Self> {
        if block_sizes.is_empty() || block_sizes.contains(&0) {
            return Err(Error::Dimension(format!(
                "block sizes must be positive, got {block_sizes:?}"
            )));
        }
        let mut ptr = Vec::with_capacity(constraints.len() + 1);
        let mut entries = Vec::with_capacity(constraints.iter().map(Vec::len).sum());
        ptr.push(0);
        for (i, list) in constraints.iter().enumerate() {
            for &(k, r, c, v) in list {
                let n = *block_sizes.get(k).ok_or_else(|| {
                    Error::Dimension(format!("constraint {i} refers to block {k}"))
                })?;
                if r > c || c >= n {
                    return Err(Error::InvalidData(format!(
                        "constraint {i}: triplet ({r}, {c}) invalid for block {k} of size {n}"
                    )));
                }
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("constraint {i}")));
                }
                entries.push(Entry {
                    block: k as u32,
                    row: r as u32,
                    col: c as u32,
                    val: v,
                });
            }
            let keys: Vec<_> = list.iter().map(|&(k, r, c, _)| (k, r, c)).collect();
            if let Some(d) = has_duplicates(&keys) {
                return Err(Error::InvalidData(format!(
                    "constraint {i}: duplicate triplet {d:?}"
                )));
            }
            ptr.push(entries.len());
        }
        let gram = factorize_gram(&ptr, &entries)?;
        Ok(Self {
            block_sizes,
            ptr,
            entries,
            gram,
        })
    }

    /// Builds the operator from constraint matrices.
    pub fn new(block_sizes: Vec<usize>, mats: &[BlockSymMatrix]) -> Result<Self> {
        let mut lists = Vec::with_capacity(mats.len());
        for (i, a) in mats.iter().enumerate() {
            if a.block_sizes() != block_sizes {
                return Err(Error::Dimension(format!(
                    "constraint {i} has block sizes {:?}, expected {block_sizes:?}",
                    a.block_sizes()
                )));
            }
            let mut list = Vec::new();
            for (k, trips) in a.triplets().into_iter().enumerate() {
                list.extend(trips.into_iter().map(|(r, c, v)| (k, r, c, v)));
            }
            lists.push(list);
        }
        Self::from_entries(block_sizes, lists)
    }

    pub fn m(&self) -> usize {
        self.ptr.len() - 1
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn gram_factor(&self) -> &GramFactor {
        &self.gram
    }

    pub fn is_gram_diagonal(&self) -> bool {
        matches!(self.gram, GramFactor::Diagonal(_))
    }

    fn constraint(&self, i: usize) -> &[Entry] {
        &self.entries[self.ptr[i]..self.ptr[i + 1]]
    }

    /// Constraint matrix `A_i`, sparse storage.
    pub fn mat(&self, i: usize) -> BlockSymMatrix {
        let mut trips = vec![Vec::new(); self.block_sizes.len()];
        for e in self.constraint(i) {
            trips[e.block as usize].push((e.row as usize, e.col as usize, e.val));
        }
        BlockSymMatrix::from_blocks(
            self.block_sizes
                .iter()
                .zip(trips)
                .map(|(&n, t)| {
                    SymBlock::Sparse(
                        crate::matrix::SparseSym::new(n, t).expect("validated at construction"),
                    )
                })
                .collect(),
        )
    }

    /// Per-constraint `(block, row, col, value)` lists.
    pub fn constraint_entries(&self) -> Vec<Vec<(usize, usize, usize, f64)>> {
        (0..self.m())
            .map(|i| {
                self.constraint(i)
                    .iter()
                    .map(|e| (e.block as usize, e.row as usize, e.col as usize, e.val))
                    .collect()
            })
            .collect()
    }

    fn check_blocks(&self, sizes: &[usize]) -> Result<()> {
        if sizes != self.block_sizes.as_slice() {
            return Err(Error::Dimension(format!(
                "matrix block sizes {sizes:?} do not match operator {:?}",
                self.block_sizes
            )));
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.m() {
            return Err(Error::Dimension(format!(
                "vector of length {len} for operator with m = {}",
                self.m()
            )));
        }
        Ok(())
    }

    /// `A(X)`.
    pub fn apply(&self, x: &BlockSymMatrix) -> Result<DVector<f64>> {
        self.check_blocks(&x.block_sizes())?;
        if x.blocks().iter().all(|b| matches!(b, SymBlock::Dense(_))) {
            let dense: Vec<&DMatrix<f64>> = x
                .blocks()
                .iter()
                .map(|b| match b {
                    SymBlock::Dense(m) => m,
                    SymBlock::Sparse(_) => unreachable!(),
                })
                .collect();
            return Ok(self.apply_dense_refs(&dense));
        }
        let lookup: Vec<std::collections::HashMap<(u32, u32), f64>> = x
            .blocks()
            .iter()
            .map(|b| match b {
                SymBlock::Sparse(s) => s
                    .entries()
                    .iter()
                    .map(|&(r, c, v)| ((r as u32, c as u32), v))
                    .collect(),
                SymBlock::Dense(_) => Default::default(),
            })
            .collect();
        let out = (0..self.m())
            .map(|i| {
                self.constraint(i)
                    .iter()
                    .map(|e| {
                        let v = match x.block(e.block as usize) {
                            SymBlock::Dense(m) => m[(e.row as usize, e.col as usize)],
                            SymBlock::Sparse(_) => lookup[e.block as usize]
                                .get(&(e.row, e.col))
                                .copied()
                                .unwrap_or(0.0),
                        };
                        e.weight() * v
                    })
                    .sum()
            })
            .collect::<Vec<f64>>();
        Ok(DVector::from_vec(out))
    }

    /// `A(X)` for dense blocks.
    pub fn apply_dense(&self, x: &[DMatrix<f64>]) -> DVector<f64> {
        let refs: Vec<&DMatrix<f64>> = x.iter().collect();
        self.apply_dense_refs(&refs)
    }

    fn apply_dense_refs(&self, x: &[&DMatrix<f64>]) -> DVector<f64> {
        let out: Vec<f64> = (0..self.m())
            .into_par_iter()
            .with_min_len(256)
            .map(|i| {
                self.constraint(i)
                    .iter()
                    .map(|e| e.weight() * x[e.block as usize][(e.row as usize, e.col as usize)])
                    .sum()
            })
            .collect();
        DVector::from_vec(out)
    }

    /// `A(a b^T)` for per-block skinny factors without forming `a b^T`.
    ///
    /// Since every `A_i` is symmetric this also equals `A(b a^T)`.
    pub fn apply_product(&self, a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> DVector<f64> {
        let at: Vec<DMatrix<f64>> = a.iter().map(|m| m.transpose()).collect();
        let bt: Vec<DMatrix<f64>> = b.iter().map(|m| m.transpose()).collect();
        let out: Vec<f64> = (0..self.m())
            .into_par_iter()
            .with_min_len(256)
            .map(|i| {
                self.constraint(i)
                    .iter()
                    .map(|e| {
                        let (k, r, c) = (e.block as usize, e.row as usize, e.col as usize);
                        if r == c {
                            e.val * at[k].column(r).dot(&bt[k].column(r))
                        } else {
                            e.val
                                * (at[k].column(r).dot(&bt[k].column(c))
                                    + at[k].column(c).dot(&bt[k].column(r)))
                        }
                    })
                    .sum()
            })
            .collect();
        DVector::from_vec(out)
    }

    /// `A*(y) = sum_i y_i A_i`, dense blocks.
    pub fn adjoint(&self, y: &DVector<f64>) -> Result<BlockSymMatrix> {
        self.check_len(y.len())?;
        let mut blocks: Vec<DMatrix<f64>> = self
            .block_sizes
            .iter()
            .map(|&n| DMatrix::zeros(n, n))
            .collect();
        for i in 0..self.m() {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            for e in self.constraint(i) {
                let (r, c) = (e.row as usize, e.col as usize);
                let m = &mut blocks[e.block as usize];
                m[(r, c)] += yi * e.val;
                if r != c {
                    m[(c, r)] += yi * e.val;
                }
            }
        }
        Ok(BlockSymMatrix::from_dense_unchecked(blocks))
    }

    /// `A*(y) V` per block for skinny `V`, without forming `A*(y)`.
    pub fn adjoint_mul(&self, y: &DVector<f64>, v: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let vt: Vec<DMatrix<f64>> = v.iter().map(|m| m.transpose()).collect();
        let mut outt: Vec<DMatrix<f64>> = vt
            .iter()
            .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
            .collect();
        for i in 0..self.m() {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            for e in self.constraint(i) {
                let (k, r, c) = (e.block as usize, e.row as usize, e.col as usize);
                let coef = yi * e.val;
                let (src, dst) = (&vt[k], &mut outt[k]);
                for j in 0..src.nrows() {
                    dst[(j, r)] += coef * src[(j, c)];
                }
                if r != c {
                    for j in 0..src.nrows() {
                        dst[(j, c)] += coef * src[(j, r)];
                    }
                }
            }
        }
        outt.into_iter().map(|m| m.transpose()).collect()
    }

    /// Solves `(AA*) w = v`.
    pub fn gram_solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(v.len())?;
        Ok(match &self.gram {
            GramFactor::Diagonal(d) => v.component_div(d),
            GramFactor::Cholesky(ch) => ch.solve(v),
        })
    }

    /// `(AA*) w`, computed through the operator.
    pub fn gram_apply(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let x = self.adjoint(w)?;
        self.apply(&x)
    }

    /// Dense `AA*` from pairwise inner products `<A_i, A_j>`.
    pub fn gram_matrix(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.m(), self.m());
        for (key, group) in position_groups(&self.ptr, &self.entries) {
            let w = if key.1 == key.2 { 1.0 } else { 2.0 };
            for &(i, vi) in &group {
                for &(j, vj) in &group {
                    g[(i, j)] += w * vi * vj;
                }
            }
        }
        g
    }
}

type Position = (u32, u32, u32);

/// Groups operator entries by matrix position.
fn position_groups(ptr: &[usize], entries: &[Entry]) -> Vec<(Position, Vec<(usize, f64)>)> {
    let mut flat: Vec<(Position, usize, f64)> = Vec::with_capacity(entries.len());
    for i in 0..ptr.len() - 1 {
        for e in &entries[ptr[i]..ptr[i + 1]] {
            flat.push(((e.block, e.row, e.col), i, e.val));
        }
    }
    flat.sort_by_key(|&(p, i, _)| (p, i));
    let mut groups: Vec<(Position, Vec<(usize, f64)>)> = Vec::new();
    for (p, i, v) in flat {
        match groups.last_mut() {
            Some((q, g)) if *q == p => g.push((i, v)),
            _ => groups.push((p, vec![(i, v)])),
        }
    }
    groups
}

fn factorize_gram(ptr: &[usize], entries: &[Entry]) -> Result<GramFactor> {
    let m = ptr.len() - 1;
    let groups = position_groups(ptr, entries);
    let mut diag = DVector::zeros(m);
    let mut off: Vec<(usize, usize, f64)> = Vec::new();
    for ((_, r, c), group) in &groups {
        let w = if r == c { 1.0 } else { 2.0 };
        for (a, &(i, vi)) in group.iter().enumerate() {
            diag[i] += w * vi * vi;
            for &(j, vj) in &group[a + 1..] {
                off.push((i, j, w * vi * vj));
            }
        }
    }
    // Off-diagonal sums may cancel; accumulate before deciding.
    off.sort_by_key(|&(i, j, _)| (i, j));
    let mut merged: Vec<(usize, usize, f64)> = Vec::new();
    for (i, j, v) in off {
        match merged.last_mut() {
            Some(last) if (last.0, last.1) == (i, j) => last.2 += v,
            _ => merged.push((i, j, v)),
        }
    }
    merged.retain(|&(_, _, v)| v != 0.0);

    if merged.is_empty() {
        if let Some(i) = diag.iter().position(|&d| d <= 0.0) {
            return Err(Error::RankDeficient(format!(
                "AA* is diagonal but constraint {i} is the zero matrix (numerical rank {} of {m})",
                diag.iter().filter(|&&d| d > 0.0).count()
            )));
        }
        return Ok(GramFactor::Diagonal(diag));
    }

    let mut g = DMatrix::from_diagonal(&diag);
    for (i, j, v) in merged {
        g[(i, j)] += v;
        g[(j, i)] += v;
    }
    let scale = diag.max();
    let chol = Cholesky::new(g.clone());
    let ok = chol.as_ref().is_some_and(|ch| {
        let l = ch.l_dirty();
        (0..m).all(|i| l[(i, i)] * l[(i, i)] > GRAM_PIVOT_RTOL * scale)
    });
    match chol {
        Some(ch) if ok => Ok(GramFactor::Cholesky(ch)),
        _ => Err(Error::RankDeficient(describe_deficiency(g, scale))),
    }
}

fn describe_deficiency(g: DMatrix<f64>, scale: f64) -> String {
    let m = g.nrows();
    let eig = SymmetricEigen::new(g);
    let thresh = GRAM_PIVOT_RTOL.sqrt() * scale.max(f64::MIN_POSITIVE);
    let rank = eig.eigenvalues.iter().filter(|&&l| l > thresh).count();
    let (imin, lmin) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, 0.0));
    let null = eig.eigenvectors.column(imin);
    let mut involved: Vec<(usize, f64)> = null.iter().copied().enumerate().collect();
    involved.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    let names: Vec<String> = involved
        .iter()
        .take_while(|(_, v)| v.abs() > 1e-3)
        .take(8)
        .map(|(i, _)| i.to_string())
        .collect();
    format!(
        "AA* has numerical rank {rank} of {m}; smallest eigenvalue {lmin:e}; \
         near-dependent constraints: [{}]",
        names.join(", ")
    )
}
