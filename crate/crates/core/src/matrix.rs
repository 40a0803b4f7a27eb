//! Block-diagonal symmetric matrices.
//!
//! A [`BlockSymMatrix`] is a direct sum of square symmetric blocks. Each block
//! is stored either densely (full symmetric storage) or as upper-triangular
//! coordinate triplets `(row, col, value)` with `row <= col`, where an
//! off-diagonal triplet stands for both mirrored entries.
//!
//! Inner products and norms are Frobenius over all blocks, so an off-diagonal
//! triplet contributes twice.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Blocks up to this size are always stored dense.
pub const DENSE_BLOCK_LIMIT: usize = 512;
/// Above [`DENSE_BLOCK_LIMIT`], blocks whose fill ratio exceeds this are stored dense.
pub const DENSE_FILL_RATIO: f64 = 0.25;

/// Upper-triangular coordinate storage of a symmetric block.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseSym {
    /// Validates and sorts the triplets. Duplicates and lower-triangular entries are rejected.
    pub fn new(n: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(r, c, v) in &entries {
            if r > c {
                return Err(Error::InvalidData(format!(
                    "triplet ({r}, {c}) is below the diagonal; expected row <= col"
                )));
            }
            if c >= n {
                return Err(Error::Dimension(format!(
                    "triplet ({r}, {c}) out of range for block of size {n}"
                )));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("triplet ({r}, {c})")));
            }
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        if let Some(w) = entries
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(Error::InvalidData(format!(
                "duplicate triplet at ({}, {})",
                w[0].0, w[0].1
            )));
        }
        Ok(Self { n, entries })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for &(r, c, v) in &self.entries {
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
        m
    }
}

/// One symmetric block.
#[derive(Debug, Clone, PartialEq)]
pub enum SymBlock {
    Dense(DMatrix<f64>),
    Sparse(SparseSym),
}

impl SymBlock {
    /// Builds a block from triplets, choosing storage by size and fill ratio.
    pub fn from_triplets(n: usize, entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        let sparse = SparseSym::new(n, entries)?;
        let upper = n * (n + 1) / 2;
        let fill = if upper == 0 {
            0.0
        } else {
            sparse.entries.len() as f64 / upper as f64
        };
        if n <= DENSE_BLOCK_LIMIT || fill > DENSE_FILL_RATIO {
            Ok(SymBlock::Dense(sparse.to_dense()))
        } else {
            Ok(SymBlock::Sparse(sparse))
        }
    }

    pub fn size(&self) -> usize {
        match self {
            SymBlock::Dense(m) => m.nrows(),
            SymBlock::Sparse(s) => s.n,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SymBlock::Dense(m) => m.clone(),
            SymBlock::Sparse(s) => s.to_dense(),
        }
    }

    /// Nonzero upper-triangular triplets.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        match self {
            SymBlock::Sparse(s) => s.entries.clone(),
            SymBlock::Dense(m) => {
                let n = m.nrows();
                let mut out = Vec::new();
                for c in 0..n {
                    for r in 0..=c {
                        let v = m[(r, c)];
                        if v != 0.0 {
                            out.push((r, c, v));
                        }
                    }
                }
                out.sort_by_key(|&(r, c, _)| (r, c));
                out
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            SymBlock::Dense(m) => m.iter().all(|&v| v == 0.0),
            SymBlock::Sparse(s) => s.entries.iter().all(|&(_, _, v)| v == 0.0),
        }
    }

    fn inner(&self, other: &SymBlock) -> f64 {
        match (self, other) {
            (SymBlock::Dense(a), SymBlock::Dense(b)) => a.dot(b),
            (SymBlock::Dense(d), SymBlock::Sparse(s))
            | (SymBlock::Sparse(s), SymBlock::Dense(d)) => s
                .entries
                .iter()
                .map(|&(r, c, v)| {
                    if r == c {
                        v * d[(r, c)]
                    } else {
                        2.0 * v * d[(r, c)]
                    }
                })
                .sum(),
            (SymBlock::Sparse(a), SymBlock::Sparse(b)) => {
                let (mut i, mut j, mut acc) = (0, 0, 0.0);
                while i < a.entries.len() && j < b.entries.len() {
                    let (ra, ca, va) = a.entries[i];
                    let (rb, cb, vb) = b.entries[j];
                    match (ra, ca).cmp(&(rb, cb)) {
                        std::cmp::Ordering::Less => i += 1,
                        std::cmp::Ordering::Greater => j += 1,
                        std::cmp::Ordering::Equal => {
                            acc += if ra == ca { va * vb } else { 2.0 * va * vb };
                            i += 1;
                            j += 1;
                        }
                    }
                }
                acc
            }
        }
    }

    /// `self * v` for a skinny dense `v`.
    pub fn mul_dense(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SymBlock::Dense(m) => m * v,
            SymBlock::Sparse(s) => {
                let mut out = DMatrix::zeros(s.n, v.ncols());
                for &(r, c, val) in &s.entries {
                    for j in 0..v.ncols() {
                        out[(r, j)] += val * v[(c, j)];
                        if r != c {
                            out[(c, j)] += val * v[(r, j)];
                        }
                    }
                }
                out
            }
        }
    }

    /// `dst += alpha * self`
    pub fn add_to_dense(&self, alpha: f64, dst: &mut DMatrix<f64>) {
        match self {
            SymBlock::Dense(m) => *dst += m * alpha,
            SymBlock::Sparse(s) => {
                for &(r, c, v) in &s.entries {
                    dst[(r, c)] += alpha * v;
                    if r != c {
                        dst[(c, r)] += alpha * v;
                    }
                }
            }
        }
    }
}

/// Block-diagonal symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSymMatrix {
    blocks: Vec<SymBlock>,
}

impl BlockSymMatrix {
    pub fn zeros(block_sizes: &[usize]) -> Self {
        Self {
            blocks: block_sizes
                .iter()
                .map(|&n| SymBlock::Dense(DMatrix::zeros(n, n)))
                .collect(),
        }
    }

    pub fn identity(block_sizes: &[usize]) -> Self {
        Self {
            blocks: block_sizes
                .iter()
                .map(|&n| SymBlock::Dense(DMatrix::identity(n, n)))
                .collect(),
        }
    }

    pub fn from_blocks(blocks: Vec<SymBlock>) -> Self {
        Self { blocks }
    }

    /// Wraps dense blocks, checking that each is square and symmetric.
    pub fn from_dense(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        for (k, b) in blocks.iter().enumerate() {
            if !b.is_square() {
                return Err(Error::Dimension(format!(
                    "block {k} is {}x{}, expected square",
                    b.nrows(),
                    b.ncols()
                )));
            }
            let n = b.nrows();
            for c in 0..n {
                for r in 0..c {
                    let (a, t) = (b[(r, c)], b[(c, r)]);
                    if (a - t).abs() > 1e-12 * (1.0 + a.abs().max(t.abs())) {
                        return Err(Error::InvalidData(format!(
                            "block {k} is not symmetric at ({r}, {c})"
                        )));
                    }
                }
            }
        }
        Ok(Self::from_dense_unchecked(blocks))
    }

    pub(crate) fn from_dense_unchecked(blocks: Vec<DMatrix<f64>>) -> Self {
        Self {
            blocks: blocks.into_iter().map(SymBlock::Dense).collect(),
        }
    }

    /// Builds from per-block triplet lists, choosing storage per block.
    pub fn from_triplets(
        block_sizes: &[usize],
        triplets: Vec<Vec<(usize, usize, f64)>>,
    ) -> Result<Self> {
        if triplets.len() != block_sizes.len() {
            return Err(Error::Dimension(format!(
                "{} triplet lists for {} blocks",
                triplets.len(),
                block_sizes.len()
            )));
        }
        let blocks = block_sizes
            .iter()
            .zip(triplets)
            .map(|(&n, t)| SymBlock::from_triplets(n, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[SymBlock] {
        &self.blocks
    }

    pub fn block(&self, k: usize) -> &SymBlock {
        &self.blocks[k]
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(SymBlock::size).collect()
    }

    pub fn total_size(&self) -> usize {
        self.blocks.iter().map(SymBlock::size).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(SymBlock::is_zero)
    }

    pub fn to_dense_blocks(&self) -> Vec<DMatrix<f64>> {
        self.blocks.iter().map(SymBlock::to_dense).collect()
    }

    /// Same matrix with every block stored dense.
    pub fn densify(&self) -> Self {
        Self::from_dense_unchecked(self.to_dense_blocks())
    }

    /// Same matrix with every block stored as nonzero triplets.
    pub fn sparsify(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    SymBlock::Sparse(SparseSym {
                        n: b.size(),
                        entries: b.triplets(),
                    })
                })
                .collect(),
        }
    }

    /// Per-block nonzero upper-triangular triplets.
    pub fn triplets(&self) -> Vec<Vec<(usize, usize, f64)>> {
        self.blocks.iter().map(SymBlock::triplets).collect()
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        let (a, b) = (self.block_sizes(), other.block_sizes());
        if a != b {
            return Err(Error::Dimension(format!(
                "block sizes {a:?} and {b:?} differ"
            )));
        }
        Ok(())
    }

    /// Frobenius inner product over all blocks.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.inner(b))
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.inner(b)).sum::<f64>().sqrt()
    }

    /// `self += alpha * x`; the result is stored dense.
    pub fn axpy(&mut self, alpha: f64, x: &Self) -> Result<()> {
        self.check_same_shape(x)?;
        for (dst, src) in self.blocks.iter_mut().zip(&x.blocks) {
            let mut d = match std::mem::replace(dst, SymBlock::Dense(DMatrix::zeros(0, 0))) {
                SymBlock::Dense(m) => m,
                SymBlock::Sparse(s) => s.to_dense(),
            };
            src.add_to_dense(alpha, &mut d);
            *dst = SymBlock::Dense(d);
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for b in &mut self.blocks {
            match b {
                SymBlock::Dense(m) => *m *= alpha,
                SymBlock::Sparse(s) => s.entries.iter_mut().for_each(|e| e.2 *= alpha),
            }
        }
    }

    /// Diagonal of every block, concatenated.
    pub fn diag(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.total_size());
        for b in &self.blocks {
            match b {
                SymBlock::Dense(m) => out.extend(m.diagonal().iter().copied()),
                SymBlock::Sparse(s) => {
                    let mut d = vec![0.0; s.n];
                    for &(r, c, v) in &s.entries {
                        if r == c {
                            d[r] = v;
                        }
                    }
                    out.extend(d);
                }
            }
        }
        DVector::from_vec(out)
    }

    /// `self - Diag(z)` with `z` concatenated over blocks; the result is dense.
    pub fn sub_diag(&self, z: &DVector<f64>) -> Result<Self> {
        if z.len() != self.total_size() {
            return Err(Error::Dimension(format!(
                "diagonal of length {} for total size {}",
                z.len(),
                self.total_size()
            )));
        }
        let mut off = 0;
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let mut d = b.to_dense();
                for i in 0..d.nrows() {
                    d[(i, i)] -= z[off + i];
                }
                off += d.nrows();
                d
            })
            .collect();
        Ok(Self::from_dense_unchecked(blocks))
    }
}

/// Index sets used by the caller to check for repeated positions.
pub(crate) fn has_duplicates(entries: &[(usize, usize, usize)]) -> Option<(usize, usize, usize)> {
    let mut seen = HashSet::with_capacity(entries.len());
    entries.iter().copied().find(|e| !seen.insert(*e))
}
