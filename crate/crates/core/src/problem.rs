//! Dual-form SDP with unit diagonal constraints:
//! minimize `b^T y` subject to `S = A*(y) - C` PSD and `diag(S) = 1`.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::BlockSymMatrix;
use crate::operator::LinearOperator;

/// Problem instance. Immutable after construction.
#[derive(Debug)]
pub struct Problem {
    op: LinearOperator,
    b: DVector<f64>,
    c: BlockSymMatrix,
    /// `(AA*)^{-1} b`, so that `D = A*(d_coef)`.
    d_coef: DVector<f64>,
    d: OnceLock<BlockSymMatrix>,
    a_c: DVector<f64>,
    c_norm: f64,
    metadata: Option<serde_json::Value>,
}

impl Problem {
    pub fn new(
        op: LinearOperator,
        b: DVector<f64>,
        c: BlockSymMatrix,
        metadata: Option<serde_json::Value>,
    ) -> Result<Self> {
        if b.len() != op.m() {
            return Err(Error::Dimension(format!(
                "b has length {} but the operator has m = {}",
                b.len(),
                op.m()
            )));
        }
        if c.block_sizes() != op.block_sizes() {
            return Err(Error::Dimension(format!(
                "C has block sizes {:?}, operator has {:?}",
                c.block_sizes(),
                op.block_sizes()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("b".into()));
        }
        let d_coef = op.gram_solve(&b)?;
        let a_c = op.apply(&c)?;
        let c_norm = c.norm();
        Ok(Self {
            op,
            b,
            c,
            d_coef,
            d: OnceLock::new(),
            a_c,
            c_norm,
            metadata,
        })
    }

    pub fn op(&self) -> &LinearOperator {
        &self.op
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> &BlockSymMatrix {
        &self.c
    }

    /// `D = A*((AA*)^{-1} b)`, materialized on first use.
    pub fn d(&self) -> &BlockSymMatrix {
        self.d.get_or_init(|| {
            self.op
                .adjoint(&self.d_coef)
                .expect("d_coef has length m by construction")
        })
    }

    pub fn d_coef(&self) -> &DVector<f64> {
        &self.d_coef
    }

    /// `A(C)`.
    pub fn a_c(&self) -> &DVector<f64> {
        &self.a_c
    }

    pub fn c_norm(&self) -> f64 {
        self.c_norm
    }

    pub fn block_sizes(&self) -> &[usize] {
        self.op.block_sizes()
    }

    pub fn total_size(&self) -> usize {
        self.op.block_sizes().iter().sum()
    }

    pub fn m(&self) -> usize {
        self.op.m()
    }

    pub fn metadata(&self) -> Option<&serde_json::Value> {
        self.metadata.as_ref()
    }

    pub fn to_file(&self) -> ProblemFile {
        let nb = self.block_sizes().len();
        let a = self
            .op
            .constraint_entries()
            .into_iter()
            .map(|list| {
                let mut per_block = vec![Vec::new(); nb];
                for (k, r, c, v) in list {
                    per_block[k].push((r, c, v));
                }
                per_block
            })
            .collect();
        ProblemFile {
            block_sizes: self.block_sizes().to_vec(),
            m: self.m(),
            b: self.b.iter().copied().collect(),
            c: self.c.triplets(),
            a,
            metadata: self.metadata.clone(),
        }
    }

    pub fn from_file(file: ProblemFile) -> Result<Self> {
        let ProblemFile {
            block_sizes,
            m,
            b,
            c,
            a,
            metadata,
        } = file;
        if a.len() != m || b.len() != m {
            return Err(Error::Dimension(format!(
                "declared m = {m} but found {} constraints and {} right-hand sides",
                a.len(),
                b.len()
            )));
        }
        let nb = block_sizes.len();
        let lists = a
            .into_iter()
            .enumerate()
            .map(|(i, per_block)| {
                if per_block.len() != nb {
                    return Err(Error::Dimension(format!(
                        "constraint {i} lists {} blocks, expected {nb}",
                        per_block.len()
                    )));
                }
                Ok(per_block
                    .into_iter()
                    .enumerate()
                    .flat_map(|(k, t)| t.into_iter().map(move |(r, c, v)| (k, r, c, v)))
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let op = LinearOperator::from_entries(block_sizes.clone(), lists)?;
        let c = BlockSymMatrix::from_triplets(&block_sizes, c)?;
        Self::new(op, DVector::from_vec(b), c, metadata)
    }

    /// Reads and validates a problem file, including the invertibility of `AA*`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(&self.to_file())?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// `D = A*((AA*)^{-1} b)`.
pub fn compute_d(op: &LinearOperator, b: &DVector<f64>) -> Result<BlockSymMatrix> {
    op.adjoint(&op.gram_solve(b)?)
}

/// On-disk problem layout. Triplets are 0-indexed with `row <= col`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    pub block_sizes: Vec<usize>,
    pub m: usize,
    pub b: Vec<f64>,
    /// Per-block triplets of `C`.
    #[serde(rename = "C")]
    pub c: Vec<Vec<(usize, usize, f64)>>,
    /// Per-constraint, per-block triplets of `A_i`.
    #[serde(rename = "A")]
    pub a: Vec<Vec<Vec<(usize, usize, f64)>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}
