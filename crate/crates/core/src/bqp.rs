//! Second-order moment relaxations of binary quadratic programs
//! `min x^T Q x + c^T x` over `x in {-1, 1}^q`, dense or with a chain of
//! overlapping cliques, plus a seeded generator and an exhaustive oracle.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::BlockSymMatrix;
use crate::operator::LinearOperator;
use crate::problem::Problem;

/// Largest variable count accepted by [`brute_force`].
pub const BRUTE_FORCE_MAX_VARS: usize = 26;

/// Square-free monomial as a strictly increasing list of variable indices.
pub type Monomial = Vec<u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BqpKind {
    Dense,
    Sparse,
}

impl std::str::FromStr for BqpKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "sparse" => Ok(Self::Sparse),
            other => Err(Error::InvalidParameter(format!(
                "unknown instance kind {other:?} (expected dense or sparse)"
            ))),
        }
    }
}

/// One clique's local objective `x_k^T Q_k x_k + c_k^T x_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CliqueObjective {
    pub q_mat: DMatrix<f64>,
    pub c: DVector<f64>,
}

/// Dense instances have a single clique covering all `q` variables. Sparse
/// clique `k` covers variables `(q-2)k .. (q-2)k + q`, so consecutive cliques
/// share two variables.
#[derive(Debug, Clone, PartialEq)]
pub struct BqpInstance {
    kind: BqpKind,
    q: usize,
    cliques: Vec<CliqueObjective>,
    seed: Option<u64>,
}

impl BqpInstance {
    pub fn dense(q_mat: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        let q = q_mat.nrows();
        let inst = Self {
            kind: BqpKind::Dense,
            q,
            cliques: vec![CliqueObjective { q_mat, c }],
            seed: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn sparse(q: usize, cliques: Vec<CliqueObjective>) -> Result<Self> {
        let inst = Self {
            kind: BqpKind::Sparse,
            q,
            cliques,
            seed: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        let q = self.q;
        match self.kind {
            BqpKind::Dense if q < 2 => {
                return Err(Error::InvalidParameter(format!(
                    "dense instances need q >= 2, got {q}"
                )))
            }
            BqpKind::Dense if self.cliques.len() != 1 => {
                return Err(Error::InvalidData(
                    "dense instance must have one objective".into(),
                ))
            }
            BqpKind::Sparse if q < 3 || self.cliques.is_empty() => {
                return Err(Error::InvalidParameter(format!(
                    "sparse instances need q >= 3 and t >= 1, got q = {q}, t = {}",
                    self.cliques.len()
                )))
            }
            _ => {}
        }
        for (k, cl) in self.cliques.iter().enumerate() {
            if cl.q_mat.shape() != (q, q) || cl.c.len() != q {
                return Err(Error::Dimension(format!(
                    "clique {k}: Q is {:?} and c has length {}, expected q = {q}",
                    cl.q_mat.shape(),
                    cl.c.len()
                )));
            }
            if cl.q_mat != cl.q_mat.transpose() {
                return Err(Error::InvalidData(format!(
                    "clique {k}: Q is not symmetric"
                )));
            }
            if cl.q_mat.iter().chain(cl.c.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("clique {k} objective")));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> BqpKind {
        self.kind
    }

    /// Clique size (the variable count for dense instances).
    pub fn q(&self) -> usize {
        self.q
    }

    /// Clique count; 1 for dense instances.
    pub fn t(&self) -> usize {
        self.cliques.len()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn cliques(&self) -> &[CliqueObjective] {
        &self.cliques
    }

    pub fn num_vars(&self) -> usize {
        match self.kind {
            BqpKind::Dense => self.q,
            BqpKind::Sparse => (self.q - 2) * self.t() + 2,
        }
    }

    /// Global indices of the variables in clique `k`.
    pub fn clique_vars(&self, k: usize) -> Range<usize> {
        match self.kind {
            BqpKind::Dense => 0..self.q,
            BqpKind::Sparse => {
                let start = (self.q - 2) * k;
                start..start + self.q
            }
        }
    }

    /// Global `(Q, c)` with overlapping clique terms summed.
    pub fn assembled(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.num_vars();
        let mut q_mat = DMatrix::zeros(n, n);
        let mut c = DVector::zeros(n);
        for (k, cl) in self.cliques.iter().enumerate() {
            let s = self.clique_vars(k).start;
            let mut view = q_mat.view_mut((s, s), (self.q, self.q));
            view += &cl.q_mat;
            let mut cv = c.rows_mut(s, self.q);
            cv += &cl.c;
        }
        (q_mat, c)
    }

    /// Objective at a sign vector.
    pub fn objective(&self, x: &[f64]) -> f64 {
        self.cliques
            .iter()
            .enumerate()
            .map(|(k, cl)| {
                let xs = DVector::from_column_slice(&x[self.clique_vars(k)]);
                xs.dot(&(&cl.q_mat * &xs)) + cl.c.dot(&xs)
            })
            .sum()
    }

    pub fn to_file(&self) -> BqpFile {
        let tri = |m: &DMatrix<f64>| {
            let n = m.nrows();
            (0..n)
                .flat_map(|i| (i..n).map(move |j| (i, j)))
                .map(|(i, j)| m[(i, j)])
                .collect::<Vec<_>>()
        };
        let (q_field, c_field) = match self.kind {
            BqpKind::Dense => (
                Nested::Flat(tri(&self.cliques[0].q_mat)),
                Nested::Flat(self.cliques[0].c.as_slice().to_vec()),
            ),
            BqpKind::Sparse => (
                Nested::PerClique(self.cliques.iter().map(|c| tri(&c.q_mat)).collect()),
                Nested::PerClique(
                    self.cliques
                        .iter()
                        .map(|c| c.c.as_slice().to_vec())
                        .collect(),
                ),
            ),
        };
        BqpFile {
            kind: self.kind,
            q: self.q,
            t: match self.kind {
                BqpKind::Dense => None,
                BqpKind::Sparse => Some(self.t()),
            },
            q_mat: q_field,
            c: c_field,
            seed: self.seed,
        }
    }

    pub fn from_file(file: BqpFile) -> Result<Self> {
        let q = file.q;
        let tri_len = q * (q + 1) / 2;
        let mirror = |v: &[f64]| -> Result<DMatrix<f64>> {
            if v.len() != tri_len {
                return Err(Error::Dimension(format!(
                    "upper triangle has {} entries, expected {tri_len} for q = {q}",
                    v.len()
                )));
            }
            let mut m = DMatrix::zeros(q, q);
            let mut it = v.iter();
            for i in 0..q {
                for j in i..q {
                    let x = *it.next().unwrap();
                    m[(i, j)] = x;
                    m[(j, i)] = x;
                }
            }
            Ok(m)
        };
        let inst = match (file.kind, file.q_mat, file.c) {
            (BqpKind::Dense, Nested::Flat(qv), Nested::Flat(cv)) => {
                Self::dense(mirror(&qv)?, DVector::from_vec(cv))?
            }
            (BqpKind::Sparse, Nested::PerClique(qs), Nested::PerClique(cs)) => {
                if qs.len() != cs.len() || file.t.is_some_and(|t| t != qs.len()) {
                    return Err(Error::Dimension(format!(
                        "sparse instance lists {} Q blocks and {} c vectors (t = {:?})",
                        qs.len(),
                        cs.len(),
                        file.t
                    )));
                }
                let cliques = qs
                    .iter()
                    .zip(cs)
                    .map(|(qv, cv)| {
                        Ok(CliqueObjective {
                            q_mat: mirror(qv)?,
                            c: DVector::from_vec(cv),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::sparse(q, cliques)?
            }
            (kind, _, _) => {
                return Err(Error::InvalidData(format!(
                    "{kind:?} instance has Q/c nesting inconsistent with its kind"
                )))
            }
        };
        Ok(inst.with_seed(file.seed))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }
}

/// One flat list (dense) or one list per clique (sparse).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Nested {
    Flat(Vec<f64>),
    PerClique(Vec<Vec<f64>>),
}

/// On-disk instance; `Q` holds row-major upper triangles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BqpFile {
    pub kind: BqpKind,
    pub q: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(rename = "Q")]
    pub q_mat: Nested,
    pub c: Nested,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Bijection between square-free monomials and contiguous ids.
#[derive(Debug, Clone, Default)]
pub struct MonomialIndex {
    monomials: Vec<Monomial>,
    ids: HashMap<Monomial, usize>,
}

impl MonomialIndex {
    /// Index over `monomials`, sorted into graded lexicographic order.
    pub fn new(mut monomials: Vec<Monomial>) -> Self {
        monomials.sort_by(graded_lex);
        monomials.dedup();
        let ids = monomials
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Self { monomials, ids }
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn id(&self, m: &[u32]) -> Option<usize> {
        self.ids.get(m).copied()
    }

    pub fn monomial(&self, id: usize) -> &[u32] {
        &self.monomials[id]
    }

    pub fn monomials(&self) -> &[Monomial] {
        &self.monomials
    }
}

pub fn graded_lex(a: &Monomial, b: &Monomial) -> std::cmp::Ordering {
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

/// All square-free monomials of degree `<= max_deg` in `vars`, graded lex.
pub fn monomials_upto(vars: &[u32], max_deg: usize) -> Vec<Monomial> {
    fn rec(vars: &[u32], start: usize, left: usize, cur: &mut Monomial, out: &mut Vec<Monomial>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for i in start..vars.len() {
            cur.push(vars[i]);
            rec(vars, i + 1, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut sorted = vars.to_vec();
    sorted.sort_unstable();
    let mut out = Vec::new();
    for d in 0..=max_deg.min(sorted.len()) {
        rec(&sorted, 0, d, &mut Vec::new(), &mut out);
    }
    out
}

/// Product modulo `x_i^2 = 1`: the symmetric difference of index sets.
pub fn reduced_product(a: &[u32], b: &[u32]) -> Monomial {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(a.len() + b.len());
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Basis `v(x)` of clique `k` (degree <= 2, graded lex, global indices).
pub fn clique_basis(inst: &BqpInstance, k: usize) -> Vec<Monomial> {
    let vars: Vec<u32> = inst.clique_vars(k).map(|v| v as u32).collect();
    monomials_upto(&vars, 2)
}

/// Constraint index: every degree `<= 4` monomial supported in some clique.
pub fn constraint_index(inst: &BqpInstance) -> MonomialIndex {
    let mut all = Vec::new();
    for k in 0..inst.t() {
        let vars: Vec<u32> = inst.clique_vars(k).map(|v| v as u32).collect();
        all.extend(monomials_upto(&vars, 4));
    }
    MonomialIndex::new(all)
}

/// `x^a` for every constraint monomial `a`.
pub fn moment_vector(index: &MonomialIndex, x: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        index.len(),
        index
            .monomials()
            .iter()
            .map(|m| m.iter().map(|&i| x[i as usize]).product::<f64>()),
    )
}

/// `v(x)` for clique `k`.
pub fn basis_vector(inst: &BqpInstance, k: usize, x: &[f64]) -> DVector<f64> {
    let basis = clique_basis(inst, k);
    DVector::from_iterator(
        basis.len(),
        basis
            .iter()
            .map(|m| m.iter().map(|&i| x[i as usize]).product::<f64>()),
    )
}

/// Moment relaxation of a dense instance: one block, `C = 0`.
pub fn relax_dense(inst: &BqpInstance) -> Result<Problem> {
    if inst.kind() != BqpKind::Dense {
        return Err(Error::InvalidParameter(
            "relax_dense needs a dense instance".into(),
        ));
    }
    relax(inst)
}

/// Moment relaxation over the clique chain: one block per clique, one shared
/// constraint per monomial.
pub fn relax_sparse(inst: &BqpInstance) -> Result<Problem> {
    if inst.kind() != BqpKind::Sparse {
        return Err(Error::InvalidParameter(
            "relax_sparse needs a sparse instance".into(),
        ));
    }
    relax(inst)
}

/// Dispatches on the instance kind.
pub fn relax(inst: &BqpInstance) -> Result<Problem> {
    let index = constraint_index(inst);
    let mut constraints: Vec<Vec<(usize, usize, usize, f64)>> = vec![Vec::new(); index.len()];
    let mut block_sizes = Vec::with_capacity(inst.t());
    for k in 0..inst.t() {
        let basis = clique_basis(inst, k);
        block_sizes.push(basis.len());
        for (r, a) in basis.iter().enumerate() {
            for (c, b) in basis.iter().enumerate().skip(r) {
                let id = index
                    .id(&reduced_product(a, b))
                    .expect("products of clique basis elements lie in the clique");
                constraints[id].push((k, r, c, 1.0));
            }
        }
    }
    let b = reduced_objective(inst, &index);
    let op = LinearOperator::from_entries(block_sizes.clone(), constraints)?;
    let metadata = serde_json::json!({
        "source": "bqp",
        "kind": inst.kind(),
        "q": inst.q(),
        "t": inst.t(),
        "num_vars": inst.num_vars(),
        "seed": inst.seed(),
    });
    Problem::new(op, b, BlockSymMatrix::zeros(&block_sizes), Some(metadata))
}

/// Coefficients of the objective reduced modulo `x_i^2 = 1`, per constraint monomial.
pub fn reduced_objective(inst: &BqpInstance, index: &MonomialIndex) -> DVector<f64> {
    let mut b = DVector::zeros(index.len());
    let one = index.id(&[]).expect("constant monomial present");
    for (k, cl) in inst.cliques().iter().enumerate() {
        let vars: Vec<u32> = inst.clique_vars(k).map(|v| v as u32).collect();
        for i in 0..inst.q() {
            b[one] += cl.q_mat[(i, i)];
            b[index.id(&[vars[i]]).unwrap()] += cl.c[i];
            for j in i + 1..inst.q() {
                b[index.id(&[vars[i], vars[j]]).unwrap()] += 2.0 * cl.q_mat[(i, j)];
            }
        }
    }
    b
}

/// Seeded instance: per clique, the upper triangle of `Q` row by row, then `c`,
/// all i.i.d. standard normal.
pub fn gen_random(kind: BqpKind, q: usize, t: usize, seed: u64) -> Result<BqpInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let mut m = DMatrix::zeros(q, q);
        for i in 0..q {
            for j in i..q {
                let v: f64 = rng.sample(StandardNormal);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let c = DVector::from_fn(q, |_, _| rng.sample(StandardNormal));
        CliqueObjective { q_mat: m, c }
    };
    let inst = match kind {
        BqpKind::Dense => {
            let cl = draw();
            BqpInstance::dense(cl.q_mat, cl.c)?
        }
        BqpKind::Sparse => {
            if q < 3 || t < 1 {
                return Err(Error::InvalidParameter(format!(
                    "sparse instances need q >= 3 and t >= 1, got q = {q}, t = {t}"
                )));
            }
            BqpInstance::sparse(q, (0..t).map(|_| draw()).collect())?
        }
    };
    Ok(inst.with_seed(Some(seed)))
}

/// Exhaustive minimum over `{-1, 1}^N` by Gray-code enumeration. Ties go to
/// the lexicographically first vector with `+1` ordered before `-1`.
pub fn brute_force(inst: &BqpInstance) -> Result<(f64, Vec<f64>)> {
    let n = inst.num_vars();
    if n > BRUTE_FORCE_MAX_VARS {
        return Err(Error::TooLarge(format!(
            "{n} variables exceeds the brute-force limit of {BRUTE_FORCE_MAX_VARS}"
        )));
    }
    let (q_mat, c) = inst.assembled();
    let mut x = vec![1.0; n];
    // field[i] = 2 * sum_{l != i} Q_il x_l + c_i
    let mut field: Vec<f64> = (0..n)
        .map(|i| {
            2.0 * (0..n)
                .filter(|&l| l != i)
                .map(|l| q_mat[(i, l)])
                .sum::<f64>()
                + c[i]
        })
        .collect();
    let mut value = inst.objective(&x);
    // Bit i set means x_i = -1; variable 0 is the most significant for tie order.
    let key_bit = |i: usize| 1u64 << (n - 1 - i);
    let mut key = 0u64;
    let (mut best, mut best_key) = (value, 0u64);
    let tie_tol = 1e-12 * (1.0 + q_mat.abs().sum() + c.abs().sum());
    for step in 1u64..(1u64 << n) {
        let j = step.trailing_zeros() as usize;
        let xj = x[j];
        value -= 2.0 * xj * field[j];
        x[j] = -xj;
        key ^= key_bit(j);
        for (i, f) in field.iter_mut().enumerate() {
            if i != j {
                *f -= 4.0 * q_mat[(i, j)] * xj;
            }
        }
        if value < best - tie_tol || (value <= best + tie_tol && key < best_key) {
            best = value;
            best_key = key;
        }
    }
    let arg: Vec<f64> = (0..n)
        .map(|i| {
            if best_key & key_bit(i) != 0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    Ok((inst.objective(&arg), arg))
}
