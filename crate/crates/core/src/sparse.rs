//! Sparse symmetric storage, zero-fill incomplete Cholesky, low-rank-update
//! (Woodbury) solves, and extreme eigenvalues of symmetric operators.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::vecops::{axpy, dot, norm2, scale};

/// Problem sizes up to this use a dense symmetric eigendecomposition;
/// larger operators fall back to Lanczos with full reorthogonalization.
pub const DENSE_EIG_THRESHOLD: usize = 2000;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("matrix dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("entry ({i},{j}) outside a {n}x{n} matrix")]
    IndexOutOfRange { i: usize, j: usize, n: usize },
    #[error("incomplete Cholesky breakdown at pivot {pivot} even with diagonal shift {shift:.3e}")]
    IcholBreakdown { pivot: usize, shift: f64 },
    #[error("nonpositive diagonal entry at {index}")]
    NonpositiveDiagonal { index: usize },
    #[error("update coefficient {index} is zero; capacitance matrix undefined")]
    ZeroUpdateCoefficient { index: usize },
    #[error("singular capacitance matrix in Woodbury solve (condition estimate {cond:.3e})")]
    SingularCapacitance { cond: f64 },
    #[error("Lanczos did not converge within {iters} iterations; best estimates {best:?}")]
    LanczosNoConvergence { iters: usize, best: Vec<f64> },
}

/// Symmetric sparse matrix in CSR form with the full (mirrored) pattern
/// stored. Construction mirrors every entry so that the pattern and values
/// are symmetric exactly, and every diagonal entry is present.
#[derive(Debug, Clone)]
pub struct SparseSym {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSym {
    /// Builds from triplets of one triangle (or both); each off-diagonal
    /// entry is mirrored, duplicate positions are summed, and missing
    /// diagonal entries are stored as explicit zeros.
    pub fn from_triplets(
        n: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, SparseError> {
        let mut rows: Vec<std::collections::BTreeMap<usize, f64>> =
            vec![std::collections::BTreeMap::new(); n];
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(SparseError::IndexOutOfRange { i, j, n });
            }
            *rows[i].entry(j).or_insert(0.0) += v;
            if i != j {
                *rows[j].entry(i).or_insert(0.0) += v;
            }
        }
        for (i, row) in rows.iter_mut().enumerate() {
            row.entry(i).or_insert(0.0);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in &rows {
            for (&j, &v) in row {
                col_idx.push(j);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self { n, row_ptr, col_idx, vals })
    }

    pub fn identity(n: usize) -> Self {
        let t: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, &t).unwrap()
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let t: Vec<_> = d.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
        Self::from_triplets(d.len(), &t).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(pos) => self.vals[lo + pos],
            Err(_) => 0.0,
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Returns a copy with `alpha` added to every diagonal entry.
    pub fn with_diag_shift(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for i in 0..out.n {
            let lo = out.row_ptr[i];
            let hi = out.row_ptr[i + 1];
            let pos = out.col_idx[lo..hi]
                .binary_search(&i)
                .expect("diagonal entry always present");
            out.vals[lo + pos] += alpha;
        }
        out
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.col_idx[k])] = self.vals[k];
            }
        }
        m
    }

    /// Extracts the principal submatrix on the index range `[start, end)`.
    pub fn principal_submatrix(&self, start: usize, end: usize) -> Self {
        let mut t = Vec::new();
        for i in start..end {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                if j >= start && j < end && j >= i {
                    t.push((i - start, j - start, self.vals[k]));
                }
            }
        }
        Self::from_triplets(end - start, &t).unwrap()
    }

    /// Iterates over stored entries of row `i` as `(col, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.col_idx[k], self.vals[k]))
    }
}

/// Zero-fill incomplete Cholesky factor: lower triangular `G` with the
/// sparsity of `tril(A)`, so `G G'` reproduces `A` exactly whenever the
/// exact factorization incurs no fill (diagonal, tridiagonal, banded with
/// dense band).
#[derive(Debug, Clone)]
pub struct IncChol {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
    shift: f64,
}

impl IncChol {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Diagonal shift that was needed to complete the factorization
    /// (0.0 when no breakdown occurred).
    pub fn shift_used(&self) -> f64 {
        self.shift
    }

    /// Solves `G G' x = b` by forward then backward substitution.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "factor/vector dimension mismatch");
        let mut x = b.to_vec();
        // forward: G y = b; diagonal is the last entry of each row
        for i in 0..self.n {
            let lo = self.row_ptr[i];
            let hi = self.row_ptr[i + 1];
            let mut acc = x[i];
            for k in lo..hi - 1 {
                acc -= self.vals[k] * x[self.col_idx[k]];
            }
            x[i] = acc / self.vals[hi - 1];
        }
        // backward: G' z = y, column sweep
        for i in (0..self.n).rev() {
            let lo = self.row_ptr[i];
            let hi = self.row_ptr[i + 1];
            x[i] /= self.vals[hi - 1];
            let xi = x[i];
            for k in lo..hi - 1 {
                x[self.col_idx[k]] -= self.vals[k] * xi;
            }
        }
        x
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.col_idx[k])] = self.vals[k];
            }
        }
        m
    }
}

/// IC(0): factor with the sparsity of `tril(A)`. On breakdown (nonpositive
/// pivot) the factorization is retried on `A + alpha*max|diag(A)|*I` with
/// `alpha` doubling from 1e-3; the shift actually used is recorded on the
/// returned factor.
pub fn ichol_zero_fill(a: &SparseSym) -> Result<IncChol, SparseError> {
    let maxdiag = a
        .diag()
        .iter()
        .fold(0.0_f64, |acc, &d| acc.max(d.abs()))
        .max(1.0e-300);
    if let Some(idx) = a.diag().iter().position(|&d| d <= 0.0) {
        return Err(SparseError::NonpositiveDiagonal { index: idx });
    }
    if let Ok(f) = try_ichol(a, 0.0) {
        return Ok(f);
    }
    let mut alpha = 1.0e-3;
    let mut last_pivot = 0;
    for _ in 0..60 {
        match try_ichol(a, alpha * maxdiag) {
            Ok(f) => return Ok(f),
            Err(p) => last_pivot = p,
        }
        alpha *= 2.0;
    }
    Err(SparseError::IcholBreakdown { pivot: last_pivot, shift: alpha * maxdiag })
}

/// One factorization attempt with a fixed diagonal shift. Returns the
/// offending pivot row on breakdown.
fn try_ichol(a: &SparseSym, shift: f64) -> Result<IncChol, usize> {
    let n = a.dim();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx: Vec<usize> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    row_ptr.push(0);
    for i in 0..n {
        let lower: Vec<(usize, f64)> = a.row(i).filter(|&(j, _)| j <= i).collect();
        for &(j, aij) in &lower {
            let mut sum = aij + if j == i { shift } else { 0.0 };
            // subtract sum_{k<j} G[i,k] G[j,k] over the common pattern
            let (ilo, ihi) = (row_ptr[i], col_idx.len());
            let (jlo, jhi) = if j == i {
                (row_ptr[i], col_idx.len())
            } else {
                (row_ptr[j], row_ptr[j + 1])
            };
            let mut p = ilo;
            let mut q = jlo;
            while p < ihi && q < jhi {
                let cp = col_idx[p];
                let cq = col_idx[q];
                if cp >= j || cq >= j {
                    break;
                }
                match cp.cmp(&cq) {
                    std::cmp::Ordering::Less => p += 1,
                    std::cmp::Ordering::Greater => q += 1,
                    std::cmp::Ordering::Equal => {
                        sum -= vals[p] * vals[q];
                        p += 1;
                        q += 1;
                    }
                }
            }
            if j < i {
                let gjj = vals[row_ptr[j + 1] - 1];
                col_idx.push(j);
                vals.push(sum / gjj);
            } else {
                if sum <= 0.0 {
                    return Err(i);
                }
                col_idx.push(i);
                vals.push(sum.sqrt());
            }
        }
        row_ptr.push(col_idx.len());
    }
    Ok(IncChol { n, row_ptr, col_idx, vals, shift })
}

/// Applies `(G G' + V C V')^{-1}` via the Woodbury identity, with the
/// incomplete factor standing in for the base inverse. `C` is diagonal with
/// `m` nonzero coefficients; `m` is expected to be small.
#[derive(Debug, Clone)]
pub struct LowRankUpdateInverse {
    base: IncChol,
    /// update vectors, one per rank (each of length n)
    v: Vec<Vec<f64>>,
    /// diagonal update coefficients
    c: Vec<f64>,
    /// base^{-1} V, precomputed
    w: Vec<Vec<f64>>,
    /// dense Cholesky of the capacitance matrix C^{-1} + V' base^{-1} V
    cap_chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl LowRankUpdateInverse {
    pub fn new(
        base: IncChol,
        v: Vec<Vec<f64>>,
        c: Vec<f64>,
    ) -> Result<Self, SparseError> {
        assert_eq!(v.len(), c.len(), "one coefficient per update vector");
        let m = v.len();
        if m == 0 {
            return Ok(Self { base, v, c, w: Vec::new(), cap_chol: None });
        }
        let n = base.dim();
        for col in &v {
            if col.len() != n {
                return Err(SparseError::DimensionMismatch { expected: n, got: col.len() });
            }
        }
        if let Some(idx) = c.iter().position(|&ci| ci == 0.0) {
            return Err(SparseError::ZeroUpdateCoefficient { index: idx });
        }
        let w: Vec<Vec<f64>> = v.iter().map(|col| base.solve(col)).collect();
        let mut cap = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                cap[(i, j)] = dot(&v[i], &w[j]);
            }
            cap[(i, i)] += 1.0 / c[i];
        }
        cap = (&cap + cap.transpose()) * 0.5;
        let chol = cap.clone().cholesky().ok_or_else(|| {
            let eigs = cap.symmetric_eigenvalues();
            let amax = eigs.iter().fold(0.0_f64, |a, &e| a.max(e.abs()));
            let amin = eigs.iter().fold(f64::INFINITY, |a, &e| a.min(e.abs()));
            SparseError::SingularCapacitance { cond: amax / amin.max(1e-300) }
        })?;
        Ok(Self { base, v, c, w, cap_chol: Some(chol) })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn rank(&self) -> usize {
        self.v.len()
    }

    pub fn base(&self) -> &IncChol {
        &self.base
    }

    pub fn update_vectors(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn update_coefficients(&self) -> &[f64] {
        &self.c
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut t = self.base.solve(b);
        let Some(chol) = &self.cap_chol else {
            return t;
        };
        let m = self.v.len();
        let mut rhs = nalgebra::DVector::zeros(m);
        for i in 0..m {
            rhs[i] = dot(&self.v[i], &t);
        }
        let beta = chol.solve(&rhs);
        for i in 0..m {
            axpy(&mut t, -beta[i], &self.w[i]);
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigWhich {
    Smallest,
    Largest,
    KSmallest(usize),
}

/// Extreme eigenvalues of a symmetric operator given only its action.
///
/// Dense symmetric eigendecomposition up to [`DENSE_EIG_THRESHOLD`],
/// Lanczos with full reorthogonalization (tolerance 1e-8) beyond it.
pub fn sym_eig_extremes<F>(apply: F, n: usize, which: EigWhich) -> Result<Vec<f64>, SparseError>
where
    F: Fn(&[f64], &mut [f64]),
{
    sym_eig_extremes_with_threshold(apply, n, which, DENSE_EIG_THRESHOLD)
}

pub(crate) fn sym_eig_extremes_with_threshold<F>(
    apply: F,
    n: usize,
    which: EigWhich,
    dense_threshold: usize,
) -> Result<Vec<f64>, SparseError>
where
    F: Fn(&[f64], &mut [f64]),
{
    if n <= dense_threshold {
        let evals = dense_sym_eigvals(&apply, n);
        return Ok(select(&evals, which));
    }
    let evals = lanczos_extremes(&apply, n, &which)?;
    Ok(select(&evals, which))
}

/// Smallest `k` eigenpairs of a symmetric operator. Same dense/Lanczos
/// split as [`sym_eig_extremes`]; eigenvectors are returned as columns.
pub fn sym_eig_smallest_pairs<F>(
    apply: F,
    n: usize,
    k: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), SparseError>
where
    F: Fn(&[f64], &mut [f64]),
{
    if n <= DENSE_EIG_THRESHOLD {
        let mat = assemble(&apply, n);
        let se = nalgebra::SymmetricEigen::new(mat);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| se.eigenvalues[a].partial_cmp(&se.eigenvalues[b]).unwrap());
        let vals = order.iter().take(k).map(|&i| se.eigenvalues[i]).collect();
        let vecs = order
            .iter()
            .take(k)
            .map(|&i| se.eigenvectors.column(i).iter().copied().collect())
            .collect();
        return Ok((vals, vecs));
    }
    lanczos_smallest_pairs(&apply, n, k)
}

fn select(sorted_evals: &[f64], which: EigWhich) -> Vec<f64> {
    match which {
        EigWhich::Smallest => vec![sorted_evals[0]],
        EigWhich::Largest => vec![*sorted_evals.last().unwrap()],
        EigWhich::KSmallest(k) => sorted_evals.iter().take(k).copied().collect(),
    }
}

fn assemble<F>(apply: &F, n: usize) -> DMatrix<f64>
where
    F: Fn(&[f64], &mut [f64]),
{
    let mut mat = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        apply(&e, &mut col);
        e[j] = 0.0;
        for i in 0..n {
            mat[(i, j)] = col[i];
        }
    }
    (&mat + mat.transpose()) * 0.5
}

fn dense_sym_eigvals<F>(apply: &F, n: usize) -> Vec<f64>
where
    F: Fn(&[f64], &mut [f64]),
{
    let mat = assemble(apply, n);
    let mut evals: Vec<f64> = mat.symmetric_eigenvalues().iter().copied().collect();
    evals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    evals
}

const LANCZOS_TOL: f64 = 1e-8;

/// Ritz values (ascending), the Lanczos basis, residual bounds, and the
/// row-major tridiagonal eigenvector matrix.
type LanczosDecomposition = (Vec<f64>, Vec<Vec<f64>>, Vec<f64>, Vec<f64>);

fn lanczos_decompose<F>(
    apply: &F,
    n: usize,
    wanted: usize,
    want_low: bool,
    want_high: bool,
) -> Result<LanczosDecomposition, SparseError>
where
    F: Fn(&[f64], &mut [f64]),
{
    let max_iter = n.min(1000);
    let mut rng = ChaCha12Rng::seed_from_u64(0x5eed_1a2c_3b4d_5e6f);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nv = norm2(&v);
    scale(&mut v, 1.0 / nv);

    let mut basis: Vec<Vec<f64>> = vec![v.clone()];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];

    for m in 1..=max_iter {
        apply(&basis[m - 1], &mut w);
        if m > 1 {
            let beta = betas[m - 2];
            axpy(&mut w, -beta, &basis[m - 2]);
        }
        let alpha = dot(&w, &basis[m - 1]);
        axpy(&mut w, -alpha, &basis[m - 1]);
        alphas.push(alpha);
        // full reorthogonalization, two passes
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&w, q);
                axpy(&mut w, -c, q);
            }
        }
        let beta = norm2(&w);
        let (ritz, z) = tridiag_eig(&alphas, &betas);
        if beta < 1e-14 {
            let zeros = vec![0.0; ritz.len()];
            return Ok((ritz, basis, zeros, z));
        }
        // residual bounds |beta * last component of Ritz vector|
        let k = alphas.len();
        let resid: Vec<f64> = (0..k).map(|j| (beta * z[(k - 1) * k + j]).abs()).collect();
        let scale_ref = ritz.iter().fold(0.0_f64, |a, &e| a.max(e.abs())).max(1.0);
        let low_ok = !want_low
            || (k >= wanted && resid[..wanted].iter().all(|r| *r < LANCZOS_TOL * scale_ref));
        let high_ok = !want_high
            || (k >= wanted
                && resid[k - wanted..].iter().all(|r| *r < LANCZOS_TOL * scale_ref));
        if low_ok && high_ok && k > wanted {
            return Ok((ritz, basis, resid, z));
        }
        betas.push(beta);
        let mut next = w.clone();
        scale(&mut next, 1.0 / beta);
        basis.push(next);
    }
    let (ritz, _) = tridiag_eig(&alphas, &betas);
    Err(SparseError::LanczosNoConvergence { iters: max_iter, best: ritz })
}

fn lanczos_extremes<F>(apply: &F, n: usize, which: &EigWhich) -> Result<Vec<f64>, SparseError>
where
    F: Fn(&[f64], &mut [f64]),
{
    let (wanted, want_low, want_high) = match which {
        EigWhich::Smallest => (1, true, false),
        EigWhich::Largest => (1, false, true),
        EigWhich::KSmallest(k) => (*k, true, false),
    };
    let (ritz, _, _, _) = lanczos_decompose(apply, n, wanted.max(1), want_low, want_high)?;
    Ok(ritz)
}

fn lanczos_smallest_pairs<F>(
    apply: &F,
    n: usize,
    k: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), SparseError>
where
    F: Fn(&[f64], &mut [f64]),
{
    let (ritz, basis, _, z) = lanczos_decompose(apply, n, k, true, false)?;
    let m = ritz.len();
    let mut vals = Vec::with_capacity(k);
    let mut vecs = Vec::with_capacity(k);
    for j in 0..k.min(m) {
        vals.push(ritz[j]);
        let mut y = vec![0.0; n];
        for (i, q) in basis.iter().enumerate().take(m) {
            axpy(&mut y, z[i * m + j], q);
        }
        let ny = norm2(&y);
        scale(&mut y, 1.0 / ny);
        vecs.push(y);
    }
    Ok((vals, vecs))
}

/// Eigendecomposition of the symmetric tridiagonal Lanczos matrix; returns
/// ascending eigenvalues and the eigenvector matrix in row-major order
/// (`z[i*k + j]` = component `i` of eigenvector `j`).
fn tridiag_eig(alphas: &[f64], betas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = alphas.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let se = nalgebra::SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| se.eigenvalues[a].partial_cmp(&se.eigenvalues[b]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&j| se.eigenvalues[j]).collect();
    let mut z = vec![0.0; k * k];
    for (jj, &j) in order.iter().enumerate() {
        for i in 0..k {
            z[i * k + jj] = se.eigenvectors[(i, j)];
        }
    }
    (vals, z)
}
