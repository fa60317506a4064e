//! Dense helpers used for desk-scale spectral validation: operator
//! assembly, sorted symmetric eigenvalues, and generalized symmetric
//! eigenproblems via Cholesky reduction.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Assembles the matrix of a linear operator by applying it to unit vectors.
pub fn from_operator<F>(n: usize, apply: F) -> DMatrix<f64>
where
    F: Fn(&[f64], &mut [f64]),
{
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        apply(&e, &mut col);
        e[j] = 0.0;
        for i in 0..n {
            m[(i, j)] = col[i];
        }
    }
    m
}

/// Eigenvalues of a (numerically) symmetric matrix, ascending.
/// The input is symmetrized first to absorb assembly roundoff.
pub fn sym_eigvals(a: &DMatrix<f64>) -> Vec<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let mut evals: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    evals.sort_by(|x, y| x.partial_cmp(y).unwrap());
    evals
}

/// Eigenvalues and eigenvectors of a symmetric matrix, ascending;
/// eigenvectors are the columns of the returned matrix.
pub fn sym_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (a + a.transpose()) * 0.5;
    let n = sym.nrows();
    let se = nalgebra::SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| se.eigenvalues[i].partial_cmp(&se.eigenvalues[j]).unwrap());
    let vals = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(n, n);
    for (jj, &j) in order.iter().enumerate() {
        vecs.set_column(jj, &se.eigenvectors.column(j));
    }
    (vals, vecs)
}

/// Generalized eigenvalues of `A x = lambda B x` for symmetric `A` and SPD
/// `B`, ascending. These are the eigenvalues of `B^{-1} A`, computed by
/// Cholesky reduction `B = K K'` and a symmetric eigensolve of
/// `K^{-1} A K^{-T}`.
pub fn gen_eigvals(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let reduced = reduce(a, b);
    sym_eigvals(&reduced)
}

/// Extreme generalized eigenvalues `(min, max)` of `A x = lambda B x`.
pub fn gen_eig_extremes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (f64, f64) {
    let e = gen_eigvals(a, b);
    (e[0], *e.last().unwrap())
}

fn reduce(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let bsym = (b + b.transpose()) * 0.5;
    let chol: Cholesky<f64, Dyn> = bsym
        .cholesky()
        .expect("generalized eigensolve requires an SPD right-hand matrix");
    let l = chol.l();
    // K^{-1} A K^{-T}: triangular solves column by column
    let n = a.nrows();
    let mut t = DMatrix::zeros(n, n);
    for j in 0..n {
        let col = a.column(j).clone_owned();
        let s = l.solve_lower_triangular(&col).unwrap();
        t.set_column(j, &s);
    }
    let mut out = DMatrix::zeros(n, n);
    let tt = t.transpose();
    for j in 0..n {
        let col = tt.column(j).clone_owned();
        let s = l.solve_lower_triangular(&col).unwrap();
        out.set_column(j, &s);
    }
    out.transpose()
}

/// Eigenvalues of `J A` for SPD `J` and symmetric `A`, ascending. `J A` is
/// similar to the symmetric `K' A K` with `J = K K'`, so the spectrum is
/// real.
pub fn spd_product_eigvals(j: &DMatrix<f64>, a: &DMatrix<f64>) -> Vec<f64> {
    let jsym = (j + j.transpose()) * 0.5;
    let chol: Cholesky<f64, Dyn> = jsym
        .cholesky()
        .expect("spd_product_eigvals requires an SPD left factor");
    let k = chol.l();
    let reduced = k.transpose() * a * &k;
    sym_eigvals(&reduced)
}

/// Dense LU solve used as an oracle in tests and desk-scale checks.
pub fn solve_lu(a: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let x = a
        .clone()
        .lu()
        .solve(&DVector::from_column_slice(b))
        .expect("dense oracle solve failed: singular matrix");
    x.as_slice().to_vec()
}
