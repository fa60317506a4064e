//! Preconditioned MINRES and full right-preconditioned GMRES with
//! residual-based stopping in the two norm.

use std::time::Instant;

use thiserror::Error;

use crate::saddle::CounterSnapshot;
use crate::vecops::{axpy, dot, norm2, scale};

#[derive(Debug, Error)]
pub enum KrylovError {
    #[error("right-hand side is zero")]
    ZeroRhs,
    #[error("preconditioner '{name}' is not positive definite: <z, r> = {value:.3e}")]
    IndefinitePreconditioner { name: String, value: f64 },
}

#[derive(Debug, Clone)]
pub struct KrylovOptions {
    pub tol: f64,
    pub maxit: usize,
    /// Used in error messages when an indefinite preconditioner is detected.
    pub precond_name: String,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self { tol: 1e-6, maxit: 1000, precond_name: String::from("preconditioner") }
    }
}

/// Outcome of one Krylov solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    /// Relative true-residual 2-norms, one entry per iteration including
    /// the initial residual.
    pub residual_history: Vec<f64>,
    /// MINRES only: the preconditioned-norm residual estimates, which are
    /// monotone by construction.
    pub pnorm_history: Vec<f64>,
    pub final_relres: f64,
    pub wall_seconds: f64,
    /// Matvec tallies copied from the operator counters by the caller.
    pub counts: CounterSnapshot,
}

const TINY: f64 = 1e-300;

/// Preconditioned MINRES for symmetric `A` with SPD preconditioner applied
/// as `pinv`. Stops when the true residual satisfies
/// `||b - A x|| <= tol * ||b||`; the true residual vector is maintained
/// from the Lanczos/Givens recurrence so no extra operator applications
/// are needed.
pub fn minres<A, P>(
    n: usize,
    a: A,
    pinv: P,
    b: &[f64],
    opts: &KrylovOptions,
) -> Result<(Vec<f64>, SolveReport), KrylovError>
where
    A: Fn(&[f64], &mut [f64]),
    P: Fn(&[f64], &mut [f64]),
{
    let start = Instant::now();
    let normb = norm2(b);
    if normb == 0.0 {
        return Err(KrylovError::ZeroRhs);
    }

    let mut x = vec![0.0; n];
    // r1 = b - A x0
    let mut r1 = vec![0.0; n];
    a(&x, &mut r1);
    scale(&mut r1, -1.0);
    axpy(&mut r1, 1.0, b);
    let mut y = vec![0.0; n];
    pinv(&r1, &mut y);
    let beta1sq = dot(&r1, &y);
    if beta1sq <= 0.0 {
        return Err(KrylovError::IndefinitePreconditioner {
            name: opts.precond_name.clone(),
            value: beta1sq,
        });
    }
    let beta1 = beta1sq.sqrt();

    let mut phibar = beta1;
    let mut rho: Vec<f64> = r1.iter().map(|v| v / beta1).collect();
    let mut relres = norm2(&r1) / normb;
    let mut residual_history = vec![relres];
    let mut pnorm_history = vec![phibar];

    let mut r1v = r1.clone();
    let mut r2v = r1;
    let (mut oldb, mut beta) = (0.0, beta1);
    let (mut dbar, mut epsln) = (0.0, 0.0);
    let (mut cs, mut sn) = (-1.0, 0.0);
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut converged = relres <= opts.tol;
    let mut iter = 0;

    while !converged && iter < opts.maxit {
        iter += 1;

        // Lanczos step in the preconditioned inner product
        for i in 0..n {
            v[i] = y[i] / beta;
        }
        let mut ynew = vec![0.0; n];
        a(&v, &mut ynew);
        if iter >= 2 {
            axpy(&mut ynew, -(beta / oldb), &r1v);
        }
        let alfa = dot(&v, &ynew);
        axpy(&mut ynew, -(alfa / beta), &r2v);
        r1v.copy_from_slice(&r2v);
        r2v.copy_from_slice(&ynew);
        pinv(&r2v, &mut y);
        oldb = beta;
        let betasq = dot(&r2v, &y);
        if betasq < 0.0 {
            return Err(KrylovError::IndefinitePreconditioner {
                name: opts.precond_name.clone(),
                value: betasq,
            });
        }
        beta = betasq.sqrt();

        // previous and current Givens reflections
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = (gbar * gbar + beta * beta).sqrt().max(TINY);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        // solution update
        let w1 = w2.clone();
        w2 = w.clone();
        for i in 0..n {
            w[i] = (v[i] - oldeps * w1[i] - delta * w2[i]) / gamma;
        }
        axpy(&mut x, phi, &w);

        if beta > TINY {
            // true residual direction: rho <- sn*rho - (cs/beta) * z
            for i in 0..n {
                rho[i] = sn * rho[i] - (cs / beta) * r2v[i];
            }
            relres = phibar * norm2(&rho) / normb;
        } else {
            // Lanczos breakdown: the Krylov space is invariant and the
            // iterate is exact up to roundoff
            let mut resid = vec![0.0; n];
            a(&x, &mut resid);
            scale(&mut resid, -1.0);
            axpy(&mut resid, 1.0, b);
            relres = norm2(&resid) / normb;
            residual_history.push(relres);
            pnorm_history.push(phibar);
            converged = true;
            break;
        }
        residual_history.push(relres);
        pnorm_history.push(phibar);
        converged = relres <= opts.tol;
    }

    let report = SolveReport {
        iterations: iter,
        converged,
        residual_history,
        pnorm_history,
        final_relres: relres,
        wall_seconds: start.elapsed().as_secs_f64(),
        counts: CounterSnapshot::default(),
    };
    Ok((x, report))
}

/// Full (unrestarted) right-preconditioned GMRES with modified
/// Gram-Schmidt and a one-pass reorthogonalization trigger. Stops when the
/// relative residual in the two norm reaches `tol`.
pub fn gmres<A, P>(
    n: usize,
    a: A,
    pinv: P,
    b: &[f64],
    opts: &KrylovOptions,
) -> Result<(Vec<f64>, SolveReport), KrylovError>
where
    A: Fn(&[f64], &mut [f64]),
    P: Fn(&[f64], &mut [f64]),
{
    let start = Instant::now();
    let normb = norm2(b);
    if normb == 0.0 {
        return Err(KrylovError::ZeroRhs);
    }
    let maxit = opts.maxit.min(n);

    let x0 = vec![0.0; n];
    let mut r0 = vec![0.0; n];
    a(&x0, &mut r0);
    scale(&mut r0, -1.0);
    axpy(&mut r0, 1.0, b);
    let beta = norm2(&r0);
    let mut relres = beta / normb;
    let mut residual_history = vec![relres];
    if relres <= opts.tol {
        return Ok((
            x0,
            SolveReport {
                iterations: 0,
                converged: true,
                residual_history,
                pnorm_history: Vec::new(),
                final_relres: relres,
                wall_seconds: start.elapsed().as_secs_f64(),
                counts: CounterSnapshot::default(),
            },
        ));
    }

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(maxit + 1);
    {
        let mut v0 = r0;
        scale(&mut v0, 1.0 / beta);
        basis.push(v0);
    }
    // column-major Hessenberg, already rotated
    let mut hcols: Vec<Vec<f64>> = Vec::with_capacity(maxit);
    let mut gs: Vec<f64> = vec![beta];
    let mut csv: Vec<f64> = Vec::with_capacity(maxit);
    let mut snv: Vec<f64> = Vec::with_capacity(maxit);
    let mut iters = 0;
    let mut converged = false;

    let mut z = vec![0.0; n];
    for j in 0..maxit {
        pinv(&basis[j], &mut z);
        let mut wv = vec![0.0; n];
        a(&z, &mut wv);

        // modified Gram-Schmidt with a one-pass re-orthogonalization
        // trigger on severe cancellation
        let norm_before = norm2(&wv);
        let mut h = vec![0.0; j + 2];
        for (i, q) in basis.iter().enumerate() {
            let c = dot(&wv, q);
            h[i] = c;
            axpy(&mut wv, -c, q);
        }
        if norm2(&wv) < norm_before / std::f64::consts::SQRT_2 {
            for (i, q) in basis.iter().enumerate() {
                let c = dot(&wv, q);
                h[i] += c;
                axpy(&mut wv, -c, q);
            }
        }
        let hnext = norm2(&wv);
        h[j + 1] = hnext;

        // apply accumulated rotations, then the new one
        for i in 0..j {
            let t = csv[i] * h[i] + snv[i] * h[i + 1];
            h[i + 1] = -snv[i] * h[i] + csv[i] * h[i + 1];
            h[i] = t;
        }
        let denom = (h[j] * h[j] + h[j + 1] * h[j + 1]).sqrt().max(TINY);
        let (c, s) = (h[j] / denom, h[j + 1] / denom);
        csv.push(c);
        snv.push(s);
        h[j] = denom;
        let happy = hnext <= TINY;
        h[j + 1] = 0.0;
        gs.push(-s * gs[j]);
        gs[j] *= c;
        hcols.push(h);

        iters = j + 1;
        relres = gs[j + 1].abs() / normb;
        residual_history.push(relres);
        if relres <= opts.tol || happy {
            converged = true;
            break;
        }
        let mut vnext = wv;
        scale(&mut vnext, 1.0 / hnext);
        basis.push(vnext);
    }

    // back substitution for the Hessenberg least-squares solution
    let k = iters;
    let mut yk = vec![0.0; k];
    for i in (0..k).rev() {
        let mut acc = gs[i];
        for j in i + 1..k {
            acc -= hcols[j][i] * yk[j];
        }
        yk[i] = acc / hcols[i][i];
    }
    let mut u = vec![0.0; n];
    for (j, q) in basis.iter().take(k).enumerate() {
        axpy(&mut u, yk[j], q);
    }
    let mut xu = vec![0.0; n];
    pinv(&u, &mut xu);
    let mut x = x0;
    axpy(&mut x, 1.0, &xu);

    let report = SolveReport {
        iterations: iters,
        converged,
        residual_history,
        pnorm_history: Vec::new(),
        final_relres: relres,
        wall_seconds: start.elapsed().as_secs_f64(),
        counts: CounterSnapshot::default(),
    };
    Ok((x, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecops::rel_err;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn mat_apply(m: &DMatrix<f64>) -> impl Fn(&[f64], &mut [f64]) + '_ {
        move |x, y| {
            let v = m * DVector::from_column_slice(x);
            y.copy_from_slice(v.as_slice());
        }
    }

    fn ident(x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
    }

    fn explicit_relres(m: &DMatrix<f64>, x: &[f64], b: &[f64]) -> f64 {
        let r = DVector::from_column_slice(b) - m * DVector::from_column_slice(x);
        r.norm() / DVector::from_column_slice(b).norm()
    }

    #[test]
    fn minres_identity_converges_in_one_iteration() {
        let b = vec![1.0, -2.0, 3.0];
        let (x, rep) = minres(3, ident, ident, &b, &KrylovOptions::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        assert!(rel_err(&x, &b) < 1e-12);
    }

    #[test]
    fn gmres_identity_converges_in_one_iteration() {
        let b = vec![0.5, 2.0, -1.0, 4.0];
        let (x, rep) = gmres(4, ident, ident, &b, &KrylovOptions::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        assert!(rel_err(&x, &b) < 1e-12);
    }

    #[test]
    fn minres_diagonal_terminates_within_n_iterations() {
        let d = DMatrix::from_diagonal(&DVector::from_iterator(10, (1..=10).map(|i| i as f64)));
        let b = vec![1.0; 10];
        let opts = KrylovOptions { tol: 1e-10, ..Default::default() };
        let (x, rep) = minres(10, mat_apply(&d), ident, &b, &opts).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 10);
        assert!(explicit_relres(&d, &x, &b) <= 1e-10);
    }

    #[test]
    fn minres_tracks_true_residual() {
        // the maintained residual must agree with an explicitly computed
        // one at the stopping point, including with a nontrivial SPD
        // preconditioner
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for trial in 0..5 {
            let n = 24;
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let sym = (&m + m.transpose()) * 0.5;
            let pd = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.gen_range(0.5..3.0)));
            let pinv = pd.clone().try_inverse().unwrap();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let opts = KrylovOptions { tol: 1e-9, maxit: 400, ..Default::default() };
            let (x, rep) =
                minres(n, mat_apply(&sym), mat_apply(&pinv), &b, &opts).unwrap();
            let explicit = explicit_relres(&sym, &x, &b);
            assert!(
                (rep.final_relres - explicit).abs() < 1e-9,
                "trial {trial}: maintained {} vs explicit {}",
                rep.final_relres,
                explicit
            );
        }
    }

    #[test]
    fn minres_preconditioned_norm_history_is_monotone() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let n = 30;
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let sym = (&m + m.transpose()) * 0.5;
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pd = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.gen_range(0.5..3.0)));
        let pinv = pd.clone().try_inverse().unwrap();
        let opts = KrylovOptions { tol: 1e-12, maxit: 200, ..Default::default() };
        let (_, rep) = minres(n, mat_apply(&sym), mat_apply(&pinv), &b, &opts).unwrap();
        for w in rep.pnorm_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn perfect_preconditioner_gives_one_iteration() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let n = 12;
        // SPD system for MINRES
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.5..0.5));
        let spd = &m * m.transpose() + DMatrix::identity(n, n);
        let inv = spd.clone().try_inverse().unwrap();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (x, rep) =
            minres(n, mat_apply(&spd), mat_apply(&inv), &b, &KrylovOptions::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(explicit_relres(&spd, &x, &b) < 1e-10);

        // symmetric indefinite system for GMRES
        let sym = (&m + m.transpose()) * 0.5 - DMatrix::identity(n, n) * 0.3;
        let syminv = sym.clone().try_inverse().unwrap();
        let (x, rep) =
            gmres(n, mat_apply(&sym), mat_apply(&syminv), &b, &KrylovOptions::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(explicit_relres(&sym, &x, &b) < 1e-8);
    }

    #[test]
    fn gmres_residual_history_is_monotone_and_matches_dense_solve() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let n = 25;
        let m = DMatrix::from_fn(n, n, |i, j| {
            rng.gen_range(-1.0..1.0) + if i == j { 3.0 } else { 0.0 }
        });
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let opts = KrylovOptions { tol: 1e-10, maxit: 100, ..Default::default() };
        let (x, rep) = gmres(n, mat_apply(&m), ident, &b, &opts).unwrap();
        assert!(rep.converged);
        for w in rep.residual_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-14);
        }
        let xd = m.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        assert!(rel_err(&x, xd.as_slice()) < 1e-8);
    }

    #[test]
    fn gmres_iterations_invariant_to_rhs_scaling() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 20;
        let m = DMatrix::from_fn(n, n, |i, j| {
            rng.gen_range(-1.0..1.0) + if i == j { 2.5 } else { 0.0 }
        });
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_scaled: Vec<f64> = b.iter().map(|v| 137.0 * v).collect();
        let opts = KrylovOptions { tol: 1e-8, maxit: 100, ..Default::default() };
        let (_, r1) = gmres(n, mat_apply(&m), ident, &b, &opts).unwrap();
        let (_, r2) = gmres(n, mat_apply(&m), ident, &b_scaled, &opts).unwrap();
        assert_eq!(r1.iterations, r2.iterations);
    }

    #[test]
    fn minres_rejects_indefinite_preconditioner() {
        let neg = |x: &[f64], y: &mut [f64]| {
            for i in 0..x.len() {
                y[i] = -x[i];
            }
        };
        let b = vec![1.0, 1.0];
        let opts = KrylovOptions { precond_name: "negated identity".into(), ..Default::default() };
        let err = minres(2, ident, neg, &b, &opts).unwrap_err();
        match err {
            KrylovError::IndefinitePreconditioner { name, .. } => {
                assert_eq!(name, "negated identity")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn zero_rhs_is_rejected() {
        let b = vec![0.0; 3];
        assert!(matches!(
            minres(3, ident, ident, &b, &KrylovOptions::default()),
            Err(KrylovError::ZeroRhs)
        ));
        assert!(matches!(
            gmres(3, ident, ident, &b, &KrylovOptions::default()),
            Err(KrylovError::ZeroRhs)
        ));
    }

    #[test]
    fn minres_solves_symmetric_indefinite_system() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let n = 30;
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let sym = (&m + m.transpose()) * 0.5;
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let opts = KrylovOptions { tol: 1e-9, maxit: 300, ..Default::default() };
        let (x, rep) = minres(n, mat_apply(&sym), ident, &b, &opts).unwrap();
        assert!(rep.converged);
        let xd = sym.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        assert!(rel_err(&x, xd.as_slice()) < 1e-6);
    }
}
