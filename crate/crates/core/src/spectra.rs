//! Spectral bounds and closed forms for the preconditioned systems: the
//! three-interval eigenvalue inclusion for the block-diagonal
//! preconditioner, the unit-eigenvalue count and upper bounds for the
//! model-term product, and the constant-symmetric-model reductions.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::dense::{gen_eig_extremes, spd_product_eigvals, sym_eigvals};
use crate::lprecond::BlockBandedOperator;
use crate::sparse::{sym_eig_extremes, EigWhich, SparseError, DENSE_EIG_THRESHOLD};

#[derive(Debug, Error)]
pub enum SpectraError {
    #[error("the unit-eigenvalue count requires 2 <= k <= N+1, got k = {k}, N = {n}")]
    UnitCountHypothesis { k: usize, n: usize },
    #[error("closed-form extremes are only available for k = 3 and N in 3..=5, got k = {k}, N = {n}")]
    ClosedFormOutOfRange { k: usize, n: usize },
    #[error("upper bound requires k >= 1")]
    BoundHypothesis,
    #[error("problem dimension {dim} exceeds the dense threshold {limit}; use the extremes mode")]
    BeyondDenseThreshold { dim: usize, limit: usize },
    #[error("operator dimensions disagree: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Eig(#[from] SparseError),
}

/// Extreme generalized eigenvalues of the four preconditioned pairs, plus
/// the condition number of `D`.
#[derive(Debug, Clone, Copy)]
pub struct SpectralSummary {
    pub lambda_d: f64,
    pub cap_d: f64,
    pub lambda_r: f64,
    pub cap_r: f64,
    pub lambda_s: f64,
    pub cap_s: f64,
    pub lambda_l: f64,
    pub cap_l: f64,
    pub kappa_d: f64,
}

/// The three closed intervals of the block-diagonal inclusion result.
#[derive(Debug, Clone, Copy)]
pub struct IntervalUnion {
    pub negative: (f64, f64),
    pub middle: (f64, f64),
    pub positive: (f64, f64),
}

impl IntervalUnion {
    pub fn contains(&self, v: f64, slack: f64) -> bool {
        let inside = |(lo, hi): (f64, f64)| v >= lo - slack && v <= hi + slack;
        inside(self.negative) || inside(self.middle) || inside(self.positive)
    }
}

/// The eigenvalue inclusion for the block-diagonally preconditioned saddle
/// matrix (with the condition-number factors kept explicit):
///
/// ```text
/// [ (lf - sqrt(lf^2 + 4 CF CS CL kappa))/2 , (CF - sqrt(CF^2 + 4 lf ls ll / kappa))/2 ]
///   U [lf, CF]
///   U [ (lf + sqrt(lf^2 + 4 lf ls ll / kappa))/2 , (CF + sqrt(CF^2 + 4 CF CS CL kappa))/2 ]
/// ```
///
/// with `lf = min(lambda_d, lambda_r)`, `CF = max(cap_d, cap_r)`.
pub fn inclusion_intervals(s: &SpectralSummary) -> IntervalUnion {
    let lf = s.lambda_d.min(s.lambda_r);
    let cf = s.cap_d.max(s.cap_r);
    let k = s.kappa_d;
    let big = 4.0 * cf * s.cap_s * s.cap_l * k;
    let small = 4.0 * lf * s.lambda_s * s.lambda_l / k;
    IntervalUnion {
        negative: (
            (lf - (lf * lf + big).sqrt()) / 2.0,
            (cf - (cf * cf + small).sqrt()) / 2.0,
        ),
        middle: (lf, cf),
        positive: (
            (lf + (lf * lf + small).sqrt()) / 2.0,
            (cf + (cf * cf + big).sqrt()) / 2.0,
        ),
    }
}

/// Guaranteed number of unit eigenvalues of the preconditioned model term:
/// `r s` with `r = N + 1 - 2 floor(N/k)`, valid for `2 <= k <= N+1`.
pub fn unit_eigenvalue_count(n: usize, k: usize, s: usize) -> Result<usize, SpectraError> {
    if k < 2 || k > n + 1 {
        return Err(SpectraError::UnitCountHypothesis { k, n });
    }
    Ok((n + 1 - 2 * (n / k)) * s)
}

/// General upper bound `k + 1 + 2 sqrt(k)` on the preconditioned model
/// spectrum when every `||M_i M_i'||_2 <= 1`.
pub fn general_upper_bound(k: usize) -> Result<f64, SpectraError> {
    if k < 1 {
        return Err(SpectraError::BoundHypothesis);
    }
    let kf = k as f64;
    Ok(kf + 1.0 + 2.0 * kf.sqrt())
}

/// Tighter bound `1 + k + sqrt(k)` applicable when `k < N+1 <= 2k`.
pub fn short_window_bound(k: usize) -> Result<f64, SpectraError> {
    if k < 1 {
        return Err(SpectraError::BoundHypothesis);
    }
    let kf = k as f64;
    Ok(1.0 + kf + kf.sqrt())
}

/// The improved `k = 4` bound `5 + sqrt(8)` for `8 <= N <= 11`.
pub fn improved_k4_bound() -> f64 {
    5.0 + 8.0_f64.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumMethod {
    /// Full dense symmetric eigendecomposition (desk scale).
    Dense,
    /// Lanczos extremes of the symmetric product operator.
    Extremes,
}

/// Eigenvalues of `Lhat^{-T} L' L Lhat^{-1}`. Dense mode returns the full
/// ascending spectrum; extremes mode returns `[min, max]`.
pub fn preconditioned_model_spectrum(
    l: &BlockBandedOperator,
    l_hat: &BlockBandedOperator,
    method: SpectrumMethod,
) -> Result<Vec<f64>, SpectraError> {
    if l.dim() != l_hat.dim() {
        return Err(SpectraError::DimensionMismatch(l.dim(), l_hat.dim()));
    }
    let n = l.dim();
    let apply = |x: &[f64], y: &mut [f64]| {
        let mut t1 = vec![0.0; n];
        let mut t2 = vec![0.0; n];
        l_hat.apply_inverse(x, &mut t1);
        l.apply(&t1, &mut t2);
        l.apply_transpose(&t2, &mut t1);
        l_hat.apply_inverse_transpose(&t1, y);
    };
    match method {
        SpectrumMethod::Dense => {
            if n > DENSE_EIG_THRESHOLD {
                return Err(SpectraError::BeyondDenseThreshold {
                    dim: n,
                    limit: DENSE_EIG_THRESHOLD,
                });
            }
            let mat = crate::dense::from_operator(n, apply);
            Ok(sym_eigvals(&mat))
        }
        SpectrumMethod::Extremes => {
            let lo = sym_eig_extremes(apply, n, EigWhich::Smallest)?[0];
            let hi = sym_eig_extremes(apply, n, EigWhich::Largest)?[0];
            Ok(vec![lo, hi])
        }
    }
}

/// The reduced scalar matrix `A~(mu)` of size `k floor(N/k) + 1` whose
/// eigenvalues (shifted by one) give the non-padding eigenvalues of the
/// preconditioned model term when every `M_i` equals one symmetric `M`
/// with eigenvalue `mu`.
pub fn reduced_spectrum_matrix(mu: f64, n: usize, k: usize) -> DMatrix<f64> {
    let eta = k * (n / k) + 1;
    let mut a = DMatrix::zeros(eta, eta);
    for blk in 1..=n / k {
        let base = (blk - 1) * k + 1; // first 1-based index of the block
        for i in base..=blk * k {
            for j in base..=blk * k {
                a[(i - 1, j - 1)] = mu.powi((2 * blk * k + 2 - (i + j)) as i32);
            }
        }
        for j in base..=blk * k {
            let v = -mu.powi((blk * k - j + 1) as i32);
            a[(blk * k, j - 1)] = v;
            a[(j - 1, blk * k)] = v;
        }
    }
    a
}

/// Closed-form non-unit eigenvalues for `k = 3`, `N in 3..=5`:
/// `nu = 1 + (S +- sqrt(S^2 + 4S))/2` with `S = mu^2 + mu^4 + mu^6`.
/// Returns `(nu_minus, nu_plus)`.
pub fn closed_form_extremes(mu: f64, n: usize, k: usize) -> Result<(f64, f64), SpectraError> {
    if k != 3 || !(3..=5).contains(&n) {
        return Err(SpectraError::ClosedFormOutOfRange { k, n });
    }
    let sum = mu.powi(2) + mu.powi(4) + mu.powi(6);
    let root = (sum * sum + 4.0 * sum).sqrt();
    Ok((1.0 + (sum - root) / 2.0, 1.0 + (sum + root) / 2.0))
}

/// Dense inputs for the summary: the covariance collections, the realized
/// preconditioner inverses, the model terms, and the observation operator,
/// all assembled at full (desk-scale) dimension.
#[derive(Debug, Clone)]
pub struct DenseParts {
    pub d: DMatrix<f64>,
    pub d_hat_inv: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_hat_inv: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub l_hat: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

/// Extreme generalized eigenvalues of the Schur pair
/// `(S, S~) = (L'D^{-1}L + H'R^{-1}H, L'D^{-1}L)` and of the model pair
/// `(L'L, Lhat'Lhat)`, computed densely with exact inverses.
pub fn schur_ratio_extremes(
    parts: &DenseParts,
) -> Result<(f64, f64, f64, f64), SpectraError> {
    let dim = parts.l.nrows();
    if dim > DENSE_EIG_THRESHOLD {
        return Err(SpectraError::BeyondDenseThreshold { dim, limit: DENSE_EIG_THRESHOLD });
    }
    let dinv = parts
        .d
        .clone()
        .try_inverse()
        .expect("D must be invertible for the Schur pair");
    let rinv = parts
        .r
        .clone()
        .try_inverse()
        .expect("R must be invertible for the Schur pair");
    let s_tilde = parts.l.transpose() * &dinv * &parts.l;
    let s_exact = &s_tilde + parts.h.transpose() * rinv * &parts.h;
    let (ls, cs) = gen_eig_extremes(&s_exact, &s_tilde);
    let ltl = parts.l.transpose() * &parts.l;
    let lhtlh = parts.l_hat.transpose() * &parts.l_hat;
    let (ll, cl) = gen_eig_extremes(&ltl, &lhtlh);
    Ok((ls, cs, ll, cl))
}

/// Builds the full summary from dense parts by dense generalized
/// eigensolves.
pub fn build_summary(parts: &DenseParts) -> Result<SpectralSummary, SpectraError> {
    let de = spd_product_eigvals(&parts.d_hat_inv, &parts.d);
    let re = spd_product_eigvals(&parts.r_hat_inv, &parts.r);
    let (lambda_s, cap_s, lambda_l, cap_l) = schur_ratio_extremes(parts)?;
    let dspec = sym_eigvals(&parts.d);
    Ok(SpectralSummary {
        lambda_d: de[0],
        cap_d: *de.last().unwrap(),
        lambda_r: re[0],
        cap_r: *re.last().unwrap(),
        lambda_s,
        cap_s,
        lambda_l,
        cap_l,
        kappa_d: dspec.last().unwrap() / dspec[0],
    })
}

/// Eigenvalues of the block-diagonally preconditioned saddle matrix, from
/// densely assembled `P_D^{-1}` (SPD) and `A` (symmetric).
pub fn pd_preconditioned_eigvals(pd_inv: &DMatrix<f64>, a: &DMatrix<f64>) -> Vec<f64> {
    spd_product_eigvals(pd_inv, a)
}
