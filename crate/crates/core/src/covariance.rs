//! Construction of the error covariance blocks `B`, `Q`, `R_i`, the
//! block-diagonal collections `D` and `R`, and the observation operator `H`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::sparse::{sym_eig_extremes, EigWhich, SparseSym};

#[derive(Debug, Error)]
pub enum CovarianceError {
    #[error("cannot place {p} observations in a state of dimension {s}")]
    TooManyObservations { p: usize, s: usize },
    #[error("smoothed rows need interior columns: require p <= s - 4, got p = {p}, s = {s}")]
    SmoothingNeedsInterior { p: usize, s: usize },
    #[error("pcorr has length {got}, expected plen*(plen-1)/2 = {expected}")]
    BadPcorrLength { got: usize, expected: usize },
    #[error("eigenvalue computation failed: {0}")]
    Eig(#[from] crate::sparse::SparseError),
}

/// Modified SOAR correlation row: lengthscale, half-bandwidth control,
/// amplitude, and matrix dimension.
#[derive(Debug, Clone)]
pub struct SoarSpec {
    pub lengthscale: f64,
    pub maxval: usize,
    pub amplitude: f64,
    pub dim: usize,
}

impl SoarSpec {
    /// Parameters used for the background error covariance `B`.
    pub fn background(dim: usize) -> Self {
        Self { lengthscale: 0.6, maxval: 100, amplitude: 0.4, dim }
    }

    /// Parameters used for the model error covariance `Q`.
    pub fn model_error(dim: usize) -> Self {
        Self { lengthscale: 0.5, maxval: 120, amplitude: 0.2, dim }
    }
}

/// Value of the correlation row at circular lag `i`:
/// `sigma * (1 + (2|sin(i theta/2)|/L) exp(-2|sin(i theta/2)|/L))` with
/// `theta = pi / maxval` inside the band of half-width `maxval`, zero
/// outside. The row is symmetric in `+-i` modulo the dimension.
pub fn soar_row(spec: &SoarSpec, i: usize) -> f64 {
    let s = spec.dim;
    debug_assert!(i < s);
    let d = i.min(s - i);
    if d > spec.maxval {
        return 0.0;
    }
    let theta = std::f64::consts::PI / spec.maxval as f64;
    let t = 2.0 * (d as f64 * theta / 2.0).sin().abs() / spec.lengthscale;
    spec.amplitude * (1.0 + t * (-t).exp())
}

/// Builds the circulant matrix defined by the SOAR row and enforces
/// positive definiteness: if the smallest eigenvalue is negative, the
/// diagonal is inflated by `|lambda_min| + psi` with `psi ~ U[0, 0.5]`.
pub fn build_circulant_spd(spec: &SoarSpec, rng: &mut ChaCha12Rng) -> SparseSym {
    let s = spec.dim;
    let row: Vec<f64> = (0..s).map(|i| soar_row(spec, i)).collect();
    let mut triplets = Vec::new();
    for i in 0..s {
        triplets.push((i, i, row[0]));
    }
    let dmax = spec.maxval.min(s / 2);
    for (d, &val) in row.iter().enumerate().take(dmax + 1).skip(1) {
        for i in 0..s {
            if 2 * d == s && i >= s / 2 {
                continue; // antipodal pairs appear once
            }
            let j = (i + d) % s;
            triplets.push((i.min(j), i.max(j), val));
        }
    }
    let mat = SparseSym::from_triplets(s, &triplets).unwrap();
    // circulant eigenvalues are the DFT of the defining row; the row is
    // symmetric so the spectrum is real
    let mut lambda_min = f64::INFINITY;
    for m in 0..s {
        let mut lam = 0.0;
        for (j, &rj) in row.iter().enumerate() {
            if rj != 0.0 {
                lam += rj * (2.0 * std::f64::consts::PI * (m * j) as f64 / s as f64).cos();
            }
        }
        lambda_min = lambda_min.min(lam);
    }
    if lambda_min < 0.0 {
        let psi: f64 = rng.gen_range(0.0..0.5);
        mat.with_diag_shift(lambda_min.abs() + psi)
    } else {
        mat
    }
}

/// Specification of the synthetic interchannel observation covariance:
/// block sizes, off-diagonal block multipliers (row-major upper order),
/// sparse density, and the minimum-eigenvalue floor.
#[derive(Debug, Clone)]
pub struct BlockRSpec {
    pub pvec: Vec<usize>,
    pub pcorr: Vec<f64>,
    pub density: f64,
    pub min_eig_floor: f64,
    pub soar_lengthscale: f64,
    pub soar_maxval: usize,
    pub soar_amplitude: f64,
    pub seed: u64,
}

impl BlockRSpec {
    /// Four near-equal blocks with one weakly coupled boundary and strong
    /// interchannel-style correlations, the configuration exercised by the
    /// experiments.
    pub fn default_for(p: usize, seed: u64) -> Self {
        let base = p / 4;
        let mut pvec = vec![base; 4];
        pvec[3] += p - 4 * base;
        Self {
            pvec,
            pcorr: vec![3.0, 0.0, 0.0, 0.1, 0.0, 2.0],
            density: 0.6,
            min_eig_floor: 0.41,
            soar_lengthscale: 0.6,
            soar_maxval: 100,
            soar_amplitude: 1.5,
            seed,
        }
    }

    pub fn total_dim(&self) -> usize {
        self.pvec.iter().sum()
    }
}

/// Builds `R_i`: diagonal blocks are the Hadamard product of a sparse
/// random matrix and a SOAR matrix; off-diagonal block `(k, l)` is sparse
/// random with entries in `(0, pcorr)`. Diagonal and upper blocks are
/// assembled and symmetrized by addition, which doubles the diagonal-block
/// weight. If the smallest eigenvalue falls below 1 it is raised to the
/// floor (0.41) by a diagonal shift.
pub fn build_block_r(spec: &BlockRSpec) -> Result<SparseSym, CovarianceError> {
    let plen = spec.pvec.len();
    let expected = plen * (plen - 1) / 2;
    if spec.pcorr.len() != expected {
        return Err(CovarianceError::BadPcorrLength { got: spec.pcorr.len(), expected });
    }
    let p = spec.total_dim();
    let mut starts = vec![0usize; plen + 1];
    for (b, &q) in spec.pvec.iter().enumerate() {
        starts[b + 1] = starts[b] + q;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();

    // diagonal blocks: Hadamard(sparse random, SOAR)
    for (b, &q) in spec.pvec.iter().enumerate() {
        let o = starts[b];
        let soar = SoarSpec {
            lengthscale: spec.soar_lengthscale,
            maxval: spec.soar_maxval,
            amplitude: spec.soar_amplitude,
            dim: q,
        };
        for i in 0..q {
            for j in 0..q {
                if rng.gen::<f64>() >= spec.density {
                    continue;
                }
                let rv: f64 = rng.gen::<f64>();
                let lag = j.abs_diff(i);
                let sv = soar_row(&soar, lag);
                let v = rv * sv;
                if v == 0.0 {
                    continue;
                }
                if i == j {
                    // U + U' doubles diagonal entries
                    triplets.push((o + i, o + j, 2.0 * v));
                } else if j > i {
                    triplets.push((o + i, o + j, v));
                } else {
                    triplets.push((o + j, o + i, v));
                }
            }
        }
    }

    // upper off-diagonal blocks: sparse random in (0, pcorr)
    let mut m = 0;
    for k in 0..plen {
        for l in k + 1..plen {
            let corr = spec.pcorr[m];
            m += 1;
            if corr > 0.0 {
                for i in starts[k]..starts[k + 1] {
                    for j in starts[l]..starts[l + 1] {
                        if rng.gen::<f64>() < spec.density {
                            let v = rng.gen_range(0.0..corr);
                            triplets.push((i, j, v));
                        }
                    }
                }
            }
        }
    }

    let mat = SparseSym::from_triplets(p, &triplets).unwrap();
    let lambda_min =
        sym_eig_extremes(|x, y| mat.matvec(x, y), p, EigWhich::Smallest)?[0];
    if lambda_min < 1.0 {
        Ok(mat.with_diag_shift(spec.min_eig_floor - lambda_min))
    } else {
        Ok(mat)
    }
}

/// Per-time observation operator `H_i` (the full operator is
/// `I_{N+1} (x) H_i`). Rows hold either a single unit entry or five
/// entries of 1/5 smoothed over adjacent state variables, ordered by
/// observed column.
#[derive(Debug, Clone)]
pub struct ObsOperator {
    s: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl ObsOperator {
    pub fn from_rows(s: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        Self { s, rows }
    }

    pub fn state_dim(&self) -> usize {
        self.s
    }

    pub fn obs_dim(&self) -> usize {
        self.rows.len()
    }

    /// y = H_i x for one time block.
    pub fn apply_block(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.s);
        debug_assert_eq!(y.len(), self.rows.len());
        for (r, row) in self.rows.iter().enumerate() {
            y[r] = row.iter().map(|&(c, v)| v * x[c]).sum();
        }
    }

    /// y = H_i' x for one time block.
    pub fn apply_block_transpose(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows.len());
        debug_assert_eq!(y.len(), self.s);
        y.iter_mut().for_each(|v| *v = 0.0);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                y[c] += v * x[r];
            }
        }
    }

    pub fn to_dense_block(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.rows.len(), self.s);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                m[(r, c)] = v;
            }
        }
        m
    }
}

/// Chooses `p` observed columns without replacement (sorted); with
/// smoothing enabled, rows alternate between direct observations (a single
/// unit) and observations smoothed equally over 5 adjacent state variables
/// (entries 1/5). Smoothed rows require interior columns, so sampling is
/// restricted to `[2, s-3]` in that case.
pub fn build_obs_operator(
    s: usize,
    p: usize,
    smoothing: bool,
    seed: u64,
) -> Result<ObsOperator, CovarianceError> {
    if p > s {
        return Err(CovarianceError::TooManyObservations { p, s });
    }
    if smoothing && p > s - 4 {
        return Err(CovarianceError::SmoothingNeedsInterior { p, s });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (lo, range) = if smoothing { (2usize, s - 4) } else { (0usize, s) };
    let mut cols: Vec<usize> = rand::seq::index::sample(&mut rng, range, p)
        .into_iter()
        .map(|c| c + lo)
        .collect();
    cols.sort_unstable();
    let rows = cols
        .iter()
        .enumerate()
        .map(|(r, &c)| {
            if smoothing && r % 2 == 1 {
                (c - 2..=c + 2).map(|j| (j, 0.2)).collect()
            } else {
                vec![(c, 1.0)]
            }
        })
        .collect();
    Ok(ObsOperator { s, rows })
}

/// Block-diagonal collection sharing its distinct blocks: `D` stores one
/// `B` and one `Q` regardless of the number of subwindows, `R` stores a
/// single `R_i`.
#[derive(Debug, Clone)]
pub struct CovarianceSet {
    distinct: Vec<SparseSym>,
    slots: Vec<usize>,
}

impl CovarianceSet {
    /// `D = blkdiag(B, Q, Q, ..., Q)` with `n` copies of `Q`.
    pub fn assemble_d(b: SparseSym, q: SparseSym, n: usize) -> Self {
        assert_eq!(b.dim(), q.dim(), "B and Q must share a dimension");
        if n == 0 {
            return Self { distinct: vec![b], slots: vec![0] };
        }
        let mut slots = vec![1; n + 1];
        slots[0] = 0;
        Self { distinct: vec![b, q], slots }
    }

    /// `R = blkdiag(R_i, ..., R_i)` with `n + 1` identical blocks.
    pub fn assemble_r(r_i: SparseSym, n: usize) -> Self {
        Self { distinct: vec![r_i], slots: vec![0; n + 1] }
    }

    /// Identity collection, used by the `D = I` spectral studies.
    pub fn identity(block_dim: usize, n: usize) -> Self {
        Self { distinct: vec![SparseSym::identity(block_dim)], slots: vec![0; n + 1] }
    }

    pub fn num_blocks(&self) -> usize {
        self.slots.len()
    }

    pub fn block_dim(&self) -> usize {
        self.distinct[0].dim()
    }

    pub fn total_dim(&self) -> usize {
        self.block_dim() * self.num_blocks()
    }

    pub fn distinct_count(&self) -> usize {
        self.distinct.len()
    }

    pub fn block(&self, slot: usize) -> &SparseSym {
        &self.distinct[self.slots[slot]]
    }

    pub fn distinct_blocks(&self) -> &[SparseSym] {
        &self.distinct
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let d = self.block_dim();
        debug_assert_eq!(x.len(), self.total_dim());
        for (i, &which) in self.slots.iter().enumerate() {
            self.distinct[which].matvec(&x[i * d..(i + 1) * d], &mut y[i * d..(i + 1) * d]);
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let d = self.block_dim();
        let n = self.total_dim();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for (i, &which) in self.slots.iter().enumerate() {
            let blk = self.distinct[which].to_dense();
            m.view_mut((i * d, i * d), (d, d)).copy_from(&blk);
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecops::rel_err;
    use rand::RngCore;

    #[test]
    fn soar_lag_zero_is_amplitude() {
        let spec = SoarSpec::background(250);
        assert_eq!(soar_row(&spec, 0), 0.4);
    }

    #[test]
    fn soar_lag_one_matches_direct_formula() {
        // scalar oracle: evaluate the row formula independently
        let spec = SoarSpec::background(250);
        let theta = std::f64::consts::PI / 100.0;
        let t = 2.0 * (theta / 2.0).sin().abs() / 0.6;
        let expected = 0.4 * (1.0 + t * (-t).exp());
        assert!((soar_row(&spec, 1) - expected).abs() < 1e-15);
    }

    #[test]
    fn soar_row_is_symmetric_in_lag() {
        let spec = SoarSpec::model_error(300);
        for i in 1..300 {
            assert_eq!(soar_row(&spec, i), soar_row(&spec, 300 - i));
        }
    }

    #[test]
    fn circulant_is_spd_and_matches_dft_eigenvalues() {
        let spec = SoarSpec::background(120);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let b = build_circulant_spd(&spec, &mut rng);
        let evals = crate::dense::sym_eigvals(&b.to_dense());
        assert!(evals[0] > 0.0);

        // oracle: eigenvalues of a symmetric circulant are the DFT of its
        // first row
        let row: Vec<f64> = (0..120).map(|j| b.get(0, j)).collect();
        let mut dft: Vec<f64> = (0..120)
            .map(|m| {
                row.iter()
                    .enumerate()
                    .map(|(j, &r)| {
                        r * (2.0 * std::f64::consts::PI * (m * j) as f64 / 120.0).cos()
                    })
                    .sum()
            })
            .collect();
        dft.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in evals.iter().zip(&dft) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn circulant_band_is_fixed_as_dimension_grows() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let b1 = build_circulant_spd(&SoarSpec::background(300), &mut rng);
        let b2 = build_circulant_spd(&SoarSpec::background(450), &mut rng);
        assert_eq!(b1.nnz() / 300, 201);
        assert_eq!(b2.nnz() / 450, 201);
    }

    #[test]
    fn soar_b_ridge_factorizes_without_shift() {
        let spec = SoarSpec::background(250);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let b = build_circulant_spd(&spec, &mut rng);
        let b_rr = b.with_diag_shift(0.01);
        let g = crate::sparse::ichol_zero_fill(&b_rr).unwrap();
        assert_eq!(g.shift_used(), 0.0);
    }

    #[test]
    fn soar_b_smallest_eigenvalue_matches_dense_oracle() {
        let spec = SoarSpec::background(250);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let b = build_circulant_spd(&spec, &mut rng);
        let lo = sym_eig_extremes(|x, y| b.matvec(x, y), 250, EigWhich::Smallest).unwrap()[0];
        let dense = crate::dense::sym_eigvals(&b.to_dense());
        assert!((lo - dense[0]).abs() < 1e-8);
    }

    #[test]
    fn block_r_floor_is_hit_exactly() {
        let spec = BlockRSpec::default_for(80, 3);
        let r = build_block_r(&spec).unwrap();
        let evals = crate::dense::sym_eigvals(&r.to_dense());
        assert!((evals[0] - 0.41).abs() < 1e-8);
    }

    #[test]
    fn block_r_is_exactly_symmetric() {
        let spec = BlockRSpec::default_for(60, 5);
        let r = build_block_r(&spec).unwrap();
        for i in 0..60 {
            for j in 0..60 {
                assert_eq!(r.get(i, j), r.get(j, i));
            }
        }
    }

    #[test]
    fn zero_pcorr_gives_block_diagonal_r() {
        let mut spec = BlockRSpec::default_for(40, 7);
        spec.pcorr = vec![0.0; 6];
        let r = build_block_r(&spec).unwrap();
        let starts = [0usize, 10, 20, 30, 40];
        for i in 0..40 {
            for j in 0..40 {
                let bi = starts.iter().rposition(|&s| s <= i).unwrap();
                let bj = starts.iter().rposition(|&s| s <= j).unwrap();
                if bi != bj {
                    assert_eq!(r.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn block_r_builder_is_deterministic() {
        let spec = BlockRSpec::default_for(50, 11);
        let a = build_block_r(&spec).unwrap();
        let b = build_block_r(&spec).unwrap();
        assert_eq!(a.to_dense(), b.to_dense());
    }

    #[test]
    fn block_r_conditioning_grows_with_p() {
        let small = build_block_r(&BlockRSpec::default_for(60, 2)).unwrap();
        let large = build_block_r(&BlockRSpec::default_for(400, 2)).unwrap();
        let es = crate::dense::sym_eigvals(&small.to_dense());
        let el = crate::dense::sym_eigvals(&large.to_dense());
        assert!((es[0] - 0.41).abs() < 1e-8);
        assert!((el[0] - 0.41).abs() < 1e-8);
        assert!(el.last().unwrap() > es.last().unwrap());
    }

    #[test]
    fn obs_operator_without_smoothing_at_full_coverage_is_identity() {
        let h = build_obs_operator(12, 12, false, 1).unwrap();
        let d = h.to_dense_block();
        assert_eq!(d, nalgebra::DMatrix::identity(12, 12));
    }

    #[test]
    fn obs_rows_sum_to_one_and_are_ordered() {
        let h = build_obs_operator(60, 20, true, 5).unwrap();
        let mut last = 0usize;
        for (r, row) in h.rows.iter().enumerate() {
            let sum: f64 = row.iter().map(|&(_, v)| v).sum();
            assert!((sum - 1.0).abs() < 1e-15);
            let center = if row.len() == 5 { row[2].0 } else { row[0].0 };
            if r > 0 {
                assert!(center > last);
            }
            last = center;
        }
    }

    #[test]
    fn obs_gram_diagonal_distinguishes_direct_and_smoothed_rows() {
        let h = build_obs_operator(40, 10, true, 8).unwrap();
        let d = h.to_dense_block();
        let gram = &d * d.transpose();
        for r in 0..10 {
            let expected = if r % 2 == 1 { 0.2 } else { 1.0 };
            assert!((gram[(r, r)] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn obs_operator_rejects_oversampling() {
        assert!(build_obs_operator(10, 11, false, 0).is_err());
        assert!(build_obs_operator(10, 8, true, 0).is_err());
    }

    #[test]
    fn d_with_zero_subwindows_is_b_alone() {
        let b = SparseSym::from_diag(&[1.0, 2.0]);
        let q = SparseSym::from_diag(&[3.0, 4.0]);
        let d = CovarianceSet::assemble_d(b, q, 0);
        assert_eq!(d.num_blocks(), 1);
        assert_eq!(d.block(0).get(1, 1), 2.0);
    }

    #[test]
    fn covariance_set_matvec_matches_dense_kron_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let spec_b = SoarSpec { lengthscale: 0.6, maxval: 5, amplitude: 0.4, dim: 8 };
        let spec_q = SoarSpec { lengthscale: 0.5, maxval: 4, amplitude: 0.2, dim: 8 };
        let b = build_circulant_spd(&spec_b, &mut rng);
        let q = build_circulant_spd(&spec_q, &mut rng);
        let n = 3;
        let d = CovarianceSet::assemble_d(b.clone(), q.clone(), n);

        // dense oracle: explicit block-diagonal assembly
        let mut dd = nalgebra::DMatrix::<f64>::zeros(32, 32);
        dd.view_mut((0, 0), (8, 8)).copy_from(&b.to_dense());
        for i in 1..=n {
            dd.view_mut((8 * i, 8 * i), (8, 8)).copy_from(&q.to_dense());
        }
        let x: Vec<f64> = (0..32).map(|_| rng.next_u32() as f64 / u32::MAX as f64).collect();
        let mut y = vec![0.0; 32];
        d.matvec(&x, &mut y);
        let yd = &dd * nalgebra::DVector::from_column_slice(&x);
        assert!(rel_err(&y, yd.as_slice()) < 1e-13);
    }

    #[test]
    fn built_covariances_admit_dense_cholesky() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let b = build_circulant_spd(&SoarSpec::background(500), &mut rng);
        let q = build_circulant_spd(&SoarSpec::model_error(500), &mut rng);
        let r = build_block_r(&BlockRSpec::default_for(200, 31)).unwrap();
        assert!(b.to_dense().cholesky().is_some());
        assert!(q.to_dense().cholesky().is_some());
        assert!(r.to_dense().cholesky().is_some());
    }

    #[test]
    fn covariance_set_shares_storage() {
        let b = SparseSym::identity(6);
        let q = SparseSym::identity(6);
        let d = CovarianceSet::assemble_d(b, q, 50);
        assert_eq!(d.distinct_count(), 2);
        let r = CovarianceSet::assemble_r(SparseSym::identity(4), 50);
        assert_eq!(r.distinct_count(), 1);
    }
}
