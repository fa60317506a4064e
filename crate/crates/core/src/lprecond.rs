//! The model-term operator `L` (unit lower block-bidiagonal) and its
//! approximations `L_0`, `L_I`, and `L_M(k)`, each exposing matvec,
//! transpose matvec, inverse apply, and inverse-transpose apply.
//!
//! `L_M(k)` zeroes every sub-diagonal block whose index is divisible by
//! `k`, which decouples the inverse into `ceil((N+1)/k)` independent
//! substitution chains.

use std::ops::Range;
use std::sync::Arc;

use crate::models::TangentLinearBlock;

/// One sub-diagonal block of the operator.
#[derive(Debug, Clone)]
pub enum SubBlock {
    Zero,
    NegIdentity,
    NegModel(Arc<TangentLinearBlock>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LFlavor {
    Exact,
    L0,
    LI,
    LM(usize),
}

impl std::fmt::Display for LFlavor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LFlavor::Exact => write!(f, "exact"),
            LFlavor::L0 => write!(f, "l0"),
            LFlavor::LI => write!(f, "li"),
            LFlavor::LM(k) => write!(f, "lm(k={k})"),
        }
    }
}

/// `N+1` identity diagonal blocks of size `s` with `N` sub-diagonal blocks.
#[derive(Debug, Clone)]
pub struct BlockBandedOperator {
    s: usize,
    sub: Vec<SubBlock>,
    flavor: LFlavor,
}

impl BlockBandedOperator {
    /// The exact model term: sub-diagonal `j` holds `-M_j`.
    pub fn exact(s: usize, models: &[Arc<TangentLinearBlock>]) -> Self {
        let sub = models.iter().map(|m| SubBlock::NegModel(m.clone())).collect();
        Self { s, sub, flavor: LFlavor::Exact }
    }

    /// `L_0`: every sub-diagonal zeroed, i.e. the identity.
    pub fn l0(s: usize, n: usize) -> Self {
        Self { s, sub: vec![SubBlock::Zero; n], flavor: LFlavor::L0 }
    }

    /// `L_I`: sub-diagonals replaced with the negative identity.
    pub fn li(s: usize, n: usize) -> Self {
        Self { s, sub: vec![SubBlock::NegIdentity; n], flavor: LFlavor::LI }
    }

    /// `L_M(k)`: sub-diagonal `j` (1-based) is zeroed exactly when `j` is
    /// divisible by `k`, otherwise it holds `-M_j`.
    pub fn lm(s: usize, models: &[Arc<TangentLinearBlock>], k: usize) -> Self {
        assert!(k >= 1, "L_M requires k >= 1");
        let sub = models
            .iter()
            .enumerate()
            .map(|(t, m)| {
                if (t + 1) % k == 0 {
                    SubBlock::Zero
                } else {
                    SubBlock::NegModel(m.clone())
                }
            })
            .collect();
        Self { s, sub, flavor: LFlavor::LM(k) }
    }

    pub fn flavor(&self) -> LFlavor {
        self.flavor
    }

    pub fn block_dim(&self) -> usize {
        self.s
    }

    /// Number of diagonal blocks, `N + 1`.
    pub fn num_blocks(&self) -> usize {
        self.sub.len() + 1
    }

    pub fn dim(&self) -> usize {
        self.s * self.num_blocks()
    }

    /// Number of model matvecs one apply (or inverse apply) performs.
    pub fn num_model_blocks(&self) -> usize {
        self.sub
            .iter()
            .filter(|b| matches!(b, SubBlock::NegModel(_)))
            .count()
    }

    fn sub_apply(&self, t: usize, x: &[f64], y: &mut [f64]) {
        match &self.sub[t] {
            SubBlock::Zero => y.iter_mut().for_each(|v| *v = 0.0),
            SubBlock::NegIdentity => y.copy_from_slice(x),
            SubBlock::NegModel(m) => m.matvec(x, y),
        }
    }

    fn sub_apply_transpose(&self, t: usize, x: &[f64], y: &mut [f64]) {
        match &self.sub[t] {
            SubBlock::Zero => y.iter_mut().for_each(|v| *v = 0.0),
            SubBlock::NegIdentity => y.copy_from_slice(x),
            SubBlock::NegModel(m) => m.matvec_transpose(x, y),
        }
    }

    /// y = L x: block `i` of the result is `x_i - M_i x_{i-1}`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let s = self.s;
        debug_assert_eq!(x.len(), self.dim());
        y[..s].copy_from_slice(&x[..s]);
        let mut tmp = vec![0.0; s];
        for t in 0..self.sub.len() {
            let b = t + 1;
            self.sub_apply(t, &x[t * s..b * s], &mut tmp);
            for i in 0..s {
                y[b * s + i] = x[b * s + i] - tmp[i];
            }
        }
    }

    /// y = L' x: block `i` of the result is `x_i - M_{i+1}' x_{i+1}`.
    pub fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        let s = self.s;
        let nb = self.num_blocks();
        debug_assert_eq!(x.len(), self.dim());
        y[(nb - 1) * s..].copy_from_slice(&x[(nb - 1) * s..]);
        let mut tmp = vec![0.0; s];
        for t in 0..self.sub.len() {
            self.sub_apply_transpose(t, &x[(t + 1) * s..(t + 2) * s], &mut tmp);
            for i in 0..s {
                y[t * s + i] = x[t * s + i] - tmp[i];
            }
        }
    }

    /// y = L^{-1} x by forward substitution over the decoupled chains.
    pub fn apply_inverse(&self, x: &[f64], y: &mut [f64]) {
        let chains = self.chain_partition();
        let order: Vec<usize> = (0..chains.len()).collect();
        self.apply_inverse_in_chain_order(x, y, &order);
    }

    /// y = L^{-T} x by backward substitution over the decoupled chains.
    pub fn apply_inverse_transpose(&self, x: &[f64], y: &mut [f64]) {
        let chains = self.chain_partition();
        let order: Vec<usize> = (0..chains.len()).collect();
        self.apply_inverse_transpose_in_chain_order(x, y, &order);
    }

    /// Chain-order variants: the chains are independent, so any evaluation
    /// order must produce bit-identical output (asserted in tests).
    pub(crate) fn apply_inverse_in_chain_order(
        &self,
        x: &[f64],
        y: &mut [f64],
        order: &[usize],
    ) {
        let s = self.s;
        debug_assert_eq!(x.len(), self.dim());
        let chains = self.chain_partition();
        let mut tmp = vec![0.0; s];
        for &c in order {
            let chain = &chains[c];
            for b in chain.clone() {
                if b == chain.start {
                    y[b * s..(b + 1) * s].copy_from_slice(&x[b * s..(b + 1) * s]);
                } else {
                    let (prev, cur) = y[(b - 1) * s..(b + 1) * s].split_at_mut(s);
                    self.sub_apply(b - 1, prev, &mut tmp);
                    for i in 0..s {
                        cur[i] = x[b * s + i] + tmp[i];
                    }
                }
            }
        }
    }

    pub(crate) fn apply_inverse_transpose_in_chain_order(
        &self,
        x: &[f64],
        y: &mut [f64],
        order: &[usize],
    ) {
        let s = self.s;
        debug_assert_eq!(x.len(), self.dim());
        let chains = self.chain_partition();
        let mut tmp = vec![0.0; s];
        for &c in order {
            let chain = &chains[c];
            for b in chain.clone().rev() {
                if b + 1 == chain.end {
                    y[b * s..(b + 1) * s].copy_from_slice(&x[b * s..(b + 1) * s]);
                } else {
                    let (cur, next) = y[b * s..(b + 2) * s].split_at_mut(s);
                    self.sub_apply_transpose(b, next, &mut tmp);
                    for i in 0..s {
                        cur[i] = x[b * s + i] + tmp[i];
                    }
                }
            }
        }
    }

    /// Decoupled block-index chains of the inverse. A chain ends wherever a
    /// sub-diagonal block is exactly zero; `L_M(k)` therefore yields
    /// `ceil((N+1)/k)` chains, the exact `L` a single chain of length `N+1`.
    pub fn chain_partition(&self) -> Vec<Range<usize>> {
        let mut chains = Vec::new();
        let mut start = 0;
        for (t, blk) in self.sub.iter().enumerate() {
            if matches!(blk, SubBlock::Zero) {
                chains.push(start..t + 1);
                start = t + 1;
            }
        }
        chains.push(start..self.num_blocks());
        chains
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        crate::dense::from_operator(self.dim(), |x, y| self.apply(x, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecops::rel_err;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_models(s: usize, n: usize, rng: &mut ChaCha12Rng) -> Vec<Arc<TangentLinearBlock>> {
        (0..n)
            .map(|_| {
                let m = DMatrix::from_fn(s, s, |_, _| rng.gen_range(-1.0..1.0));
                Arc::new(TangentLinearBlock::Dense(m))
            })
            .collect()
    }

    /// Oracle: the dense block matrix with identity diagonal blocks and
    /// `-M_j` sub-diagonal blocks, assembled entry by entry.
    fn dense_l(s: usize, models: &[Arc<TangentLinearBlock>], k: Option<usize>) -> DMatrix<f64> {
        let nb = models.len() + 1;
        let mut m = DMatrix::identity(nb * s, nb * s);
        for (t, blk) in models.iter().enumerate() {
            if let Some(k) = k {
                if (t + 1) % k == 0 {
                    continue;
                }
            }
            let d = blk.to_dense();
            for i in 0..s {
                for j in 0..s {
                    m[((t + 1) * s + i, t * s + j)] = -d[(i, j)];
                }
            }
        }
        m
    }

    #[test]
    fn l0_applies_as_identity() {
        let l = BlockBandedOperator::l0(3, 4);
        let x: Vec<f64> = (0..15).map(|i| i as f64).collect();
        let mut y = vec![0.0; 15];
        l.apply(&x, &mut y);
        assert_eq!(x, y);
        l.apply_inverse(&x, &mut y);
        assert_eq!(x, y);
        assert_eq!(l.num_model_blocks(), 0);
    }

    #[test]
    fn all_four_actions_match_dense_oracle() {
        let (s, n) = (5, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let models = random_models(s, n, &mut rng);
        let l = BlockBandedOperator::exact(s, &models);
        let dl = dense_l(s, &models, None);
        let x: Vec<f64> = (0..l.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xv = nalgebra::DVector::from_column_slice(&x);

        let mut y = vec![0.0; l.dim()];
        l.apply(&x, &mut y);
        assert!(rel_err(&y, (&dl * &xv).as_slice()) < 1e-13);

        l.apply_transpose(&x, &mut y);
        assert!(rel_err(&y, (dl.transpose() * &xv).as_slice()) < 1e-13);

        let lu = dl.clone().lu();
        l.apply_inverse(&x, &mut y);
        assert!(rel_err(&y, lu.solve(&xv).unwrap().as_slice()) < 1e-13);

        let lut = dl.transpose().lu();
        l.apply_inverse_transpose(&x, &mut y);
        assert!(rel_err(&y, lut.solve(&xv).unwrap().as_slice()) < 1e-13);
    }

    #[test]
    fn lm_with_k_equal_blocks_is_exact_l() {
        let (s, n) = (3, 5);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let models = random_models(s, n, &mut rng);
        let exact = BlockBandedOperator::exact(s, &models);
        let lm = BlockBandedOperator::lm(s, &models, n + 1);
        let x: Vec<f64> = (0..exact.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut ya = vec![0.0; exact.dim()];
        let mut yb = vec![0.0; exact.dim()];
        exact.apply(&x, &mut ya);
        lm.apply(&x, &mut yb);
        assert_eq!(ya, yb);
        assert_eq!(lm.num_model_blocks(), n);
    }

    #[test]
    fn lm_inverse_roundtrip_for_every_k() {
        let (s, n) = (5, 6);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let models = random_models(s, n, &mut rng);
        let x: Vec<f64> = (0..s * (n + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for k in 1..=n + 1 {
            let lm = BlockBandedOperator::lm(s, &models, k);
            let mut y = vec![0.0; lm.dim()];
            let mut z = vec![0.0; lm.dim()];
            lm.apply(&x, &mut y);
            lm.apply_inverse(&y, &mut z);
            assert!(rel_err(&z, &x) < 1e-12, "k = {k}");
            lm.apply_inverse_transpose(&x, &mut y);
            lm.apply_transpose(&y, &mut z);
            assert!(rel_err(&z, &x) < 1e-12, "k = {k} transpose");
        }
    }

    #[test]
    fn inverse_blocks_match_product_formula() {
        // block (i,j) of the dense inverse of L_M(k) is the ordered product
        // M_{i-1} M_{i-2} ... M_j whenever 1 <= i-j <= (i-1) mod k
        let (s, n, k) = (3, 5, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let models = random_models(s, n, &mut rng);
        let lm = BlockBandedOperator::lm(s, &models, k);
        let dinv = dense_l(s, &models, Some(k)).try_inverse().unwrap();
        let nb = n + 1;
        for bi in 1..=nb {
            for bj in 1..=nb {
                let block = dinv.view(((bi - 1) * s, (bj - 1) * s), (s, s)).clone_owned();
                let expected = if bi == bj {
                    DMatrix::identity(s, s)
                } else if bi > bj && bi - bj <= (bi - 1) % k {
                    // product formula from the inverse structure
                    let mut prod = DMatrix::identity(s, s);
                    for m in 1..=(bi - bj) {
                        // multiply by M_{i-m} on the right as m grows:
                        // prod = M_{i-1} M_{i-2} ... M_{i-m}
                        prod *= models[bi - m - 1].to_dense();
                    }
                    prod
                } else {
                    DMatrix::zeros(s, s)
                };
                assert!(
                    (&block - &expected).norm() < 1e-12,
                    "block ({bi},{bj}) mismatch"
                );
            }
        }
        let _ = lm;
    }

    #[test]
    fn chain_partition_counts() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        // N+1 = 16, k = 4: four chains of four blocks
        let models = random_models(2, 15, &mut rng);
        let lm = BlockBandedOperator::lm(2, &models, 4);
        let chains = lm.chain_partition();
        assert_eq!(chains.len(), 4);
        assert!(chains.iter().all(|c| c.len() == 4));

        // k = 1: every block is its own chain
        let l1 = BlockBandedOperator::lm(2, &models, 1);
        assert_eq!(l1.chain_partition().len(), 16);
        assert_eq!(l1.num_model_blocks(), 0);

        // N+1 = 7, k = 3: chains of lengths 3, 3, 1
        let models7 = random_models(2, 6, &mut rng);
        let lm7 = BlockBandedOperator::lm(2, &models7, 3);
        let lens: Vec<usize> = lm7.chain_partition().iter().map(|c| c.len()).collect();
        assert_eq!(lens, vec![3, 3, 1]);

        // exact L: a single chain of length N+1
        let exact = BlockBandedOperator::exact(2, &models7);
        let chains = exact.chain_partition();
        assert_eq!(chains.len(), 1);
        assert_eq!(chains[0].len(), 7);
    }

    #[test]
    fn chain_evaluation_order_does_not_change_output() {
        let (s, n, k) = (4, 9, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let models = random_models(s, n, &mut rng);
        let lm = BlockBandedOperator::lm(s, &models, k);
        let x: Vec<f64> = (0..lm.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nchains = lm.chain_partition().len();
        let forward: Vec<usize> = (0..nchains).collect();
        let reversed: Vec<usize> = (0..nchains).rev().collect();
        let mut y1 = vec![0.0; lm.dim()];
        let mut y2 = vec![0.0; lm.dim()];
        lm.apply_inverse_in_chain_order(&x, &mut y1, &forward);
        lm.apply_inverse_in_chain_order(&x, &mut y2, &reversed);
        assert_eq!(y1, y2);
        lm.apply_inverse_transpose_in_chain_order(&x, &mut y1, &forward);
        lm.apply_inverse_transpose_in_chain_order(&x, &mut y2, &reversed);
        assert_eq!(y1, y2);
    }

    #[test]
    fn negmodel_count_matches_floor_formula() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for n in [5usize, 9, 15] {
            let models = random_models(2, n, &mut rng);
            for k in 1..=n {
                let lm = BlockBandedOperator::lm(2, &models, k);
                assert_eq!(lm.num_model_blocks(), n - n / k, "n={n} k={k}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn prop_roundtrip_all_flavors(seed in 0u64..500, n in 1usize..8, k in 1usize..9) {
            let s = 3;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let models = random_models(s, n, &mut rng);
            let x: Vec<f64> = (0..s * (n + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ops = vec![
                BlockBandedOperator::exact(s, &models),
                BlockBandedOperator::l0(s, n),
                BlockBandedOperator::li(s, n),
                BlockBandedOperator::lm(s, &models, k.min(n + 1)),
            ];
            for op in ops {
                let mut y = vec![0.0; op.dim()];
                let mut z = vec![0.0; op.dim()];
                op.apply(&x, &mut y);
                op.apply_inverse(&y, &mut z);
                prop_assert!(rel_err(&z, &x) < 1e-12);
                op.apply_inverse(&x, &mut y);
                op.apply(&y, &mut z);
                prop_assert!(rel_err(&z, &x) < 1e-12);
            }
        }
    }
}
