//! The matrix-free saddle operator and the two preconditioner
//! applications, with per-constituent matvec counters.
//!
//! Vectors are laid out as `(x1, x2, x3)` with `x1, x3` of length
//! `(N+1) s` and `x2` of length `(N+1) p`.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::covariance::{CovarianceSet, ObsOperator};
use crate::lprecond::BlockBandedOperator;
use crate::rprecond::RHat;
use crate::sparse::{ichol_zero_fill, IncChol, SparseError};
use crate::vecops::axpy;

#[derive(Debug, Error)]
pub enum SaddleError {
    #[error("inconsistent dimensions: {0}")]
    Dimensions(String),
    #[error("block-diagonal preconditioner requires a Dhat factorization")]
    MissingDhat,
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

/// Matvec tallies per constituent matrix, accumulated across a solve.
#[derive(Debug, Default)]
pub struct Counters {
    r_apply: AtomicU64,
    rhat_inv: AtomicU64,
    d_apply: AtomicU64,
    dhat_inv: AtomicU64,
    model: AtomicU64,
    lhat_inv: AtomicU64,
    lhat_inv_transpose: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CounterSnapshot {
    /// products with the blocks `R_i`
    pub r_apply: u64,
    /// applications of `Rhat_i^{-1}` blocks
    pub rhat_inv: u64,
    /// products with the blocks of `D` (`B` and `Q`)
    pub d_apply: u64,
    /// applications of `Dhat_i^{-1}` blocks
    pub dhat_inv: u64,
    /// model matvecs `M_i` or `M_i'`
    pub model: u64,
    /// whole-operator `Lhat^{-1}` applications
    pub lhat_inv: u64,
    /// whole-operator `Lhat^{-T}` applications
    pub lhat_inv_transpose: u64,
}

impl Counters {
    fn add(&self, field: &AtomicU64, n: u64) {
        field.fetch_add(n, Ordering::Relaxed);
    }

    pub fn reset(&self) {
        for f in [
            &self.r_apply,
            &self.rhat_inv,
            &self.d_apply,
            &self.dhat_inv,
            &self.model,
            &self.lhat_inv,
            &self.lhat_inv_transpose,
        ] {
            f.store(0, Ordering::Relaxed);
        }
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            r_apply: self.r_apply.load(Ordering::Relaxed),
            rhat_inv: self.rhat_inv.load(Ordering::Relaxed),
            d_apply: self.d_apply.load(Ordering::Relaxed),
            dhat_inv: self.dhat_inv.load(Ordering::Relaxed),
            model: self.model.load(Ordering::Relaxed),
            lhat_inv: self.lhat_inv.load(Ordering::Relaxed),
            lhat_inv_transpose: self.lhat_inv_transpose.load(Ordering::Relaxed),
        }
    }
}

/// Incomplete factors of the ridge-shifted blocks of `D`, sharing the
/// distinct-block structure of the covariance set.
#[derive(Debug)]
pub struct DHat {
    factors: Vec<IncChol>,
    slots: Vec<usize>,
}

impl DHat {
    /// Factorizes `block + ridge*I` for each distinct block of `D`.
    pub fn from_covariances(d: &CovarianceSet, ridge: f64) -> Result<Self, SaddleError> {
        let factors = d
            .distinct_blocks()
            .iter()
            .map(|b| ichol_zero_fill(&b.with_diag_shift(ridge)))
            .collect::<Result<Vec<_>, _>>()?;
        let slots = (0..d.num_blocks())
            .map(|i| {
                d.distinct_blocks()
                    .iter()
                    .position(|b| std::ptr::eq(b, d.block(i)))
                    .unwrap()
            })
            .collect();
        Ok(Self { factors, slots })
    }

    pub fn solve_slot(&self, slot: usize, x: &[f64], y: &mut [f64]) {
        let sol = self.factors[self.slots[slot]].solve(x);
        y.copy_from_slice(&sol);
    }

    pub fn factors(&self) -> &[IncChol] {
        &self.factors
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecondShape {
    BlockDiag,
    InexactConstraint,
}

impl std::fmt::Display for PrecondShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PrecondShape::BlockDiag => write!(f, "pd"),
            PrecondShape::InexactConstraint => write!(f, "pi"),
        }
    }
}

/// A realized preconditioner: shape plus the `Lhat`, `Rhat`, and (for the
/// block-diagonal shape) `Dhat` parts.
#[derive(Debug)]
pub struct Preconditioner {
    pub shape: PrecondShape,
    pub l_hat: BlockBandedOperator,
    pub r_hat: RHat,
    pub d_hat: Option<DHat>,
}

impl Preconditioner {
    pub fn block_diag(
        l_hat: BlockBandedOperator,
        r_hat: RHat,
        d_hat: DHat,
    ) -> Self {
        Self { shape: PrecondShape::BlockDiag, l_hat, r_hat, d_hat: Some(d_hat) }
    }

    /// The inexact-constraint shape never applies `Dhat^{-1}`.
    pub fn inexact_constraint(l_hat: BlockBandedOperator, r_hat: RHat) -> Self {
        Self { shape: PrecondShape::InexactConstraint, l_hat, r_hat, d_hat: None }
    }
}

/// The symmetric indefinite operator
/// `[[D, 0, L], [0, R, H], [L', H', 0]]` applied matrix-free.
#[derive(Debug)]
pub struct SaddleOperator {
    d: CovarianceSet,
    r: CovarianceSet,
    h: ObsOperator,
    l: BlockBandedOperator,
    counters: Counters,
}

impl SaddleOperator {
    pub fn new(
        d: CovarianceSet,
        r: CovarianceSet,
        h: ObsOperator,
        l: BlockBandedOperator,
    ) -> Result<Self, SaddleError> {
        let nb = d.num_blocks();
        if r.num_blocks() != nb || l.num_blocks() != nb {
            return Err(SaddleError::Dimensions(format!(
                "block counts disagree: D has {nb}, R has {}, L has {}",
                r.num_blocks(),
                l.num_blocks()
            )));
        }
        if h.state_dim() != d.block_dim() || h.obs_dim() != r.block_dim() {
            return Err(SaddleError::Dimensions(format!(
                "H is {}x{} but D blocks are {} and R blocks are {}",
                h.obs_dim(),
                h.state_dim(),
                d.block_dim(),
                r.block_dim()
            )));
        }
        if l.block_dim() != d.block_dim() {
            return Err(SaddleError::Dimensions(format!(
                "L blocks are {} but D blocks are {}",
                l.block_dim(),
                d.block_dim()
            )));
        }
        Ok(Self { d, r, h, l, counters: Counters::default() })
    }

    pub fn state_dim(&self) -> usize {
        self.d.block_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.r.block_dim()
    }

    pub fn num_blocks(&self) -> usize {
        self.d.num_blocks()
    }

    /// Total dimension `(2s + p)(N + 1)`.
    pub fn dim(&self) -> usize {
        (2 * self.state_dim() + self.obs_dim()) * self.num_blocks()
    }

    pub fn d(&self) -> &CovarianceSet {
        &self.d
    }

    pub fn r(&self) -> &CovarianceSet {
        &self.r
    }

    pub fn h(&self) -> &ObsOperator {
        &self.h
    }

    pub fn l(&self) -> &BlockBandedOperator {
        &self.l
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    fn splits(&self) -> (usize, usize) {
        let nb = self.num_blocks();
        (nb * self.state_dim(), nb * (self.state_dim() + self.obs_dim()))
    }

    /// `y = A x = (D x1 + L x3, R x2 + H x3, L' x1 + H' x2)`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.dim(), "saddle operator dimension mismatch");
        let (a, b) = self.splits();
        let nb = self.num_blocks();
        let s = self.state_dim();
        let p = self.obs_dim();
        let (x1, x23) = x.split_at(a);
        let (x2, x3) = x23.split_at(b - a);
        let (y1, y23) = y.split_at_mut(a);
        let (y2, y3) = y23.split_at_mut(b - a);

        // c1 = D x1 + L x3
        self.d.matvec(x1, y1);
        self.counters.add(&self.counters.d_apply, nb as u64);
        let mut tmp = vec![0.0; a];
        self.l.apply(x3, &mut tmp);
        self.counters.add(&self.counters.model, self.l.num_model_blocks() as u64);
        axpy(y1, 1.0, &tmp);

        // c2 = R x2 + H x3
        self.r.matvec(x2, y2);
        self.counters.add(&self.counters.r_apply, nb as u64);
        let mut hp = vec![0.0; p];
        for i in 0..nb {
            self.h.apply_block(&x3[i * s..(i + 1) * s], &mut hp);
            axpy(&mut y2[i * p..(i + 1) * p], 1.0, &hp);
        }

        // c3 = L' x1 + H' x2
        self.l.apply_transpose(x1, y3);
        self.counters.add(&self.counters.model, self.l.num_model_blocks() as u64);
        let mut hs = vec![0.0; s];
        for i in 0..nb {
            self.h.apply_block_transpose(&x2[i * p..(i + 1) * p], &mut hs);
            axpy(&mut y3[i * s..(i + 1) * s], 1.0, &hs);
        }
    }

    /// `y = P_D^{-1} x = (Dhat^{-1} x1, Rhat^{-1} x2,
    /// Lhat^{-1} D Lhat^{-T} x3)`; the third block is the Schur
    /// approximation with the `H` term dropped.
    pub fn apply_pd_inverse(
        &self,
        pre: &Preconditioner,
        x: &[f64],
        y: &mut [f64],
    ) -> Result<(), SaddleError> {
        let d_hat = pre.d_hat.as_ref().ok_or(SaddleError::MissingDhat)?;
        let (a, b) = self.splits();
        let nb = self.num_blocks();
        let s = self.state_dim();
        let p = self.obs_dim();
        let (x1, x23) = x.split_at(a);
        let (x2, x3) = x23.split_at(b - a);
        let (y1, y23) = y.split_at_mut(a);
        let (y2, y3) = y23.split_at_mut(b - a);

        for i in 0..nb {
            d_hat.solve_slot(i, &x1[i * s..(i + 1) * s], &mut y1[i * s..(i + 1) * s]);
        }
        self.counters.add(&self.counters.dhat_inv, nb as u64);

        for i in 0..nb {
            pre.r_hat.solve(&x2[i * p..(i + 1) * p], &mut y2[i * p..(i + 1) * p]);
        }
        self.counters.add(&self.counters.rhat_inv, nb as u64);

        // Shat^{-1} = Lhat^{-1} D Lhat^{-T}, with the exact D inside
        let mut t = vec![0.0; a];
        pre.l_hat.apply_inverse_transpose(x3, &mut t);
        self.counters.add(&self.counters.lhat_inv_transpose, 1);
        self.counters.add(&self.counters.model, pre.l_hat.num_model_blocks() as u64);
        let mut dt = vec![0.0; a];
        self.d.matvec(&t, &mut dt);
        self.counters.add(&self.counters.d_apply, nb as u64);
        pre.l_hat.apply_inverse(&dt, y3);
        self.counters.add(&self.counters.lhat_inv, 1);
        self.counters.add(&self.counters.model, pre.l_hat.num_model_blocks() as u64);
        Ok(())
    }

    /// `y = P_I^{-1} x` via the three-step scheme
    /// `c1 = Lhat^{-T} x3; c2 = Rhat^{-1} x2; c3 = Lhat^{-1}(x1 - D c1)`,
    /// which reuses `c1` to avoid a second `Lhat^{-T}` and never applies
    /// `Dhat^{-1}`.
    pub fn apply_pi_inverse(&self, pre: &Preconditioner, x: &[f64], y: &mut [f64]) {
        let (a, b) = self.splits();
        let nb = self.num_blocks();
        let p = self.obs_dim();
        let (x1, x23) = x.split_at(a);
        let (x2, x3) = x23.split_at(b - a);
        let (y1, y23) = y.split_at_mut(a);
        let (y2, y3) = y23.split_at_mut(b - a);

        pre.l_hat.apply_inverse_transpose(x3, y1);
        self.counters.add(&self.counters.lhat_inv_transpose, 1);
        self.counters.add(&self.counters.model, pre.l_hat.num_model_blocks() as u64);

        for i in 0..nb {
            pre.r_hat.solve(&x2[i * p..(i + 1) * p], &mut y2[i * p..(i + 1) * p]);
        }
        self.counters.add(&self.counters.rhat_inv, nb as u64);

        let mut dc1 = vec![0.0; a];
        self.d.matvec(y1, &mut dc1);
        self.counters.add(&self.counters.d_apply, nb as u64);
        let mut t = x1.to_vec();
        axpy(&mut t, -1.0, &dc1);
        pre.l_hat.apply_inverse(&t, y3);
        self.counters.add(&self.counters.lhat_inv, 1);
        self.counters.add(&self.counters.model, pre.l_hat.num_model_blocks() as u64);
    }
}
