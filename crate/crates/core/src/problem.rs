//! End-to-end assembly of the reference experiments: builds the model
//! chain, the covariances, the observation operator, and the saddle
//! operator, and dispatches one preconditioned solve per grid cell.

use std::sync::Arc;

use thiserror::Error;

use crate::covariance::{
    build_block_r, build_circulant_spd, build_obs_operator, BlockRSpec, CovarianceSet,
    CovarianceError, ObsOperator, SoarSpec,
};
use crate::krylov::{gmres, minres, KrylovError, KrylovOptions, SolveReport};
use crate::lprecond::BlockBandedOperator;
use crate::models::{
    heat_tlm_block, lorenz_flow, lorenz_spinup_state, lorenz_tlm_block, HeatModel,
    Lorenz96Model, ModelError, TangentLinearBlock,
};
use crate::rprecond::{self, RHat, RHatVariant, RPrecondError};
use crate::saddle::{DHat, Preconditioner, PrecondShape, SaddleError, SaddleOperator};
use crate::sparse::SparseSym;
use crate::spectra::DenseParts;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Covariance(#[from] CovarianceError),
    #[error(transparent)]
    RPrecond(#[from] RPrecondError),
    #[error(transparent)]
    Saddle(#[from] SaddleError),
    #[error(transparent)]
    Krylov(#[from] KrylovError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Lorenz,
    Heat,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Lorenz => write!(f, "lorenz"),
            ModelKind::Heat => write!(f, "heat"),
        }
    }
}

/// Everything needed to assemble one data-assimilation problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub model: ModelKind,
    pub s: usize,
    pub p: usize,
    /// number of subwindows N (the saddle system has N+1 time blocks)
    pub n: usize,
    pub steps_per_subwindow: usize,
    /// Lorenz 96 time step
    pub dt: f64,
    /// heat-equation ratio alpha dt / dx^2
    pub heat_ratio: f64,
    /// replace B and Q by the identity (spectral studies)
    pub d_identity: bool,
    /// smooth alternate observation rows over 5 state variables
    pub obs_smoothing: bool,
    pub r_spec: BlockRSpec,
    pub seed: u64,
}

impl ProblemSpec {
    /// Lorenz 96 experiment defaults: `N = 15`, `dt = 1e-4`, `p = s/2`.
    pub fn lorenz(s: usize, seed: u64) -> Self {
        let p = s / 2;
        Self {
            model: ModelKind::Lorenz,
            s,
            p,
            n: 15,
            steps_per_subwindow: 10,
            dt: 1e-4,
            heat_ratio: 0.4,
            d_identity: false,
            obs_smoothing: true,
            r_spec: BlockRSpec::default_for(p, child_seed(seed, 3)),
            seed,
        }
    }

    /// Heat-equation experiment defaults: `N = 5`, `r = 0.4`, `p = s/4`.
    pub fn heat(s: usize, seed: u64) -> Self {
        let p = s / 4;
        Self {
            model: ModelKind::Heat,
            s,
            p,
            n: 5,
            steps_per_subwindow: 10,
            dt: 1e-4,
            heat_ratio: 0.4,
            d_identity: false,
            obs_smoothing: true,
            r_spec: BlockRSpec::default_for(p, child_seed(seed, 3)),
            seed,
        }
    }
}

/// splitmix64 step, used to derive independent seeds per builder.
pub fn child_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A fully assembled problem: model chain, covariances, observation
/// operator, and the right-hand side.
#[derive(Debug)]
pub struct Problem {
    pub spec: ProblemSpec,
    pub models: Vec<Arc<TangentLinearBlock>>,
    pub b: SparseSym,
    pub q: SparseSym,
    pub r_i: SparseSym,
    pub h: ObsOperator,
    pub rhs: Vec<f64>,
}

impl Problem {
    pub fn build(spec: ProblemSpec) -> Result<Self, ProblemError> {
        let models: Vec<Arc<TangentLinearBlock>> = match spec.model {
            ModelKind::Lorenz => {
                let model = Lorenz96Model::new(spec.s, spec.dt, spec.steps_per_subwindow)?;
                let mut state = lorenz_spinup_state(&model);
                let mut blocks = Vec::with_capacity(spec.n);
                for _ in 0..spec.n {
                    blocks.push(Arc::new(lorenz_tlm_block(&model, &state)));
                    state = lorenz_flow(&model, &state, spec.steps_per_subwindow);
                }
                blocks
            }
            ModelKind::Heat => {
                let model = HeatModel::new(spec.s, spec.heat_ratio, spec.steps_per_subwindow)?;
                let block = Arc::new(heat_tlm_block(&model));
                vec![block; spec.n]
            }
        };

        let (b, q) = if spec.d_identity {
            (SparseSym::identity(spec.s), SparseSym::identity(spec.s))
        } else {
            let mut rng_b = ChaCha12Rng::seed_from_u64(child_seed(spec.seed, 1));
            let mut rng_q = ChaCha12Rng::seed_from_u64(child_seed(spec.seed, 2));
            (
                build_circulant_spd(&SoarSpec::background(spec.s), &mut rng_b),
                build_circulant_spd(&SoarSpec::model_error(spec.s), &mut rng_q),
            )
        };
        let r_i = build_block_r(&spec.r_spec)?;
        let h = build_obs_operator(spec.s, spec.p, spec.obs_smoothing, child_seed(spec.seed, 4))?;

        // right-hand side (b, d, 0): background and innovation blocks drawn
        // from the seeded generator, multiplier block zero
        let mut rng = ChaCha12Rng::seed_from_u64(child_seed(spec.seed, 5));
        let nb = spec.n + 1;
        let dim = (2 * spec.s + spec.p) * nb;
        let mut rhs = vec![0.0; dim];
        for v in rhs.iter_mut().take(nb * (spec.s + spec.p)) {
            *v = rng.gen_range(-1.0..1.0);
        }

        Ok(Self { spec, models, b, q, r_i, h, rhs })
    }

    pub fn operator(&self) -> Result<SaddleOperator, ProblemError> {
        Ok(SaddleOperator::new(
            CovarianceSet::assemble_d(self.b.clone(), self.q.clone(), self.spec.n),
            CovarianceSet::assemble_r(self.r_i.clone(), self.spec.n),
            self.h.clone(),
            BlockBandedOperator::exact(self.spec.s, &self.models),
        )?)
    }

    pub fn make_lhat(&self, kind: LHatKind, k: usize) -> BlockBandedOperator {
        match kind {
            LHatKind::L0 => BlockBandedOperator::l0(self.spec.s, self.spec.n),
            LHatKind::LI => BlockBandedOperator::li(self.spec.s, self.spec.n),
            LHatKind::LM => BlockBandedOperator::lm(self.spec.s, &self.models, k),
            LHatKind::Exact => BlockBandedOperator::exact(self.spec.s, &self.models),
        }
    }

    pub fn make_rhat(&self, params: &RHatParams) -> Result<RHat, ProblemError> {
        let r_i = &self.r_i;
        let rhat = match params.variant {
            RHatVariant::Diag => rprecond::make_diag(r_i)?,
            RHatVariant::Block => {
                let tol = match params.block_tol {
                    Some(t) => t,
                    None => rprecond::auto_block_tol(r_i, &self.spec.r_spec.pvec),
                };
                rprecond::make_block(
                    r_i,
                    &self.spec.r_spec.pvec,
                    tol,
                    params.block_maxsize,
                    params.block_numproc,
                )?
            }
            RHatVariant::Rr => {
                let gamma = match params.rr_gamma {
                    Some(g) => g,
                    None => rprecond::auto_gamma(r_i)?,
                };
                rprecond::make_rr(r_i, gamma)?
            }
            RHatVariant::Me => {
                let t = match params.me_t {
                    Some(t) => t,
                    None => rprecond::auto_me_threshold(r_i)?,
                };
                rprecond::make_me(r_i, t)?
            }
            RHatVariant::Exact => rprecond::make_exact(r_i)?,
        };
        Ok(rhat)
    }

    /// Incomplete factors of the ridge-shifted `B` and `Q` (inflation 0.01).
    pub fn make_dhat(&self, op: &SaddleOperator) -> Result<DHat, ProblemError> {
        Ok(DHat::from_covariances(op.d(), DHAT_RIDGE)?)
    }
}

/// Ridge inflation applied to `B` and `Q` before factorizing `Dhat`.
pub const DHAT_RIDGE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LHatKind {
    L0,
    LI,
    LM,
    Exact,
}

impl std::fmt::Display for LHatKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LHatKind::L0 => write!(f, "l0"),
            LHatKind::LI => write!(f, "li"),
            LHatKind::LM => write!(f, "lm"),
            LHatKind::Exact => write!(f, "exact"),
        }
    }
}

/// Parameters for realizing one `Rhat` variant; `None` selects the online
/// choice (norm-scaled tolerance, `gamma = lambda_min`, `T = lambda_2`).
#[derive(Debug, Clone, Default)]
pub struct RHatParams {
    pub variant: RHatVariant,
    pub block_tol: Option<f64>,
    pub block_maxsize: Option<usize>,
    pub block_numproc: Option<usize>,
    pub rr_gamma: Option<f64>,
    pub me_t: Option<f64>,
}

impl RHatParams {
    pub fn of(variant: RHatVariant) -> Self {
        Self { variant, ..Default::default() }
    }
}

/// Runs one grid cell: MINRES for the block-diagonal shape, GMRES for the
/// inexact-constraint shape. Counters are reset before the solve and the
/// tallies are copied into the report.
pub fn solve_cell(
    op: &SaddleOperator,
    pre: &Preconditioner,
    rhs: &[f64],
    opts: &KrylovOptions,
) -> Result<(Vec<f64>, SolveReport), ProblemError> {
    op.counters().reset();
    let n = op.dim();
    let result = match pre.shape {
        PrecondShape::BlockDiag => minres(
            n,
            |x: &[f64], y: &mut [f64]| op.apply(x, y),
            |x: &[f64], y: &mut [f64]| {
                op.apply_pd_inverse(pre, x, y).expect("block-diagonal shape carries a Dhat")
            },
            rhs,
            opts,
        )?,
        PrecondShape::InexactConstraint => gmres(
            n,
            |x: &[f64], y: &mut [f64]| op.apply(x, y),
            |x: &[f64], y: &mut [f64]| op.apply_pi_inverse(pre, x, y),
            rhs,
            opts,
        )?,
    };
    let (x, mut report) = result;
    report.counts = op.counters().snapshot();
    Ok((x, report))
}

/// Assembles the dense pieces needed by the spectral summaries (desk
/// scale only).
pub fn dense_parts_for(op: &SaddleOperator, pre: &Preconditioner) -> DenseParts {
    let nb = op.num_blocks();
    let s = op.state_dim();
    let p = op.obs_dim();
    let d = op.d().to_dense();
    let r = op.r().to_dense();
    let l = op.l().to_dense();
    let l_hat = pre.l_hat.to_dense();

    let d_hat_inv = match &pre.d_hat {
        Some(dh) => crate::dense::from_operator(nb * s, |x, y| {
            for i in 0..nb {
                dh.solve_slot(i, &x[i * s..(i + 1) * s], &mut y[i * s..(i + 1) * s]);
            }
        }),
        None => nalgebra::DMatrix::identity(nb * s, nb * s),
    };
    let r_hat_inv = crate::dense::from_operator(nb * p, |x, y| {
        for i in 0..nb {
            pre.r_hat.solve(&x[i * p..(i + 1) * p], &mut y[i * p..(i + 1) * p]);
        }
    });
    let hd = op.h().to_dense_block();
    let mut h = nalgebra::DMatrix::zeros(nb * p, nb * s);
    for i in 0..nb {
        h.view_mut((i * p, i * s), (p, s)).copy_from(&hd);
    }
    DenseParts { d, d_hat_inv, r, r_hat_inv, l, l_hat, h }
}
