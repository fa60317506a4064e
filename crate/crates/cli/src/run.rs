//! Grid runners and CSV emission.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use wc4dvar::krylov::KrylovOptions;
use wc4dvar::lprecond::BlockBandedOperator;
use wc4dvar::models::{heat_tlm_block, HeatModel, TangentLinearBlock};
use wc4dvar::problem::{
    dense_parts_for, solve_cell, LHatKind, Problem, ProblemSpec, RHatParams,
};
use wc4dvar::rprecond::RHatVariant;
use wc4dvar::saddle::{Preconditioner, PrecondShape};
use wc4dvar::spectra::{
    build_summary, pd_preconditioned_eigvals, preconditioned_model_spectrum, general_upper_bound,
    closed_form_extremes, improved_k4_bound, short_window_bound, inclusion_intervals,
    unit_eigenvalue_count, SpectrumMethod,
};

use crate::config::{fingerprint, ExperimentConfig, SpectraConfig, SpectrumMode, StudyKind};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Problem(#[from] wc4dvar::problem::ProblemError),
    #[error(transparent)]
    Saddle(#[from] wc4dvar::saddle::SaddleError),
    #[error(transparent)]
    Spectra(#[from] wc4dvar::spectra::SpectraError),
    #[error(transparent)]
    Model(#[from] wc4dvar::models::ModelError),
}

/// Floats are written with 17 significant digits so reruns are
/// byte-comparable.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_manifest(out_dir: &Path, echo: &str) -> Result<(), RunError> {
    let text = format!("fingerprint = {:016x}\n{echo}", fingerprint(echo));
    std::fs::write(out_dir.join("manifest.txt"), text)?;
    Ok(())
}

/// One experiment grid cell.
struct Cell {
    shape: PrecondShape,
    lhat: LHatKind,
    k: usize,
    rhat: RHatVariant,
}

fn grid(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &shape in &cfg.shapes {
        for &lhat in &cfg.lhats {
            let ks: Vec<usize> = match lhat {
                LHatKind::LM => cfg.k_list.clone(),
                LHatKind::L0 | LHatKind::LI => vec![1],
                LHatKind::Exact => vec![cfg.problem.n + 1],
            };
            for k in ks {
                for &rhat in &cfg.rhats {
                    cells.push(Cell { shape, lhat, k, rhat });
                }
            }
        }
    }
    cells
}

/// Runs every grid cell and writes `experiment.csv` plus `manifest.txt`.
/// Rows that fail to converge within `maxit` are flagged in the
/// `converged` column and the run continues.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(out_dir)?;
    if cfg.problem.model == wc4dvar::problem::ModelKind::Heat {
        let hm = HeatModel::new(
            cfg.problem.s,
            cfg.problem.heat_ratio,
            cfg.problem.steps_per_subwindow,
        )?;
        if let Some(w) = hm.stability_warning() {
            eprintln!("warning: {w}");
        }
    }

    let problem = Problem::build(cfg.problem.clone())?;
    let op = problem.operator()?;
    let opts = KrylovOptions { tol: cfg.tol, maxit: cfg.maxit, ..Default::default() };

    let mut csv = String::from(
        "shape,lhat,k,rhat,iterations,converged,final_relres,wallclock_s,count_r,count_rhat_inv,count_d,count_dhat_inv,count_model\n",
    );
    for cell in grid(cfg) {
        let lhat_op = problem.make_lhat(cell.lhat, cell.k);
        let rhat_params = RHatParams {
            variant: cell.rhat,
            block_tol: cfg.block_tol,
            block_maxsize: cfg.block_maxsize,
            block_numproc: cfg.block_numproc,
            rr_gamma: cfg.rr_gamma,
            me_t: cfg.me_t,
        };
        let rhat = problem.make_rhat(&rhat_params)?;
        let pre = match cell.shape {
            PrecondShape::BlockDiag => {
                Preconditioner::block_diag(lhat_op, rhat, problem.make_dhat(&op)?)
            }
            PrecondShape::InexactConstraint => Preconditioner::inexact_constraint(lhat_op, rhat),
        };
        let mut local_opts = opts.clone();
        local_opts.precond_name = format!("{} lhat={} k={} rhat={}", cell.shape, cell.lhat, cell.k, cell.rhat);
        let (_, rep) = solve_cell(&op, &pre, &problem.rhs, &local_opts)?;
        let c = rep.counts;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            cell.shape,
            cell.lhat,
            cell.k,
            cell.rhat,
            rep.iterations,
            rep.converged,
            fmt_f64(rep.final_relres),
            fmt_f64(rep.wall_seconds),
            c.r_apply,
            c.rhat_inv,
            c.d_apply,
            c.dhat_inv,
            c.model,
        );
    }
    std::fs::write(out_dir.join("experiment.csv"), csv)?;
    write_manifest(out_dir, &cfg.echo())?;
    Ok(())
}

/// The tightest upper bound applicable to the heat model at `(n, k)`;
/// `None` when the hypothesis `||M M'|| <= 1` fails.
fn applicable_bound(mu_max: f64, n: usize, k: usize) -> Option<f64> {
    if mu_max > 1.0 {
        return None;
    }
    let mut bound = general_upper_bound(k).ok()?;
    if k < n + 1 && n < 2 * k {
        bound = bound.min(short_window_bound(k).ok()?);
    }
    if k == 3 && (3..=5).contains(&n) {
        let (_, hi) = closed_form_extremes(1.0, n, k).ok()?;
        bound = bound.min(hi);
    }
    if k == 4 && (8..=11).contains(&n) {
        bound = bound.min(improved_k4_bound());
    }
    Some(bound)
}

/// Runs the spectral studies: the unit-count/extreme-eigenvalue table for
/// the heat model and the three-interval bound table, per configuration.
pub fn run_spectra(cfg: &SpectraConfig, out_dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(out_dir)?;

    if matches!(cfg.study, StudyKind::Units | StudyKind::Both) {
        let mut csv = String::from(
            "n_plus_1,k,units_formula,units_computed,min_eig,max_eig,upper_bound\n",
        );
        let hm = HeatModel::new(cfg.s, cfg.heat_ratio, cfg.steps_per_subwindow)?;
        if let Some(w) = hm.stability_warning() {
            eprintln!("warning: {w}");
        }
        let block = Arc::new(heat_tlm_block(&hm));
        let mu_max = wc4dvar::dense::sym_eigvals(&block.to_dense())
            .iter()
            .fold(0.0_f64, |a, &m| a.max(m.abs()));
        for &n in &cfg.n_list {
            let models: Vec<Arc<TangentLinearBlock>> = vec![block.clone(); n];
            let l = BlockBandedOperator::exact(cfg.s, &models);
            let lm = BlockBandedOperator::lm(cfg.s, &models, cfg.k);
            let mut mode = cfg.mode;
            if mode == SpectrumMode::Dense && (n + 1) * cfg.s > wc4dvar::sparse::DENSE_EIG_THRESHOLD
            {
                eprintln!(
                    "warning: dimension {} exceeds the dense threshold; computing extremes only for N+1 = {}",
                    (n + 1) * cfg.s,
                    n + 1
                );
                mode = SpectrumMode::Extremes;
            }
            let (evals, units_computed) = match mode {
                SpectrumMode::Dense => {
                    let evals =
                        preconditioned_model_spectrum(&l, &lm, SpectrumMethod::Dense)?;
                    let units =
                        evals.iter().filter(|e| (**e - 1.0).abs() < 1e-8).count();
                    (evals, Some(units))
                }
                SpectrumMode::Extremes => {
                    let evals =
                        match preconditioned_model_spectrum(&l, &lm, SpectrumMethod::Extremes) {
                            Ok(e) => e,
                            // clustered extremes can stall the iteration;
                            // fall back to the best estimates it carries
                            Err(wc4dvar::spectra::SpectraError::Eig(
                                wc4dvar::sparse::SparseError::LanczosNoConvergence {
                                    iters,
                                    best,
                                },
                            )) if !best.is_empty() => {
                                eprintln!(
                                    "warning: extreme-eigenvalue iteration hit its cap ({iters}) for N+1 = {}; reporting best estimates",
                                    n + 1
                                );
                                vec![best[0], *best.last().unwrap()]
                            }
                            Err(e) => return Err(e.into()),
                        };
                    (evals, None)
                }
            };
            let formula = unit_eigenvalue_count(n, cfg.k, cfg.s)?;
            let bound = applicable_bound(mu_max, n, cfg.k);
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                n + 1,
                cfg.k,
                formula,
                units_computed.map_or(String::new(), |u| u.to_string()),
                fmt_f64(evals[0]),
                fmt_f64(*evals.last().unwrap()),
                bound.map_or(String::new(), fmt_f64),
            );
        }
        std::fs::write(out_dir.join("spectra_units.csv"), csv)?;
    }

    if matches!(cfg.study, StudyKind::Intervals | StudyKind::Both) {
        let spec = ProblemSpec {
            model: cfg.intervals_model,
            s: cfg.intervals_s,
            p: cfg.intervals_p,
            n: cfg.intervals_n,
            steps_per_subwindow: cfg.intervals_steps,
            dt: 1e-4,
            heat_ratio: cfg.heat_ratio,
            d_identity: true,
            obs_smoothing: true,
            r_spec: wc4dvar::covariance::BlockRSpec::default_for(
                cfg.intervals_p,
                wc4dvar::problem::child_seed(cfg.seed, 3),
            ),
            seed: cfg.seed,
        };
        let problem = Problem::build(spec)?;
        let op = problem.operator()?;
        let a_dense = wc4dvar::dense::from_operator(op.dim(), |x, y| op.apply(x, y));

        let mut csv = String::from(
            "lhat,k,rhat,bound_neg_lo,bound_neg_hi,bound_mid_lo,bound_mid_hi,bound_pos_lo,bound_pos_hi,eig_min,eig_max_neg,eig_min_pos,eig_max,contained\n",
        );
        let lhats = [
            (LHatKind::L0, 1usize),
            (LHatKind::LI, 1),
            (LHatKind::LM, cfg.intervals_k),
            (LHatKind::Exact, cfg.intervals_n + 1),
        ];
        let rhats = [
            RHatVariant::Diag,
            RHatVariant::Block,
            RHatVariant::Rr,
            RHatVariant::Me,
            RHatVariant::Exact,
        ];
        for (lk, k) in lhats {
            for rv in rhats {
                let pre = Preconditioner::block_diag(
                    problem.make_lhat(lk, k),
                    problem.make_rhat(&RHatParams::of(rv))?,
                    problem.make_dhat(&op)?,
                );
                let parts = dense_parts_for(&op, &pre);
                let summary = build_summary(&parts)?;
                let iv = inclusion_intervals(&summary);
                let pd_inv = wc4dvar::dense::from_operator(op.dim(), |x, y| {
                    op.apply_pd_inverse(&pre, x, y)
                        .expect("block-diagonal preconditioner carries Dhat")
                });
                let evals = pd_preconditioned_eigvals(&pd_inv, &a_dense);
                let eig_min = evals[0];
                let eig_max = *evals.last().unwrap();
                let eig_max_neg =
                    evals.iter().filter(|e| **e < 0.0).fold(f64::NEG_INFINITY, |a, &e| a.max(e));
                let eig_min_pos =
                    evals.iter().filter(|e| **e > 0.0).fold(f64::INFINITY, |a, &e| a.min(e));
                let contained = evals.iter().all(|e| iv.contains(*e, 1e-8));
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    lk,
                    k,
                    rv,
                    fmt_f64(iv.negative.0),
                    fmt_f64(iv.negative.1),
                    fmt_f64(iv.middle.0),
                    fmt_f64(iv.middle.1),
                    fmt_f64(iv.positive.0),
                    fmt_f64(iv.positive.1),
                    fmt_f64(eig_min),
                    fmt_f64(eig_max_neg),
                    fmt_f64(eig_min_pos),
                    fmt_f64(eig_max),
                    contained,
                );
            }
        }
        std::fs::write(out_dir.join("spectra_intervals.csv"), csv)?;
    }

    write_manifest(out_dir, &cfg.echo())?;
    Ok(())
}
