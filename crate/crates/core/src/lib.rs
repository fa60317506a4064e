//! Matrix-free Krylov solvers and preconditioners for the saddle-point
//! formulation of weak-constraint 4D-Var data assimilation.
//!
//! The library assembles the symmetric indefinite block system
//!
//! ```text
//!     | D   0   L  | |x1|   |b1|
//!     | 0   R   H  | |x2| = |b2|
//!     | L'  H'  0  | |x3|   |b3|
//! ```
//!
//! where `D` and `R` are block-diagonal covariance collections, `H` is a
//! block-diagonal observation operator, and `L` is the unit lower
//! block-bidiagonal model-term matrix built from tangent-linear model blocks.
//! All operators are applied matrix-free with per-constituent matvec
//! counters.
//!
//! Modules:
//! - [`sparse`]: CSR symmetric storage, zero-fill incomplete Cholesky,
//!   Woodbury low-rank-update solves, extreme symmetric eigenvalues.
//! - [`models`]: Lorenz 96 (RK4) and 1-D heat equation forward and
//!   tangent-linear models.
//! - [`covariance`]: SOAR circulant builders for `B`/`Q`, block covariance
//!   builder for `R_i`, observation operator builder, block-diagonal sets.
//! - [`lprecond`]: the model-term operator `L` and its approximations
//!   `L_0`, `L_I`, `L_M(k)`.
//! - [`rprecond`]: diagonal, block, ridge-regression, and minimum-eigenvalue
//!   approximations of `R_i`.
//! - [`saddle`]: the matrix-free saddle operator and the block-diagonal and
//!   inexact-constraint preconditioner applications.
//! - [`krylov`]: preconditioned MINRES and full right-preconditioned GMRES.
//! - [`spectra`]: eigenvalue bounds and closed-form spectral results for the
//!   preconditioned systems, with helpers for dense validation.
//! - [`problem`]: end-to-end assembly of the two reference experiments.

pub mod covariance;
pub mod dense;
pub mod krylov;
pub mod lprecond;
pub mod models;
pub mod problem;
pub mod rprecond;
pub mod saddle;
pub mod sparse;
pub mod spectra;
pub mod vecops;
