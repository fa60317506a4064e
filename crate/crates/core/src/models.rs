//! Forward and tangent-linear models supplying the sub-diagonal blocks of
//! the model-term matrix: Lorenz 96 (nonlinear, RK4) and the 1-D heat
//! equation (linear, forward Euler).

use nalgebra::DMatrix;
use thiserror::Error;

use crate::sparse::SparseSym;
use crate::vecops::axpy;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("Lorenz 96 needs at least 4 state variables, got {0}")]
    StateTooSmall(usize),
    #[error("time step must be positive, got {0}")]
    NonpositiveStep(f64),
    #[error("heat ratio must be positive, got {0}")]
    NonpositiveRatio(f64),
    #[error("steps per subwindow must be at least 1")]
    NoSteps,
}

/// Lorenz 96 on `s` periodic grid points with forcing `F = 8`.
#[derive(Debug, Clone)]
pub struct Lorenz96Model {
    pub s: usize,
    pub forcing: f64,
    pub dt: f64,
    pub steps_per_subwindow: usize,
}

impl Lorenz96Model {
    pub fn new(s: usize, dt: f64, steps_per_subwindow: usize) -> Result<Self, ModelError> {
        if s < 4 {
            return Err(ModelError::StateTooSmall(s));
        }
        if dt <= 0.0 {
            return Err(ModelError::NonpositiveStep(dt));
        }
        if steps_per_subwindow == 0 {
            return Err(ModelError::NoSteps);
        }
        Ok(Self { s, forcing: 8.0, dt, steps_per_subwindow })
    }
}

/// Tendency `dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F` with cyclic
/// indexing.
pub fn lorenz_rhs(model: &Lorenz96Model, x: &[f64]) -> Vec<f64> {
    let s = model.s;
    debug_assert_eq!(x.len(), s);
    let mut out = vec![0.0; s];
    for i in 0..s {
        let ip1 = (i + 1) % s;
        let im1 = (i + s - 1) % s;
        let im2 = (i + s - 2) % s;
        out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + model.forcing;
    }
    out
}

/// One classical fourth-order Runge-Kutta step of length `dt`.
pub fn rk4_step(model: &Lorenz96Model, x: &[f64]) -> Vec<f64> {
    let h = model.dt;
    let k1 = lorenz_rhs(model, x);
    let mut xs = x.to_vec();
    axpy(&mut xs, 0.5 * h, &k1);
    let k2 = lorenz_rhs(model, &xs);
    xs.copy_from_slice(x);
    axpy(&mut xs, 0.5 * h, &k2);
    let k3 = lorenz_rhs(model, &xs);
    xs.copy_from_slice(x);
    axpy(&mut xs, h, &k3);
    let k4 = lorenz_rhs(model, &xs);
    let mut out = x.to_vec();
    for i in 0..model.s {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Integrates `steps` RK4 steps from `x0`.
pub fn lorenz_flow(model: &Lorenz96Model, x0: &[f64], steps: usize) -> Vec<f64> {
    let mut x = x0.to_vec();
    for _ in 0..steps {
        x = rk4_step(model, &x);
    }
    x
}

/// Spun-up background state: the fixed point perturbed in the first
/// component by 0.01 and integrated for 1000 steps.
pub fn lorenz_spinup_state(model: &Lorenz96Model) -> Vec<f64> {
    let mut x = vec![model.forcing; model.s];
    x[0] += 0.01;
    lorenz_flow(model, &x, 1000)
}

/// Tangent linear of the composition of `steps_per_subwindow` RK4 steps,
/// linearized along the nonlinear trajectory from `x0`. The operator is the
/// exact derivative of the discrete map, so its transpose is the exact
/// adjoint.
pub fn lorenz_tlm_block(model: &Lorenz96Model, x0: &[f64]) -> TangentLinearBlock {
    let mut states = Vec::with_capacity(model.steps_per_subwindow);
    let mut x = x0.to_vec();
    for _ in 0..model.steps_per_subwindow {
        states.push(x.clone());
        x = rk4_step(model, &x);
    }
    TangentLinearBlock::Lorenz(LorenzTlm { model: model.clone(), states })
}

/// 1-D heat equation on the unit line, forward Euler with second-order
/// centred differences and Dirichlet boundaries; `ratio = alpha*dt/dx^2`.
#[derive(Debug, Clone)]
pub struct HeatModel {
    pub s: usize,
    pub alpha: f64,
    pub ratio: f64,
    pub steps_per_subwindow: usize,
}

impl HeatModel {
    pub fn new(s: usize, ratio: f64, steps_per_subwindow: usize) -> Result<Self, ModelError> {
        if ratio <= 0.0 {
            return Err(ModelError::NonpositiveRatio(ratio));
        }
        if steps_per_subwindow == 0 {
            return Err(ModelError::NoSteps);
        }
        Ok(Self { s, alpha: 1.0, ratio, steps_per_subwindow })
    }

    /// For `ratio > 1/2` the step matrix has eigenvalues outside `(-1, 1)`
    /// and the constant-model spectral results no longer apply.
    pub fn stability_warning(&self) -> Option<String> {
        (self.ratio > 0.5).then(|| {
            format!(
                "heat ratio r = {} exceeds 1/2; step-matrix spectrum leaves (-1, 1)",
                self.ratio
            )
        })
    }
}

/// Single-step matrix `M_dt`: interior rows `(r, 1-2r, r)`, first and last
/// rows identically zero.
pub fn heat_step_matrix(model: &HeatModel) -> SparseSym {
    let s = model.s;
    let r = model.ratio;
    let mut t = Vec::new();
    for i in 1..s - 1 {
        t.push((i, i, 1.0 - 2.0 * r));
        if i + 1 < s - 1 {
            t.push((i, i + 1, r));
        }
    }
    SparseSym::from_triplets(s, &t).unwrap()
}

/// Subwindow block `M = M_dt^m`, applied by repeated matvec.
pub fn heat_tlm_block(model: &HeatModel) -> TangentLinearBlock {
    TangentLinearBlock::HeatPower {
        step: heat_step_matrix(model),
        power: model.steps_per_subwindow,
    }
}

/// A linearized model block `M_i` with exact matvec and adjoint matvec.
#[derive(Debug, Clone)]
pub enum TangentLinearBlock {
    /// Explicitly stored matrix (used for synthetic problems and oracles).
    Dense(DMatrix<f64>),
    /// Heat subwindow block `M_dt^power`.
    HeatPower { step: SparseSym, power: usize },
    /// Lorenz 96 subwindow: stage-by-stage differentiation of the RK4
    /// composition along the stored trajectory.
    Lorenz(LorenzTlm),
}

#[derive(Debug, Clone)]
pub struct LorenzTlm {
    model: Lorenz96Model,
    /// base state at the start of each RK4 step
    states: Vec<Vec<f64>>,
}

impl TangentLinearBlock {
    pub fn dim(&self) -> usize {
        match self {
            Self::Dense(m) => m.nrows(),
            Self::HeatPower { step, .. } => step.dim(),
            Self::Lorenz(t) => t.model.s,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        match self {
            Self::Dense(m) => {
                let v = m * nalgebra::DVector::from_column_slice(x);
                y.copy_from_slice(v.as_slice());
            }
            Self::HeatPower { step, power } => {
                let mut cur = x.to_vec();
                let mut tmp = vec![0.0; cur.len()];
                for _ in 0..*power {
                    step.matvec(&cur, &mut tmp);
                    std::mem::swap(&mut cur, &mut tmp);
                }
                y.copy_from_slice(&cur);
            }
            Self::Lorenz(t) => t.matvec(x, y),
        }
    }

    pub fn matvec_transpose(&self, x: &[f64], y: &mut [f64]) {
        match self {
            Self::Dense(m) => {
                let v = m.transpose() * nalgebra::DVector::from_column_slice(x);
                y.copy_from_slice(v.as_slice());
            }
            // heat subwindow block is symmetric
            Self::HeatPower { .. } => self.matvec(x, y),
            Self::Lorenz(t) => t.matvec_transpose(x, y),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Self::Dense(m) => m.clone(),
            _ => crate::dense::from_operator(self.dim(), |x, y| self.matvec(x, y)),
        }
    }
}

impl LorenzTlm {
    fn stage_states(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.model.dt;
        let k1 = lorenz_rhs(&self.model, x);
        let mut xs2 = x.to_vec();
        axpy(&mut xs2, 0.5 * h, &k1);
        let k2 = lorenz_rhs(&self.model, &xs2);
        let mut xs3 = x.to_vec();
        axpy(&mut xs3, 0.5 * h, &k2);
        let k3 = lorenz_rhs(&self.model, &xs3);
        let mut xs4 = x.to_vec();
        axpy(&mut xs4, h, &k3);
        (xs2, xs3, xs4)
    }

    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let h = self.model.dt;
        let mut v = x.to_vec();
        for base in &self.states {
            let (xs2, xs3, xs4) = self.stage_states(base);
            let d1 = jac_vec(base, &v);
            let mut arg = v.clone();
            axpy(&mut arg, 0.5 * h, &d1);
            let d2 = jac_vec(&xs2, &arg);
            arg.copy_from_slice(&v);
            axpy(&mut arg, 0.5 * h, &d2);
            let d3 = jac_vec(&xs3, &arg);
            arg.copy_from_slice(&v);
            axpy(&mut arg, h, &d3);
            let d4 = jac_vec(&xs4, &arg);
            for i in 0..v.len() {
                v[i] += h / 6.0 * (d1[i] + 2.0 * d2[i] + 2.0 * d3[i] + d4[i]);
            }
        }
        y.copy_from_slice(&v);
    }

    fn matvec_transpose(&self, x: &[f64], y: &mut [f64]) {
        let h = self.model.dt;
        let mut w = x.to_vec();
        for base in self.states.iter().rev() {
            let (xs2, xs3, xs4) = self.stage_states(base);
            // reverse-mode sweep through the four stages
            let mut d4bar = w.clone();
            crate::vecops::scale(&mut d4bar, h / 6.0);
            let u4 = jac_transpose_vec(&xs4, &d4bar);
            let mut d3bar = w.clone();
            crate::vecops::scale(&mut d3bar, h / 3.0);
            axpy(&mut d3bar, h, &u4);
            let u3 = jac_transpose_vec(&xs3, &d3bar);
            let mut d2bar = w.clone();
            crate::vecops::scale(&mut d2bar, h / 3.0);
            axpy(&mut d2bar, 0.5 * h, &u3);
            let u2 = jac_transpose_vec(&xs2, &d2bar);
            let mut d1bar = w.clone();
            crate::vecops::scale(&mut d1bar, h / 6.0);
            axpy(&mut d1bar, 0.5 * h, &u2);
            let u1 = jac_transpose_vec(base, &d1bar);
            for i in 0..w.len() {
                w[i] += u1[i] + u2[i] + u3[i] + u4[i];
            }
        }
        y.copy_from_slice(&w);
    }
}

/// Jacobian-vector product of the Lorenz 96 tendency at state `x`.
fn jac_vec(x: &[f64], v: &[f64]) -> Vec<f64> {
    let s = x.len();
    let mut out = vec![0.0; s];
    for i in 0..s {
        let ip1 = (i + 1) % s;
        let im1 = (i + s - 1) % s;
        let im2 = (i + s - 2) % s;
        out[i] = x[im1] * (v[ip1] - v[im2]) + (x[ip1] - x[im2]) * v[im1] - v[i];
    }
    out
}

/// Transposed Jacobian-vector product of the Lorenz 96 tendency.
fn jac_transpose_vec(x: &[f64], w: &[f64]) -> Vec<f64> {
    let s = x.len();
    let mut out = vec![0.0; s];
    for j in 0..s {
        let jp1 = (j + 1) % s;
        let jp2 = (j + 2) % s;
        let jm1 = (j + s - 1) % s;
        let jm2 = (j + s - 2) % s;
        out[j] = x[jm2] * w[jm1] - x[jp1] * w[jp2] + (x[jp2] - x[jm1]) * w[jp1] - w[j];
    }
    out
}
