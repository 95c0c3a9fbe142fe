//! Matrix-free inexact Newton with right-preconditioned GMRES.

mod forcing;
mod gmres;
mod jvp;
mod line_search;
mod newton;

pub use forcing::{ew_forcing, forcing_term};
pub use gmres::{gmres_right_precond, GmresOutcome};
pub use jvp::jvp;
pub use line_search::{line_search, LineSearchOutcome};
pub use newton::{newton_solve, NewtonReport, NewtonStep};

use crate::error::Result;

/// A square nonlinear system `R(x) = 0` over the free unknowns.
pub trait NonlinearSystem {
    fn dim(&self) -> usize;

    /// Evaluates `R(x)` into `out`. Inadmissible states (for example an
    /// inverted trial deformation) return an error.
    fn residual(&mut self, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// Strictly positive right-preconditioner diagonal at `x`.
    fn preconditioner(&mut self, x: &[f64]) -> Vec<f64>;
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `y += alpha * x`
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
