use crate::model::SolverParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchOutcome {
    pub alpha: f64,
    pub accepted: bool,
    /// Objective at the accepted step (`inf` when rejected).
    pub phi: f64,
    pub backtracks: usize,
}

/// Armijo backtracking on `phi(alpha)`. `phi_at` returns `None` when the
/// trial state cannot be evaluated; that counts as insufficient decrease.
pub fn line_search<F>(
    mut phi_at: F,
    phi0: f64,
    dphi0: f64,
    params: &SolverParams,
) -> LineSearchOutcome
where
    F: FnMut(f64) -> Option<f64>,
{
    let mut alpha = 1.0;
    for backtracks in 0..=params.max_backtracks {
        if let Some(phi) = phi_at(alpha) {
            if phi.is_finite() && phi <= phi0 + params.armijo_c * alpha * dphi0 {
                return LineSearchOutcome {
                    alpha,
                    accepted: true,
                    phi,
                    backtracks,
                };
            }
        }
        if backtracks < params.max_backtracks {
            alpha *= params.backtrack_factor;
        }
    }
    LineSearchOutcome {
        alpha,
        accepted: false,
        phi: f64::INFINITY,
        backtracks: params.max_backtracks,
    }
}
