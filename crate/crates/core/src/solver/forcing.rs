use crate::model::{ForcingMode, SolverParams};

/// Eisenstat-Walker forcing term (choice 2) with the standard safeguard.
///
/// `previous` carries `(|R_prev|, eta_prev)`; `None` marks the first Newton
/// iteration, which uses `eta_max`.
pub fn ew_forcing(r_curr: f64, previous: Option<(f64, f64)>, params: &SolverParams) -> f64 {
    let Some((r_prev, eta_prev)) = previous else {
        return params.eta_max;
    };
    if r_prev <= 0.0 {
        return params.eta_min;
    }
    let mut eta = params.ew_gamma * (r_curr / r_prev).powf(params.ew_alpha);
    let safeguard = params.ew_gamma * eta_prev.powf(params.ew_alpha);
    if safeguard > 0.1 {
        eta = eta.max(safeguard);
    }
    eta.clamp(params.eta_min, params.eta_max)
}

/// Inner tolerance for the configured forcing mode.
pub fn forcing_term(r_curr: f64, previous: Option<(f64, f64)>, params: &SolverParams) -> f64 {
    match params.forcing_mode {
        ForcingMode::EisenstatWalker => ew_forcing(r_curr, previous, params),
        ForcingMode::Fixed => params.fixed_eta,
    }
}
