use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    axpy, dot, forcing_term, gmres_right_precond, jvp, line_search, norm2, norm_inf,
    NonlinearSystem,
};
use crate::model::SolverParams;

/// One accepted Newton update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewtonStep {
    /// `phi = |R|^2 / 2` before the step.
    pub phi0: f64,
    /// Directional derivative `<R, J du>` along the chosen direction.
    pub dphi0: f64,
    pub alpha: f64,
    /// `phi` after the step.
    pub phi: f64,
    pub eta: f64,
    pub gmres_iters: usize,
    pub fallback: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NewtonReport {
    pub converged: bool,
    pub stagnated: bool,
    pub newton_iters: usize,
    pub initial_residual_norm: f64,
    pub final_residual_norm: f64,
    /// Effective stopping threshold: the larger of the scaled absolute
    /// tolerance and the relative tolerance times `|R_0|`.
    pub tolerance: f64,
    pub gmres_iters_per_newton: Vec<usize>,
    pub line_search_alphas: Vec<f64>,
    pub fallback_used: bool,
    pub wall_time: f64,
    pub steps: Vec<NewtonStep>,
    /// Why the iteration stopped early, if it did.
    pub failure: Option<String>,
}

/// Inexact Newton on `R(x) = 0` with Eisenstat-Walker (or fixed) forcing,
/// right-preconditioned matrix-free GMRES, and Armijo backtracking on
/// `phi = |R|^2 / 2`.
///
/// When the GMRES direction is not a descent direction the step falls back
/// to the residual direction, scaled by the minimizer of the linear model
/// along it (which makes it descending whatever the sign of `J`).
/// Non-convergence is reported, never raised; the returned iterate is then
/// the one with the smallest residual seen.
pub fn newton_solve<S: NonlinearSystem + ?Sized>(
    system: &mut S,
    x0: Vec<f64>,
    params: &SolverParams,
) -> (Vec<f64>, NewtonReport) {
    let start = Instant::now();
    let n = system.dim();
    let mut report = NewtonReport::default();
    let mut x = x0;
    let mut r = vec![0.0; n];

    if let Err(e) = system.residual(&x, &mut r) {
        report.initial_residual_norm = f64::INFINITY;
        report.final_residual_norm = f64::INFINITY;
        report.failure = Some(format!("initial residual evaluation failed: {e}"));
        report.wall_time = start.elapsed().as_secs_f64();
        return (x, report);
    }
    let r0 = norm2(&r);
    let tol = (params.newton_tol * (n as f64).sqrt()).max(params.newton_rel_tol * r0);
    report.initial_residual_norm = r0;
    report.final_residual_norm = r0;
    report.tolerance = tol;
    if r0 <= tol {
        report.converged = true;
        report.wall_time = start.elapsed().as_secs_f64();
        return (x, report);
    }
    if !r0.is_finite() {
        report.failure = Some("initial residual is not finite".into());
        report.wall_time = start.elapsed().as_secs_f64();
        return (x, report);
    }

    let target = params.jvp_target_perturbation;
    let mut best_norm = r0;
    let mut best_x = x.clone();
    let mut previous: Option<(f64, f64)> = None;
    let mut stagnant = 0;
    let mut trial = vec![0.0; n];
    let mut r_trial = vec![0.0; n];

    for _ in 0..params.newton_max_iters {
        let r_norm = norm2(&r);
        let phi0 = 0.5 * r_norm * r_norm;
        let eta = forcing_term(r_norm, previous, params);
        let w = system.preconditioner(&x);
        let b: Vec<f64> = r.iter().map(|v| -v).collect();

        let gm = gmres_right_precond(
            |p| jvp(&mut *system, &x, &r, p, target),
            &b,
            &w,
            eta,
            params.gmres_max_iters,
        );
        let mut gmres_iters = 0;
        let mut candidate = match gm {
            Ok(out) => {
                gmres_iters = out.iterations;
                let dphi = dot(&r, &out.operator_times_solution);
                (dphi < 0.0 && dphi.is_finite()).then_some((out.solution, dphi))
            }
            Err(e) => {
                log::debug!("GMRES failed: {e}");
                None
            }
        };
        let mut fallback = false;
        if candidate.is_none() {
            candidate = residual_direction(system, &x, &r, target);
            fallback = true;
        }
        let Some((mut dir, mut dphi0)) = candidate else {
            report.failure = Some("no descent direction available".into());
            break;
        };

        let mut outcome = try_step(
            system,
            &x,
            &dir,
            phi0,
            dphi0,
            params,
            &mut trial,
            &mut r_trial,
        );
        if outcome.is_none() && !fallback {
            if let Some((d, dp)) = residual_direction(system, &x, &r, target) {
                fallback = true;
                dir = d;
                dphi0 = dp;
                outcome = try_step(
                    system,
                    &x,
                    &dir,
                    phi0,
                    dphi0,
                    params,
                    &mut trial,
                    &mut r_trial,
                );
            }
        }
        let Some((alpha, phi)) = outcome else {
            report.failure = Some(if params.line_search_enabled {
                "line search exhausted".into()
            } else {
                "full step is not admissible".into()
            });
            break;
        };

        // Weak curvature check with the Jacobian frozen at the old iterate;
        // advisory only.
        if params.line_search_enabled {
            let grew = dot(&r_trial, &r).abs() > r_norm * r_norm;
            if grew {
                log::trace!("curvature check: directional derivative grew at alpha = {alpha}");
            }
        }

        let step_inf = alpha * norm_inf(&dir);
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut r, &mut r_trial);
        previous = Some((r_norm, eta));
        report.fallback_used |= fallback;
        report.newton_iters += 1;
        report.gmres_iters_per_newton.push(gmres_iters);
        report.line_search_alphas.push(alpha);
        report.steps.push(NewtonStep {
            phi0,
            dphi0,
            alpha,
            phi,
            eta,
            gmres_iters,
            fallback,
        });

        let new_norm = norm2(&r);
        report.final_residual_norm = new_norm;
        if new_norm < best_norm {
            best_norm = new_norm;
            best_x.clone_from(&x);
        }
        if new_norm <= tol {
            report.converged = true;
            break;
        }
        if !new_norm.is_finite() {
            report.failure = Some("residual became non-finite".into());
            break;
        }
        if step_inf < 1e-14 * (1.0 + norm_inf(&x)) {
            stagnant += 1;
            if stagnant >= 2 {
                report.stagnated = true;
                break;
            }
        } else {
            stagnant = 0;
        }
    }

    if !report.converged {
        report.final_residual_norm = best_norm;
        x = best_x;
    }
    report.wall_time = start.elapsed().as_secs_f64();
    (x, report)
}

/// Direction along `R` scaled by `t = -<R, J R> / |J R|^2`, the minimizer of
/// `|R + t J R|`. Returns the direction and `phi'(0) = t <R, J R>`.
fn residual_direction<S: NonlinearSystem + ?Sized>(
    system: &mut S,
    x: &[f64],
    r: &[f64],
    target: f64,
) -> Option<(Vec<f64>, f64)> {
    let jr = jvp(system, x, r, r, target).ok()?;
    let denom = dot(&jr, &jr);
    let rjr = dot(r, &jr);
    if !(denom > 0.0) || rjr == 0.0 || !rjr.is_finite() {
        return None;
    }
    let t = -rjr / denom;
    Some((r.iter().map(|v| t * v).collect(), t * rjr))
}

/// Line search (or a plain full step when disabled). On success `trial`
/// and `r_trial` hold the accepted iterate and its residual.
#[allow(clippy::too_many_arguments)]
fn try_step<S: NonlinearSystem + ?Sized>(
    system: &mut S,
    x: &[f64],
    dir: &[f64],
    phi0: f64,
    dphi0: f64,
    params: &SolverParams,
    trial: &mut Vec<f64>,
    r_trial: &mut [f64],
) -> Option<(f64, f64)> {
    let mut eval = |alpha: f64| -> Option<f64> {
        trial.clear();
        trial.extend_from_slice(x);
        axpy(alpha, dir, trial);
        system.residual(trial, r_trial).ok()?;
        let nr = norm2(r_trial);
        Some(0.5 * nr * nr)
    };
    if params.line_search_enabled {
        let out = line_search(&mut eval, phi0, dphi0, params);
        out.accepted.then_some((out.alpha, out.phi))
    } else {
        eval(1.0).map(|phi| (1.0, phi))
    }
}
