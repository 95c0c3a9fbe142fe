use super::{norm_inf, NonlinearSystem};
use crate::error::Result;

/// Centered finite-difference Jacobian-vector product
/// `(R(x + eps p) - R(x - eps p)) / (2 eps)` with `eps` chosen so that
/// `|eps p|_inf` equals `target`.
///
/// If exactly one of the two perturbed evaluations is inadmissible, falls
/// back to the one-sided difference against `r_x = R(x)`.
pub fn jvp<S: NonlinearSystem + ?Sized>(
    system: &mut S,
    x: &[f64],
    r_x: &[f64],
    p: &[f64],
    target: f64,
) -> Result<Vec<f64>> {
    let n = x.len();
    let scale = norm_inf(p);
    if scale == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let eps = target / scale.max(1e-30);
    let shifted = |sign: f64| -> Vec<f64> {
        x.iter()
            .zip(p)
            .map(|(xi, pi)| xi + sign * eps * pi)
            .collect()
    };
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    let ok_plus = system.residual(&shifted(1.0), &mut plus);
    let ok_minus = system.residual(&shifted(-1.0), &mut minus);
    match (ok_plus, ok_minus) {
        (Ok(()), Ok(())) => Ok(plus
            .iter()
            .zip(&minus)
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect()),
        (Ok(()), Err(_)) => Ok(plus.iter().zip(r_x).map(|(a, r)| (a - r) / eps).collect()),
        (Err(_), Ok(())) => Ok(minus.iter().zip(r_x).map(|(b, r)| (r - b) / eps).collect()),
        (Err(e), Err(_)) => Err(e),
    }
}
