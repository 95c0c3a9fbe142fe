use super::{axpy, dot, norm2};
use crate::error::{Error, Result};

/// Result of a right-preconditioned GMRES solve.
#[derive(Clone, Debug, Default)]
pub struct GmresOutcome {
    /// `x = W^{-1} y`.
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// Least-squares estimate of `|b - A x| / |b|`.
    pub rel_residual: f64,
    pub converged: bool,
    /// The operator failed after some iterations; `solution` is the best
    /// iterate of the subspace built so far.
    pub breakdown: bool,
    /// Relative least-squares residual after each iteration, starting with
    /// 1 for the zero initial guess.
    pub residual_history: Vec<f64>,
    /// `A x` reconstructed from the Arnoldi relation `A W^{-1} V_m = V_{m+1} H`.
    pub operator_times_solution: Vec<f64>,
}

/// Solves `A W^{-1} y = b`, `x = W^{-1} y`, with unrestarted GMRES from a
/// zero initial guess.
///
/// The Arnoldi basis is orthogonalized with two passes of modified
/// Gram-Schmidt and the Hessenberg least-squares problem is kept upper
/// triangular with Givens rotations. Iteration stops once the relative
/// residual drops to `eta`, on happy breakdown, or after `max_iters`.
pub fn gmres_right_precond<A>(
    mut apply: A,
    b: &[f64],
    w_diag: &[f64],
    eta: f64,
    max_iters: usize,
) -> Result<GmresOutcome>
where
    A: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    if w_diag.len() != n {
        return Err(Error::Mismatch(format!(
            "preconditioner has {} entries for a system of size {n}",
            w_diag.len()
        )));
    }
    if let Some(i) = w_diag.iter().position(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::Invariant(format!(
            "preconditioner entry {i} = {} is not strictly positive",
            w_diag[i]
        )));
    }
    if !b.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("GMRES right-hand side".into()));
    }

    let beta = norm2(b);
    if beta == 0.0 || n == 0 {
        return Ok(GmresOutcome {
            solution: vec![0.0; n],
            converged: true,
            residual_history: vec![0.0],
            operator_times_solution: vec![0.0; n],
            ..GmresOutcome::default()
        });
    }

    let m_max = max_iters.min(n).max(1);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m_max + 1);
    basis.push(b.iter().map(|v| v / beta).collect());
    // Column j of the Hessenberg matrix, before (`h_raw`) and after (`h`)
    // the Givens rotations.
    let mut h_raw: Vec<Vec<f64>> = Vec::with_capacity(m_max);
    let mut h: Vec<Vec<f64>> = Vec::with_capacity(m_max);
    let mut cs: Vec<f64> = Vec::with_capacity(m_max);
    let mut sn: Vec<f64> = Vec::with_capacity(m_max);
    let mut g = vec![0.0; m_max + 1];
    g[0] = beta;
    let mut history = vec![1.0];
    let mut breakdown = false;
    let mut converged = false;

    for j in 0..m_max {
        let z: Vec<f64> = basis[j].iter().zip(w_diag).map(|(v, w)| v / w).collect();
        let mut w = match apply(&z) {
            Ok(w) => w,
            Err(e) if j == 0 => return Err(e),
            Err(e) => {
                log::debug!("GMRES operator failed at iteration {j}: {e}");
                breakdown = true;
                break;
            }
        };
        if !w.iter().all(|v| v.is_finite()) {
            if j == 0 {
                return Err(Error::NonFinite("GMRES operator output".into()));
            }
            breakdown = true;
            break;
        }
        let w_norm_before = norm2(&w);

        let mut col = vec![0.0; j + 2];
        for _pass in 0..2 {
            for (i, v) in basis.iter().enumerate().take(j + 1) {
                let hij = dot(&w, v);
                col[i] += hij;
                axpy(-hij, v, &mut w);
            }
        }
        let w_norm = norm2(&w);
        col[j + 1] = w_norm;
        h_raw.push(col.clone());

        for i in 0..j {
            let t = cs[i] * col[i] + sn[i] * col[i + 1];
            col[i + 1] = -sn[i] * col[i] + cs[i] * col[i + 1];
            col[i] = t;
        }
        let (c, s) = givens(col[j], col[j + 1]);
        col[j] = c * col[j] + s * col[j + 1];
        col[j + 1] = 0.0;
        cs.push(c);
        sn.push(s);
        g[j + 1] = -s * g[j];
        g[j] *= c;
        h.push(col);

        let rel = g[j + 1].abs() / beta;
        history.push(rel);

        let happy = w_norm <= 1e-14 * w_norm_before.max(f64::MIN_POSITIVE);
        if !happy {
            basis.push(w.iter().map(|v| v / w_norm).collect());
        }
        if rel <= eta || happy {
            converged = true;
            break;
        }
    }

    let k = h.len();
    // Back substitution on the rotated triangle.
    let mut y = vec![0.0; k];
    for i in (0..k).rev() {
        let mut sum = g[i];
        for (jj, yj) in y.iter().enumerate().skip(i + 1) {
            sum -= h[jj][i] * yj;
        }
        y[i] = if h[i][i] != 0.0 { sum / h[i][i] } else { 0.0 };
    }

    let mut y_full = vec![0.0; n];
    for (yj, v) in y.iter().zip(&basis) {
        axpy(*yj, v, &mut y_full);
    }
    let solution: Vec<f64> = y_full.iter().zip(w_diag).map(|(v, w)| v / w).collect();

    // A x = V_{k+1} (H_raw y); after a happy breakdown the last subdiagonal
    // entry is negligible and V_{k+1} is absent.
    let mut hy = vec![0.0; k + 1];
    for (jj, col) in h_raw.iter().enumerate() {
        for (i, hij) in col.iter().enumerate() {
            hy[i] += hij * y[jj];
        }
    }
    let mut ax = vec![0.0; n];
    for (i, coef) in hy.iter().enumerate() {
        if let Some(v) = basis.get(i) {
            axpy(*coef, v, &mut ax);
        }
    }

    Ok(GmresOutcome {
        solution,
        iterations: k,
        rel_residual: *history.last().unwrap_or(&1.0),
        converged,
        breakdown,
        residual_history: history,
        operator_times_solution: ax,
    })
}

fn givens(a: f64, b: f64) -> (f64, f64) {
    if b == 0.0 {
        (1.0, 0.0)
    } else {
        let r = a.hypot(b);
        (a / r, b / r)
    }
}
