//! Small dense linear-algebra helpers shared by every module.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use ndarray_linalg::{Cholesky, Eigh, UPLO};

use crate::error::{Error, Result};

/// Jitter added once to the diagonal when a Cholesky factorization fails.
pub const CHOL_JITTER: f64 = 1e-10;

/// Lower Cholesky factor of a symmetric PSD matrix, retrying once with
/// `CHOL_JITTER * I` on the diagonal. Degenerate covariances produced by the
/// bootstrap need the fallback.
pub fn cholesky_jitter(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    // 1x1 blocks are common (scalar targets) and trip a stride check in the
    // LAPACK bindings, so handle them directly.
    if a.nrows() == 1 {
        let v = a[[0, 0]];
        let v = if v > 0.0 { v } else { v + CHOL_JITTER };
        if v <= 0.0 {
            return Err(Error::RankDeficient("non-positive 1x1 matrix".into()));
        }
        return Ok(Array2::from_elem((1, 1), v.sqrt()));
    }
    if let Ok(l) = a.cholesky(UPLO::Lower) {
        return Ok(l);
    }
    let mut aj = a.to_owned();
    for i in 0..aj.nrows() {
        aj[[i, i]] += CHOL_JITTER;
    }
    aj.cholesky(UPLO::Lower)
        .map_err(|_| Error::RankDeficient("Cholesky failed even with jitter".into()))
}

/// Solves `L z = b` for lower-triangular `L`.
pub fn forward_sub(l: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut z = Array1::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[[i, j]] * z[j];
        }
        z[i] = s / l[[i, i]];
    }
    z
}

/// Solves `L^T x = z` for lower-triangular `L`.
pub fn back_sub(l: &ArrayView2<f64>, z: &ArrayView1<f64>) -> Array1<f64> {
    let n = z.len();
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = z[i];
        for j in i + 1..n {
            s -= l[[j, i]] * x[j];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves the SPD system `a x = b` via Cholesky with jitter fallback.
pub fn solve_psd(a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Result<Array1<f64>> {
    let l = cholesky_jitter(a)?;
    let z = forward_sub(&l.view(), b);
    Ok(back_sub(&l.view(), &z.view()))
}

/// Solves `a X = B` column by column for an SPD `a`.
pub fn solve_psd_mat(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let l = cholesky_jitter(a)?;
    let mut out = Array2::zeros(b.dim());
    for (j, col) in b.axis_iter(Axis(1)).enumerate() {
        let z = forward_sub(&l.view(), &col);
        out.column_mut(j).assign(&back_sub(&l.view(), &z.view()));
    }
    Ok(out)
}

/// Inverse of an SPD matrix via Cholesky.
pub fn invert_psd(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let eye = Array2::eye(a.nrows());
    solve_psd_mat(a, &eye.view())
}

/// Condition number of a symmetric matrix from its eigenvalues.
pub fn sym_condition_number(a: &ArrayView2<f64>) -> Result<f64> {
    let (vals, _) = sym_eigh(a)?;
    let max = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = vals.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

/// Symmetric eigendecomposition, ascending eigenvalues.
pub fn sym_eigh(a: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    if a.nrows() == 1 {
        return Ok((Array1::from_elem(1, a[[0, 0]]), Array2::eye(1)));
    }
    let owned = a.as_standard_layout().to_owned();
    owned
        .eigh(UPLO::Lower)
        .map_err(|_| Error::RankDeficient("eigendecomposition failed".into()))
}

/// Projects a symmetric matrix onto the PSD cone by clipping negative
/// eigenvalues at zero, then re-symmetrizes.
pub fn psd_clip(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let (vals, vecs) = sym_eigh(a)?;
    let n = a.nrows();
    let mut out = Array2::zeros((n, n));
    for (k, &v) in vals.iter().enumerate() {
        if v <= 0.0 {
            continue;
        }
        let u = vecs.column(k);
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += v * u[i] * u[j];
            }
        }
    }
    let sym = (&out + &out.t()) * 0.5;
    Ok(sym)
}

/// X^T X for a data matrix.
pub fn gram(x: &ArrayView2<f64>) -> Array2<f64> {
    x.t().dot(x)
}

/// Chebyshev center of `{x : A x <= b}` seeded with a known feasible point.
///
/// Maximizes the inradius `r` subject to `A x + ||A_i|| r <= b`. Because a
/// feasible point is supplied, the LP is solved in shifted coordinates where
/// all slacks start nonnegative and a single-phase simplex suffices. Returns
/// the feasible point itself when the region has (numerically) empty
/// interior.
pub fn chebyshev_center(
    a: &ArrayView2<f64>,
    b: &ArrayView1<f64>,
    feasible: &ArrayView1<f64>,
    tol: f64,
) -> Result<Array1<f64>> {
    let m = a.nrows();
    let d = a.ncols();
    if m == 0 {
        return Ok(feasible.to_owned());
    }
    let slack = b - &a.dot(feasible);
    if slack.iter().any(|s| *s < -tol) {
        return Err(Error::InfeasibleStart);
    }
    let norms: Vec<f64> = (0..m)
        .map(|i| a.row(i).dot(&a.row(i)).sqrt().max(1e-300))
        .collect();

    // Shifted LP: variables (z+, z-, r) >= 0, rows A z + ||A_i|| r <= h,
    // plus box rows keeping the problem bounded.
    let scale = slack.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    let cap = 1e6 * scale;
    let nv = 2 * d + 1;
    let rows = m + 2 * d + 1;
    let cols = nv + rows + 1; // slacks + rhs
    let mut t = Array2::<f64>::zeros((rows + 1, cols));
    for i in 0..m {
        for j in 0..d {
            t[[i, j]] = a[[i, j]];
            t[[i, d + j]] = -a[[i, j]];
        }
        t[[i, 2 * d]] = norms[i];
        t[[i, cols - 1]] = slack[i].max(0.0);
    }
    for j in 0..2 * d {
        t[[m + j, j]] = 1.0;
        t[[m + j, cols - 1]] = cap;
    }
    t[[m + 2 * d, 2 * d]] = 1.0;
    t[[m + 2 * d, cols - 1]] = cap;
    for i in 0..rows {
        t[[i, nv + i]] = 1.0;
    }
    // objective: maximize r
    t[[rows, 2 * d]] = -1.0;

    let mut basis: Vec<usize> = (nv..nv + rows).collect();
    for _ in 0..20_000 {
        // Bland's rule: entering = lowest index with negative reduced cost
        let mut enter = None;
        for j in 0..cols - 1 {
            if t[[rows, j]] < -1e-11 {
                enter = Some(j);
                break;
            }
        }
        let Some(e) = enter else { break };
        let mut leave = None;
        let mut best = f64::INFINITY;
        for i in 0..rows {
            if t[[i, e]] > 1e-11 {
                let ratio = t[[i, cols - 1]] / t[[i, e]];
                if ratio < best - 1e-12 || (ratio < best + 1e-12 && basis[i] < basis[leave.unwrap_or(i)]) {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        let Some(l) = leave else { break }; // unbounded; the box rows prevent this
        let piv = t[[l, e]];
        for j in 0..cols {
            t[[l, j]] /= piv;
        }
        for i in 0..rows + 1 {
            if i != l {
                let f = t[[i, e]];
                if f != 0.0 {
                    for j in 0..cols {
                        t[[i, j]] -= f * t[[l, j]];
                    }
                }
            }
        }
        basis[l] = e;
    }

    let mut sol = vec![0.0; nv];
    for (i, &bi) in basis.iter().enumerate() {
        if bi < nv {
            sol[bi] = t[[i, cols - 1]];
        }
    }
    let mut center = feasible.to_owned();
    for j in 0..d {
        center[j] += sol[j] - sol[d + j];
    }
    // Guard against simplex drift: fall back to the seed if infeasible.
    let new_slack = b - &a.dot(&center);
    if new_slack.iter().any(|s| *s < -tol) {
        return Ok(feasible.to_owned());
    }
    Ok(center)
}
