//! Thin helpers over `faer` dense matrices.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par, Side};

use crate::error::{Error, Result};

/// Relative cutoff below which singular values count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

pub fn mat_vec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.ncols(), x.len());
    (0..a.nrows())
        .map(|r| x.iter().enumerate().map(|(c, v)| a[(r, c)] * v).sum())
        .collect()
}

/// `aᵀ x`.
pub fn mat_t_vec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.nrows(), x.len());
    let mut out = vec![0.0; a.ncols()];
    for (r, v) in x.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += a[(r, c)] * v;
        }
    }
    out
}

/// Sequential product, so results never depend on the thread pool.
pub fn mul(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.nrows(), b.ncols());
    matmul(out.as_mut(), Accum::Replace, a, b, 1.0, Par::Seq);
    out
}

pub fn column_matrix(x: &[f64]) -> Mat<f64> {
    Mat::from_fn(x.len(), 1, |r, _| x[r])
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn singular_values(a: MatRef<'_, f64>) -> Result<Vec<f64>> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(Vec::new());
    }
    let mut s = a
        .singular_values()
        .map_err(|e| Error::Numeric(format!("singular value decomposition failed: {e:?}")))?;
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(s)
}

/// Largest singular value.
pub fn spectral_norm(a: MatRef<'_, f64>) -> Result<f64> {
    Ok(singular_values(a)?.first().copied().unwrap_or(0.0))
}

/// Thin SVD `a = U diag(s) Vᵀ` truncated to the numerical rank.
pub struct TruncatedSvd {
    pub u: Mat<f64>,
    pub s: Vec<f64>,
    pub v: Mat<f64>,
}

pub fn truncated_svd(a: MatRef<'_, f64>, max_rank: usize) -> Result<TruncatedSvd> {
    let svd = a
        .thin_svd()
        .map_err(|e| Error::Numeric(format!("singular value decomposition failed: {e:?}")))?;
    let s_all: Vec<f64> = (0..svd.S().dim()).map(|i| svd.S()[i]).collect();
    let mut order: Vec<usize> = (0..s_all.len()).collect();
    order.sort_by(|&i, &j| s_all[j].total_cmp(&s_all[i]));
    let top = order.first().map_or(0.0, |&i| s_all[i]);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| top > 0.0 && s_all[i] > RANK_TOLERANCE * top)
        .take(max_rank)
        .collect();
    let u = Mat::from_fn(a.nrows(), keep.len(), |r, k| svd.U()[(r, keep[k])]);
    let v = Mat::from_fn(a.ncols(), keep.len(), |r, k| svd.V()[(r, keep[k])]);
    let s = keep.iter().map(|&i| s_all[i]).collect();
    Ok(TruncatedSvd { u, s, v })
}

/// Moore–Penrose pseudo-inverse with the crate rank tolerance.
pub fn pseudo_inverse(a: MatRef<'_, f64>) -> Result<Mat<f64>> {
    let t = truncated_svd(a, usize::MAX)?;
    Ok(Mat::from_fn(a.ncols(), a.nrows(), |i, j| {
        (0..t.s.len()).map(|k| t.v[(i, k)] * t.u[(j, k)] / t.s[k]).sum()
    }))
}

/// Symmetric positive semi-definite square root.
pub fn sym_sqrt(a: MatRef<'_, f64>) -> Result<Mat<f64>> {
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numeric(format!("eigendecomposition failed: {e:?}")))?;
    let (u, s) = (evd.U(), evd.S());
    let n = a.nrows();
    let roots: Vec<f64> = (0..n).map(|i| s[i].max(0.0).sqrt()).collect();
    Ok(Mat::from_fn(n, n, |i, j| {
        (0..n).map(|k| u[(i, k)] * roots[k] * u[(j, k)]).sum()
    }))
}

pub fn identity(n: usize) -> Mat<f64> {
    Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
}

pub fn max_abs_diff(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    let mut m: f64 = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    m
}

pub fn max_abs(a: MatRef<'_, f64>) -> f64 {
    let mut m: f64 = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max(a[(i, j)].abs());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_inverse_of_rank_deficient() {
        // rank one: [1 2; 2 4]
        let a = Mat::from_fn(2, 2, |i, j| ((i + 1) * (j + 1)) as f64);
        let p = pseudo_inverse(a.as_ref()).unwrap();
        // pinv = a / 25
        for i in 0..2 {
            for j in 0..2 {
                assert!((p[(i, j)] - a[(i, j)] / 25.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sqrt_squares_back() {
        let a = Mat::from_fn(3, 3, |i, j| if i == j { 4.0 } else { 1.0 });
        let r = sym_sqrt(a.as_ref()).unwrap();
        assert!(max_abs_diff(mul(r.as_ref(), r.as_ref()).as_ref(), a.as_ref()) < 1e-13);
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let a = Mat::from_fn(3, 2, |i, j| if i == j { [3.0, -5.0][i] } else { 0.0 });
        assert!((spectral_norm(a.as_ref()).unwrap() - 5.0).abs() < 1e-14);
    }
}
