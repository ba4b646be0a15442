//! Plain (non-taped) dense symmetric positive definite routines.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Smallest pivot accepted by the Cholesky factorization.
pub const PIVOT_TOLERANCE: f64 = 1e-12;
/// Diagonal shift applied once when a factorization fails.
pub const JITTER: f64 = 1e-10;

/// Lower-triangular Cholesky factor, failing on any pivot below [`PIVOT_TOLERANCE`].
pub fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of a {}x{} matrix",
            n,
            a.ncols()
        )));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > PIVOT_TOLERANCE) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { row: j, pivot: d });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Cholesky with a single `+JITTER * I` retry. The flag reports whether the retry was needed.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    match cholesky(a) {
        Ok(l) => Ok((l, false)),
        Err(Error::NotPositiveDefinite { .. }) => {
            let n = a.nrows();
            let shifted = a + DMatrix::<f64>::identity(n, n) * JITTER;
            cholesky(&shifted).map(|l| (l, true))
        }
        Err(e) => Err(e),
    }
}

pub fn logdet_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `log det(a)` for a symmetric positive definite matrix.
pub fn logdet_spd(a: &DMatrix<f64>) -> Result<f64> {
    let (l, _) = cholesky_jittered(a)?;
    Ok(logdet_from_factor(&l))
}

/// Inverse of a lower-triangular matrix by forward substitution.
fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::<f64>::zeros(n, n);
    for c in 0..n {
        inv[(c, c)] = 1.0 / l[(c, c)];
        for i in (c + 1)..n {
            let mut s = 0.0;
            for k in c..i {
                s += l[(i, k)] * inv[(k, c)];
            }
            inv[(i, c)] = -s / l[(i, i)];
        }
    }
    inv
}

pub fn inverse_from_factor(l: &DMatrix<f64>) -> DMatrix<f64> {
    let li = lower_inverse(l);
    let inv = li.transpose() * &li;
    symmetrize(&inv)
}

/// Inverse of a symmetric positive definite matrix.
pub fn inverse_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (l, _) = cholesky_jittered(a)?;
    Ok(inverse_from_factor(&l))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Marginal kernel `I - (L + I)^{-1}` of a PSD kernel.
pub fn marginal_from_kernel(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let inv = inverse_spd(&(l + &eye))?;
    Ok(symmetrize(&(eye - inv)))
}
