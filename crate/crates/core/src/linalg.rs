//! Small dense helpers on top of `nalgebra`.
//!
//! Per-particle state lives in flat `f64` slices, so the hot loops use the
//! slice-based `matvec` family instead of allocating `DVector`s.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative threshold under which a factor counts as singular.
pub const SINGULARITY_TOL: f64 = 1e-10;

/// `out = m * x`
#[inline]
pub fn matvec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.ncols(), x.len());
    debug_assert_eq!(m.nrows(), out.len());
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, xc) in x.iter().enumerate() {
            acc += m[(r, c)] * xc;
        }
        *o = acc;
    }
}

/// `out += alpha * m * x`
#[inline]
pub fn matvec_acc(m: &DMatrix<f64>, x: &[f64], alpha: f64, out: &mut [f64]) {
    debug_assert_eq!(m.ncols(), x.len());
    debug_assert_eq!(m.nrows(), out.len());
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, xc) in x.iter().enumerate() {
            acc += m[(r, c)] * xc;
        }
        *o += alpha * acc;
    }
}

/// `<m x, y>`
#[inline]
pub fn quad_form(m: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (r, yr) in y.iter().enumerate() {
        let mut row = 0.0;
        for (c, xc) in x.iter().enumerate() {
            row += m[(r, c)] * xc;
        }
        acc += row * yr;
    }
    acc
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    m.singular_values().min()
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    let scale = 1.0 + frobenius(m);
    frobenius(&(m - m.transpose())) <= rel_tol * scale
}

/// Inverse of `m`, refusing factors whose smallest singular value falls below
/// `SINGULARITY_TOL * (1 + |m|_F)`.
pub fn checked_inverse(m: &DMatrix<f64>, factor: &str, s: f64) -> Result<DMatrix<f64>> {
    let sigma = min_singular_value(m);
    if !sigma.is_finite() || sigma < SINGULARITY_TOL * (1.0 + frobenius(m)) {
        return Err(Error::Singular {
            factor: factor.to_string(),
            s,
            sigma,
        });
    }
    m.clone().try_inverse().ok_or_else(|| Error::Singular {
        factor: factor.to_string(),
        s,
        sigma,
    })
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_matches_nalgebra() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let x = [0.3, -2.0, 1.5];
        let mut out = [0.0; 2];
        matvec(&m, &x, &mut out);
        let expected = &m * nalgebra::DVector::from_column_slice(&x);
        assert!((out[0] - expected[0]).abs() < 1e-15);
        assert!((out[1] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn singular_factor_is_refused() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let err = checked_inverse(&m, "PN1+I", 0.25).unwrap_err();
        match err {
            Error::Singular { factor, s, .. } => {
                assert_eq!(factor, "PN1+I");
                assert_eq!(s, 0.25);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn min_eigenvalue_of_diagonal() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1e-3]));
        assert!((min_eigenvalue(&m) + 1e-3).abs() < 1e-15);
    }
}
