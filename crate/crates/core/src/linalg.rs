//! Small dense-matrix helpers. Matrix norms are entrywise max, `|A| = max |a_ij|`.

use nalgebra::{DMatrix, DVector};

/// The standard symplectic matrix `J = [[0, I], [-I, 0]]` of size `2n`.
pub fn symplectic(n: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    j
}

/// `J v` without forming `J`.
pub fn apply_symplectic(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len() / 2;
    DVector::from_fn(2 * n, |i, _| if i < n { v[n + i] } else { -v[i - n] })
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn max_abs_vec(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// 2-norm condition number from the singular values (`inf` when singular).
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse together with its condition number; `None` when singular.
pub fn checked_inverse(a: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let cond = condition_number(a);
    if !cond.is_finite() {
        return None;
    }
    a.clone().try_inverse().map(|inv| (inv, cond))
}

/// Row-major flat slice to matrix.
pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// Matrix to row-major flat vector.
pub fn to_row_vec(a: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symplectic_structure() {
        let j = symplectic(2);
        assert_eq!(&j * &j, -DMatrix::identity(4, 4));
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(apply_symplectic(&v), &j * &v);
    }

    #[test]
    fn inverse_and_condition() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let (inv, cond) = checked_inverse(&a).unwrap();
        assert_eq!(inv[(0, 0)], 0.5);
        assert!((cond - 4.0).abs() < 1e-12);
        assert!(checked_inverse(&DMatrix::zeros(2, 2)).is_none());
        assert_eq!(max_abs(&a), 2.0);
    }
}
