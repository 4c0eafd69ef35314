//! Small dense helpers bridging `ndarray` storage and `nalgebra` factorizations.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2};

pub(crate) fn to_na(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// General inverse via LU; `None` when singular or non-finite.
pub(crate) fn inverse(a: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
    let m = to_na(a);
    let inv = m.try_inverse()?;
    if inv.iter().all(|v| v.is_finite()) {
        Some(from_na(&inv))
    } else {
        None
    }
}

pub(crate) fn solve(a: ArrayView2<'_, f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let m = to_na(a);
    let rhs = nalgebra::DVector::from_iterator(b.len(), b.iter().copied());
    let x = m.lu().solve(&rhs)?;
    if x.iter().all(|v| v.is_finite()) {
        Some(Array1::from_iter(x.iter().copied()))
    } else {
        None
    }
}

/// Eigenvalues of the symmetric part `(A + Aᵀ)/2`, ascending.
pub(crate) fn symmetric_eigenvalues(a: ArrayView2<'_, f64>) -> Vec<f64> {
    let m = to_na(a);
    let sym = (&m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// `λ_min / λ_max` of a symmetric matrix (2-norm reciprocal condition number).
pub(crate) fn reciprocal_condition(a: ArrayView2<'_, f64>) -> f64 {
    let ev = symmetric_eigenvalues(a);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if hi <= 0.0 || !hi.is_finite() || !lo.is_finite() {
        0.0
    } else {
        (lo / hi).max(0.0)
    }
}

pub(crate) fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    (a + &a.t()) * 0.5
}
