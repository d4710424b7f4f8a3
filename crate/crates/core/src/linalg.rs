//! Small helpers for symmetric-matrix bookkeeping shared by the SDP
//! reformulations: packed triangular (vech) indexing, scaled-svec packing
//! used by the conic backend, and eigenvalue-based PSD checks.

use nalgebra::{DMatrix, DVector};

/// Number of entries in the packed upper triangle of an `n x n` matrix.
pub fn vech_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Packed index of entry `(i, j)`, `i <= j`, upper triangle column-major.
pub fn vech_index(i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    j * (j + 1) / 2 + i
}

/// Reconstruct a symmetric matrix from its packed upper triangle.
pub fn unvech(n: usize, v: &[f64]) -> DMatrix<f64> {
    assert_eq!(v.len(), vech_len(n));
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let x = v[vech_index(i, j)];
            m[(i, j)] = x;
            m[(j, i)] = x;
        }
    }
    m
}

/// Scaled svec as used by the PSD triangle cone: upper triangle column-major
/// with off-diagonal entries multiplied by sqrt(2).
pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let s2 = std::f64::consts::SQRT_2;
    let mut out = DVector::zeros(vech_len(n));
    for j in 0..n {
        for i in 0..=j {
            out[vech_index(i, j)] = if i == j { m[(i, j)] } else { s2 * m[(i, j)] };
        }
    }
    out
}

/// Smallest eigenvalue of a symmetric matrix (symmetrized before the solve).
pub fn min_eig_sym(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// True if `m` is symmetric within `tol` and has min eigenvalue `> tol_eig`.
pub fn is_spd(m: &DMatrix<f64>, tol_sym: f64, tol_eig: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    if (m - m.transpose()).amax() > tol_sym {
        return false;
    }
    min_eig_sym(m) > tol_eig
}

/// Symmetrize in place: `(m + m^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `log det` of an SPD matrix via Cholesky. Returns `None` if not SPD.
pub fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = symmetrize(m).cholesky()?;
    let l = chol.l();
    Some(2.0 * (0..m.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

/// Inverse of an SPD matrix via Cholesky. Returns `None` if not SPD.
pub fn inv_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    symmetrize(m).cholesky().map(|c| c.inverse())
}

/// Shift a symmetric matrix just enough to make its min eigenvalue >= `floor`.
///
/// Loewner-monotone: the result always dominates the input, so using it as a
/// constraint constant can only make a bound more conservative, never invalid.
pub fn psd_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let lam = min_eig_sym(&sym);
    if lam >= floor {
        sym
    } else {
        let n = sym.nrows();
        sym + DMatrix::identity(n, n) * (floor - lam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vech_roundtrip() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.5, 1.0, 3.0, -1.0, 0.5, -1.0, 4.0]);
        let mut packed = vec![0.0; vech_len(3)];
        for j in 0..3 {
            for i in 0..=j {
                packed[vech_index(i, j)] = m[(i, j)];
            }
        }
        assert_eq!(unvech(3, &packed), m);
    }

    #[test]
    fn svec_preserves_inner_product() {
        // <A, B>_F = svec(A) . svec(B) is what the sqrt(2) scaling buys.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]);
        let b = DMatrix::from_row_slice(2, 2, &[4.0, -1.0, -1.0, 0.5]);
        let frob = (a.transpose() * &b).trace();
        let dot = svec(&a).dot(&svec(&b));
        assert!((frob - dot).abs() < 1e-12);
    }

    #[test]
    fn logdet_matches_direct() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let expect = (2.0 * 1.0 - 0.25f64).ln();
        assert!((log_det_spd(&m).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn psd_floor_dominates() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]); // eigs -1, 1
        let shifted = psd_floor(&m, 1e-6);
        assert!(min_eig_sym(&shifted) >= 1e-6 - 1e-12);
        assert!(min_eig_sym(&(&shifted - &m)) >= -1e-12);
    }
}
