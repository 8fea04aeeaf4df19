//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff for generalized inverses.
pub const PINV_RTOL: f64 = 1e-10;

/// Moore-Penrose pseudo-inverse with singular values below
/// `rtol * sigma_max` truncated. Returns the inverse and the numerical rank.
pub fn pinv(a: &DMatrix<f64>, rtol: f64) -> (DMatrix<f64>, usize) {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return (DMatrix::zeros(n, m), 0);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = rtol * smax;
    let mut out = DMatrix::zeros(n, m);
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            let ui = u.column(i);
            let vi = vt.row(i);
            out += (vi.transpose() * ui.transpose()) / s;
        }
    }
    (out, rank)
}

/// Singular values in decreasing order.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap());
    s
}

/// Least-squares solution of `a x ≈ b` through the pseudo-inverse.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, usize) {
    let (p, rank) = pinv(a, PINV_RTOL);
    (p * b, rank)
}

/// Solve a symmetric positive (semi)definite system, falling back to the
/// pseudo-inverse when Cholesky fails.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    match a.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => pinv(a, 1e-14).0 * b,
    }
}

/// Inverse of a symmetric positive (semi)definite matrix, Cholesky first and
/// pseudo-inverse otherwise.
pub fn inverse_spd(a: &DMatrix<f64>) -> DMatrix<f64> {
    match a.clone().cholesky() {
        Some(ch) => symmetrize(&ch.inverse()),
        None => symmetrize(&pinv(a, 1e-14).0),
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    symmetrize(a)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Upper-triangular `R` with `RᵀR = a` for SPD `a`.
pub fn cholesky_upper(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.l().transpose())
}
