//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative eigenvalue floor used for every `(MᵀM)⁻¹` solve in the estimators.
pub const SPD_REL_TOL: f64 = 1e-12;

/// Pairwise (cascade) summation; error grows as O(log n) rather than O(n).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pairwise sum of a sequence of equally shaped matrices.
pub fn pairwise_sum_matrices(ms: &[DMatrix<f64>]) -> Option<DMatrix<f64>> {
    match ms.len() {
        0 => None,
        1 => Some(ms[0].clone()),
        n => {
            let (a, b) = ms.split_at(n / 2);
            Some(pairwise_sum_matrices(a)? + pairwise_sum_matrices(b)?)
        }
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Ratio of the smallest to the largest eigenvalue of a symmetric matrix.
pub fn eigen_ratio(m: &DMatrix<f64>) -> f64 {
    let (values, _) = sym_eigen_sorted(m);
    let max = values[0];
    let min = values[values.len() - 1];
    if max <= 0.0 {
        0.0
    } else {
        min / max
    }
}

fn spd_power(m: &DMatrix<f64>, rel_tol: f64, power: impl Fn(f64) -> f64) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let (values, vectors) = sym_eigen_sorted(m);
    let max = values[0];
    let min = values[values.len() - 1];
    if !(max > 0.0) || !(min > rel_tol * max) {
        return None;
    }
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |i, j| {
        vectors[(i, j)] * power(values[j])
    });
    Some(symmetrize(&(scaled * vectors.transpose())))
}

/// Inverse of a symmetric positive definite matrix; `None` when the smallest
/// eigenvalue falls below `rel_tol` times the largest.
pub fn spd_inverse(m: &DMatrix<f64>, rel_tol: f64) -> Option<DMatrix<f64>> {
    spd_power(m, rel_tol, |v| 1.0 / v)
}

/// Symmetric inverse square root `M^{-1/2}` of an SPD matrix.
pub fn spd_inverse_sqrt(m: &DMatrix<f64>, rel_tol: f64) -> Option<DMatrix<f64>> {
    spd_power(m, rel_tol, |v| 1.0 / v.sqrt())
}

/// Thin orthonormal basis of the column space of `a` (n × p, p ≤ n).
pub fn orthonormal_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().qr().q()
}

/// Flip each column so that its largest-magnitude entry is positive.
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let mut best = 0.0_f64;
        for i in 0..m.nrows() {
            if m[(i, j)].abs() > best.abs() {
                best = m[(i, j)];
            }
        }
        if best < 0.0 {
            m.column_mut(j).neg_mut();
        }
    }
}

/// Full singular value decomposition with singular values in decreasing order.
/// Returns `(U, ψ)` where `U` holds all left singular vectors (min(n,p) of them).
pub fn left_singular_sorted(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let n = svd.singular_values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    let mut sorted = DMatrix::zeros(u.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        sorted.set_column(dst, &u.column(src));
    }
    (sorted, values)
}

/// Spectral-norm distance between the orthogonal projectors onto the column
/// spaces of `a` and `b`. Zero iff the spans coincide; rotation invariant.
pub fn column_space_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = orthonormal_columns(a);
    let qb = orthonormal_columns(b);
    let diff = &qa * qa.transpose() - &qb * qb.transpose();
    diff.singular_values().max()
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}
