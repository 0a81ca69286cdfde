//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{AtlasError, Result};

pub type CMatrix = DMatrix<Complex64>;

/// Frobenius norm of `m - m^T`.
pub fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).norm()
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    m.clone().svd(false, false).singular_values
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    singular_values(m).max()
}

/// Numerical rank with a cutoff relative to the largest singular value.
pub fn rank_relative(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = singular_values(m);
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// 2-norm condition number of a complex square matrix (infinite when singular).
pub fn condition_number_c(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

pub fn inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().try_inverse()
}

/// Eigenvalues of a general real matrix via the real Schur form.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or(AtlasError::ConvergenceFailure)?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

pub fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|v| Complex64::new(v, 0.0))
}

/// Orthonormal basis of the `k`-dimensional subspace most nearly annihilated
/// by `m`, returned together with the `k` smallest singular values.
pub fn smallest_right_singular_vectors(m: &CMatrix, k: usize) -> (CMatrix, Vec<f64>) {
    let cols = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    // singular values are sorted descending; the trailing rows of v_t span the near-null space
    let mut basis = CMatrix::zeros(cols, k);
    let mut sigmas = Vec::with_capacity(k);
    for j in 0..k {
        let row = cols - k + j;
        for i in 0..cols {
            basis[(i, j)] = v_t[(row, i)].conj();
        }
        sigmas.push(svd.singular_values[row]);
    }
    (basis, sigmas)
}

/// Orthonormal basis of the null space of a real matrix (cutoff relative to
/// `scale`). Always returns at least the columns whose singular values fall
/// below the cutoff; may return zero columns.
pub fn null_space(m: &DMatrix<f64>, cutoff: f64) -> DMatrix<f64> {
    let cols = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::identity(cols, cols);
    }
    // pad to square so that v_t is cols x cols
    let mut padded = DMatrix::zeros(m.nrows().max(cols), cols);
    padded.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let keep: Vec<usize> = (0..cols)
        .filter(|&i| svd.singular_values[i] <= cutoff)
        .collect();
    let mut out = DMatrix::zeros(cols, keep.len());
    for (j, &row) in keep.iter().enumerate() {
        for i in 0..cols {
            out[(i, j)] = v_t[(row, i)];
        }
    }
    out
}

/// Orthonormal basis of the null space of a complex matrix; singular values
/// at or below `cutoff` count as zero.
pub fn null_space_c(m: &CMatrix, cutoff: f64) -> CMatrix {
    let cols = m.ncols();
    if m.nrows() == 0 {
        return CMatrix::identity(cols, cols);
    }
    let mut padded = CMatrix::zeros(m.nrows().max(cols), cols);
    padded.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let keep: Vec<usize> = (0..cols)
        .filter(|&i| svd.singular_values[i] <= cutoff)
        .collect();
    let mut out = CMatrix::zeros(cols, keep.len());
    for (j, &row) in keep.iter().enumerate() {
        for i in 0..cols {
            out[(i, j)] = v_t[(row, i)].conj();
        }
    }
    out
}

/// Serializes a real matrix as nested row arrays.
pub fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    serde::Serialize::serialize(&matrix_to_rows(m), s)
}

/// Serializes complex numbers as `{"re": .., "im": ..}` objects.
pub fn ser_complex<S: serde::Serializer>(v: &[Complex64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for z in v {
        let mut obj = std::collections::BTreeMap::new();
        obj.insert("re", z.re);
        obj.insert("im", z.im);
        seq.serialize_element(&obj)?;
    }
    seq.end()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(AtlasError::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Optimal pairing distance between two multisets of complex numbers:
/// the smallest achievable max |a_i - b_pi(i)| over permutations. Exhaustive
/// for up to 8 elements, greedy beyond that.
pub fn multiset_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    if n <= 8 {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, &mut |p| {
            let d = p
                .iter()
                .enumerate()
                .map(|(i, &j)| (a[i] - b[j]).norm())
                .fold(0.0, f64::max);
            if d < best {
                best = d;
            }
        });
        best
    } else {
        let mut used = vec![false; n];
        let mut worst: f64 = 0.0;
        for x in a {
            let (j, d) = b
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .map(|(j, y)| (j, (x - y).norm()))
                .min_by(|l, r| l.1.total_cmp(&r.1))
                .expect("lengths match");
            used[j] = true;
            worst = worst.max(d);
        }
        worst
    }
}

fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, visit);
        perm.swap(k, i);
    }
}
