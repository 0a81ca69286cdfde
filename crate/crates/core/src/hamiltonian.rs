//! Hamiltonian matrices and their spectra.
//!
//! The spectrum is returned grouped: near-equal eigenvalues share one
//! eigenspace basis, conjugate groups carry exactly conjugated bases, and
//! a group whose geometric multiplicity falls short of its algebraic one is
//! given a basis of its generalized eigenspace and marks the whole spectrum
//! as defective.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{AtlasError, Result};
use crate::linalg::{self, CMatrix};
use crate::linear_system::{LinearSystem, TimeMode};

/// Relative tolerance for merging eigenvalues into one group.
pub const GROUP_TOL: f64 = 1e-6;
/// Relative singular-value cutoff deciding geometric multiplicity.
const EIGENSPACE_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianMatrix {
    pub h: DMatrix<f64>,
    pub mode: TimeMode,
    pub n: usize,
}

/// `J = [[0, I], [-I, 0]]`.
pub fn symplectic_j(n: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    j
}

/// Assembles the Hamiltonian of the undiscounted problem equivalent to `sys`.
pub fn build(sys: &LinearSystem) -> Result<HamiltonianMatrix> {
    sys.check()?;
    let eff = sys.effective()?;
    let n = eff.n();
    let g = eff.control_gramian();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    match eff.mode {
        TimeMode::Continuous => {
            h.view_mut((0, 0), (n, n)).copy_from(&eff.a);
            h.view_mut((0, n), (n, n)).copy_from(&(-&g));
            h.view_mut((n, 0), (n, n)).copy_from(&(-&eff.q));
            h.view_mut((n, n), (n, n)).copy_from(&(-eff.a.transpose()));
        }
        TimeMode::Discrete => {
            let a_inv_t = linalg::inverse(&eff.a).ok_or(AtlasError::SingularA)?.transpose();
            let g_ait = &g * &a_inv_t;
            h.view_mut((0, 0), (n, n)).copy_from(&(&eff.a + &g_ait * &eff.q));
            h.view_mut((0, n), (n, n)).copy_from(&(-&g_ait));
            h.view_mut((n, 0), (n, n)).copy_from(&(-(&a_inv_t * &eff.q)));
            h.view_mut((n, n), (n, n)).copy_from(&a_inv_t);
        }
    }
    Ok(HamiltonianMatrix { h, mode: eff.mode, n })
}

impl HamiltonianMatrix {
    pub fn norm2(&self) -> f64 {
        linalg::spectral_norm(&self.h)
    }

    /// `||HJ - (HJ)^T||_F` in continuous time, `||H^T J H - J||_F / ||J||_F`
    /// in discrete time.
    pub fn structure_defect(&self) -> f64 {
        let j = symplectic_j(self.n);
        match self.mode {
            TimeMode::Continuous => linalg::symmetry_defect(&(&self.h * &j)),
            TimeMode::Discrete => (self.h.transpose() * &j * &self.h - &j).norm() / j.norm(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralData {
    pub mode: TimeMode,
    pub n: usize,
    #[serde(serialize_with = "linalg::ser_complex")]
    pub eigenvalues: Vec<Complex64>,
    /// Column `i` spans, together with the other columns of its group, the
    /// (generalized) eigenspace of `eigenvalues[i]`. Unit 2-norm columns.
    #[serde(skip)]
    pub basis: CMatrix,
    pub pairing: Vec<usize>,
    pub stable_mask: Vec<bool>,
    pub defective: bool,
    pub eigenspace_groups: Vec<Vec<usize>>,
    /// `||H||_2`.
    pub scale: f64,
}

impl SpectralData {
    pub fn group_of(&self, index: usize) -> usize {
        self.eigenspace_groups
            .iter()
            .position(|g| g.contains(&index))
            .expect("every index belongs to a group")
    }

    /// Index of the group holding the conjugates of group `g`.
    pub fn conjugate_group(&self, g: usize) -> usize {
        self.group_of(self.pairing[self.eigenspace_groups[g][0]])
    }

    pub fn stable_count(&self) -> usize {
        self.stable_mask.iter().filter(|&&s| s).count()
    }

    /// Largest distance from an eigenvalue to the mirrored spectrum
    /// (`-lambda` in continuous time, `1/lambda` in discrete time).
    pub fn mirror_defect(&self) -> f64 {
        let mirrored: Vec<Complex64> = self
            .eigenvalues
            .iter()
            .map(|&l| match self.mode {
                TimeMode::Continuous => -l,
                TimeMode::Discrete => 1.0 / l,
            })
            .collect();
        linalg::multiset_distance(&self.eigenvalues, &mirrored)
    }

    /// Smallest distance of an eigenvalue to the stability boundary.
    pub fn boundary_gap(&self) -> f64 {
        self.eigenvalues
            .iter()
            .map(|l| match self.mode {
                TimeMode::Continuous => l.re.abs(),
                TimeMode::Discrete => (l.norm() - 1.0).abs(),
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// `||H v - lambda v||_2` for every column (meaningful when not defective).
    pub fn eigenpair_residuals(&self, h: &HamiltonianMatrix) -> Vec<f64> {
        let hc = linalg::to_complex(&h.h);
        (0..self.eigenvalues.len())
            .map(|i| {
                let v = self.basis.column(i);
                (&hc * v - v * self.eigenvalues[i]).norm()
            })
            .collect()
    }
}

pub fn is_stable(mode: TimeMode, l: Complex64, margin: f64) -> bool {
    match mode {
        TimeMode::Continuous => l.re < -margin,
        TimeMode::Discrete => l.norm() < 1.0 - margin,
    }
}

/// Eigen-decomposition of `H` with grouping, pairing and stability masks.
pub fn spectrum(h: &HamiltonianMatrix) -> Result<SpectralData> {
    let dim = 2 * h.n;
    let scale = h.norm2();
    let raw = linalg::eigenvalues(&h.h)?;
    let tol = GROUP_TOL * scale.max(1.0);

    let clusters = cluster(&raw, tol);
    // one representative per cluster, conjugate clusters tied together
    struct Cluster {
        value: Complex64,
        size: usize,
    }
    let mut reps: Vec<Cluster> = clusters
        .iter()
        .map(|c| {
            let sum: Complex64 = c.iter().map(|&i| raw[i]).sum();
            Cluster { value: sum / c.len() as f64, size: c.len() }
        })
        .collect();
    for r in reps.iter_mut() {
        if r.value.im.abs() <= tol {
            r.value.im = 0.0;
        }
    }
    reps.sort_by(|a, b| a.value.re.total_cmp(&b.value.re).then(a.value.im.total_cmp(&b.value.im)));

    let hc = linalg::to_complex(&h.h);
    let mut eigenvalues = Vec::with_capacity(dim);
    let mut basis = CMatrix::zeros(dim, dim);
    let mut pairing = vec![0usize; dim];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut defective = false;
    let mut done = vec![false; reps.len()];
    let mut next = 0usize;

    for gi in 0..reps.len() {
        if done[gi] {
            continue;
        }
        let mu = reps[gi].value;
        let k = reps[gi].size;
        if mu.im == 0.0 {
            let (vecs, def) = real_group_basis(&h.h, mu.re, k, scale);
            defective |= def;
            let idx: Vec<usize> = (next..next + k).collect();
            for (c, &i) in idx.iter().enumerate() {
                eigenvalues.push(Complex64::new(mu.re, 0.0));
                basis.set_column(i, &linalg::to_complex(&vecs).column(c));
                pairing[i] = i;
            }
            next += k;
            groups.push(idx);
            done[gi] = true;
            continue;
        }
        // complex: pair with the closest unprocessed cluster near conj(mu)
        let partner = (0..reps.len())
            .filter(|&j| j != gi && !done[j] && reps[j].size == k)
            .min_by(|&a, &b| {
                (reps[a].value - mu.conj())
                    .norm()
                    .total_cmp(&(reps[b].value - mu.conj()).norm())
            })
            .ok_or(AtlasError::ConvergenceFailure)?;
        let other = reps[partner].value;
        let upper = Complex64::new(0.5 * (mu.re + other.re), 0.5 * (mu.im.abs() + other.im.abs()));
        let (vecs, def) = complex_group_basis(&hc, upper, k, scale);
        defective |= def;
        let up_idx: Vec<usize> = (next..next + k).collect();
        let lo_idx: Vec<usize> = (next + k..next + 2 * k).collect();
        for c in 0..k {
            eigenvalues.push(upper);
            basis.set_column(up_idx[c], &vecs.column(c));
        }
        for c in 0..k {
            eigenvalues.push(upper.conj());
            basis.set_column(lo_idx[c], &vecs.column(c).map(|z| z.conj()));
            pairing[up_idx[c]] = lo_idx[c];
            pairing[lo_idx[c]] = up_idx[c];
        }
        next += 2 * k;
        groups.push(up_idx);
        groups.push(lo_idx);
        done[gi] = true;
        done[partner] = true;
    }

    let stable_mask = eigenvalues.iter().map(|&l| is_stable(h.mode, l, 0.0)).collect();
    Ok(SpectralData {
        mode: h.mode,
        n: h.n,
        eigenvalues,
        basis,
        pairing,
        stable_mask,
        defective,
        eigenspace_groups: groups,
        scale,
    })
}

/// Single-linkage clustering of eigenvalues within `tol`.
fn cluster(values: &[Complex64], tol: f64) -> Vec<Vec<usize>> {
    let n = values.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            if (values[i] - values[j]).norm() <= tol {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut root_slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if root_slot[r] == usize::MAX {
            root_slot[r] = out.len();
            out.push(Vec::new());
        }
        out[root_slot[r]].push(i);
    }
    out
}

fn real_group_basis(h: &DMatrix<f64>, mu: f64, k: usize, scale: f64) -> (DMatrix<f64>, bool) {
    let dim = h.nrows();
    let shifted = h - DMatrix::identity(dim, dim) * mu;
    let (vecs, sig) = smallest_real(&shifted, k);
    if sig[0] <= EIGENSPACE_TOL * scale.max(1.0) {
        return (vecs, false);
    }
    let mut power = shifted.clone();
    for _ in 1..k {
        power = &power * &shifted;
    }
    (smallest_real(&power, k).0, true)
}

fn smallest_real(m: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let cols = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut basis = DMatrix::zeros(cols, k);
    // the largest of the k smallest singular values comes first
    let mut sigmas = Vec::with_capacity(k);
    for j in 0..k {
        let row = cols - k + j;
        for i in 0..cols {
            basis[(i, j)] = v_t[(row, i)];
        }
        sigmas.push(svd.singular_values[row]);
    }
    (basis, sigmas)
}

fn complex_group_basis(hc: &CMatrix, mu: Complex64, k: usize, scale: f64) -> (CMatrix, bool) {
    let dim = hc.nrows();
    let shifted = hc - CMatrix::identity(dim, dim) * mu;
    let (vecs, sig) = linalg::smallest_right_singular_vectors(&shifted, k);
    if sig[0] <= EIGENSPACE_TOL * scale.max(1.0) {
        return (vecs, false);
    }
    let mut power = shifted.clone();
    for _ in 1..k {
        power = &power * &shifted;
    }
    (linalg::smallest_right_singular_vectors(&power, k).0, true)
}
