//! Riccati solutions from Hamiltonian invariant subspaces.
//!
//! Every `n`-dimensional invariant subspace `[X1; X2]` of the Hamiltonian
//! with invertible `X1` gives a solution `P = X2 X1^-1` of the algebraic
//! Riccati equation. Selections that take whole eigenvalue groups give
//! isolated solutions; selections that take part of a repeated group leave
//! a continuous choice inside that group and are handled by the family
//! sampler.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use twofloat::TwoFloat;

use crate::closed_loop::{self, STABILITY_MARGIN};
use crate::error::{AtlasError, Result};
use crate::hamiltonian::{is_stable, symplectic_j, SpectralData};
use crate::linalg::{self, CMatrix};
use crate::linear_system::{LinearSystem, TimeMode};

pub const MAX_STATE_DIM: usize = 12;
pub const P1_CONDITION_LIMIT: f64 = 1e10;
pub const RESIDUAL_TOL: f64 = 1e-8;
pub const DEDUP_TOL: f64 = 1e-6;
pub const BOUNDARY_POINTS: usize = 64;
pub const BOUNDARY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubspaceSelection {
    pub indices: Vec<usize>,
    pub conjugate_closed: bool,
    #[serde(serialize_with = "linalg::ser_complex")]
    pub lambda1: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionSource {
    Subspace(SubspaceSelection),
    /// A random draw from a family template: `counts[g]` columns taken from
    /// eigenspace group `g`.
    Family { counts: Vec<usize>, draw: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct RiccatiSolution {
    #[serde(serialize_with = "linalg::ser_matrix")]
    pub p: DMatrix<f64>,
    pub are_residual: f64,
    pub symmetry_defect: f64,
    #[serde(serialize_with = "linalg::ser_complex")]
    pub closed_loop_eigs: Vec<Complex64>,
    pub stable: bool,
    pub source: SolutionSource,
    pub p1_condition: f64,
    /// Number of selections that produced this same `P`.
    pub multiplicity: usize,
}

/// Frobenius norm of the Riccati equation's left side, evaluated on the
/// undiscounted problem equivalent to `sys`.
pub fn are_residual(sys: &LinearSystem, p: &DMatrix<f64>) -> f64 {
    let Ok(eff) = sys.effective() else {
        return f64::INFINITY;
    };
    match eff.mode {
        TimeMode::Continuous => {
            let g = eff.control_gramian();
            (eff.a.transpose() * p + p * &eff.a - p * g * p + &eff.q).norm()
        }
        TimeMode::Discrete => {
            let bt_p = eff.b.transpose() * p;
            let Some(inv) = linalg::inverse(&(&eff.r + &bt_p * &eff.b)) else {
                return f64::INFINITY;
            };
            let at_p = eff.a.transpose() * p;
            (&eff.q + &at_p * &eff.a - &at_p * &eff.b * inv * bt_p * &eff.a - p).norm()
        }
    }
}

/// Newton corrections of `P` on the Riccati equation, applied while they
/// reduce the residual. Selections with an ill-conditioned `X1` lose digits
/// in `X2 X1^-1`; a couple of steps recover them.
pub fn refine(sys: &LinearSystem, mut p: DMatrix<f64>) -> DMatrix<f64> {
    let Ok(eff) = sys.effective() else {
        return p;
    };
    let n = eff.n();
    let mut res = newton_terms(&eff, &p).map_or(f64::INFINITY, |(f, _, _)| f.norm());
    for _ in 0..6 {
        if !(res > 1e-14 * (1.0 + p.norm()).powi(2)) {
            break;
        }
        let Some((f, left, right)) = newton_terms(&eff, &p) else {
            break;
        };
        // dF[E] = left E right + c E, vectorized as (right^T kron left) + c I
        let (jac, _) = match eff.mode {
            TimeMode::Continuous => {
                let eye = DMatrix::identity(n, n);
                (eye.kronecker(&left) + right.transpose().kronecker(&eye), ())
            }
            TimeMode::Discrete => (right.transpose().kronecker(&left) - DMatrix::identity(n * n, n * n), ()),
        };
        let Some(step) = jac.lu().solve(&DVector::from_column_slice(f.as_slice())) else {
            break;
        };
        let cand = &p - DMatrix::from_column_slice(n, n, step.as_slice());
        let cand_res = newton_terms(&eff, &cand).map_or(f64::INFINITY, |(f, _, _)| f.norm());
        if !(cand_res < res) {
            break;
        }
        p = cand;
        res = cand_res;
    }
    p
}

/// Residual matrix and the two factors of its derivative: in continuous
/// time `dF[E] = left E + E right`, in discrete time `dF[E] = left E right - E`.
fn newton_terms(
    eff: &LinearSystem,
    p: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    match eff.mode {
        TimeMode::Continuous => {
            let g = eff.control_gramian();
            let f = eff.a.transpose() * p + p * &eff.a - p * &g * p + &eff.q;
            Some((f, eff.a.transpose() - p * &g, &eff.a - &g * p))
        }
        TimeMode::Discrete => {
            let bt_p = eff.b.transpose() * p;
            let s_inv = linalg::inverse(&(&eff.r + &bt_p * &eff.b))?;
            let at_p = eff.a.transpose() * p;
            let k = &s_inv * &bt_p * &eff.a;
            let l = &at_p * &eff.b * &s_inv;
            let f = discrete_residual_extended(eff, p)?;
            Some((f, eff.a.transpose() - l * eff.b.transpose(), &eff.a - &eff.b * k))
        }
    }
}

/// Discrete Riccati residual evaluated in double-double arithmetic. Solutions
/// whose Newton operator is badly conditioned need a residual more accurate
/// than the working precision for the corrections to converge.
fn discrete_residual_extended(eff: &LinearSystem, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let ext = |m: &DMatrix<f64>| m.map(TwoFloat::from);
    let (a, b, q, r, p) = (ext(&eff.a), ext(&eff.b), ext(&eff.q), ext(&eff.r), ext(p));
    let pa = &p * &a;
    let bt_pa = b.transpose() * &pa;
    let s = r + b.transpose() * &p * &b;
    let x = solve_extended(s, bt_pa)?;
    let f = q + a.transpose() * &pa - a.transpose() * &p * &b * x - p;
    Some(f.map(|v| v.hi()))
}

/// Gaussian elimination with partial pivoting.
fn solve_extended(mut m: DMatrix<TwoFloat>, mut rhs: DMatrix<TwoFloat>) -> Option<DMatrix<TwoFloat>> {
    let k = m.nrows();
    for c in 0..k {
        let piv = (c..k).max_by(|&i, &j| m[(i, c)].hi().abs().total_cmp(&m[(j, c)].hi().abs()))?;
        if m[(piv, c)].hi() == 0.0 {
            return None;
        }
        m.swap_rows(c, piv);
        rhs.swap_rows(c, piv);
        for i in c + 1..k {
            let f = m[(i, c)] / m[(c, c)];
            for j in c..k {
                let v = f * m[(c, j)];
                m[(i, j)] -= v;
            }
            for j in 0..rhs.ncols() {
                let v = f * rhs[(c, j)];
                rhs[(i, j)] -= v;
            }
        }
    }
    for c in (0..k).rev() {
        for j in 0..rhs.ncols() {
            let mut v = rhs[(c, j)];
            for i in c + 1..k {
                v -= m[(c, i)] * rhs[(i, j)];
            }
            rhs[(c, j)] = v / m[(c, c)];
        }
    }
    Some(rhs)
}

pub fn residual_bound(p: &DMatrix<f64>) -> f64 {
    let s = 1.0 + p.norm();
    RESIDUAL_TOL * s * s
}

/// Wraps `P` with its residual, closed-loop spectrum and stability verdict.
/// `None` when `P` fails the residual check or its closed loop is undefined.
pub fn classify(
    sys: &LinearSystem,
    p: DMatrix<f64>,
    source: SolutionSource,
    p1_condition: f64,
) -> Option<RiccatiSolution> {
    let p = refine(sys, p);
    let are_residual = are_residual(sys, &p);
    if !(are_residual <= residual_bound(&p)) {
        log::warn!("dropping candidate with Riccati residual {are_residual:e}");
        return None;
    }
    let closed_loop_eigs = closed_loop::effective_spectrum(&p, sys).ok()?;
    let stable = closed_loop_eigs
        .iter()
        .all(|&l| is_stable(sys.mode, original_eigenvalue(sys, l), STABILITY_MARGIN));
    Some(RiccatiSolution {
        symmetry_defect: linalg::symmetry_defect(&p),
        p,
        are_residual,
        closed_loop_eigs,
        stable,
        source,
        p1_condition,
        multiplicity: 1,
    })
}

/// Maps an eigenvalue of the equivalent undiscounted closed loop back to the
/// closed loop of the discounted system itself.
fn original_eigenvalue(sys: &LinearSystem, l: Complex64) -> Complex64 {
    match (sys.mode, sys.discount) {
        (_, None) => l,
        (TimeMode::Continuous, Some(tau)) => l + 0.5 / tau,
        (TimeMode::Discrete, Some(gamma)) => l / gamma.sqrt(),
    }
}

/// `P = Re(X2 X1^-1)` with the condition number of `X1`.
fn solve_graph(x: &CMatrix, n: usize) -> (Option<DMatrix<f64>>, f64) {
    let x1 = x.rows(0, n).into_owned();
    let x2 = x.rows(n, n).into_owned();
    let cond = linalg::condition_number_c(&x1);
    if !(cond < P1_CONDITION_LIMIT) {
        return (None, cond);
    }
    // P X1 = X2  <=>  X1^T P^T = X2^T
    let Some(pt) = x1.transpose().lu().solve(&x2.transpose()) else {
        return (None, cond);
    };
    (Some(pt.transpose().map(|z| z.re)), cond)
}

/// One unit of choice: a real group, or a conjugate pair of groups
/// represented by its upper-half-plane member.
#[derive(Debug, Clone)]
struct Unit {
    group: usize,
    conjugate: Option<usize>,
    size: usize,
    real: bool,
}

fn units(spec: &SpectralData) -> Vec<Unit> {
    let mut out = Vec::new();
    for (g, idx) in spec.eigenspace_groups.iter().enumerate() {
        let l = spec.eigenvalues[idx[0]];
        if l.im < 0.0 {
            continue;
        }
        let real = l.im == 0.0;
        out.push(Unit {
            group: g,
            conjugate: (!real).then(|| spec.conjugate_group(g)),
            size: idx.len(),
            real,
        });
    }
    out
}

/// All vectors `j` with `0 <= j_u <= size_u` and `sum_u weight_u j_u = n`.
fn count_vectors(units: &[Unit], n: usize) -> Vec<Vec<usize>> {
    fn rec(units: &[Unit], k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == units.len() {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        let w = if units[k].real { 1 } else { 2 };
        for j in 0..=units[k].size {
            if j * w > left {
                break;
            }
            cur.push(j);
            rec(units, k + 1, left - j * w, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(units, 0, n, &mut Vec::new(), &mut out);
    out
}

/// Template of a continuum: per-group column counts with at least one
/// group taken partially.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyTemplate {
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SolutionFamily {
    pub isolated: Vec<RiccatiSolution>,
    pub templates: Vec<FamilyTemplate>,
    pub count_discrete: usize,
    pub has_continuum: bool,
    /// Whole-group selections whose `X1` was singular.
    pub singular_selections: usize,
    pub spectrum: SpectralData,
    pub system: LinearSystem,
}

impl SolutionFamily {
    pub fn stable_index(&self) -> Option<usize> {
        self.isolated.iter().position(|s| s.stable)
    }

    pub fn stable_count(&self) -> usize {
        self.isolated.iter().filter(|s| s.stable).count()
    }

    /// `k` members drawn round-robin over the templates; failed draws are
    /// skipped, so fewer than `k` may come back.
    pub fn sample<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<RiccatiSolution> {
        let mut out = Vec::new();
        if self.templates.is_empty() {
            return out;
        }
        for draw in 0..k {
            let t = &self.templates[draw % self.templates.len()];
            if let Some(s) = sample_template(&self.spectrum, &self.system, t, draw, rng) {
                out.push(s);
            }
        }
        out
    }

    /// Isolated solutions followed by `k` sampled family members.
    pub fn members<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<RiccatiSolution> {
        let mut out = self.isolated.clone();
        out.extend(self.sample(k, rng));
        out
    }
}

/// The stabilizing solution of `sys`, found by enumeration.
pub fn stabilizing_solution(sys: &LinearSystem) -> Result<RiccatiSolution> {
    let h = crate::hamiltonian::build(sys)?;
    let family = enumerate(&crate::hamiltonian::spectrum(&h)?, sys)?;
    let i = family.stable_index().ok_or(AtlasError::NoStabilizingSolution)?;
    Ok(family.isolated[i].clone())
}

/// Enumerates the conjugate-closed selections of the Hamiltonian spectrum.
pub fn enumerate(spec: &SpectralData, sys: &LinearSystem) -> Result<SolutionFamily> {
    let n = spec.n;
    if n > MAX_STATE_DIM {
        return Err(AtlasError::EnumerationCap { n, cap: MAX_STATE_DIM });
    }
    if n != sys.n() || spec.mode != sys.mode {
        return Err(AtlasError::DimensionMismatch("spectrum does not belong to this system".into()));
    }
    let units = units(spec);
    let n_groups = spec.eigenspace_groups.len();
    let mut isolated: Vec<RiccatiSolution> = Vec::new();
    let mut templates = Vec::new();
    let mut singular = 0usize;

    for counts in count_vectors(&units, n) {
        let mut per_group = vec![0usize; n_groups];
        for (u, &j) in units.iter().zip(&counts) {
            per_group[u.group] = j;
            if let Some(c) = u.conjugate {
                per_group[c] = j;
            }
        }
        let partial = units.iter().zip(&counts).any(|(u, &j)| j > 0 && j < u.size);
        if partial {
            templates.push(FamilyTemplate { counts: per_group });
            continue;
        }
        let indices: Vec<usize> = spec
            .eigenspace_groups
            .iter()
            .zip(&per_group)
            .filter(|(_, &j)| j > 0)
            .flat_map(|(g, _)| g.iter().copied())
            .collect();
        let x = select_columns(&spec.basis, &indices);
        let (p, cond) = solve_graph(&x, n);
        let Some(p) = p else {
            singular += 1;
            continue;
        };
        let selection = SubspaceSelection {
            lambda1: indices.iter().map(|&i| spec.eigenvalues[i]).collect(),
            conjugate_closed: indices.iter().all(|i| indices.contains(&spec.pairing[*i])),
            indices,
        };
        if let Some(sol) = classify(sys, p, SolutionSource::Subspace(selection), cond) {
            isolated.push(sol);
        }
    }

    let isolated = dedup(isolated);
    let mut family = SolutionFamily {
        count_discrete: isolated.len(),
        isolated,
        templates,
        has_continuum: false,
        singular_selections: singular,
        spectrum: spec.clone(),
        system: sys.clone(),
    };
    family.has_continuum = probe_continuum(&family);
    Ok(family)
}

/// A template spans a continuum when two draws give distinct valid members.
fn probe_continuum(family: &SolutionFamily) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    family.templates.iter().any(|t| {
        let mut found: Vec<DMatrix<f64>> = Vec::new();
        for draw in 0..8 {
            if let Some(s) = sample_template(&family.spectrum, &family.system, t, draw, &mut rng) {
                if found.iter().any(|q| !same_p(q, &s.p)) {
                    return true;
                }
                found.push(s.p);
            }
        }
        false
    })
}

fn same_p(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    (a - b).norm() < DEDUP_TOL * (1.0 + a.norm().max(b.norm()))
}

fn dedup(mut sols: Vec<RiccatiSolution>) -> Vec<RiccatiSolution> {
    // candidates can only coincide when their norms are close, so a sort
    // by norm keeps the comparison window small
    sols.sort_by(|a, b| a.p.norm().total_cmp(&b.p.norm()));
    let mut out: Vec<RiccatiSolution> = Vec::with_capacity(sols.len());
    for s in sols {
        let norm = s.p.norm();
        let hit = out
            .iter_mut()
            .rev()
            .take_while(|o| norm - o.p.norm() <= DEDUP_TOL * (1.0 + norm))
            .find(|o| same_p(&o.p, &s.p));
        match hit {
            Some(o) => o.multiplicity += 1,
            None => out.push(s),
        }
    }
    // restore a canonical order: stable first, then by selection
    out.sort_by(|a, b| {
        b.stable
            .cmp(&a.stable)
            .then_with(|| source_key(&a.source).cmp(&source_key(&b.source)))
    });
    out
}

fn source_key(s: &SolutionSource) -> Vec<usize> {
    match s {
        SolutionSource::Subspace(sel) => sel.indices.clone(),
        SolutionSource::Family { counts, draw } => {
            let mut k = counts.clone();
            k.push(*draw);
            k
        }
    }
}

fn select_columns(basis: &CMatrix, indices: &[usize]) -> CMatrix {
    let mut x = CMatrix::zeros(basis.nrows(), indices.len());
    for (c, &i) in indices.iter().enumerate() {
        x.set_column(c, &basis.column(i));
    }
    x
}

fn group_basis(spec: &SpectralData, g: usize) -> CMatrix {
    select_columns(&spec.basis, &spec.eigenspace_groups[g])
}

/// One random member of a template: whole groups contribute all their
/// columns; for a partial group, columns are drawn one at a time as random
/// unit combinations of the group's basis, constrained to be J-orthogonal
/// (`v^T J w = 0`) to everything chosen so far. The resulting subspace is
/// Lagrangian, so `P` is symmetric.
fn sample_template<R: Rng>(
    spec: &SpectralData,
    sys: &LinearSystem,
    template: &FamilyTemplate,
    draw: usize,
    rng: &mut R,
) -> Option<RiccatiSolution> {
    let n = spec.n;
    let j = linalg::to_complex(&symplectic_j(n));
    let cutoff = 1e-9 * spec.scale.max(1.0);
    let units = units(spec);
    let mut chosen: Vec<DVector<Complex64>> = Vec::new();

    for u in &units {
        if template.counts[u.group] == u.size {
            let gb = group_basis(spec, u.group);
            chosen.extend(gb.column_iter().map(|c| c.into_owned()));
            if let Some(c) = u.conjugate {
                let cb = group_basis(spec, c);
                chosen.extend(cb.column_iter().map(|c| c.into_owned()));
            }
        }
    }
    for u in &units {
        let take = template.counts[u.group];
        if take == 0 || take == u.size {
            continue;
        }
        let gb = group_basis(spec, u.group);
        let mut coeffs: Vec<DVector<Complex64>> = Vec::new();
        for _ in 0..take {
            // rows: J-orthogonality to chosen columns, then orthogonality to
            // the coefficient vectors already used in this group
            let rows = chosen.len() + coeffs.len();
            let mut cons = CMatrix::zeros(rows, u.size);
            for (r, v) in chosen.iter().enumerate() {
                let row = v.transpose() * &j * &gb;
                cons.row_mut(r).copy_from(&row);
            }
            for (r, c) in coeffs.iter().enumerate() {
                cons.row_mut(chosen.len() + r).copy_from(&c.adjoint());
            }
            let c = if u.real {
                // keep real groups real: stack real and imaginary parts
                let mut real_cons = DMatrix::zeros(2 * rows, u.size);
                for r in 0..rows {
                    for k in 0..u.size {
                        real_cons[(2 * r, k)] = cons[(r, k)].re;
                        real_cons[(2 * r + 1, k)] = cons[(r, k)].im;
                    }
                }
                let ns = linalg::null_space(&real_cons, cutoff);
                if ns.ncols() == 0 {
                    return None;
                }
                let z = random_real_direction(ns.ncols(), rng);
                (ns * z).map(|v| Complex64::new(v, 0.0))
            } else {
                let ns = linalg::null_space_c(&cons, cutoff);
                if ns.ncols() == 0 {
                    return None;
                }
                let z = random_complex_direction(ns.ncols(), rng);
                ns * z
            };
            let v = &gb * &c;
            let v = &v / Complex64::new(v.norm(), 0.0);
            if let Some(_) = u.conjugate {
                chosen.push(v.map(|z| z.conj()));
            }
            chosen.push(v);
            coeffs.push(c);
        }
    }
    if chosen.len() != n {
        return None;
    }
    let x = CMatrix::from_columns(&chosen);
    let (p, cond) = solve_graph(&x, n);
    let p = p?;
    // the Lagrangian construction makes P symmetric up to rounding
    let p = (&p + p.transpose()) * 0.5;
    classify(sys, p, SolutionSource::Family { counts: template.counts.clone(), draw }, cond)
}

fn random_real_direction<R: Rng>(d: usize, rng: &mut R) -> DVector<f64> {
    match d {
        1 => DVector::from_element(1, if rng.random::<bool>() { 1.0 } else { -1.0 }),
        2 => {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            DVector::from_vec(vec![a.cos(), a.sin()])
        }
        _ => loop {
            let z: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            let norm = z.norm();
            if norm > 1e-12 {
                break z / norm;
            }
        },
    }
}

fn random_complex_direction<R: Rng>(d: usize, rng: &mut R) -> DVector<Complex64> {
    loop {
        let z = DVector::from_fn(d, |_, _| {
            Complex64::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
        });
        let norm = z.norm();
        if norm > 1e-12 {
            break z / Complex64::new(norm, 0.0);
        }
    }
}

/// Members whose repeated-eigenvalue freedom involves group `group`:
/// `k` draws from the templates taking that group partially. Empty when the
/// group is a singleton.
pub fn sample_family<R: Rng>(
    family: &SolutionFamily,
    group: usize,
    k: usize,
    rng: &mut R,
) -> Vec<RiccatiSolution> {
    let size = family.spectrum.eigenspace_groups.get(group).map_or(0, Vec::len);
    if size < 2 {
        return Vec::new();
    }
    let relevant: Vec<&FamilyTemplate> = family
        .templates
        .iter()
        .filter(|t| t.counts[group] > 0 && t.counts[group] < size)
        .collect();
    if relevant.is_empty() {
        return Vec::new();
    }
    (0..k)
        .filter_map(|draw| {
            let t = relevant[draw % relevant.len()];
            sample_template(&family.spectrum, &family.system, t, draw, rng)
        })
        .collect()
}

/// A set of boundary states with the value the value function must take there.
#[derive(Debug, Clone, PartialEq)]
pub enum Boundary {
    /// The sphere `||x||^2 = radius_sq`.
    Sphere { radius_sq: f64, value: f64 },
    Points { points: Vec<DVector<f64>>, value: f64 },
}

impl Boundary {
    pub fn value(&self) -> f64 {
        match self {
            Boundary::Sphere { value, .. } | Boundary::Points { value, .. } => *value,
        }
    }

    pub fn points(&self, n: usize) -> Vec<DVector<f64>> {
        match self {
            Boundary::Points { points, .. } => points.clone(),
            Boundary::Sphere { radius_sq, .. } => sphere_points(n, radius_sq.sqrt(), BOUNDARY_POINTS),
        }
    }
}

/// Deterministic, evenly spread points on the sphere of radius `r`.
pub fn sphere_points(n: usize, r: f64, count: usize) -> Vec<DVector<f64>> {
    match n {
        0 => Vec::new(),
        1 => vec![DVector::from_element(1, r), DVector::from_element(1, -r)],
        2 => (0..count)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / count as f64;
                DVector::from_vec(vec![r * a.cos(), r * a.sin()])
            })
            .collect(),
        _ => {
            const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
            let mut out = Vec::with_capacity(count);
            let mut i = 1u64;
            while out.len() < count {
                let v = DVector::from_fn(n, |d, _| 2.0 * radical_inverse(i, PRIMES[d % PRIMES.len()]) - 1.0);
                i += 1;
                let norm = v.norm();
                if norm > 1e-3 {
                    out.push(v * (r / norm));
                }
            }
            out
        }
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut out = 0.0;
    while i > 0 {
        f /= base as f64;
        out += f * (i % base) as f64;
        i /= base;
    }
    out
}

/// Keeps the candidates whose quadratic value (plus an optional constant
/// offset) matches every boundary. The offset is fixed by the first
/// boundary and must then fit all the others.
pub fn boundary_filter(
    candidates: &[RiccatiSolution],
    boundaries: &[Boundary],
    allow_offset: bool,
    sys: &LinearSystem,
) -> Result<Vec<(RiccatiSolution, f64)>> {
    if sys.mode != TimeMode::Continuous || sys.discount.is_some() {
        return Err(AtlasError::WrongMode(
            "boundary offsets need a continuous, undiscounted system".into(),
        ));
    }
    let n = sys.n();
    let sets: Vec<(Vec<DVector<f64>>, f64)> = boundaries.iter().map(|b| (b.points(n), b.value())).collect();
    let mut out = Vec::new();
    for cand in candidates {
        let v = |x: &DVector<f64>| x.dot(&(&cand.p * x));
        let offset = match (allow_offset, sets.first()) {
            (true, Some((pts, value))) if !pts.is_empty() => {
                value - pts.iter().map(v).sum::<f64>() / pts.len() as f64
            }
            _ => 0.0,
        };
        let fits = sets.iter().all(|(pts, value)| {
            pts.iter()
                .all(|x| (v(x) + offset - value).abs() <= BOUNDARY_TOL * value.abs().max(1.0))
        });
        if fits {
            out.push((cand.clone(), offset));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{build, spectrum};

    const R2: f64 = std::f64::consts::SQRT_2;

    fn toy_family() -> SolutionFamily {
        let sys = LinearSystem::toy();
        let spec = spectrum(&build(&sys).unwrap()).unwrap();
        enumerate(&spec, &sys).unwrap()
    }

    #[test]
    fn toy_isolated_pair() {
        let fam = toy_family();
        assert_eq!(fam.count_discrete, 2);
        assert!(fam.has_continuum);
        let stable = &fam.isolated[fam.stable_index().unwrap()];
        assert!((&stable.p - DMatrix::identity(2, 2) * (1.0 + R2)).norm() < 1e-12);
        assert!(stable.are_residual < 1e-12);
        let other = fam.isolated.iter().find(|s| !s.stable).unwrap();
        assert!((&other.p - DMatrix::identity(2, 2) * (1.0 - R2)).norm() < 1e-12);
        assert_eq!(fam.stable_count(), 1);
    }

    #[test]
    fn scalar_pair() {
        let s = |v| DMatrix::from_element(1, 1, v);
        let sys = LinearSystem::new(s(0.0), s(1.0), s(1.0), s(1.0), TimeMode::Continuous);
        let spec = spectrum(&build(&sys).unwrap()).unwrap();
        let fam = enumerate(&spec, &sys).unwrap();
        assert_eq!(fam.count_discrete, 2);
        assert!(!fam.has_continuum);
        let mut ps: Vec<f64> = fam.isolated.iter().map(|x| x.p[(0, 0)]).collect();
        ps.sort_by(f64::total_cmp);
        assert!((ps[0] + 1.0).abs() < 1e-12 && (ps[1] - 1.0).abs() < 1e-12);
        let stable = &fam.isolated[fam.stable_index().unwrap()];
        assert!((stable.p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((stable.closed_loop_eigs[0].re + 1.0).abs() < 1e-12);
    }

    #[test]
    fn toy_ring_members() {
        let fam = toy_family();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let plus_group = 1;
        let members = sample_family(&fam, plus_group, 16, &mut rng);
        assert!(members.len() >= 14);
        for m in &members {
            let (a, b, c) = (m.p[(0, 0)], m.p[(0, 1)], m.p[(1, 1)]);
            assert!((a + c - 2.0).abs() < 1e-6);
            assert!((b * b - (2.0 * a + 1.0 - a * a)).abs() < 1e-6);
            assert!(m.are_residual <= 1e-8);
            assert!(!m.stable);
        }
    }

    #[test]
    fn singleton_group_has_no_family() {
        let s = |v| DMatrix::from_element(1, 1, v);
        let sys = LinearSystem::new(s(0.0), s(1.0), s(1.0), s(1.0), TimeMode::Continuous);
        let spec = spectrum(&build(&sys).unwrap()).unwrap();
        let fam = enumerate(&spec, &sys).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_family(&fam, 0, 16, &mut rng).is_empty());
    }

    #[test]
    fn cap_is_enforced() {
        let n = 13;
        let sys = LinearSystem::new(
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            TimeMode::Continuous,
        );
        let spec = spectrum(&build(&sys).unwrap()).unwrap();
        assert!(matches!(enumerate(&spec, &sys), Err(AtlasError::EnumerationCap { n: 13, .. })));
    }

    #[test]
    fn boundary_demonstrations() {
        let fam = toy_family();
        let sys = LinearSystem::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let members = fam.members(16, &mut rng);
        let circle = Boundary::Sphere { radius_sq: 1.0, value: 1.0 + R2 };

        let kept = boundary_filter(&members, &[circle.clone()], true, &sys).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().any(|(s, c)| s.stable && c.abs() < 1e-8));
        assert!(kept.iter().any(|(s, c)| !s.stable && (c - 2.0 * R2).abs() < 1e-8));

        let inner = Boundary::Sphere { radius_sq: 0.5, value: 0.0 };
        assert!(boundary_filter(&members, &[circle.clone(), inner], true, &sys).unwrap().is_empty());

        let kept = boundary_filter(&members, &[circle], false, &sys).unwrap();
        assert_eq!(kept.len(), 1);
        assert!(kept[0].0.stable);
    }

    #[test]
    fn sphere_points_lie_on_the_sphere() {
        for n in 1..5 {
            for p in sphere_points(n, 2.0, 64) {
                assert!((p.norm() - 2.0).abs() < 1e-12);
            }
        }
    }
}
