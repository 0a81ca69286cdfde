//! Reference solvers used as independent oracles in tests.
//!
//! Nothing here goes through Hamiltonian eigenvectors: Riccati solutions come
//! from Newton/Kleinman iteration or fixed-point iteration, Lyapunov
//! equations from Kronecker vectorization.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Solves `A^T X + X A + Q = 0` by vectorization.
pub fn lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    // vec(A^T X) = (I kron A^T) vec X,  vec(X A) = (A^T kron I) vec X
    let k = eye.kronecker(&a.transpose()) + a.transpose().kronecker(&eye);
    let rhs = -DVector::from_column_slice(q.as_slice());
    let x = k.lu().solve(&rhs)?;
    Some(DMatrix::from_column_slice(n, n, x.as_slice()))
}

/// Stabilizing gain for `(A, B)` by Bass's method.
pub fn bass_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let beta = a.norm() + 1.0;
    let shifted = a + DMatrix::identity(n, n) * beta;
    // (A + bI) W + W (A + bI)^T = 2 B B^T
    let w = lyapunov(&(-shifted.transpose()), &(b * b.transpose() * 2.0))?;
    let w = (&w + w.transpose()) * 0.5;
    Some(b.transpose() * w.try_inverse()?)
}

/// Stabilizing solution of `A^T P + P A - P B R^-1 B^T P + Q = 0` by
/// Kleinman's Newton iteration.
pub fn kleinman(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let r_inv = r.clone().try_inverse()?;
    let mut k = bass_gain(a, b)?;
    let mut p_prev: Option<DMatrix<f64>> = None;
    for _ in 0..200 {
        let a_k = a - b * &k;
        let rhs = q + k.transpose() * r * &k;
        let p = lyapunov(&a_k, &rhs)?;
        let p = (&p + p.transpose()) * 0.5;
        k = &r_inv * b.transpose() * &p;
        if let Some(prev) = &p_prev {
            if (&p - prev).norm() <= 1e-15 * (1.0 + p.norm()) {
                return Some(p);
            }
        }
        p_prev = Some(p);
    }
    p_prev
}

/// Stabilizing solution of the discrete Riccati equation by iterating
/// `P <- Q + A^T P A - A^T P B (R + B^T P B)^-1 B^T P A` from `P = Q`.
pub fn dare_fixed_point(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let mut p = q.clone();
    for _ in 0..2_000_000 {
        let bt_p = b.transpose() * &p;
        let inv = (r + &bt_p * b).try_inverse()?;
        let at_p = a.transpose() * &p;
        let next = q + &at_p * a - &at_p * b * inv * bt_p * a;
        let next = (&next + next.transpose()) * 0.5;
        let done = (&next - &p).norm() <= 1e-15 * (1.0 + next.norm());
        p = next;
        if !p.iter().all(|v| v.is_finite()) {
            return None;
        }
        if done {
            return Some(p);
        }
    }
    None
}

/// Newton's method on the full (not necessarily symmetric) matrix equation
/// `A^T P + P A - P G P + Q - s P = 0`, started from `p0`.
pub fn newton_riccati(
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    q: &DMatrix<f64>,
    s: f64,
    p0: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let f = |p: &DMatrix<f64>| a.transpose() * p + p * a - p * g * p + q - p * s;
    let mut p = p0.clone();
    for _ in 0..100 {
        let res = f(&p);
        if res.norm() <= 1e-13 * (1.0 + p.norm()).powi(2) {
            return Some(p);
        }
        // dF[E] = A^T E + E A - E G P - P G E - s E
        let gp = g * &p;
        let pg = &p * g;
        let jac = eye.kronecker(&(a.transpose() - &pg)) + (a - &gp).transpose().kronecker(&eye)
            - DMatrix::identity(n * n, n * n) * s;
        let step = jac.lu().solve(&DVector::from_column_slice(res.as_slice()))?;
        p -= DMatrix::from_column_slice(n, n, step.as_slice());
        if !p.iter().all(|v| v.is_finite()) || p.norm() > 1e12 {
            return None;
        }
    }
    let res = f(&p);
    (res.norm() <= 1e-10 * (1.0 + p.norm()).powi(2)).then_some(p)
}

/// Rank of `[B, AB, ..., A^{n-1}B]` against a relative cutoff.
pub fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let mut cols = Vec::new();
    let mut block = b.clone();
    for _ in 0..n {
        cols.extend(block.column_iter().map(|c| c.into_owned()));
        block = a * block;
    }
    let m = DMatrix::from_columns(&cols);
    let sv = m.svd(false, false).singular_values;
    let smax = sv.max();
    sv.iter().filter(|&&s| s > 1e-8 * smax).count()
}

/// Matrices of a random LQ instance.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

fn gaussian<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `A` Gaussian, `B` Gaussian with `m` columns, `Q = C^T C + 0.1 I` and
/// `R = D^T D + 0.5 I`, so that `Q` and `R` are positive definite.
pub fn random_instance<R: Rng>(n: usize, m: usize, rng: &mut R) -> RandomInstance {
    let a = gaussian(n, n, rng) / (n as f64).sqrt();
    let b = gaussian(n, m, rng);
    let c = gaussian(n, n, rng) / (n as f64).sqrt();
    let d = gaussian(m, m, rng) / (m as f64).sqrt();
    RandomInstance {
        a,
        b,
        q: c.transpose() * c + DMatrix::identity(n, n) * 0.1,
        r: d.transpose() * d + DMatrix::identity(m, m) * 0.5,
    }
}

/// Random orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let qr = gaussian(n, n, rng).qr();
    let (q, r) = (qr.q(), qr.r());
    let signs = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| r[(i, i)].signum()));
    q * signs
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_gradient<F: FnMut(&DVector<f64>) -> f64>(mut f: F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_kleinman() {
        let s = |v| DMatrix::from_element(1, 1, v);
        let p = kleinman(&s(0.0), &s(1.0), &s(1.0), &s(1.0)).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn scalar_dare() {
        let s = |v| DMatrix::from_element(1, 1, v);
        let p = dare_fixed_point(&s(2.0), &s(1.0), &s(1.0), &s(1.0)).unwrap();
        assert!((p[(0, 0)] - (2.0 + 5f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn lyapunov_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian(3, 3, &mut rng) - DMatrix::identity(3, 3) * 4.0;
        let q = DMatrix::identity(3, 3);
        let x = lyapunov(&a, &q).unwrap();
        assert!((a.transpose() * &x + &x * &a + q).norm() < 1e-12);
    }

    #[test]
    fn newton_finds_the_negative_root() {
        let s = |v| DMatrix::from_element(1, 1, v);
        let p = newton_riccati(&s(0.0), &s(1.0), &s(1.0), 0.0, &s(-3.0)).unwrap();
        assert!((p[(0, 0)] + 1.0).abs() < 1e-12);
    }
}
