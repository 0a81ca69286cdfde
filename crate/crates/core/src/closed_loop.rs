//! Closed-loop dynamics, linear-policy simulation and trajectory costs.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{AtlasError, Result};
use crate::hamiltonian::is_stable;
use crate::linalg;
use crate::linear_system::{LinearSystem, TimeMode};

/// States with `||x||_inf` above this count as diverged.
pub const DIVERGENCE_BOUND: f64 = 1e6;
/// Margin applied to the stability test of closed-loop eigenvalues.
pub const STABILITY_MARGIN: f64 = 1e-8;

/// State feedback `u = -K x`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearPolicy {
    #[serde(serialize_with = "linalg::ser_matrix")]
    pub k: DMatrix<f64>,
    pub mode: TimeMode,
}

impl LinearPolicy {
    pub fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.k * x)
    }
}

/// Optimal gain associated with `P`: `R^-1 B^T P` in continuous time,
/// `(R + B^T P B)^-1 B^T P A` in discrete time (with `A, B` scaled by
/// `sqrt(gamma)` when discounted).
pub fn policy_from(p: &DMatrix<f64>, sys: &LinearSystem) -> Result<LinearPolicy> {
    let eff = sys.effective()?;
    let r_inv = linalg::inverse(&eff.r).ok_or(AtlasError::NotPd { min_eig: 0.0, asym: 0.0 })?;
    let k = match sys.mode {
        TimeMode::Continuous => r_inv * eff.b.transpose() * p,
        // (R + B^T P B)^-1 B^T P = R^-1 B^T P (I + G P)^-1, which stays accurate
        // when P is indefinite and R + B^T P B is badly conditioned
        TimeMode::Discrete => r_inv * eff.b.transpose() * p * discrete_resolvent(&eff, p)? * &eff.a,
    };
    Ok(LinearPolicy { k, mode: sys.mode })
}

/// `(I + B R^-1 B^T P)^-1`, singular exactly when `R + B^T P B` is.
fn discrete_resolvent(eff: &LinearSystem, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = eff.n();
    let m = DMatrix::identity(n, n) + eff.control_gramian() * p;
    if linalg::rank_relative(&m, 1e-14) < n {
        return Err(AtlasError::SingularRbpb);
    }
    linalg::inverse(&m).ok_or(AtlasError::SingularRbpb)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosedLoop {
    #[serde(serialize_with = "linalg::ser_matrix")]
    pub matrix: DMatrix<f64>,
    #[serde(serialize_with = "linalg::ser_complex")]
    pub eigenvalues: Vec<Complex64>,
    pub stable: bool,
}

/// `A - B K` for the gain of `P`, on the system's own dynamics.
pub fn closed_loop_matrix(p: &DMatrix<f64>, sys: &LinearSystem) -> Result<ClosedLoop> {
    let eff = effective_closed_loop(p, sys)?;
    let n = sys.n();
    let matrix = match (sys.mode, sys.discount) {
        (_, None) => eff,
        (TimeMode::Continuous, Some(tau)) => eff + DMatrix::identity(n, n) * (0.5 / tau),
        (TimeMode::Discrete, Some(gamma)) => eff / gamma.sqrt(),
    };
    let eigenvalues = effective_spectrum(p, sys)?
        .into_iter()
        .map(|l| match (sys.mode, sys.discount) {
            (_, None) => l,
            (TimeMode::Continuous, Some(tau)) => l + 0.5 / tau,
            (TimeMode::Discrete, Some(gamma)) => l / gamma.sqrt(),
        })
        .collect::<Vec<_>>();
    let stable = eigenvalues.iter().all(|&l| is_stable(sys.mode, l, STABILITY_MARGIN));
    Ok(ClosedLoop { matrix, eigenvalues, stable })
}

/// Closed-loop matrix of the equivalent undiscounted problem, whose spectrum
/// is the eigenvalue selection that produced `P`.
pub fn effective_closed_loop(p: &DMatrix<f64>, sys: &LinearSystem) -> Result<DMatrix<f64>> {
    let eff = sys.effective()?;
    match eff.mode {
        TimeMode::Continuous => Ok(&eff.a - eff.control_gramian() * p),
        TimeMode::Discrete => {
            discrete_resolvent(&eff, p)?;
            let bt_p = eff.b.transpose() * p;
            let s = &eff.r + &bt_p * &eff.b;
            let k = s.lu().solve(&(bt_p * &eff.a)).ok_or(AtlasError::SingularRbpb)?;
            Ok(&eff.a - &eff.b * k)
        }
    }
}

/// Spectrum of [`effective_closed_loop`].
pub fn effective_spectrum(p: &DMatrix<f64>, sys: &LinearSystem) -> Result<Vec<Complex64>> {
    linalg::eigenvalues(&effective_closed_loop(p, sys)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub running_costs: Vec<f64>,
    pub cumulative_cost: f64,
    pub diverged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectories hold at least the initial state")
    }

    /// CSV with columns `t, x_1..x_n, u_1..u_m, l`.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.controls.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.push("l".into());
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.len() {
            let mut row = vec![self.times[i].to_string()];
            row.extend(self.states[i].iter().map(|v| v.to_string()));
            row.extend(self.controls[i].iter().map(|v| v.to_string()));
            row.push(self.running_costs[i].to_string());
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Trapezoid rule over equally spaced samples.
pub fn trapezoid(values: &[f64], dt: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    dt * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}

fn quadratic(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

/// Rolls the closed loop forward for `steps` steps: classical RK4 with step
/// `dt` in continuous time, the plain map in discrete time (where `dt` only
/// labels the time axis). Stops early once `||x||_inf` exceeds the
/// divergence bound. The cumulative cost is the trapezoid integral of the
/// running cost in continuous time and the plain sum in discrete time.
pub fn simulate(
    sys: &LinearSystem,
    policy: &LinearPolicy,
    x0: &DVector<f64>,
    steps: usize,
    dt: f64,
) -> Result<Trajectory> {
    if sys.mode == TimeMode::Continuous && !(dt > 0.0) {
        return Err(AtlasError::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    let a_cl = &sys.a - &sys.b * &policy.k;
    let cost = |x: &DVector<f64>, u: &DVector<f64>| quadratic(&sys.q, x) + quadratic(&sys.r, u);

    let mut x = x0.clone();
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        controls: Vec::with_capacity(steps + 1),
        running_costs: Vec::with_capacity(steps + 1),
        cumulative_cost: 0.0,
        diverged: false,
    };
    for step in 0..=steps {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(AtlasError::NonFiniteState { step });
        }
        let u = policy.control(&x);
        traj.times.push(step as f64 * dt);
        traj.running_costs.push(cost(&x, &u));
        traj.states.push(x.clone());
        traj.controls.push(u);
        if x.amax() > DIVERGENCE_BOUND {
            traj.diverged = true;
            break;
        }
        if step == steps {
            break;
        }
        x = match sys.mode {
            TimeMode::Continuous => rk4_linear(&a_cl, &x, dt),
            TimeMode::Discrete => &a_cl * &x,
        };
    }
    traj.cumulative_cost = match sys.mode {
        TimeMode::Continuous => trapezoid(&traj.running_costs, dt),
        TimeMode::Discrete => traj.running_costs.iter().sum(),
    };
    Ok(traj)
}

fn rk4_linear(a: &DMatrix<f64>, x: &DVector<f64>, dt: f64) -> DVector<f64> {
    let k1 = a * x;
    let k2 = a * (x + &k1 * (0.5 * dt));
    let k3 = a * (x + &k2 * (0.5 * dt));
    let k4 = a * (x + &k3 * dt);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// `x0^T P x0`, the optimal cost-to-go when `P` is the stabilizing solution.
pub fn exact_cost(p: &DMatrix<f64>, x0: &DVector<f64>) -> f64 {
    quadratic(p, x0)
}

#[cfg(test)]
mod tests {
    use super::*;

    const R2: f64 = std::f64::consts::SQRT_2;

    fn toy_p(c: f64) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * c
    }

    #[test]
    fn toy_gains_and_closed_loops() {
        let sys = LinearSystem::toy();
        let policy = policy_from(&toy_p(1.0 + R2), &sys).unwrap();
        assert!((&policy.k - toy_p(1.0 + R2)).norm() < 1e-15);

        let cl = closed_loop_matrix(&toy_p(1.0 + R2), &sys).unwrap();
        assert!((&cl.matrix + toy_p(R2)).norm() < 1e-14);
        assert!(cl.stable);
        for l in &cl.eigenvalues {
            assert!((l.re + R2).abs() < 1e-12 && l.im == 0.0);
        }

        let cl = closed_loop_matrix(&toy_p(1.0 - R2), &sys).unwrap();
        assert!((&cl.matrix - toy_p(R2)).norm() < 1e-14);
        assert!(!cl.stable);

        let cl = closed_loop_matrix(&DMatrix::zeros(2, 2), &sys).unwrap();
        assert_eq!(cl.matrix, DMatrix::identity(2, 2));
        assert!(!cl.stable);
        assert_eq!(policy_from(&DMatrix::zeros(2, 2), &sys).unwrap().k, DMatrix::zeros(2, 2));
    }

    #[test]
    fn scalar_discrete_gain() {
        let s = |v| DMatrix::from_element(1, 1, v);
        let sys = LinearSystem::new(s(2.0), s(1.0), s(1.0), s(1.0), TimeMode::Discrete);
        // P = 1 + 4P - 4P^2 / (1 + P)  <=>  P^2 - 4P - 1 = 0
        let p = 2.0 + 5f64.sqrt();
        let k = policy_from(&s(p), &sys).unwrap().k[(0, 0)];
        assert!((k - p * 2.0 / (1.0 + p)).abs() < 1e-14);
        assert!((k - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-12);
        let cl = closed_loop_matrix(&s(p), &sys).unwrap();
        assert!((cl.matrix[(0, 0)] - (3.0 - 5f64.sqrt()) / 2.0).abs() < 1e-12);
        assert!(cl.stable);
    }

    #[test]
    fn simulation_follows_the_exponential() {
        let sys = LinearSystem::toy();
        let policy = policy_from(&toy_p(1.0 + R2), &sys).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 1.0]);
        let traj = simulate(&sys, &policy, &x0, 1000, 0.01).unwrap();
        let exact = &x0 * (-R2 * 10.0).exp();
        assert!((traj.final_state() - exact).norm() <= 1e-8);
        assert!(traj.final_state().norm() <= 1e-5);
        assert!(!traj.diverged);
    }

    #[test]
    fn unstable_branch_diverges() {
        let sys = LinearSystem::toy();
        let policy = policy_from(&toy_p(1.0 - R2), &sys).unwrap();
        let traj = simulate(&sys, &policy, &DVector::from_vec(vec![1.0, 1.0]), 1000, 0.01).unwrap();
        assert!(traj.diverged);
        assert!(*traj.times.last().unwrap() < 10.0);
    }

    #[test]
    fn equilibrium_costs_nothing() {
        let sys = LinearSystem::toy();
        let policy = policy_from(&toy_p(1.0 + R2), &sys).unwrap();
        let traj = simulate(&sys, &policy, &DVector::zeros(2), 100, 0.01).unwrap();
        assert!(traj.states.iter().all(|x| x.norm() == 0.0));
        assert_eq!(traj.cumulative_cost, 0.0);
        assert_eq!(exact_cost(&toy_p(1.0 + R2), &DVector::zeros(2)), 0.0);
    }

    #[test]
    fn exact_cost_examples() {
        let p = toy_p(1.0 + R2);
        assert!((exact_cost(&p, &DVector::from_vec(vec![1.0, 0.0])) - 2.414_213_562_373_095).abs() < 1e-12);
        let x0 = DVector::from_vec(vec![1.0, 1.0]);
        let sys = LinearSystem::toy();
        let traj = simulate(&sys, &policy_from(&p, &sys).unwrap(), &x0, 2000, 0.01).unwrap();
        assert!((traj.cumulative_cost - exact_cost(&p, &x0)).abs() < 1e-3);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let sys = LinearSystem::toy();
        let policy = policy_from(&toy_p(1.0 + R2), &sys).unwrap();
        let traj = simulate(&sys, &policy, &DVector::from_vec(vec![1.0, 0.0]), 3, 0.01).unwrap();
        let csv = traj.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x_1,x_2,u_1,u_2,l");
        assert_eq!(lines.len(), 5);
    }
}
