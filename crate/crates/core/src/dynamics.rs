//! Control-affine benchmark systems `x' = f1(x) + f2(x) u` with separable
//! quadratic running cost and box-constrained controls.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::closed_loop::{trapezoid, Trajectory, DIVERGENCE_BOUND};
use crate::error::{AtlasError, Result};
use crate::linear_system::{LinearSystem, TimeMode};

pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_MAX_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartpoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub length: f64,
    pub gravity: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self { cart_mass: 1.0, pole_mass: 0.1, length: 1.0, gravity: 9.81 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroneParams {
    pub mass: f64,
    pub arm: f64,
    pub inertia: f64,
    pub gravity: f64,
}

impl Default for DroneParams {
    fn default() -> Self {
        Self { mass: 1.0, arm: 0.25, inertia: 0.0625, gravity: 9.81 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThrustLimit {
    /// Each propeller in `[0, m g]`, so the total is capped at `2 m g`.
    #[default]
    Per,
    /// Each propeller in `[0, 2 m g]`.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCost {
    /// `(u - u_eq)^T R (u - u_eq)`, zero at the equilibrium.
    #[default]
    Deviation,
    /// `u^T R u`.
    Absolute,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    Cartpole(CartpoleParams),
    Drone2d(DroneParams),
    Linear { a: DMatrix<f64>, b: DMatrix<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlAffineModel {
    pub name: String,
    pub dynamics: Dynamics,
    pub n: usize,
    pub m: usize,
    /// State cost `l1(x) = (x - x_eq)^T Q (x - x_eq)`.
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub x_eq: DVector<f64>,
    pub u_eq: DVector<f64>,
    /// Center of the control cost: `u_eq` or zero.
    pub u_ref: DVector<f64>,
    pub init_box: DVector<f64>,
    pub reset_box: DVector<f64>,
}

pub fn cartpole() -> ControlAffineModel {
    let p = CartpoleParams::default();
    let u_lim = p.pole_mass * p.gravity;
    ControlAffineModel {
        name: "cartpole".into(),
        dynamics: Dynamics::Cartpole(p),
        n: 4,
        m: 1,
        q: DMatrix::identity(4, 4),
        r: DMatrix::identity(1, 1),
        u_min: DVector::from_element(1, -u_lim),
        u_max: DVector::from_element(1, u_lim),
        x_eq: DVector::zeros(4),
        u_eq: DVector::zeros(1),
        u_ref: DVector::zeros(1),
        init_box: DVector::from_vec(vec![4.0, 0.5, 2.0, 2.0]),
        reset_box: DVector::from_vec(vec![10.0, 10.0, 1000.0, 1000.0]),
    }
}

pub fn drone2d() -> ControlAffineModel {
    drone2d_with(ThrustLimit::default(), ControlCost::default())
}

pub fn drone2d_with(limit: ThrustLimit, cost: ControlCost) -> ControlAffineModel {
    let p = DroneParams::default();
    let weight = p.mass * p.gravity;
    let u_max = match limit {
        ThrustLimit::Per => weight,
        ThrustLimit::Total => 2.0 * weight,
    };
    let u_eq = DVector::from_element(2, weight / 2.0);
    ControlAffineModel {
        name: "drone2d".into(),
        dynamics: Dynamics::Drone2d(p),
        n: 6,
        m: 2,
        q: DMatrix::identity(6, 6),
        r: DMatrix::identity(2, 2),
        u_min: DVector::zeros(2),
        u_max: DVector::from_element(2, u_max),
        x_eq: DVector::zeros(6),
        u_ref: match cost {
            ControlCost::Deviation => u_eq.clone(),
            ControlCost::Absolute => DVector::zeros(2),
        },
        u_eq,
        init_box: DVector::from_element(6, 2.0),
        reset_box: DVector::from_vec(vec![4.0, 4.0, 4.0, 5.0, 5.0, 5.0]),
    }
}

/// `f1(x) = A x`, `f2(x) = B`, `l1(x) = x^T Q x`, unbounded controls.
pub fn from_linear(sys: &LinearSystem) -> Result<ControlAffineModel> {
    if sys.mode != TimeMode::Continuous {
        return Err(AtlasError::WrongMode("control-affine models are continuous-time".into()));
    }
    sys.check()?;
    let (n, m) = (sys.n(), sys.m());
    Ok(ControlAffineModel {
        name: "linear".into(),
        dynamics: Dynamics::Linear { a: sys.a.clone(), b: sys.b.clone() },
        n,
        m,
        q: sys.q.clone(),
        r: sys.r.clone(),
        u_min: DVector::from_element(m, f64::NEG_INFINITY),
        u_max: DVector::from_element(m, f64::INFINITY),
        x_eq: DVector::zeros(n),
        u_eq: DVector::zeros(m),
        u_ref: DVector::zeros(m),
        init_box: DVector::from_element(n, 2.0),
        reset_box: DVector::from_element(n, DIVERGENCE_BOUND),
    })
}

impl ControlAffineModel {
    pub fn f1(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.dynamics {
            Dynamics::Cartpole(p) => {
                let (th, v, w) = (x[1], x[2], x[3]);
                let (s, c) = th.sin_cos();
                let d = p.cart_mass + p.pole_mass * s * s;
                DVector::from_vec(vec![
                    v,
                    w,
                    p.pole_mass * s * (p.length * w * w - p.gravity * c) / d,
                    (p.pole_mass * p.length * w * w * c * s - (p.cart_mass + p.pole_mass) * p.gravity * s)
                        / (p.length * d),
                ])
            }
            Dynamics::Drone2d(p) => {
                DVector::from_vec(vec![x[3], x[4], x[5], 0.0, -p.gravity, 0.0])
            }
            Dynamics::Linear { a, .. } => a * x,
        }
    }

    pub fn f2(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.dynamics {
            Dynamics::Cartpole(p) => {
                let (s, c) = x[1].sin_cos();
                let d = p.cart_mass + p.pole_mass * s * s;
                DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0 / d, c / (p.length * d)])
            }
            Dynamics::Drone2d(p) => {
                let (s, c) = x[2].sin_cos();
                let torque = p.arm / p.inertia;
                DMatrix::from_row_slice(
                    6,
                    2,
                    &[
                        0.0, 0.0, //
                        0.0, 0.0, //
                        0.0, 0.0, //
                        -s / p.mass, -s / p.mass, //
                        c / p.mass, c / p.mass, //
                        torque, -torque,
                    ],
                )
            }
            Dynamics::Linear { b, .. } => b.clone(),
        }
    }

    pub fn f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.f1(x) + self.f2(x) * u
    }

    pub fn l1(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.x_eq;
        d.dot(&(&self.q * &d))
    }

    pub fn control_cost(&self, u: &DVector<f64>) -> f64 {
        let d = u - &self.u_ref;
        d.dot(&(&self.r * &d))
    }

    pub fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.l1(x) + self.control_cost(u)
    }

    pub fn clip(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.m, |i, _| u[i].clamp(self.u_min[i], self.u_max[i]))
    }

    /// Whether `x` lies inside the reset box around the equilibrium.
    pub fn in_reset_box(&self, x: &DVector<f64>) -> bool {
        (0..self.n).all(|i| (x[i] - self.x_eq[i]).abs() <= self.reset_box[i])
    }

    /// `||f1(x_eq) + f2(x_eq) u_eq||_inf`.
    pub fn equilibrium_defect(&self) -> f64 {
        self.f(&self.x_eq, &self.u_eq).amax()
    }

    /// Minimizer of `l(x, u) + grad^T f(x, u)` over unconstrained `u`,
    /// clipped to the box: `clip(u_ref - R^-1 f2^T grad / 2)`.
    pub fn optimal_control(&self, x: &DVector<f64>, grad: &DVector<f64>) -> DVector<f64> {
        self.clip(&self.unclipped_control(x, grad))
    }

    pub fn unclipped_control(&self, x: &DVector<f64>, grad: &DVector<f64>) -> DVector<f64> {
        let r_inv = self.r.clone().try_inverse().expect("R positive definite");
        &self.u_ref - r_inv * self.f2(x).transpose() * grad * 0.5
    }

    /// Linearization `(A, B)` at the equilibrium by central differences.
    pub fn linearize(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let h = 1e-6;
        let mut a = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            let mut xp = self.x_eq.clone();
            let mut xm = self.x_eq.clone();
            xp[j] += h;
            xm[j] -= h;
            let col = (self.f(&xp, &self.u_eq) - self.f(&xm, &self.u_eq)) / (2.0 * h);
            a.set_column(j, &col);
        }
        (a, self.f2(&self.x_eq))
    }
}

/// One RK4 step of `x' = f1(x) + f2(x) u` with `u` held over the step.
pub fn step(model: &ControlAffineModel, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
    let k1 = model.f(x, u);
    let k2 = model.f(&(x + &k1 * (0.5 * dt)), u);
    let k3 = model.f(&(x + &k2 * (0.5 * dt)), u);
    let k4 = model.f(&(x + &k3 * dt), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// RK4 step with the policy re-evaluated at every stage.
pub fn step_closed<P: FnMut(&DVector<f64>) -> DVector<f64>>(
    model: &ControlAffineModel,
    x: &DVector<f64>,
    policy: &mut P,
    dt: f64,
) -> DVector<f64> {
    let mut f = |y: &DVector<f64>| {
        let u = policy(y);
        model.f(y, &u)
    };
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (0.5 * dt)));
    let k3 = f(&(x + &k2 * (0.5 * dt)));
    let k4 = f(&(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Rolls out `policy` from `x0` for at most `max_steps` steps. The rollout
/// stops when the state leaves the reset box (reported as `diverged`).
pub fn rollout<P: FnMut(&DVector<f64>) -> DVector<f64>>(
    model: &ControlAffineModel,
    mut policy: P,
    x0: &DVector<f64>,
    max_steps: usize,
    dt: f64,
) -> Result<Trajectory> {
    let mut out = rollout_batch(
        model,
        |xs: &DMatrix<f64>| {
            let cols: Vec<DVector<f64>> = xs.column_iter().map(|c| policy(&c.into_owned())).collect();
            DMatrix::from_columns(&cols)
        },
        std::slice::from_ref(x0),
        max_steps,
        dt,
    )?;
    Ok(out.remove(0))
}

/// Rolls out several initial states together; `policy` maps a matrix of
/// states (one per column) to a matrix of controls. Controls are held
/// constant over each step.
pub fn rollout_batch<P: FnMut(&DMatrix<f64>) -> DMatrix<f64>>(
    model: &ControlAffineModel,
    mut policy: P,
    x0s: &[DVector<f64>],
    max_steps: usize,
    dt: f64,
) -> Result<Vec<Trajectory>> {
    if !(dt > 0.0) {
        return Err(AtlasError::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    let mut trajs: Vec<Trajectory> = x0s
        .iter()
        .map(|_| Trajectory {
            times: Vec::with_capacity(max_steps + 1),
            states: Vec::with_capacity(max_steps + 1),
            controls: Vec::with_capacity(max_steps + 1),
            running_costs: Vec::with_capacity(max_steps + 1),
            cumulative_cost: 0.0,
            diverged: false,
        })
        .collect();
    let mut xs: Vec<DVector<f64>> = x0s.to_vec();
    let mut active: Vec<usize> = (0..x0s.len()).collect();

    for k in 0..=max_steps {
        for &i in &active {
            if !xs[i].iter().all(|v| v.is_finite()) {
                return Err(AtlasError::NonFiniteState { step: k });
            }
        }
        if active.is_empty() {
            break;
        }
        let batch = DMatrix::from_columns(&active.iter().map(|&i| xs[i].clone()).collect::<Vec<_>>());
        let us = policy(&batch);
        let mut still = Vec::with_capacity(active.len());
        for (c, &i) in active.iter().enumerate() {
            let x = &xs[i];
            let u = us.column(c).into_owned();
            let t = &mut trajs[i];
            t.times.push(k as f64 * dt);
            t.running_costs.push(model.running_cost(x, &u));
            t.states.push(x.clone());
            t.controls.push(u.clone());
            if !model.in_reset_box(x) || x.amax() > DIVERGENCE_BOUND {
                t.diverged = true;
                continue;
            }
            if k < max_steps {
                xs[i] = step(model, x, &u, dt);
                still.push(i);
            }
        }
        active = still;
    }
    for t in &mut trajs {
        t.cumulative_cost = trapezoid(&t.running_costs, dt);
    }
    Ok(trajs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn v(data: &[f64]) -> DVector<f64> {
        DVector::from_vec(data.to_vec())
    }

    #[test]
    fn cartpole_equilibrium_and_drift() {
        let m = cartpole();
        assert_eq!(m.f1(&m.x_eq), DVector::zeros(4));
        assert_eq!(m.equilibrium_defect(), 0.0);
        let f2 = m.f2(&m.x_eq);
        assert_eq!(f2.column(0).into_owned(), v(&[0.0, 0.0, 1.0, 1.0]));
        let f1 = m.f1(&v(&[0.0, FRAC_PI_2, 0.0, 0.0]));
        assert!(f1[2].abs() < 1e-15);
        assert!((f1[3] + 9.81).abs() < 1e-12);
    }

    #[test]
    fn drone_hover_and_torque() {
        let m = drone2d();
        assert!(m.equilibrium_defect() < 1e-12);
        let wdot = m.f(&DVector::zeros(6), &v(&[1.0, 0.0]))[5] - m.f1(&DVector::zeros(6))[5];
        assert!((wdot - 4.0).abs() < 1e-12);
        let mut x = DVector::zeros(6);
        x[2] = FRAC_PI_2;
        assert!((m.f(&x, &v(&[0.5, 0.5]))[3] + 1.0).abs() < 1e-12);
        assert!(m.u_min.iter().zip(m.u_eq.iter()).all(|(a, b)| a <= b));
        assert!(m.u_eq.iter().zip(m.u_max.iter()).all(|(a, b)| a <= b));
    }

    #[test]
    fn drone_rests_at_hover() {
        let m = drone2d_with(ThrustLimit::Per, ControlCost::Absolute);
        let traj = rollout(&m, |_| m.u_eq.clone(), &m.x_eq, 200, 0.01).unwrap();
        assert!(traj.states.iter().all(|x| x.amax() < 1e-12));
        let expected = 200.0 * 0.01 * 2.0 * 4.905f64.powi(2);
        assert!((traj.cumulative_cost - expected).abs() < 1e-9);
    }

    #[test]
    fn linear_wrapper() {
        let m = from_linear(&LinearSystem::toy()).unwrap();
        assert_eq!(m.f1(&v(&[1.0, 0.0])), v(&[1.0, 0.0]));
        assert_eq!(m.l1(&v(&[1.0, 1.0])), 2.0);
        assert_eq!(m.f2(&v(&[3.0, -7.0])), DMatrix::identity(2, 2));
        let discrete = LinearSystem { mode: TimeMode::Discrete, ..LinearSystem::toy() };
        assert!(matches!(from_linear(&discrete), Err(AtlasError::WrongMode(_))));
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let m = cartpole();
        for dt in [0.001, 0.01, 0.1] {
            assert_eq!(step(&m, &m.x_eq, &m.u_eq, dt), m.x_eq);
        }
    }

    #[test]
    fn clipping_saturates() {
        let m = cartpole();
        let u = m.optimal_control(&m.x_eq, &v(&[0.0, 0.0, 100.0, 0.0]));
        assert_eq!(u[0], m.u_min[0]);
    }

    #[test]
    fn leaving_the_reset_box_ends_the_rollout() {
        let m = from_linear(&LinearSystem::toy()).unwrap();
        let traj = rollout(&m, |_| DVector::zeros(2), &v(&[1.0, 1.0]), 100_000, 0.01).unwrap();
        assert!(traj.diverged);
        assert!(traj.len() < 100_000);
    }
}
