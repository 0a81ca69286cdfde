use atlas_core::dynamics::{cartpole, drone2d, drone2d_with, from_linear, rollout, step, ControlAffineModel, ControlCost, ThrustLimit};
use atlas_core::LinearSystem;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn models() -> Vec<ControlAffineModel> {
    vec![
        cartpole(),
        drone2d(),
        drone2d_with(ThrustLimit::Total, ControlCost::Absolute),
        from_linear(&LinearSystem::toy()).unwrap(),
    ]
}

fn uniform(rng: &mut ChaCha8Rng, half: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(half.len(), |i, _| rng.random_range(-half[i]..=half[i]))
}

#[test]
fn equilibrium_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for m in models() {
        assert!(m.equilibrium_defect() <= 1e-10, "{}", m.name);
        assert_eq!(m.l1(&m.x_eq), 0.0);
        for i in 0..m.m {
            assert!(m.u_min[i] <= m.u_eq[i] && m.u_eq[i] <= m.u_max[i]);
        }
        for _ in 0..100 {
            let x = &m.x_eq + uniform(&mut rng, &m.init_box);
            if x != m.x_eq {
                assert!(m.l1(&x) > 0.0);
            }
        }
    }
}

proptest! {
    #[test]
    fn dynamics_are_affine_in_the_control(
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in models() {
            let x = &m.x_eq + uniform(&mut rng, &m.init_box);
            let ones = DVector::from_element(m.m, 5.0);
            let u = uniform(&mut rng, &ones);
            let w = uniform(&mut rng, &ones);
            let lhs = m.f(&x, &u) - m.f(&x, &w);
            let rhs = m.f2(&x) * (&u - &w);
            prop_assert!((lhs - rhs).amax() <= 1e-12);
        }
    }
}

#[test]
fn constant_push_from_rest() {
    let m = cartpole();
    let u = DVector::from_element(1, 0.1 * 9.81);
    let mut x = m.x_eq.clone();
    for _ in 0..5 {
        x = step(&m, &x, &u, 0.01);
    }
    // reference: many small explicit Euler steps
    let mut y = m.x_eq.clone();
    for _ in 0..50_000 {
        y = &y + m.f(&y, &u) * 1e-6;
    }
    assert!((&x - &y).amax() < 1e-6);
    assert!(x[0] > 0.0);
    assert!(x[1] > 0.0);
}

#[test]
fn rk4_is_fourth_order_on_the_unforced_cartpole() {
    let m = cartpole();
    let u = DVector::zeros(1);
    let x0 = DVector::from_vec(vec![0.0, 1.0, 0.5, -0.5]);
    let integrate = |dt: f64, steps: usize| {
        let mut x = x0.clone();
        for _ in 0..steps {
            x = step(&m, &x, &u, dt);
        }
        x
    };
    let reference = integrate(1e-4, 10_000);
    let e1 = (integrate(0.04, 25) - &reference).norm();
    let e2 = (integrate(0.02, 50) - &reference).norm();
    let ratio = e1 / e2;
    assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn rollouts_stop_at_the_reset_box() {
    let m = drone2d();
    let x0 = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    // no thrust: free fall leaves the box through v_y = -5
    let traj = rollout(&m, |_| DVector::zeros(2), &x0, 200, 0.01).unwrap();
    assert!(traj.diverged);
    let last = traj.final_state();
    assert!(last[4] < -5.0);
    assert!(traj.states[..traj.len() - 1].iter().all(|x| m.in_reset_box(x)));
}
