use atlas_core::network::{Activation, Initializer, NetworkKind, ValueFunction, ValueNetwork};
use atlas_oracle::central_gradient;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [NetworkKind; 2] = [NetworkKind::Generic, NetworkKind::PositiveDefinite];

fn random_net(kind: NetworkKind, act: Activation, n: usize, rng: &mut ChaCha8Rng) -> ValueNetwork {
    let x_eq = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let mut net = ValueNetwork::new(kind, n, &[8, 8], act, x_eq, 1e-3).unwrap();
    net.initialize(Initializer::LecunNormal, rng);
    // nonzero biases so that they are exercised
    if kind == NetworkKind::Generic {
        for v in net.params.iter_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    net
}

fn close(a: f64, b: f64, scale: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(scale)
}

#[test]
fn state_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for kind in KINDS {
        for act in Activation::ALL {
            for _ in 0..10 {
                let n = rng.random_range(1..=4);
                let net = random_net(kind, act, n, &mut rng);
                let x = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
                let g = net.grad(&x);
                let fd = central_gradient(|y| net.value(y), &x, 1e-5);
                let scale = 1e-3 * g.amax();
                for i in 0..n {
                    assert!(close(g[i], fd[i], scale, 1e-4), "{kind:?} {act:?}: {g} vs {fd}");
                }
            }
        }
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for kind in KINDS {
        for act in Activation::ALL {
            let n = 3;
            let net = random_net(kind, act, n, &mut rng);
            let xs = DMatrix::from_fn(n, 16, |_, _| rng.random_range(-2.0..2.0));
            let ds = DMatrix::from_fn(n, 16, |_, _| rng.random_range(-2.0..2.0));
            let a = DVector::from_fn(16, |_, _| rng.random_range(-1.0..1.0));
            let b = DVector::from_fn(16, |_, _| rng.random_range(-1.0..1.0));
            let g = net.param_grad(&xs, &ds, &a, &b);
            let objective = |theta: &DVector<f64>| {
                let mut m = net.clone();
                m.params = theta.clone();
                let (v, dv) = m.values_and_directional(&xs, &ds);
                a.dot(&v) + b.dot(&dv)
            };
            let scale = 1e-3 * g.amax();
            for _ in 0..20 {
                let k = rng.random_range(0..net.params.len());
                let h = 1e-5;
                let mut tp = net.params.clone();
                let mut tm = net.params.clone();
                tp[k] += h;
                tm[k] -= h;
                let fd = (objective(&tp) - objective(&tm)) / (2.0 * h);
                assert!(close(g[k], fd, scale, 1e-3), "{kind:?} {act:?} coord {k}: {} vs {fd}", g[k]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn positive_definite_kind_is_bounded_below(seed in 0u64..1_000_000, act in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=6);
        let init = Initializer::ALL[rng.random_range(0..4)];
        let x_eq = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let mut net = ValueNetwork::new(NetworkKind::PositiveDefinite, n, &[6, 5], Activation::ALL[act], x_eq.clone(), 1e-3).unwrap();
        net.initialize(init, &mut rng);
        prop_assert_eq!(net.value(&x_eq), 0.0);
        let x = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let floor = 1e-3 * (&x - &x_eq).norm_squared();
        prop_assert!(net.value(&x) >= floor);
        prop_assert!(floor > 0.0);
    }
}
