use atlas_core::tabular::{bellman_backup, value_iteration, TabularMdp};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn sweeps_contract_and_fixed_points_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let s = rng.random_range(1..=64);
        let a = rng.random_range(1..=8);
        let gamma = rng.random_range(0.5..0.95);
        let mdp = TabularMdp::random(s, a, gamma, &mut rng).unwrap();
        let mut values = Vec::new();
        for _ in 0..20 {
            let w0 = DVector::from_fn(s, |_, _| rng.random_range(-50.0..50.0));
            let vi = value_iteration(&mdp, &w0, 1e-10).unwrap();
            assert!(vi.ratios.iter().all(|&r| r <= gamma + 1e-12));
            values.push(vi.value);
        }
        for v in &values[1..] {
            assert!((v - &values[0]).amax() <= 1e-8);
        }
    }
}

#[test]
fn two_starts_agree_within_the_stopping_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mdp = TabularMdp::random(30, 4, 0.9, &mut rng).unwrap();
    let tol = 1e-6;
    let a = value_iteration(&mdp, &DVector::zeros(30), tol).unwrap();
    let b = value_iteration(&mdp, &DVector::from_element(30, 100.0), tol).unwrap();
    assert!((a.value - b.value).amax() <= 2.0 * tol / (1.0 - 0.9));
}

proptest! {
    #[test]
    fn backup_is_monotone(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rng.random_range(1..=16);
        let mdp = TabularMdp::random(s, rng.random_range(1..=4), 0.9, &mut rng).unwrap();
        let w = DVector::from_fn(s, |_, _| rng.random_range(-5.0..5.0));
        let bump = DVector::from_fn(s, |_, _| rng.random_range(0.0..2.0));
        let lo = bellman_backup(&mdp, &w);
        let hi = bellman_backup(&mdp, &(&w + bump));
        prop_assert!(lo.iter().zip(hi.iter()).all(|(a, b)| a <= b));
    }
}
