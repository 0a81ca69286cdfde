use atlas_core::closed_loop::closed_loop_matrix;
use atlas_core::hamiltonian::{build, spectrum};
use atlas_core::linalg::multiset_distance;
use atlas_core::riccati::{are_residual, enumerate, SolutionSource};
use atlas_core::{LinearSystem, TimeMode};
use atlas_oracle::{dare_fixed_point, kleinman, newton_riccati, random_instance};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_system(rng: &mut ChaCha8Rng, n: usize, mode: TimeMode) -> LinearSystem {
    loop {
        let m = rng.random_range(1..=n);
        let inst = random_instance(n, m, rng);
        let sys = LinearSystem::new(inst.a, inst.b, inst.q, inst.r, mode);
        if sys.check().is_err() {
            continue;
        }
        let d = sys.diagnose();
        if d.controllable && d.observable {
            return sys;
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

#[test]
fn stable_solution_is_unique_and_matches_newton() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..40 {
        let n = 1 + trial % 4;
        let sys = random_system(&mut rng, n, TimeMode::Continuous);
        let h = build(&sys).unwrap();
        let spec = spectrum(&h).unwrap();
        assert_eq!(spec.stable_count(), n);
        let fam = enumerate(&spec, &sys).unwrap();
        assert_eq!(fam.stable_count(), 1, "trial {trial}");
        let p = &fam.isolated[fam.stable_index().unwrap()].p;
        let oracle = kleinman(&sys.a, &sys.b, &sys.q, &sys.r).unwrap();
        assert!((p - &oracle).norm() <= 1e-8 * oracle.norm(), "trial {trial}");
        assert!(atlas_core::linalg::min_symmetric_eigenvalue(p) >= -1e-8);
        assert!(atlas_core::linalg::symmetry_defect(p) <= 1e-8);
    }
}

#[test]
fn discrete_stable_solution_matches_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..40 {
        let n = 1 + trial % 4;
        let sys = random_system(&mut rng, n, TimeMode::Discrete);
        let spec = spectrum(&build(&sys).unwrap()).unwrap();
        assert_eq!(spec.stable_count(), n);
        let fam = enumerate(&spec, &sys).unwrap();
        assert_eq!(fam.stable_count(), 1, "trial {trial}");
        let p = &fam.isolated[fam.stable_index().unwrap()].p;
        let oracle = dare_fixed_point(&sys.a, &sys.b, &sys.q, &sys.r).unwrap();
        assert!((p - &oracle).norm() <= 1e-8 * oracle.norm(), "trial {trial}");
    }
}

#[test]
fn real_distinct_spectra_give_the_full_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut checked = 0;
    while checked < 15 {
        let n = 1 + checked % 3;
        let sys = random_system(&mut rng, n, TimeMode::Continuous);
        let spec = spectrum(&build(&sys).unwrap()).unwrap();
        let real = spec.eigenvalues.iter().all(|l| l.im == 0.0);
        let distinct = spec.eigenspace_groups.iter().all(|g| g.len() == 1);
        if !(real && distinct) {
            continue;
        }
        let fam = enumerate(&spec, &sys).unwrap();
        assert_eq!(fam.count_discrete, binomial(2 * n, n));
        assert!(!fam.has_continuum);
        checked += 1;
    }
}

#[test]
fn closed_loop_spectrum_is_the_selection() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for trial in 0..30 {
        let n = 1 + trial % 4;
        let mode = if trial % 2 == 0 { TimeMode::Continuous } else { TimeMode::Discrete };
        let sys = random_system(&mut rng, n, mode);
        let spec = spectrum(&build(&sys).unwrap()).unwrap();
        let fam = enumerate(&spec, &sys).unwrap();
        for sol in &fam.isolated {
            let SolutionSource::Subspace(sel) = &sol.source else { unreachable!() };
            let d = multiset_distance(&sol.closed_loop_eigs, &sel.lambda1);
            assert!(d <= 1e-6);
            let cl = closed_loop_matrix(&sol.p, &sys).unwrap();
            assert!(multiset_distance(&cl.eigenvalues, &sol.closed_loop_eigs) <= 1e-10 * (1.0 + cl.matrix.norm()));
        }
    }
}

#[test]
fn discounted_solutions_coincide_with_modified_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for trial in 0..20 {
        let n = 1 + trial % 3;
        let tau = rng.random_range(0.2..5.0);
        let sys = random_system(&mut rng, n, TimeMode::Continuous).with_discount(Some(tau));
        let modified = sys.modified_dynamics().unwrap();
        let g = sys.control_gramian();
        let discounted = |p: &DMatrix<f64>| {
            (sys.a.transpose() * p + p * &sys.a - p * &g * p + &sys.q - p / tau).norm()
        };
        let fam = enumerate(&spectrum(&build(&sys).unwrap()).unwrap(), &sys).unwrap();
        assert!(fam.stable_count() <= 1);
        for sol in &fam.isolated {
            let scale = (1.0 + sol.p.norm()).powi(2);
            assert!(discounted(&sol.p) <= 1e-9 * scale);
            assert!(are_residual(&modified, &sol.p) <= 1e-9 * scale);
        }
        // solutions of the discounted identity found by Newton from random
        // symmetric starts are among the enumerated ones
        for _ in 0..4 {
            let s = DMatrix::from_fn(n, n, |_, _| rng.random_range(-3.0..3.0));
            let p0 = (&s + s.transpose()) * 0.5;
            if let Some(p) = newton_riccati(&sys.a, &g, &sys.q, 1.0 / tau, &p0) {
                let scale = (1.0 + p.norm()).powi(2);
                assert!(are_residual(&modified, &p) <= 1e-9 * scale);
                assert!(fam
                    .isolated
                    .iter()
                    .any(|s| (&s.p - &p).norm() <= 1e-6 * (1.0 + p.norm())));
            }
        }
    }
}
