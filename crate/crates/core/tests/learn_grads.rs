use atlas_core::dynamics::{cartpole, from_linear, ControlAffineModel};
use atlas_core::learn::{loss_and_param_grad, optimal_controls, td_stats, LossKind, QuadraticValue};
use atlas_core::network::{Activation, Initializer, NetworkKind, ValueFunction, ValueNetwork};
use atlas_core::LinearSystem;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn net(kind: NetworkKind, act: Activation, model: &ControlAffineModel, rng: &mut ChaCha8Rng) -> ValueNetwork {
    let mut net = ValueNetwork::new(kind, model.n, &[8, 8], act, model.x_eq.clone(), 1e-3).unwrap();
    net.initialize(Initializer::LecunNormal, rng);
    net
}

fn states(model: &ControlAffineModel, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(model.n, 16, |i, _| rng.random_range(-model.init_box[i]..=model.init_box[i]))
}

fn per_sample(loss: LossKind, d: f64, l: f64) -> f64 {
    match loss {
        LossKind::Weighted => (d / l).abs(),
        LossKind::Mse => d * d,
    }
}

/// Loss with the controls recomputed from the perturbed network.
fn loss_full(net: &ValueNetwork, model: &ControlAffineModel, xs: &DMatrix<f64>, tau: Option<f64>, loss: LossKind) -> f64 {
    let g = net.grads(xs);
    let us = optimal_controls(model, xs, &g).0;
    loss_fixed(net, model, xs, &us, tau, loss)
}

/// Loss with the controls held at `us`.
fn loss_fixed(
    net: &ValueNetwork,
    model: &ControlAffineModel,
    xs: &DMatrix<f64>,
    us: &DMatrix<f64>,
    tau: Option<f64>,
    loss: LossKind,
) -> f64 {
    let v = net.values(xs);
    let g = net.grads(xs);
    let mut total = 0.0;
    for i in 0..xs.ncols() {
        let x = xs.column(i).into_owned();
        let u = us.column(i).into_owned();
        let l = model.running_cost(&x, &u);
        let d = l + g.column(i).dot(&model.f(&x, &u)) - tau.map_or(0.0, |t| v[i] / t);
        total += per_sample(loss, d, l);
    }
    total / xs.ncols() as f64
}

fn check(model: &ControlAffineModel, full: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for kind in [NetworkKind::Generic, NetworkKind::PositiveDefinite] {
        for act in Activation::ALL {
            for loss in [LossKind::Weighted, LossKind::Mse] {
                for tau in [None, Some(2.0)] {
                    let net = net(kind, act, model, &mut rng);
                    let xs = states(model, &mut rng);
                    let lg = loss_and_param_grad(&net, model, &xs, tau, loss, full).unwrap();
                    let us = optimal_controls(model, &xs, &net.grads(&xs)).0;
                    let eval = |theta: &DVector<f64>| {
                        let mut m = net.clone();
                        m.params = theta.clone();
                        if full {
                            loss_full(&m, model, &xs, tau, loss)
                        } else {
                            loss_fixed(&m, model, &xs, &us, tau, loss)
                        }
                    };
                    assert!((eval(&net.params) - lg.loss).abs() <= 1e-12 * (1.0 + lg.loss));
                    let scale = 1e-3 * lg.grad.amax();
                    for _ in 0..20 {
                        let k = rng.random_range(0..net.params.len());
                        let h = 1e-6;
                        let mut tp = net.params.clone();
                        let mut tm = net.params.clone();
                        tp[k] += h;
                        tm[k] -= h;
                        let fd = (eval(&tp) - eval(&tm)) / (2.0 * h);
                        let g = lg.grad[k];
                        assert!(
                            (g - fd).abs() <= 1e-3 * g.abs().max(fd.abs()).max(scale),
                            "{kind:?} {act:?} {loss:?} tau {tau:?} full {full}: coord {k} {g} vs {fd}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn held_control_gradient_on_the_toy() {
    check(&from_linear(&LinearSystem::toy()).unwrap(), false, 1);
}

#[test]
fn held_control_gradient_on_cartpole() {
    check(&cartpole(), false, 2);
}

#[test]
fn full_control_gradient_on_the_toy() {
    check(&from_linear(&LinearSystem::toy()).unwrap(), true, 3);
}

#[test]
fn stable_quadratic_has_zero_loss() {
    let model = from_linear(&LinearSystem::toy()).unwrap();
    let v = QuadraticValue::new(DMatrix::identity(2, 2) * (1.0 + 2f64.sqrt()));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs = states(&model, &mut rng);
    let s = td_stats(&v, &model, &xs, None);
    assert!(s.weighted_loss < 1e-8 && s.mse < 1e-16);
}
