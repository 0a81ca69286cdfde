//! HJB residual learning for control-affine systems.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::closed_loop::Trajectory;
use crate::dynamics::{rollout_batch, ControlAffineModel, DEFAULT_DT, DEFAULT_MAX_STEPS};
use crate::error::{AtlasError, Result};
use crate::linear_system::{LinearSystem, TimeMode};
use crate::network::{Activation, Evaluation, Initializer, NetworkKind, ValueFunction, ValueNetwork};
use crate::riccati::{self, stabilizing_solution};

/// Samples with running cost below this are dropped from the weighted loss.
pub const DEGENERATE_COST: f64 = 1e-9;

const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_EVAL: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `mean |delta / l|`.
    #[default]
    Weighted,
    /// `mean delta^2`.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRegime {
    /// States visited by on-policy rollouts, accumulated over epochs.
    #[default]
    Rollouts,
    /// A fixed set of states drawn uniformly from the initialization box.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: NetworkKind,
    pub widths: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub rollouts_per_epoch: usize,
    pub max_traj_len: usize,
    pub dt: f64,
    pub epsilon: f64,
    pub activation: Activation,
    pub initializer: Initializer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub tau: Option<f64>,
    pub loss: LossKind,
    pub regime: DataRegime,
    /// Dataset size in the uniform regime.
    pub samples: usize,
    /// Upper bound on optimizer steps per epoch; `None` sweeps the dataset.
    pub max_batches_per_epoch: Option<usize>,
    /// Differentiate through the unclipped control instead of holding it.
    pub full_control_grad: bool,
    pub eval_rollouts: usize,
    pub eval_every: usize,
    /// Stop once an epoch's mean squared residual falls below this.
    pub target_mse: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: NetworkKind::PositiveDefinite,
            widths: vec![128, 128, 64],
            learning_rate: 1e-3,
            batch_size: 256,
            rollouts_per_epoch: 20,
            max_traj_len: DEFAULT_MAX_STEPS,
            dt: DEFAULT_DT,
            epsilon: 1e-3,
            activation: Activation::Elu,
            initializer: Initializer::LecunNormal,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 200,
            seed: 0,
            tau: None,
            loss: LossKind::Weighted,
            regime: DataRegime::Rollouts,
            samples: 10_000,
            max_batches_per_epoch: Some(64),
            full_control_grad: false,
            eval_rollouts: 20,
            eval_every: 1,
            target_mse: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(AtlasError::InvalidConfig(what.to_string()));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be non-empty and positive");
        }
        if !(self.learning_rate > 0.0) || !(self.dt > 0.0) || !(self.epsilon > 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning_rate, dt, epsilon and adam_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_traj_len == 0 || self.eval_every == 0 {
            return bad("batch_size, epochs, max_traj_len and eval_every must be positive");
        }
        if self.regime == DataRegime::Rollouts && self.rollouts_per_epoch == 0 {
            return bad("rollouts_per_epoch must be positive");
        }
        if self.regime == DataRegime::Uniform && self.samples == 0 {
            return bad("samples must be positive");
        }
        if self.max_batches_per_epoch == Some(0) {
            return bad("max_batches_per_epoch must be positive");
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(AtlasError::InvalidDiscount(format!("tau must be positive, got {tau}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `V(x) = (x - x_eq)^T P (x - x_eq) + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticValue {
    pub p: DMatrix<f64>,
    pub c: f64,
    pub x_eq: DVector<f64>,
}

impl QuadraticValue {
    pub fn new(p: DMatrix<f64>) -> Self {
        let n = p.nrows();
        Self { p, c: 0.0, x_eq: DVector::zeros(n) }
    }
}

impl ValueFunction for QuadraticValue {
    fn state_dim(&self) -> usize {
        self.x_eq.len()
    }

    fn values(&self, xs: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(xs.ncols(), |i, _| {
            let d = xs.column(i) - &self.x_eq;
            d.dot(&(&self.p * &d)) + self.c
        })
    }

    fn grads(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let sym = &self.p + self.p.transpose();
        let mut d = xs.clone();
        for mut c in d.column_iter_mut() {
            c -= &self.x_eq;
        }
        sym * d
    }
}

/// Clipped minimizers of the Hamiltonian for each column, and whether each
/// component lies strictly inside the box.
pub fn optimal_controls(model: &ControlAffineModel, xs: &DMatrix<f64>, grads: &DMatrix<f64>) -> (DMatrix<f64>, Vec<Vec<bool>>) {
    let r_inv = model.r.clone().try_inverse().expect("R positive definite");
    let mut us = DMatrix::zeros(model.m, xs.ncols());
    let mut inside = Vec::with_capacity(xs.ncols());
    for i in 0..xs.ncols() {
        let x = xs.column(i).into_owned();
        let raw = &model.u_ref - &r_inv * model.f2(&x).transpose() * grads.column(i) * 0.5;
        let mut mask = Vec::with_capacity(model.m);
        for j in 0..model.m {
            let v = raw[j].clamp(model.u_min[j], model.u_max[j]);
            mask.push(v == raw[j]);
            us[(j, i)] = v;
        }
        inside.push(mask);
    }
    (us, inside)
}

pub fn optimal_control<V: ValueFunction>(v: &V, model: &ControlAffineModel, x: &DVector<f64>) -> DVector<f64> {
    model.optimal_control(x, &v.grad(x))
}

/// `l(x, u) + grad V(x) . f(x, u) - V(x) / tau`.
pub fn residual<V: ValueFunction>(v: &V, model: &ControlAffineModel, x: &DVector<f64>, u: &DVector<f64>, tau: Option<f64>) -> f64 {
    let mut d = model.running_cost(x, u) + v.grad(x).dot(&model.f(x, u));
    if let Some(tau) = tau {
        d -= v.value(x) / tau;
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TdStats {
    pub weighted_loss: f64,
    pub mean_abs_delta: f64,
    pub mse: f64,
    pub dropped: usize,
    pub count: usize,
}

/// Per-sample residual data for a batch under the clipped optimal control.
pub struct ResidualBatch {
    pub states: DMatrix<f64>,
    pub controls: DMatrix<f64>,
    pub inside: Vec<Vec<bool>>,
    pub drift: DMatrix<f64>,
    pub costs: DVector<f64>,
    pub residuals: DVector<f64>,
    pub stats: TdStats,
}

fn residual_batch(
    values: &DVector<f64>,
    grads: &DMatrix<f64>,
    model: &ControlAffineModel,
    xs: &DMatrix<f64>,
    tau: Option<f64>,
) -> ResidualBatch {
    let (us, inside) = optimal_controls(model, xs, grads);
    let b = xs.ncols();
    let mut drift = DMatrix::zeros(model.n, b);
    let mut costs = DVector::zeros(b);
    let mut residuals = DVector::zeros(b);
    let mut stats = TdStats::default();
    for i in 0..b {
        let x = xs.column(i).into_owned();
        let u = us.column(i).into_owned();
        let f = model.f(&x, &u);
        let l = model.running_cost(&x, &u);
        let mut d = l + grads.column(i).dot(&f);
        if let Some(tau) = tau {
            d -= values[i] / tau;
        }
        drift.set_column(i, &f);
        costs[i] = l;
        residuals[i] = d;
        stats.mean_abs_delta += d.abs();
        stats.mse += d * d;
        if l.abs() < DEGENERATE_COST {
            stats.dropped += 1;
        } else {
            stats.weighted_loss += (d / l).abs();
        }
    }
    stats.count = b;
    if b > 0 {
        stats.mean_abs_delta /= b as f64;
        stats.mse /= b as f64;
    }
    if b > stats.dropped {
        stats.weighted_loss /= (b - stats.dropped) as f64;
    }
    ResidualBatch { states: xs.clone(), controls: us, inside, drift, costs, residuals, stats }
}

/// Residual statistics of any value function over a set of states.
pub fn td_stats<V: ValueFunction>(v: &V, model: &ControlAffineModel, xs: &DMatrix<f64>, tau: Option<f64>) -> TdStats {
    residual_batch(&v.values(xs), &v.grads(xs), model, xs, tau).stats
}

pub fn residuals<V: ValueFunction>(v: &V, model: &ControlAffineModel, xs: &DMatrix<f64>, tau: Option<f64>) -> ResidualBatch {
    residual_batch(&v.values(xs), &v.grads(xs), model, xs, tau)
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: DVector<f64>,
    pub stats: TdStats,
}

/// Loss over a batch and its exact parameter gradient. The clipped control
/// is held fixed unless `full_control_grad`, in which case the unclipped
/// components are differentiated through.
pub fn loss_and_param_grad(
    net: &ValueNetwork,
    model: &ControlAffineModel,
    xs: &DMatrix<f64>,
    tau: Option<f64>,
    loss: LossKind,
    full_control_grad: bool,
) -> Result<LossGrad> {
    let eval = net.evaluate(xs);
    loss_and_param_grad_at(net, &eval, model, xs, tau, loss, full_control_grad)
}

fn loss_and_param_grad_at(
    net: &ValueNetwork,
    eval: &Evaluation,
    model: &ControlAffineModel,
    xs: &DMatrix<f64>,
    tau: Option<f64>,
    loss: LossKind,
    full_control_grad: bool,
) -> Result<LossGrad> {
    let batch = residual_batch(&eval.values, &eval.grads, model, xs, tau);
    let b = xs.ncols();
    let kept = match loss {
        LossKind::Weighted => b - batch.stats.dropped,
        LossKind::Mse => b,
    };
    if kept == 0 {
        return Err(AtlasError::DegenerateCost { dropped: batch.stats.dropped, total: b, threshold: DEGENERATE_COST });
    }
    let scale = 1.0 / kept as f64;
    let r_inv = model.r.clone().try_inverse().expect("R positive definite");
    let inv_tau = tau.map_or(0.0, |t| 1.0 / t);

    let mut ds = DMatrix::zeros(model.n, b);
    let mut a = DVector::zeros(b);
    let ones = DVector::from_element(b, 1.0);
    let mut value = 0.0;
    for i in 0..b {
        let (d, l) = (batch.residuals[i], batch.costs[i]);
        // partial derivatives of the per-sample loss in delta and l
        let (phi, phi_d, phi_l) = match loss {
            LossKind::Weighted if l.abs() < DEGENERATE_COST => continue,
            LossKind::Weighted => {
                let s = (d / l).signum();
                ((d / l).abs(), s / l, -s * d / (l * l))
            }
            LossKind::Mse => (d * d, 2.0 * d, 0.0),
        };
        value += phi;
        let mut t = batch.drift.column(i) * (phi_d * scale);
        if full_control_grad {
            let x = xs.column(i).into_owned();
            let f2 = model.f2(&x);
            let du = (batch.controls.column(i) - &model.u_ref) * 2.0;
            let dl_du = &model.r * &du;
            let dd_du = &dl_du + f2.transpose() * eval.grads.column(i);
            let mut c = dd_du * phi_d + dl_du * phi_l;
            for j in 0..model.m {
                if !batch.inside[i][j] {
                    c[j] = 0.0;
                }
            }
            t += &f2 * (&r_inv * c) * (-0.5 * scale);
        }
        ds.set_column(i, &t);
        a[i] = -phi_d * inv_tau * scale;
    }
    let grad = net.param_grad_at(eval, &ds, &a, &ones);
    Ok(LossGrad { loss: value * scale, grad, stats: batch.stats })
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, m: DVector::zeros(len), v: DVector::zeros(len), t: 0 }
    }

    pub fn step(&mut self, params: &mut DVector<f64>, grad: &DVector<f64>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            params[k] -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
        }
    }
}

pub fn sample_box<R: Rng>(rng: &mut R, center: &DVector<f64>, half: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(center.len(), |i, _| center[i] + rng.random_range(-half[i]..=half[i]))
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Evaluation start states, a function of the model and seed only.
pub fn eval_initial_states(model: &ControlAffineModel, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = stream(seed, STREAM_EVAL);
    (0..count).map(|_| sample_box(&mut rng, &model.x_eq, &model.init_box)).collect()
}

/// Batched state feedback from the clipped optimal control of `v`.
pub fn policy<'a, V: ValueFunction>(v: &'a V, model: &'a ControlAffineModel) -> impl FnMut(&DMatrix<f64>) -> DMatrix<f64> + 'a {
    move |xs: &DMatrix<f64>| optimal_controls(model, xs, &v.grads(xs)).0
}

#[derive(Debug, Clone)]
pub struct PolicyEval {
    pub costs: Vec<f64>,
    pub diverged: Vec<bool>,
    pub mean_cost: f64,
    pub divergence_fraction: f64,
    pub trajectories: Vec<Trajectory>,
}

pub fn evaluate_policy<V: ValueFunction>(
    v: &V,
    model: &ControlAffineModel,
    x0s: &[DVector<f64>],
    steps: usize,
    dt: f64,
) -> Result<PolicyEval> {
    let trajectories = rollout_batch(model, policy(v, model), x0s, steps, dt)?;
    let costs: Vec<f64> = trajectories.iter().map(|t| t.cumulative_cost).collect();
    let diverged: Vec<bool> = trajectories.iter().map(|t| t.diverged).collect();
    let count = x0s.len().max(1) as f64;
    Ok(PolicyEval {
        mean_cost: costs.iter().sum::<f64>() / count,
        divergence_fraction: diverged.iter().filter(|&&d| d).count() as f64 / count,
        costs,
        diverged,
        trajectories,
    })
}

/// Quadratic value of the LQR problem at the model's linearization.
pub fn lqr_value(model: &ControlAffineModel) -> Result<QuadraticValue> {
    let (a, b) = model.linearize();
    let sys = LinearSystem::new(a, b, model.q.clone(), model.r.clone(), TimeMode::Continuous);
    let sol = stabilizing_solution(&sys)?;
    Ok(QuadraticValue { p: sol.p, c: 0.0, x_eq: model.x_eq.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub weighted_loss: f64,
    pub mean_abs_delta: f64,
    pub mse: f64,
    pub eval_cost: f64,
    pub divergence_fraction: f64,
    pub dataset_size: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,weighted_loss,mean_abs_delta,eval_cost,divergence_fraction,mse,dataset_size,dropped\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{},{:e},{},{}\n",
                r.epoch, r.weighted_loss, r.mean_abs_delta, r.eval_cost, r.divergence_fraction, r.mse, r.dataset_size, r.dropped
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ValueNetwork,
    pub history: History,
    /// Training states (one per column).
    pub dataset: DMatrix<f64>,
}

pub fn new_network(model: &ControlAffineModel, config: &TrainConfig) -> Result<ValueNetwork> {
    let mut net = ValueNetwork::new(config.kind, model.n, &config.widths, config.activation, model.x_eq.clone(), config.epsilon)?;
    net.initialize(config.initializer, &mut stream(config.seed, STREAM_INIT));
    Ok(net)
}

/// Trains a value network on `model`.
pub fn train(model: &ControlAffineModel, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut net = new_network(model, config)?;
    let mut adam = Adam::new(net.params.len(), config.learning_rate, config.beta1, config.beta2, config.adam_eps);
    let mut rng = stream(config.seed, STREAM_DATA);
    let eval_states = eval_initial_states(model, config.eval_rollouts, config.seed);
    let n = model.n;
    let mut data: Vec<f64> = Vec::new();
    if config.regime == DataRegime::Uniform {
        for _ in 0..config.samples {
            data.extend(sample_box(&mut rng, &model.x_eq, &model.init_box).iter());
        }
    }
    let mut history = History::default();
    let diverged = |epoch: usize, reason: String| AtlasError::TrainingDiverged { epoch, reason };

    for epoch in 0..config.epochs {
        if config.regime == DataRegime::Rollouts {
            let starts: Vec<DVector<f64>> = (0..config.rollouts_per_epoch)
                .map(|_| sample_box(&mut rng, &model.x_eq, &model.init_box))
                .collect();
            let trajs = rollout_batch(model, policy(&net, model), &starts, config.max_traj_len, config.dt)
                .map_err(|e| diverged(epoch, e.to_string()))?;
            for t in &trajs {
                for x in t.states.iter().filter(|x| model.in_reset_box(x)) {
                    data.extend(x.iter());
                }
            }
        }
        let size = data.len() / n;
        let mut order: Vec<usize> = (0..size).collect();
        order.shuffle(&mut rng);
        let cap = config.max_batches_per_epoch.unwrap_or(usize::MAX);

        let mut sums = TdStats::default();
        let mut kept = 0usize;
        for chunk in order.chunks(config.batch_size).take(cap) {
            let xs = DMatrix::from_fn(n, chunk.len(), |r, c| data[chunk[c] * n + r]);
            let lg = match loss_and_param_grad(&net, model, &xs, config.tau, config.loss, config.full_control_grad) {
                Ok(lg) => lg,
                Err(AtlasError::DegenerateCost { dropped, .. }) => {
                    sums.dropped += dropped;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !lg.loss.is_finite() || !lg.grad.iter().all(|g| g.is_finite()) {
                return Err(diverged(epoch, "non-finite loss or gradient".into()));
            }
            let s = lg.stats;
            let w = (s.count - s.dropped) as f64;
            sums.weighted_loss += s.weighted_loss * w;
            sums.mean_abs_delta += s.mean_abs_delta * s.count as f64;
            sums.mse += s.mse * s.count as f64;
            sums.dropped += s.dropped;
            sums.count += s.count;
            kept += s.count - s.dropped;
            adam.step(&mut net.params, &lg.grad);
        }
        let count = sums.count.max(1) as f64;
        let mut record = EpochRecord {
            epoch,
            weighted_loss: sums.weighted_loss / kept.max(1) as f64,
            mean_abs_delta: sums.mean_abs_delta / count,
            mse: sums.mse / count,
            eval_cost: f64::NAN,
            divergence_fraction: f64::NAN,
            dataset_size: size,
            dropped: sums.dropped,
        };
        let stop = config.target_mse.is_some_and(|t| sums.count > 0 && record.mse < t);
        let last = epoch + 1 == config.epochs || stop;
        if !eval_states.is_empty() && (epoch % config.eval_every == 0 || last) {
            let ev = evaluate_policy(&net, model, &eval_states, config.max_traj_len, config.dt)
                .map_err(|e| diverged(epoch, e.to_string()))?;
            record.eval_cost = ev.mean_cost;
            record.divergence_fraction = ev.divergence_fraction;
        }
        log::debug!(
            "epoch {epoch}: weighted {:.3e} |delta| {:.3e} mse {:.3e} eval {:.3} div {}",
            record.weighted_loss,
            record.mean_abs_delta,
            record.mse,
            record.eval_cost,
            record.divergence_fraction
        );
        history.epochs.push(record);
        if stop {
            break;
        }
    }
    let size = data.len() / n;
    Ok(TrainOutcome { net, history, dataset: DMatrix::from_column_slice(n, size, &data) })
}

#[derive(Debug, Clone, Serialize)]
pub struct Classification {
    #[serde(serialize_with = "crate::linalg::ser_matrix")]
    pub p_hat: DMatrix<f64>,
    pub offset: f64,
    /// `|V - fit| / |V - mean V|` over the sample states.
    pub fit_residual: f64,
    pub quadratic: bool,
    /// Whether the policy of the fitted quadratic stabilizes the system.
    pub fitted_stable: bool,
    #[serde(serialize_with = "crate::linalg::ser_matrix")]
    pub nearest: DMatrix<f64>,
    pub nearest_stable: bool,
    pub nearest_isolated: bool,
    pub distance: f64,
    pub distance_to_stable: f64,
}

pub const QUADRATIC_FIT_TOL: f64 = 0.1;

/// Least-squares fit `V(x) ~ x^T P x + c` on a grid over `[-half, half]^n`,
/// and the closest Riccati solution (isolated or sampled family member).
pub fn classify_learned_solution<V: ValueFunction>(v: &V, sys: &LinearSystem, half: f64) -> Result<Classification> {
    let n = sys.n();
    let xs = if n <= 2 {
        let k = 41usize;
        let pts = k.pow(n as u32);
        DMatrix::from_fn(n, pts, |r, c| {
            let idx = (c / k.pow(r as u32)) % k;
            -half + 2.0 * half * idx as f64 / (k - 1) as f64
        })
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        DMatrix::from_fn(n, 4000, |_, _| rng.random_range(-half..=half))
    };
    let values = v.values(&xs);
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let design = DMatrix::from_fn(xs.ncols(), pairs.len() + 1, |s, f| {
        if f == pairs.len() {
            1.0
        } else {
            let (i, j) = pairs[f];
            let m = if i == j { 1.0 } else { 2.0 };
            m * xs[(i, s)] * xs[(j, s)]
        }
    });
    let coef = design
        .clone()
        .svd(true, true)
        .solve(&values, 1e-12)
        .map_err(|e| AtlasError::InvalidConfig(e.to_string()))?;
    let mut p_hat = DMatrix::zeros(n, n);
    for (f, &(i, j)) in pairs.iter().enumerate() {
        p_hat[(i, j)] = coef[f];
        p_hat[(j, i)] = coef[f];
    }
    let offset = coef[pairs.len()];
    let fit = &design * &coef;
    let mean = values.mean();
    let spread = values.map(|v| v - mean).norm();
    let fit_residual = if spread > 0.0 { (&values - fit).norm() / spread } else { f64::INFINITY };

    let h = crate::hamiltonian::build(sys)?;
    let family = riccati::enumerate(&crate::hamiltonian::spectrum(&h)?, sys)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let members = family.members(512, &mut rng);
    let (best, distance) = members
        .iter()
        .map(|s| (s, (&s.p - &p_hat).norm()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(AtlasError::NoStabilizingSolution)?;
    let distance_to_stable = family
        .stable_index()
        .map_or(f64::INFINITY, |i| (&family.isolated[i].p - &p_hat).norm());
    let fitted_stable = crate::closed_loop::closed_loop_matrix(&p_hat, sys).is_ok_and(|cl| cl.stable);
    Ok(Classification {
        nearest: best.p.clone(),
        nearest_stable: best.stable,
        nearest_isolated: matches!(best.source, riccati::SolutionSource::Subspace(_)),
        distance,
        distance_to_stable,
        quadratic: fit_residual <= QUADRATIC_FIT_TOL,
        fitted_stable,
        p_hat,
        offset,
        fit_residual,
    })
}

pub const CHECKPOINT_FORMAT: &str = "atlas-value-network/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub kind: NetworkKind,
    pub n: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub epsilon: f64,
    pub x_eq: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub param_count: usize,
    pub params_sha256: String,
    /// Parameters as little-endian `f64`, base64.
    pub params: String,
}

impl Checkpoint {
    pub fn from_network(net: &ValueNetwork, seed: u64, config_hash: &str) -> Self {
        let bytes: Vec<u8> = net.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            kind: net.kind,
            n: net.n,
            widths: net.widths.clone(),
            activation: net.activation,
            epsilon: net.epsilon,
            x_eq: net.x_eq.iter().copied().collect(),
            seed,
            config_hash: config_hash.into(),
            param_count: net.params.len(),
            params_sha256: hex(&Sha256::digest(&bytes)),
            params: BASE64.encode(&bytes),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AtlasError::Checkpoint(e.to_string()))
    }

    /// Rebuilds the network, checking the format, parameter digest and,
    /// when given, the expected config hash.
    pub fn network(&self, expected_hash: Option<&str>) -> Result<ValueNetwork> {
        let fail = |m: String| Err(AtlasError::Checkpoint(m));
        if self.format != CHECKPOINT_FORMAT {
            return fail(format!("unknown format {:?}", self.format));
        }
        if let Some(h) = expected_hash {
            if h != self.config_hash {
                return fail(format!("config hash mismatch: checkpoint {}, expected {h}", self.config_hash));
            }
        }
        let bytes = BASE64.decode(&self.params).map_err(|e| AtlasError::Checkpoint(e.to_string()))?;
        if hex(&Sha256::digest(&bytes)) != self.params_sha256 {
            return fail("parameter digest mismatch".into());
        }
        if bytes.len() != 8 * self.param_count {
            return fail(format!("expected {} parameters, found {} bytes", self.param_count, bytes.len()));
        }
        let mut net = ValueNetwork::new(
            self.kind,
            self.n,
            &self.widths,
            self.activation,
            DVector::from_vec(self.x_eq.clone()),
            self.epsilon,
        )
        .map_err(|e| AtlasError::Checkpoint(e.to_string()))?;
        if net.params.len() != self.param_count {
            return fail("parameter count does not match the architecture".into());
        }
        for (k, chunk) in bytes.chunks_exact(8).enumerate() {
            net.params[k] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{cartpole, drone2d, from_linear};

    #[test]
    fn zero_weight_pd_residual_on_the_toy() {
        let model = from_linear(&LinearSystem::toy()).unwrap();
        let eps = 1e-3;
        let net = ValueNetwork::new(NetworkKind::PositiveDefinite, 2, &[4, 4], Activation::Elu, DVector::zeros(2), eps)
            .unwrap();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let u = optimal_control(&net, &model, &x);
        assert!((&u + &x * eps).amax() < 1e-15);
        let d = residual(&net, &model, &x, &u, None);
        assert!((d - (1.0 + 2.0 * eps - eps * eps)).abs() < 1e-14);
    }

    #[test]
    fn both_toy_branches_have_zero_residual() {
        let model = from_linear(&LinearSystem::toy()).unwrap();
        let s = 2f64.sqrt();
        for p in [1.0 + s, 1.0 - s] {
            let v = QuadraticValue::new(DMatrix::identity(2, 2) * p);
            for x in [[1.0, 0.0], [-0.3, 1.7], [2.0, -2.0]] {
                let x = DVector::from_row_slice(&x);
                let u = optimal_control(&v, &model, &x);
                assert!(residual(&v, &model, &x, &u, None).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pd_equilibrium_control() {
        let model = drone2d();
        let mut net = new_network(&model, &TrainConfig::default()).unwrap();
        net.initialize(Initializer::LecunNormal, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(optimal_control(&net, &model, &model.x_eq), model.u_eq);
        let cp = cartpole();
        let net = new_network(&cp, &TrainConfig::default()).unwrap();
        assert_eq!(optimal_control(&net, &cp, &cp.x_eq), DVector::zeros(1));
    }

    #[test]
    fn adam_first_step_moves_by_the_learning_rate() {
        let mut adam = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        let mut p = DVector::from_vec(vec![1.0, -1.0]);
        adam.step(&mut p, &DVector::from_vec(vec![3.0, -0.5]));
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn config_hash_tracks_fields() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = cartpole();
        let cfg = TrainConfig { widths: vec![5, 3], ..Default::default() };
        let net = new_network(&model, &cfg).unwrap();
        let ck = Checkpoint::from_network(&net, 7, &cfg.hash());
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back.network(Some(&cfg.hash())).unwrap(), net);
        assert!(matches!(back.network(Some("other")), Err(AtlasError::Checkpoint(_))));
        let mut tampered = back.clone();
        tampered.params_sha256 = "0".repeat(64);
        assert!(tampered.network(None).is_err());
    }

    #[test]
    fn quadratic_recovery() {
        let s = 2f64.sqrt();
        let v = QuadraticValue { p: DMatrix::identity(2, 2) * (1.0 - s), c: 2.0 * s, x_eq: DVector::zeros(2) };
        let c = classify_learned_solution(&v, &LinearSystem::toy(), 2.0).unwrap();
        assert!((&c.p_hat - &v.p).amax() < 1e-6);
        assert!((c.offset - 2.0 * s).abs() < 1e-6);
        assert!(c.quadratic && !c.nearest_stable && !c.fitted_stable);
        assert!(c.distance < 1e-6);
    }
}
