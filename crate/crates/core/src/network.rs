//! Value networks: a plain MLP with biases, and the positive-definite form
//! `V(x) = |h_N|^2 + eps |x - x_eq|^2` with bias-free hidden layers.
//!
//! Batches are stored column-wise (one sample per column). Besides the value
//! and its state gradient, the network provides exact parameter gradients of
//! weighted sums of `V(x_i)` and of directional derivatives `grad V(x_i) . d_i`
//! through a tangent-augmented forward pass followed by a reverse sweep.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Generic,
    PositiveDefinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Elu,
    Relu,
    Tanh,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Elu, Activation::Relu, Activation::Tanh];

    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    pub fn d1(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn d2(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    0.0
                } else {
                    z.exp()
                }
            }
            Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initializer {
    #[default]
    LecunNormal,
    KaimingNormal,
    /// Uniform in `[-0.5, 0.5]`.
    Uniform,
    /// Standard normal.
    Normal,
}

impl Initializer {
    pub const ALL: [Initializer; 4] =
        [Initializer::LecunNormal, Initializer::KaimingNormal, Initializer::Uniform, Initializer::Normal];

    fn sample<R: Rng>(self, fan_in: usize, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        match self {
            Initializer::LecunNormal => z / (fan_in as f64).sqrt(),
            Initializer::KaimingNormal => z * (2.0 / fan_in as f64).sqrt(),
            Initializer::Uniform => rng.random_range(-0.5..=0.5),
            Initializer::Normal => z,
        }
    }
}

/// A scalar function of the state with an exact gradient.
pub trait ValueFunction {
    fn state_dim(&self) -> usize;

    /// Values at the columns of `xs`.
    fn values(&self, xs: &DMatrix<f64>) -> DVector<f64>;

    /// State gradients at the columns of `xs`, one per column.
    fn grads(&self, xs: &DMatrix<f64>) -> DMatrix<f64>;

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.values(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()))[0]
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        self.grads(&DMatrix::from_column_slice(x.len(), 1, x.as_slice())).column(0).into_owned()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    rows: usize,
    cols: usize,
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueNetwork {
    pub kind: NetworkKind,
    /// Hidden layer widths.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub n: usize,
    pub params: DVector<f64>,
    pub x_eq: DVector<f64>,
    pub epsilon: f64,
}

struct Tape {
    /// Layer inputs `h_0 .. h_N` (with `h_0` the shifted state).
    hs: Vec<DMatrix<f64>>,
    /// Pre-activations `z_0 .. z_{N-1}` and the slopes `sigma'(z_k)`.
    zs: Vec<DMatrix<f64>>,
    slopes: Vec<DMatrix<f64>>,
}

/// Values and state gradients of a batch, with the intermediate quantities
/// needed for parameter gradients.
pub struct Evaluation {
    tape: Tape,
    pub values: DVector<f64>,
    pub grads: DMatrix<f64>,
}

impl Evaluation {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `grad V(x_i) . d_i` for each column of `ds`.
    pub fn directional(&self, ds: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| self.grads.column(i).dot(&ds.column(i)))
    }
}

impl ValueNetwork {
    pub fn new(
        kind: NetworkKind,
        n: usize,
        widths: &[usize],
        activation: Activation,
        x_eq: DVector<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        if n == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(AtlasError::InvalidConfig("network widths and state dimension must be positive".into()));
        }
        if x_eq.len() != n {
            return Err(AtlasError::DimensionMismatch(format!("x_eq has length {}, expected {n}", x_eq.len())));
        }
        if kind == NetworkKind::PositiveDefinite {
            if !(epsilon > 0.0) {
                return Err(AtlasError::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
            }
            if activation.eval(0.0) != 0.0 {
                return Err(AtlasError::InvalidConfig("activation must vanish at zero".into()));
            }
        }
        let mut net = Self {
            kind,
            widths: widths.to_vec(),
            activation,
            n,
            params: DVector::zeros(0),
            x_eq,
            epsilon,
        };
        net.params = DVector::zeros(net.param_count());
        Ok(net)
    }

    /// Weights drawn from `init`; biases zero.
    pub fn initialize<R: Rng>(&mut self, init: Initializer, rng: &mut R) {
        self.params.fill(0.0);
        for layer in self.layers() {
            for k in 0..layer.rows * layer.cols {
                self.params[layer.w + k] = init.sample(layer.cols, rng);
            }
        }
    }

    fn layers(&self) -> Vec<Layer> {
        let bias = self.kind == NetworkKind::Generic;
        let mut out = Vec::new();
        let mut off = 0;
        let mut fan_in = self.n;
        let mut dims: Vec<usize> = self.widths.clone();
        if bias {
            dims.push(1);
        }
        for &rows in &dims {
            let w = off;
            off += rows * fan_in;
            let b = bias.then(|| {
                let b = off;
                off += rows;
                b
            });
            out.push(Layer { rows, cols: fan_in, w, b });
            fan_in = rows;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().last().map_or(0, |l| l.b.map_or(l.w + l.rows * l.cols, |b| b + l.rows))
    }

    fn weight(&self, l: &Layer) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.params.as_slice()[l.w..l.w + l.rows * l.cols], l.rows, l.cols)
    }

    fn shifted(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = xs.clone();
        if self.kind == NetworkKind::PositiveDefinite {
            for mut c in h.column_iter_mut() {
                c -= &self.x_eq;
            }
        }
        h
    }

    fn forward(&self, xs: &DMatrix<f64>) -> Tape {
        let layers = self.layers();
        let mut tape = Tape { hs: vec![self.shifted(xs)], zs: Vec::new(), slopes: Vec::new() };
        for l in &layers[..self.widths.len()] {
            let mut z = self.weight(l) * tape.hs.last().unwrap();
            if let Some(b) = l.b {
                let bias = &self.params.as_slice()[b..b + l.rows];
                for mut c in z.column_iter_mut() {
                    for (v, bv) in c.iter_mut().zip(bias) {
                        *v += bv;
                    }
                }
            }
            let mut h = z.clone();
            let mut slope = z.clone();
            let hs = h.as_mut_slice().iter_mut().zip(slope.as_mut_slice().iter_mut());
            match self.activation {
                Activation::Elu => {
                    for (hv, sv) in hs {
                        if *hv > 0.0 {
                            *sv = 1.0;
                        } else {
                            *hv = hv.exp_m1();
                            *sv = *hv + 1.0;
                        }
                    }
                }
                Activation::Relu => {
                    for (hv, sv) in hs {
                        *sv = if *hv > 0.0 { 1.0 } else { 0.0 };
                        *hv = hv.max(0.0);
                    }
                }
                Activation::Tanh => {
                    for (hv, sv) in hs {
                        *hv = hv.tanh();
                        *sv = 1.0 - *hv * *hv;
                    }
                }
            }
            tape.zs.push(z);
            tape.slopes.push(slope);
            tape.hs.push(h);
        }
        tape
    }

    /// `sigma''(z)` from the cached `z`, `sigma(z)` and `sigma'(z)`.
    fn curvature(&self, z: f64, h: f64, slope: f64) -> f64 {
        match self.activation {
            Activation::Elu => {
                if z > 0.0 {
                    0.0
                } else {
                    slope
                }
            }
            Activation::Relu => 0.0,
            Activation::Tanh => -2.0 * h * slope,
        }
    }

    fn output_row(&self) -> (DVector<f64>, f64) {
        let l = self.layers()[self.widths.len()];
        let w = DVector::from_column_slice(&self.params.as_slice()[l.w..l.w + l.cols]);
        (w, self.params[l.b.unwrap()])
    }

    fn values_from(&self, tape: &Tape) -> DVector<f64> {
        let top = tape.hs.last().unwrap();
        match self.kind {
            NetworkKind::Generic => {
                let (w, c) = self.output_row();
                top.tr_mul(&w).add_scalar(c)
            }
            NetworkKind::PositiveDefinite => {
                let x0 = &tape.hs[0];
                DVector::from_fn(top.ncols(), |i, _| {
                    top.column(i).norm_squared() + self.epsilon * x0.column(i).norm_squared()
                })
            }
        }
    }

    /// Values and state gradients of a batch.
    pub fn evaluate(&self, xs: &DMatrix<f64>) -> Evaluation {
        let tape = self.forward(xs);
        let values = self.values_from(&tape);
        let layers = self.layers();
        let hidden = self.widths.len();
        let top = &tape.hs[hidden];
        let mut bar_h = match self.kind {
            NetworkKind::Generic => {
                let (w, _) = self.output_row();
                DMatrix::from_fn(w.len(), top.ncols(), |r, _| w[r])
            }
            NetworkKind::PositiveDefinite => top * 2.0,
        };
        for k in (0..hidden).rev() {
            let bar_z = bar_h.component_mul(&tape.slopes[k]);
            bar_h = self.weight(&layers[k]).transpose() * &bar_z;
        }
        if self.kind == NetworkKind::PositiveDefinite {
            bar_h += &tape.hs[0] * (2.0 * self.epsilon);
        }
        Evaluation { tape, values, grads: bar_h }
    }

    /// Values and directional derivatives `grad V(x_i) . d_i`.
    pub fn values_and_directional(&self, xs: &DMatrix<f64>, ds: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
        let eval = self.evaluate(xs);
        let dv = eval.directional(ds);
        (eval.values, dv)
    }

    /// Gradient with respect to the parameters of
    /// `sum_i a_i V(x_i) + b_i (grad V(x_i) . d_i)`.
    pub fn param_grad(&self, xs: &DMatrix<f64>, ds: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        self.param_grad_at(&self.evaluate(xs), ds, a, b)
    }

    /// As [`Self::param_grad`], reusing a forward pass.
    pub fn param_grad_at(&self, eval: &Evaluation, ds: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let tape = &eval.tape;
        let layers = self.layers();
        let hidden = self.widths.len();

        // tangents along ds
        let mut dhs = Vec::with_capacity(hidden + 1);
        let mut dzs = Vec::with_capacity(hidden);
        dhs.push(ds.clone());
        for k in 0..hidden {
            let dz = self.weight(&layers[k]) * &dhs[k];
            dhs.push(dz.component_mul(&tape.slopes[k]));
            dzs.push(dz);
        }

        let mut grad = DVector::zeros(self.params.len());
        let top = &tape.hs[hidden];
        let dtop = &dhs[hidden];

        // adjoints of h_N and its tangent
        let (mut bar_h, mut bar_dh) = match self.kind {
            NetworkKind::Generic => {
                let (w, _) = self.output_row();
                let l = layers[hidden];
                let gw = top * a + dtop * b;
                grad.as_mut_slice()[l.w..l.w + l.cols].copy_from_slice(gw.as_slice());
                grad[l.b.unwrap()] = a.sum();
                (&w * a.transpose(), &w * b.transpose())
            }
            NetworkKind::PositiveDefinite => {
                let mut bh = top.clone();
                let mut bdh = top.clone();
                for i in 0..top.ncols() {
                    let (ai, bi) = (a[i], b[i]);
                    bh.column_mut(i).zip_apply(&dtop.column(i), |h, t| *h = 2.0 * (ai * *h + bi * t));
                    bdh.column_mut(i).scale_mut(2.0 * bi);
                }
                (bh, bdh)
            }
        };

        for k in (0..hidden).rev() {
            let l = layers[k];
            let (z, h, slope) = (&tape.zs[k], &tape.hs[k + 1], &tape.slopes[k]);
            let dz = &dzs[k];
            let mut bar_z = bar_h.clone();
            for (i, bz) in bar_z.iter_mut().enumerate() {
                *bz = *bz * slope[i] + bar_dh[i] * self.curvature(z[i], h[i], slope[i]) * dz[i];
            }
            let bar_dz = bar_dh.component_mul(slope);
            {
                let mut gw = DMatrixViewMut::from_slice(
                    &mut grad.as_mut_slice()[l.w..l.w + l.rows * l.cols],
                    l.rows,
                    l.cols,
                );
                gw.gemm(1.0, &bar_z, &tape.hs[k].transpose(), 0.0);
                gw.gemm(1.0, &bar_dz, &dhs[k].transpose(), 1.0);
            }
            if let Some(bo) = l.b {
                for r in 0..l.rows {
                    grad[bo + r] = bar_z.row(r).sum();
                }
            }
            if k > 0 {
                let w = self.weight(&l);
                bar_h = w.transpose() * &bar_z;
                bar_dh = w.transpose() * &bar_dz;
            }
        }
        grad
    }
}

impl ValueFunction for ValueNetwork {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn values(&self, xs: &DMatrix<f64>) -> DVector<f64> {
        self.values_from(&self.forward(xs))
    }

    fn grads(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        self.evaluate(xs).grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pd(n: usize) -> ValueNetwork {
        ValueNetwork::new(NetworkKind::PositiveDefinite, n, &[8, 8], Activation::Elu, DVector::zeros(n), 1e-3)
            .unwrap()
    }

    #[test]
    fn parameter_layout() {
        let g = ValueNetwork::new(NetworkKind::Generic, 2, &[3, 4], Activation::Tanh, DVector::zeros(2), 0.0).unwrap();
        assert_eq!(g.param_count(), 2 * 3 + 3 + 3 * 4 + 4 + 4 + 1);
        assert_eq!(pd(2).param_count(), 2 * 8 + 8 * 8);
    }

    #[test]
    fn zero_weights_leave_the_quadratic_term() {
        let net = pd(2);
        let x = DVector::from_vec(vec![1.0, -2.0]);
        assert!((net.value(&x) - 5e-3).abs() < 1e-15);
        assert_eq!(net.grad(&x), DVector::from_vec(vec![2e-3, -4e-3]));
    }

    #[test]
    fn equilibrium_is_a_zero_with_zero_gradient() {
        let mut net = pd(3);
        net.x_eq = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        net.initialize(Initializer::LecunNormal, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(net.value(&net.x_eq), 0.0);
        assert_eq!(net.grad(&net.x_eq), DVector::zeros(3));
    }

    #[test]
    fn directional_derivative_matches_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net =
            ValueNetwork::new(NetworkKind::Generic, 3, &[5, 4], Activation::Elu, DVector::zeros(3), 0.0).unwrap();
        net.initialize(Initializer::Normal, &mut rng);
        let xs = DMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
        let ds = DMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
        let (v, dv) = net.values_and_directional(&xs, &ds);
        let g = net.grads(&xs);
        assert!((v - net.values(&xs)).amax() < 1e-14);
        for i in 0..6 {
            assert!((dv[i] - g.column(i).dot(&ds.column(i))).abs() < 1e-12);
        }
    }

    #[test]
    fn pd_requires_positive_epsilon() {
        let r = ValueNetwork::new(NetworkKind::PositiveDefinite, 2, &[4], Activation::Relu, DVector::zeros(2), 0.0);
        assert!(matches!(r, Err(AtlasError::InvalidConfig(_))));
    }
}
