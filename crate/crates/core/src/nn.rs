//! Dense networks with hand-written backpropagation, Adam, and the
//! squashed-Gaussian policy head.

use std::f64::consts::{LN_2, PI};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("checkpoint version {0} is not supported")]
    Version(u32),
    #[error("checkpoint shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint contains non-finite parameters")]
    NonFinite,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Fully connected network, `tanh` on hidden layers and a linear output.
///
/// Weights are stored `(in, out)` so a batch `X` of shape `(B, in)` maps to
/// `X W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    widths: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Layer inputs saved by [`DenseNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input of layer `l`; hidden entries are post-activation.
    inputs: Vec<Array2<f64>>,
}

/// Parameter-shaped gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

impl DenseNet {
    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "a network needs input and output widths");
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..=bound)));
            biases.push(Array1::from_shape_fn(w[1], |_| rng.random_range(-bound..=bound)));
        }
        Self {
            widths: widths.to_vec(),
            weights,
            biases,
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    /// Flat parameter view, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut it = flat.iter();
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            w.iter_mut().chain(b.iter_mut()).for_each(|x| *x = *it.next().unwrap());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|x| x.is_finite())
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(w) + b;
            if l < last {
                h.mapv_inplace(f64::tanh);
            }
        }
        h
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, ForwardCache) {
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut h = x.to_owned();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.dot(w) + b;
            if l < last {
                z.mapv_inplace(f64::tanh);
            }
            inputs.push(h);
            h = z;
        }
        (h, ForwardCache { inputs })
    }

    /// Backpropagates `d loss / d output`, returning parameter gradients and
    /// `d loss / d input`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> (Gradients, Array2<f64>) {
        let layers = self.weights.len();
        let mut gw = Vec::with_capacity(layers);
        let mut gb = Vec::with_capacity(layers);
        let mut delta = grad_out.to_owned();
        for l in (0..layers).rev() {
            let input = &cache.inputs[l];
            gw.push(input.t().dot(&delta));
            gb.push(delta.sum_axis(Axis(0)));
            let mut back = delta.dot(&self.weights[l].t());
            if l > 0 {
                // input is tanh(z), so dtanh = 1 - input^2.
                Zip::from(&mut back).and(input).for_each(|d, &a| *d *= 1.0 - a * a);
            }
            delta = back;
        }
        gw.reverse();
        gb.reverse();
        (
            Gradients {
                weights: gw,
                biases: gb,
            },
            delta,
        )
    }

    /// `self <- (1 - rho) self + rho other`.
    pub fn soft_update(&mut self, other: &DenseNet, rho: f64) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            Zip::from(w).and(o).for_each(|a, &b| *a = (1.0 - rho) * *a + rho * b);
        }
        for (w, o) in self.biases.iter_mut().zip(&other.biases) {
            Zip::from(w).and(o).for_each(|a, &b| *a = (1.0 - rho) * *a + rho * b);
        }
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            version: CHECKPOINT_VERSION,
            widths: self.widths.clone(),
            params: self.params(),
        }
    }

    pub fn from_checkpoint(ck: &NetCheckpoint) -> Result<Self, NnError> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(NnError::Version(ck.version));
        }
        if ck.widths.len() < 2 || ck.widths.contains(&0) {
            return Err(NnError::Shape(format!("widths {:?}", ck.widths)));
        }
        let mut net = Self {
            widths: ck.widths.clone(),
            weights: ck.widths.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect(),
            biases: ck.widths.windows(2).map(|w| Array1::zeros(w[1])).collect(),
        };
        if ck.params.len() != net.num_params() {
            return Err(NnError::Shape(format!(
                "{} params for widths {:?}, expected {}",
                ck.params.len(),
                ck.widths,
                net.num_params()
            )));
        }
        if !ck.params.iter().all(|x| x.is_finite()) {
            return Err(NnError::NonFinite);
        }
        net.set_params(&ck.params);
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub version: u32,
    pub widths: Vec<usize>,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        Self {
            config,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let upd = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for l in 0..net.weights.len() {
            Zip::from(&mut net.weights[l])
                .and(&grads.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .for_each(|p, &g, m, v| upd(p, g, m, v));
            Zip::from(&mut net.biases[l])
                .and(&grads.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .for_each(|p, &g, m, v| upd(p, g, m, v));
        }
    }
}

/// Scalar Adam for the temperature parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarAdam {
    pub config: AdamConfig,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, param: &mut f64, grad: f64) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.m = beta1 * self.m + (1.0 - beta1) * grad;
        self.v = beta2 * self.v + (1.0 - beta2) * grad * grad;
        let mh = self.m / (1.0 - beta1.powi(self.t));
        let vh = self.v / (1.0 - beta2.powi(self.t));
        *param -= lr * mh / (vh.sqrt() + eps);
    }
}

/// `ln(1 - tanh(u)^2)` without cancellation for large `|u|`.
pub fn log1m_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Tanh-squashed diagonal Gaussian over a network output laid out as
/// `[mean (A), log-std pre-activation (A)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquashedGaussian {
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for SquashedGaussian {
    fn default() -> Self {
        Self {
            log_std_min: -20.0,
            log_std_max: 2.0,
        }
    }
}

/// Everything the backward pass of [`SquashedGaussian::sample`] needs.
#[derive(Debug, Clone)]
pub struct HeadSample {
    pub action: Array2<f64>,
    pub log_prob: Array1<f64>,
    eps: Array2<f64>,
    std: Array2<f64>,
    raw_log_std: Array2<f64>,
}

impl SquashedGaussian {
    pub fn log_std(&self, raw: f64) -> f64 {
        raw.clamp(self.log_std_min, self.log_std_max)
    }

    fn dlog_std(&self, raw: f64) -> f64 {
        if raw > self.log_std_min && raw < self.log_std_max {
            1.0
        } else {
            0.0
        }
    }

    /// `tanh(mean)`.
    pub fn deterministic(&self, out: ArrayView2<f64>) -> Array2<f64> {
        let a = out.ncols() / 2;
        out.slice(ndarray::s![.., ..a]).mapv(f64::tanh)
    }

    /// Reparameterized sample `tanh(mu + sigma eps)` with its log-density,
    /// including the change-of-variables correction.
    pub fn sample(&self, out: ArrayView2<f64>, eps: ArrayView2<f64>) -> HeadSample {
        let (b, a) = eps.dim();
        assert_eq!(out.dim(), (b, 2 * a));
        let mut action = Array2::zeros((b, a));
        let mut std = Array2::zeros((b, a));
        let mut log_prob = Array1::zeros(b);
        let raw_log_std = out.slice(ndarray::s![.., a..]).to_owned();
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        for i in 0..b {
            let mut lp = 0.0;
            for j in 0..a {
                let ls = self.log_std(raw_log_std[[i, j]]);
                let s = ls.exp();
                let e = eps[[i, j]];
                let u = out[[i, j]] + s * e;
                action[[i, j]] = u.tanh();
                std[[i, j]] = s;
                lp += -0.5 * e * e - ls - half_ln_2pi - log1m_tanh_sq(u);
            }
            log_prob[i] = lp;
        }
        HeadSample {
            action,
            log_prob,
            eps: eps.to_owned(),
            std,
            raw_log_std,
        }
    }

    /// Gradient with respect to the network output given upstream gradients on
    /// the action and on the log-probability, with `eps` held fixed.
    pub fn backward(&self, s: &HeadSample, d_action: ArrayView2<f64>, d_log_prob: ArrayView2<f64>) -> Array2<f64> {
        let (b, a) = s.action.dim();
        let mut g = Array2::zeros((b, 2 * a));
        for i in 0..b {
            let dl = d_log_prob[[i, 0]];
            for j in 0..a {
                let act = s.action[[i, j]];
                let se = s.std[[i, j]] * s.eps[[i, j]];
                let dadu = 1.0 - act * act;
                // d logp / du = 2 tanh(u); u = mu + sigma eps.
                let du = d_action[[i, j]] * dadu + dl * 2.0 * act;
                g[[i, j]] = du;
                let dls = du * se - dl;
                g[[i, a + j]] = dls * self.dlog_std(s.raw_log_std[[i, j]]);
            }
        }
        g
    }
}

/// Five-point central difference `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (8.0 * (f(x + h) - f(x - h)) - (f(x + 2.0 * h) - f(x - 2.0 * h))) / (12.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        relative_error(a, b, 1e-8)
    }

    #[test]
    fn shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = DenseNet::new(&[3, 5, 2], &mut rng);
        let x = rand_mat(&mut rng, 4, 3);
        let (y, _) = net.forward(x.view());
        assert_eq!(y.dim(), (4, 2));
        assert_eq!(y, net.predict(x.view()));
        assert_eq!(net.num_params(), 3 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-4;
        for _ in 0..20 {
            let net = DenseNet::new(&[4, 6, 5, 3], &mut rng);
            let x = rand_mat(&mut rng, 2, 4);
            let c = rand_mat(&mut rng, 2, 3);
            let loss = |n: &DenseNet, x: &Array2<f64>| (n.predict(x.view()) * &c).sum();
            let (_, cache) = net.forward(x.view());
            let (g, gx) = net.backward(&cache, c.view());
            let flat_g: Vec<f64> = g
                .weights
                .iter()
                .zip(&g.biases)
                .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
                .collect();
            let p = net.params();
            for i in 0..p.len() {
                let mut n2 = net.clone();
                let num = central_difference(
                    |v| {
                        let mut q = p.clone();
                        q[i] = v;
                        n2.set_params(&q);
                        loss(&n2, &x)
                    },
                    p[i],
                    h,
                );
                assert!(rel_err(flat_g[i], num) < 1e-6, "{i}: {} vs {num}", flat_g[i]);
            }
            for idx in 0..x.len() {
                let (r, col) = (idx / 4, idx % 4);
                let num = central_difference(
                    |v| {
                        let mut xp = x.clone();
                        xp[[r, col]] = v;
                        loss(&net, &xp)
                    },
                    x[[r, col]],
                    h,
                );
                assert!(rel_err(gx[[r, col]], num) < 1e-6);
            }
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = DenseNet::new(&[1, 1], &mut rng);
        let mut opt = Adam::new(&net, AdamConfig::with_lr(0.05));
        let x = Array2::from_shape_vec((4, 1), vec![-1.0, 0.0, 1.0, 2.0]).unwrap();
        let y = x.mapv(|v| 3.0 * v - 1.0);
        for _ in 0..2000 {
            let (out, cache) = net.forward(x.view());
            let (g, _) = net.backward(&cache, (&out - &y).view());
            opt.step(&mut net, &g);
        }
        assert!((net.weights()[0][[0, 0]] - 3.0).abs() < 1e-3);
        assert!((net.biases()[0][0] + 1.0).abs() < 1e-3);
        assert_eq!(opt.steps(), 2000);
    }

    #[test]
    fn scalar_adam_moves_against_gradient() {
        let mut opt = ScalarAdam::new(AdamConfig::with_lr(0.1));
        let mut x = 1.0;
        opt.step(&mut x, 2.0);
        assert!((x - 0.9).abs() < 1e-6);
    }

    #[test]
    fn soft_update_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let online = DenseNet::new(&[2, 3, 1], &mut rng);
        let mut target = DenseNet::new(&[2, 3, 1], &mut rng);
        let dist = |a: &DenseNet, b: &DenseNet| {
            a.params().iter().zip(b.params()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        let d0 = dist(&online, &target);
        for _ in 0..100 {
            target.soft_update(&online, 0.1);
        }
        assert!(dist(&online, &target) <= d0 * 0.9f64.powi(100) * (1.0 + 1e-9));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = DenseNet::new(&[3, 4, 2], &mut rng);
        let json = serde_json::to_string(&net.to_checkpoint()).unwrap();
        let back = DenseNet::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, net);
        let mut bad = net.to_checkpoint();
        bad.version = 9;
        assert!(matches!(DenseNet::from_checkpoint(&bad), Err(NnError::Version(9))));
        let mut bad = net.to_checkpoint();
        bad.params.pop();
        assert!(matches!(DenseNet::from_checkpoint(&bad), Err(NnError::Shape(_))));
        let mut bad = net.to_checkpoint();
        bad.params[0] = f64::NAN;
        assert!(matches!(DenseNet::from_checkpoint(&bad), Err(NnError::NonFinite)));
    }

    #[test]
    fn stable_log_jacobian() {
        for &u in &[-30.0, -3.0, -0.1, 0.0, 0.7, 5.0, 40.0] {
            let naive = (1.0 - f64::tanh(u).powi(2)).ln();
            let stable = log1m_tanh_sq(u);
            assert!(stable.is_finite());
            if u.abs() < 5.0 {
                assert!((naive - stable).abs() < 1e-10);
            }
        }
        assert!((log1m_tanh_sq(40.0) - (2.0 * LN_2 - 80.0)).abs() < 1e-9);
    }

    #[test]
    fn log_std_range() {
        let h = SquashedGaussian::default();
        assert_eq!(h.log_std(-1e3), -20.0);
        assert_eq!(h.log_std(1e3), 2.0);
        assert_eq!(h.log_std(0.3), 0.3);
        assert_eq!(h.dlog_std(1e3), 0.0);
    }

    #[test]
    fn head_log_prob_matches_density() {
        // One dimension: density of a = tanh(u), u ~ N(mu, s^2).
        let h = SquashedGaussian::default();
        let out = Array2::from_shape_vec((1, 2), vec![0.3, -0.4]).unwrap();
        let eps = Array2::from_shape_vec((1, 1), vec![0.8]).unwrap();
        let s = h.sample(out.view(), eps.view());
        let sd = h.log_std(-0.4).exp();
        let u: f64 = 0.3 + sd * 0.8;
        let pdf = (-0.5 * 0.8f64 * 0.8).exp() / (sd * (2.0 * PI).sqrt());
        let expect = (pdf / (1.0 - u.tanh().powi(2))).ln();
        assert!((s.log_prob[0] - expect).abs() < 1e-12);
        assert!((s.action[[0, 0]] - u.tanh()).abs() < 1e-15);
        assert_eq!(h.deterministic(out.view())[[0, 0]], 0.3f64.tanh());
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let h = SquashedGaussian::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (b, a) = (3, 4);
            let out = Array2::from_shape_fn((b, 2 * a), |_| rng.random_range(-1.5..1.5));
            let eps = Array2::from_shape_fn((b, a), |_| rng.sample::<f64, _>(StandardNormal));
            let ca = rand_mat(&mut rng, b, a);
            let cl = rand_mat(&mut rng, b, 1);
            let loss = |o: &Array2<f64>| {
                let s = h.sample(o.view(), eps.view());
                (&s.action * &ca).sum() + (s.log_prob.insert_axis(Axis(1)) * &cl).sum()
            };
            let s = h.sample(out.view(), eps.view());
            let g = h.backward(&s, ca.view(), cl.view());
            for i in 0..b {
                for j in 0..2 * a {
                    let num = central_difference(
                        |v| {
                            let mut o = out.clone();
                            o[[i, j]] = v;
                            loss(&o)
                        },
                        out[[i, j]],
                        1e-4,
                    );
                    assert!(rel_err(g[[i, j]], num) < 1e-6, "{} vs {num}", g[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn log_prob_finite_at_saturation() {
        let h = SquashedGaussian::default();
        let out = Array2::from_shape_vec((1, 2), vec![50.0, 5.0]).unwrap();
        let eps = Array2::from_shape_vec((1, 1), vec![3.0]).unwrap();
        let s = h.sample(out.view(), eps.view());
        assert!(s.log_prob[0].is_finite());
        assert!(s.action[[0, 0]] <= 1.0);
    }
}
