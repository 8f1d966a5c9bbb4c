//! Multi-layer perceptrons with LeakyReLU activations and batch normalization,
//! with hand-written backpropagation.
//!
//! A layer computes `act(bn(x·Wᵀ + b))`, where the batch-norm stage is optional.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Derivative; the kink at 0 takes the positive-branch slope.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    /// When false, `gamma`/`beta` stay at 1/0 and are not trainable.
    #[serde(default = "default_true")]
    pub affine: bool,
}

fn default_true() -> bool {
    true
}

impl BatchNorm {
    pub fn new(width: usize, affine: bool) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            eps: 1e-5,
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: 0.1,
            affine,
        }
    }

    fn width(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub batch_norm: Option<BatchNorm>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn param_count(&self) -> usize {
        let bn = match &self.batch_norm {
            Some(bn) if bn.affine => 2 * bn.width(),
            _ => 0,
        };
        self.weight.data().len() + self.bias.len() + bn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm normalizes with the statistics of the current batch.
    Train,
    /// Batch norm uses its running statistics.
    Eval,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    bn: Option<BnCache>,
    /// Input to the activation function.
    preact: Matrix,
}

/// Everything `Mlp::backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Smallest |pre-activation| feeding a LeakyReLU; used to keep finite-difference
    /// probes away from kinks.
    pub fn min_abs_kink_distance(&self, mlp: &Mlp) -> f64 {
        mlp.layers
            .iter()
            .zip(&self.layers)
            .filter(|(l, _)| matches!(l.activation, Activation::LeakyRelu(_)))
            .flat_map(|(_, c)| c.preact.data().iter().map(|x| x.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    /// Flattened in the same order as [`Mlp::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
            if let (Some(g), Some(b)) = (&l.gamma, &l.beta) {
                out.extend_from_slice(g);
                out.extend_from_slice(b);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Layer-by-layer description used by [`Mlp::init`].
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub out: usize,
    pub activation: Activation,
    /// `Some(affine)` adds a batch-norm stage.
    pub batch_norm: Option<bool>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} vs {} outputs",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if let Activation::LeakyRelu(s) = l.activation {
                if !(s > 0.0 && s < 1.0) {
                    return Err(Error::Config(format!("layer {i}: LeakyReLU slope {s} not in (0,1)")));
                }
            }
            if let Some(bn) = &l.batch_norm {
                if bn.width() != l.out_dim() || bn.beta.len() != bn.width() {
                    return Err(Error::Shape(format!("layer {i}: batch-norm width mismatch")));
                }
                if !(bn.eps > 0.0) || bn.running_var.iter().any(|&v| v < 0.0) {
                    return Err(Error::Config(format!("layer {i}: invalid batch-norm state")));
                }
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::Shape(format!(
                    "layer {} outputs {} but layer {i} expects {}",
                    i - 1,
                    layers[i - 1].out_dim(),
                    l.in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Random initialization: He-normal for layers feeding a LeakyReLU, LeCun-normal otherwise,
    /// zero biases.
    pub fn init<R: Rng + ?Sized>(input: usize, specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut fan_in = input;
        for s in specs {
            let gain = match s.activation {
                Activation::LeakyRelu(a) => 2.0 / (1.0 + a * a),
                Activation::Identity => 1.0,
            };
            let normal = Normal::new(0.0, (gain / fan_in.max(1) as f64).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            let weight = Matrix::from_fn(s.out, fan_in, |_, _| normal.sample(rng));
            layers.push(Layer {
                weight,
                bias: vec![0.0; s.out],
                activation: s.activation,
                batch_norm: s.batch_norm.map(|affine| BatchNorm::new(s.out, affine)),
            });
            fan_in = s.out;
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// All trainable parameters: per layer weight (row-major), bias, then gamma and beta
    /// for affine batch norms.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
            if let Some(bn) = l.batch_norm.as_ref().filter(|bn| bn.affine) {
                out.extend_from_slice(&bn.gamma);
                out.extend_from_slice(&bn.beta);
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters supplied for a network with {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[off..off + dst.len()]);
            off += dst.len();
        };
        for l in &mut self.layers {
            take(l.weight.data_mut());
            take(&mut l.bias);
            if let Some(bn) = l.batch_norm.as_mut().filter(|bn| bn.affine) {
                take(&mut bn.gamma);
                take(&mut bn.beta);
            }
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Matrix, mode: Mode) -> Result<(Matrix, ForwardCache)> {
        if batch.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.in_dim()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let mut pre = x.matmul_t(&layer.weight)?;
            pre.add_row_vector(&layer.bias);
            let bn_cache = match &layer.batch_norm {
                Some(bn) => Some(batch_norm_forward(bn, &mut pre, mode)?),
                None => None,
            };
            let out = match layer.activation {
                Activation::Identity => pre.clone(),
                act => pre.map(|v| act.apply(v)),
            };
            caches.push(LayerCache { input: x, bn: bn_cache, preact: pre });
            x = out;
        }
        Ok((x, ForwardCache { mode, layers: caches }))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, batch: &Matrix, mode: Mode) -> Result<Matrix> {
        if batch.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.in_dim()
            )));
        }
        let mut x = batch.clone();
        for layer in &self.layers {
            let mut pre = x.matmul_t(&layer.weight)?;
            pre.add_row_vector(&layer.bias);
            if let Some(bn) = &layer.batch_norm {
                batch_norm_forward(bn, &mut pre, mode)?;
            }
            if layer.activation != Activation::Identity {
                let act = layer.activation;
                pre.map_inplace(|v| act.apply(v));
            }
            x = pre;
        }
        Ok(x)
    }

    /// Folds the batch statistics recorded in a training-mode cache into the running
    /// statistics: `running = (1 - momentum)·running + momentum·batch`.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Train {
            return;
        }
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(bn), Some(bc)) = (layer.batch_norm.as_mut(), c.bn.as_ref()) {
                let m = bn.momentum;
                for j in 0..bn.width() {
                    bn.running_mean[j] = (1.0 - m) * bn.running_mean[j] + m * bc.batch_mean[j];
                    bn.running_var[j] = (1.0 - m) * bn.running_var[j] + m * bc.batch_var[j];
                }
            }
        }
    }

    /// Exact gradients of a scalar loss `L` with `dL/d(output) = grad_output`, with respect
    /// to every trainable parameter and to the input batch.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::Shape("cache was produced by a different network".into()));
        }
        let last = &cache.layers[cache.layers.len() - 1];
        if grad_output.shape() != last.preact.shape() {
            return Err(Error::Shape(format!(
                "output gradient is {:?}, network output is {:?}",
                grad_output.shape(),
                last.preact.shape()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_output.clone();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            if c.input.cols() != layer.in_dim() || c.preact.cols() != layer.out_dim() {
                return Err(Error::Shape("cache does not match network parameters".into()));
            }
            if let Activation::LeakyRelu(_) = layer.activation {
                let act = layer.activation;
                for (gv, &p) in g.data_mut().iter_mut().zip(c.preact.data()) {
                    *gv *= act.derivative(p);
                }
            }
            let (mut gamma, mut beta) = (None, None);
            if let (Some(bn), Some(bc)) = (&layer.batch_norm, &c.bn) {
                let (dg, db, dx) = batch_norm_backward(bn, bc, &g, cache.mode);
                if bn.affine {
                    gamma = Some(dg);
                    beta = Some(db);
                }
                g = dx;
            }
            let weight = g.t_matmul(&c.input)?;
            let bias = g.column_sums();
            let grad_in = g.matmul(&layer.weight)?;
            grads.push(LayerGrads { weight, bias, gamma, beta });
            g = grad_in;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }
}

fn batch_norm_forward(bn: &BatchNorm, pre: &mut Matrix, mode: Mode) -> Result<BnCache> {
    let width = pre.cols();
    let (mean, var) = match mode {
        Mode::Train => {
            if pre.rows() < 2 {
                return Err(Error::Precondition("batch norm in training mode needs at least 2 rows".into()));
            }
            (pre.column_means(), pre.column_variances())
        }
        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = Matrix::zeros(pre.rows(), width);
    for r in 0..pre.rows() {
        let (src, dst) = (pre.row_mut(r), xhat.row_mut(r));
        for j in 0..width {
            let h = (src[j] - mean[j]) * inv_std[j];
            dst[j] = h;
            src[j] = bn.gamma[j] * h + bn.beta[j];
        }
    }
    Ok(BnCache { xhat, inv_std, batch_mean: mean, batch_var: var })
}

/// Returns `(dgamma, dbeta, dinput)`.
fn batch_norm_backward(bn: &BatchNorm, c: &BnCache, dy: &Matrix, mode: Mode) -> (Vec<f64>, Vec<f64>, Matrix) {
    let (rows, width) = dy.shape();
    let mut dgamma = vec![0.0; width];
    let dbeta = dy.column_sums();
    for r in 0..rows {
        for ((acc, d), h) in dgamma.iter_mut().zip(dy.row(r)).zip(c.xhat.row(r)) {
            *acc += d * h;
        }
    }
    let mut dx = Matrix::zeros(rows, width);
    match mode {
        Mode::Eval => {
            for r in 0..rows {
                for j in 0..width {
                    dx[(r, j)] = dy[(r, j)] * bn.gamma[j] * c.inv_std[j];
                }
            }
        }
        Mode::Train => {
            // dx = (γ·σ⁻¹/B)·(B·dy − Σdy − x̂·Σ(dy·x̂))
            let b = rows as f64;
            for r in 0..rows {
                for j in 0..width {
                    dx[(r, j)] = bn.gamma[j] * c.inv_std[j] / b
                        * (b * dy[(r, j)] - dbeta[j] - c.xhat[(r, j)] * dgamma[j]);
                }
            }
        }
    }
    (dgamma, dbeta, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(weight: Matrix, activation: Activation) -> Mlp {
        let out = weight.rows();
        Mlp::new(vec![Layer { weight, bias: vec![0.0; out], activation, batch_norm: None }]).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = single(Matrix::identity(2), Activation::Identity);
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let (y, _) = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn leaky_relu_definition() {
        let net = single(Matrix::identity(2), Activation::LeakyRelu(0.2));
        let x = Matrix::from_rows(&[[-1.0, 3.0]]).unwrap();
        let y = net.predict(&x, Mode::Eval).unwrap();
        assert!((y[(0, 0)] + 0.2).abs() < 1e-15);
        assert_eq!(y[(0, 1)], 3.0);
        assert_eq!(Activation::LeakyRelu(0.2).derivative(0.0), 1.0);
    }

    fn three_layer(rng: &mut ChaCha8Rng, bn: bool) -> Mlp {
        let specs = [
            LayerSpec { out: 6, activation: Activation::LeakyRelu(0.2), batch_norm: bn.then_some(true) },
            LayerSpec { out: 5, activation: Activation::LeakyRelu(0.2), batch_norm: bn.then_some(true) },
            LayerSpec { out: 3, activation: Activation::Identity, batch_norm: None },
        ];
        let mut net = Mlp::init(4, &specs, rng).unwrap();
        // Non-trivial biases and affine parameters.
        let p: Vec<f64> = net.flat_params().iter().map(|x| x + rng.random_range(-0.3..0.3)).collect();
        net.set_flat_params(&p).unwrap();
        net
    }

    /// Independent straight-line evaluator: per sample, per unit, no matrix kernel.
    fn reference_eval(net: &Mlp, x: &Matrix) -> Matrix {
        let mut rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
        for l in net.layers() {
            rows = rows
                .iter()
                .map(|v| {
                    (0..l.out_dim())
                        .map(|o| {
                            let mut s = l.bias[o];
                            for i in 0..l.in_dim() {
                                s += l.weight[(o, i)] * v[i];
                            }
                            s
                        })
                        .collect()
                })
                .collect();
            if let Some(bn) = &l.batch_norm {
                let n = rows.len() as f64;
                for j in 0..l.out_dim() {
                    let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                    let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
                    for r in rows.iter_mut() {
                        r[j] = bn.gamma[j] * (r[j] - mean) / (var + bn.eps).sqrt() + bn.beta[j];
                    }
                }
            }
            for r in rows.iter_mut() {
                for v in r.iter_mut() {
                    *v = l.activation.apply(*v);
                }
            }
        }
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn forward_matches_straight_line_evaluator() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for bn in [false, true] {
            let net = three_layer(&mut rng, bn);
            let x = Matrix::randn(9, 4, &mut rng);
            let (y, _) = net.forward(&x, Mode::Train).unwrap();
            let r = reference_eval(&net, &x);
            assert!(y.sub(&r).unwrap().max_abs() < 1e-12, "bn={bn}");
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = three_layer(&mut rng, true);
        let x = Matrix::randn(8, 4, &mut rng);
        let (y, cache) = net.forward(&x, Mode::Train).unwrap();
        let (g, gx) = net.backward(&cache, &Matrix::zeros(y.rows(), y.cols())).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_standardizes_in_training_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = Layer {
            weight: Matrix::randn(3, 2, &mut rng),
            bias: vec![1.0, -2.0, 0.5],
            activation: Activation::Identity,
            batch_norm: Some(BatchNorm::new(3, true)),
        };
        let net = Mlp::new(vec![layer]).unwrap();
        let x = Matrix::randn(64, 2, &mut rng).map(|v| 3.0 * v + 1.0);
        let y = net.predict(&x, Mode::Train).unwrap();
        for (m, v) in y.column_means().iter().zip(y.column_variances()) {
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = three_layer(&mut rng, true);
        let x = Matrix::randn(16, 4, &mut rng);
        let (_, cache) = net.forward(&x, Mode::Train).unwrap();
        net.update_running_stats(&cache);
        let bn = net.layers()[0].batch_norm.as_ref().unwrap();
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
        assert!(bn.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn dimension_mismatches_are_errors() {
        let net = single(Matrix::identity(2), Activation::Identity);
        assert!(net.forward(&Matrix::zeros(1, 3), Mode::Train).is_err());
        let (_, cache) = net.forward(&Matrix::zeros(1, 2), Mode::Train).unwrap();
        assert!(net.backward(&cache, &Matrix::zeros(1, 3)).is_err());
        let bad = vec![
            Layer { weight: Matrix::zeros(3, 2), bias: vec![0.0; 3], activation: Activation::Identity, batch_norm: None },
            Layer { weight: Matrix::zeros(2, 4), bias: vec![0.0; 2], activation: Activation::Identity, batch_norm: None },
        ];
        assert!(Mlp::new(bad).is_err());
        let bad_slope = vec![Layer {
            weight: Matrix::zeros(1, 1),
            bias: vec![0.0],
            activation: Activation::LeakyRelu(1.5),
            batch_norm: None,
        }];
        assert!(Mlp::new(bad_slope).is_err());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = three_layer(&mut rng, true);
        let p = net.flat_params();
        assert_eq!(p.len(), net.param_count());
        let q: Vec<f64> = p.iter().map(|x| x * 2.0).collect();
        net.set_flat_params(&q).unwrap();
        assert_eq!(net.flat_params(), q);
        assert!(net.set_flat_params(&q[1..]).is_err());
    }
}
