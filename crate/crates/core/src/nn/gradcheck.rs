//! Central finite-difference checks of [`Mlp::backward`].

use super::{Matrix, Mlp, Mode};
use crate::error::Result;

/// Scalar loss of the network output: returns the loss and its gradient w.r.t. the output.
pub type LossFn<'a> = dyn Fn(&Matrix) -> (f64, Matrix) + 'a;

/// Gradient agreement is measured as `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// round-off on numerically-zero gradients from dominating.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Index into the flattened parameter vector (or `params + input index` for the
    /// input gradient) where the worst error occurred.
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub failures: Vec<GradFailure>,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradFailure {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub const DEFAULT_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients (parameters and input batch) of `loss_fn(mlp(batch))`
/// against central differences with the given step. The forward pass runs in training
/// mode, so batch-norm statistics are differentiated as functions of the batch.
pub fn finite_diff_check(
    mlp: &Mlp,
    batch: &Matrix,
    loss_fn: &LossFn<'_>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (out, cache) = mlp.forward(batch, Mode::Train)?;
    let (_, grad_out) = loss_fn(&out);
    let (grads, grad_in) = mlp.backward(&cache, &grad_out)?;
    let analytic: Vec<f64> = grads.flatten().into_iter().chain(grad_in.data().iter().copied()).collect();

    let eval = |net: &Mlp, x: &Matrix| -> Result<f64> {
        let y = net.predict(x, Mode::Train)?;
        Ok(loss_fn(&y).0)
    };

    let params = mlp.flat_params();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = mlp.clone();
    let mut shifted = params.clone();
    for i in 0..params.len() {
        shifted[i] = params[i] + step;
        probe.set_flat_params(&shifted)?;
        let up = eval(&probe, batch)?;
        shifted[i] = params[i] - step;
        probe.set_flat_params(&shifted)?;
        let down = eval(&probe, batch)?;
        shifted[i] = params[i];
        numeric.push((up - down) / (2.0 * step));
    }
    probe.set_flat_params(&params)?;
    let mut x = batch.clone();
    for i in 0..batch.data().len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let up = eval(&probe, &x)?;
        x.data_mut()[i] = orig - step;
        let down = eval(&probe, &x)?;
        x.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: analytic.len(),
        failures: Vec::new(),
        tolerance,
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, n);
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst_index = Some(i);
        }
        if e > tolerance {
            report.failures.push(GradFailure { index: i, analytic: a, numeric: n });
        }
    }
    Ok(report)
}

/// Mean squared error `mean_rows ||y - target||²` and its gradient.
pub fn mse_loss(target: &Matrix) -> impl Fn(&Matrix) -> (f64, Matrix) + '_ {
    move |y: &Matrix| {
        let diff = y.sub(target).expect("target shape matches output");
        let b = y.rows() as f64;
        let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / b;
        (loss, diff.scale(2.0 / b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(rng: &mut ChaCha8Rng, widths: &[usize], bn: bool) -> Mlp {
        let specs: Vec<LayerSpec> = widths[1..]
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let last = i + 2 == widths.len();
                LayerSpec {
                    out,
                    activation: if last { Activation::Identity } else { Activation::LeakyRelu(0.2) },
                    batch_norm: (bn && !last).then_some(true),
                }
            })
            .collect();
        let mut m = Mlp::init(widths[0], &specs, rng).unwrap();
        use rand::Rng;
        let p: Vec<f64> = m.flat_params().iter().map(|x| x + rng.random_range(-0.2..0.2)).collect();
        m.set_flat_params(&p).unwrap();
        m
    }

    /// Draws (net, batch) pairs until no LeakyReLU input is within 1e-4 of a kink.
    fn away_from_kinks(seed: u64, widths: &[usize], bn: bool, rows: usize) -> (Mlp, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let m = net(&mut rng, widths, bn);
            let x = Matrix::randn(rows, widths[0], &mut rng);
            let (_, cache) = m.forward(&x, Mode::Train).unwrap();
            if cache.min_abs_kink_distance(&m) > 1e-4 {
                return (m, x);
            }
        }
    }

    #[test]
    fn two_layer_mse_passes() {
        let (m, x) = away_from_kinks(1, &[3, 5, 2], false, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let target = Matrix::randn(8, 2, &mut rng);
        let loss = mse_loss(&target);
        let r = finite_diff_check(&m, &x, &loss, DEFAULT_STEP, 1e-5).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_error < 1e-5);
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let (m, x) = away_from_kinks(2, &[3, 4, 2], true, 6);
        let loss = |y: &Matrix| (1.0, Matrix::zeros(y.rows(), y.cols()));
        let r = finite_diff_check(&m, &x, &loss, DEFAULT_STEP, 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn batch_norm_network_passes() {
        let (m, x) = away_from_kinks(3, &[2, 4, 3, 2], true, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let target = Matrix::randn(4, 2, &mut rng);
        let loss = mse_loss(&target);
        let r = finite_diff_check(&m, &x, &loss, DEFAULT_STEP, 1e-5).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn single_linear_layer_sum_loss() {
        // y = W x, L = sum(y): dL/dW[o][i] = sum over the batch of x[:, i].
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = net(&mut rng, &[3, 2], false);
        let x = Matrix::randn(5, 3, &mut rng);
        let (y, cache) = m.forward(&x, Mode::Train).unwrap();
        let (g, _) = m.backward(&cache, &Matrix::filled(y.rows(), y.cols(), 1.0)).unwrap();
        let col = x.column_sums();
        for o in 0..2 {
            for i in 0..3 {
                assert!((g.layers[0].weight[(o, i)] - col[i]).abs() < 1e-12);
            }
        }
        let loss = |y: &Matrix| (y.sum(), Matrix::filled(y.rows(), y.cols(), 1.0));
        assert!(finite_diff_check(&m, &x, &loss, DEFAULT_STEP, 1e-5).unwrap().passed());
    }
}
