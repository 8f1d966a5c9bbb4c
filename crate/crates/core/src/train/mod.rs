//! Encoder/decoder training under the mean-L1 sparsity constraint, optionally with
//! per-group Gaussian moment penalties.

mod losses;
mod optim;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskedDataset;
use crate::nn::{Activation, ForwardCache, LayerSpec, Matrix, Mlp, Mode};

pub use losses::{group_moment_penalty, reconstruction_loss, sparsity_constraint, MomentMode, MomentPenalty, ORACLE_MASKED_SD};
pub use optim::{dual_ascent, AdamMoments, ExtraAdam, ADAM_EPS, BETA1, BETA2};

/// Hidden widths per unit of latent dimension.
pub const HIDDEN_PATTERN: [usize; 6] = [10, 50, 50, 50, 50, 10];
pub const NET_SLOPE: f64 = 0.2;
/// Smallest per-group batch for the moment penalty.
pub const MIN_GROUP_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    LinearSparse,
    PiecewiseGauss,
    PiecewiseOracle,
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "linear_sparse" => Ok(Regime::LinearSparse),
            "piecewise" | "piecewise_gauss" => Ok(Regime::PiecewiseGauss),
            "oracle" | "piecewise_oracle" => Ok(Regime::PiecewiseOracle),
            other => Err(Error::Config(format!("unknown regime '{other}'"))),
        }
    }
}

/// Where the encoder normalizes with batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderNorm {
    None,
    /// Affine batch norm after every hidden layer.
    Hidden,
    /// As `Hidden`, plus a non-affine batch norm on the output, fixing the latent scale.
    HiddenAndOutput,
}

impl std::str::FromStr for EncoderNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(EncoderNorm::None),
            "hidden" => Ok(EncoderNorm::Hidden),
            "hidden_and_output" => Ok(EncoderNorm::HiddenAndOutput),
            other => Err(Error::Config(format!("unknown encoder_norm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epsilon: f64,
    pub primal_lr: f64,
    pub dual_lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Learned latent dimension.
    pub nn: usize,
    /// Oracle centre; `None` picks 0 when `delta == 0` and 2 otherwise.
    pub oracle_mean_const: Option<f64>,
    pub delta: f64,
    pub log_interval: usize,
    /// Multiplies [`HIDDEN_PATTERN`]·n.
    pub width_scale: f64,
    pub encoder_norm: EncoderNorm,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

/// Primal learning-rate schedule over `iterations`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `primal_lr` down to zero at the last iteration.
    Cosine,
    /// Constant for the first two thirds, then a half-cosine to zero over the last third.
    CosineTail,
}

impl LrSchedule {
    pub fn factor(self, iteration: usize, iterations: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let t = (iteration as f64 / iterations.max(1) as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::CosineTail => {
                let t = (iteration as f64 / iterations.max(1) as f64).min(1.0);
                let u = ((t - 2.0 / 3.0) * 3.0).max(0.0);
                0.5 * (1.0 + (std::f64::consts::PI * u).cos())
            }
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            "cosine_tail" => Ok(LrSchedule::CosineTail),
            other => Err(Error::Config(format!("unknown lr_schedule '{other}'"))),
        }
    }
}

impl TrainConfig {
    pub fn linear(nn: usize) -> Self {
        Self {
            regime: Regime::LinearSparse,
            epsilon: 1e-3,
            primal_lr: 1e-4,
            dual_lr: 1e-4 / 2.0,
            batch_size: 6144,
            iterations: 30_000,
            nn,
            oracle_mean_const: None,
            delta: 0.0,
            log_interval: 100,
            width_scale: 1.0,
            encoder_norm: EncoderNorm::Hidden,
            lr_schedule: LrSchedule::Constant,
        }
    }

    pub fn piecewise(nn: usize, oracle: bool, delta: f64) -> Self {
        Self {
            regime: if oracle { Regime::PiecewiseOracle } else { Regime::PiecewiseGauss },
            epsilon: 1e-2,
            primal_lr: 5e-5,
            dual_lr: 5e-5 / 2.0,
            batch_size: 10_000,
            iterations: 20_000,
            delta,
            ..Self::linear(nn)
        }
    }

    pub fn oracle_center(&self) -> f64 {
        self.oracle_mean_const.unwrap_or(if self.delta == 0.0 { 0.0 } else { 2.0 })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.primal_lr > 0.0) || !(self.dual_lr >= 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 || self.nn == 0 || self.log_interval == 0 {
            return bad("batch_size, nn and log_interval must be positive");
        }
        if !(self.width_scale > 0.0) {
            return bad("width_scale must be positive");
        }
        Ok(())
    }
}

/// Encoder/decoder hidden widths for `n` true latents.
pub fn hidden_widths(n: usize, width_scale: f64) -> Vec<usize> {
    HIDDEN_PATTERN.iter().map(|&w| ((w * n) as f64 * width_scale).round().max(1.0) as usize).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderDecoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub lambda: f64,
}

impl EncoderDecoder {
    /// Latents with batch norm in inference mode.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self.encoder.predict(x, Mode::Eval)
    }

    pub fn reconstruct(&self, x: &Matrix) -> Result<Matrix> {
        self.decoder.predict(&self.encode(x)?, Mode::Eval)
    }

    pub fn nn(&self) -> usize {
        self.encoder.out_dim()
    }

    /// Encoder parameters followed by decoder parameters.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.encoder.flat_params();
        p.extend(self.decoder.flat_params());
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        let k = self.encoder.param_count();
        if p.len() != k + self.decoder.param_count() {
            return Err(Error::Shape(format!("{} parameters for a model with {}", p.len(), k + self.decoder.param_count())));
        }
        self.encoder.set_flat_params(&p[..k])?;
        self.decoder.set_flat_params(&p[k..])
    }
}

fn specs(widths: &[usize], out: usize, hidden: Activation, hidden_bn: bool, output_bn: bool) -> Vec<LayerSpec> {
    widths
        .iter()
        .map(|&w| LayerSpec { out: w, activation: hidden, batch_norm: hidden_bn.then_some(true) })
        .chain(std::iter::once(LayerSpec { out, activation: Activation::Identity, batch_norm: output_bn.then_some(false) }))
        .collect()
}

/// Hidden activation of the learned networks: linear for the linear regime.
pub fn hidden_activation(regime: Regime) -> Activation {
    match regime {
        Regime::LinearSparse => Activation::Identity,
        Regime::PiecewiseGauss | Regime::PiecewiseOracle => Activation::LeakyRelu(NET_SLOPE),
    }
}

/// Encoder `d → nn` and decoder `nn → d`, both with hidden widths from [`hidden_widths`].
pub fn build_networks<R: Rng + ?Sized>(
    n: usize,
    nn: usize,
    d: usize,
    width_scale: f64,
    norm: EncoderNorm,
    hidden: Activation,
    rng: &mut R,
) -> Result<EncoderDecoder> {
    if n == 0 || nn == 0 || d == 0 {
        return Err(Error::Config("network dimensions must be positive".into()));
    }
    let widths = hidden_widths(n, width_scale);
    let encoder = Mlp::init(d, &specs(&widths, nn, hidden, norm != EncoderNorm::None, norm == EncoderNorm::HiddenAndOutput), rng)?;
    let decoder = Mlp::init(nn, &specs(&widths, d, hidden, false, false), rng)?;
    Ok(EncoderDecoder { encoder, decoder, lambda: 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub reconstruction: f64,
    /// Mean absolute latent entry.
    pub mean_l1: f64,
    pub moment_penalty: f64,
    pub lambda: f64,
    pub violation: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: EncoderDecoder,
    pub optimizer: ExtraAdam,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    pub history: TrainHistory,
}

/// Objective values at one parameter point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub reconstruction: f64,
    pub mean_l1: f64,
    pub moment_penalty: f64,
    pub violation: f64,
}

pub struct Trainer<'a> {
    data: &'a MaskedDataset,
    config: TrainConfig,
    group_rows: Vec<Vec<usize>>,
    state: TrainState,
    warned_skip: bool,
}

/// The Lagrangian `reconstruction + moment penalty + λ·violation` on one batch, with its
/// gradient over the flattened encoder and decoder parameters.
pub struct Lagrangian {
    pub stats: StepStats,
    pub value: f64,
    pub grad: Vec<f64>,
    pub encoder_cache: ForwardCache,
    pub skipped: usize,
}

/// `groups[g]` lists the batch rows of group `g`; ignored by the linear regime.
pub fn lagrangian(
    model: &EncoderDecoder,
    config: &TrainConfig,
    masks: &[Vec<bool>],
    lambda: f64,
    x: &Matrix,
    groups: &[Vec<usize>],
) -> Result<Lagrangian> {
    let (z_hat, enc_cache) = model.encoder.forward(x, Mode::Train)?;
    let (x_hat, dec_cache) = model.decoder.forward(&z_hat, Mode::Train)?;
    let (reconstruction, g_xhat) = reconstruction_loss(x, &x_hat)?;
    let (dec_grads, mut g_z) = model.decoder.backward(&dec_cache, &g_xhat)?;
    let (violation, g_sparse) = sparsity_constraint(&z_hat, config.epsilon);
    for (g, s) in g_z.data_mut().iter_mut().zip(g_sparse.data()) {
        *g += lambda * s;
    }
    let (moment_penalty, skipped) = match config.regime {
        Regime::LinearSparse => (0.0, 0),
        regime => {
            let mode = if regime == Regime::PiecewiseOracle {
                MomentMode::Oracle { center: config.oracle_center(), masks }
            } else {
                MomentMode::Estimated
            };
            let p = group_moment_penalty(&z_hat, groups, mode)?;
            for (g, s) in g_z.data_mut().iter_mut().zip(p.grad.data()) {
                *g += s;
            }
            (p.value, p.skipped)
        }
    };
    let (enc_grads, _) = model.encoder.backward(&enc_cache, &g_z)?;
    let mut grad = enc_grads.flatten();
    grad.extend(dec_grads.flatten());
    Ok(Lagrangian {
        stats: StepStats { reconstruction, mean_l1: violation + config.epsilon, moment_penalty, violation },
        value: reconstruction + moment_penalty + lambda * violation,
        grad,
        encoder_cache: enc_cache,
        skipped,
    })
}

impl<'a> Trainer<'a> {
    pub fn new<R: Rng + ?Sized>(data: &'a MaskedDataset, config: TrainConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n = data.mask_set.n();
        let model = build_networks(n, config.nn, data.x.cols(), config.width_scale, config.encoder_norm, hidden_activation(config.regime), rng)?;
        let optimizer = ExtraAdam::new(model.encoder.param_count() + model.decoder.param_count(), config.primal_lr);
        let state = TrainState { model, optimizer, iteration: 0, rng: ChaCha8Rng::seed_from_u64(rng.random()), history: TrainHistory::default() };
        Self::resume(data, config, state)
    }

    pub fn resume(data: &'a MaskedDataset, config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Precondition("empty training set".into()));
        }
        if state.model.encoder.in_dim() != data.x.cols() || state.model.nn() != config.nn {
            return Err(Error::Shape("model does not match the dataset and configuration".into()));
        }
        match config.regime {
            Regime::LinearSparse => {}
            Regime::PiecewiseGauss | Regime::PiecewiseOracle => {
                if data.group.len() != data.len() || data.mask_set.is_empty() {
                    return Err(Error::Precondition("piecewise training needs group labels".into()));
                }
                if config.regime == Regime::PiecewiseOracle && config.nn != data.mask_set.n() {
                    return Err(Error::Precondition(format!(
                        "oracle training needs nn = n = {}, got nn = {}",
                        data.mask_set.n(),
                        config.nn
                    )));
                }
            }
        }
        Ok(Self { data, group_rows: data.group_indices(), config, state, warned_skip: false })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Batch row indices and, for piecewise regimes, the batch positions of each group.
    fn draw_batch(&mut self) -> (Vec<usize>, Vec<Vec<usize>>) {
        let rng = &mut self.state.rng;
        let total = self.data.len();
        if self.config.regime == Regime::LinearSparse {
            if self.config.batch_size >= total {
                return ((0..total).collect(), Vec::new());
            }
            return (sample_indices(rng, total, self.config.batch_size).into_vec(), Vec::new());
        }
        let k = self.group_rows.len();
        let per_group = (self.config.batch_size / k).max(MIN_GROUP_BATCH);
        let mut rows = Vec::with_capacity(per_group * k);
        let mut positions = Vec::with_capacity(k);
        for members in &self.group_rows {
            let start = rows.len();
            if members.len() > per_group {
                rows.extend(sample_indices(rng, members.len(), per_group).into_iter().map(|i| members[i]));
            } else {
                rows.extend_from_slice(members);
            }
            positions.push((start..rows.len()).collect());
        }
        (rows, positions)
    }

    fn evaluate(&self, model: &EncoderDecoder, lambda: f64, x: &Matrix, groups: &[Vec<usize>]) -> Result<Lagrangian> {
        lagrangian(model, &self.config, self.data.mask_set.masks(), lambda, x, groups)
    }

    fn diverged(&self, reason: String) -> Error {
        Error::Diverged { iteration: self.state.iteration, reason }
    }

    /// One extra-gradient iteration; returns the objective at the starting point.
    pub fn step(&mut self) -> Result<StepStats> {
        let (rows, groups) = self.draw_batch();
        let x = self.data.x.select_rows(&rows);
        let lambda = self.state.model.lambda;

        let first = self.evaluate(&self.state.model, lambda, &x, &groups)?;
        let s = first.stats;
        if ![s.reconstruction, s.moment_penalty, s.violation].iter().all(|v| v.is_finite()) {
            return Err(self.diverged(format!("non-finite objective {s:?}")));
        }
        if first.skipped > 0 && !self.warned_skip {
            log::warn!("skipping {} zero-variance moment terms at iteration {}", first.skipped, self.state.iteration);
            self.warned_skip = true;
        }
        self.state.optimizer.lr = self.config.primal_lr * self.config.lr_schedule.factor(self.state.iteration, self.config.iterations);
        let params = self.state.model.flat_params();
        let look = self.state.optimizer.extrapolate(&params, &first.grad).map_err(|e| self.diverged(e.to_string()))?;
        let look_lambda = dual_ascent(lambda, self.config.dual_lr, s.violation);
        let mut look_model = self.state.model.clone();
        look_model.set_flat_params(&look)?;

        let second = self.evaluate(&look_model, look_lambda, &x, &groups)?;
        if !second.stats.violation.is_finite() {
            return Err(self.diverged("non-finite objective at the lookahead point".into()));
        }
        let mut params = params;
        self.state.optimizer.apply(&mut params, &second.grad).map_err(|e| self.diverged(e.to_string()))?;
        self.state.model.set_flat_params(&params)?;
        self.state.model.encoder.update_running_stats(&second.encoder_cache);
        self.state.model.lambda = dual_ascent(lambda, self.config.dual_lr, second.stats.violation);

        self.state.iteration += 1;
        if self.state.iteration % self.config.log_interval == 0 {
            self.state.history.records.push(HistoryRecord {
                iteration: self.state.iteration,
                reconstruction: s.reconstruction,
                mean_l1: s.mean_l1,
                moment_penalty: s.moment_penalty,
                lambda: self.state.model.lambda,
                violation: s.violation,
            });
        }
        Ok(s)
    }

    /// Steps until `config.iterations` have run in total.
    pub fn run(&mut self) -> Result<()> {
        while self.state.iteration < self.config.iterations {
            self.step()?;
        }
        Ok(())
    }
}

/// Trains a fresh model on `dataset`.
pub fn train<R: Rng + ?Sized>(dataset: &MaskedDataset, config: &TrainConfig, rng: &mut R) -> Result<(EncoderDecoder, TrainHistory)> {
    let mut trainer = Trainer::new(dataset, config.clone(), rng)?;
    trainer.run()?;
    let state = trainer.into_state();
    Ok((state.model, state.history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_widths() {
        assert_eq!(hidden_widths(10, 1.0), vec![100, 500, 500, 500, 500, 100]);
        assert_eq!(hidden_widths(5, 0.2), vec![10, 50, 50, 50, 50, 10]);
    }

    #[test]
    fn network_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for nn in [3, 6] {
            let m = build_networks(3, nn, 4, 0.5, EncoderNorm::Hidden, Activation::LeakyRelu(NET_SLOPE), &mut rng).unwrap();
            assert_eq!(m.encoder.layers().len(), 7);
            assert_eq!(m.decoder.layers().len(), 7);
            let x = Matrix::randn(5, 4, &mut rng);
            assert_eq!(m.reconstruct(&x).unwrap().shape(), (5, 4));
            assert!(m.decoder.layers().iter().all(|l| l.batch_norm.is_none()));
            assert!(m.encoder.layers()[6].batch_norm.is_none());
        }
        let a = build_networks(2, 2, 2, 1.0, EncoderNorm::Hidden, Activation::Identity, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_networks(2, 2, 2, 1.0, EncoderNorm::Hidden, Activation::Identity, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn defaults() {
        let l = TrainConfig::linear(5);
        assert_eq!((l.epsilon, l.primal_lr, l.dual_lr), (1e-3, 1e-4, 5e-5));
        let p = TrainConfig::piecewise(5, true, 0.0);
        assert_eq!((p.epsilon, p.primal_lr, p.dual_lr), (1e-2, 5e-5, 2.5e-5));
        assert_eq!(p.oracle_center(), 0.0);
        assert_eq!(TrainConfig::piecewise(5, true, 2.0).oracle_center(), 2.0);
    }

    #[test]
    fn lr_schedules() {
        assert_eq!(LrSchedule::Constant.factor(700, 1000), 1.0);
        assert_eq!(LrSchedule::Cosine.factor(0, 1000), 1.0);
        assert!((LrSchedule::Cosine.factor(500, 1000) - 0.5).abs() < 1e-12);
        assert_eq!(LrSchedule::CosineTail.factor(600, 900), 1.0);
        assert!((LrSchedule::CosineTail.factor(750, 900) - 0.5).abs() < 1e-12);
        assert!(LrSchedule::CosineTail.factor(900, 900).abs() < 1e-12);
        assert_eq!("cosine_tail".parse::<LrSchedule>().unwrap(), LrSchedule::CosineTail);
    }
}
