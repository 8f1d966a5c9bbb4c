//! Experiment configuration, single runs, sweeps, and their aggregation.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discovery::{delta_shd, DeltaShd};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::io::DatasetManifest;
use crate::masking::{
    build_dataset, gen_masks_all_subsets, gen_masks_fixed_ratio, gen_masks_varying_ratio, mask_value, Assignment, MaskSet,
    MaskStrategy, MaskValue, MaskedDataset, RatioMode,
};
use crate::mixing::{gen_linear_mixing, gen_piecewise_mixing, MixingFn};
use crate::scm::{latent_moments, sample_er_dag, sample_scm, Dag, ScmFamily, ScmModel};
use crate::train::{EncoderDecoder, EncoderNorm, LrSchedule, Regime, TrainConfig, TrainHistory, TrainState, Trainer};

/// Independent RNG streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Test,
    Train,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match stream {
        Stream::Data => 0,
        Stream::Test => 1,
        Stream::Train => 2,
    });
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingKind {
    Linear,
    Piecewise,
}

/// `full` keeps the published hyperparameters; `desk` shrinks networks and batches so a run
/// fits in a couple of minutes on one core.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Full,
    Desk,
}

fn default_name() -> String {
    "run".into()
}
fn default_regime() -> String {
    "linear".into()
}
fn default_n() -> usize {
    5
}
fn default_k() -> usize {
    1
}
fn default_family() -> ScmFamily {
    ScmFamily::LinearGaussian
}
fn default_ratio() -> String {
    "50%".into()
}
fn default_mixing() -> MixingKind {
    MixingKind::Linear
}
fn default_layers() -> usize {
    3
}
fn default_strategy() -> MaskStrategy {
    MaskStrategy::FixedRatio
}
fn default_kmul() -> usize {
    5
}
fn default_rows() -> usize {
    10_000
}
fn default_test_rows() -> usize {
    5_000
}
fn default_moment_rows() -> usize {
    100_000
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One experiment, as read from a flat TOML file. Training fields left unset take the
/// regime's published defaults, adjusted by `profile`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub profile: Profile,
    /// `linear`, `piecewise`, or `oracle`.
    #[serde(default = "default_regime")]
    pub regime: String,
    #[serde(default = "default_n")]
    pub n: usize,
    pub nn: Option<usize>,
    pub d: Option<usize>,
    /// Expected number of edges per node.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_family")]
    pub scm_family: ScmFamily,
    /// `1var`, `50%`, or a fraction.
    #[serde(default = "default_ratio")]
    pub ratio: String,
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "default_mixing")]
    pub mixing: MixingKind,
    /// Layers of the piecewise linear mixing.
    #[serde(default = "default_layers")]
    pub mixing_layers: usize,
    #[serde(default = "default_strategy")]
    pub mask_strategy: MaskStrategy,
    /// Fixed-ratio mask count is `mask_multiplier · n` (capped by the number of distinct masks).
    #[serde(default = "default_kmul")]
    pub mask_multiplier: usize,
    /// Defaults to uniform sampling for the linear regime and balanced groups otherwise.
    pub assignment: Option<Assignment>,
    #[serde(default = "default_rows")]
    pub rows: usize,
    #[serde(default = "default_test_rows")]
    pub test_rows: usize,
    /// Samples used to estimate latent moments for the mask value when no closed form exists.
    #[serde(default = "default_moment_rows")]
    pub moment_rows: usize,
    /// Resample the training set every this many iterations instead of using one fixed set.
    pub online_refresh: Option<usize>,
    /// Adds the all-ones mask so discovery has unmasked samples.
    #[serde(default)]
    pub append_full_mask: bool,
    /// Evaluate on latents regenerated without edges.
    #[serde(default)]
    pub independent_test: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,

    pub epsilon: Option<f64>,
    pub primal_lr: Option<f64>,
    pub dual_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub iterations: Option<usize>,
    pub oracle_mean_const: Option<f64>,
    pub log_interval: Option<usize>,
    pub width_scale: Option<f64>,
    pub encoder_norm: Option<EncoderNorm>,
    pub lr_schedule: Option<LrSchedule>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn regime(&self) -> Result<Regime> {
        self.regime.parse()
    }

    pub fn ratio(&self) -> Result<RatioMode> {
        self.ratio.parse()
    }

    pub fn nn(&self) -> usize {
        self.nn.unwrap_or(self.n)
    }

    pub fn d(&self) -> usize {
        self.d.unwrap_or(self.n)
    }

    pub fn assignment(&self) -> Result<Assignment> {
        Ok(self.assignment.unwrap_or(match self.regime()? {
            Regime::LinearSparse => Assignment::UniformPerSample,
            _ => Assignment::BalancedPerGroup,
        }))
    }

    pub fn validate(&self) -> Result<()> {
        let regime = self.regime()?;
        self.ratio()?;
        if self.n < 2 {
            return Err(Error::Config("n must be at least 2".into()));
        }
        if self.d() < self.n {
            return Err(Error::Config(format!("d = {} < n = {}: the mixing cannot be injective", self.d(), self.n)));
        }
        if self.rows == 0 || self.test_rows == 0 {
            return Err(Error::Config("rows and test_rows must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.online_refresh == Some(0) {
            return Err(Error::Config("online_refresh must be positive".into()));
        }
        if self.mixing == MixingKind::Piecewise && self.mixing_layers == 0 {
            return Err(Error::Config("piecewise mixing needs at least one layer".into()));
        }
        if regime == Regime::PiecewiseOracle && self.nn() != self.n {
            return Err(Error::Config(format!("oracle regime needs nn = n = {}", self.n)));
        }
        self.train_config()?.validate()
    }

    /// Published defaults for the regime, then the profile, then explicit overrides.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let regime = self.regime()?;
        let nn = self.nn();
        let mut t = match regime {
            Regime::LinearSparse => TrainConfig::linear(nn),
            Regime::PiecewiseGauss => TrainConfig::piecewise(nn, false, self.delta),
            Regime::PiecewiseOracle => TrainConfig::piecewise(nn, true, self.delta),
        };
        if self.profile == Profile::Desk {
            apply_desk_profile(&mut t, self.n);
        }
        let o = self;
        t.epsilon = o.epsilon.unwrap_or(t.epsilon);
        t.primal_lr = o.primal_lr.unwrap_or(t.primal_lr);
        t.dual_lr = o.dual_lr.unwrap_or(t.primal_lr / 2.0);
        t.batch_size = o.batch_size.unwrap_or(t.batch_size);
        t.iterations = o.iterations.unwrap_or(t.iterations);
        t.oracle_mean_const = o.oracle_mean_const.or(t.oracle_mean_const);
        t.log_interval = o.log_interval.unwrap_or(t.log_interval);
        t.width_scale = o.width_scale.unwrap_or(t.width_scale);
        t.encoder_norm = o.encoder_norm.unwrap_or(t.encoder_norm);
        t.lr_schedule = o.lr_schedule.unwrap_or(t.lr_schedule);
        t.delta = self.delta;
        Ok(t)
    }

    /// Cuts the iteration budget to a third.
    pub fn fast(mut self) -> Result<Self> {
        let t = self.train_config()?;
        self.iterations = Some((t.iterations / 3).max(1));
        Ok(self)
    }
}

/// Desk-scale networks keep hidden widths near `[10, 50, 50, 50, 50, 10]` whatever `n` is.
pub const DESK_WIDTH_UNITS: f64 = 1.0;
pub const DESK_LINEAR_BATCH: usize = 256;
pub const DESK_LINEAR_LR: f64 = 1e-3;
pub const DESK_PIECEWISE_BATCH: usize = 384;

fn apply_desk_profile(t: &mut TrainConfig, n: usize) {
    t.width_scale = DESK_WIDTH_UNITS / n as f64;
    match t.regime {
        Regime::LinearSparse => {
            t.batch_size = DESK_LINEAR_BATCH;
            t.primal_lr = DESK_LINEAR_LR;
            t.lr_schedule = LrSchedule::CosineTail;
        }
        Regime::PiecewiseGauss | Regime::PiecewiseOracle => t.batch_size = DESK_PIECEWISE_BATCH,
    }
    t.dual_lr = t.primal_lr / 2.0;
}

/// The generative side of one experiment seed.
#[derive(Debug, Clone)]
pub struct Generated {
    pub scm: ScmModel,
    pub mask_set: MaskSet,
    pub mask_value: MaskValue,
    pub mixing: MixingFn,
    pub train: MaskedDataset,
    pub manifest: DatasetManifest,
}

pub fn gen_mask_set(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<MaskSet> {
    let set = match cfg.mask_strategy {
        MaskStrategy::AllSubsets => gen_masks_all_subsets(cfg.n)?,
        MaskStrategy::FixedRatio => gen_masks_fixed_ratio(cfg.n, cfg.ratio()?, cfg.mask_multiplier, rng)?,
        MaskStrategy::VaryingRatio => gen_masks_varying_ratio(cfg.n)?,
        MaskStrategy::Explicit => return Err(Error::Config("explicit mask sets cannot be generated from a config".into())),
    };
    Ok(if cfg.append_full_mask { set.with_full_mask() } else { set })
}

/// Samples the SCM, masks, mixing, and training set for `seed`.
pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, Stream::Data);
    let dag = sample_er_dag(cfg.n, cfg.k, &mut rng)?;
    let scm = sample_scm(cfg.scm_family, dag, &mut rng);
    let mask_set = gen_mask_set(cfg, &mut rng)?;
    let mask_value = mask_value(&latent_moments(&scm, cfg.moment_rows, &mut rng), cfg.delta)?;
    let mixing = match cfg.mixing {
        MixingKind::Linear => gen_linear_mixing(cfg.n, cfg.d(), &mut rng)?,
        MixingKind::Piecewise => gen_piecewise_mixing(cfg.n, cfg.d(), cfg.mixing_layers, &mut rng)?,
    };
    let assignment = cfg.assignment()?;
    let train = build_dataset(&scm, &mask_set, &mask_value, &mixing, cfg.rows, assignment, &mut rng)?;
    let manifest = DatasetManifest {
        seed,
        rows: cfg.rows,
        delta: cfg.delta,
        mask_value: mask_value.clone(),
        mask_strategy: mask_set.strategy(),
        assignment,
        scm: scm.clone(),
        mixing: mixing.clone(),
        config: serde_json::to_value(cfg)?,
    };
    Ok(Generated { scm, mask_set, mask_value, mixing, train, manifest })
}

/// A held-out sample from the same generative process; with `independent`, the latents come
/// from an edgeless SCM of the same family.
pub fn test_dataset(manifest: &DatasetManifest, mask_set: &MaskSet, rows: usize, independent: bool) -> Result<MaskedDataset> {
    let mut rng = stream_rng(manifest.seed, Stream::Test);
    let family = scm_family_of(&manifest.scm);
    let scm =
        if independent { sample_scm(family, Dag::empty(manifest.scm.n()), &mut rng) } else { manifest.scm.clone() };
    build_dataset(&scm, mask_set, &manifest.mask_value, &manifest.mixing, rows, manifest.assignment, &mut rng)
}

fn scm_family_of(scm: &ScmModel) -> ScmFamily {
    use crate::scm::{Mechanism, NoiseKind};
    match (&scm.mechanism, scm.noise) {
        (Mechanism::Nonlinear { .. }, _) => ScmFamily::Nonlinear,
        (Mechanism::Linear { .. }, NoiseKind::Gaussian) => ScmFamily::LinearGaussian,
        (Mechanism::Linear { .. }, NoiseKind::Exponential) => ScmFamily::LinearExponential,
    }
}

/// One row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub config: String,
    pub seed: u64,
    pub mcc: f64,
    pub reconstruction: f64,
    pub mean_l1: f64,
    pub violation: f64,
    pub lambda: f64,
    pub active_dims: usize,
    pub runtime_s: f64,
}

/// Threshold on the standard deviation of a learned coordinate for it to count as active.
pub const ACTIVE_STD: f64 = 0.1;

pub struct RunOutcome {
    pub row: RunRow,
    pub generated: Generated,
    pub model: EncoderDecoder,
    pub history: TrainHistory,
    pub report: EvalReport,
}

/// Trains on `data`; with `online_refresh`, the training set is resampled at that period.
pub fn train_model(cfg: &ExperimentConfig, generated: &Generated, seed: u64) -> Result<(EncoderDecoder, TrainHistory)> {
    let config = cfg.train_config()?;
    let mut rng = stream_rng(seed, Stream::Train);
    let mut trainer = Trainer::new(&generated.train, config.clone(), &mut rng)?;
    let Some(period) = cfg.online_refresh else {
        trainer.run()?;
        let s = trainer.into_state();
        return Ok((s.model, s.history));
    };
    let mut state: TrainState = trainer.into_state();
    while state.iteration < config.iterations {
        let data = if state.iteration == 0 {
            generated.train.clone()
        } else {
            build_dataset(
                &generated.scm,
                &generated.mask_set,
                &generated.mask_value,
                &generated.mixing,
                cfg.rows,
                cfg.assignment()?,
                &mut rng,
            )?
        };
        let mut t = Trainer::resume(&data, config.clone(), state)?;
        let stop = (t.state().iteration + period).min(config.iterations);
        while t.state().iteration < stop {
            t.step()?;
        }
        state = t.into_state();
    }
    Ok((state.model, state.history))
}

pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    let start = Instant::now();
    let generated = generate(cfg, seed)?;
    let (model, history) = train_model(cfg, &generated, seed)?;
    let test = test_dataset(&generated.manifest, &generated.mask_set, cfg.test_rows, cfg.independent_test)?;
    let report = evaluate(&model, &test)?;
    let last = history.last().copied();
    let row = RunRow {
        config: cfg.name.clone(),
        seed,
        mcc: report.mcc,
        reconstruction: last.map_or(f64::NAN, |h| h.reconstruction),
        mean_l1: last.map_or(f64::NAN, |h| h.mean_l1),
        violation: last.map_or(f64::NAN, |h| h.violation),
        lambda: model.lambda,
        active_dims: report.active_dims(ACTIVE_STD),
        runtime_s: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { row, generated, model, history, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub config: String,
    pub seeds: usize,
    pub mcc_mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single seed.
    pub mcc_std: f64,
    pub runtime_mean_s: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Aggregates rows per config, in order of first appearance.
pub fn aggregate(rows: &[RunRow]) -> Vec<AggregateRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(r.config.as_str()) {
            order.push(&r.config);
        }
        groups.entry(&r.config).or_default().push(r);
    }
    order
        .into_iter()
        .map(|name| {
            let g = &groups[name];
            let mccs: Vec<f64> = g.iter().map(|r| r.mcc).collect();
            let (mcc_mean, mcc_std) = mean_std(&mccs);
            AggregateRow {
                config: name.to_string(),
                seeds: g.len(),
                mcc_mean,
                mcc_std,
                runtime_mean_s: g.iter().map(|r| r.runtime_s).sum::<f64>() / g.len() as f64,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<RunRow>,
    pub aggregate: Vec<AggregateRow>,
}

/// Runs `job` over `items` on `jobs` worker threads; results keep the input order.
pub fn parallel_map<T: Sync, U: Send>(items: &[T], jobs: usize, job: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<U>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = job(&items[i]);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Every config × seed, in order.
pub fn run_sweep(configs: &[ExperimentConfig], jobs: usize) -> Result<SweepResult> {
    let mut names = std::collections::BTreeSet::new();
    for c in configs {
        c.validate()?;
        if !names.insert(c.name.as_str()) {
            return Err(Error::Config(format!("duplicate config name '{}'", c.name)));
        }
    }
    let work: Vec<(&ExperimentConfig, u64)> = configs.iter().flat_map(|c| c.seeds.iter().map(move |&s| (c, s))).collect();
    let rows = parallel_map(&work, jobs, |(c, s)| {
        let row = run_experiment(c, *s)?.row;
        log::info!("{} seed {}: mcc {:.4} ({:.1}s)", row.config, row.seed, row.mcc, row.runtime_s);
        Ok(row)
    })?;
    let aggregate = aggregate(&rows);
    Ok(SweepResult { rows, aggregate })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    configs: Vec<ExperimentConfig>,
}

/// A sweep file is either one config or a `[[configs]]` array of them.
pub fn sweep_from_toml(text: &str) -> Result<Vec<ExperimentConfig>> {
    let value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let configs = if value.contains_key("configs") {
        toml::from_str::<SweepFile>(text).map_err(|e| Error::Config(e.to_string()))?.configs
    } else {
        vec![ExperimentConfig::from_toml(text)?]
    };
    for c in &configs {
        c.validate()?;
    }
    Ok(configs)
}

pub const PRESETS: [&str; 2] = ["table1-desk", "fig3-desk"];

/// Built-in sweeps at desk scale.
pub fn preset(name: &str) -> Result<Vec<ExperimentConfig>> {
    let base = ExperimentConfig { profile: Profile::Desk, seeds: vec![0, 1, 2], ..Default::default() };
    match name {
        "table1-desk" => {
            let mut out = Vec::new();
            for n in [5, 10] {
                for k in [0, 1] {
                    out.push(ExperimentConfig {
                        name: format!("linear_n{n}_k{k}"),
                        n,
                        k,
                        scm_family: ScmFamily::LinearGaussian,
                        ..base.clone()
                    });
                }
            }
            Ok(out)
        }
        "fig3-desk" => {
            let mut out = Vec::new();
            for delta in [0.0, 2.0, 10.0] {
                for regime in ["piecewise", "oracle"] {
                    out.push(ExperimentConfig {
                        name: format!("{regime}_n3_m3_delta{delta}"),
                        regime: regime.into(),
                        n: 3,
                        k: 1,
                        mixing: MixingKind::Piecewise,
                        mixing_layers: 3,
                        delta,
                        ..base.clone()
                    });
                }
            }
            Ok(out)
        }
        other => Err(Error::Config(format!("unknown preset '{other}' (known: {})", PRESETS.join(", ")))),
    }
}

/// `count` points spaced evenly in log10 between `lo` and `hi`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || count == 0 {
        return Err(Error::Config(format!("bad grid [{lo}, {hi}] with {count} points")));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..count).map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRow {
    pub epsilon: f64,
    pub seed: u64,
    pub mcc: f64,
    pub lambda: f64,
}

/// MCC for every ε in `grid` and every seed of `cfg`.
pub fn epsilon_sweep(cfg: &ExperimentConfig, grid: &[f64], jobs: usize) -> Result<Vec<EpsilonRow>> {
    let work: Vec<(f64, u64)> = grid.iter().flat_map(|&e| cfg.seeds.iter().map(move |&s| (e, s))).collect();
    parallel_map(&work, jobs, |&(epsilon, seed)| {
        let c = ExperimentConfig { epsilon: Some(epsilon), name: format!("{}_eps{epsilon:e}", cfg.name), ..cfg.clone() };
        let out = run_experiment(&c, seed)?;
        Ok(EpsilonRow { epsilon, seed, mcc: out.row.mcc, lambda: out.row.lambda })
    })
}

/// Structure learning on the unmasked samples of `test`, from true and learned latents.
pub fn discover(model: &EncoderDecoder, dag: &Dag, test: &MaskedDataset, alpha: f64) -> Result<DeltaShd> {
    let full = test
        .mask_set
        .full_mask_index()
        .ok_or_else(|| Error::Precondition("dataset has no all-ones mask group; regenerate with append_full_mask".into()))?;
    let sub = test.restrict_to_group(full);
    if sub.len() < dag.n() + 4 {
        return Err(Error::Precondition(format!("only {} unmasked samples", sub.len())));
    }
    let z_hat = model.encode(&sub.x)?;
    delta_shd(dag, &sub.z, &z_hat, alpha)
}
