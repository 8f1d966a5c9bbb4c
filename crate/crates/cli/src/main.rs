use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sparsecrl::discovery::DEFAULT_ALPHA;
use sparsecrl::eval::evaluate;
use sparsecrl::experiment::{
    discover, epsilon_sweep, log_grid, preset, run_sweep, stream_rng, sweep_from_toml, test_dataset, ExperimentConfig,
    Stream, PRESETS,
};
use sparsecrl::io::{
    read_dataset, read_json, write_corr_csv, write_cpdag_csv, write_dataset, write_history_csv, write_json, write_records_csv,
};
use sparsecrl::mixing::counterexample_report;
use sparsecrl::train::{EncoderDecoder, TrainState, Trainer};

#[derive(Parser)]
#[command(name = "sparsecrl", version, about = "Sparsity-constrained causal representation learning experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (flat TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Runs a third of the configured iterations.
    #[arg(long, global = true)]
    fast: bool,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Samples an SCM, masks and mixing, and writes the training set.
    GenData,
    /// Trains an encoder/decoder on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continues from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Scores a trained model on a fresh sample from the dataset's generative process.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Regenerates the latents without causal edges.
        #[arg(long)]
        independent_test: bool,
        #[arg(long)]
        test_rows: Option<usize>,
    },
    /// Runs configs × seeds and aggregates MCC.
    Sweep {
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
    },
    /// Monte Carlo report for the sinh counterexample.
    Counterexample {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// PC on the unmasked samples, from true and learned latents.
    Discover {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// MCC over a log grid of ε.
    EpsSweep {
        #[arg(long, default_value_t = 1e-4)]
        lo: f64,
        #[arg(long, default_value_t = 1e4)]
        hi: f64,
        #[arg(long, default_value_t = 9)]
        points: usize,
    },
}

impl Global {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        self.adjust(cfg)
    }

    fn adjust(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if self.fast {
            cfg = cfg.fast()?;
        }
        Ok(cfg)
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(self.out_dir.join(name))
    }
}

/// The config stored with a dataset, unless `--config` replaces it.
fn dataset_config(global: &Global, stored: &serde_json::Value) -> Result<ExperimentConfig> {
    if global.config.is_some() || stored.is_null() {
        return global.experiment();
    }
    let cfg: ExperimentConfig = serde_json::from_value(stored.clone()).context("dataset manifest has an invalid config")?;
    global.adjust(cfg)
}

fn gen_data(g: &Global) -> Result<()> {
    let cfg = g.experiment()?;
    let seed = cfg.seeds[0];
    let generated = sparsecrl::experiment::generate(&cfg, seed)?;
    sparsecrl::masking::check_sufficient_variability(&generated.mask_set)?;
    write_dataset(&g.out_dir, &generated.train, &generated.manifest)?;
    fs::write(g.out("config.toml")?, cfg.to_toml())?;
    println!("{}", json!({ "dataset": g.out_dir, "seed": seed, "rows": generated.train.len(), "groups": generated.mask_set.len() }));
    Ok(())
}

fn train(g: &Global, data: &Path, resume: Option<&Path>) -> Result<()> {
    let (ds, manifest) = read_dataset(data)?;
    let cfg = dataset_config(g, &manifest.config)?;
    let tc = cfg.train_config()?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(&ds, tc, read_json::<TrainState>(p)?)?,
        None => {
            let seed = g.seed.unwrap_or(manifest.seed);
            Trainer::new(&ds, tc, &mut stream_rng(seed, Stream::Train))?
        }
    };
    trainer.run()?;
    let state = trainer.into_state();
    write_json(g.out("model.json")?, &state.model)?;
    write_json(g.out("state.json")?, &state)?;
    write_history_csv(g.out("history.csv")?, &state.history)?;
    let last = state.history.last();
    println!(
        "{}",
        json!({ "iterations": state.iteration, "lambda": state.model.lambda, "reconstruction": last.map(|h| h.reconstruction) })
    );
    Ok(())
}

fn eval(g: &Global, model: &Path, data: &Path, independent: bool, test_rows: Option<usize>) -> Result<()> {
    let (ds, manifest) = read_dataset(data)?;
    let cfg = dataset_config(g, &manifest.config)?;
    let model: EncoderDecoder = read_json(model)?;
    let test = test_dataset(&manifest, &ds.mask_set, test_rows.unwrap_or(cfg.test_rows), independent || cfg.independent_test)?;
    let report = evaluate(&model, &test)?;
    write_json(g.out("eval.json")?, &report)?;
    write_corr_csv(g.out("corr.csv")?, &report.corr)?;
    write_records_csv(g.out("moments.csv")?, &report.per_group_moments)?;
    println!("{}", json!({ "mcc": report.mcc, "permutation": report.permutation }));
    Ok(())
}

fn sweep(g: &Global, preset_name: Option<&str>) -> Result<()> {
    let configs = match (preset_name, &g.config) {
        (Some(p), _) => preset(p)?,
        (None, Some(path)) => sweep_from_toml(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?,
        (None, None) => bail!("sweep needs --preset ({}) or --config", PRESETS.join(", ")),
    };
    let configs = configs.into_iter().map(|c| g.adjust(c)).collect::<Result<Vec<_>>>()?;
    let result = run_sweep(&configs, g.jobs)?;
    write_records_csv(g.out("sweep_rows.csv")?, &result.rows)?;
    write_records_csv(g.out("sweep_aggregate.csv")?, &result.aggregate)?;
    write_json(g.out("sweep.json")?, &result)?;
    println!("{}", serde_json::to_string(&result.aggregate)?);
    Ok(())
}

fn counterexample(g: &Global, samples: usize) -> Result<()> {
    let mut rng = stream_rng(g.seed.unwrap_or(0), Stream::Data);
    let report = counterexample_report(samples, &mut rng)?;
    write_json(g.out("counterexample.json")?, &report)?;
    println!("{}", json!({ "sparsity_gap": report.sparsity_gap, "min_abs_jacobian_entry": report.min_abs_jacobian_entry, "mcc": report.mcc }));
    Ok(())
}

fn discover_cmd(g: &Global, model: &Path, data: &Path, alpha: f64) -> Result<()> {
    let (ds, manifest) = read_dataset(data)?;
    let model: EncoderDecoder = read_json(model)?;
    let r = discover(&model, &manifest.scm.dag, &ds, alpha)?;
    write_cpdag_csv(g.out("cpdag_truth.csv")?, &r.truth)?;
    write_cpdag_csv(g.out("cpdag_true_z.csv")?, &r.from_true_z)?;
    write_cpdag_csv(g.out("cpdag_learned_z.csv")?, &r.from_learned_z)?;
    let row = json!({ "seed": manifest.seed, "alpha": alpha, "shd_true_z": r.shd_true_z, "shd_learned_z": r.shd_learned_z, "delta": r.delta });
    write_json(g.out("shd.json")?, &row)?;
    println!("{row}");
    Ok(())
}

fn eps_sweep(g: &Global, lo: f64, hi: f64, points: usize) -> Result<()> {
    let cfg = g.experiment()?;
    let rows = epsilon_sweep(&cfg, &log_grid(lo, hi, points)?, g.jobs)?;
    write_records_csv(g.out("eps_sweep.csv")?, &rows)?;
    println!("{}", json!({ "rows": rows.len() }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData => gen_data(g),
        Command::Train { data, resume } => train(g, data, resume.as_deref()),
        Command::Eval { model, data, independent_test, test_rows } => eval(g, model, data, *independent_test, *test_rows),
        Command::Sweep { preset } => sweep(g, preset.as_deref()),
        Command::Counterexample { samples } => counterexample(g, *samples),
        Command::Discover { model, data, alpha } => discover_cmd(g, model, data, *alpha),
        Command::EpsSweep { lo, hi, points } => eps_sweep(g, *lo, *hi, *points),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<sparsecrl::Error>().map_or("error", |e| e.kind());
            eprintln!("{}", json!({ "error": { "kind": kind, "message": format!("{e:#}") } }));
            ExitCode::FAILURE
        }
    }
}
