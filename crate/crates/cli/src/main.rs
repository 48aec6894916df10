use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cvtn_core::checkpoint;
use cvtn_core::cte::CteFrame;
use cvtn_core::data::{lagged_sinusoids, load_csv, write_csv, MaskMode, Split, SplitScheme};
use cvtn_core::experiment::{run_experiment, ExperimentConfig, ExperimentSummary, ModelHyper};
use cvtn_core::trainer::{evaluate, AdamConfig, EvalOptions, TrainConfig};

/// Train and evaluate the two-stage forecaster over a grid of horizons and seeds.
///
/// Without a subcommand the flags below describe a training run.
#[derive(Parser, Debug)]
#[command(name = "cvtn", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the lagged two-variable sinusoid benchmark as CSV.
    Synth(SynthArgs),
    /// Score a saved checkpoint on one split of a dataset.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Splits {
    Ratio,
    EttMonths,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Frame {
    Normalized,
    Raw,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mask {
    Random,
    Contiguous,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// CSV with a header row and a leading timestamp column.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Splits::Ratio)]
    splits: Splits,
    /// Rows per day for `--splits ett-months` (24 hourly, 96 for 15-minute data).
    #[arg(long, default_value_t = 24)]
    steps_per_day: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 96)]
    lookback: usize,
    #[arg(long, value_delimiter = ',', default_value = "96,192,336,720")]
    horizons: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    epochs_stage1: usize,
    #[arg(long, default_value_t = 10)]
    epochs_stage2: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers_cve: usize,
    #[arg(long, default_value_t = 2)]
    layers_cte: usize,
    #[arg(long, default_value_t = 8)]
    growth_r: usize,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    /// Drop the linear trend branch of the CVE.
    #[arg(long)]
    no_trend: bool,
    #[arg(long, value_enum, default_value_t = Frame::Normalized)]
    cte_frame: Frame,
    /// Fraction of history time steps zeroed at test time.
    #[arg(long, default_value_t = 0.0)]
    mask_fraction: f64,
    #[arg(long, value_enum, default_value_t = Mask::Random)]
    mask_mode: Mask,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seed: Vec<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Evaluate the test split after every epoch for the loss curves.
    #[arg(long)]
    track_test: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 12)]
    lag: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 0.0)]
    mask_fraction: f64,
    #[arg(long, value_enum, default_value_t = Mask::Random)]
    mask_mode: Mask,
    #[arg(long, default_value_t = 0)]
    mask_seed: u64,
    /// Score the cross-variable stage alone.
    #[arg(long)]
    cve_only: bool,
}

impl DataArgs {
    fn scheme(&self) -> SplitScheme {
        match self.splits {
            Splits::Ratio => SplitScheme::RATIO_DEFAULT,
            Splits::EttMonths => SplitScheme::EttMonths {
                train_months: 12,
                val_months: 4,
                test_months: 4,
                steps_per_day: self.steps_per_day,
            },
        }
    }

    fn path(&self) -> Result<&PathBuf> {
        self.data.as_ref().context("--data is required")
    }
}

fn mask_mode(m: Mask) -> MaskMode {
    match m {
        Mask::Random => MaskMode::Random,
        Mask::Contiguous => MaskMode::Contiguous,
    }
}

fn experiment_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new(a.data.path()?, &a.out);
    cfg.splits = a.data.scheme();
    cfg.lookback = a.lookback;
    cfg.horizons = a.horizons.clone();
    cfg.seeds = a.seed.clone();
    cfg.mask_fraction = a.mask_fraction;
    cfg.mask_mode = mask_mode(a.mask_mode);
    cfg.model = ModelHyper {
        cve_layers: a.layers_cve,
        heads: a.heads,
        dropout: a.dropout,
        trend: !a.no_trend,
        cte_layers: a.layers_cte,
        growth: a.growth_r,
        kernel: a.kernel,
        cte_frame: match a.cte_frame {
            Frame::Normalized => CteFrame::Normalized,
            Frame::Raw => CteFrame::Raw,
        },
        ..ModelHyper::default()
    };
    cfg.train = TrainConfig {
        epochs_stage1: a.epochs_stage1,
        epochs_stage2: a.epochs_stage2,
        patience: a.patience,
        batch_size: a.batch,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        seed: 0,
        track_test: a.track_test,
    };
    Ok(cfg)
}

fn print_summary(s: &ExperimentSummary) {
    println!("horizon  seeds  mse               mae");
    for r in &s.rows {
        println!(
            "{:<8} {:<6} {:.4} ± {:.4}   {:.4} ± {:.4}",
            r.horizon, r.seeds, r.mse_mean, r.mse_std, r.mae_mean, r.mae_std
        );
    }
    if let (Some(mse), Some(mae)) = (s.mse, s.mae) {
        println!("{:<15} {:<17.4} {:.4}", "Avg", mse.avg, mae.avg);
        println!("{:<15} {:<17.4} {:.4}", "Me", mse.median, mae.median);
    }
    for m in s.masking.iter().filter(|m| m.cve_only) {
        println!(
            "masking O={} seed={}: CVE-only mse {:.4} -> {:.4} (x{:.3})",
            m.horizon,
            m.seed,
            m.mse_unmasked,
            m.mse_masked,
            m.factor()
        );
    }
    for f in &s.failures {
        println!("FAILED horizon={} seed={}: {}", f.horizon, f.seed, f.message);
    }
}

fn run(a: &RunArgs) -> Result<ExitCode> {
    let cfg = experiment_config(a)?;
    let summary = run_experiment(&cfg)?;
    print_summary(&summary);
    println!("artifacts in {}", cfg.out.display());
    Ok(if summary.all_completed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn synth(a: &SynthArgs) -> Result<ExitCode> {
    let ds = lagged_sinusoids(a.steps, a.lag, a.noise, a.seed);
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_csv(&ds, file)?;
    println!("wrote {} rows x {} variables to {}", ds.rows(), ds.n_vars(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let model = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ds = load_csv(a.data.path()?)?.split(a.data.scheme())?.zscore()?;
    let cfg = model.config();
    if ds.n_vars() != cfg.n_vars {
        bail!("checkpoint expects {} variables, data has {}", cfg.n_vars, ds.n_vars());
    }
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let windows = ds.windows(cfg.lookback, cfg.horizon, split)?;
    let opts = EvalOptions {
        mask_fraction: a.mask_fraction,
        mask_mode: mask_mode(a.mask_mode),
        mask_seed: a.mask_seed,
        cve_only: a.cve_only,
        ..EvalOptions::default()
    };
    let m = evaluate(&model, &windows, &opts)?;
    println!("split={split} windows={} mse={} mae={}", windows.len(), m.mse, m.mae);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Some(Command::Synth(a)) => synth(a),
        Some(Command::Eval(a)) => eval(a),
        None => run(&cli.run),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
