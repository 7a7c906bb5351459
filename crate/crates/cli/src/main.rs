//! `bitcn`: train, evaluate and ablate BiTCN forecasters from a TOML config.

use std::path::PathBuf;
use std::process::ExitCode;

use bitcn_core::data::{SynthKind, SynthOptions};
use bitcn_core::experiment::{self, RunConfig, SourceKind};
use bitcn_core::Error;
use clap::{Args, Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "bitcn", version = bitcn_core::BUILD_VERSION, about = "Bidirectional TCN forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent seeds.
    #[arg(long)]
    threads: Option<usize>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted `section.key=value` override, applied after the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and report test metrics.
    Train(Common),
    /// Re-evaluate a checkpoint on the configured dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV dataset replacing the configured data source.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Forward module on/off × t(3)/Gaussian comparison.
    Ablate(Common),
    /// Learning-rate × batch-size grid search.
    Grid(Common),
    /// Write a synthetic dataset as CSV.
    Synth {
        /// seasonal, heavy_tailed or future_driven
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        series: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf), Failure> {
    if !common.config.exists() {
        return Err(Failure::Usage(format!("config file {} not found", common.config.display())));
    }
    let mut cfg = RunConfig::load(&common.config, &common.overrides)?;
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(s) = common.seed {
        cfg.train.seeds = vec![s];
    }
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, out) = load(&common)?;
            let summary = experiment::run_train(&cfg, &out)?;
            for r in &summary.records {
                println!(
                    "seed {}: best epoch {} val nll {:.6} ({} epochs)",
                    r.seed,
                    r.best_epoch,
                    r.best_val_nll,
                    r.epochs.len()
                );
            }
            if let Some(m) = summary.report.mean() {
                println!("test smape {:.5} nrmse {:.5} mq {:.5}", m.smape, m.nrmse, m.mq);
            }
            println!("wrote {}", out.display());
        }
        Command::Evaluate { common, checkpoint, data } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(path) = data {
                cfg.data.source = SourceKind::Csv;
                cfg.data.path = Some(path);
            }
            if !checkpoint.exists() {
                return Err(Error::Checkpoint {
                    path: checkpoint,
                    message: "no such file".into(),
                }
                .into());
            }
            let seed = common.seed.unwrap_or(cfg.train.seeds.first().copied().unwrap_or(0));
            let report = experiment::run_evaluate(&cfg, &checkpoint, seed, &out)?;
            let s = &report.per_seed[0];
            println!(
                "validation nll {:.9} test smape {:.5} nrmse {:.5} mq {:.5}",
                s.validation_nll, s.metrics.smape, s.metrics.nrmse, s.metrics.mq
            );
            println!("wrote {}", out.display());
        }
        Command::Ablate(common) => {
            let (cfg, out) = load(&common)?;
            let cells = experiment::run_ablation(&cfg, &out)?;
            print!("{}", experiment::ablation_table(&cells));
            for c in &cells {
                for (seed, msg) in &c.failures {
                    eprintln!("{} seed {seed}: {msg}", c.report.model);
                }
            }
        }
        Command::Grid(common) => {
            let (cfg, out) = load(&common)?;
            let result = experiment::run_grid(&cfg, &out)?;
            match result.best_cell() {
                Some(c) => println!("best learning_rate {} batch_size {}", c.learning_rate, c.batch_size),
                None => return Err(Error::numeric("grid search", "every cell failed").into()),
            }
        }
        Command::Synth {
            kind,
            out,
            seed,
            series,
            length,
        } => {
            let kind: SynthKind = kind.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            let mut opts = SynthOptions {
                seed,
                ..SynthOptions::default()
            };
            if let Some(n) = series {
                opts.n_series = n;
            }
            if let Some(l) = length {
                opts.length = l;
            }
            let table = experiment::run_synth(kind, &opts, &out)?;
            println!("wrote {} series to {}", table.series.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::NumericFailure { .. } => EXIT_NUMERIC,
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            })
        }
    }
}
