mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use timegrad::{Error, ErrorClass};

use config::RunConfig;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format 1, csv schema 1)");

const AFTER_HELP: &str = "\
Configuration precedence: command-line flags > environment > config file > defaults.
Environment overrides use the prefix TIMEGRAD_ followed by SECTION_KEY,
e.g. TIMEGRAD_TRAIN_SEED=7 sets train.seed.

Exit codes: 0 ok, 2 CONFIG_ERROR, 3 DATA_ERROR, 4 NUMERIC_ERROR.
Errors are reported as a single stderr line `CLASS: message`.";

#[derive(Parser)]
#[command(name = "timegrad", version = VERSION, about = "Probabilistic multivariate forecasting with autoregressive denoising diffusion", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `section.key = value` configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Dataset file (data.path).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset format, csv_wide or jsonlines (data.format).
    #[arg(long)]
    format: Option<String>,
    /// Output directory (output.dir).
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write model.ckpt and train_log.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training seed (train.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample forecasts; writes samples.csv, quantiles.csv and plot.json.
    Forecast {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load (default: <output dir>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Trajectories per window (forecast.samples).
        #[arg(long)]
        samples: Option<usize>,
        /// Sampling seed (forecast.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a samples CSV against the dataset; writes metrics.json and
    /// metrics_per_entity.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Samples CSV (default: <output dir>/samples.csv).
        #[arg(long)]
        forecast: Option<PathBuf>,
    },
    /// Train and score once per diffusion length; writes ablation.csv.
    AblateN {
        #[command(flatten)]
        common: Common,
        /// Comma-separated lengths (ablation.n_list).
        #[arg(long)]
        n_list: Option<String>,
        /// Runs per length (ablation.repeats).
        #[arg(long)]
        repeats: Option<usize>,
        /// Run lengths on separate threads (ablation.parallel).
        #[arg(long)]
        parallel: bool,
        /// Base training seed (train.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the noise schedule as `n,beta,alpha_bar,tilde_beta`.
    Schedule {
        #[command(flatten)]
        common: Common,
        /// Diffusion length (model.diffusion_steps).
        #[arg(long)]
        steps: Option<usize>,
        /// First variance (model.beta_1).
        #[arg(long)]
        beta_1: Option<f64>,
        /// Last variance (model.beta_n).
        #[arg(long)]
        beta_n: Option<f64>,
    },
    /// Write a synthetic dataset (VAR(1) pair or scalar AR(1)).
    Generate {
        #[command(flatten)]
        common: Common,
        /// var or ar1 (generate.kind).
        #[arg(long)]
        kind: Option<String>,
        /// Rows (generate.length).
        #[arg(long)]
        length: Option<usize>,
        /// Seed (train.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn push(flags: &mut Vec<(String, String)>, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        flags.push((key.to_string(), v.to_string()));
    }
}

fn resolve(common: &Common, mut extra: Vec<(String, String)>) -> timegrad::Result<RunConfig> {
    let mut flags = Vec::new();
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects SECTION.KEY=VALUE, got {s:?}")))?;
        flags.push((k.trim().to_string(), v.trim().to_string()));
    }
    push(&mut flags, "data.path", common.data.as_ref().map(|p| p.display()));
    push(&mut flags, "data.format", common.format.as_ref());
    push(
        &mut flags,
        "output.dir",
        common.output_dir.as_ref().map(|p| p.display()),
    );
    // dedicated flags win over --set
    flags.append(&mut extra);
    RunConfig::resolve(common.config.as_deref(), std::env::vars(), &flags)
}

fn print_paths(paths: Vec<PathBuf>) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> timegrad::Result<()> {
    let mut extra = Vec::new();
    match cli.command {
        Command::Train { common, seed } => {
            push(&mut extra, "train.seed", seed);
            print_paths(commands::cmd_train(&resolve(&common, extra)?)?);
        }
        Command::Forecast {
            common,
            checkpoint,
            samples,
            seed,
        } => {
            push(&mut extra, "forecast.samples", samples);
            push(&mut extra, "forecast.seed", seed);
            let cfg = resolve(&common, extra)?;
            print_paths(commands::cmd_forecast(&cfg, checkpoint.as_deref())?);
        }
        Command::Evaluate { common, forecast } => {
            let cfg = resolve(&common, extra)?;
            print_paths(commands::cmd_evaluate(&cfg, forecast.as_deref())?);
        }
        Command::AblateN {
            common,
            n_list,
            repeats,
            parallel,
            seed,
        } => {
            push(&mut extra, "ablation.n_list", n_list);
            push(&mut extra, "ablation.repeats", repeats);
            push(&mut extra, "train.seed", seed);
            if parallel {
                push(&mut extra, "ablation.parallel", Some(true));
            }
            print_paths(commands::cmd_ablate_n(&resolve(&common, extra)?)?);
        }
        Command::Schedule {
            common,
            steps,
            beta_1,
            beta_n,
        } => {
            push(&mut extra, "model.diffusion_steps", steps);
            push(&mut extra, "model.beta_1", beta_1);
            push(&mut extra, "model.beta_n", beta_n);
            print!("{}", commands::cmd_schedule(&resolve(&common, extra)?)?);
        }
        Command::Generate {
            common,
            kind,
            length,
            seed,
        } => {
            push(&mut extra, "generate.kind", kind);
            push(&mut extra, "generate.length", length);
            push(&mut extra, "train.seed", seed);
            print_paths(commands::cmd_generate(&resolve(&common, extra)?)?);
        }
    }
    Ok(())
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!(
                "{}: {}",
                ErrorClass::Config.as_str(),
                one_line(first.trim_start_matches("error: "))
            );
            return ExitCode::from(exit_code(ErrorClass::Config));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            eprintln!("{}: {}", class.as_str(), one_line(&e.to_string()));
            ExitCode::from(exit_code(class))
        }
    }
}
