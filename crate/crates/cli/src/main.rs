//! Pipeline driver: generate -> simulate -> train -> evaluate -> sweep,
//! from one config file with reproducible seeds.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime/data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

pub(crate) const EXIT_CONFIG: u8 = 2;
pub(crate) const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "ppct",
    version,
    about = "Conversion-model training under privacy-preserving conversion tracking, on synthetic logs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic impression log (log.csv + manifest).
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the reporting channel over log.csv: token assignment, delayed
    /// callbacks, windowed aggregation, suppression.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Group-token width in bits.
        #[arg(long)]
        bits: Option<u8>,
        /// Minimum report delay (hours).
        #[arg(long = "delay-min")]
        delay_min: Option<f64>,
        /// Maximum report delay (hours).
        #[arg(long = "delay-max")]
        delay_max: Option<f64>,
        /// Aggregation window width (hours).
        #[arg(long)]
        window: Option<f64>,
        /// Suppression threshold: groups with fewer clicks report zero.
        #[arg(long)]
        k: Option<u64>,
        /// Token policy: round_robin, hash_of_ad, or cohort.
        #[arg(long)]
        grouping: Option<String>,
    },
    /// Train a CVR model for one setting; writes model.txt and trace.csv.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Setting slug (non_ppct, android_only, android_ios_le13,
        /// opt_in_only, post_ranking_signals).
        #[arg(long, default_value = "non_ppct")]
        setting: String,
        /// Opt-in rate for the rate-dependent settings.
        #[arg(long, default_value_t = 0.0)]
        rate: f64,
    },
    /// Score a trained model on the held-out test set.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Model checkpoint to score.
        #[arg(long)]
        model: PathBuf,
        /// Opt-in rate used when regenerating the data.
        #[arg(long, default_value_t = 0.0)]
        rate: f64,
    },
    /// Run the full opt-in sweep; writes per-cell and aggregated CSVs.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Worker threads (0 = all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common } => commands::generate(&common),
        Command::Simulate {
            common,
            bits,
            delay_min,
            delay_max,
            window,
            k,
            grouping,
        } => commands::simulate(
            &common,
            commands::ProtocolOverrides {
                bits,
                delay_min,
                delay_max,
                window,
                k,
                grouping,
            },
        ),
        Command::Train {
            common,
            setting,
            rate,
        } => commands::train(&common, &setting, rate),
        Command::Evaluate {
            common,
            model,
            rate,
        } => commands::evaluate(&common, &model, rate),
        Command::Sweep { common, threads } => commands::sweep(&common, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
