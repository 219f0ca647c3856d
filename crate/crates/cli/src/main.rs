//! `assocmem`: sweeps, theory tables, spectra, Hebbian statistics, score
//! histograms, finite-size fits and single training runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use assocmem::Precision;
use config::{section_help, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "assocmem", version, about = "Storage capacity of linear associative memories")]
struct Cli {
    /// TOML configuration file (see each subcommand's --help for its keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: ./out/<subcommand>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides the seed of every config section.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Arithmetic precision for training.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Accuracy-versus-load sweep; writes sweep.csv, journal.csv, thresholds.csv, manifest.json.
    Sweep {
        /// Re-run the sweep recorded in a manifest instead of the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Capacity integral, q*(alpha), capacity extrapolation and G bounds.
    Theory,
    /// Singular values of a model with the capacity and initialization curves.
    Spectrum,
    /// Hebbian score statistics and the heuristic success probability.
    Hebbian,
    /// Target / non-target score pools of a trained or Hebbian model.
    Hist,
    /// Finite-size fit of thresholds against ln ln p.
    Fss,
    /// Train one instance; writes the trajectory, report and model.
    Train,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Sweep { .. } => "sweep",
            Command::Theory => "theory",
            Command::Spectrum => "spectrum",
            Command::Hebbian => "hebbian",
            Command::Hist => "hist",
            Command::Fss => "fss",
            Command::Train => "train",
        }
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn exit_code(err: &assocmem::Error) -> u8 {
    use assocmem::Error::*;
    match err {
        InvalidArgument(_) | DimensionMismatch(_) | OutOfRange { .. } => EXIT_CONFIG,
        Io(_) | Serde(_) | Csv(_) => EXIT_IO,
        Numeric { .. } | ThresholdOutOfRange(_) => EXIT_NUMERIC,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let mut cmd = Cli::command();
    for name in ["sweep", "theory", "spectrum", "hebbian", "hist", "fss", "train"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_long_help(section_help(name)));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };

    let mut config = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        },
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        config.master_seed = cli.seed;
    }
    if cli.precision.is_some() {
        config.precision = cli.precision;
    }
    config.apply_overrides();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }

    let out = cli
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cli.command.name()));

    let result = match &cli.command {
        Command::Sweep { manifest } => commands::sweep(&config, &out, manifest.as_deref()),
        Command::Theory => commands::theory(&config, &out),
        Command::Spectrum => commands::spectrum(&config, &out),
        Command::Hebbian => commands::hebbian(&config, &out),
        Command::Hist => commands::hist(&config, &out),
        Command::Fss => commands::fss(&config, &out),
        Command::Train => commands::train(&config, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
