mod commands;
mod specs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adfa_snn::config::DATA_DIR_ENV;

/// Train and analyse spiking networks with BP, FA, DFA and augmented DFA.
#[derive(Parser, Debug)]
#[command(name = "adfa", version)]
pub struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Experiment config file.
    #[arg(long, value_name = "FILE", conflicts_with = "preset")]
    pub config: Option<PathBuf>,

    /// Built-in preset (desk or paper). Defaults to desk.
    #[arg(long)]
    pub preset: Option<String>,

    /// Override a config value, e.g. `--set lif.dt=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// bp, fa, dfa or adfa.
    #[arg(long)]
    pub mechanism: Option<String>,

    /// Backward function family: surrogate, opto, gaussian or prfs.
    #[arg(long)]
    pub backward: Option<String>,

    /// Opto or PRFS frequency.
    #[arg(long)]
    pub omega: Option<f64>,

    /// Opto phase.
    #[arg(long)]
    pub theta: Option<f64>,

    /// Gaussian center.
    #[arg(long)]
    pub b: Option<f64>,

    /// Gaussian width.
    #[arg(long)]
    pub c: Option<f64>,

    /// Seed of a PRFS backward function.
    #[arg(long)]
    pub prfs_seed: Option<u64>,

    /// Allow a non-surrogate backward function with BP, FA or DFA.
    #[arg(long)]
    pub allow_g_override: bool,

    /// Directory with the IDX dataset files.
    #[arg(long, env = DATA_DIR_ENV, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,

    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads for training.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Train a network and write per-epoch accuracy.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a trained network on the test split.
    Eval {
        /// Directory written by `train`.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long, env = DATA_DIR_ENV, value_name = "DIR")]
        data_dir: Option<PathBuf>,
    },
    /// Evolve PRFS backward functions with a genetic algorithm.
    Ga {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the grid in the `[sweep]` config section.
    Sweep {
        /// Extra axis, e.g. `--axis lif.dt=0.25,0.5,1`. Repeatable.
        #[arg(long, value_name = "PATH=V1,V2,..")]
        axis: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Histogram of η for random PRFS against the surrogate derivative.
    EtaHist {
        /// Number of PRFS to draw.
        #[arg(long)]
        samples: Option<usize>,
        /// Histogram bin width.
        #[arg(long, default_value_t = 0.05)]
        width: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train PRFS drawn from each η bin with aDFA and BP.
    EtaBins {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Accuracy and η as the Gaussian width or Opto frequency moves by decades.
    WidthScan {
        /// gaussian or opto.
        #[arg(long)]
        family: String,
        #[arg(long, default_value_t = -2, allow_hyphen_values = true)]
        from: i32,
        #[arg(long, default_value_t = 2, allow_hyphen_values = true)]
        to: i32,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print η between two backward functions.
    Corr {
        /// e.g. `surrogate`, `opto:omega=0.1,theta=150`, `gaussian:b=0.4,c=13`,
        /// `prfs:seed=3,omega=0.01` or a TOML file.
        #[arg(value_name = "G")]
        first: String,
        #[arg(value_name = "REFERENCE")]
        second: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Repeat a run from its manifest.
    Rerun {
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Where to write the new outputs. Defaults to `<original>-rerun`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, env = DATA_DIR_ENV, value_name = "DIR")]
        data_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
