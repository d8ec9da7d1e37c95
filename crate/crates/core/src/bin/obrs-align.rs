use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use obrs_align::commands::{self, ConfigSource};
use obrs_align::config::SEED_ENV;
use obrs_align::toy::Scheme;

#[derive(Parser)]
#[command(name = "obrs-align", version, about = "Budgeted rejection sampling and off-policy correction tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config file and the environment seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn source(&self) -> ConfigSource {
        ConfigSource {
            path: self.config.clone(),
            env_seed: std::env::var(SEED_ENV).ok(),
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Dirichlet acceptance and KL-reduction sweeps, written as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Also write the λ sweep here.
        #[arg(long)]
        lambda_out: Option<PathBuf>,
    },
    /// Check the budget solver against the brute-force optimum.
    Verify {
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.8")]
        budgets: Vec<f64>,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 1000)]
        perturbations: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Use the fixed 3-token pair.
        #[arg(long)]
        fixed_pair: bool,
    },
    /// Top-k normalizer accuracy on synthetic pairs or a trace.
    Zbench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,40")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        vocab_size: usize,
        #[arg(long, default_value_t = 20)]
        pairs: usize,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        /// Use the fixed 4-token pair.
        #[arg(long)]
        example: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the tabular toy task under one correction scheme.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        staleness: Option<usize>,
    },
    /// Masks, calibration and weights for a JSON-lines token trace.
    AnalyzeTrace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_json: PathBuf,
    },
}

fn run(cli: Cli) -> obrs_align::Result<String> {
    match cli.command {
        Command::Simulate { common, out, lambda_out } => commands::simulate(&commands::SimulateArgs {
            config: common.source(),
            out,
            lambda_out,
        }),
        Command::Verify {
            size,
            instances,
            budgets,
            tol,
            perturbations,
            seed,
            fixed_pair,
        } => {
            let resolved = commands::ConfigSource {
                path: None,
                env_seed: std::env::var(SEED_ENV).ok(),
                seed,
            }
            .resolve()?;
            commands::verify(&commands::VerifyArgs {
                size,
                instances,
                budgets,
                tol,
                perturbations,
                seed: resolved.seed,
                fixed_pair,
            })
        }
        Command::Zbench {
            common,
            trace,
            k,
            vocab_size,
            pairs,
            eta,
            example,
            out,
        } => commands::zbench(&commands::ZbenchArgs {
            config: common.source(),
            trace,
            ks: k,
            vocab_size,
            pairs,
            eta,
            example,
            out,
        }),
        Command::TrainToy {
            common,
            out,
            scheme,
            seeds,
            steps,
            staleness,
        } => commands::train_toy(&commands::TrainToyArgs {
            config: common.source(),
            out_dir: out,
            scheme,
            seeds,
            steps,
            staleness,
        })
        .map(|(report, _)| report),
        Command::AnalyzeTrace {
            common,
            trace,
            out_csv,
            out_json,
        } => commands::analyze_trace(&commands::AnalyzeArgs {
            config: common.source(),
            trace,
            out_csv,
            out_json,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
