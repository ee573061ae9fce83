//! `star-mec-sim`: training, evaluation, baselines and comparison tables.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use run::Failure;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Es,
    Ms,
    Ts,
}

#[derive(Debug, Parser)]
#[command(name = "star-mec-sim", version, about = "Rotatable STAR-RIS assisted MEC simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Flat JSON configuration; omitted keys keep their defaults.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    protocol: ProtocolArg,
    /// Comma separated seeds or inclusive ranges, e.g. `2020..2024` or `1,5,7-9`.
    #[arg(long, default_value = "2020..2024")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
    /// Seeds run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the rotatable STAR-RIS policy and evaluate it.
    Train {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Evaluate checkpoints written by `train`.
    Eval {
        #[command(flatten)]
        args: RunArgs,
        /// Directory holding `checkpoint_<seed>.json`; defaults to `--out`.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Run one of the benchmark schemes.
    Baseline {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long)]
        baseline: String,
    },
    /// Summarise `results.csv` files into `summary.csv`.
    Compare {
        /// Result files or directories containing `results.csv`.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn protocol(p: ProtocolArg) -> star_mec_core::Protocol {
    match p {
        ProtocolArg::Es => star_mec_core::Protocol::Es,
        ProtocolArg::Ms => star_mec_core::Protocol::Ms,
        ProtocolArg::Ts => star_mec_core::Protocol::Ts,
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { args } => run::train(&run::Job::load(&args, protocol(args.protocol))?),
        Command::Eval { args, from } => {
            let job = run::Job::load(&args, protocol(args.protocol))?;
            let from = from.unwrap_or_else(|| args.out.clone());
            run::eval(&job, &from)
        }
        Command::Baseline { args, baseline } => {
            let scheme = run::parse_baseline(&baseline)?;
            run::baseline(&run::Job::load(&args, protocol(args.protocol))?, scheme)
        }
        Command::Compare { inputs, out } => run::compare(&inputs, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(run::EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
