mod dataset;
mod eval;
mod infer;
mod overrides;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dcdeblur::suite::{self, Scope};

#[derive(Parser, Debug)]
#[command(
    name = "dcdeblur",
    version,
    about = "Conditional GAN deblurring with a dark channel loss"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a paired blur/sharp dataset with a manifest.
    DatasetGen(dataset::Args),
    /// Train a generator and discriminator pair.
    Train(train::Args),
    /// Restore one image or every image in a directory.
    Deblur(infer::Args),
    /// Score checkpoints on a paired dataset and print a comparison table.
    Eval(eval::Args),
    /// Compare reverse-mode gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(clap::Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "op")]
    scope: ScopeArg,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds per case.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Replace every case's tolerance.
    #[arg(long)]
    tolerance: Option<dcdeblur::Real>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    Op,
    Network,
    Loss,
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let scope = match args.scope {
        ScopeArg::Op => Scope::Op,
        ScopeArg::Network => Scope::Network,
        ScopeArg::Loss => Scope::Loss,
    };
    let mut results = suite::run(scope, args.seed, args.seeds)?;
    if let Some(t) = args.tolerance {
        results.iter_mut().for_each(|r| r.tolerance = t);
    }
    print!("{}", suite::format_results(&results));
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| {
            format!(
                "{} (seed {}): rel. error {:.3e} > {:.0e} at input {} index {}",
                r.name,
                r.seed,
                r.report.max_rel_error,
                r.tolerance,
                r.report.worst_input,
                r.report.worst_index
            )
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(dcdeblur::Error::Gradcheck(failed.join("; ")).into())
    }
}

/// 1 for usage and config problems, 2 for data, 3 for numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    use dcdeblur::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Config(_) | E::InvalidConfig(_) | E::State(_)) => 1,
        Some(E::Numerical(_) | E::Gradcheck(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::DatasetGen(a) => dataset::run(a),
        Command::Train(a) => train::run(a),
        Command::Deblur(a) => infer::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn ensure_dir(path: &PathBuf) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| dcdeblur::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(())
}
