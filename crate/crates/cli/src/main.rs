use clap::{Args, Parser, Subcommand};
use iwavb_cli::commands::eval::cmd_eval;
use iwavb_cli::commands::fit::{cmd_fit, FitArgs};
use iwavb_cli::commands::heldout::{cmd_heldout, HeldoutArgs, Selection, DEFAULT_R_EVAL};
use iwavb_cli::commands::scree::{cmd_scree, ScreeArgs};
use iwavb_cli::commands::simulate::cmd_simulate;
use iwavb_cli::CliResult;
use std::path::PathBuf;
use std::process::ExitCode;

/// Graded response model estimation with variational and adversarial
/// estimators. Exit codes: 0 success, 2 input or configuration error,
/// 3 numerical failure.
#[derive(Parser)]
#[command(name = "iwavb", version)]
struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Override a config key, e.g. `--set kind=iwae --set adamw.weight_decay=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate response matrices and truth files from a design.
    Simulate {
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Replications generated in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Fit an estimator to a responses CSV.
    Fit {
        /// Config JSON (or a previous run manifest).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score fits against simulation truths.
    Eval {
        /// A fit.json, or a directory of replication subdirectories.
        #[arg(long)]
        fits: PathBuf,
        /// A truth.json, or the matching simulation output directory.
        #[arg(long)]
        truths: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Importance-sampled log-likelihood of withheld respondents.
    Heldout {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Share of respondents to withhold by seeded split.
        #[arg(long, conflicts_with = "ids")]
        fraction: Option<f64>,
        /// Explicit zero-based row ids.
        #[arg(long, value_delimiter = ',')]
        ids: Option<Vec<usize>>,
        #[arg(long, default_value_t = DEFAULT_R_EVAL)]
        r_eval: usize,
        /// Split and sampling seed; defaults to the fit's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Holdout log-likelihood across numbers of factors.
    Scree {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated factor counts.
        #[arg(long, value_delimiter = ',', required = true)]
        factors: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = DEFAULT_R_EVAL)]
        r_eval: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate {
            design,
            out,
            overrides,
            jobs,
        } => {
            let dirs = cmd_simulate(&design, &overrides.set, &out, jobs)?;
            println!("wrote {} replication(s) to {}", dirs.len(), out.display());
        }
        Command::Fit {
            config,
            data,
            out,
            overrides,
        } => {
            let r = cmd_fit(&FitArgs {
                config: config.as_deref(),
                overrides: &overrides.set,
                data: &data,
                out: &out,
                verbose: cli.verbose,
            })?;
            let avg = r.final_window_average.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "{}: {:?} after {} iterations, final window average {avg}",
                r.kind, r.status, r.iterations
            );
        }
        Command::Eval { fits, truths, out } => {
            print!("{}", cmd_eval(&fits, &truths, &out)?.table());
        }
        Command::Heldout {
            fit,
            data,
            fraction,
            ids,
            r_eval,
            seed,
            out,
        } => {
            let selection = match (fraction, ids) {
                (Some(f), _) => Some(Selection::Fraction(f)),
                (None, Some(ids)) => Some(Selection::Ids(ids)),
                (None, None) => None,
            };
            let r = cmd_heldout(&HeldoutArgs {
                fit: &fit,
                data: &data,
                selection,
                r_eval,
                seed,
                out: &out,
            })?;
            let note = if r.high_variance { " (R_eval = 1: high variance)" } else { "" };
            println!(
                "holdout n = {}: total {:.4}, mean {:.4} per respondent{note}",
                r.ids.len(),
                r.total,
                r.mean
            );
        }
        Command::Scree {
            data,
            factors,
            config,
            overrides,
            r_eval,
            out,
            jobs,
        } => {
            let r = cmd_scree(&ScreeArgs {
                data: &data,
                factors: &factors,
                config: config.as_deref(),
                overrides: &overrides.set,
                r_eval,
                out: &out,
                jobs,
            })?;
            for p in &r.points {
                println!("P={} heldout_loglik={:.4}", p.n_factors, p.heldout_loglik.unwrap_or(f64::NAN));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
