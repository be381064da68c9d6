use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use betamap::cli::{self, CliError, FieldFormat, Invocation};

#[derive(Parser)]
#[command(name = "betamap", version, about = "Map the deformability of a surface by poking it")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explore a scenario and export the deformability field.
    Run(Common),
    /// Estimate β for each configured level on a uniform surface.
    BetaStudy(Common),
    /// Compare candidate cluster sizes against a simulated truth.
    ClusterStudy(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `explorer.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Encoding of exported fields.
    #[arg(long, value_enum, default_value_t = FieldFormat::Csv)]
    format: FieldFormat,
}

impl From<Common> for Invocation {
    fn from(c: Common) -> Self {
        Invocation {
            config: c.config,
            out: c.out,
            seed: c.seed,
            format: c.format,
        }
    }
}

fn execute(command: Command) -> Result<String, CliError> {
    match command {
        Command::Run(c) => {
            let r = cli::cmd_run(&c.into())?;
            Ok(format!(
                "{}: {} interactions ({:?}), accuracy {:.3}, {} region(s), max variance {:.4}",
                r.scenario, r.interaction_count, r.termination, r.segmentation_accuracy, r.regions_found, r.max_variance
            ))
        }
        Command::BetaStudy(c) => {
            let r = cli::cmd_beta_study(&c.into())?;
            let mut lines: Vec<String> = r
                .rows
                .iter()
                .map(|row| format!("trial {} true {:.2} estimate {:.2}", row.trial, row.true_beta, row.beta_hat))
                .collect();
            lines.push(format!(
                "increasing in every trial: {}, within one step: {:.0}%",
                r.increasing_in_every_trial,
                100.0 * r.within_one_step
            ));
            Ok(lines.join("\n"))
        }
        Command::ClusterStudy(c) => {
            let r = cli::cmd_cluster_study(&c.into())?;
            let mut lines: Vec<String> = r
                .rows
                .iter()
                .map(|row| format!("cluster {} residual {:.6} estimate {:.2}", row.cluster_size, row.residual, row.beta_hat))
                .collect();
            lines.push(format!("best cluster size: {}", r.best_cluster_size));
            Ok(lines.join("\n"))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
