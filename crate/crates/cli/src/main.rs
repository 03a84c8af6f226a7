use std::path::PathBuf;
use std::process::ExitCode;

use ccto_cli::{run_plan, run_report, run_tube, run_verify, Overrides};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(version, about = "Chance-constrained trajectory planning by set erosion")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Print nothing on success
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tube radius curve (CSV + SVG); --check adds a containment ensemble
    Tube {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        check: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Erode, transcribe and solve (plan.json + plan.svg)
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Monte Carlo check of a plan (mc.json, cost_curve.csv, ensemble.svg)
    Verify {
        #[arg(long)]
        scenario: PathBuf,
        /// Defaults to OUT/plan.json
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Cost-gap summary (report.json)
    Report {
        #[arg(long)]
        scenario: PathBuf,
        /// Defaults to OUT/plan.json
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Defaults to OUT/mc.json
        #[arg(long)]
        mc: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Tube {
            scenario,
            out,
            check,
            seed,
            trials,
        } => run_tube(
            scenario,
            out,
            Overrides {
                seed: *seed,
                trials: *trials,
            },
            *check,
        ),
        Command::Plan { scenario, out } => run_plan(scenario, out),
        Command::Verify {
            scenario,
            plan,
            out,
            seed,
            trials,
        } => {
            let plan = plan.clone().unwrap_or_else(|| out.join("plan.json"));
            run_verify(
                scenario,
                &plan,
                out,
                Overrides {
                    seed: *seed,
                    trials: *trials,
                },
            )
        }
        Command::Report { scenario, plan, mc, out } => {
            let plan = plan.clone().unwrap_or_else(|| out.join("plan.json"));
            let mc = mc.clone().unwrap_or_else(|| out.join("mc.json"));
            run_report(scenario, &plan, &mc, out)
        }
    };
    match result {
        Ok(line) => {
            if !cli.quiet {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
