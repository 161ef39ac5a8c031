use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rbsde_control::problem::BUILTIN_PROBLEMS;
use rbsde_control_cli::{read_report, report_diff, run, RunConfig};

/// Runs experiment suites on a builtin problem and writes a JSON report.
#[derive(Parser)]
#[command(name = "rbsde-control", version)]
struct Args {
    /// TOML run configuration.
    #[arg(long, required_unless_present_any = ["list_problems", "diff"])]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Seed, overriding `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the builtin problem names and exit.
    #[arg(long)]
    list_problems: bool,
    /// Zero all timestamps so reruns produce identical reports.
    #[arg(long)]
    normalize_timestamps: bool,
    /// Compare two reports instead of running.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    diff: Option<Vec<PathBuf>>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.list_problems {
        for name in BUILTIN_PROBLEMS {
            println!("{name}");
        }
        return ExitCode::SUCCESS;
    }
    if let Some(paths) = &args.diff {
        let reports = paths.iter().map(|p| read_report(p)).collect::<Result<Vec<_>, _>>();
        return match reports.map(|r| report_diff(&r[0], &r[1]).map_err(|e| e.to_string())) {
            Ok(Ok(diff)) => {
                print!("{diff}");
                ExitCode::SUCCESS
            }
            Ok(Err(e)) | Err(e) => {
                eprintln!("{e}");
                ExitCode::from(2)
            }
        };
    }
    let path = args.config.expect("clap enforces --config");
    let mut config = match RunConfig::load(&path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    if let Some(out) = args.output {
        config.output_dir = out;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    match run(&config, args.normalize_timestamps) {
        Ok(report) => {
            for s in &report.suites {
                let status = if s.passed { "PASS" } else { "FAIL" };
                println!("{status}  {} ({:.2}s)", s.name, s.wall_time_s);
                for c in s.checks.iter().filter(|c| !c.passed) {
                    println!("      {} = {:e} violates {:?} {:e}", c.metric, c.value, c.relation, c.tolerance);
                }
                if let Some(e) = &s.error {
                    println!("      error: {e}");
                }
            }
            println!("report: {}", config.output_dir.join("report.json").display());
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}
