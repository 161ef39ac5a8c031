//! Configuration-driven experiment runner for `rbsde-control`.
//!
//! A [`RunConfig`] names a builtin problem, a list of grids and the suites
//! to run. [`run`] executes the suites in order and writes `report.json`
//! plus CSV fields into the output directory.

pub mod config;
pub mod report;
mod suites;

use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{ConfigParseError, GridConfig, RunConfig, Suite};
pub use report::{report_diff, Check, DiffError, ExperimentReport, Recorder, Relation, SuiteRecord};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigParseError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize)]
struct DigestInputs<'a> {
    suite: &'a str,
    config: &'a RunConfig,
}

fn digest(suite: Suite, config: &RunConfig) -> String {
    let mut inputs = config.clone();
    inputs.output_dir = Default::default();
    let bytes = serde_json::to_vec(&DigestInputs {
        suite: suite.name(),
        config: &inputs,
    })
    .expect("config serializes");
    format!("{:x}", Sha256::digest(bytes))
}

/// Runs every suite in `config.suites` and writes the report and CSV files
/// into `config.output_dir`. Suite failures are recorded in the report.
pub fn run(config: &RunConfig, normalize_timestamps: bool) -> Result<ExperimentReport, RunError> {
    config.validate()?;
    let out = config.output_dir.as_path();
    let io = |source| RunError::Io {
        path: out.display().to_string(),
        source,
    };
    std::fs::create_dir_all(out).map_err(io)?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let cx = suites::Context {
        config,
        spec: config.spec()?,
        out,
    };
    let mut records = Vec::new();
    for &suite in &config.suites {
        let clock = Instant::now();
        let mut rec = Recorder::default();
        let outcome = suites::run_suite(suite, &cx, &mut rec);
        let mut problems: Vec<String> = outcome.err().into_iter().collect();
        problems.extend(rec.notes.iter().cloned());
        let error = (!problems.is_empty()).then(|| problems.join("; "));
        records.push(SuiteRecord {
            name: suite.name().to_string(),
            inputs_digest: digest(suite, config),
            passed: error.is_none() && rec.checks.iter().all(|c| c.passed),
            metrics: rec.metrics,
            checks: rec.checks,
            error,
            wall_time_s: clock.elapsed().as_secs_f64(),
        });
    }
    let mut report = ExperimentReport {
        problem: config.problem.clone(),
        seed: config.seed,
        started_unix_s: started,
        passed: records.iter().all(|r| r.passed),
        suites: records,
    };
    if normalize_timestamps {
        report.normalize_timestamps();
    }
    write_report(&report, &out.join("report.json"))?;
    Ok(report)
}

pub fn write_report(report: &ExperimentReport, path: &Path) -> Result<(), RunError> {
    std::fs::write(path, report.to_json() + "\n").map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_report(path: &Path) -> Result<ExperimentReport, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book {}
