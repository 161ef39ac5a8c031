//! Experiment reports and their comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `value ≤ tolerance`
    AtMost,
    /// `value ≥ tolerance`
    AtLeast,
}

/// A metric compared against its declared tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub metric: String,
    pub value: f64,
    pub relation: Relation,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRecord {
    pub name: String,
    /// SHA-256 of the inputs the suite saw.
    pub inputs_digest: String,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    /// Set when the suite stopped early; the suite then fails.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub passed: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub problem: String,
    pub seed: u64,
    /// Seconds since the Unix epoch; 0 when normalized.
    pub started_unix_s: u64,
    pub suites: Vec<SuiteRecord>,
    pub passed: bool,
}

impl ExperimentReport {
    /// Zeroes every clock reading so that reruns compare byte for byte.
    pub fn normalize_timestamps(&mut self) {
        self.started_unix_s = 0;
        for s in &mut self.suites {
            s.wall_time_s = 0.0;
        }
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteRecord> {
        self.suites.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report holds only finite numbers")
    }
}

/// Collects metrics and checks while a suite runs.
#[derive(Debug, Default)]
pub struct Recorder {
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl Recorder {
    pub fn metric(&mut self, key: impl Into<String>, value: f64) {
        let key = key.into();
        if value.is_finite() {
            self.metrics.insert(key, value);
        } else {
            self.notes.push(format!("{key} is not finite"));
        }
    }

    pub fn check(&mut self, key: impl Into<String>, value: f64, relation: Relation, tolerance: f64) {
        let key = key.into();
        let passed = match relation {
            Relation::AtMost => value <= tolerance,
            Relation::AtLeast => value >= tolerance,
        };
        self.metric(key.clone(), value);
        self.checks.push(Check {
            metric: key,
            value: if value.is_finite() { value } else { f64::MAX },
            relation,
            tolerance,
            passed,
        });
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("suite keys differ: {left:?} vs {right:?}")]
    KeyMismatch { left: Vec<String>, right: Vec<String> },
}

fn show(v: Option<&f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"))
}

/// One line per metric whose value differs between `a` and `b`, with the
/// ratio `b / a` when both are nonzero. Identical reports give an empty
/// string. Timing fields are ignored.
pub fn report_diff(a: &ExperimentReport, b: &ExperimentReport) -> Result<String, DiffError> {
    let names = |r: &ExperimentReport| r.suites.iter().map(|s| s.name.clone()).collect::<Vec<_>>();
    if names(a) != names(b) {
        return Err(DiffError::KeyMismatch {
            left: names(a),
            right: names(b),
        });
    }
    let mut out = String::new();
    for (sa, sb) in a.suites.iter().zip(&b.suites) {
        let keys: BTreeSet<&String> = sa.metrics.keys().chain(sb.metrics.keys()).collect();
        for key in keys {
            let (va, vb) = (sa.metrics.get(key), sb.metrics.get(key));
            if va.map(|v| v.to_bits()) == vb.map(|v| v.to_bits()) {
                continue;
            }
            let _ = write!(out, "{}.{key}: {} -> {}", sa.name, show(va), show(vb));
            if let (Some(&x), Some(&y)) = (va, vb) {
                if x != 0.0 && y != 0.0 {
                    let _ = write!(out, " (x{:.3})", y / x);
                }
            }
            out.push('\n');
        }
        if sa.passed != sb.passed {
            let _ = writeln!(out, "{}.passed: {} -> {}", sa.name, sa.passed, sb.passed);
        }
    }
    Ok(out)
}
