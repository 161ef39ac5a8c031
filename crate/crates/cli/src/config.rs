//! Run configuration: a flat TOML document.
//!
//! ```toml
//! problem = "american_put"
//! params = { r = 0.05 }              # optional, builtin defaults otherwise
//! grids = [{ nt = 100, nx = 200 }, { nt = 200, nx = 400, x_lo = 20, x_hi = 300 }]
//! control_grid_count = 21            # optional
//! penalty_ladder = [1, 4, 16, 64, 256]  # optional
//! suites = ["oracle", "invariants"]
//! seed = 7                           # optional, default 0
//! output_dir = "out"                 # optional, default "report"
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rbsde_control::lattice::{Lattice, LatticeGrid};
use rbsde_control::problem::{builtin_problem, ProblemSpec};
use serde::{Deserialize, Serialize};

/// Experiment suites, run in the order listed in the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Oracle,
    Invariants,
    Penalization,
    Dpp,
    Regularity,
    Bruteforce,
    Stability,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Oracle,
        Suite::Invariants,
        Suite::Penalization,
        Suite::Dpp,
        Suite::Regularity,
        Suite::Bruteforce,
        Suite::Stability,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Oracle => "oracle",
            Suite::Invariants => "invariants",
            Suite::Penalization => "penalization",
            Suite::Dpp => "dpp",
            Suite::Regularity => "regularity",
            Suite::Bruteforce => "bruteforce",
            Suite::Stability => "stability",
        }
    }
}

/// `Nt` time steps and `Nx` space intervals; the domain defaults to the
/// problem's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nt: usize,
    pub nx: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_hi: Option<f64>,
}

impl GridConfig {
    pub fn domain(&self, spec: &ProblemSpec) -> (f64, f64) {
        (self.x_lo.unwrap_or(spec.domain.0), self.x_hi.unwrap_or(spec.domain.1))
    }

    pub fn lattice_grid(&self, spec: &ProblemSpec) -> LatticeGrid {
        let (lo, hi) = self.domain(spec);
        LatticeGrid::new(0.0, spec.horizon, self.nt, lo, hi, self.nx)
    }
}

fn default_ladder() -> Vec<f64> {
    (0..=8).map(|k| f64::from(1u32 << k)).collect()
}

fn default_output() -> PathBuf {
    PathBuf::from("report")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub grids: Vec<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_grid_count: Option<usize>,
    #[serde(default = "default_ladder")]
    pub penalty_ladder: Vec<f64>,
    pub suites: Vec<Suite>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

/// A config that could not be read, parsed or validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigParseError {
    pub message: String,
    /// 1-based line and column, when the error points into the document.
    pub location: Option<(usize, usize)>,
}

impl ConfigParseError {
    fn invalid(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            location: None,
        }
    }
}

impl fmt::Display for ConfigParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.location {
            Some((line, col)) => write!(f, "config error at line {line}, column {col}: {}", self.message),
            None => write!(f, "config error: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigParseError {}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn parse(text: &str) -> Result<Self, ConfigParseError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| ConfigParseError {
            message: e.message().to_string(),
            location: e.span().map(|s| line_col(text, s.start)),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigParseError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigParseError::invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The problem with the configured control grid size applied.
    pub fn spec(&self) -> Result<ProblemSpec, ConfigParseError> {
        let spec = builtin_problem(&self.problem, &self.params).map_err(|e| ConfigParseError::invalid(e.to_string()))?;
        Ok(match self.control_grid_count {
            Some(count) => spec.with_control_count(count),
            None => spec,
        })
    }

    /// Checks everything that can fail before a suite is dispatched,
    /// including building a lattice on every grid.
    pub fn validate(&self) -> Result<(), ConfigParseError> {
        if self.suites.is_empty() {
            return Err(ConfigParseError::invalid("`suites` must name at least one suite"));
        }
        if self.grids.is_empty() {
            return Err(ConfigParseError::invalid("`grids` must contain at least one grid"));
        }
        if let Some(n) = self.penalty_ladder.iter().find(|n| !(n.is_finite() && **n >= 0.0)) {
            return Err(ConfigParseError::invalid(format!("penalty {n} must be finite and non-negative")));
        }
        if self.control_grid_count.is_some_and(|c| c < 2) {
            return Err(ConfigParseError::invalid("`control_grid_count` must be at least 2"));
        }
        let spec = self.spec()?;
        for (k, grid) in self.grids.iter().enumerate() {
            Lattice::build(&spec, grid.lattice_grid(&spec))
                .map_err(|e| ConfigParseError::invalid(format!("grid {k}: {e}")))?;
        }
        Ok(())
    }
}
