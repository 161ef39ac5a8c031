//! Reflected backward equations with one lower barrier.
//!
//! A solution is a triple `(Y, Z, K)` with `Y ≥ S`, `K` nondecreasing from
//! zero, and `K` increasing only while `Y` sits on the barrier. Three
//! solvers produce it:
//!
//! * [`solve_reflected_lattice`]: backward induction on a [`Lattice`] with
//!   projection onto `{Y ≥ S}` after each driver step;
//! * [`solve_penalized_lattice`]: the same induction with the barrier
//!   replaced by a penalty `n (y − h)⁻` in the driver;
//! * [`solve_rbsde_mc`]: regression Monte Carlo on simulated paths.
//!
//! [`Lattice`]: crate::lattice::Lattice

mod estimates;
mod lattice_solver;
mod mc;

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

pub use estimates::{
    apriori_sides, comparison_check, stability_sides, sup_abs_gap, PathSample, StabilitySides,
};
pub use lattice_solver::{
    solve_bsde_lattice, solve_penalized_lattice, solve_reflected_lattice, solve_value_lattice,
    LatticeControl, PolicyTable,
};
pub use mc::solve_rbsde_mc;

use crate::lattice::LatticeError;

#[derive(Debug, Error)]
pub enum RbsdeError {
    #[error("terminal value {terminal} is below the obstacle {obstacle} at column {column}")]
    TerminalObstacleConflict {
        column: usize,
        terminal: f64,
        obstacle: f64,
    },
    #[error("driver step is not finite at step {step}, column {column}")]
    NonFiniteDriver { step: usize, column: usize },
    #[error("regression design is singular at step {step}: {reason}")]
    SingularRegression { step: usize, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
}

/// What a column of the solution arrays stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One column per lattice node.
    Lattice,
    /// One column per simulated path.
    Paths,
}

/// Discrete `(Y, Z, K)` on a time grid.
///
/// All arrays are row-major over `(time index, column)`. `dk[i][c]` is the
/// push applied at step `i`, i.e. `K_{i+1} − K_i` along whatever path
/// occupies column `c` at time `i`; on a lattice the cumulative `K` is a path
/// quantity, see [`RbsdeSolution::cumulative_k`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RbsdeSolution {
    pub layout: Layout,
    pub times: Vec<f64>,
    /// Node coordinates in lattice layout, empty for paths.
    pub x: Vec<f64>,
    pub columns: usize,
    pub noise_dim: usize,
    pub y: Vec<f64>,
    /// `[time][column][d]`
    pub z: Vec<f64>,
    pub dk: Vec<f64>,
    /// Barrier values `S = h(t_i, ·)`.
    pub obstacle: Vec<f64>,
    /// Control index used at each lattice node; empty for paths.
    pub controls: Vec<usize>,
}

impl RbsdeSolution {
    pub fn rows(&self) -> usize {
        self.times.len()
    }

    pub fn y_at(&self, i: usize, c: usize) -> f64 {
        self.y[i * self.columns + c]
    }

    pub fn y_row(&self, i: usize) -> &[f64] {
        &self.y[i * self.columns..(i + 1) * self.columns]
    }

    pub fn z_at(&self, i: usize, c: usize) -> &[f64] {
        let d = self.noise_dim;
        let base = (i * self.columns + c) * d;
        &self.z[base..base + d]
    }

    pub fn dk_at(&self, i: usize, c: usize) -> f64 {
        self.dk[i * self.columns + c]
    }

    pub fn obstacle_at(&self, i: usize, c: usize) -> f64 {
        self.obstacle[i * self.columns + c]
    }

    /// `ξ`, the last row of `Y`.
    pub fn terminal(&self) -> &[f64] {
        self.y_row(self.rows() - 1)
    }

    /// `Σ (Y − S) ΔK` over the whole grid.
    pub fn skorokhod_sum(&self) -> f64 {
        self.y
            .iter()
            .zip(&self.obstacle)
            .zip(&self.dk)
            .map(|((y, s), k)| (y - s) * k)
            .sum()
    }

    /// Smallest push; negative values would break monotonicity of `K`.
    pub fn min_push(&self) -> f64 {
        self.dk.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `min (Y − S)`.
    pub fn min_gap(&self) -> f64 {
        self.y
            .iter()
            .zip(&self.obstacle)
            .map(|(y, s)| y - s)
            .fold(f64::INFINITY, f64::min)
    }

    /// Total reflection mass `Σ ΔK`.
    pub fn total_push(&self) -> f64 {
        self.dk.iter().sum()
    }

    /// `K_0 = 0, K_{i+1} = K_i + ΔK(i, column_i)` along a sequence of
    /// columns (a sampled lattice path, or a constant path index).
    pub fn cumulative_k(&self, columns: &[usize]) -> Vec<f64> {
        let mut k = Vec::with_capacity(columns.len());
        let mut acc = 0.0;
        k.push(acc);
        for (i, c) in columns.iter().enumerate().take(columns.len().saturating_sub(1)) {
            acc += self.dk_at(i, *c);
            k.push(acc);
        }
        k
    }

    /// `Y` at the first time, linearly interpolated at `x` (lattice layout)
    /// or averaged over paths.
    pub fn initial_value(&self, x: f64) -> f64 {
        match self.layout {
            Layout::Lattice => crate::lattice::interpolate(&self.x, self.y_row(0), x),
            Layout::Paths => self.y_row(0).iter().sum::<f64>() / self.columns as f64,
        }
    }

    fn check_shape(&self, other: &Self) -> Result<(), RbsdeError> {
        if self.layout != other.layout
            || self.columns != other.columns
            || self.times.len() != other.times.len()
            || self.noise_dim != other.noise_dim
        {
            return Err(RbsdeError::ShapeMismatch(format!(
                "{:?} {}×{} vs {:?} {}×{}",
                self.layout,
                self.rows(),
                self.columns,
                other.layout,
                other.rows(),
                other.columns
            )));
        }
        Ok(())
    }

    /// Lattice layout: `t,x,Y,Z0..,dK`; path layout: `t,path,Y,Z0..,K`
    /// with `K` cumulative along the path.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), RbsdeError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = match self.layout {
            Layout::Lattice => vec!["t".into(), "x".into(), "Y".into()],
            Layout::Paths => vec!["t".into(), "path".into(), "Y".into()],
        };
        header.extend((0..self.noise_dim).map(|k| format!("Z{k}")));
        header.push(match self.layout {
            Layout::Lattice => "dK".into(),
            Layout::Paths => "K".into(),
        });
        w.write_record(&header)?;
        let mut k_paths = vec![0.0; self.columns];
        for (i, t) in self.times.iter().enumerate() {
            for c in 0..self.columns {
                let mut row = vec![t.to_string()];
                row.push(match self.layout {
                    Layout::Lattice => self.x[c].to_string(),
                    Layout::Paths => c.to_string(),
                });
                row.push(self.y_at(i, c).to_string());
                row.extend(self.z_at(i, c).iter().map(f64::to_string));
                match self.layout {
                    Layout::Lattice => row.push(self.dk_at(i, c).to_string()),
                    Layout::Paths => {
                        row.push(k_paths[c].to_string());
                        k_paths[c] += self.dk_at(i, c);
                    }
                }
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
