//! Recombining trinomial Markov-chain approximation of a scalar controlled
//! diffusion.
//!
//! Each node `x_j` moves to `x_{j-1}`, `x_j` or `x_{j+1}` over one step with
//! probabilities chosen so that the first two conditional moments of the
//! increment match the diffusion:
//!
//! ```text
//! E[ΔX]            = b Δt
//! E[ΔX²] − (b Δt)² = |σ|² Δt
//! ```
//!
//! Boundary rows reflect: mass that would leave the grid stays on the
//! boundary node.
//!
//! The lattice is built on a *reporting* time grid of `steps` intervals; each
//! interval can be split into `substeps` equal pieces so that explicit
//! schemes satisfy their stability condition on coarse reporting grids.

use std::io::Write;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::problem::ProblemSpec;

/// Slack on stability-type inequalities to absorb rounding.
const CFL_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("stability condition violated at node {node}, control {control} (ratio {ratio:.4} > 1); refine Δt or widen Δx")]
    CflViolation {
        node: usize,
        control: usize,
        ratio: f64,
    },
    #[error("degenerate domain [{lo}, {hi}]")]
    DegenerateDomain { lo: f64, hi: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("non-finite coefficient at t={t}, x={x}")]
    NonFiniteCoefficient { t: f64, x: f64 },
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
}

/// How each reporting interval is subdivided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Substeps {
    /// Exactly this many pieces; the stability condition is enforced.
    Fixed(usize),
    /// The smallest count that satisfies the stability condition.
    Auto,
}

/// Grid parameters for [`Lattice::build`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatticeGrid {
    pub t0: f64,
    pub t1: f64,
    /// Reporting intervals.
    pub steps: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    /// Number of spatial intervals; the grid has `nx + 1` nodes.
    pub nx: usize,
    pub substeps: Substeps,
}

impl LatticeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize, x_lo: f64, x_hi: f64, nx: usize) -> Self {
        Self {
            t0,
            t1,
            steps,
            x_lo,
            x_hi,
            nx,
            substeps: Substeps::Auto,
        }
    }

    pub fn substeps(mut self, substeps: Substeps) -> Self {
        self.substeps = substeps;
        self
    }

    pub(crate) fn validate(&self) -> Result<(), LatticeError> {
        if !(self.x_hi > self.x_lo) {
            return Err(LatticeError::DegenerateDomain {
                lo: self.x_lo,
                hi: self.x_hi,
            });
        }
        if self.nx < 4 {
            return Err(LatticeError::InvalidGrid(format!(
                "need at least 4 spatial intervals, got {}",
                self.nx
            )));
        }
        if self.steps == 0 || !(self.t1 > self.t0) {
            return Err(LatticeError::InvalidGrid(format!(
                "need t0 < t1 and at least one step, got [{}, {}] with {} steps",
                self.t0, self.t1, self.steps
            )));
        }
        if matches!(self.substeps, Substeps::Fixed(0)) {
            return Err(LatticeError::InvalidGrid("substeps must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn x_nodes(&self) -> Vec<f64> {
        uniform(self.x_lo, self.x_hi, self.nx)
    }
}

/// `n + 1` uniformly spaced points from `lo` to `hi`, with both ends exact.
pub fn uniform(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / n as f64;
    (0..=n)
        .map(|i| if i == n { hi } else { lo + step * i as f64 })
        .collect()
}

/// One-step transition law out of a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Kernel {
    /// `(p_down, p_mid, p_up)`.
    pub probs: [f64; 3],
    /// Destination nodes; clamped at the boundary.
    pub dest: [usize; 3],
    /// Nonnegativity forced an upwind split, so the variance is not matched.
    pub adjusted: bool,
}

/// Drift and diffusion row tabulated on `(node, control)` at one time.
#[derive(Debug, Clone)]
pub(crate) struct CoefficientSlice {
    pub drift: Vec<f64>,
    /// Row-major `[(node, control), d]`.
    pub sigma: Vec<f64>,
}

pub(crate) fn tabulate(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    controls: &[Vec<f64>],
) -> Result<CoefficientSlice, LatticeError> {
    let d = spec.brownian_dim;
    let m = controls.len();
    let mut drift = Vec::with_capacity(x.len() * m);
    let mut sigma = vec![0.0; x.len() * m * d];
    for (j, &xj) in x.iter().enumerate() {
        for (c, v) in controls.iter().enumerate() {
            let b = spec.drift_scalar(t, xj, v);
            let row = &mut sigma[(j * m + c) * d..(j * m + c + 1) * d];
            spec.diffusion_row(t, xj, v, row);
            if !b.is_finite() || row.iter().any(|s| !s.is_finite()) {
                return Err(LatticeError::NonFiniteCoefficient { t, x: xj });
            }
            drift.push(b);
        }
    }
    Ok(CoefficientSlice { drift, sigma })
}

/// Trinomial moment-matching probabilities over a step `dt`.
pub(crate) fn kernel_probs(b: f64, sigma_sq: f64, dt: f64, dx: f64) -> ([f64; 3], bool) {
    let mean = b * dt / dx;
    let second = (sigma_sq * dt + (b * dt) * (b * dt)) / (dx * dx);
    let mut up = 0.5 * (second + mean);
    let mut down = 0.5 * (second - mean);
    let mut adjusted = false;
    if down < 0.0 {
        down = 0.0;
        up = mean;
        adjusted = true;
    } else if up < 0.0 {
        up = 0.0;
        down = -mean;
        adjusted = true;
    }
    ([down, 1.0 - up - down, up], adjusted)
}

fn cfl_ratio(b: f64, sigma_sq: f64, dt: f64, dx: f64) -> f64 {
    sigma_sq * dt / (dx * dx) + b.abs() * dt / dx
}

/// Markov-chain approximation of the controlled diffusion on a space-time
/// grid.
#[derive(Clone)]
pub struct Lattice {
    spec: ProblemSpec,
    grid: LatticeGrid,
    substeps: usize,
    times: Vec<f64>,
    x: Vec<f64>,
    dx: f64,
    dt: f64,
    controls: Vec<Vec<f64>>,
    /// One slice per fine step, or a single slice when time homogeneous.
    slices: Vec<CoefficientSlice>,
    probs: Vec<Vec<[f64; 3]>>,
    adjusted: Vec<Vec<bool>>,
}

impl std::fmt::Debug for Lattice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lattice")
            .field("problem", &self.spec.name)
            .field("grid", &self.grid)
            .field("substeps", &self.substeps)
            .field("controls", &self.controls.len())
            .finish_non_exhaustive()
    }
}

/// Builds a lattice with no time subdivision; fails with
/// [`LatticeError::CflViolation`] when `|σ|²Δt/Δx² + |b|Δt/Δx > 1` anywhere.
pub fn build_lattice(
    spec: &ProblemSpec,
    t0: f64,
    t1: f64,
    nt: usize,
    x_lo: f64,
    x_hi: f64,
    nx: usize,
) -> Result<Lattice, LatticeError> {
    Lattice::build(
        spec,
        LatticeGrid::new(t0, t1, nt, x_lo, x_hi, nx).substeps(Substeps::Fixed(1)),
    )
}

impl Lattice {
    pub fn build(spec: &ProblemSpec, grid: LatticeGrid) -> Result<Self, LatticeError> {
        if spec.state_dim != 1 {
            return Err(LatticeError::InvalidGrid(format!(
                "lattice needs a scalar state, problem has dimension {}",
                spec.state_dim
            )));
        }
        grid.validate()?;
        if grid.t1 > spec.horizon * (1.0 + 1e-12) {
            return Err(LatticeError::InvalidGrid(format!(
                "window end {} exceeds the horizon {}",
                grid.t1, spec.horizon
            )));
        }
        let x = grid.x_nodes();
        let dx = (grid.x_hi - grid.x_lo) / grid.nx as f64;
        let controls = spec.control_grid();
        let outer_dt = (grid.t1 - grid.t0) / grid.steps as f64;

        let mut substeps = match grid.substeps {
            Substeps::Fixed(s) => s,
            Substeps::Auto => {
                let outer = uniform(grid.t0, grid.t1, grid.steps);
                let probe_times: &[f64] = if spec.time_homogeneous {
                    &outer[..1]
                } else {
                    &outer
                };
                let mut rate: f64 = 0.0;
                for &t in probe_times {
                    let slice = tabulate(spec, t, &x, &controls)?;
                    rate = rate.max(max_rate(&slice, spec.brownian_dim, dx));
                }
                ((rate * outer_dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize
            }
        };

        loop {
            match Self::assemble(spec, grid, substeps, &x, dx, &controls) {
                Ok(lattice) => return Ok(lattice),
                Err(LatticeError::CflViolation { .. })
                    if grid.substeps == Substeps::Auto && substeps < 1 << 20 =>
                {
                    substeps *= 2;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn assemble(
        spec: &ProblemSpec,
        grid: LatticeGrid,
        substeps: usize,
        x: &[f64],
        dx: f64,
        controls: &[Vec<f64>],
    ) -> Result<Self, LatticeError> {
        let outer = uniform(grid.t0, grid.t1, grid.steps);
        let mut times = Vec::with_capacity(grid.steps * substeps + 1);
        for k in 0..grid.steps {
            let (a, b) = (outer[k], outer[k + 1]);
            for s in 0..substeps {
                times.push(a + (b - a) * s as f64 / substeps as f64);
            }
        }
        times.push(grid.t1);
        let dt = (grid.t1 - grid.t0) / (grid.steps * substeps) as f64;
        let fine_steps = times.len() - 1;
        let slice_count = if spec.time_homogeneous { 1 } else { fine_steps };

        let d = spec.brownian_dim;
        let m = controls.len();
        let mut slices = Vec::with_capacity(slice_count);
        let mut probs = Vec::with_capacity(slice_count);
        let mut adjusted = Vec::with_capacity(slice_count);
        for &t in &times[..slice_count] {
            let slice = tabulate(spec, t, x, controls)?;
            let mut p = Vec::with_capacity(x.len() * m);
            let mut adj = Vec::with_capacity(x.len() * m);
            for j in 0..x.len() {
                for c in 0..m {
                    let idx = j * m + c;
                    let b = slice.drift[idx];
                    let s2: f64 = slice.sigma[idx * d..(idx + 1) * d].iter().map(|s| s * s).sum();
                    let ratio = cfl_ratio(b, s2, dt, dx);
                    if ratio > 1.0 + CFL_SLACK {
                        return Err(LatticeError::CflViolation {
                            node: j,
                            control: c,
                            ratio,
                        });
                    }
                    let (k, a) = kernel_probs(b, s2, dt, dx);
                    p.push(k);
                    adj.push(a);
                }
            }
            slices.push(slice);
            probs.push(p);
            adjusted.push(adj);
        }

        Ok(Self {
            spec: spec.clone(),
            grid,
            substeps,
            times,
            x: x.to_vec(),
            dx,
            dt,
            controls: controls.to_vec(),
            slices,
            probs,
            adjusted,
        })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn grid(&self) -> &LatticeGrid {
        &self.grid
    }

    /// Fine time grid (length `steps() + 1`).
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn x_grid(&self) -> &[f64] {
        &self.x
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Fine time step.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of fine steps.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Number of reporting intervals.
    pub fn outer_steps(&self) -> usize {
        self.grid.steps
    }

    /// Fine index of reporting time `k`.
    pub fn outer_index(&self, k: usize) -> usize {
        k * self.substeps
    }

    pub fn nodes(&self) -> usize {
        self.x.len()
    }

    pub fn controls(&self) -> &[Vec<f64>] {
        &self.controls
    }

    fn slice_index(&self, i: usize) -> usize {
        if self.slices.len() == 1 {
            0
        } else {
            i
        }
    }

    fn check(&self, i: usize, j: usize, m: usize) -> Result<(), LatticeError> {
        if i >= self.steps() || j >= self.nodes() || m >= self.controls.len() {
            return Err(LatticeError::IndexOutOfRange(format!(
                "(step {i}, node {j}, control {m}) outside ({}, {}, {})",
                self.steps(),
                self.nodes(),
                self.controls.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn probs_unchecked(&self, i: usize, j: usize, m: usize) -> [f64; 3] {
        self.probs[self.slice_index(i)][j * self.controls.len() + m]
    }

    pub(crate) fn dest(&self, j: usize) -> [usize; 3] {
        [j.saturating_sub(1), j, (j + 1).min(self.x.len() - 1)]
    }

    /// Signed node offsets of the destinations (0 where clamped).
    pub(crate) fn offsets(&self, j: usize) -> [f64; 3] {
        let last = self.x.len() - 1;
        [
            if j == 0 { 0.0 } else { -1.0 },
            0.0,
            if j == last { 0.0 } else { 1.0 },
        ]
    }

    pub(crate) fn drift_unchecked(&self, i: usize, j: usize, m: usize) -> f64 {
        self.slices[self.slice_index(i)].drift[j * self.controls.len() + m]
    }

    pub(crate) fn sigma_unchecked(&self, i: usize, j: usize, m: usize) -> &[f64] {
        let d = self.spec.brownian_dim;
        let idx = j * self.controls.len() + m;
        &self.slices[self.slice_index(i)].sigma[idx * d..(idx + 1) * d]
    }

    pub fn kernel(&self, i: usize, j: usize, m: usize) -> Result<Kernel, LatticeError> {
        self.check(i, j, m)?;
        Ok(Kernel {
            probs: self.probs_unchecked(i, j, m),
            dest: self.dest(j),
            adjusted: self.adjusted[self.slice_index(i)][j * self.controls.len() + m],
        })
    }

    /// `b(t_i, x_j, v_m)`.
    pub fn drift(&self, i: usize, j: usize, m: usize) -> Result<f64, LatticeError> {
        self.check(i, j, m)?;
        Ok(self.drift_unchecked(i, j, m))
    }

    /// `σ(t_i, x_j, v_m)` as a `1 × d` row.
    pub fn sigma(&self, i: usize, j: usize, m: usize) -> Result<&[f64], LatticeError> {
        self.check(i, j, m)?;
        Ok(self.sigma_unchecked(i, j, m))
    }

    pub(crate) fn expect_unchecked(&self, i: usize, j: usize, m: usize, field: &[f64]) -> f64 {
        let p = self.probs_unchecked(i, j, m);
        let dest = self.dest(j);
        // Anchored at the starting node so constant fields are reproduced exactly.
        let c = field[j];
        c + p[0] * (field[dest[0]] - c) + p[1] * (field[dest[1]] - c) + p[2] * (field[dest[2]] - c)
    }

    /// One-step conditional expectation `E[field(X_{i+1}) | X_i = x_j]` under
    /// control `m`.
    pub fn expectation(
        &self,
        i: usize,
        j: usize,
        m: usize,
        field: &[f64],
    ) -> Result<f64, LatticeError> {
        self.check(i, j, m)?;
        if field.len() != self.nodes() {
            return Err(LatticeError::IndexOutOfRange(format!(
                "field has {} entries, lattice has {} nodes",
                field.len(),
                self.nodes()
            )));
        }
        Ok(self.expect_unchecked(i, j, m, field))
    }

    /// Moment defects `(E[ΔX] − bΔt, E[ΔX²] − (bΔt)² − |σ|²Δt)` of a kernel.
    pub fn consistency_defect(&self, i: usize, j: usize, m: usize) -> Result<(f64, f64), LatticeError> {
        let k = self.kernel(i, j, m)?;
        let b = self.drift_unchecked(i, j, m);
        let s2: f64 = self.sigma_unchecked(i, j, m).iter().map(|s| s * s).sum();
        let off = self.offsets(j);
        let mean: f64 = (0..3).map(|q| k.probs[q] * off[q] * self.dx).sum();
        let second: f64 = (0..3)
            .map(|q| k.probs[q] * (off[q] * self.dx).powi(2))
            .sum();
        let bdt = b * self.dt;
        Ok((mean - bdt, second - bdt * bdt - s2 * self.dt))
    }

    /// Nearest node to `x` (clamped to the grid).
    pub fn nearest_node(&self, x: f64) -> usize {
        nearest(&self.x, x)
    }

    /// Samples a chain path of node indices from `start` over all fine
    /// steps, using `controls[i * nodes + j]` as the control at `(i, j)`.
    pub fn sample_path<R: Rng>(&self, start: usize, controls: &[usize], rng: &mut R) -> Vec<usize> {
        let nodes = self.nodes();
        let mut path = Vec::with_capacity(self.times.len());
        let mut j = start;
        path.push(j);
        for i in 0..self.steps() {
            let m = controls.get(i * nodes + j).copied().unwrap_or(0);
            let p = self.probs_unchecked(i, j, m);
            let u: f64 = rng.random();
            let q = if u < p[0] {
                0
            } else if u < p[0] + p[1] {
                1
            } else {
                2
            };
            j = self.dest(j)[q];
            path.push(j);
        }
        path
    }

    /// Writes `node,control,p_down,p_mid,p_up` rows for fine step `i`.
    pub fn write_kernels_csv<W: Write>(&self, i: usize, out: W) -> Result<(), LatticeError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["node", "control", "p_down", "p_mid", "p_up"])?;
        for j in 0..self.nodes() {
            for m in 0..self.controls.len() {
                let p = self.kernel(i, j, m)?.probs;
                w.serialize((j, m, p[0], p[1], p[2]))?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn max_rate(slice: &CoefficientSlice, d: usize, dx: f64) -> f64 {
    slice
        .drift
        .iter()
        .enumerate()
        .map(|(idx, b)| {
            let s2: f64 = slice.sigma[idx * d..(idx + 1) * d].iter().map(|s| s * s).sum();
            cfl_ratio(*b, s2, 1.0, dx)
        })
        .fold(0.0, f64::max)
}

pub(crate) fn nearest(grid: &[f64], x: f64) -> usize {
    let lo = grid[0];
    let dx = grid[1] - grid[0];
    let j = ((x - lo) / dx).round();
    j.clamp(0.0, (grid.len() - 1) as f64) as usize
}

/// Linear interpolation of `field` on a uniform grid; constant outside.
pub fn interpolate(grid: &[f64], field: &[f64], x: f64) -> f64 {
    let last = grid.len() - 1;
    if x <= grid[0] {
        return field[0];
    }
    if x >= grid[last] {
        return field[last];
    }
    let dx = grid[1] - grid[0];
    let pos = (x - grid[0]) / dx;
    let j = (pos.floor() as usize).min(last - 1);
    let w = (x - grid[j]) / dx;
    if w <= 0.0 {
        field[j]
    } else if w >= 1.0 {
        field[j + 1]
    } else {
        field[j] * (1.0 - w) + field[j + 1] * w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{builtin_problem, ProblemSpec};
    use std::collections::BTreeMap;

    fn brownian(b: f64, sigma: f64) -> ProblemSpec {
        ProblemSpec::builder("bm", 1, 1, 1)
            .scalar_drift(move |_, _, _| b)
            .scalar_diffusion(move |_, _, _| sigma)
            .time_homogeneous(true)
            .build()
            .unwrap()
    }

    #[test]
    fn symmetric_binomial_when_dt_equals_dx_squared() {
        let spec = brownian(0.0, 1.0);
        // dx = 0.1, dt = 0.01
        let lat = build_lattice(&spec, 0.0, 0.1, 10, -1.0, 1.0, 20).unwrap();
        let k = lat.kernel(3, 10, 0).unwrap();
        assert!((k.probs[0] - 0.5).abs() < 1e-12);
        assert!(k.probs[1].abs() < 1e-12);
        assert!((k.probs[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_noise_no_motion() {
        let spec = brownian(0.0, 0.0);
        let lat = build_lattice(&spec, 0.0, 1.0, 5, -1.0, 1.0, 8).unwrap();
        for j in 0..lat.nodes() {
            assert_eq!(lat.kernel(0, j, 0).unwrap().probs, [0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn drift_skews_probabilities() {
        let spec = brownian(1.0, 1.0);
        // dt = 0.01, dx = 0.2
        let lat = build_lattice(&spec, 0.0, 0.1, 10, -1.0, 1.0, 10).unwrap();
        let p = lat.kernel(0, 5, 0).unwrap().probs;
        assert!((p[2] - p[0] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn cfl_violation_is_reported() {
        let spec = brownian(0.0, 1.0);
        let err = build_lattice(&spec, 0.0, 1.0, 10, -1.0, 1.0, 20).unwrap_err();
        assert!(matches!(err, LatticeError::CflViolation { .. }));
        let auto = Lattice::build(&spec, LatticeGrid::new(0.0, 1.0, 10, -1.0, 1.0, 20)).unwrap();
        assert_eq!(auto.substeps(), 10);
        assert_eq!(auto.steps(), 100);
    }

    #[test]
    fn degenerate_domain() {
        let spec = brownian(0.0, 1.0);
        assert!(matches!(
            build_lattice(&spec, 0.0, 1.0, 10, 1.0, 1.0, 8),
            Err(LatticeError::DegenerateDomain { .. })
        ));
    }

    #[test]
    fn expectation_examples() {
        let spec = brownian(0.0, 1.0);
        let lat = Lattice::build(&spec, LatticeGrid::new(0.0, 1.0, 50, -6.0, 6.0, 60)).unwrap();
        let x = lat.x_grid().to_vec();
        let ones = vec![3.5; x.len()];
        let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
        for j in 1..x.len() - 1 {
            assert!((lat.expectation(0, j, 0, &ones).unwrap() - 3.5).abs() < 1e-13);
            assert!((lat.expectation(0, j, 0, &x).unwrap() - x[j]).abs() < 1e-13);
            let e2 = lat.expectation(0, j, 0, &sq).unwrap();
            assert!((e2 - x[j] * x[j] - lat.dt()).abs() < 1e-8);
        }
        assert!(matches!(
            lat.expectation(lat.steps(), 0, 0, &x),
            Err(LatticeError::IndexOutOfRange(_))
        ));
        assert!(matches!(
            lat.expectation(0, 0, 0, &x[1..]),
            Err(LatticeError::IndexOutOfRange(_))
        ));
    }

    #[test]
    fn put_lattice_is_consistent() {
        let spec = builtin_problem("american_put", &BTreeMap::new()).unwrap();
        let lat = Lattice::build(&spec, LatticeGrid::new(0.0, 1.0, 200, 20.0, 300.0, 400)).unwrap();
        assert!(lat.substeps() > 1);
        for j in 1..lat.nodes() - 1 {
            let k = lat.kernel(0, j, 0).unwrap();
            assert!(!k.adjusted);
            let (dm, dv) = lat.consistency_defect(0, j, 0).unwrap();
            assert!(dm.abs() < 1e-10);
            let s2 = lat.sigma(0, j, 0).unwrap()[0].powi(2);
            assert!(dv.abs() < 1e-8 * (1.0 + s2 * lat.dt()));
        }
    }

    #[test]
    fn kernel_csv_has_one_row_per_node_and_control() {
        let spec = builtin_problem("controlled_drift", &BTreeMap::new()).unwrap();
        let lat = Lattice::build(&spec, LatticeGrid::new(0.0, 1.0, 20, -6.0, 6.0, 24)).unwrap();
        let mut buf = Vec::new();
        lat.write_kernels_csv(0, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("node,control,p_down,p_mid,p_up\n"));
        assert_eq!(text.lines().count(), 1 + 25 * 21);
    }

    #[test]
    fn interpolation_is_exact_on_nodes_and_linear_between() {
        let grid = uniform(0.0, 4.0, 4);
        let field = [0.0, 2.0, 4.0, 6.0, 8.0];
        assert_eq!(interpolate(&grid, &field, 3.0), 6.0);
        assert!((interpolate(&grid, &field, 2.5) - 5.0).abs() < 1e-15);
        assert_eq!(interpolate(&grid, &field, -1.0), 0.0);
        assert_eq!(interpolate(&grid, &field, 9.0), 8.0);
    }
}
