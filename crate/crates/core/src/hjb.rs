//! Explicit finite differences for the obstacle HJB variational inequality
//!
//! ```text
//! min( u − h, −∂ₜu − sup_v { ½|σ|² ∂ₓₓu + b ∂ₓu + g(t, x, u, ∂ₓu σ, v) } ) = 0,
//! u(T, ·) = Φ.
//! ```
//!
//! Each reporting interval is split into equal substeps so that the scheme
//! stays monotone; values are recorded on the reporting grid only.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::lattice::Substeps;
use crate::problem::ProblemSpec;
use crate::rbsde::RbsdeSolution;

/// Nodes with `|u − h|` at most this are reported as active.
pub const ACTIVE_TOL: f64 = 1e-10;
/// Monotonicity bound on `|σ|²Δt/Δx² + |b|Δt/(2Δx)`.
pub const CFL_LIMIT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum HjbError {
    #[error("CFL ratio {ratio} exceeds {CFL_LIMIT} at node {node}, control {control}")]
    CflViolation {
        node: usize,
        control: usize,
        ratio: f64,
    },
    #[error("value is not finite at time index {step}, node {node}")]
    NonFiniteValue { step: usize, node: usize },
    #[error("terminal value {terminal} is below the obstacle {obstacle} at node {node}")]
    TerminalObstacleConflict {
        node: usize,
        terminal: f64,
        obstacle: f64,
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
}

/// Value function on a `(time, node)` grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueField {
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    /// `h(t_i, x_j)`
    pub h: Vec<f64>,
    /// `|u − h| ≤ ACTIVE_TOL`
    pub active: Vec<bool>,
    /// Maximizing control index at each reporting node (0 on the last row).
    pub argmax: Vec<usize>,
    /// Amount the projection lifted the value at each node; positive exactly
    /// where the barrier binds against the continuation value.
    pub push: Vec<f64>,
    pub substeps: usize,
}

impl ValueField {
    pub fn nodes(&self) -> usize {
        self.x.len()
    }

    pub fn rows(&self) -> usize {
        self.times.len()
    }

    pub fn u_at(&self, i: usize, j: usize) -> f64 {
        self.u[i * self.nodes() + j]
    }

    pub fn u_row(&self, i: usize) -> &[f64] {
        &self.u[i * self.nodes()..(i + 1) * self.nodes()]
    }

    /// `u(t_0, x)` by linear interpolation.
    pub fn initial_value(&self, x: f64) -> f64 {
        crate::lattice::interpolate(&self.x, self.u_row(0), x)
    }

    /// Reads the reporting rows of a lattice value solution (one row per
    /// `substeps` fine steps).
    pub fn from_lattice_solution(sol: &RbsdeSolution, substeps: usize) -> Self {
        let nodes = sol.columns;
        let rows: Vec<usize> = (0..sol.rows()).step_by(substeps.max(1)).collect();
        let mut out = Self {
            times: rows.iter().map(|&i| sol.times[i]).collect(),
            x: sol.x.clone(),
            u: Vec::with_capacity(rows.len() * nodes),
            h: Vec::with_capacity(rows.len() * nodes),
            active: Vec::with_capacity(rows.len() * nodes),
            argmax: Vec::with_capacity(rows.len() * nodes),
            push: Vec::with_capacity(rows.len() * nodes),
            substeps,
        };
        let last = sol.rows() - 1;
        for &i in &rows {
            for j in 0..nodes {
                let (u, h) = (sol.y_at(i, j), sol.obstacle_at(i, j));
                out.u.push(u);
                out.h.push(h);
                out.active.push((u - h).abs() <= ACTIVE_TOL);
                out.argmax.push(if i < last { sol.controls[i * nodes + j] } else { 0 });
                out.push.push(sol.dk_at(i, j));
            }
        }
        out
    }

    /// Writes `t,x,u,h,active_flag,argmax_control`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HjbError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "u", "h", "active_flag", "argmax_control"])?;
        let n = self.nodes();
        for (i, t) in self.times.iter().enumerate() {
            for j in 0..n {
                let k = i * n + j;
                w.serialize((t, self.x[j], self.u[k], self.h[k], self.active[k] as u8, self.argmax[k]))?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Barrier {
    Project,
    Penalize(f64),
}

/// Projected explicit scheme with automatic substepping.
pub fn solve_hjb_fd(spec: &ProblemSpec, times: &[f64], x: &[f64]) -> Result<ValueField, HjbError> {
    solve_hjb_fd_with(spec, times, x, Substeps::Auto)
}

/// Projected explicit scheme; `Substeps::Fixed(s)` fails with
/// [`HjbError::CflViolation`] when `s` is too small.
pub fn solve_hjb_fd_with(
    spec: &ProblemSpec,
    times: &[f64],
    x: &[f64],
    substeps: Substeps,
) -> Result<ValueField, HjbError> {
    march(spec, times, x, substeps, Barrier::Project)
}

/// Penalized scheme: `g + n (u − h)⁻` with the penalty taken implicitly,
/// no projection.
pub fn solve_penalized_hjb(
    spec: &ProblemSpec,
    times: &[f64],
    x: &[f64],
    n_penalty: f64,
) -> Result<ValueField, HjbError> {
    solve_penalized_hjb_with(spec, times, x, n_penalty, Substeps::Auto)
}

pub fn solve_penalized_hjb_with(
    spec: &ProblemSpec,
    times: &[f64],
    x: &[f64],
    n_penalty: f64,
    substeps: Substeps,
) -> Result<ValueField, HjbError> {
    if !(n_penalty >= 0.0 && n_penalty.is_finite()) {
        return Err(HjbError::InvalidGrid(format!("penalty {n_penalty} is not a finite non-negative number")));
    }
    march(spec, times, x, substeps, Barrier::Penalize(n_penalty))
}

fn check_grid(spec: &ProblemSpec, times: &[f64], x: &[f64]) -> Result<(), HjbError> {
    if spec.state_dim != 1 {
        return Err(HjbError::InvalidGrid(format!(
            "finite differences need a scalar state, problem has dimension {}",
            spec.state_dim
        )));
    }
    if times.len() < 2 || x.len() < 3 {
        return Err(HjbError::InvalidGrid("need two times and three nodes".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(HjbError::InvalidGrid("times must increase".into()));
    }
    let dx = x[1] - x[0];
    if !(dx > 0.0) || x.windows(2).any(|w| ((w[1] - w[0]) - dx).abs() > 1e-9 * dx.max(1.0)) {
        return Err(HjbError::InvalidGrid("x grid must be uniform and increasing".into()));
    }
    Ok(())
}

/// `(|σ|²/Δx² + |b|/(2Δx))` maximized over nodes and controls at time `t`,
/// with the location of the maximum.
fn max_rate(spec: &ProblemSpec, controls: &[Vec<f64>], t: f64, x: &[f64], dx: f64) -> (f64, usize, usize) {
    let mut sigma = vec![0.0; spec.brownian_dim];
    let mut best = (0.0, 0, 0);
    for (j, &xj) in x.iter().enumerate() {
        for (m, v) in controls.iter().enumerate() {
            let b = spec.drift_scalar(t, xj, v);
            spec.diffusion_row(t, xj, v, &mut sigma);
            let s2: f64 = sigma.iter().map(|s| s * s).sum();
            let rate = s2 / (dx * dx) + b.abs() / (2.0 * dx);
            if rate > best.0 || !rate.is_finite() {
                best = (rate, j, m);
            }
        }
    }
    best
}

fn march(
    spec: &ProblemSpec,
    times: &[f64],
    x: &[f64],
    substeps: Substeps,
    barrier: Barrier,
) -> Result<ValueField, HjbError> {
    check_grid(spec, times, x)?;
    let nodes = x.len();
    let rows = times.len();
    let dx = x[1] - x[0];
    let controls = spec.control_grid();
    let d = spec.brownian_dim;

    let longest = times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let probe: Vec<f64> = if spec.time_homogeneous { vec![times[0]] } else { times.to_vec() };
    let (mut rate, mut at_node, mut at_control) = (0.0, 0, 0);
    for &t in &probe {
        let r = max_rate(spec, &controls, t, x, dx);
        if r.0 > rate || !r.0.is_finite() {
            (rate, at_node, at_control) = r;
        }
    }
    if !rate.is_finite() {
        return Err(HjbError::NonFiniteValue { step: 0, node: at_node });
    }
    let s = match substeps {
        Substeps::Fixed(s) => {
            let ratio = rate * longest / s.max(1) as f64;
            if s == 0 || ratio > CFL_LIMIT * (1.0 + 1e-12) {
                return Err(HjbError::CflViolation {
                    node: at_node,
                    control: at_control,
                    ratio,
                });
            }
            s
        }
        Substeps::Auto => ((rate * longest / CFL_LIMIT) * (1.0 - 1e-12)).ceil().max(1.0) as usize,
    };

    let mut u = vec![0.0; rows * nodes];
    let mut hs = vec![0.0; rows * nodes];
    let mut active = vec![false; rows * nodes];
    let mut argmax = vec![0usize; rows * nodes];
    let mut push = vec![0.0; rows * nodes];

    let t_end = times[rows - 1];
    let mut current: Vec<f64> = Vec::with_capacity(nodes);
    for (j, &xj) in x.iter().enumerate() {
        let phi = spec.terminal_at(xj);
        let h = spec.obstacle_at(t_end, xj);
        if let Barrier::Project = barrier {
            if phi < h {
                return Err(HjbError::TerminalObstacleConflict {
                    node: j,
                    terminal: phi,
                    obstacle: h,
                });
            }
        }
        if !phi.is_finite() {
            return Err(HjbError::NonFiniteValue { step: rows - 1, node: j });
        }
        current.push(phi);
        let k = (rows - 1) * nodes + j;
        u[k] = phi;
        hs[k] = h;
        active[k] = (phi - h).abs() <= ACTIVE_TOL;
    }

    let mut next = vec![0.0; nodes];
    let mut sigma = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut last_push = vec![0.0; nodes];
    let mut last_arg = vec![0usize; nodes];
    for i in (0..rows - 1).rev() {
        let dt = (times[i + 1] - times[i]) / s as f64;
        for q in (0..s).rev() {
            let t = times[i] + dt * q as f64;
            for j in 0..nodes {
                let (d1, d2) = if j == 0 {
                    ((current[1] - current[0]) / dx, 0.0)
                } else if j == nodes - 1 {
                    ((current[j] - current[j - 1]) / dx, 0.0)
                } else {
                    (
                        (current[j + 1] - current[j - 1]) / (2.0 * dx),
                        (current[j + 1] - 2.0 * current[j] + current[j - 1]) / (dx * dx),
                    )
                };
                let xj = [x[j]];
                let mut best = f64::NEG_INFINITY;
                let mut best_m = 0;
                for (m, v) in controls.iter().enumerate() {
                    let b = spec.drift_scalar(t, x[j], v);
                    spec.diffusion_row(t, x[j], v, &mut sigma);
                    let s2: f64 = sigma.iter().map(|s| s * s).sum();
                    z.iter_mut().zip(&sigma).for_each(|(zk, sk)| *zk = d1 * sk);
                    let g = (spec.driver)(t, &xj, current[j], &z, v);
                    let cand = current[j] + dt * (0.5 * s2 * d2 + b * d1 + g);
                    if cand > best {
                        best = cand;
                        best_m = m;
                    }
                }
                if !best.is_finite() {
                    return Err(HjbError::NonFiniteValue { step: i, node: j });
                }
                let h = spec.obstacle_at(t, x[j]);
                let (value, lift) = match barrier {
                    Barrier::Project if best < h => (h, h - best),
                    Barrier::Project => (best, 0.0),
                    Barrier::Penalize(n) if best < h => {
                        let ndt = n * dt;
                        let v = (best + ndt * h) / (1.0 + ndt);
                        (v, ndt * (h - v))
                    }
                    Barrier::Penalize(_) => (best, 0.0),
                };
                next[j] = value;
                last_push[j] = lift;
                last_arg[j] = best_m;
            }
            std::mem::swap(&mut current, &mut next);
        }
        for j in 0..nodes {
            let k = i * nodes + j;
            let h = spec.obstacle_at(times[i], x[j]);
            u[k] = current[j];
            hs[k] = h;
            active[k] = (current[j] - h).abs() <= ACTIVE_TOL;
            argmax[k] = last_arg[j];
            push[k] = last_push[j];
        }
    }

    Ok(ValueField {
        times: times.to_vec(),
        x: x.to_vec(),
        u,
        h: hs,
        active,
        argmax,
        push,
        substeps: s,
    })
}

/// Pointwise residual of the variational inequality on the reporting grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residual {
    pub max_abs: f64,
    pub t: f64,
    pub x: f64,
    pub nodes: usize,
}

/// Residual of the variational inequality at interior nodes with
/// `t_i ≤ t_max`:
///
/// ```text
/// r = min( u_i − h_i, (u_i − u_{i+1})/Δt − sup_v { ½|σ|² D²u_{i+1} + b Du_{i+1} + g(t_i, x, u_{i+1}, Du_{i+1} σ, v) } )
/// ```
///
/// with centred differences in `x` and the forward difference in `t` taken
/// over one reporting interval. Interior excludes the two boundary nodes and
/// the last time. Near a non-smooth terminal value the time derivative is
/// unbounded, so `t_max` is used to keep the terminal layer out.
pub fn residual_check(field: &ValueField, spec: &ProblemSpec, t_max: f64) -> Residual {
    let n = field.nodes();
    let dx = field.x[1] - field.x[0];
    let controls = spec.control_grid();
    let mut sigma = vec![0.0; spec.brownian_dim];
    let mut z = vec![0.0; spec.brownian_dim];
    let mut out = Residual {
        max_abs: 0.0,
        t: field.times[0],
        x: field.x[0],
        nodes: 0,
    };
    for i in 0..field.rows() - 1 {
        let t = field.times[i];
        if t > t_max {
            break;
        }
        let dt = field.times[i + 1] - t;
        let row = field.u_row(i + 1);
        let cur = field.u_row(i);
        for j in 1..n - 1 {
            let d1 = (row[j + 1] - row[j - 1]) / (2.0 * dx);
            let d2 = (row[j + 1] - 2.0 * row[j] + row[j - 1]) / (dx * dx);
            let xj = [field.x[j]];
            let mut sup = f64::NEG_INFINITY;
            for v in &controls {
                let b = spec.drift_scalar(t, xj[0], v);
                spec.diffusion_row(t, xj[0], v, &mut sigma);
                let s2: f64 = sigma.iter().map(|s| s * s).sum();
                z.iter_mut().zip(&sigma).for_each(|(zk, sk)| *zk = d1 * sk);
                sup = sup.max(0.5 * s2 * d2 + b * d1 + (spec.driver)(t, &xj, row[j], &z, v));
            }
            let gap = cur[j] - field.h[i * n + j];
            let r = gap.min((cur[j] - field.u_at(i + 1, j)) / dt - sup);
            out.nodes += 1;
            if r.abs() > out.max_abs {
                out.max_abs = r.abs();
                out.t = t;
                out.x = xj[0];
            }
        }
    }
    out
}
