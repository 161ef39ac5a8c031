//! Backward semigroup and the checks built on it: dynamic programming,
//! concatenation over a partition, exhaustive control/stopping search, and
//! value-function regularity.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::forward_sim::{simulate, ControlPath, ControlPolicy, SimConfig, SimError};
use crate::hjb::ValueField;
use crate::lattice::{interpolate, Lattice, LatticeError, LatticeGrid, Substeps};
use crate::problem::{ControlSet, ProblemSpec};
use crate::rbsde::{solve_rbsde_mc, solve_reflected_lattice, LatticeControl, RbsdeError};
use crate::rng::{NormalStream, HISTORY_TAG};

/// Relative tolerance for matching times against a grid.
const TIME_TOL: f64 = 1e-9;
/// Largest number of decision nodes [`mixed_bruteforce`] will enumerate.
pub const MAX_DECISION_NODES: usize = 6;
const MAX_TREE_STEPS: usize = 3;
const MAX_TREE_CONTROLS: usize = 3;

#[derive(Debug, Error)]
pub enum DppError {
    #[error("lattice spans [{lattice_t0}, {lattice_t1}], query window is [{t0}, {t1}]")]
    WindowMismatch {
        t0: f64,
        t1: f64,
        lattice_t0: f64,
        lattice_t1: f64,
    },
    #[error("time {0} is not on the value grid")]
    MisalignedWindow(f64),
    #[error("tree too large to enumerate: {0}")]
    ExplosionGuard(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Rbsde(#[from] RbsdeError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
}

/// `G_{t,t+δ}[η]` evaluated at `(t, x)`.
#[derive(Debug, Clone)]
pub struct SemigroupQuery<'a> {
    pub t: f64,
    pub x: f64,
    pub delta: f64,
    /// `η` on the lattice nodes.
    pub terminal_field: &'a [f64],
    pub control: LatticeControl,
}

/// Solves the reflected equation on `[t, t+δ]` with terminal `η` and reads
/// `Y_t` at `x`.
pub fn semigroup_eval(query: &SemigroupQuery<'_>, spec: &ProblemSpec, lattice: &Lattice) -> Result<f64, DppError> {
    let grid = lattice.grid();
    let (t0, t1) = (query.t, query.t + query.delta);
    let scale = TIME_TOL * spec.horizon.max(1.0);
    if (grid.t0 - t0).abs() > scale || (grid.t1 - t1).abs() > scale {
        return Err(DppError::WindowMismatch {
            t0,
            t1,
            lattice_t0: grid.t0,
            lattice_t1: grid.t1,
        });
    }
    let sol = solve_reflected_lattice(
        lattice,
        spec,
        &query.control,
        query.terminal_field,
        spec.obstacle.as_ref(),
    )?;
    Ok(sol.initial_value(query.x))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridParams {
    pub steps: usize,
    pub nx: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    pub delta: f64,
    pub substeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DppReport {
    pub sample_points: Vec<(f64, f64)>,
    /// `u(t, x)`
    pub lhs: Vec<f64>,
    /// Semigroup with the best control chosen node by node.
    pub rhs: Vec<f64>,
    /// Best semigroup value over constant controls.
    pub rhs_frozen: Vec<f64>,
    /// `max |lhs − rhs|`
    pub max_abs_gap: f64,
    /// `max |lhs − rhs_frozen|`
    pub max_abs_gap_frozen: f64,
    pub grid_params: GridParams,
}

impl DppReport {
    /// `max_abs_gap / max |lhs|`.
    pub fn relative_gap(&self) -> f64 {
        let scale = self.lhs.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if scale > 0.0 {
            self.max_abs_gap / scale
        } else {
            self.max_abs_gap
        }
    }

    /// Writes `t,x,delta,lhs,rhs,gap,rhs_frozen,gap_frozen`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DppError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "delta", "lhs", "rhs", "gap", "rhs_frozen", "gap_frozen"])?;
        for (k, (t, x)) in self.sample_points.iter().enumerate() {
            w.serialize((
                t,
                x,
                self.grid_params.delta,
                self.lhs[k],
                self.rhs[k],
                (self.lhs[k] - self.rhs[k]).abs(),
                self.rhs_frozen[k],
                (self.lhs[k] - self.rhs_frozen[k]).abs(),
            ))?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn grid_index(times: &[f64], t: f64) -> Result<usize, DppError> {
    let scale = TIME_TOL * times[times.len() - 1].abs().max(1.0);
    times
        .iter()
        .position(|&s| (s - t).abs() <= scale)
        .ok_or(DppError::MisalignedWindow(t))
}

/// Compares `u(t, x)` with `sup_v G_{t,t+δ}[u(t+δ, ·)](x)` at each sample
/// point.
///
/// The window lattice reuses the field's x-grid, reporting step, and
/// substep count (or the smallest admissible count if the field's is too
/// coarse for the lattice), so a field produced by the lattice route is
/// reproduced to rounding.
pub fn dpp_check(
    spec: &ProblemSpec,
    field: &ValueField,
    delta: f64,
    sample_points: &[(f64, f64)],
) -> Result<DppReport, DppError> {
    if !(delta > 0.0) || sample_points.is_empty() {
        return Err(DppError::InvalidInput("need δ > 0 and at least one sample point".into()));
    }
    let nx = field.nodes() - 1;
    let (x_lo, x_hi) = (field.x[0], field.x[nx]);
    let mut lhs = Vec::with_capacity(sample_points.len());
    let mut rhs = Vec::with_capacity(sample_points.len());
    let mut rhs_frozen = Vec::with_capacity(sample_points.len());
    let mut steps = 0;
    let mut substeps = field.substeps;

    let controls = spec.control_grid().len();
    // Sample points sharing a start time share one window solve.
    let mut cache: Option<(usize, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    for &(t, x) in sample_points {
        let i = grid_index(&field.times, t)?;
        let k = grid_index(&field.times, t + delta)?;
        if k <= i {
            return Err(DppError::MisalignedWindow(t + delta));
        }
        if cache.as_ref().map(|c| c.0) != Some(i) {
            steps = k - i;
            let grid = LatticeGrid::new(field.times[i], field.times[k], steps, x_lo, x_hi, nx);
            let lattice = match Lattice::build(spec, grid.substeps(Substeps::Fixed(field.substeps))) {
                Err(LatticeError::CflViolation { .. }) => Lattice::build(spec, grid)?,
                other => other?,
            };
            substeps = lattice.substeps();
            let eta = field.u_row(k);
            let best = solve_reflected_lattice(&lattice, spec, &LatticeControl::Optimize, eta, spec.obstacle.as_ref())?;
            let mut frozen = vec![f64::NEG_INFINITY; field.nodes()];
            for m in 0..controls {
                let sol = solve_reflected_lattice(&lattice, spec, &LatticeControl::Fixed(m), eta, spec.obstacle.as_ref())?;
                frozen.iter_mut().zip(sol.y_row(0)).for_each(|(f, y)| *f = f.max(*y));
            }
            cache = Some((i, field.u_row(i).to_vec(), best.y_row(0).to_vec(), frozen));
        }
        let (_, u, best, frozen) = cache.as_ref().expect("filled above");
        lhs.push(interpolate(&field.x, u, x));
        rhs.push(interpolate(&field.x, best, x));
        rhs_frozen.push(interpolate(&field.x, frozen, x));
    }

    let gap = |r: &[f64]| lhs.iter().zip(r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(DppReport {
        sample_points: sample_points.to_vec(),
        max_abs_gap: gap(&rhs),
        max_abs_gap_frozen: gap(&rhs_frozen),
        lhs,
        rhs,
        rhs_frozen,
        grid_params: GridParams {
            steps,
            nx,
            x_lo,
            x_hi,
            delta,
            substeps,
        },
    })
}

/// How the paths are split at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// `A = {W_{t/2} ≥ 0}`, drawn from a Brownian history on `[0, t]`.
    HistorySign,
    /// `A = Ω`.
    Whole,
}

/// Monte Carlo setup for [`partition_concat_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcatConfig {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub basis_degree: usize,
    pub partition: Partition,
}

/// `max_paths |Y^{1_A v1 + 1_{Aᶜ} v2}_t − (1_A Y^{v1}_t + 1_{Aᶜ} Y^{v2}_t)|`.
///
/// All three equations are solved on bundles with common increments. When
/// the two controls differ, the concatenated solve regresses separately on
/// `A` and `Aᶜ`, since only then is its conditional expectation
/// `F_t`-measurable with respect to the event.
pub fn partition_concat_check(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    v1: &ControlPath,
    v2: &ControlPath,
    cfg: ConcatConfig,
) -> Result<f64, DppError> {
    if !(t >= 0.0 && t < spec.horizon) {
        return Err(DppError::InvalidInput(format!("start time {t} outside [0, T)")));
    }
    let labels: Vec<usize> = match cfg.partition {
        Partition::Whole => vec![0; cfg.paths],
        Partition::HistorySign => (0..cfg.paths)
            .map(|p| {
                let mut w = [0.0];
                NormalStream::new(cfg.seed, HISTORY_TAG, p as u64, 1).fill(0, &mut w);
                usize::from(w[0] * (0.5 * t).sqrt() < 0.0)
            })
            .collect(),
    };
    let sim = SimConfig {
        t0: t,
        t1: spec.horizon,
        steps: cfg.steps,
        paths: cfg.paths,
        seed: cfg.seed,
    };
    let solve = |policy: &ControlPolicy, strata: Option<&[usize]>| -> Result<Vec<f64>, DppError> {
        let bundle = simulate(spec, policy, x, sim)?;
        let terminal: Vec<f64> = (0..bundle.paths)
            .map(|p| (spec.terminal)(bundle.state(p, cfg.steps)))
            .collect();
        let sol = solve_rbsde_mc(spec, &bundle, &terminal, spec.obstacle.as_ref(), cfg.basis_degree, strata)?;
        Ok(sol.y_row(0).to_vec())
    };
    let y1 = solve(&ControlPolicy::Fixed(v1.clone()), None)?;
    let y2 = solve(&ControlPolicy::Fixed(v2.clone()), None)?;
    let split = v1 != v2 && labels.iter().any(|&l| l != labels[0]);
    let concat = solve(
        &ControlPolicy::Selected {
            paths: vec![v1.clone(), v2.clone()],
            selector: labels.clone(),
        },
        split.then_some(labels.as_slice()),
    )?;
    Ok((0..cfg.paths)
        .map(|p| {
            let expected = if labels[p] == 0 { y1[p] } else { y2[p] };
            (concat[p] - expected).abs()
        })
        .fold(0.0, f64::max))
}

/// Exhaustive search over node-indexed controls and stopping regions on a
/// small lattice, started at node `start`:
///
/// ```text
/// sup_{v, τ} E[ Σ_{t_i < τ} g(t_i, X_i, v_i) Δt + h(τ, X_τ) 1_{τ<T} + Φ(X_T) 1_{τ=T} ]
/// ```
///
/// The driver must not depend on `(y, z)`. Fails with
/// [`DppError::ExplosionGuard`] beyond 3 steps, 3 controls or
/// 6 decision nodes.
pub fn mixed_bruteforce(spec: &ProblemSpec, lattice: &Lattice, start: usize) -> Result<f64, DppError> {
    let steps = lattice.steps();
    let controls = lattice.controls();
    if steps > MAX_TREE_STEPS || controls.len() > MAX_TREE_CONTROLS {
        return Err(DppError::ExplosionGuard(format!(
            "{steps} steps and {} controls (limits {MAX_TREE_STEPS} and {MAX_TREE_CONTROLS})",
            controls.len()
        )));
    }
    let nodes = lattice.nodes();
    if start >= nodes {
        return Err(DppError::InvalidInput(format!("start node {start} outside 0..{nodes}")));
    }
    let times = lattice.times();
    let x = lattice.x_grid();

    // Nodes reachable with positive probability under some control.
    let mut reach = vec![vec![start]];
    for i in 0..steps {
        let mut next: Vec<usize> = Vec::new();
        for &j in &reach[i] {
            for m in 0..controls.len() {
                let k = lattice.kernel(i, j, m)?;
                for q in 0..3 {
                    if k.probs[q] > 0.0 && !next.contains(&k.dest[q]) {
                        next.push(k.dest[q]);
                    }
                }
            }
        }
        next.sort_unstable();
        reach.push(next);
    }
    let decisions: Vec<(usize, usize)> = (0..steps)
        .flat_map(|i| reach[i].iter().map(move |&j| (i, j)))
        .collect();
    if decisions.len() > MAX_DECISION_NODES {
        return Err(DppError::ExplosionGuard(format!(
            "{} decision nodes (limit {MAX_DECISION_NODES})",
            decisions.len()
        )));
    }

    // Running reward and stopping reward per decision node and control.
    let probes = [(0.0, 0.0), (1.0, -1.0), (-3.0, 2.5)];
    let d = spec.brownian_dim;
    let mut reward = vec![vec![0.0; controls.len()]; decisions.len()];
    let mut stop_value = vec![0.0; decisions.len()];
    for (n, &(i, j)) in decisions.iter().enumerate() {
        let xj = [x[j]];
        for (m, v) in controls.iter().enumerate() {
            let g = (spec.driver)(times[i], &xj, 0.0, &vec![0.0; d], v);
            for (y, z) in probes {
                if (spec.driver)(times[i], &xj, y, &vec![z; d], v) != g {
                    return Err(DppError::InvalidInput("driver depends on y or z".into()));
                }
            }
            reward[n][m] = g * (times[i + 1] - times[i]);
        }
        stop_value[n] = (spec.obstacle)(times[i], &xj);
    }
    let terminal: Vec<f64> = x.iter().map(|&xj| spec.terminal_at(xj)).collect();
    let slot = |i: usize, j: usize| decisions.iter().position(|&(a, b)| a == i && b == j);

    let dn = decisions.len();
    let assignments = controls.len().pow(dn as u32);
    let mut best = f64::NEG_INFINITY;
    let mut mass = vec![0.0; nodes];
    let mut next_mass = vec![0.0; nodes];
    let mut choice = vec![0usize; dn];
    for a in 0..assignments {
        let mut code = a;
        for c in choice.iter_mut() {
            *c = code % controls.len();
            code /= controls.len();
        }
        for stop_mask in 0..(1usize << dn) {
            mass.fill(0.0);
            mass[start] = 1.0;
            let mut value = 0.0;
            for i in 0..steps {
                next_mass.fill(0.0);
                for &j in &reach[i] {
                    let w = mass[j];
                    if w == 0.0 {
                        continue;
                    }
                    let n = slot(i, j).expect("reachable node is a decision node");
                    if stop_mask & (1 << n) != 0 {
                        value += w * stop_value[n];
                        continue;
                    }
                    let m = choice[n];
                    value += w * reward[n][m];
                    let k = lattice.kernel(i, j, m)?;
                    for q in 0..3 {
                        next_mass[k.dest[q]] += w * k.probs[q];
                    }
                }
                std::mem::swap(&mut mass, &mut next_mass);
            }
            value += mass.iter().zip(&terminal).map(|(w, f)| w * f).sum::<f64>();
            best = best.max(value);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Regularity {
    /// `max |u(t, x_{j+1}) − u(t, x_j)| / Δx`
    pub lip_x_ratio: f64,
    /// `max (|u(t_{i+1}, x) − u(t_i, x)| − 3 |h(t_i, x) − h(t_{i+1}, x)|)⁺ / √Δt`
    pub holder_t_ratio: f64,
    /// `max |u| / (1 + |x|)`
    pub growth_ratio: f64,
}

/// Grid versions of the Lipschitz bound in `x`, the half-Hölder bound in
/// `t`, and linear growth.
pub fn regularity_check(field: &ValueField) -> Regularity {
    let n = field.nodes();
    let dx = field.x[1] - field.x[0];
    let mut out = Regularity {
        lip_x_ratio: 0.0,
        holder_t_ratio: 0.0,
        growth_ratio: 0.0,
    };
    for i in 0..field.rows() {
        let row = field.u_row(i);
        for j in 0..n {
            out.growth_ratio = out.growth_ratio.max(row[j].abs() / (1.0 + field.x[j].abs()));
            if j + 1 < n {
                out.lip_x_ratio = out.lip_x_ratio.max((row[j + 1] - row[j]).abs() / dx);
            }
            if i + 1 < field.rows() {
                let dt = field.times[i + 1] - field.times[i];
                let du = (field.u_at(i + 1, j) - row[j]).abs();
                let dh = (field.h[i * n + j] - field.h[(i + 1) * n + j]).abs();
                out.holder_t_ratio = out.holder_t_ratio.max((du - 3.0 * dh).max(0.0) / dt.sqrt());
            }
        }
    }
    out
}

/// Node at which [`random_tree`] problems are started.
pub const TREE_START: usize = 1;

/// A random three-step, two-control problem small enough for
/// [`mixed_bruteforce`]:
///
/// ```text
/// b = v ∈ {0.9, 2.4},  σ = 0.5,  g = c0 + c1 x + c2 v + c3 sin(x + 3t),
/// h = c4 + c5 x + c6 cos(x(1 + t)),  Φ = max(c7 x, h(T, ·))
/// ```
///
/// on `x ∈ [0, 6]` with unit spacing and `Δt = 1/3`. The drift dominates,
/// so each node moves up or stays and six nodes carry a decision.
pub fn random_tree(seed: u64) -> Result<(ProblemSpec, Lattice), DppError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c: [f64; 8] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let obstacle = move |t: f64, x: f64| c[4] + c[5] * x + c[6] * (x * (1.0 + t)).cos();
    let spec = ProblemSpec::builder("random_tree", 1, 1, 1)
        .scalar_drift(|_, _, v| v[0])
        .scalar_diffusion(|_, _, _| 0.5)
        .scalar_driver(move |t, x, _, _, v| c[0] + c[1] * x + c[2] * v[0] + c[3] * (x + 3.0 * t).sin())
        .scalar_obstacle(obstacle)
        .scalar_terminal(move |x| (c[7] * x).max(obstacle(1.0, x)))
        .controls(ControlSet::Finite(vec![vec![0.9], vec![2.4]]))
        .domain(0.0, 6.0)
        .build()
        .map_err(|e| DppError::InvalidInput(e.to_string()))?;
    let lattice = Lattice::build(&spec, LatticeGrid::new(0.0, 1.0, 3, 0.0, 6.0, 6).substeps(Substeps::Fixed(1)))?;
    Ok((spec, lattice))
}
