//! Control-problem specifications.
//!
//! A [`ProblemSpec`] bundles every coefficient of the controlled forward
//! system and of the reflected backward equation built on top of it:
//!
//! ```text
//! dX_s = b(s, X_s, v_s) ds + σ(s, X_s, v_s) dW_s
//! Y_s  = Φ(X_T) + ∫_s^T g(r, X_r, Y_r, Z_r, v_r) dr + K_T − K_s − ∫_s^T Z_r dW_r
//! Y_s ≥ h(s, X_s)
//! ```
//!
//! Coefficients are opaque closures, so the standing Lipschitz assumptions
//! can only be checked by sampling ([`validate_spec`]).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Obstacle level that encodes "no barrier". Every solver treats it like any
/// other obstacle value; it is simply never reached.
pub const INACTIVE_OBSTACLE: f64 = -1e9;

/// Default number of grid points per axis when discretizing a box control set.
pub const DEFAULT_CONTROL_COUNT: usize = 21;

/// Relative slack allowed on the declared Lipschitz constant.
pub const LIPSCHITZ_SLACK: f64 = 1e-6;

/// `b(t, x, v)` written into an `n`-vector.
pub type DriftFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;
/// `σ(t, x, v)` written row-major into an `n × d` buffer.
pub type DiffusionFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;
/// `g(t, x, y, z, v)`.
pub type DriverFn = dyn Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync;
/// `Φ(x)`.
pub type TerminalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
/// `h(t, x)`.
pub type ObstacleFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("coefficient `{coefficient}` is not finite at t={t}, x={x:?}")]
    NonFiniteCoefficient {
        coefficient: Coefficient,
        t: f64,
        x: Vec<f64>,
    },
}

/// Names the coefficient a probe result belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficient {
    Drift,
    Diffusion,
    Driver,
    Terminal,
    Obstacle,
}

impl fmt::Display for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Coefficient::Drift => "drift",
            Coefficient::Diffusion => "diffusion",
            Coefficient::Driver => "driver",
            Coefficient::Terminal => "terminal",
            Coefficient::Obstacle => "obstacle",
        };
        f.write_str(name)
    }
}

/// Compact control set `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlSet {
    /// Explicit list of control vectors.
    Finite(Vec<Vec<f64>>),
    /// Axis-aligned box, discretized with `counts[k]` uniform points on axis `k`.
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
        counts: Vec<usize>,
    },
}

impl ControlSet {
    /// A set with the single control `0 ∈ R^dim`.
    pub fn trivial(dim: usize) -> Self {
        ControlSet::Finite(vec![vec![0.0; dim]])
    }

    pub fn interval(lower: f64, upper: f64, count: usize) -> Self {
        ControlSet::Box {
            lower: vec![lower],
            upper: vec![upper],
            counts: vec![count],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Finite(points) => points.first().map_or(0, Vec::len),
            ControlSet::Box { lower, .. } => lower.len(),
        }
    }

    /// Finite grid the solvers optimize over. For a box this is the
    /// Cartesian product of the per-axis uniform grids, first axis slowest.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        match self {
            ControlSet::Finite(points) => points.clone(),
            ControlSet::Box {
                lower,
                upper,
                counts,
            } => {
                let mut grid = vec![Vec::with_capacity(lower.len())];
                for axis in 0..lower.len() {
                    let count = counts[axis];
                    let mut next = Vec::with_capacity(grid.len() * count);
                    for prefix in &grid {
                        for i in 0..count {
                            let mut point = prefix.clone();
                            point.push(axis_point(lower[axis], upper[axis], count, i));
                            next.push(point);
                        }
                    }
                    grid = next;
                }
                grid
            }
        }
    }

    /// Whether `v` belongs to the set (box membership, or equality with a
    /// listed point).
    pub fn contains(&self, v: &[f64]) -> bool {
        match self {
            ControlSet::Finite(points) => points.iter().any(|p| p.as_slice() == v),
            ControlSet::Box { lower, upper, .. } => {
                v.len() == lower.len()
                    && v
                        .iter()
                        .zip(lower.iter().zip(upper))
                        .all(|(x, (lo, hi))| *x >= *lo - 1e-12 && *x <= *hi + 1e-12)
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            ControlSet::Finite(points) => points[rng.random_range(0..points.len())].clone(),
            ControlSet::Box { lower, upper, .. } => lower
                .iter()
                .zip(upper)
                .map(|(lo, hi)| if hi > lo { rng.random_range(*lo..=*hi) } else { *lo })
                .collect(),
        }
    }

    fn validate(&self) -> Result<(), ProblemError> {
        match self {
            ControlSet::Finite(points) => {
                let Some(first) = points.first() else {
                    return Err(ProblemError::InvalidSpec("control set is empty".into()));
                };
                if points.iter().any(|p| p.len() != first.len()) {
                    return Err(ProblemError::InvalidSpec(
                        "control points have inconsistent dimensions".into(),
                    ));
                }
                if points.iter().flatten().any(|c| !c.is_finite()) {
                    return Err(ProblemError::InvalidSpec("control set is unbounded".into()));
                }
            }
            ControlSet::Box {
                lower,
                upper,
                counts,
            } => {
                if lower.is_empty() || lower.len() != upper.len() || lower.len() != counts.len() {
                    return Err(ProblemError::InvalidSpec(
                        "box control bounds and counts must share one non-zero dimension".into(),
                    ));
                }
                for ((lo, hi), count) in lower.iter().zip(upper).zip(counts) {
                    if !lo.is_finite() || !hi.is_finite() || lo > hi {
                        return Err(ProblemError::InvalidSpec(format!(
                            "box axis [{lo}, {hi}] is not a bounded interval"
                        )));
                    }
                    if *count == 0 || (*count == 1 && lo != hi) {
                        return Err(ProblemError::InvalidSpec(
                            "a non-degenerate box axis needs at least two grid points".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn axis_point(lo: f64, hi: f64, count: usize, i: usize) -> f64 {
    if count == 1 {
        lo
    } else if i + 1 == count {
        hi
    } else {
        lo + (hi - lo) * i as f64 / (count - 1) as f64
    }
}

/// Full data of a recursive control problem with an obstacle constraint.
///
/// Cloning is cheap: coefficients are reference counted.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    /// `n`
    pub state_dim: usize,
    /// `d`
    pub brownian_dim: usize,
    /// `k`
    pub control_dim: usize,
    pub drift: Arc<DriftFn>,
    pub diffusion: Arc<DiffusionFn>,
    pub driver: Arc<DriverFn>,
    pub terminal: Arc<TerminalFn>,
    pub obstacle: Arc<ObstacleFn>,
    pub controls: ControlSet,
    pub horizon: f64,
    pub lipschitz: f64,
    /// Coefficients of the forward system do not depend on `t`; lets the
    /// lattice and FD solvers tabulate them once.
    pub time_homogeneous: bool,
    /// Reference starting point used by reports and estimates.
    pub initial_state: Vec<f64>,
    /// Truncated state interval for the one-dimensional grid solvers.
    pub domain: (f64, f64),
    /// Per-axis state box used by [`validate_spec`].
    pub probe_box: (f64, f64),
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("brownian_dim", &self.brownian_dim)
            .field("control_dim", &self.control_dim)
            .field("controls", &self.controls)
            .field("horizon", &self.horizon)
            .field("lipschitz", &self.lipschitz)
            .field("domain", &self.domain)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    /// Starts a builder for an `n`-dimensional state driven by a
    /// `d`-dimensional Brownian motion with `k`-dimensional controls. All
    /// coefficients default to zero, the obstacle to [`INACTIVE_OBSTACLE`].
    pub fn builder(name: impl Into<String>, n: usize, d: usize, k: usize) -> ProblemBuilder {
        ProblemBuilder {
            spec: ProblemSpec {
                name: name.into(),
                state_dim: n,
                brownian_dim: d,
                control_dim: k,
                drift: Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0)),
                diffusion: Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0)),
                driver: Arc::new(|_, _, _, _, _| 0.0),
                terminal: Arc::new(|_| 0.0),
                obstacle: Arc::new(|_, _| INACTIVE_OBSTACLE),
                controls: ControlSet::trivial(k),
                horizon: 1.0,
                lipschitz: 1.0,
                time_homogeneous: false,
                initial_state: vec![0.0; n],
                domain: (-10.0, 10.0),
                probe_box: (-10.0, 10.0),
            },
        }
    }

    /// Scalar drift of a one-dimensional state.
    pub fn drift_scalar(&self, t: f64, x: f64, v: &[f64]) -> f64 {
        let mut out = [0.0];
        (self.drift)(t, &[x], v, &mut out);
        out[0]
    }

    /// Diffusion row `σ(t, x, v) ∈ R^{1×d}` of a one-dimensional state.
    pub fn diffusion_row(&self, t: f64, x: f64, v: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, &[x], v, out);
    }

    pub fn terminal_at(&self, x: f64) -> f64 {
        (self.terminal)(&[x])
    }

    pub fn obstacle_at(&self, t: f64, x: f64) -> f64 {
        (self.obstacle)(t, &[x])
    }

    /// Discretized control set used by every grid solver.
    pub fn control_grid(&self) -> Vec<Vec<f64>> {
        self.controls.grid()
    }

    /// Replaces the box discretization count on every axis.
    pub fn with_control_count(mut self, count: usize) -> Self {
        if let ControlSet::Box { counts, .. } = &mut self.controls {
            counts.iter_mut().for_each(|c| *c = count);
        }
        self
    }

    pub fn with_driver<F>(mut self, driver: F) -> Self
    where
        F: Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.driver = Arc::new(driver);
        self
    }

    pub fn with_obstacle<F>(mut self, obstacle: F) -> Self
    where
        F: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.obstacle = Arc::new(obstacle);
        self
    }

    pub fn with_terminal<F>(mut self, terminal: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        self.terminal = Arc::new(terminal);
        self
    }
}

/// Builder for [`ProblemSpec`]; the `scalar_*` setters cover the common
/// `n = d = 1` case.
pub struct ProblemBuilder {
    spec: ProblemSpec,
}

impl ProblemBuilder {
    pub fn drift<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.spec.drift = Arc::new(f);
        self
    }

    pub fn diffusion<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.spec.diffusion = Arc::new(f);
        self
    }

    pub fn driver<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.spec.driver = Arc::new(f);
        self
    }

    pub fn terminal<F>(mut self, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        self.spec.terminal = Arc::new(f);
        self
    }

    pub fn obstacle<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.spec.obstacle = Arc::new(f);
        self
    }

    pub fn scalar_drift<F>(self, f: F) -> Self
    where
        F: Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.drift(move |t, x, v, out| out[0] = f(t, x[0], v))
    }

    pub fn scalar_diffusion<F>(self, f: F) -> Self
    where
        F: Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.diffusion(move |t, x, v, out| out[0] = f(t, x[0], v))
    }

    /// Driver of a scalar state and scalar Brownian motion: `g(t, x, y, z, v)`.
    pub fn scalar_driver<F>(self, f: F) -> Self
    where
        F: Fn(f64, f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.driver(move |t, x, y, z, v| f(t, x[0], y, z[0], v))
    }

    pub fn scalar_terminal<F>(self, f: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.terminal(move |x| f(x[0]))
    }

    pub fn scalar_obstacle<F>(self, f: F) -> Self
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        self.obstacle(move |t, x| f(t, x[0]))
    }

    pub fn controls(mut self, controls: ControlSet) -> Self {
        self.spec.controls = controls;
        self
    }

    pub fn horizon(mut self, horizon: f64) -> Self {
        self.spec.horizon = horizon;
        self
    }

    pub fn lipschitz(mut self, lipschitz: f64) -> Self {
        self.spec.lipschitz = lipschitz;
        self
    }

    pub fn time_homogeneous(mut self, yes: bool) -> Self {
        self.spec.time_homogeneous = yes;
        self
    }

    pub fn initial_state(mut self, x0: Vec<f64>) -> Self {
        self.spec.initial_state = x0;
        self
    }

    pub fn domain(mut self, lo: f64, hi: f64) -> Self {
        self.spec.domain = (lo, hi);
        self
    }

    pub fn probe_box(mut self, lo: f64, hi: f64) -> Self {
        self.spec.probe_box = (lo, hi);
        self
    }

    pub fn build(self) -> Result<ProblemSpec, ProblemError> {
        let spec = self.spec;
        if spec.state_dim == 0 || spec.brownian_dim == 0 || spec.control_dim == 0 {
            return Err(ProblemError::InvalidSpec(
                "state, Brownian and control dimensions must be positive".into(),
            ));
        }
        spec.controls.validate()?;
        if spec.controls.dim() != spec.control_dim {
            return Err(ProblemError::InvalidSpec(format!(
                "control set has dimension {}, expected {}",
                spec.controls.dim(),
                spec.control_dim
            )));
        }
        if !(spec.horizon > 0.0 && spec.horizon.is_finite()) {
            return Err(ProblemError::InvalidSpec("horizon must be positive".into()));
        }
        if !(spec.lipschitz > 0.0 && spec.lipschitz.is_finite()) {
            return Err(ProblemError::InvalidSpec(
                "Lipschitz constant must be positive".into(),
            ));
        }
        if spec.initial_state.len() != spec.state_dim {
            return Err(ProblemError::InvalidSpec(
                "initial state has the wrong dimension".into(),
            ));
        }
        if !(spec.domain.0 < spec.domain.1) || !(spec.probe_box.0 < spec.probe_box.1) {
            return Err(ProblemError::InvalidSpec(
                "domain and probe box must be non-empty intervals".into(),
            ));
        }
        Ok(spec)
    }
}

/// Largest sampled difference quotient of each coefficient.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LipschitzQuotients {
    pub drift: f64,
    pub diffusion: f64,
    pub driver: f64,
    pub terminal: f64,
    pub obstacle: f64,
}

impl LipschitzQuotients {
    pub fn get(&self, c: Coefficient) -> f64 {
        match c {
            Coefficient::Drift => self.drift,
            Coefficient::Diffusion => self.diffusion,
            Coefficient::Driver => self.driver,
            Coefficient::Terminal => self.terminal,
            Coefficient::Obstacle => self.obstacle,
        }
    }

    fn slot(&mut self, c: Coefficient) -> &mut f64 {
        match c {
            Coefficient::Drift => &mut self.drift,
            Coefficient::Diffusion => &mut self.diffusion,
            Coefficient::Driver => &mut self.driver,
            Coefficient::Terminal => &mut self.terminal,
            Coefficient::Obstacle => &mut self.obstacle,
        }
    }

    pub fn max(&self) -> f64 {
        [
            self.drift,
            self.diffusion,
            self.driver,
            self.terminal,
            self.obstacle,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// A probe pair whose quotient exceeded the declared constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub coefficient: Coefficient,
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub quotient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub max_lipschitz: LipschitzQuotients,
    pub violations: Vec<Violation>,
    /// Probe states where `Φ(x) < h(T, x)`.
    pub terminal_conflicts: Vec<Vec<f64>>,
    /// Every quotient is within `lipschitz × (1 + 1e-6)`.
    pub passed: bool,
}

impl AssumptionReport {
    /// Lipschitz bounds hold and the terminal value dominates the obstacle.
    pub fn admissible(&self) -> bool {
        self.passed && self.terminal_conflicts.is_empty()
    }
}

/// Samples `probes` random pairs `(t, x, x', y, y', z, z', v, v')` from
/// `[0, T] × probe_box^n × probe_box × probe_box^d × U` and records the
/// largest difference quotient of every coefficient.
///
/// Deterministic for a fixed `seed`.
pub fn validate_spec(
    spec: &ProblemSpec,
    probes: usize,
    seed: u64,
) -> Result<AssumptionReport, ProblemError> {
    if probes == 0 {
        return Err(ProblemError::InvalidParams("probes must be at least 1".into()));
    }
    let (n, d) = (spec.state_dim, spec.brownian_dim);
    let (lo, hi) = spec.probe_box;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = spec.lipschitz * (1.0 + LIPSCHITZ_SLACK);

    let mut quotients = LipschitzQuotients::default();
    let mut violations = Vec::new();
    let mut terminal_conflicts = Vec::new();

    let mut b1 = vec![0.0; n];
    let mut b2 = vec![0.0; n];
    let mut s1 = vec![0.0; n * d];
    let mut s2 = vec![0.0; n * d];

    for _ in 0..probes {
        let t = rng.random_range(0.0..=spec.horizon);
        let x1: Vec<f64> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
        let v1 = spec.controls.sample(&mut rng);
        let v2 = spec.controls.sample(&mut rng);
        let y1 = rng.random_range(lo..=hi);
        let y2 = rng.random_range(lo..=hi);
        let z1: Vec<f64> = (0..d).map(|_| rng.random_range(lo..=hi)).collect();
        let z2: Vec<f64> = (0..d).map(|_| rng.random_range(lo..=hi)).collect();

        let dx = distance(&x1, &x2);
        let dv = distance(&v1, &v2);
        let dy = (y1 - y2).abs();
        let dz = distance(&z1, &z2);

        (spec.drift)(t, &x1, &v1, &mut b1);
        (spec.drift)(t, &x2, &v2, &mut b2);
        check_finite(Coefficient::Drift, t, &x1, &b1)?;
        check_finite(Coefficient::Drift, t, &x2, &b2)?;
        (spec.diffusion)(t, &x1, &v1, &mut s1);
        (spec.diffusion)(t, &x2, &v2, &mut s2);
        check_finite(Coefficient::Diffusion, t, &x1, &s1)?;
        check_finite(Coefficient::Diffusion, t, &x2, &s2)?;
        let g1 = (spec.driver)(t, &x1, y1, &z1, &v1);
        let g2 = (spec.driver)(t, &x2, y2, &z2, &v2);
        check_finite(Coefficient::Driver, t, &x1, &[g1, g2])?;
        let p1 = (spec.terminal)(&x1);
        let p2 = (spec.terminal)(&x2);
        check_finite(Coefficient::Terminal, t, &x1, &[p1, p2])?;
        let h1 = (spec.obstacle)(t, &x1);
        let h2 = (spec.obstacle)(t, &x2);
        check_finite(Coefficient::Obstacle, t, &x1, &[h1, h2])?;
        let h_terminal = (spec.obstacle)(spec.horizon, &x1);
        check_finite(Coefficient::Obstacle, spec.horizon, &x1, &[h_terminal])?;

        let samples = [
            (Coefficient::Drift, distance(&b1, &b2), dx + dv),
            (Coefficient::Diffusion, distance(&s1, &s2), dx + dv),
            (Coefficient::Driver, (g1 - g2).abs(), dx + dy + dz + dv),
            (Coefficient::Terminal, (p1 - p2).abs(), dx),
            (Coefficient::Obstacle, (h1 - h2).abs(), dx),
        ];
        for (coefficient, numerator, denominator) in samples {
            if denominator <= 0.0 {
                continue;
            }
            let q = numerator / denominator;
            let slot = quotients.slot(coefficient);
            *slot = slot.max(q);
            if q > bound {
                violations.push(Violation {
                    coefficient,
                    t,
                    x: x1.clone(),
                    v: v1.clone(),
                    quotient: q,
                });
            }
        }

        if p1 < h_terminal {
            terminal_conflicts.push(x1.clone());
        }
    }

    let passed = quotients.max() <= bound;
    Ok(AssumptionReport {
        max_lipschitz: quotients,
        violations,
        terminal_conflicts,
        passed,
    })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_finite(
    coefficient: Coefficient,
    t: f64,
    x: &[f64],
    values: &[f64],
) -> Result<(), ProblemError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ProblemError::NonFiniteCoefficient {
            coefficient,
            t,
            x: x.to_vec(),
        })
    }
}

/// Names accepted by [`builtin_problem`].
pub const BUILTIN_PROBLEMS: [&str; 5] = [
    "american_put",
    "controlled_drift",
    "constant_obstacle",
    "inactive_obstacle",
    "nonlinear_driver_put",
];

/// Name + parameters, as found in a configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl ProblemConfig {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn build(&self) -> Result<ProblemSpec, ProblemError> {
        builtin_problem(&self.name, &self.params)
    }
}

struct Params<'a> {
    given: &'a BTreeMap<String, f64>,
}

impl<'a> Params<'a> {
    fn new(given: &'a BTreeMap<String, f64>, allowed: &[&str]) -> Result<Self, ProblemError> {
        if let Some(key) = given.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(ProblemError::InvalidParams(format!(
                "unexpected parameter `{key}` (allowed: {})",
                allowed.join(", ")
            )));
        }
        if let Some((key, _)) = given.iter().find(|(_, v)| !v.is_finite()) {
            return Err(ProblemError::InvalidParams(format!("`{key}` is not finite")));
        }
        Ok(Self { given })
    }

    fn get(&self, key: &str, default: f64) -> f64 {
        self.given.get(key).copied().unwrap_or(default)
    }

    fn positive(&self, key: &str, default: f64) -> Result<f64, ProblemError> {
        let value = self.get(key, default);
        if value > 0.0 {
            Ok(value)
        } else {
            Err(ProblemError::InvalidParams(format!(
                "`{key}` must be positive, got {value}"
            )))
        }
    }

    fn non_negative(&self, key: &str, default: f64) -> Result<f64, ProblemError> {
        let value = self.get(key, default);
        if value >= 0.0 {
            Ok(value)
        } else {
            Err(ProblemError::InvalidParams(format!(
                "`{key}` must be non-negative, got {value}"
            )))
        }
    }

    fn count(&self, key: &str, default: usize) -> Result<usize, ProblemError> {
        let value = self.get(key, default as f64);
        if value >= 2.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            Err(ProblemError::InvalidParams(format!(
                "`{key}` must be an integer ≥ 2, got {value}"
            )))
        }
    }
}

/// Builds one of the benchmark problems in [`BUILTIN_PROBLEMS`].
///
/// Missing parameters take their defaults:
///
/// | problem | parameters |
/// |---|---|
/// | `american_put` | `S0=100, K=100, r=0.05, vol=0.2, T=1` |
/// | `nonlinear_driver_put` | as above plus `lambda=0.1` |
/// | `controlled_drift` | `vmax=1, T=1, controls=21` |
/// | `constant_obstacle` | `c=5, T=1` |
/// | `inactive_obstacle` | `sigma=1, T=1` |
pub fn builtin_problem(
    name: &str,
    params: &BTreeMap<String, f64>,
) -> Result<ProblemSpec, ProblemError> {
    match name {
        "american_put" => {
            let p = Params::new(params, &["S0", "K", "r", "vol", "T"])?;
            put_problem(name, &p, 0.0)
        }
        "nonlinear_driver_put" => {
            let p = Params::new(params, &["S0", "K", "r", "vol", "T", "lambda"])?;
            let lambda = p.non_negative("lambda", 0.1)?;
            put_problem(name, &p, lambda)
        }
        "controlled_drift" => {
            let p = Params::new(params, &["vmax", "T", "controls"])?;
            let vmax = p.positive("vmax", 1.0)?;
            let horizon = p.positive("T", 1.0)?;
            let count = p.count("controls", DEFAULT_CONTROL_COUNT)?;
            ProblemSpec::builder(name, 1, 1, 1)
                .scalar_drift(|_, _, v| v[0])
                .scalar_diffusion(|_, _, _| 1.0)
                .scalar_terminal(|x| x)
                .controls(ControlSet::interval(-vmax, vmax, count))
                .horizon(horizon)
                .lipschitz(1.0)
                .time_homogeneous(true)
                .domain(-15.0, 15.0)
                .build()
        }
        "constant_obstacle" => {
            let p = Params::new(params, &["c", "T"])?;
            let c = p.get("c", 5.0);
            let horizon = p.positive("T", 1.0)?;
            ProblemSpec::builder(name, 1, 1, 1)
                .scalar_diffusion(|_, _, _| 1.0)
                .scalar_terminal(move |_| c)
                .scalar_obstacle(move |_, _| c)
                .horizon(horizon)
                .lipschitz(1.0)
                .time_homogeneous(true)
                .domain(-15.0, 15.0)
                .build()
        }
        "inactive_obstacle" => {
            let p = Params::new(params, &["sigma", "T"])?;
            let sigma = p.positive("sigma", 1.0)?;
            let horizon = p.positive("T", 1.0)?;
            ProblemSpec::builder(name, 1, 1, 1)
                .scalar_diffusion(move |_, _, _| sigma)
                .scalar_terminal(|x| x)
                .horizon(horizon)
                .lipschitz(sigma.max(1.0))
                .time_homogeneous(true)
                .domain(-15.0 * sigma, 15.0 * sigma)
                .build()
        }
        other => Err(ProblemError::UnknownProblem(other.to_string())),
    }
}

fn put_problem(name: &str, p: &Params<'_>, lambda: f64) -> Result<ProblemSpec, ProblemError> {
    let s0 = p.positive("S0", 100.0)?;
    let strike = p.positive("K", 100.0)?;
    let rate = p.non_negative("r", 0.05)?;
    let vol = p.positive("vol", 0.2)?;
    let horizon = p.positive("T", 1.0)?;
    let payoff = move |x: f64| (strike - x).max(0.0);
    ProblemSpec::builder(name, 1, 1, 1)
        .scalar_drift(move |_, x, _| rate * x)
        .scalar_diffusion(move |_, x, _| vol * x)
        .scalar_driver(move |_, _, y, z, _| -rate * y - lambda * z.abs())
        .scalar_terminal(payoff)
        .scalar_obstacle(move |_, x| payoff(x))
        .horizon(horizon)
        .lipschitz(rate.max(vol).max(lambda).max(1.0))
        .time_homogeneous(true)
        .initial_state(vec![s0])
        .domain(0.2 * strike, 3.0 * strike)
        .build()
}
