//! Euler–Maruyama simulation of the controlled forward system.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::problem::ProblemSpec;
use crate::rng::{NormalStream, FORWARD_TAG};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation setup: {0}")]
    InvalidConfig(String),
    #[error("state is not finite on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },
    #[error("control on path {path} at step {step} is outside U")]
    ControlOutsideSet { path: usize, step: usize },
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
}

/// Markov feedback `(t, x) ↦ v`.
pub type FeedbackFn = dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync;

/// Deterministic control per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath(pub Vec<Vec<f64>>);

impl ControlPath {
    pub fn constant(v: Vec<f64>, steps: usize) -> Self {
        ControlPath(vec![v; steps])
    }

    pub fn steps(&self) -> usize {
        self.0.len()
    }
}

#[derive(Clone)]
pub enum ControlPolicy {
    Feedback(Arc<FeedbackFn>),
    /// Same deterministic path for every simulated path.
    Fixed(ControlPath),
    /// Path `p` follows `paths[selector[p]]`; used to paste controls on a
    /// partition of the sample space.
    Selected {
        paths: Vec<ControlPath>,
        selector: Vec<usize>,
    },
}

impl ControlPolicy {
    pub fn feedback<F>(f: F) -> Self
    where
        F: Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        ControlPolicy::Feedback(Arc::new(f))
    }

    fn control(&self, path: usize, step: usize, t: f64, x: &[f64]) -> Vec<f64> {
        match self {
            ControlPolicy::Feedback(f) => f(t, x),
            ControlPolicy::Fixed(p) => p.0[step].clone(),
            ControlPolicy::Selected { paths, selector } => paths[selector[path]].0[step].clone(),
        }
    }

    fn validate(&self, steps: usize, paths: usize) -> Result<(), SimError> {
        let check = |p: &ControlPath| {
            if p.steps() < steps {
                Err(SimError::InvalidConfig(format!(
                    "control path has {} steps, need {steps}",
                    p.steps()
                )))
            } else {
                Ok(())
            }
        };
        match self {
            ControlPolicy::Feedback(_) => Ok(()),
            ControlPolicy::Fixed(p) => check(p),
            ControlPolicy::Selected {
                paths: options,
                selector,
            } => {
                options.iter().try_for_each(check)?;
                if selector.len() != paths || selector.iter().any(|&s| s >= options.len()) {
                    return Err(SimError::InvalidConfig(
                        "selector must name a control path for every simulated path".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
}

/// Simulated paths, stored path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub times: Vec<f64>,
    pub state_dim: usize,
    pub brownian_dim: usize,
    pub control_dim: usize,
    pub paths: usize,
    /// `[path][step][n]`, `steps + 1` states per path.
    pub states: Vec<f64>,
    /// `[path][step][d]`
    pub increments: Vec<f64>,
    /// `[path][step][k]`
    pub controls: Vec<f64>,
    pub seed: u64,
}

impl PathBundle {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let n = self.state_dim;
        let base = (path * (self.steps() + 1) + step) * n;
        &self.states[base..base + n]
    }

    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let d = self.brownian_dim;
        let base = (path * self.steps() + step) * d;
        &self.increments[base..base + d]
    }

    pub fn control(&self, path: usize, step: usize) -> &[f64] {
        let k = self.control_dim;
        let base = (path * self.steps() + step) * k;
        &self.controls[base..base + k]
    }

    pub fn dt(&self, step: usize) -> f64 {
        self.times[step + 1] - self.times[step]
    }

    /// Writes `path_id,step,t,x0,x1,…`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path_id".to_string(), "step".into(), "t".into()];
        header.extend((0..self.state_dim).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for p in 0..self.paths {
            for (i, t) in self.times.iter().enumerate() {
                let mut row = vec![p.to_string(), i.to_string(), t.to_string()];
                row.extend(self.state(p, i).iter().map(f64::to_string));
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Simulates `X_{i+1} = X_i + b(t_i, X_i, v_i) Δt + σ(t_i, X_i, v_i) ΔW_i`
/// on `cfg.paths` paths from `x0`.
///
/// The increments of path `p` at step `i` depend only on `(seed, p, i)`;
/// paths are generated in parallel.
pub fn simulate(
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    x0: &[f64],
    cfg: SimConfig,
) -> Result<PathBundle, SimError> {
    let (n, d, k) = (spec.state_dim, spec.brownian_dim, spec.control_dim);
    if cfg.steps == 0 || cfg.paths == 0 {
        return Err(SimError::InvalidConfig("need at least one step and one path".into()));
    }
    if !(cfg.t1 > cfg.t0) {
        return Err(SimError::InvalidConfig(format!(
            "empty window [{}, {}]",
            cfg.t0, cfg.t1
        )));
    }
    if x0.len() != n {
        return Err(SimError::InvalidConfig(format!(
            "initial state has dimension {}, expected {n}",
            x0.len()
        )));
    }
    policy.validate(cfg.steps, cfg.paths)?;

    let steps = cfg.steps;
    let dt = (cfg.t1 - cfg.t0) / steps as f64;
    let times: Vec<f64> = (0..=steps)
        .map(|i| if i == steps { cfg.t1 } else { cfg.t0 + dt * i as f64 })
        .collect();

    let mut states = vec![0.0; cfg.paths * (steps + 1) * n];
    let mut increments = vec![0.0; cfg.paths * steps * d];
    let mut controls = vec![0.0; cfg.paths * steps * k];

    let failures: Vec<SimError> = states
        .par_chunks_mut((steps + 1) * n)
        .zip(increments.par_chunks_mut(steps * d))
        .zip(controls.par_chunks_mut(steps * k))
        .enumerate()
        .filter_map(|(path, ((xs, dws), vs))| {
            simulate_path(spec, policy, x0, &times, cfg.seed, path, xs, dws, vs).err()
        })
        .collect();
    if let Some(first) = failures.into_iter().min_by_key(|e| match e {
        SimError::NonFiniteState { path, .. } | SimError::ControlOutsideSet { path, .. } => *path,
        _ => 0,
    }) {
        return Err(first);
    }

    Ok(PathBundle {
        times,
        state_dim: n,
        brownian_dim: d,
        control_dim: k,
        paths: cfg.paths,
        states,
        increments,
        controls,
        seed: cfg.seed,
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate_path(
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    x0: &[f64],
    times: &[f64],
    seed: u64,
    path: usize,
    xs: &mut [f64],
    dws: &mut [f64],
    vs: &mut [f64],
) -> Result<(), SimError> {
    let (n, d, k) = (spec.state_dim, spec.brownian_dim, spec.control_dim);
    let mut stream = NormalStream::new(seed, FORWARD_TAG, path as u64, d);
    let mut b = vec![0.0; n];
    let mut sigma = vec![0.0; n * d];
    xs[..n].copy_from_slice(x0);
    for i in 0..times.len() - 1 {
        let t = times[i];
        let dt = times[i + 1] - t;
        let (head, tail) = xs.split_at_mut((i + 1) * n);
        let x = &head[i * n..];
        let v = policy.control(path, i, t, x);
        if v.len() != k || !spec.controls.contains(&v) {
            return Err(SimError::ControlOutsideSet { path, step: i });
        }
        vs[i * k..(i + 1) * k].copy_from_slice(&v);

        let dw = &mut dws[i * d..(i + 1) * d];
        stream.fill(i as u64, dw);
        let sqrt_dt = dt.sqrt();
        dw.iter_mut().for_each(|w| *w *= sqrt_dt);

        (spec.drift)(t, x, &v, &mut b);
        (spec.diffusion)(t, x, &v, &mut sigma);
        let next = &mut tail[..n];
        for r in 0..n {
            let noise: f64 = (0..d).map(|c| sigma[r * d + c] * dw[c]).sum();
            next[r] = x[r] + b[r] * dt + noise;
        }
        if next.iter().any(|s| !s.is_finite()) {
            return Err(SimError::NonFiniteState { path, step: i + 1 });
        }
    }
    Ok(())
}

/// `Ê[sup_s |X_s − x0|²] / δ` where `δ` is the simulated window length.
pub fn moment_check(bundle: &PathBundle, x0: &[f64]) -> f64 {
    let delta = bundle.times[bundle.steps()] - bundle.times[0];
    let total: f64 = (0..bundle.paths)
        .map(|p| {
            (0..=bundle.steps())
                .map(|i| sq_distance(bundle.state(p, i), x0))
                .fold(0.0, f64::max)
        })
        .sum();
    total / bundle.paths as f64 / delta
}

/// `Ê[sup_s |X_s − X'_s|²]` for two bundles on the same grid.
pub fn sup_sq_gap(a: &PathBundle, b: &PathBundle) -> Result<f64, SimError> {
    if a.paths != b.paths || a.times != b.times || a.state_dim != b.state_dim {
        return Err(SimError::InvalidConfig("bundles do not share a grid".into()));
    }
    let total: f64 = (0..a.paths)
        .map(|p| {
            (0..=a.steps())
                .map(|i| sq_distance(a.state(p, i), b.state(p, i)))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / a.paths as f64)
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
