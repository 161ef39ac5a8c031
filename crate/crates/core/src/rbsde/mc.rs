use nalgebra::{DMatrix, DVector};

use super::{Layout, RbsdeError, RbsdeSolution};
use crate::forward_sim::PathBundle;
use crate::problem::{ObstacleFn, ProblemSpec};

/// Axes whose sample spread is below this are treated as constant.
const COLLAPSE_TOL: f64 = 1e-12;

/// Regression Monte Carlo for the reflected equation on simulated paths.
///
/// Each step regresses the pathwise value `V_{i+1}` and `V_{i+1} ΔW_i / Δt`
/// on polynomials of total degree `≤ basis_degree` in the standardized state,
/// giving `Ŷ` and `Z`. The reported value is the projected driver step
/// `Y_i = max(Ŷ + g(t_i, X_i, Ŷ, Z) Δt, h)`. The pathwise value carried to
/// the next regression stops at the barrier where the projection is active
/// and otherwise keeps the realized continuation:
///
/// ```text
/// V_i = h                                  if Ŷ + gΔt < h
/// V_i = V_{i+1} + g(t_i, X_i, Ŷ, Z) Δt     otherwise
/// ```
///
/// Regressing the realized continuation rather than the fitted one keeps the
/// regression error from compounding through the maximum at every step.
/// Controls are read from the bundle.
///
/// `strata` optionally labels each path with an event known at every step;
/// regressions are then run separately per label.
pub fn solve_rbsde_mc(
    spec: &ProblemSpec,
    bundle: &PathBundle,
    terminal_values: &[f64],
    obstacle: &ObstacleFn,
    basis_degree: usize,
    strata: Option<&[usize]>,
) -> Result<RbsdeSolution, RbsdeError> {
    let paths = bundle.paths;
    let steps = bundle.steps();
    let rows = steps + 1;
    let d = bundle.brownian_dim;
    if basis_degree == 0 {
        return Err(RbsdeError::InvalidInput("basis degree must be at least 1".into()));
    }
    if terminal_values.len() != paths {
        return Err(RbsdeError::ShapeMismatch(format!(
            "{} terminal values for {paths} paths",
            terminal_values.len()
        )));
    }
    if bundle.state_dim != spec.state_dim || d != spec.brownian_dim {
        return Err(RbsdeError::ShapeMismatch(
            "bundle dimensions do not match the problem".into(),
        ));
    }
    let labels: Vec<usize> = match strata {
        Some(s) if s.len() != paths => {
            return Err(RbsdeError::ShapeMismatch(format!(
                "{} strata labels for {paths} paths",
                s.len()
            )))
        }
        Some(s) => s.to_vec(),
        None => vec![0; paths],
    };
    let groups = group_paths(&labels);

    let mut y = vec![0.0; rows * paths];
    let mut z = vec![0.0; rows * paths * d];
    let mut dk = vec![0.0; rows * paths];
    let mut s = vec![0.0; rows * paths];

    let t_end = bundle.times[steps];
    for p in 0..paths {
        let h = obstacle(t_end, bundle.state(p, steps));
        if terminal_values[p] < h {
            return Err(RbsdeError::TerminalObstacleConflict {
                column: p,
                terminal: terminal_values[p],
                obstacle: h,
            });
        }
        y[steps * paths + p] = terminal_values[p];
        s[steps * paths + p] = h;
    }

    let mut value: Vec<f64> = terminal_values.to_vec();
    let mut targets = vec![0.0; paths * (1 + d)];
    let mut fitted = vec![0.0; paths * (1 + d)];
    let mut decision = vec![0.0; paths * (1 + d)];
    let mut barrier = vec![0.0; paths];
    let mut can_stop = vec![false; paths];
    for i in (0..steps).rev() {
        let t = bundle.times[i];
        let dt = bundle.dt(i);
        for p in 0..paths {
            let next = value[p];
            let dw = bundle.increment(p, i);
            targets[p * (1 + d)] = next;
            for k in 0..d {
                targets[p * (1 + d) + 1 + k] = next * dw[k] / dt;
            }
        }
        for p in 0..paths {
            barrier[p] = obstacle(t, bundle.state(p, i));
        }
        for group in &groups {
            regress(bundle, i, group, basis_degree, 1 + d, &targets, &mut fitted)?;
            // The barrier can only bind where it exceeds the smallest pathwise
            // value; the stopping decision is fitted on those paths alone.
            let floor = group.iter().map(|&p| value[p]).fold(f64::INFINITY, f64::min);
            let live: Vec<usize> = group.iter().copied().filter(|&p| barrier[p] > floor).collect();
            for &p in group {
                can_stop[p] = barrier[p] > floor;
            }
            if regress(bundle, i, &live, basis_degree, 1 + d, &targets, &mut decision).is_err() {
                for &p in &live {
                    decision[p * (1 + d)..(p + 1) * (1 + d)]
                        .copy_from_slice(&fitted[p * (1 + d)..(p + 1) * (1 + d)]);
                }
            }
        }
        for p in 0..paths {
            let x = bundle.state(p, i);
            let v = bundle.control(p, i);
            let row = p * (1 + d)..(p + 1) * (1 + d);
            let cont = fitted[row.start];
            let zp = &fitted[row.start + 1..row.end];
            let step = cont + (spec.driver)(t, x, cont, zp, v) * dt;
            let realized = value[p] + (spec.driver)(t, x, value[p], zp, v) * dt;
            if !step.is_finite() || !realized.is_finite() {
                return Err(RbsdeError::NonFiniteDriver { step: i, column: p });
            }
            let h = barrier[p];
            let idx = i * paths + p;
            if step < h {
                y[idx] = h;
                dk[idx] = h - step;
            } else {
                y[idx] = step;
            }
            let guide = &decision[row];
            let stop = can_stop[p]
                && guide[0] + (spec.driver)(t, x, guide[0], &guide[1..], v) * dt < h;
            value[p] = if stop { h } else { realized };
            s[idx] = h;
            z[idx * d..(idx + 1) * d].copy_from_slice(zp);
        }
    }

    Ok(RbsdeSolution {
        layout: Layout::Paths,
        times: bundle.times.clone(),
        x: Vec::new(),
        columns: paths,
        noise_dim: d,
        y,
        z,
        dk,
        obstacle: s,
        controls: Vec::new(),
    })
}

fn group_paths(labels: &[usize]) -> Vec<Vec<usize>> {
    let mut map = std::collections::BTreeMap::<usize, Vec<usize>>::new();
    for (p, &l) in labels.iter().enumerate() {
        map.entry(l).or_default().push(p);
    }
    map.into_values().collect()
}

/// Exponent tuples of total degree `≤ degree` in `dims` variables, constant
/// first.
fn exponents(dims: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; dims]];
    for total in 1..=degree {
        let mut current = vec![0; dims];
        fill(&mut out, &mut current, 0, total);
    }
    out
}

fn fill(out: &mut Vec<Vec<usize>>, current: &mut Vec<usize>, axis: usize, left: usize) {
    if axis + 1 == current.len() {
        current[axis] = left;
        out.push(current.clone());
        return;
    }
    for e in (0..=left).rev() {
        current[axis] = e;
        fill(out, current, axis + 1, left - e);
    }
}

/// Least squares of `targets` (`width` columns per path) on the polynomial
/// basis, written into `fitted` for the paths in `group`.
fn regress(
    bundle: &PathBundle,
    step: usize,
    group: &[usize],
    degree: usize,
    width: usize,
    targets: &[f64],
    fitted: &mut [f64],
) -> Result<(), RbsdeError> {
    let n = bundle.state_dim;
    let count = group.len() as f64;
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    for &p in group {
        for (a, x) in bundle.state(p, step).iter().enumerate() {
            mean[a] += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for &p in group {
        for (a, x) in bundle.state(p, step).iter().enumerate() {
            var[a] += (x - mean[a]).powi(2);
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
    let active: Vec<usize> = (0..n)
        .filter(|&a| scale[a] > COLLAPSE_TOL * (1.0 + mean[a].abs()))
        .collect();

    if active.is_empty() {
        // Collapsed support: the conditional expectation is the sample mean.
        let mut avg = vec![0.0; width];
        for &p in group {
            for c in 0..width {
                avg[c] += targets[p * width + c];
            }
        }
        for &p in group {
            for c in 0..width {
                fitted[p * width + c] = avg[c] / count;
            }
        }
        return Ok(());
    }

    let powers = exponents(active.len(), degree);
    let k = powers.len();
    if group.len() < k {
        return Err(RbsdeError::SingularRegression {
            step,
            reason: format!("{} paths for {k} basis functions", group.len()),
        });
    }
    let basis = |p: usize, row: &mut [f64]| {
        let x = bundle.state(p, step);
        let u: Vec<f64> = active.iter().map(|&a| (x[a] - mean[a]) / scale[a]).collect();
        for (r, e) in row.iter_mut().zip(&powers) {
            *r = e.iter().zip(&u).map(|(&e, &u)| u.powi(e as i32)).product();
        }
    };

    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DMatrix::<f64>::zeros(k, width);
    let mut row = vec![0.0; k];
    for &p in group {
        basis(p, &mut row);
        for a in 0..k {
            for b in 0..=a {
                gram[(a, b)] += row[a] * row[b];
            }
            for c in 0..width {
                rhs[(a, c)] += row[a] * targets[p * width + c];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    let chol = gram.cholesky().ok_or_else(|| RbsdeError::SingularRegression {
        step,
        reason: "normal equations are not positive definite".into(),
    })?;
    let coef = chol.solve(&rhs);
    let mut phi = DVector::<f64>::zeros(k);
    for &p in group {
        basis(p, phi.as_mut_slice());
        for c in 0..width {
            fitted[p * width + c] = phi.dot(&coef.column(c));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_sim::{simulate, ControlPolicy, ControlPath, SimConfig};
    use crate::problem::{builtin_problem, INACTIVE_OBSTACLE};
    use std::collections::BTreeMap;

    fn bundle(spec: &ProblemSpec, x0: f64, paths: usize, steps: usize) -> PathBundle {
        simulate(
            spec,
            &ControlPolicy::Fixed(ControlPath::constant(vec![0.0], steps)),
            &[x0],
            SimConfig { t0: 0.0, t1: spec.horizon, steps, paths, seed: 5 },
        )
        .unwrap()
    }

    #[test]
    fn exponent_sets() {
        assert_eq!(exponents(1, 3), vec![vec![0], vec![1], vec![2], vec![3]]);
        assert_eq!(exponents(2, 2).len(), 6);
        assert_eq!(exponents(3, 4).len(), 35);
    }

    #[test]
    fn deterministic_paths_average_the_terminal() {
        let spec = ProblemSpec::builder("still", 1, 1, 1).build().unwrap();
        let b = bundle(&spec, 0.0, 10, 4);
        let terminal: Vec<f64> = (0..10).map(|p| p as f64).collect();
        let sol = solve_rbsde_mc(&spec, &b, &terminal, &|_, _| INACTIVE_OBSTACLE, 2, None).unwrap();
        assert!((sol.initial_value(0.0) - 4.5).abs() < 1e-12);
        assert_eq!(sol.total_push(), 0.0);
    }

    #[test]
    fn constant_barrier_holds_on_any_bundle() {
        let spec = builtin_problem("constant_obstacle", &BTreeMap::new()).unwrap();
        let b = bundle(&spec, 0.0, 500, 10);
        let sol = solve_rbsde_mc(&spec, &b, &vec![5.0; 500], spec.obstacle.as_ref(), 3, None).unwrap();
        assert!(sol.y.iter().all(|&v| (v - 5.0).abs() < 1e-9));
        assert!(sol.min_gap() >= 0.0);
        assert_eq!(sol.skorokhod_sum(), 0.0);
    }

    #[test]
    fn linear_terminal_is_reproduced() {
        // E[X_T | X_t] = X_t for a driftless diffusion, exactly representable.
        let spec = ProblemSpec::builder("bm", 1, 1, 1)
            .scalar_diffusion(|_, _, _| 1.0)
            .build()
            .unwrap();
        let b = bundle(&spec, 0.0, 2000, 8);
        let terminal: Vec<f64> = (0..2000).map(|p| b.state(p, 8)[0]).collect();
        let sol = solve_rbsde_mc(&spec, &b, &terminal, &|_, _| INACTIVE_OBSTACLE, 1, None).unwrap();
        for p in 0..2000 {
            assert!((sol.y_at(4, p) - b.state(p, 4)[0]).abs() < 0.2);
        }
        // Z ≈ 1.
        let zbar: f64 = (0..2000).map(|p| sol.z_at(4, p)[0]).sum::<f64>() / 2000.0;
        assert!((zbar - 1.0).abs() < 0.1);
    }

    #[test]
    fn too_few_paths_is_singular() {
        let spec = ProblemSpec::builder("bm", 1, 1, 1)
            .scalar_diffusion(|_, _, _| 1.0)
            .build()
            .unwrap();
        let b = bundle(&spec, 0.0, 3, 4);
        let terminal = vec![0.0; 3];
        let err = solve_rbsde_mc(&spec, &b, &terminal, &|_, _| INACTIVE_OBSTACLE, 4, None).unwrap_err();
        assert!(matches!(err, RbsdeError::SingularRegression { .. }));
    }

    #[test]
    fn input_checks() {
        let spec = ProblemSpec::builder("bm", 1, 1, 1).build().unwrap();
        let b = bundle(&spec, 0.0, 4, 2);
        assert!(matches!(
            solve_rbsde_mc(&spec, &b, &[0.0; 4], &|_, _| 0.0, 0, None),
            Err(RbsdeError::InvalidInput(_))
        ));
        assert!(matches!(
            solve_rbsde_mc(&spec, &b, &[0.0; 3], &|_, _| 0.0, 1, None),
            Err(RbsdeError::ShapeMismatch(_))
        ));
        assert!(matches!(
            solve_rbsde_mc(&spec, &b, &[0.0; 4], &|_, _| 1.0, 1, None),
            Err(RbsdeError::TerminalObstacleConflict { .. })
        ));
        assert!(matches!(
            solve_rbsde_mc(&spec, &b, &[0.0; 4], &|_, _| 0.0, 1, Some(&[0, 1])),
            Err(RbsdeError::ShapeMismatch(_))
        ));
    }
}
