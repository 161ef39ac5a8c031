//! Sample versions of the a priori and stability bounds, and the comparison
//! check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Layout, RbsdeError, RbsdeSolution};
use crate::lattice::Lattice;
use crate::problem::ProblemSpec;

/// Chain paths of node indices drawn from one start node, used to form the
/// expectations in the bounds under the lattice's law from time 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub start: usize,
    pub paths: Vec<Vec<usize>>,
}

impl PathSample {
    /// Draws `count` paths with the controls recorded in `sol`.
    pub fn draw(lattice: &Lattice, sol: &RbsdeSolution, start: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let paths = (0..count)
            .map(|_| lattice.sample_path(start, &sol.controls, &mut rng))
            .collect();
        Self { start, paths }
    }

    fn mean<F: Fn(&[usize]) -> f64>(&self, f: F) -> f64 {
        self.paths.iter().map(|p| f(p)).sum::<f64>() / self.paths.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilitySides {
    pub lhs: f64,
    pub rhs: f64,
    /// `E[|Δξ|² + (Σ|Δg(s, Y_s, Z_s)|Δt)²]`
    pub data_term: f64,
    /// `E[sup |ΔS|²]`
    pub barrier_term: f64,
    pub psi: f64,
}

fn lattice_only(sol: &RbsdeSolution) -> Result<(), RbsdeError> {
    if sol.layout != Layout::Lattice {
        return Err(RbsdeError::InvalidInput("bound needs a lattice solution".into()));
    }
    Ok(())
}

/// Data side of the a priori bound along one path from `t_index`:
/// `ξ² + (Σ|g(s, X_s, 0, 0)|Δt)² + sup S²`.
fn data_norm(sol: &RbsdeSolution, spec: &ProblemSpec, lattice: &Lattice, t_index: usize, path: &[usize]) -> f64 {
    let last = sol.rows() - 1;
    let zero = vec![0.0; sol.noise_dim];
    let xi = sol.y_at(last, path[last]);
    let mut g_int = 0.0;
    let mut sup_s: f64 = 0.0;
    for i in t_index..=last {
        let c = path[i];
        sup_s = sup_s.max(sol.obstacle_at(i, c).powi(2));
        if i < last {
            let v = &lattice.controls()[sol.controls[i * sol.columns + c]];
            let dt = sol.times[i + 1] - sol.times[i];
            g_int += (spec.driver)(sol.times[i], &[sol.x[c]], 0.0, &zero, v).abs() * dt;
        }
    }
    xi * xi + g_int * g_int + sup_s
}

/// `(lhs, rhs)` of the a priori bound at fine step `t_index`:
///
/// ```text
/// lhs = E[sup_{s≥t} Y² + Σ|Z|²Δt + (K_T − K_t)²]
/// rhs = E[ξ² + (Σ|g(s,0,0)|Δt)² + sup_{s≥t} S²]
/// ```
pub fn apriori_sides(
    sol: &RbsdeSolution,
    spec: &ProblemSpec,
    lattice: &Lattice,
    t_index: usize,
    sample: &PathSample,
) -> Result<(f64, f64), RbsdeError> {
    lattice_only(sol)?;
    let last = sol.rows() - 1;
    if t_index > last || sample.paths.is_empty() {
        return Err(RbsdeError::InvalidInput(format!(
            "time index {t_index} outside 0..={last} or empty sample"
        )));
    }
    let lhs = sample.mean(|path| {
        let mut sup_y: f64 = 0.0;
        let mut z_int = 0.0;
        let mut k = 0.0;
        for i in t_index..=last {
            let c = path[i];
            sup_y = sup_y.max(sol.y_at(i, c).powi(2));
            if i < last {
                let dt = sol.times[i + 1] - sol.times[i];
                z_int += sol.z_at(i, c).iter().map(|z| z * z).sum::<f64>() * dt;
                k += sol.dk_at(i, c);
            }
        }
        sup_y + z_int + k * k
    });
    let rhs = sample.mean(|path| data_norm(sol, spec, lattice, t_index, path));
    Ok((lhs, rhs))
}

/// Both sides of the stability bound between a base solution and a
/// perturbed one on the same lattice, with fitted constant `c`:
///
/// ```text
/// lhs = E[sup|ΔY|² + Σ|ΔZ|²Δt + |ΔK_T − ΔK_t|²]
/// rhs = C E[|Δξ|² + (Σ|Δg(s,Y_s,Z_s)|Δt)²] + C (E[sup|ΔS|²])^½ Ψ^½
/// ```
///
/// Paths follow the base solution's controls; both solutions are read at the
/// same nodes.
#[allow(clippy::too_many_arguments)]
pub fn stability_sides(
    base: &RbsdeSolution,
    base_spec: &ProblemSpec,
    pert: &RbsdeSolution,
    pert_spec: &ProblemSpec,
    lattice: &Lattice,
    t_index: usize,
    c: f64,
    sample: &PathSample,
) -> Result<StabilitySides, RbsdeError> {
    lattice_only(base)?;
    base.check_shape(pert)?;
    let last = base.rows() - 1;
    if t_index > last || sample.paths.is_empty() {
        return Err(RbsdeError::InvalidInput(format!(
            "time index {t_index} outside 0..={last} or empty sample"
        )));
    }
    let lhs = sample.mean(|path| {
        let mut sup_dy: f64 = 0.0;
        let mut z_int = 0.0;
        let mut dk = 0.0;
        for i in t_index..=last {
            let col = path[i];
            sup_dy = sup_dy.max((base.y_at(i, col) - pert.y_at(i, col)).powi(2));
            if i < last {
                let dt = base.times[i + 1] - base.times[i];
                z_int += base
                    .z_at(i, col)
                    .iter()
                    .zip(pert.z_at(i, col))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    * dt;
                dk += base.dk_at(i, col) - pert.dk_at(i, col);
            }
        }
        sup_dy + z_int + dk * dk
    });
    let data_term = sample.mean(|path| {
        let dxi = base.y_at(last, path[last]) - pert.y_at(last, path[last]);
        let mut dg = 0.0;
        for i in t_index..last {
            let col = path[i];
            let v = &lattice.controls()[base.controls[i * base.columns + col]];
            let x = [base.x[col]];
            let (t, y, z) = (base.times[i], base.y_at(i, col), base.z_at(i, col));
            let gap = (base_spec.driver)(t, &x, y, z, v) - (pert_spec.driver)(t, &x, y, z, v);
            dg += gap.abs() * (base.times[i + 1] - t);
        }
        dxi * dxi + dg * dg
    });
    let barrier_term = sample.mean(|path| {
        (t_index..=last)
            .map(|i| (base.obstacle_at(i, path[i]) - pert.obstacle_at(i, path[i])).powi(2))
            .fold(0.0, f64::max)
    });
    let psi = sample.mean(|path| {
        data_norm(base, base_spec, lattice, t_index, path) + data_norm(pert, pert_spec, lattice, t_index, path)
    });
    let rhs = c * data_term + c * barrier_term.sqrt() * psi.sqrt();
    Ok(StabilitySides {
        lhs,
        rhs,
        data_term,
        barrier_term,
        psi,
    })
}

/// `max |Y − Y'|` over the whole grid.
pub fn sup_abs_gap(a: &RbsdeSolution, b: &RbsdeSolution) -> Result<f64, RbsdeError> {
    a.check_shape(b)?;
    Ok(a.y.iter().zip(&b.y).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// `max (Y_low − Y_high)⁺` over the whole grid; zero when the solutions are
/// ordered.
pub fn comparison_check(low: &RbsdeSolution, high: &RbsdeSolution) -> Result<f64, RbsdeError> {
    low.check_shape(high)?;
    Ok(low
        .y
        .iter()
        .zip(&high.y)
        .map(|(l, h)| (l - h).max(0.0))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeGrid;
    use crate::problem::builtin_problem;
    use crate::rbsde::{solve_reflected_lattice, solve_value_lattice, LatticeControl};
    use std::collections::BTreeMap;

    fn constant(c: f64) -> (ProblemSpec, Lattice, RbsdeSolution) {
        let mut params = BTreeMap::new();
        params.insert("c".to_string(), c);
        let spec = builtin_problem("constant_obstacle", &params).unwrap();
        let lat = Lattice::build(&spec, LatticeGrid::new(0.0, 1.0, 10, -6.0, 6.0, 24)).unwrap();
        let sol = solve_value_lattice(&lat, &spec).unwrap();
        (spec, lat, sol)
    }

    #[test]
    fn apriori_constant_barrier() {
        let (spec, lat, sol) = constant(0.0);
        let sample = PathSample::draw(&lat, &sol, 12, 50, 1);
        assert_eq!(apriori_sides(&sol, &spec, &lat, 0, &sample).unwrap(), (0.0, 0.0));

        let (spec, lat, sol) = constant(5.0);
        let sample = PathSample::draw(&lat, &sol, 12, 50, 1);
        let (lhs, rhs) = apriori_sides(&sol, &spec, &lat, 0, &sample).unwrap();
        assert!((lhs - 25.0).abs() < 1e-12);
        assert!((rhs - 50.0).abs() < 1e-12);
    }

    #[test]
    fn comparison_of_shifted_terminal() {
        let (spec, lat, sol) = constant(5.0);
        assert_eq!(comparison_check(&sol, &sol).unwrap(), 0.0);
        let terminal: Vec<f64> = vec![6.0; lat.nodes()];
        let high =
            solve_reflected_lattice(&lat, &spec, &LatticeControl::Fixed(0), &terminal, spec.obstacle.as_ref())
                .unwrap();
        assert_eq!(comparison_check(&sol, &high).unwrap(), 0.0);
        assert!(comparison_check(&high, &sol).unwrap() > 0.99);
        assert!(sol.y.iter().zip(&high.y).all(|(a, b)| a <= b));
    }

    #[test]
    fn zero_perturbation_has_zero_lhs() {
        let (spec, lat, sol) = constant(5.0);
        let sample = PathSample::draw(&lat, &sol, 12, 20, 2);
        let sides = stability_sides(&sol, &spec, &sol, &spec, &lat, 0, 2.0, &sample).unwrap();
        assert_eq!(sides.lhs, 0.0);
        assert_eq!(sides.rhs, 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let (_, _, a) = constant(1.0);
        let spec = builtin_problem("constant_obstacle", &BTreeMap::new()).unwrap();
        let lat = Lattice::build(&spec, LatticeGrid::new(0.0, 1.0, 10, -6.0, 6.0, 30)).unwrap();
        let b = solve_value_lattice(&lat, &spec).unwrap();
        assert!(matches!(comparison_check(&a, &b), Err(RbsdeError::ShapeMismatch(_))));
        assert!(matches!(sup_abs_gap(&a, &b), Err(RbsdeError::ShapeMismatch(_))));
    }
}
