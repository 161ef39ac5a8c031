use std::collections::BTreeMap;

use rbsde_control::forward_sim::{moment_check, simulate, sup_sq_gap, ControlPath, ControlPolicy, PathBundle, SimConfig};
use rbsde_control::hjb::{residual_check, solve_hjb_fd, ValueField};
use rbsde_control::lattice::{uniform, Lattice, LatticeGrid};
use rbsde_control::oracle::crr_american_put;
use rbsde_control::problem::{builtin_problem, ProblemSpec, BUILTIN_PROBLEMS};
use rbsde_control::rbsde::{solve_rbsde_mc, solve_value_lattice};

fn builtin(name: &str) -> ProblemSpec {
    builtin_problem(name, &BTreeMap::new()).unwrap()
}

fn hjb(spec: &ProblemSpec, nt: usize, nx: usize) -> ValueField {
    let (lo, hi) = spec.domain;
    solve_hjb_fd(spec, &uniform(0.0, spec.horizon, nt), &uniform(lo, hi, nx)).unwrap()
}

fn lattice_field(spec: &ProblemSpec, nt: usize, nx: usize) -> ValueField {
    let (lo, hi) = spec.domain;
    let lat = Lattice::build(spec, LatticeGrid::new(0.0, spec.horizon, nt, lo, hi, nx)).unwrap();
    ValueField::from_lattice_solution(&solve_value_lattice(&lat, spec).unwrap(), lat.substeps())
}

fn brownian(drift: f64, sigma: f64) -> ProblemSpec {
    ProblemSpec::builder("bm", 1, 1, 1)
        .scalar_drift(move |_, _, _| drift)
        .scalar_diffusion(move |_, _, _| sigma)
        .scalar_terminal(|x| x)
        .build()
        .unwrap()
}

fn sim(spec: &ProblemSpec, x0: f64, window: f64, steps: usize, paths: usize, seed: u64) -> PathBundle {
    let cfg = SimConfig {
        t0: 0.0,
        t1: window,
        steps,
        paths,
        seed,
    };
    let policy = ControlPolicy::Fixed(ControlPath::constant(spec.control_grid()[0].clone(), steps));
    simulate(spec, &policy, &[x0], cfg).unwrap()
}

#[test]
fn monte_carlo_put_agrees_with_lattice_and_binomial() {
    let spec = builtin("american_put");
    let steps = 50;
    let bundle = sim(&spec, 100.0, 1.0, steps, 100_000, 3);
    let terminal: Vec<f64> = (0..bundle.paths).map(|p| spec.terminal_at(bundle.state(p, steps)[0])).collect();
    let sol = solve_rbsde_mc(&spec, &bundle, &terminal, spec.obstacle.as_ref(), 4, None).unwrap();
    let y0 = sol.y_row(0).iter().sum::<f64>() / bundle.paths as f64;
    let crr = crr_american_put(100.0, 100.0, 0.05, 0.2, 1.0, 10_000);
    let lattice = lattice_field(&spec, 200, 400).initial_value(100.0);
    assert!((y0 - crr).abs() <= 0.015 * crr, "mc {y0} vs crr {crr}");
    assert!((y0 - lattice).abs() <= 0.015 * lattice, "mc {y0} vs lattice {lattice}");
    assert!(sol.min_gap() >= 0.0 && sol.min_push() >= 0.0);
}

#[test]
fn residual_shrinks_under_refinement() {
    let spec = builtin("american_put");
    let t_max = 0.9 * spec.horizon;
    let coarse = residual_check(&hjb(&spec, 100, 200), &spec, t_max);
    let fine = residual_check(&hjb(&spec, 200, 400), &spec, t_max);
    assert!(coarse.max_abs / fine.max_abs >= 1.5, "{} -> {}", coarse.max_abs, fine.max_abs);

    let constant = builtin("constant_obstacle");
    assert_eq!(residual_check(&hjb(&constant, 50, 100), &constant, constant.horizon).max_abs, 0.0);
    let linear = builtin("inactive_obstacle");
    assert!(residual_check(&hjb(&linear, 50, 100), &linear, linear.horizon).max_abs <= 1e-8);
}

/// Central half of the domain, away from the truncation boundaries.
fn central_gap(a: &ValueField, b: &ValueField) -> (f64, f64) {
    let n = a.nodes();
    let (mut gap, mut scale) = (0.0_f64, 0.0_f64);
    for i in 0..a.rows() {
        for j in n / 4..=3 * n / 4 {
            gap = gap.max((a.u_at(i, j) - b.u_at(i, j)).abs());
            scale = scale.max(a.u_at(i, j).abs());
        }
    }
    (gap, scale)
}

#[test]
fn finite_differences_and_lattice_agree_on_every_builtin() {
    for name in BUILTIN_PROBLEMS {
        let spec = builtin(name);
        let (fd, lat) = (hjb(&spec, 200, 400), lattice_field(&spec, 200, 400));
        let (gap, scale) = central_gap(&fd, &lat);
        assert!(gap <= 1e-2 * scale.max(1e-12) || gap <= 1e-12, "{name}: gap {gap}, scale {scale}");
    }
}

#[test]
fn scaling_a_separable_driver_keeps_the_argmax() {
    let base = builtin("controlled_drift");
    let fields: Vec<ValueField> = [1.0, 3.0]
        .iter()
        .map(|&lambda| {
            let spec = base.clone().with_driver(move |_, x, _, _, v| lambda * (v[0] + x[0].cos()));
            hjb(&spec, 100, 200)
        })
        .collect();
    let n = fields[0].nodes();
    for i in 0..fields[0].rows() - 1 {
        for j in 1..n - 1 {
            assert_eq!(fields[0].argmax[i * n + j], fields[1].argmax[i * n + j], "node ({i}, {j})");
        }
    }
    assert!(fields[1].initial_value(0.0) > fields[0].initial_value(0.0));
}

#[test]
fn raising_the_obstacle_never_lowers_the_value() {
    let spec = builtin("american_put");
    let h = spec.obstacle.clone();
    let raised = spec.clone().with_obstacle(move |t, x| h(t, x) + if t < 1.0 { 0.5 } else { 0.0 });
    for (low, high) in [
        (hjb(&spec, 100, 200), hjb(&raised, 100, 200)),
        (lattice_field(&spec, 100, 200), lattice_field(&raised, 100, 200)),
    ] {
        assert!(low.u.iter().zip(&high.u).all(|(a, b)| a <= b));
    }
}

#[test]
fn terminal_shift_moves_the_value_by_the_shift() {
    let spec = builtin("controlled_drift");
    let phi = spec.terminal.clone();
    let shifted = spec.clone().with_terminal(move |x| phi(x) + 0.25);
    let (a, b) = (hjb(&spec, 100, 200), hjb(&shifted, 100, 200));
    assert!(a.u.iter().zip(&b.u).all(|(u, v)| ((v - u) - 0.25).abs() <= 1e-12));

    let spec = builtin("nonlinear_driver_put");
    let phi = spec.terminal.clone();
    let shifted = spec.clone().with_terminal(move |x| phi(x) + 0.25);
    let (a, b) = (hjb(&spec, 100, 200), hjb(&shifted, 100, 200));
    assert!(a.u.iter().zip(&b.u).all(|(u, v)| v >= u));
}

#[test]
fn brownian_moment_ratio_is_bracketed() {
    let spec = brownian(0.0, 1.0);
    for delta in [0.1, 0.05, 0.025, 0.0125] {
        let ratio = moment_check(&sim(&spec, 0.0, delta, 20, 100_000, 1), &[0.0]);
        assert!((0.5..=8.0).contains(&ratio), "δ={delta}: {ratio}");
    }
    let drift = moment_check(&sim(&brownian(1.0, 0.0), 0.0, 0.1, 10, 10, 1), &[0.0]);
    assert!((drift - 0.1).abs() < 1e-12);
}

#[test]
fn moment_ratio_is_bounded_on_every_builtin() {
    for name in BUILTIN_PROBLEMS {
        let spec = builtin(name);
        let x0 = spec.initial_state[0];
        let ratios: Vec<f64> = [0.1, 0.05, 0.025, 0.0125]
            .iter()
            .map(|&delta| moment_check(&sim(&spec, x0, delta, 20, 20_000, 2), &[x0]))
            .collect();
        let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0_f64), |(a, b), &r| (a.min(r), b.max(r)));
        assert!(hi.is_finite() && hi <= 4.0 * lo.max(1e-300) || hi == 0.0, "{name}: {ratios:?}");
    }
}

#[test]
fn initial_condition_sensitivity_is_quadratic() {
    let spec = builtin("american_put");
    let base = sim(&spec, 100.0, 1.0, 50, 20_000, 8);
    let constants: Vec<f64> = [1.0, 0.1, 0.01]
        .iter()
        .map(|&d| sup_sq_gap(&base, &sim(&spec, 100.0 + d, 1.0, 50, 20_000, 8)).unwrap() / (d * d))
        .collect();
    let c = constants[0];
    assert!(constants.iter().all(|&k| k <= 2.0 * c && k >= 0.5 * c), "{constants:?}");
}
