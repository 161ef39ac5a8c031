use proptest::prelude::*;
use rbsde_control::hjb::{solve_hjb_fd, solve_penalized_hjb};
use rbsde_control::lattice::{uniform, Lattice, LatticeGrid};
use rbsde_control::problem::{ControlSet, ProblemSpec};
use rbsde_control::rbsde::{comparison_check, solve_penalized_lattice, solve_value_lattice, LatticeControl};

#[derive(Debug, Clone, Copy)]
struct Data {
    drift: (f64, f64),
    sigma: f64,
    driver: (f64, f64, f64),
    barrier: (f64, f64),
    slope: f64,
}

fn data() -> impl Strategy<Value = Data> {
    (
        (-0.5..0.5f64, -0.5..0.5f64),
        0.3..1.2f64,
        (-0.5..0.5f64, -0.3..0.3f64, -1.0..1.0f64),
        (-1.0..1.0f64, -0.5..0.5f64),
        -1.0..1.0f64,
    )
        .prop_map(|(drift, sigma, driver, barrier, slope)| Data {
            drift,
            sigma,
            driver,
            barrier,
            slope,
        })
}

fn spec(d: Data) -> ProblemSpec {
    let (b0, b1) = d.drift;
    let (g0, g1, g2) = d.driver;
    let (h0, h1) = d.barrier;
    let sigma = d.sigma;
    let slope = d.slope;
    let obstacle = move |t: f64, x: f64| h0 + h1 * (x + t).sin();
    ProblemSpec::builder("prop", 1, 1, 1)
        .scalar_drift(move |_, _, v| b0 + b1 * v[0])
        .scalar_diffusion(move |_, _, _| sigma)
        .scalar_driver(move |_, x, y, z, v| g0 * y + g1 * z + g2 * x.cos() * v[0])
        .scalar_obstacle(obstacle)
        .scalar_terminal(move |x| (slope * x).max(obstacle(1.0, x)))
        .controls(ControlSet::interval(-1.0, 1.0, 3))
        .domain(-3.0, 3.0)
        .build()
        .unwrap()
}

fn lattice(spec: &ProblemSpec) -> Lattice {
    Lattice::build(spec, LatticeGrid::new(0.0, 1.0, 10, -3.0, 3.0, 24)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kernels_are_probability_vectors(d in data()) {
        let spec = spec(d);
        let lat = lattice(&spec);
        for i in [0, lat.steps() - 1] {
            for j in 0..lat.nodes() {
                for m in 0..lat.controls().len() {
                    let k = lat.kernel(i, j, m).unwrap();
                    prop_assert!(k.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
                    prop_assert!((k.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reflected_solution_satisfies_skorokhod(d in data()) {
        let spec = spec(d);
        let sol = solve_value_lattice(&lattice(&spec), &spec).unwrap();
        prop_assert!(sol.min_gap() >= 0.0);
        prop_assert!(sol.min_push() >= 0.0);
        prop_assert_eq!(sol.skorokhod_sum(), 0.0);
        for j in 0..sol.columns {
            let k = sol.cumulative_k(&vec![j; sol.rows()]);
            prop_assert!(k.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn penalized_family_increases_towards_the_reflected_value(d in data()) {
        let spec = spec(d);
        let lat = lattice(&spec);
        let reflected = solve_value_lattice(&lat, &spec).unwrap();
        let terminal: Vec<f64> = lat.x_grid().iter().map(|&x| spec.terminal_at(x)).collect();
        let mut prev = None;
        for n in [0.0, 1.0, 10.0, 100.0] {
            let p = solve_penalized_lattice(&lat, &spec, &LatticeControl::Optimize, &terminal, spec.obstacle.as_ref(), n)
                .unwrap();
            prop_assert!(comparison_check(&p, &reflected).unwrap() <= 1e-12);
            if let Some(q) = &prev {
                prop_assert!(comparison_check(q, &p).unwrap() <= 1e-12);
            }
            prev = Some(p);
        }
    }

    #[test]
    fn hjb_field_respects_terminal_and_barrier(d in data()) {
        let spec = spec(d);
        let (t, x) = (uniform(0.0, 1.0, 20), uniform(-3.0, 3.0, 24));
        let field = solve_hjb_fd(&spec, &t, &x).unwrap();
        let n = field.nodes();
        let last = field.rows() - 1;
        for j in 0..n {
            prop_assert_eq!(field.u_at(last, j), spec.terminal_at(x[j]));
        }
        prop_assert!(field.u.iter().zip(&field.h).all(|(u, h)| u >= h));
        // One-sided gradients at the truncation boundary are not monotone when
        // the effective drift points outwards, so compare on the central half.
        let penalized = solve_penalized_hjb(&spec, &t, &x, 50.0).unwrap();
        for i in 0..field.rows() {
            for j in n / 4..=3 * n / 4 {
                prop_assert!(penalized.u_at(i, j) <= field.u_at(i, j));
            }
        }
    }
}
