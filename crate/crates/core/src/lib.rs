//! Solvers for stochastic recursive optimal control with an obstacle.
//!
//! The value function `u(t, x) = sup_v Y_t` is computed along two
//! independent routes: backward induction of the reflected BSDE on a Markov
//! chain [`lattice`], and an explicit finite difference scheme for the
//! obstacle HJB variational inequality in [`hjb`]. [`rbsde`] holds the
//! lattice and Monte Carlo solvers, the penalized family and the sample
//! bounds; [`dpp`] holds the semigroup and the dynamic programming checks.
//!
//! ```
//! use std::collections::BTreeMap;
//! use rbsde_control::lattice::{Lattice, LatticeGrid};
//! use rbsde_control::problem::builtin_problem;
//! use rbsde_control::rbsde::solve_value_lattice;
//!
//! let put = builtin_problem("american_put", &BTreeMap::new()).unwrap();
//! let lattice = Lattice::build(&put, LatticeGrid::new(0.0, 1.0, 50, 20.0, 300.0, 100)).unwrap();
//! let value = solve_value_lattice(&lattice, &put).unwrap().initial_value(100.0);
//! assert!((value - 6.09).abs() < 0.05);
//! ```

pub mod dpp;
pub mod forward_sim;
pub mod hjb;
pub mod lattice;
pub mod oracle;
pub mod problem;
pub mod rbsde;
pub mod rng;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/problems.md")]
    mod problems {}
    #[doc = include_str!("../../../book/src/lattice.md")]
    mod lattice {}
    #[doc = include_str!("../../../book/src/reflected-bsde.md")]
    mod reflected_bsde {}
    #[doc = include_str!("../../../book/src/monte-carlo.md")]
    mod monte_carlo {}
    #[doc = include_str!("../../../book/src/hjb.md")]
    mod hjb {}
    #[doc = include_str!("../../../book/src/dynamic-programming.md")]
    mod dynamic_programming {}
    #[doc = include_str!("../../../book/src/estimates.md")]
    mod estimates {}
}
