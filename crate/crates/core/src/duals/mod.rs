//! Independent oracles: heat-kernel quadrature, Feynman-Kac Monte Carlo and
//! the bounding functions of the moment estimates.

pub mod bounds;
pub mod feynman_kac;
pub mod heat;

pub use bounds::{bound_checks, bound_i, bound_j, bound_qtilde, BoundFns, BoundReport, CheckOptions, RatioEntry, RatioReport};
pub use feynman_kac::{dual_expmoment, dual_fourth, dual_second_moment, dual_v, dual_v_potentials, ExpMoment, FourthBudget, FourthEstimate, PathConfig};
pub use heat::{apply_p, apply_q, box_potential_mass, green_g, heat_p, tail_integral, tail_time_integral, Potential};
