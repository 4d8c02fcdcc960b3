//! Simulation and verification toolkit for superprocesses in random
//! environments.
//!
//! The crate is organised around one shared object, a grid realization of a
//! white-in-time, spatially colored Gaussian noise ([`environment`]). The same
//! noise drives
//!
//! * a branching-particle approximation of the measure-valued process and its
//!   occupation measure ([`particles`]),
//! * explicit grid solvers for the conditional log-Laplace equations and the
//!   quantities derived from them ([`spde`]),
//!
//! while [`duals`] provides independent heat-kernel quadrature and
//! Feynman-Kac Monte Carlo oracles that the two simulation routes are checked
//! against. [`experiments`] strings these together into law-of-large-numbers,
//! central-limit and moment studies.

pub mod config;
pub mod duals;
pub mod environment;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod particles;
pub mod quadrature;
pub mod report;
pub mod rng;
pub mod special;
pub mod spde;
pub mod stats;
pub mod testfn;

pub use error::{Error, Result};
