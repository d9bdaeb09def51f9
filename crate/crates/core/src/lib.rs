//! Simulation and estimation toolkit for fast-slow ODE systems with chaotic or
//! noise-driven fast dynamics.
//!
//! The crate integrates the full multiscale system, the frozen fast flow and its
//! tangent flow; estimates ergodic averages, correlation functions and their decay;
//! and assembles the coefficients of the homogenized slow SDE both from
//! Green-Kubo time integrals and, for one-dimensional fast variables on the
//! circle, from a finite-difference cell-problem solve.

pub mod dynamics;
pub mod ergodic;
pub mod error;
pub mod homogenize;
pub mod integrate;
pub mod io;
pub mod limitsde;
pub mod rng;

pub use error::{Error, Result};
pub use rng::SeedSpec;
