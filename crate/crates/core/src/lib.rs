//! Robust-stochastic MPC for linear systems with bounded polytopic parametric
//! uncertainty and (possibly correlated, unbounded) additive noise.
//!
//! The crate is organized around an offline/online split:
//!
//! * offline: certify or synthesize a robustly stabilizing gain ([`model`]),
//!   bound the error-state variance uniformly over the parameter polytope by
//!   solving log-det SDPs ([`rprs`]), turn the bounds into probabilistic
//!   reachable sets and constraint-tightening tables ([`rprs`]), and build an
//!   invariant terminal set for the homothetic tube ([`tube`]);
//! * online: assemble and solve the receding-horizon program with tube
//!   centers/scalings and containment duals as decision variables ([`mpc`]);
//! * evaluation: a seeded closed-loop Monte-Carlo harness with empirical
//!   chance-constraint metrics ([`sim`]) and config-driven experiment
//!   pipelines ([`exp`]).
//!
//! All optimization problems are stated declaratively against the solver
//! facade in [`conic`].

#![allow(non_snake_case)]

extern crate openblas_src;

pub mod conic;
pub mod exp;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod polytope;
pub mod qp;
pub mod rprs;
pub mod sim;
pub mod tube;

pub use polytope::Polytope;
