//! Decentralized Langevin sampling over gossip networks.
//!
//! Each agent holds one component `u_i` of a potential `U = sum_i u_i` and
//! runs an Euler–Maruyama step that mixes its state with its neighbours',
//! descends its own gradient with an annealed weight and injects Gaussian
//! noise. The crate covers the mixing matrix and its spectrum, the
//! potentials, the integrator, Wasserstein estimators, the closed-form
//! bounds and an experiment harness that compares measurements against them.

// NaN-rejecting guards are written as `!(x > 0.0)` throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod harness;
pub mod network;
pub mod noise;
pub mod potential;
pub mod replicas;
pub mod theory;
pub mod transport;
