//! Minimal extinction probabilities for continuous-time controlled branching
//! processes, computed exactly by improved policy iteration over the finite
//! policy class that plays a root-minimizing action above the threshold.
//!
//! The crate also carries a general value-iteration path for finite (or
//! truncated) controlled Markov systems and a seeded Monte Carlo oracle for
//! cross-checking extinction probabilities.

#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod embedded;
pub mod error;
pub mod gen_fn;
pub mod general;
pub mod linsys;
pub mod model;
pub mod report;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
pub use model::{ActionId, BranchingMechanism, CbpModel, GeneralModel};
pub use solver::{CbpSolver, ExtinctionProfile, Policy, SolveReport, TailKind};
