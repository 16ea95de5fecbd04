//! Simulator for the Dion optimizer and its momentum-triggered variant
//! CurvaDion on a simulated data-parallel cluster.
//!
//! - [`matrix`]: dense kernels (products, Gram-Schmidt, column scaling).
//! - [`dion`]: the per-layer Dion step and the local update path.
//! - [`trigger`]: RMMC and the sync decision for each policy.
//! - [`curvlab`]: the curvature/momentum-change relation on quadratics.
//! - [`distsim`]: the lockstep multi-worker loop and byte accounting.
//! - [`netcost`]: wall-clock projection across network profiles.
//! - [`problems`]: quadratics, the curvature-switch track and a tiny MLP.
//! - [`config`] and [`cli`]: TOML configuration and the subcommands.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod curvlab;
pub mod dion;
pub mod distsim;
pub mod error;
pub mod matrix;
pub mod netcost;
pub mod problems;
pub mod trigger;

pub use error::{Error, Result};
