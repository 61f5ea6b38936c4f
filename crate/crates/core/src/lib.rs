//! Four-dimensional variational data assimilation for linear and semilinear
//! parabolic equations on the unit box, with the initial condition as control
//! and an `L^beta` ball as admissible set.
//!
//! The crate is organized bottom-up:
//!
//! - [`grid`]: uniform grids, the diffusion operator, grid quadrature
//! - [`forward`]: implicit Euler / IMEX time stepping and a dense Duhamel oracle
//! - [`tangent`]: first/second tangent models and the exact discrete adjoint
//! - [`assimilation`]: reduced cost, gradient, constraint, second-order forms
//! - [`optimizer`]: projected gradient, multiplier recovery, KKT and SSC checks
//! - [`config`], [`twin`], [`export`]: experiment files, twin runs, CSV/JSON output

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod assimilation;
pub mod config;
pub mod error;
pub mod export;
pub mod forward;
pub mod grid;
pub mod optimizer;
pub mod sparse;
pub mod tangent;
pub mod twin;

pub use error::{Error, Result};
