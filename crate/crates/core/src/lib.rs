//! Conservation-voltage-reduction reactive dispatch on unbalanced radial
//! feeders under load and PV uncertainty.
//!
//! The crate is organised bottom-up:
//!
//! - [`feeder`]: network model, incidence matrices and the linear
//!   voltage-sensitivity model.
//! - [`load`]: ZIP loads (exact and linearised) and PV inverter capability.
//! - [`enrich`]: recovery of high-resolution series for smart-meter-only
//!   transformers and moment extraction for the ambiguity set.
//! - [`dispatch`]: affine voltage model, chance rows, and the deterministic /
//!   robust / distributionally robust dispatch programs.
//! - [`validate`]: nonlinear power-flow oracle, Monte-Carlo violation
//!   estimation and energy reports.
//! - [`fixtures`]: synthetic feeders and measurement data.

// 6.28 is a ZIP coefficient, not 2π.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::approx_constant)]

pub mod dispatch;
pub mod enrich;
pub mod error;
pub mod feeder;
pub mod fixtures;
pub mod load;
pub mod phase;
pub mod validate;

pub use error::{Error, Result};
pub use phase::{Phase, PhaseSet};
