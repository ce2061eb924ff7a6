//! Amortized inverse kinematics: regress parent-relative joint rotations from
//! root-space 3D joint positions through a bone-aligned world representation.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod kinematics;
pub mod metrics;
pub mod model;
pub mod rig;
pub mod so3;
pub mod solvers;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
