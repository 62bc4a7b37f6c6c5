//! Geometrically exact simulation and optimal control of a rigid body on SE(3).
//!
//! The crate is organised bottom-up:
//!
//! * [`liegroup`]: hat/vee maps and the exponential and logarithm on SO(3).
//! * [`dynamics`]: the dumbbell body in a central gravity field and the
//!   first- and second-order Lie group variational integrators.
//! * [`linearize`]: perturbations in Lie-algebra coordinates, step Jacobians
//!   and the state/multiplier transition matrices.
//! * [`impulsive`]: two-impulse maneuvers: the full-state boundary value
//!   problem and the relaxed-orbit SQP.
//! * [`shooting`]: discrete necessary conditions for smooth control and the
//!   Newton-Armijo shooting solver.
//! * [`cli`]: scenario configuration, runners and report/CSV output.
//!
//! Data-parallel inner loops (finite-difference columns, per-step Jacobians,
//! step-size sweeps) go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod impulsive;
pub mod liegroup;
pub mod linearize;
pub mod shooting;

pub use error::{Error, Result};
