//! Rigid dumbbell in a fixed central gravity field and its Lie group
//! variational integrators.

mod body;
mod integrator;

pub use body::{BodyParams, ForceJacobians, GravityParams};
pub use integrator::{
    conserved_quantities, simulate, solve_relative_rotation, step1, step2, ControlSample,
    Invariants, Model, Order, RigidBodyState, StepSize, Trajectory,
};

pub(crate) use integrator::rotation_variation_matrix;
