use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::body::{BodyParams, GravityParams};
use crate::error::{Error, Result};
use crate::liegroup::{exp_so3, hat, vee_unchecked, Mat3, Rotation, Vec3};

const SOLVE_MAX_ITER: usize = 50;
const SOLVE_FD_STEP: f64 = 1e-7;
const SOLVE_TOL: f64 = 1e-13;

/// A point of T*SE(3): attitude, inertial position, body angular momentum and
/// inertial linear momentum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidBodyState {
    pub attitude: Rotation,
    pub position: Vec3,
    pub ang_momentum: Vec3,
    pub lin_momentum: Vec3,
}

impl RigidBodyState {
    pub fn new(attitude: Rotation, position: Vec3, ang_momentum: Vec3, lin_momentum: Vec3) -> Self {
        Self {
            attitude,
            position,
            ang_momentum,
            lin_momentum,
        }
    }

    /// Momenta negated; used for time reversal.
    pub fn reversed(&self) -> Self {
        Self {
            ang_momentum: -self.ang_momentum,
            lin_momentum: -self.lin_momentum,
            ..*self
        }
    }
}

/// Control force (inertial frame) and moment (body frame) at one time index.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlSample {
    pub force: Vec3,
    pub moment: Vec3,
}

impl ControlSample {
    pub fn new(force: Vec3, moment: Vec3) -> Self {
        Self { force, moment }
    }

    pub fn zero() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct StepSize(f64);

impl StepSize {
    pub fn new(h: f64) -> Result<Self> {
        if h > 0.0 && h.is_finite() {
            Ok(Self(h))
        } else {
            Err(Error::invalid("h", "step size must be positive and finite"))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for StepSize {
    type Error = Error;
    fn try_from(h: f64) -> Result<Self> {
        Self::new(h)
    }
}

impl From<StepSize> for f64 {
    fn from(h: StepSize) -> f64 {
        h.0
    }
}

/// Integrator accuracy: the first-order scheme used by the optimality
/// conditions, or the symmetric second-order scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Order {
    First,
    Second,
}

impl Order {
    pub fn as_u8(self) -> u8 {
        match self {
            Order::First => 1,
            Order::Second => 2,
        }
    }
}

impl TryFrom<u8> for Order {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Order::First),
            2 => Ok(Order::Second),
            _ => Err(Error::invalid("order", "must be 1 or 2")),
        }
    }
}

impl From<Order> for u8 {
    fn from(o: Order) -> u8 {
        o.as_u8()
    }
}

fn skew_residual(jd: &Mat3, phi: &Vec3, target: &Vec3) -> Vec3 {
    let f = exp_so3(phi);
    let m = f.matrix() * jd - jd * f.matrix().transpose();
    vee_unchecked(&m) - target
}

/// Solves `h S(rhs) = F J_d - J_d F^T` for the relative rotation `F`.
///
/// Newton iteration on `F = exp(phi)` starting from `phi = h J^-1 rhs`, with a
/// central-difference Jacobian. Requires `|h J^-1 rhs| < 1`: about a
/// principal axis the equation reads `J_i sin(theta) = h rhs_i`, which has no
/// solution once `h rhs_i / J_i` exceeds one.
pub fn solve_relative_rotation(body: &BodyParams, h: StepSize, rhs: &Vec3) -> Result<Rotation> {
    let h = h.get();
    let mut phi = body.inertia_inv() * rhs * h;
    let guard = phi.norm();
    if !(guard < 1.0) {
        return Err(Error::StepTooLarge { value: guard });
    }
    let target = rhs * h;
    let jd = body.nonstandard_inertia();
    let tol = SOLVE_TOL * target.norm().max(1.0);

    let mut residual = skew_residual(jd, &phi, &target);
    let mut last_step = f64::INFINITY;
    for iter in 0..SOLVE_MAX_ITER {
        if residual.norm() == 0.0 {
            break;
        }
        let mut jac = Matrix3::zeros();
        for i in 0..3 {
            let e = Vec3::ith(i, SOLVE_FD_STEP);
            let col = (skew_residual(jd, &(phi + e), &target)
                - skew_residual(jd, &(phi - e), &target))
                / (2.0 * SOLVE_FD_STEP);
            jac.set_column(i, &col);
        }
        let step = jac.lu().solve(&(-residual)).ok_or(Error::NoConvergence {
            what: "relative rotation solve",
            iterations: iter,
            residual: residual.norm(),
        })?;
        let step_norm = step.norm();
        let trial = phi + step;
        let trial_residual = skew_residual(jd, &trial, &target);
        if iter > 0 && step_norm >= last_step && trial_residual.norm() >= residual.norm() {
            // Stagnated at round-off.
            break;
        }
        phi = trial;
        residual = trial_residual;
        last_step = step_norm;
        if step_norm <= 4.0 * f64::EPSILON * phi.norm() {
            break;
        }
    }
    let res = residual.norm();
    if res > tol || !res.is_finite() {
        return Err(Error::NoConvergence {
            what: "relative rotation solve",
            iterations: SOLVE_MAX_ITER,
            residual: res,
        });
    }
    Ok(exp_so3(&phi))
}

/// Linear map `eta -> vee(F S(eta) J_d + J_d S(eta) F^T)`, the variation of
/// the implicit rotation equation under `F -> F exp(hat(eta))`.
pub(crate) fn rotation_variation_matrix(body: &BodyParams, f: &Rotation) -> Mat3 {
    let jd = body.nonstandard_inertia();
    let fm = f.matrix();
    let mut out = Mat3::zeros();
    for i in 0..3 {
        let s = hat(&Vec3::ith(i, 1.0));
        let m = fm * s * jd + jd * s * fm.transpose();
        out.set_column(i, &vee_unchecked(&m));
    }
    out
}

/// Second-order Lie group variational integrator step `k -> k+1`.
///
/// `u_k` and `u_kp1` are the control samples at the two ends of the step.
pub fn step2(
    body: &BodyParams,
    grav: &GravityParams,
    h: StepSize,
    state: &RigidBodyState,
    u_k: &ControlSample,
    u_kp1: &ControlSample,
) -> Result<RigidBodyState> {
    let (f_k, m_k) = grav.force_moment(body, &state.attitude, &state.position)?;
    step2_with_forces(body, grav, h, state, (f_k, m_k), u_k, u_kp1).map(|(s, _)| s)
}

/// [`step2`] with the gravity at `state` supplied; also returns the gravity at
/// the new state so a caller can chain steps without re-evaluating it.
pub(crate) fn step2_with_forces(
    body: &BodyParams,
    grav: &GravityParams,
    h: StepSize,
    state: &RigidBodyState,
    (f_k, m_k): (Vec3, Vec3),
    u_k: &ControlSample,
    u_kp1: &ControlSample,
) -> Result<(RigidBodyState, (Vec3, Vec3))> {
    let hs = h.get();
    let m = body.mass();
    let total_f = f_k + u_k.force;
    let position = state.position + state.lin_momentum * (hs / m) + total_f * (hs * hs / (2.0 * m));
    let rhs = state.ang_momentum + (m_k + u_k.moment) * (0.5 * hs);
    let f = solve_relative_rotation(body, h, &rhs)?;
    let attitude = state.attitude * f;
    let (f_n, m_n) = grav.force_moment(body, &attitude, &position)?;
    let lin_momentum = state.lin_momentum + total_f * (0.5 * hs) + (f_n + u_kp1.force) * (0.5 * hs);
    let ang_momentum = f.matrix().transpose() * rhs + (m_n + u_kp1.moment) * (0.5 * hs);
    Ok((
        RigidBodyState {
            attitude,
            position,
            ang_momentum,
            lin_momentum,
        },
        (f_n, m_n),
    ))
}

/// First-order variational integrator step `k -> k+1` driven by the control
/// sample `u_kp1` applied at the end of the step.
pub fn step1(
    body: &BodyParams,
    grav: &GravityParams,
    h: StepSize,
    state: &RigidBodyState,
    u_kp1: &ControlSample,
) -> Result<RigidBodyState> {
    let hs = h.get();
    let position = state.position + state.lin_momentum * (hs / body.mass());
    let f = solve_relative_rotation(body, h, &state.ang_momentum)?;
    let attitude = state.attitude * f;
    let (f_n, m_n) = grav.force_moment(body, &attitude, &position)?;
    let lin_momentum = state.lin_momentum + (f_n + u_kp1.force) * hs;
    let ang_momentum = f.matrix().transpose() * state.ang_momentum + (m_n + u_kp1.moment) * hs;
    Ok(RigidBodyState {
        attitude,
        position,
        ang_momentum,
        lin_momentum,
    })
}

/// A discrete trajectory `states[0..=N]` with the step size that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub h: StepSize,
    pub states: Vec<RigidBodyState>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn last(&self) -> &RigidBodyState {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Iterates the chosen integrator.
///
/// First order: `controls[k]` is `u_{k+1}`, length `N`.
/// Second order: `controls[k]` is `u_k`, length `N + 1`; the final sample only
/// enters the last momentum update. An empty slice means `N = 0` for both.
pub fn simulate(
    body: &BodyParams,
    grav: &GravityParams,
    h: StepSize,
    initial: &RigidBodyState,
    controls: &[ControlSample],
    order: Order,
) -> Result<Trajectory> {
    let n = match order {
        Order::First => controls.len(),
        Order::Second => controls.len().saturating_sub(1),
    };
    let mut states = Vec::with_capacity(n + 1);
    states.push(*initial);
    match order {
        Order::First => {
            let mut s = *initial;
            for u in controls {
                s = step1(body, grav, h, &s, u)?;
                states.push(s);
            }
        }
        Order::Second => {
            let mut s = *initial;
            let mut forces = grav.force_moment(body, &s.attitude, &s.position)?;
            for w in controls.windows(2) {
                let (next, f) = step2_with_forces(body, grav, h, &s, forces, &w[0], &w[1])?;
                s = next;
                forces = f;
                states.push(s);
            }
        }
    }
    Ok(Trajectory { h, states })
}

/// Body, gravity field and step size: everything a step needs besides the
/// state and controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub body: BodyParams,
    pub gravity: GravityParams,
    pub h: StepSize,
}

impl Model {
    pub fn new(body: BodyParams, gravity: GravityParams, h: StepSize) -> Self {
        Self { body, gravity, h }
    }

    /// One step of the chosen order. `u_k` is ignored by the first-order scheme.
    pub fn step(
        &self,
        state: &RigidBodyState,
        u_k: &ControlSample,
        u_kp1: &ControlSample,
        order: Order,
    ) -> Result<RigidBodyState> {
        match order {
            Order::First => step1(&self.body, &self.gravity, self.h, state, u_kp1),
            Order::Second => step2(&self.body, &self.gravity, self.h, state, u_k, u_kp1),
        }
    }

    pub fn simulate(
        &self,
        initial: &RigidBodyState,
        controls: &[ControlSample],
        order: Order,
    ) -> Result<Trajectory> {
        simulate(&self.body, &self.gravity, self.h, initial, controls, order)
    }

    /// `n` uncontrolled steps.
    pub fn coast(&self, initial: &RigidBodyState, n: usize, order: Order) -> Result<Trajectory> {
        let len = match order {
            Order::First => n,
            Order::Second => n + 1,
        };
        self.simulate(initial, &vec![ControlSample::zero(); len], order)
    }

    pub fn invariants(&self, state: &RigidBodyState) -> Result<Invariants> {
        conserved_quantities(&self.body, &self.gravity, state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Invariants {
    pub energy: f64,
    /// `x cross gamma + R Pi`, conserved by the rotationally symmetric potential.
    pub total_ang_momentum: Vec3,
}

pub fn conserved_quantities(
    body: &BodyParams,
    grav: &GravityParams,
    state: &RigidBodyState,
) -> Result<Invariants> {
    let gamma = &state.lin_momentum;
    let pi = &state.ang_momentum;
    let kinetic =
        gamma.norm_squared() / (2.0 * body.mass()) + 0.5 * (body.inertia_inv() * pi).dot(pi);
    let potential = grav.potential_energy(body, &state.attitude, &state.position)?;
    Ok(Invariants {
        energy: kinetic + potential,
        total_ang_momentum: state.position.cross(gamma) + state.attitude * *pi,
    })
}
