//! Perturbation calculus along discrete trajectories.
//!
//! A perturbation of a state is the 12-vector `z = [dx; dgamma; zeta; dPi]`
//! where the attitude part is a body-frame Lie-algebra increment,
//! `R -> R exp(hat(zeta))`. Multipliers use the same block layout.

use nalgebra::{SMatrix, SVector};

use crate::dynamics::{rotation_variation_matrix, ControlSample, Model, Order, RigidBodyState};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::liegroup::{hat, Mat3, Vec3};

pub type Vec12 = SVector<f64, 12>;
pub type Mat12 = SMatrix<f64, 12, 12>;
pub type Mat24 = SMatrix<f64, 24, 24>;
/// Columns of a 12x12 sensitivity for the momentum inputs `[dgamma; dPi]`.
pub type Mat12x6 = SMatrix<f64, 12, 6>;

pub type PerturbationVector = Vec12;
pub type MultiplierVector = Vec12;
/// One-step Jacobian `z_{k+1} = A_k z_k`.
pub type StepJacobian = Mat12;

/// Block offsets inside a perturbation or multiplier vector.
pub const POSITION: usize = 0;
pub const LIN_MOMENTUM: usize = 3;
pub const ATTITUDE: usize = 6;
pub const ANG_MOMENTUM: usize = 9;

/// Finite-difference step on state perturbations.
pub const FD_STEP: f64 = 1e-6;

pub fn block(v: &Vec12, offset: usize) -> Vec3 {
    v.fixed_rows::<3>(offset).into_owned()
}

pub fn from_blocks(dx: &Vec3, dgamma: &Vec3, zeta: &Vec3, dpi: &Vec3) -> Vec12 {
    let mut z = Vec12::zeros();
    z.fixed_rows_mut::<3>(POSITION).copy_from(dx);
    z.fixed_rows_mut::<3>(LIN_MOMENTUM).copy_from(dgamma);
    z.fixed_rows_mut::<3>(ATTITUDE).copy_from(zeta);
    z.fixed_rows_mut::<3>(ANG_MOMENTUM).copy_from(dpi);
    z
}

/// `state ⊕ z`.
pub fn retract(state: &RigidBodyState, z: &Vec12) -> RigidBodyState {
    RigidBodyState {
        attitude: state.attitude.retract(&block(z, ATTITUDE)),
        position: state.position + block(z, POSITION),
        ang_momentum: state.ang_momentum + block(z, ANG_MOMENTUM),
        lin_momentum: state.lin_momentum + block(z, LIN_MOMENTUM),
    }
}

/// `to ⊖ from`, the perturbation taking `from` to `to`.
pub fn difference(from: &RigidBodyState, to: &RigidBodyState) -> Vec12 {
    from_blocks(
        &(to.position - from.position),
        &(to.lin_momentum - from.lin_momentum),
        &from.attitude.local(&to.attitude),
        &(to.ang_momentum - from.ang_momentum),
    )
}

/// Desired-minus-actual terminal error
/// `[x_d - x; gamma_d - gamma; log(R^T R_d); Pi_d - Pi]`.
pub fn boundary_error(state: &RigidBodyState, desired: &RigidBodyState) -> Vec12 {
    difference(state, desired)
}

/// Rows of a linear map written as a 3x12 block row.
type Row = SMatrix<f64, 3, 12>;

fn row(blocks: [(usize, Mat3); 1]) -> Row {
    let mut r = Row::zeros();
    for (off, m) in blocks {
        r.fixed_columns_mut::<3>(off).copy_from(&m);
    }
    r
}

fn assemble(dx: &Row, dgamma: &Row, zeta: &Row, dpi: &Row) -> Mat12 {
    let mut a = Mat12::zeros();
    a.fixed_rows_mut::<3>(POSITION).copy_from(dx);
    a.fixed_rows_mut::<3>(LIN_MOMENTUM).copy_from(dgamma);
    a.fixed_rows_mut::<3>(ATTITUDE).copy_from(zeta);
    a.fixed_rows_mut::<3>(ANG_MOMENTUM).copy_from(dpi);
    a
}

/// Exact Jacobian of one integrator step in perturbation coordinates.
///
/// The first-order step does not depend on the controls; the second-order
/// step depends on `u_k` through the implicit rotation equation.
pub fn step_jacobian(
    model: &Model,
    state: &RigidBodyState,
    u_k: &ControlSample,
    u_kp1: &ControlSample,
    order: Order,
) -> Result<StepJacobian> {
    let next = model.step(state, u_k, u_kp1, order)?;
    let f = state.attitude.transpose() * next.attitude;
    let ft = f.matrix().transpose();
    let h = model.h.get();
    let m = model.body.mass();
    let b = rotation_variation_matrix(&model.body, &f);
    let b_inv = b.try_inverse().ok_or(Error::SingularJacobian {
        what: "rotation variation",
        cond: f64::INFINITY,
    })?;
    let (_, _, jn) =
        model
            .gravity
            .force_moment_jacobians(&model.body, &next.attitude, &next.position)?;
    let eye = Mat3::identity();

    match order {
        Order::First => {
            let dx = row([(POSITION, eye)]) + row([(LIN_MOMENTUM, eye * (h / m))]);
            let eta = row([(ANG_MOMENTUM, b_inv * h)]);
            let zeta = row([(ATTITUDE, ft)]) + eta;
            let dgamma =
                row([(LIN_MOMENTUM, eye)]) + jn.force_pos * dx * h + jn.force_att * zeta * h;
            let dpi = row([(ANG_MOMENTUM, ft)])
                + hat(&(ft * state.ang_momentum)) * eta
                + jn.moment_pos * dx * h
                + jn.moment_att * zeta * h;
            Ok(assemble(&dx, &dgamma, &zeta, &dpi))
        }
        Order::Second => {
            let (_, m_k, jk) = model.gravity.force_moment_jacobians(
                &model.body,
                &state.attitude,
                &state.position,
            )?;
            let c = h * h / (2.0 * m);
            let dx = row([(POSITION, eye + jk.force_pos * c)])
                + row([(LIN_MOMENTUM, eye * (h / m))])
                + row([(ATTITUDE, jk.force_att * c)]);
            let rhs = state.ang_momentum + (m_k + u_k.moment) * (0.5 * h);
            let drhs = row([(POSITION, jk.moment_pos * (0.5 * h))])
                + row([(ATTITUDE, jk.moment_att * (0.5 * h))])
                + row([(ANG_MOMENTUM, eye)]);
            let eta = b_inv * drhs * h;
            let zeta = row([(ATTITUDE, ft)]) + eta;
            let dgamma = row([(POSITION, jk.force_pos * (0.5 * h))])
                + row([(LIN_MOMENTUM, eye)])
                + row([(ATTITUDE, jk.force_att * (0.5 * h))])
                + (jn.force_pos * dx + jn.force_att * zeta) * (0.5 * h);
            let dpi = ft * drhs
                + hat(&(ft * rhs)) * eta
                + (jn.moment_pos * dx + jn.moment_att * zeta) * (0.5 * h);
            Ok(assemble(&dx, &dgamma, &zeta, &dpi))
        }
    }
}

/// Central-difference Jacobian of the nonlinear step in perturbation
/// coordinates, step [`FD_STEP`]. Columns are independent and evaluated
/// through `exec`.
pub fn step_jacobian_fd(
    model: &Model,
    state: &RigidBodyState,
    u_k: &ControlSample,
    u_kp1: &ControlSample,
    order: Order,
    exec: Exec,
) -> Result<StepJacobian> {
    let base = model.step(state, u_k, u_kp1, order)?;
    let cols = exec.try_map(12, |j| -> Result<Vec12> {
        let e = Vec12::ith(j, FD_STEP);
        let plus = model.step(&retract(state, &e), u_k, u_kp1, order)?;
        let minus = model.step(&retract(state, &(-e)), u_k, u_kp1, order)?;
        Ok((difference(&base, &plus) - difference(&base, &minus)) / (2.0 * FD_STEP))
    })?;
    Ok(Mat12::from_columns(&cols))
}

fn check_spd(w: &Mat3, name: &'static str) -> Result<Mat3> {
    if (w - w.transpose()).amax() > 1e-12 * w.amax().max(f64::MIN_POSITIVE) {
        return Err(Error::SingularWeight(name));
    }
    let chol = w.cholesky().ok_or(Error::SingularWeight(name))?;
    Ok(chol.inverse())
}

/// Inverses of the control weights, validated symmetric positive definite.
pub fn weight_inverses(w_force: &Mat3, w_moment: &Mat3) -> Result<(Mat3, Mat3)> {
    Ok((check_spd(w_force, "W_f")?, check_spd(w_moment, "W_m")?))
}

/// `-h diag[0, W_f^-1, 0, W_m^-1]`: how a multiplier perturbation enters the
/// next state once the optimal controls `u = -W^-1 lambda` are substituted.
pub fn control_injection(h: f64, w_force: &Mat3, w_moment: &Mat3) -> Result<Mat12> {
    let (wf_inv, wm_inv) = weight_inverses(w_force, w_moment)?;
    let mut out = Mat12::zeros();
    out.fixed_view_mut::<3, 3>(LIN_MOMENTUM, LIN_MOMENTUM)
        .copy_from(&(-wf_inv * h));
    out.fixed_view_mut::<3, 3>(ANG_MOMENTUM, ANG_MOMENTUM)
        .copy_from(&(-wm_inv * h));
    Ok(out)
}

/// Derivative of `z -> A(state ⊕ z)^T lambda` at `z = 0` for the first-order
/// step, by central differences with step [`FD_STEP`].
pub fn multiplier_state_jacobian(
    model: &Model,
    state: &RigidBodyState,
    lambda: &MultiplierVector,
    exec: Exec,
) -> Result<Mat12> {
    if lambda.iter().all(|v| *v == 0.0) {
        return Ok(Mat12::zeros());
    }
    let u = ControlSample::zero();
    let cols = exec.try_map(12, |j| -> Result<Vec12> {
        let e = Vec12::ith(j, FD_STEP);
        let ap = step_jacobian(model, &retract(state, &e), &u, &u, Order::First)?;
        let am = step_jacobian(model, &retract(state, &(-e)), &u, &u, Order::First)?;
        Ok((ap - am).transpose() * lambda / (2.0 * FD_STEP))
    })?;
    Ok(Mat12::from_columns(&cols))
}

/// Ordered product `A_{N-1} ... A_1 A_0`.
pub fn propagate_phi(jacobians: &[StepJacobian]) -> Mat12 {
    jacobians.iter().fold(Mat12::identity(), |acc, a| a * acc)
}

/// Step Jacobians along a trajectory. `controls` follows the
/// [`crate::dynamics::simulate`] convention for `order`.
pub fn trajectory_jacobians(
    model: &Model,
    states: &[RigidBodyState],
    controls: &[ControlSample],
    order: Order,
    exec: Exec,
) -> Result<Vec<StepJacobian>> {
    let n = states.len().saturating_sub(1);
    let zero = ControlSample::zero();
    exec.try_map(n, |k| {
        let (u_k, u_kp1) = match order {
            Order::First => (&zero, controls.get(k).unwrap_or(&zero)),
            Order::Second => (
                controls.get(k).unwrap_or(&zero),
                controls.get(k + 1).unwrap_or(&zero),
            ),
        };
        step_jacobian(model, &states[k], u_k, u_kp1, order)
    })
}

/// Sensitivity of the terminal state with respect to the initial momenta,
/// the `[dgamma_0, dPi_0]` columns of `phi`.
pub fn momentum_columns(phi: &Mat12) -> Mat12x6 {
    let mut out = Mat12x6::zeros();
    out.fixed_columns_mut::<3>(0)
        .copy_from(&phi.fixed_columns::<3>(LIN_MOMENTUM));
    out.fixed_columns_mut::<3>(3)
        .copy_from(&phi.fixed_columns::<3>(ANG_MOMENTUM));
    out
}

/// State sensitivity `phi` and the coupled state/multiplier sensitivity
/// `psi`, mapping `[z_0; dlambda_0]` to `[z_N; dlambda_N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrices {
    pub phi: Mat12,
    pub psi: Mat24,
}

impl TransitionMatrices {
    pub fn psi_block(&self, i: usize, j: usize) -> Mat12 {
        assert!((1..=2).contains(&i) && (1..=2).contains(&j));
        self.psi
            .fixed_view::<12, 12>(12 * (i - 1), 12 * (j - 1))
            .into_owned()
    }

    /// Terminal-state sensitivity to the initial multiplier.
    pub fn psi12(&self) -> Mat12 {
        self.psi_block(1, 2)
    }
}

fn inverse_transpose(a: &Mat12) -> Result<Mat12> {
    a.transpose()
        .lu()
        .try_inverse()
        .ok_or(Error::SingularJacobian {
            what: "step jacobian transpose",
            cond: f64::INFINITY,
        })
}

/// Forward march of the linearised extremal equations
///
/// ```text
/// z_{k+1}       = A_k z_k + C dlambda_k
/// dlambda_{k+1} = A_{k+1}^-T (dlambda_k - D_{k+1} z_{k+1})
/// ```
///
/// with `C` from [`control_injection`] and `D_{k+1}` from
/// [`multiplier_state_jacobian`], composed into one 24x24 matrix. `states`
/// holds the nominal `y_0..y_N` of the first-order extremal and `multipliers`
/// its `lambda_0..lambda_{N-1}`; `lambda_N` is continued with the same rule.
pub fn propagate_psi(
    model: &Model,
    states: &[RigidBodyState],
    multipliers: &[MultiplierVector],
    w_force: &Mat3,
    w_moment: &Mat3,
    exec: Exec,
) -> Result<TransitionMatrices> {
    let n = states
        .len()
        .checked_sub(1)
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::invalid("states", "a nominal trajectory needs at least one step"))?;
    if multipliers.len() != n {
        return Err(Error::invalid(
            "multipliers",
            format!("expected {n} multipliers, got {}", multipliers.len()),
        ));
    }
    let injection = control_injection(model.h.get(), w_force, w_moment)?;
    let u = ControlSample::zero();

    // A_0..A_N (A_N continues the nominal past the horizon).
    let jacobians = exec.try_map(n + 1, |k| {
        step_jacobian(model, &states[k], &u, &u, Order::First)
    })?;
    let inv_t = exec.try_map(n, |k| inverse_transpose(&jacobians[k + 1]))?;
    let mut lambdas = multipliers.to_vec();
    lambdas.push(inv_t[n - 1] * multipliers[n - 1]);
    // D_1..D_N, evaluated on lambda_1..lambda_N. Each call already maps its
    // columns through `exec`; the outer loop stays sequential.
    let coupling = (1..=n)
        .map(|k| multiplier_state_jacobian(model, &states[k], &lambdas[k], exec))
        .collect::<Result<Vec<_>>>()?;

    let mut phi = Mat12::identity();
    let mut psi = Mat24::identity();
    for k in 0..n {
        let a = &jacobians[k];
        let d = &coupling[k];
        let ait = &inv_t[k];
        let mut step = Mat24::zeros();
        step.fixed_view_mut::<12, 12>(0, 0).copy_from(a);
        step.fixed_view_mut::<12, 12>(0, 12).copy_from(&injection);
        step.fixed_view_mut::<12, 12>(12, 0)
            .copy_from(&(-(ait * d * a)));
        step.fixed_view_mut::<12, 12>(12, 12)
            .copy_from(&(ait * (Mat12::identity() - d * injection)));
        psi = step * psi;
        phi = a * phi;
    }
    Ok(TransitionMatrices { phi, psi })
}
