//! Two-impulse maneuvers.
//!
//! The body receives a momentum jump at `t = 0`, coasts for `N` uncontrolled
//! second-order steps, and receives a second jump at `t = N h`. The decision
//! variables are the post-impulse initial momenta `d = [gamma_0+; Pi_0+]`;
//! the terminal jump is fixed by the terminal specification.
//!
//! Terminal sensitivities come from the `[dgamma_0, dPi_0]` columns of the
//! coast transition matrix, so every gradient here is exact for the discrete
//! flow.

use nalgebra::{DMatrix, DVector, SMatrix, SVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dynamics::ControlSample;
use crate::dynamics::{Model, Order, RigidBodyState, Trajectory};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::liegroup::{hat, left_jacobian_inv, Mat3, Vec3};
use crate::linearize::{
    boundary_error, momentum_columns, propagate_phi, trajectory_jacobians, Mat12x6, ANG_MOMENTUM,
    ATTITUDE, LIN_MOMENTUM, POSITION,
};
use crate::shooting::{IterationEntry, IterationLog};

pub type Vec6 = SVector<f64, 6>;
pub type Mat6 = SMatrix<f64, 6, 6>;
type Mat3x6 = SMatrix<f64, 3, 6>;

const COAST: Order = Order::Second;
const UNIT_TOL: f64 = 1e-12;

/// Circular target orbit plus an attitude alignment requirement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxedOrbit {
    /// Target orbital radius.
    pub r_d: f64,
    /// Unit normal of the target orbital plane.
    pub e_n: Vec3,
    /// Body-fixed unit axis to be aligned with `e_n`.
    pub body_axis: Vec3,
    /// Terminal spin rate about `e_n`.
    pub spin_rate: f64,
}

impl RelaxedOrbit {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_d > 0.0 && self.r_d.is_finite()) {
            return Err(Error::invalid("r_d", "must be positive"));
        }
        if !((self.e_n.norm() - 1.0).abs() <= UNIT_TOL) {
            return Err(Error::invalid("e_n", "must be a unit vector"));
        }
        if !((self.body_axis.norm() - 1.0).abs() <= UNIT_TOL) {
            return Err(Error::invalid("body_axis", "must be a unit vector"));
        }
        if !self.spin_rate.is_finite() {
            return Err(Error::invalid("spin_rate", "must be finite"));
        }
        Ok(())
    }

    /// Orthonormal basis of the plane orthogonal to `e_n`.
    fn tangent_basis(&self) -> (Vec3, Vec3) {
        let n = self.e_n;
        let seed = if n.x.abs() < 0.9 {
            Vec3::x()
        } else {
            Vec3::y()
        };
        let t1 = (seed - n * n.dot(&seed)).normalize();
        (t1, n.cross(&t1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TerminalSpec {
    FullState(RigidBodyState),
    RelaxedOrbit(RelaxedOrbit),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpulsiveProblem {
    pub model: Model,
    pub initial: RigidBodyState,
    pub steps: usize,
    pub terminal: TerminalSpec,
}

impl ImpulsiveProblem {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        if let TerminalSpec::RelaxedOrbit(orbit) = &self.terminal {
            orbit.validate()?;
        }
        Ok(())
    }

    fn transfer_time(&self) -> f64 {
        self.steps as f64 * self.model.h.get()
    }
}

/// Post-impulse initial momenta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpulsiveDecision {
    pub gamma0_plus: Vec3,
    pub pi0_plus: Vec3,
}

impl ImpulsiveDecision {
    /// No initial impulse.
    pub fn unchanged(state: &RigidBodyState) -> Self {
        Self {
            gamma0_plus: state.lin_momentum,
            pi0_plus: state.ang_momentum,
        }
    }

    /// `[gamma_0+; Pi_0+]`.
    pub fn to_vector(&self) -> Vec6 {
        let mut v = Vec6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.gamma0_plus);
        v.fixed_rows_mut::<3>(3).copy_from(&self.pi0_plus);
        v
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            gamma0_plus: v.fixed_rows::<3>(0).into_owned(),
            pi0_plus: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.to_vector().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("decision", "momenta must be finite"))
        }
    }
}

/// The four momentum jumps of a two-impulse maneuver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Impulses {
    pub initial_linear: Vec3,
    pub initial_angular: Vec3,
    pub terminal_linear: Vec3,
    pub terminal_angular: Vec3,
}

impl Impulses {
    fn as_array(&self) -> [Vec3; 4] {
        [
            self.initial_linear,
            self.initial_angular,
            self.terminal_linear,
            self.terminal_angular,
        ]
    }

    /// Sum of the Euclidean norms.
    pub fn cost(&self) -> f64 {
        self.as_array().iter().map(|v| v.norm()).sum()
    }
}

/// A coast arc together with the impulses at both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferArc {
    /// Uncontrolled coast from the post-impulse initial state.
    pub trajectory: Trajectory,
    /// Terminal state after the second impulse.
    pub terminal: RigidBodyState,
    pub impulses: Impulses,
}

/// Post-impulse terminal momenta `(gamma_N+, Pi_N+)` implied by the terminal
/// specification at the coast endpoint.
///
/// For a relaxed orbit these are the circular-orbit momentum in the target
/// plane and a spin about the orbit normal.
pub fn terminal_momenta(
    model: &Model,
    terminal: &TerminalSpec,
    coast_end: &RigidBodyState,
) -> Result<(Vec3, Vec3)> {
    match terminal {
        TerminalSpec::FullState(desired) => Ok((desired.lin_momentum, desired.ang_momentum)),
        TerminalSpec::RelaxedOrbit(orbit) => {
            let x = &coast_end.position;
            let r = x.norm();
            if !(r > 0.0) {
                return Err(Error::SingularPotential { distance: r });
            }
            let speed = (model.gravity.mu / orbit.r_d).sqrt() * model.body.mass();
            let gamma = orbit.e_n.cross(x) * (speed / r);
            let pi = model.body.inertia()
                * (coast_end.attitude.matrix().transpose() * orbit.e_n * orbit.spin_rate);
            Ok((gamma, pi))
        }
    }
}

/// Coasts from the decision and applies the terminal impulse.
pub fn transfer(prob: &ImpulsiveProblem, d: &ImpulsiveDecision) -> Result<TransferArc> {
    d.check()?;
    let start = RigidBodyState {
        lin_momentum: d.gamma0_plus,
        ang_momentum: d.pi0_plus,
        ..prob.initial
    };
    let trajectory = prob.model.coast(&start, prob.steps, COAST)?;
    let end = *trajectory.last();
    let (gamma_plus, pi_plus) = terminal_momenta(&prob.model, &prob.terminal, &end)?;
    let impulses = Impulses {
        initial_linear: d.gamma0_plus - prob.initial.lin_momentum,
        initial_angular: d.pi0_plus - prob.initial.ang_momentum,
        terminal_linear: gamma_plus - end.lin_momentum,
        terminal_angular: pi_plus - end.ang_momentum,
    };
    let terminal = RigidBodyState {
        lin_momentum: gamma_plus,
        ang_momentum: pi_plus,
        ..end
    };
    Ok(TransferArc {
        trajectory,
        terminal,
        impulses,
    })
}

/// `|Pi_0+ - Pi_0| + |gamma_0+ - gamma_0| + |Pi_N+ - Pi_N| + |gamma_N+ - gamma_N|`.
pub fn impulsive_cost(prob: &ImpulsiveProblem, d: &ImpulsiveDecision) -> Result<f64> {
    Ok(transfer(prob, d)?.impulses.cost())
}

/// `[|x| - r_d; e_n . x; 1 - (R b) . e_n]` for a state on the relaxed orbit.
pub fn orbit_constraints(orbit: &RelaxedOrbit, state: &RigidBodyState) -> Vec3 {
    let x = &state.position;
    Vec3::new(
        x.norm() - orbit.r_d,
        orbit.e_n.dot(x),
        1.0 - (state.attitude * orbit.body_axis).dot(&orbit.e_n),
    )
}

fn arc_constraints(prob: &ImpulsiveProblem, arc: &TransferArc) -> DVector<f64> {
    match &prob.terminal {
        TerminalSpec::FullState(desired) => {
            DVector::from_column_slice(boundary_error(&arc.terminal, desired).as_slice())
        }
        TerminalSpec::RelaxedOrbit(orbit) => {
            DVector::from_column_slice(orbit_constraints(orbit, &arc.terminal).as_slice())
        }
    }
}

/// Terminal constraints: the 12-vector boundary error of the post-impulse
/// terminal state for a full-state target, or the three orbit constraints.
///
/// The momentum parts are closed exactly by the terminal impulse, so the
/// full-state momentum entries are identically zero.
pub fn terminal_constraints(
    prob: &ImpulsiveProblem,
    d: &ImpulsiveDecision,
) -> Result<DVector<f64>> {
    Ok(arc_constraints(prob, &transfer(prob, d)?))
}

/// Transfer arc plus its first-order sensitivity to the decision.
struct Linearization {
    arc: TransferArc,
    /// Terminal perturbation per unit decision change, `z_N = P dd`.
    p: Mat12x6,
    /// Derivatives of the four impulse vectors.
    impulse_jac: [Mat3x6; 4],
}

fn rows(p: &Mat12x6, offset: usize) -> Mat3x6 {
    p.fixed_rows::<3>(offset).into_owned()
}

fn linearize_at(
    prob: &ImpulsiveProblem,
    d: &ImpulsiveDecision,
    exec: Exec,
) -> Result<Linearization> {
    let arc = transfer(prob, d)?;
    let controls = vec![ControlSample::zero(); prob.steps + 1];
    let jac = trajectory_jacobians(&prob.model, &arc.trajectory.states, &controls, COAST, exec)?;
    let p = momentum_columns(&propagate_phi(&jac));

    let end = arc.trajectory.last();
    let (dgamma_plus, dpi_plus) = match &prob.terminal {
        TerminalSpec::FullState(_) => (Mat3x6::zeros(), Mat3x6::zeros()),
        TerminalSpec::RelaxedOrbit(orbit) => {
            let x = &end.position;
            let r = x.norm();
            let speed = (prob.model.gravity.mu / orbit.r_d).sqrt() * prob.model.body.mass();
            let dunit = (Mat3::identity() - x * x.transpose() / (r * r)) / r;
            let dgamma = hat(&orbit.e_n) * dunit * speed;
            let rt_en = end.attitude.matrix().transpose() * orbit.e_n;
            let dpi = prob.model.body.inertia() * hat(&rt_en) * orbit.spin_rate;
            (dgamma * rows(&p, POSITION), dpi * rows(&p, ATTITUDE))
        }
    };
    let mut select_gamma = Mat3x6::zeros();
    select_gamma.fixed_columns_mut::<3>(0).fill_with_identity();
    let mut select_pi = Mat3x6::zeros();
    select_pi.fixed_columns_mut::<3>(3).fill_with_identity();
    let impulse_jac = [
        select_gamma,
        select_pi,
        dgamma_plus - rows(&p, LIN_MOMENTUM),
        dpi_plus - rows(&p, ANG_MOMENTUM),
    ];
    Ok(Linearization {
        arc,
        p,
        impulse_jac,
    })
}

fn arc_constraint_jacobian(prob: &ImpulsiveProblem, lin: &Linearization) -> DMatrix<f64> {
    let end = lin.arc.trajectory.last();
    match &prob.terminal {
        TerminalSpec::FullState(desired) => {
            let e = end.attitude.local(&desired.attitude);
            let mut jac = DMatrix::zeros(12, 6);
            jac.fixed_view_mut::<3, 6>(POSITION, 0)
                .copy_from(&(-rows(&lin.p, POSITION)));
            jac.fixed_view_mut::<3, 6>(ATTITUDE, 0)
                .copy_from(&(-left_jacobian_inv(&e) * rows(&lin.p, ATTITUDE)));
            jac
        }
        TerminalSpec::RelaxedOrbit(orbit) => {
            let x = &end.position;
            let px = rows(&lin.p, POSITION);
            let pz = rows(&lin.p, ATTITUDE);
            let r = end.attitude.matrix();
            let mut jac = DMatrix::zeros(3, 6);
            jac.row_mut(0).copy_from(&((x / x.norm()).transpose() * px));
            jac.row_mut(1).copy_from(&(orbit.e_n.transpose() * px));
            jac.row_mut(2)
                .copy_from(&(orbit.e_n.transpose() * r * hat(&orbit.body_axis) * pz));
            jac
        }
    }
}

/// Cost, constraints and their exact derivatives with respect to
/// `[gamma_0+; Pi_0+]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulsiveGradients {
    pub cost: f64,
    /// Norm terms contribute nothing where the impulse vanishes.
    pub cost_gradient: Vec6,
    pub constraints: DVector<f64>,
    pub constraint_jacobian: DMatrix<f64>,
}

pub fn cost_and_constraint_gradients(
    prob: &ImpulsiveProblem,
    d: &ImpulsiveDecision,
    exec: Exec,
) -> Result<ImpulsiveGradients> {
    prob.validate()?;
    let lin = linearize_at(prob, d, exec)?;
    let mut cost_gradient = Vec6::zeros();
    for (v, j) in lin.arc.impulses.as_array().iter().zip(&lin.impulse_jac) {
        let n = v.norm();
        if n > 0.0 {
            cost_gradient += j.transpose() * (v / n);
        }
    }
    Ok(ImpulsiveGradients {
        cost: lin.arc.impulses.cost(),
        cost_gradient,
        constraints: arc_constraints(prob, &lin.arc),
        constraint_jacobian: arc_constraint_jacobian(prob, &lin),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpulsiveOptions {
    /// Terminal residual norm at which the boundary value solve stops.
    pub tpbvp_tol: f64,
    /// Constraint violation (max norm) required of a relaxed solution.
    pub feasibility_tol: f64,
    /// Lagrangian gradient norm required of a relaxed solution.
    pub stationarity_tol: f64,
    /// Smoothing of the norm terms inside the optimizer.
    pub smoothing: f64,
    pub max_iterations: usize,
}

impl Default for ImpulsiveOptions {
    fn default() -> Self {
        Self {
            tpbvp_tol: 1e-12,
            feasibility_tol: 1e-10,
            stationarity_tol: 1e-8,
            smoothing: 1e-9,
            max_iterations: 60,
        }
    }
}

impl ImpulsiveOptions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("impulsive.tpbvp_tol", self.tpbvp_tol),
            ("impulsive.feasibility_tol", self.feasibility_tol),
            ("impulsive.stationarity_tol", self.stationarity_tol),
            ("impulsive.smoothing", self.smoothing),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid(
                "impulsive.max_iterations",
                "must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpulsiveSolution {
    pub decision: ImpulsiveDecision,
    pub arc: TransferArc,
    pub cost: f64,
    /// Max-norm of the terminal constraints at the returned decision.
    pub violation: f64,
    /// Lagrangian gradient norm; relaxed problems only.
    pub stationarity: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub log: IterationLog,
}

impl ImpulsiveSolution {
    fn new(
        prob: &ImpulsiveProblem,
        decision: ImpulsiveDecision,
        arc: TransferArc,
        stationarity: Option<f64>,
        iterations: usize,
        converged: bool,
        log: IterationLog,
    ) -> Self {
        let violation = arc_constraints(prob, &arc).amax();
        Self {
            decision,
            cost: arc.impulses.cost(),
            arc,
            violation,
            stationarity,
            iterations,
            converged,
            log,
        }
    }

    pub fn ensure_converged(self, what: &'static str) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NoConvergence {
                what,
                iterations: self.iterations,
                residual: self.log.entries.last().map_or(f64::NAN, |e| e.error),
            })
        }
    }
}

/// Position and attitude misses `[x_d - x_N; log(R_N^T R_d)]`.
fn reach_residual(end: &RigidBodyState, desired: &RigidBodyState) -> Vec6 {
    let mut r = Vec6::zeros();
    r.fixed_rows_mut::<3>(0)
        .copy_from(&(desired.position - end.position));
    r.fixed_rows_mut::<3>(3)
        .copy_from(&end.attitude.local(&desired.attitude));
    r
}

fn reach_error(prob: &ImpulsiveProblem, desired: &RigidBodyState, d: &ImpulsiveDecision) -> f64 {
    match transfer(prob, d) {
        Ok(arc) => reach_residual(arc.trajectory.last(), desired).norm(),
        Err(_) => f64::INFINITY,
    }
}

/// Vis-viva speed at `r1` on the ellipse through `r1` and `r2`.
fn transfer_speed(mu: f64, r1: f64, r2: f64) -> f64 {
    (mu * (2.0 / r1 - 2.0 / (r1 + r2))).sqrt()
}

/// Direction orthogonal to `x` in which to launch: along the current
/// velocity if it has a transverse part, otherwise towards `target`.
fn launch_direction(x: &Vec3, gamma: &Vec3, target: &Vec3) -> Vec3 {
    let xh = x.normalize();
    for cand in [
        *gamma,
        xh.cross(target).cross(&xh),
        xh.cross(&Vec3::z()),
        xh.cross(&Vec3::x()),
    ] {
        let t = cand - xh * xh.dot(&cand);
        if t.norm() > 1e-12 * (1.0 + cand.norm()) {
            return t.normalize();
        }
    }
    Vec3::y()
}

/// Coarse full-state guess: the perigee momentum of the transfer ellipse
/// (a straight line without gravity) and a constant-rate rotation.
pub fn tpbvp_guess(prob: &ImpulsiveProblem, desired: &RigidBodyState) -> ImpulsiveDecision {
    let m = prob.model.body.mass();
    let t = prob.transfer_time();
    let x0 = &prob.initial.position;
    let gamma0_plus = if prob.model.gravity.mu == 0.0 || x0.norm() == 0.0 {
        (desired.position - x0) * (m / t)
    } else {
        let speed = transfer_speed(prob.model.gravity.mu, x0.norm(), desired.position.norm());
        launch_direction(x0, &prob.initial.lin_momentum, &desired.position) * (m * speed)
    };
    let omega = prob.initial.attitude.local(&desired.attitude) / t;
    ImpulsiveDecision {
        gamma0_plus,
        pi0_plus: prob.model.body.inertia() * omega,
    }
}

/// Fixed-endpoint transfer: Newton iteration on the position and attitude
/// miss, with the terminal impulse closing the momenta.
///
/// The 6x6 Jacobian can be rank deficient (a half-revolution transfer does
/// not see out-of-plane launch errors), so steps are minimum-norm.
pub fn solve_tpbvp(
    prob: &ImpulsiveProblem,
    guess: Option<ImpulsiveDecision>,
    opts: &ImpulsiveOptions,
    exec: Exec,
) -> Result<ImpulsiveSolution> {
    prob.validate()?;
    opts.validate()?;
    let desired = match &prob.terminal {
        TerminalSpec::FullState(s) => *s,
        TerminalSpec::RelaxedOrbit(_) => {
            return Err(Error::invalid(
                "terminal",
                "boundary value solve needs a full target state",
            ))
        }
    };
    let mut log = IterationLog::default();

    let unchanged = ImpulsiveDecision::unchanged(&prob.initial);
    let coast_error = reach_error(prob, &desired, &unchanged);
    if coast_error <= opts.tpbvp_tol {
        log.entries.push(entry(0, 0, 0, 0.0, coast_error, true));
        let arc = transfer(prob, &unchanged)?;
        return Ok(ImpulsiveSolution::new(
            prob, unchanged, arc, None, 0, true, log,
        ));
    }

    let mut d = guess.unwrap_or_else(|| tpbvp_guess(prob, &desired));
    let mut iteration = 0;
    let mut outer = 0;
    loop {
        let lin = linearize_at(prob, &d, exec)?;
        let r = reach_residual(lin.arc.trajectory.last(), &desired);
        let err = r.norm();
        if outer == 0 {
            log.entries.push(entry(0, 0, 0, 0.0, err, true));
        }
        if err <= opts.tpbvp_tol || outer == opts.max_iterations {
            let converged = err <= opts.tpbvp_tol;
            return Ok(ImpulsiveSolution::new(
                prob, d, lin.arc, None, outer, converged, log,
            ));
        }
        outer += 1;

        let e = lin.arc.trajectory.last().attitude.local(&desired.attitude);
        let mut jac = Mat6::zeros();
        jac.fixed_rows_mut::<3>(0)
            .copy_from(&(-rows(&lin.p, POSITION)));
        jac.fixed_rows_mut::<3>(3)
            .copy_from(&(-left_jacobian_inv(&e) * rows(&lin.p, ATTITUDE)));
        let svd = jac.svd(true, true);
        let smax = svd.singular_values.max();
        let step = svd
            .solve(&(-r), smax * 1e-10)
            .map_err(|_| Error::SingularJacobian {
                what: "boundary value Jacobian",
                cond: f64::INFINITY,
            })?;

        let x = d.to_vector();
        let mut c = 1.0;
        let mut next = None;
        for inner in 1..=40 {
            iteration += 1;
            let trial = ImpulsiveDecision::from_vector(&(x + step * c));
            let te = reach_error(prob, &desired, &trial);
            let ok = te < (1.0 - 1e-4 * c) * err;
            log.entries.push(entry(iteration, outer, inner, c, te, ok));
            if ok {
                next = Some(trial);
                break;
            }
            c *= 0.5;
        }
        match next {
            Some(trial) => d = trial,
            None => {
                let arc = lin.arc;
                return Ok(ImpulsiveSolution::new(
                    prob, d, arc, None, outer, false, log,
                ));
            }
        }
    }
}

fn entry(
    iteration: usize,
    outer: usize,
    inner: usize,
    c: f64,
    error: f64,
    accepted: bool,
) -> IterationEntry {
    IterationEntry {
        iteration,
        outer_index: outer,
        inner_index: inner,
        c,
        error,
        accepted,
    }
}

/// Smoothed norm `sqrt(|v|^2 + eps^2)` and its gradient and Hessian.
fn smooth_norm(v: &Vec3, eps: f64) -> (f64, Vec3, Mat3) {
    let s = (v.norm_squared() + eps * eps).sqrt();
    let g = v / s;
    let h = (Mat3::identity() - g * g.transpose()) / s;
    (s, g, h)
}

/// Alignment is imposed through the two components of `R b` orthogonal to
/// `e_n`; `1 - (R b).e_n` has a vanishing gradient wherever it is satisfied.
fn optimizer_constraints(
    orbit: &RelaxedOrbit,
    lin: &Linearization,
) -> (DVector<f64>, DMatrix<f64>) {
    let end = lin.arc.trajectory.last();
    let c = optimizer_constraint_values(orbit, end);
    let x = &end.position;
    let px = rows(&lin.p, POSITION);
    let pz = rows(&lin.p, ATTITUDE);
    let (t1, t2) = orbit.tangent_basis();
    let drb = -(end.attitude.matrix() * hat(&orbit.body_axis));
    let mut jac = DMatrix::zeros(4, 6);
    jac.row_mut(0).copy_from(&((x / x.norm()).transpose() * px));
    jac.row_mut(1).copy_from(&(orbit.e_n.transpose() * px));
    jac.row_mut(2).copy_from(&(t1.transpose() * drb * pz));
    jac.row_mut(3).copy_from(&(t2.transpose() * drb * pz));
    (c, jac)
}

fn optimizer_constraint_values(orbit: &RelaxedOrbit, end: &RigidBodyState) -> DVector<f64> {
    let (t1, t2) = orbit.tangent_basis();
    let rb = end.attitude * orbit.body_axis;
    DVector::from_vec(vec![
        end.position.norm() - orbit.r_d,
        orbit.e_n.dot(&end.position),
        t1.dot(&rb),
        t2.dot(&rb),
    ])
}

/// Smoothed cost and optimizer constraints at a trial point, or `None` when
/// the coast fails.
fn merit_terms(
    prob: &ImpulsiveProblem,
    orbit: &RelaxedOrbit,
    d: &ImpulsiveDecision,
    eps: f64,
) -> Option<(f64, DVector<f64>)> {
    let arc = transfer(prob, d).ok()?;
    let f = arc
        .impulses
        .as_array()
        .iter()
        .map(|v| smooth_norm(v, eps).0)
        .sum();
    let c = optimizer_constraint_values(orbit, arc.trajectory.last());
    if (arc.trajectory.last().attitude * orbit.body_axis).dot(&orbit.e_n) <= 0.0 {
        return None;
    }
    Some((f, c))
}

/// Gradient of the smoothed Lagrangian with the norm-term weights frozen.
fn weighted_gradient(
    lin: &Linearization,
    weights: &[Vec3; 4],
    a: &DMatrix<f64>,
    lambda: &DVector<f64>,
) -> Vec6 {
    let mut g = Vec6::zeros();
    for (j, w) in lin.impulse_jac.iter().zip(weights) {
        g += j.transpose() * w;
    }
    let extra = a.transpose() * lambda;
    g + Vec6::from_column_slice(extra.as_slice())
}

fn relaxed_guess(prob: &ImpulsiveProblem, orbit: &RelaxedOrbit) -> ImpulsiveDecision {
    let mut d = ImpulsiveDecision::unchanged(&prob.initial);
    let x0 = &prob.initial.position;
    let mu = prob.model.gravity.mu;
    if mu > 0.0 && x0.norm() > 0.0 {
        let speed = transfer_speed(mu, x0.norm(), orbit.r_d);
        let dir = launch_direction(x0, &prob.initial.lin_momentum, &orbit.e_n.cross(x0));
        d.gamma0_plus = dir * (prob.model.body.mass() * speed);
    }
    d
}

/// Relaxed-orbit transfer by sequential quadratic programming.
///
/// Each iteration solves the equality-constrained quadratic model
/// (Lagrange-Newton on the KKT system) and backtracks on the l1 merit
/// function `f + nu |c|_1`, with a second-order correction against the
/// Maratos effect. The Lagrangian Hessian combines the exact curvature of
/// the smoothed norms with central differences of the exact gradients.
pub fn solve_impulsive(
    prob: &ImpulsiveProblem,
    guess: Option<ImpulsiveDecision>,
    opts: &ImpulsiveOptions,
    exec: Exec,
) -> Result<ImpulsiveSolution> {
    prob.validate()?;
    opts.validate()?;
    let orbit = match &prob.terminal {
        TerminalSpec::RelaxedOrbit(o) => *o,
        TerminalSpec::FullState(_) => {
            return Err(Error::invalid(
                "terminal",
                "relaxed solve needs an orbit target",
            ))
        }
    };
    let eps = opts.smoothing;
    let mut log = IterationLog::default();

    // No maneuver needed.
    let unchanged = ImpulsiveDecision::unchanged(&prob.initial);
    if let Ok(arc) = transfer(prob, &unchanged) {
        let violation = arc_constraints(prob, &arc).amax();
        if violation <= opts.feasibility_tol && arc.impulses.cost() == 0.0 {
            log.entries.push(entry(0, 0, 0, 0.0, violation, true));
            return Ok(ImpulsiveSolution::new(
                prob,
                unchanged,
                arc,
                Some(0.0),
                0,
                true,
                log,
            ));
        }
    }

    let mut d = guess.unwrap_or_else(|| relaxed_guess(prob, &orbit));
    let scale = Vec6::from_fn(|i, _| {
        if i < 3 {
            prob.model.body.mass()
        } else {
            prob.model.body.inertia().diagonal().amax()
        }
    });
    let mut lambda: Option<DVector<f64>> = None;
    let mut nu = 0.0f64;
    let mut iteration = 0;
    let mut outer = 0;
    loop {
        let lin = linearize_at(prob, &d, exec)?;
        let (c, a) = optimizer_constraints(&orbit, &lin);
        let imp = lin.arc.impulses.as_array();
        let mut f = 0.0;
        let mut g = Vec6::zeros();
        let mut h_outer = Mat6::zeros();
        let mut weights = [Vec3::zeros(); 4];
        for i in 0..4 {
            let (s, w, hs) = smooth_norm(&imp[i], eps);
            let j = &lin.impulse_jac[i];
            f += s;
            g += j.transpose() * w;
            h_outer += j.transpose() * hs * j;
            weights[i] = w;
        }

        // Least-squares multipliers for the stationarity test.
        let at = a.transpose();
        let g_d = DVector::from_column_slice(g.as_slice());
        let lambda_ls = at
            .clone()
            .svd(true, true)
            .solve(&(-&g_d), 1e-14)
            .map_err(|e| Error::InfeasibleSubproblem(e.to_string()))?;
        let stationarity = (&g_d + &at * &lambda_ls).norm();
        let violation = c.amax().max(arc_constraints(prob, &lin.arc).amax());
        if outer == 0 {
            log.entries
                .push(entry(0, 0, 0, 0.0, violation.max(stationarity), true));
        }
        if (violation <= opts.feasibility_tol && stationarity <= opts.stationarity_tol)
            || outer == opts.max_iterations
        {
            let converged =
                violation <= opts.feasibility_tol && stationarity <= opts.stationarity_tol;
            return Ok(ImpulsiveSolution::new(
                prob,
                d,
                lin.arc,
                Some(stationarity),
                outer,
                converged,
                log,
            ));
        }
        outer += 1;
        let lam = lambda.clone().unwrap_or_else(|| lambda_ls.clone());

        // Curvature of the smooth inner maps by central differences.
        let x = d.to_vector();
        let grads = exec.try_map(12, |k| {
            let j = k / 2;
            let delta = 1e-6 * scale[j].max(x[j].abs());
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let mut xp = x;
            xp[j] += sign * delta;
            let lp = linearize_at(prob, &ImpulsiveDecision::from_vector(&xp), exec)?;
            let (_, ap) = optimizer_constraints(&orbit, &lp);
            Ok::<_, Error>((weighted_gradient(&lp, &weights, &ap, &lam), delta))
        })?;
        let mut h = h_outer;
        for j in 0..6 {
            let (gp, delta) = grads[2 * j];
            let (gm, _) = grads[2 * j + 1];
            h.set_column(j, &(h.column(j) + (gp - gm) / (2.0 * delta)));
        }
        h = (h + h.transpose()) * 0.5;

        let (p, lambda_new) = kkt_step(&h, &a, &g, &c, &scale)?;
        nu = nu.max(2.0 * lambda_new.amax());
        let merit = |f: f64, c: &DVector<f64>| f + nu * l1(c);
        let phi = merit(f, &c);
        let dphi = g.dot(&p) - nu * l1(&c);
        let slack = 1e-14 * (1.0 + phi.abs());

        // Second-order corrections: restore feasibility along the scaled
        // range of the constraint Jacobian at `d`.
        let dmat = DMatrix::from_diagonal(&DVector::from_column_slice(scale.as_slice()));
        let a_s = &a * &dmat;
        let range = (&a_s * a_s.transpose()).lu();
        let correct = |xt: &Vec6, ct: &DVector<f64>| -> Option<Vec6> {
            let y = range.solve(ct)?;
            let corr = -(&dmat * (a_s.transpose() * y));
            Some(xt + Vec6::from_column_slice(corr.as_slice()))
        };

        let mut step = 1.0;
        let mut accepted = None;
        for inner in 1..=40 {
            iteration += 1;
            let target = phi + 1e-4 * step * dphi + slack;
            let mut xt = x + p * step;
            let mut candidate = None;
            let mut ok = false;
            for _ in 0..3 {
                let trial = ImpulsiveDecision::from_vector(&xt);
                let Some((ft, ct)) = merit_terms(prob, &orbit, &trial, eps) else {
                    break;
                };
                ok = merit(ft, &ct) <= target;
                let next = correct(&xt, &ct);
                candidate = Some((trial, ft, ct));
                if ok {
                    break;
                }
                match next {
                    Some(v) => xt = v,
                    None => break,
                }
            }
            let trial_merit = candidate
                .as_ref()
                .map_or(f64::INFINITY, |(_, ft, ct)| merit(*ft, ct));
            log.entries
                .push(entry(iteration, outer, inner, step, trial_merit, ok));
            if ok {
                accepted = candidate.map(|(t, _, _)| t);
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some(t) => {
                d = t;
                lambda = Some(lambda_new);
            }
            None => {
                return Ok(ImpulsiveSolution::new(
                    prob,
                    d,
                    lin.arc,
                    Some(stationarity),
                    outer,
                    false,
                    log,
                ))
            }
        }
    }
}

fn l1(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Solves `[H A^T; A 0] [p; lambda] = [-g; -c]` by the null-space method in
/// the variables scaled by `scale`.
///
/// Eigenvalues of the reduced Hessian `Z^T H Z` are replaced by their
/// magnitudes (floored relative to the largest), which keeps `p` a descent
/// direction for the merit function. The full KKT inertia is not a usable
/// test here: curvatures of smoothed norms near zero dwarf everything else.
fn kkt_step(
    h: &Mat6,
    a: &DMatrix<f64>,
    g: &Vec6,
    c: &DVector<f64>,
    scale: &Vec6,
) -> Result<(Vec6, DVector<f64>)> {
    let m = a.nrows();
    let n = 6;
    let dmat = Mat6::from_diagonal(scale);
    let hs = dmat * h * dmat;
    let a_s = a * DMatrix::from_column_slice(n, n, dmat.as_slice());
    let gs = DVector::from_column_slice((dmat * g).as_slice());

    let ata = Mat6::from_column_slice((a_s.transpose() * &a_s).as_slice());
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let largest = eig.eigenvalues[order[0]];
    let weakest = eig.eigenvalues[order[m - 1]];
    if !(weakest > 1e-20 * largest) {
        return Err(Error::InfeasibleSubproblem(
            "constraint gradients are linearly dependent".into(),
        ));
    }
    let z = DMatrix::from_fn(n, n - m, |i, k| eig.eigenvectors[(i, order[m + k])]);

    let aat_lu = (&a_s * a_s.transpose()).lu();
    let y = aat_lu
        .solve(c)
        .ok_or_else(|| Error::InfeasibleSubproblem("singular A A^T".into()))?;
    let p_range = -(a_s.transpose() * y);

    let hd = DMatrix::from_column_slice(n, n, hs.as_slice());
    let reduced_rhs = -(z.transpose() * (&gs + &hd * &p_range));
    let hr = SymmetricEigen::new(z.transpose() * &hd * &z);
    let floor = 1e-14 * hr.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let inv = DMatrix::from_diagonal(&hr.eigenvalues.map(|l| 1.0 / l.abs().max(floor)));
    let q = &hr.eigenvectors;
    let pz = q * inv * q.transpose() * reduced_rhs;
    let ps = &p_range + &z * pz;
    let lambda = aat_lu
        .solve(&(-(&a_s * (&gs + &hd * &ps))))
        .ok_or_else(|| Error::InfeasibleSubproblem("singular A A^T".into()))?;
    let p = dmat * Vec6::from_column_slice(ps.as_slice());
    Ok((p, lambda))
}
