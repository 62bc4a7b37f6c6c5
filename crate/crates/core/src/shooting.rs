//! Smooth optimal control by shooting on the initial multiplier.
//!
//! The first-order integrator is paired with its discrete adjoint:
//!
//! ```text
//! u^f_{k+1} = -W_f^-1 lambda^2_k,   u^m_{k+1} = -W_m^-1 lambda^4_k
//! y_{k+1}   = step1(y_k, u_{k+1})
//! lambda_k  = A_{k+1}^T lambda_{k+1}
//! ```
//!
//! marched forward from `(y_0, lambda_0)`. Newton-Armijo iterations on
//! `lambda_0` drive the terminal boundary error to zero using the coupled
//! sensitivity `Psi^12`.

use nalgebra::SVD;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step1, ControlSample, Model, Order, RigidBodyState};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::liegroup::{vee_unchecked, Mat3};
use crate::linearize::{
    block, boundary_error, propagate_psi, step_jacobian, weight_inverses, Mat12, MultiplierVector,
    Vec12, ANG_MOMENTUM, LIN_MOMENTUM,
};

/// Condition number above which the Newton direction switches to least squares.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothProblem {
    pub model: Model,
    pub initial: RigidBodyState,
    pub desired: RigidBodyState,
    pub steps: usize,
    pub w_force: Mat3,
    pub w_moment: Mat3,
}

impl SmoothProblem {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::invalid(
                "steps",
                "a smooth maneuver needs at least 2 steps",
            ));
        }
        weight_inverses(&self.w_force, &self.w_moment)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Stop once the boundary error norm is at or below this.
    pub eps_stop: f64,
    /// Armijo sufficient-decrease scale, `0 < alpha < 1/2`.
    pub alpha: f64,
    /// Line-search divisor, `> 1`.
    pub backtrack: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Seed for the default initial multiplier guess.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps_stop: 1e-10,
            alpha: 1e-4,
            backtrack: 10.0,
            max_outer: 100,
            max_inner: 25,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::invalid("solver.alpha", "must lie in (0, 1/2)"));
        }
        if !(self.backtrack > 1.0) {
            return Err(Error::invalid("solver.backtrack", "must exceed 1"));
        }
        if !(self.eps_stop > 0.0) {
            return Err(Error::invalid("solver.eps_stop", "must be positive"));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::invalid(
                "solver",
                "iteration limits must be positive",
            ));
        }
        Ok(())
    }
}

/// Zero perturbed by uniform noise in `[-1e-3, 1e-3]`.
pub fn default_multiplier_guess(seed: u64) -> MultiplierVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MultiplierVector::from_fn(|_, _| rng.random_range(-1e-3..=1e-3))
}

/// States `y_0..y_N`, multipliers `lambda_0..lambda_{N-1}` and controls
/// `u_1..u_N` (stored at `controls[k] = u_{k+1}`).
#[derive(Debug, Clone, PartialEq)]
pub struct ExtremalTrajectory {
    pub states: Vec<RigidBodyState>,
    pub multipliers: Vec<MultiplierVector>,
    pub controls: Vec<ControlSample>,
}

impl ExtremalTrajectory {
    pub fn terminal(&self) -> &RigidBodyState {
        self.states.last().expect("extremal has at least one state")
    }
}

fn control_from_multiplier(wf_inv: &Mat3, wm_inv: &Mat3, lambda: &Vec12) -> ControlSample {
    ControlSample::new(
        -(wf_inv * block(lambda, LIN_MOMENTUM)),
        -(wm_inv * block(lambda, ANG_MOMENTUM)),
    )
}

/// Marches the discrete necessary conditions forward from `lambda_0`.
pub fn propagate_extremal(
    problem: &SmoothProblem,
    lambda0: &MultiplierVector,
) -> Result<ExtremalTrajectory> {
    let n = problem.steps;
    let model = &problem.model;
    let (wf_inv, wm_inv) = weight_inverses(&problem.w_force, &problem.w_moment)?;
    let zero = ControlSample::zero();

    let mut states = Vec::with_capacity(n + 1);
    let mut multipliers = Vec::with_capacity(n);
    let mut controls = Vec::with_capacity(n);
    let mut state = problem.initial;
    let mut lambda = *lambda0;
    states.push(state);
    for k in 0..n {
        let u = control_from_multiplier(&wf_inv, &wm_inv, &lambda);
        state = step1(&model.body, &model.gravity, model.h, &state, &u)?;
        states.push(state);
        multipliers.push(lambda);
        controls.push(u);
        if k + 1 < n {
            let a = step_jacobian(model, &state, &zero, &zero, Order::First)?;
            lambda = a
                .transpose()
                .lu()
                .solve(&lambda)
                .ok_or(Error::SingularJacobian {
                    what: "multiplier update",
                    cond: f64::INFINITY,
                })?;
            if !lambda.iter().all(|v| v.is_finite()) {
                return Err(Error::SingularJacobian {
                    what: "multiplier update",
                    cond: f64::INFINITY,
                });
            }
        }
    }
    Ok(ExtremalTrajectory {
        states,
        multipliers,
        controls,
    })
}

/// `sum_k h/2 (u^f_{k+1})^T W_f u^f_{k+1} + h/2 (u^m_{k+1})^T W_m u^m_{k+1}`.
pub fn performance_index(
    controls: &[ControlSample],
    h: f64,
    w_force: &Mat3,
    w_moment: &Mat3,
) -> f64 {
    controls
        .iter()
        .map(|u| {
            0.5 * h * (u.force.dot(&(w_force * u.force)) + u.moment.dot(&(w_moment * u.moment)))
        })
        .sum()
}

/// Largest scaled residuals of the necessary conditions along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtremalResiduals {
    /// Translational and momentum updates.
    pub dynamics: f64,
    /// Implicit relative-rotation equation.
    pub rotation: f64,
    /// `u + W^-1 lambda`.
    pub control: f64,
    /// `lambda_k - A_{k+1}^T lambda_{k+1}`.
    pub multiplier: f64,
}

impl ExtremalResiduals {
    pub fn max(&self) -> f64 {
        self.dynamics
            .max(self.rotation)
            .max(self.control)
            .max(self.multiplier)
    }
}

fn scaled(residual: f64, magnitude: f64) -> f64 {
    residual / magnitude.max(1.0)
}

/// Re-evaluates every necessary condition pointwise from the stored states,
/// controls and multipliers. Each residual is divided by `max(1, |terms|)`.
pub fn extremal_residuals(
    problem: &SmoothProblem,
    traj: &ExtremalTrajectory,
) -> Result<ExtremalResiduals> {
    let model = &problem.model;
    let h = model.h.get();
    let m = model.body.mass();
    let jd = model.body.nonstandard_inertia();
    let (wf_inv, wm_inv) = weight_inverses(&problem.w_force, &problem.w_moment)?;
    let zero = ControlSample::zero();
    let mut out = ExtremalResiduals::default();
    let n = traj.controls.len();
    for k in 0..n {
        let (y, yn, u) = (&traj.states[k], &traj.states[k + 1], &traj.controls[k]);
        let lambda = &traj.multipliers[k];

        let rx = yn.position - y.position - y.lin_momentum * (h / m);
        out.dynamics = out.dynamics.max(scaled(rx.norm(), yn.position.norm()));

        let f = y.attitude.transpose() * yn.attitude;
        let fm = f.matrix();
        let rr = vee_unchecked(&(fm * jd - jd * fm.transpose())) - y.ang_momentum * h;
        out.rotation = out
            .rotation
            .max(scaled(rr.norm(), h * y.ang_momentum.norm()));

        let (fg, mg) = model
            .gravity
            .force_moment(&model.body, &yn.attitude, &yn.position)?;
        let rg = yn.lin_momentum - y.lin_momentum - (fg + u.force) * h;
        out.dynamics = out.dynamics.max(scaled(rg.norm(), yn.lin_momentum.norm()));
        let rp = yn.ang_momentum - fm.transpose() * y.ang_momentum - (mg + u.moment) * h;
        out.dynamics = out.dynamics.max(scaled(rp.norm(), yn.ang_momentum.norm()));

        let expected = control_from_multiplier(&wf_inv, &wm_inv, lambda);
        let ru = (u.force - expected.force).norm() + (u.moment - expected.moment).norm();
        out.control = out
            .control
            .max(scaled(ru, u.force.norm() + u.moment.norm()));

        if k + 1 < n {
            let a = step_jacobian(model, yn, &zero, &zero, Order::First)?;
            let rhs = a.transpose() * traj.multipliers[k + 1];
            let rl = (lambda - rhs).norm();
            out.multiplier = out.multiplier.max(scaled(rl, lambda.norm()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationEntry {
    /// Running count of extremal propagations (the horizontal axis of a
    /// convergence plot).
    pub iteration: usize,
    pub outer_index: usize,
    /// Line-search trial within the outer iteration; 0 marks the error at the
    /// start of the outer iteration.
    pub inner_index: usize,
    pub c: f64,
    pub error: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IterationLog {
    pub entries: Vec<IterationEntry>,
}

impl IterationLog {
    /// Error at the start of each outer iteration followed by the final error.
    pub fn accepted_errors(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.accepted)
            .map(|e| e.error)
            .collect()
    }

    /// Smallest `C` with `E_{i+1} <= C E_i^2` over consecutive accepted errors
    /// once `E_i < threshold`, or `None` if no such pair exists.
    pub fn quadratic_constant(&self, threshold: f64) -> Option<f64> {
        self.accepted_errors()
            .windows(2)
            .filter(|w| w[0] < threshold && w[0] > 0.0)
            .map(|w| w[1] / (w[0] * w[0]))
            .min_by(f64::total_cmp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShootingSolution {
    pub lambda0: MultiplierVector,
    pub trajectory: ExtremalTrajectory,
    pub error: f64,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Condition number of the last `Psi^12` used for a Newton direction.
    pub condition: f64,
    pub log: IterationLog,
}

impl ShootingSolution {
    pub fn ensure_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::MaxIterations {
                iterations: self.outer_iterations,
                error: self.error,
            })
        }
    }
}

/// Solves `Psi12 d = z`. Falls back to the least-squares direction when the
/// condition number exceeds [`MAX_CONDITION`].
fn newton_direction(psi12: &Mat12, z: &Vec12) -> Result<(Vec12, f64)> {
    let svd = SVD::new(*psi12, true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    let dir = if cond <= MAX_CONDITION {
        psi12.lu().solve(z)
    } else {
        svd.solve(z, smax * 1e-12).ok()
    };
    match dir {
        Some(d) if d.iter().all(|v| v.is_finite()) && d.norm() > 0.0 => Ok((d, cond)),
        _ => Err(Error::SingularJacobian {
            what: "Psi12",
            cond,
        }),
    }
}

/// Newton-Armijo shooting on the initial multiplier.
///
/// Trial multipliers `lambda_0 + c D z_N` with `D = Psi12^-1` and
/// `c = 1, 1/b, 1/b^2, ...` are accepted once
/// `|z_N^trial| <= (1 - 2 alpha c) |z_N|`.
pub fn solve_shooting(
    problem: &SmoothProblem,
    lambda0_guess: &MultiplierVector,
    cfg: &SolverConfig,
    exec: Exec,
) -> Result<ShootingSolution> {
    problem.validate()?;
    cfg.validate()?;
    let mut lambda0 = *lambda0_guess;
    let mut traj = propagate_extremal(problem, &lambda0)?;
    let mut z = boundary_error(traj.terminal(), &problem.desired);
    let mut error = z.norm();
    let mut log = IterationLog::default();
    let mut iteration = 0;
    let mut condition = f64::NAN;
    log.entries.push(IterationEntry {
        iteration,
        outer_index: 0,
        inner_index: 0,
        c: 0.0,
        error,
        accepted: true,
    });

    let mut outer = 0;
    while error > cfg.eps_stop {
        if outer == cfg.max_outer {
            break;
        }
        outer += 1;
        let tm = propagate_psi(
            &problem.model,
            &traj.states,
            &traj.multipliers,
            &problem.w_force,
            &problem.w_moment,
            exec,
        )?;
        let (dir, cond) = newton_direction(&tm.psi12(), &z)?;
        condition = cond;

        let mut c = 1.0;
        let mut accepted = None;
        for inner in 1..=cfg.max_inner {
            iteration += 1;
            let trial = lambda0 + dir * c;
            let result = propagate_extremal(problem, &trial).map(|t| {
                let zt = boundary_error(t.terminal(), &problem.desired);
                (t, zt)
            });
            let trial_error = match &result {
                Ok((_, zt)) => zt.norm(),
                Err(_) => f64::INFINITY,
            };
            let ok = trial_error <= (1.0 - 2.0 * cfg.alpha * c) * error;
            log.entries.push(IterationEntry {
                iteration,
                outer_index: outer,
                inner_index: inner,
                c,
                error: trial_error,
                accepted: ok,
            });
            if ok {
                accepted = Some((trial, result?));
                break;
            }
            c /= cfg.backtrack;
        }
        match accepted {
            Some((trial, (t, zt))) => {
                lambda0 = trial;
                traj = t;
                z = zt;
                error = z.norm();
            }
            None => {
                return Ok(ShootingSolution {
                    lambda0,
                    trajectory: traj,
                    error,
                    outer_iterations: outer,
                    converged: false,
                    condition,
                    log,
                });
            }
        }
    }
    Ok(ShootingSolution {
        lambda0,
        trajectory: traj,
        converged: error <= cfg.eps_stop,
        error,
        outer_iterations: outer,
        condition,
        log,
    })
}

/// Multiplier perturbation that would close the boundary error to first
/// order; exposed for sensitivity checks.
pub fn linear_prediction(
    problem: &SmoothProblem,
    traj: &ExtremalTrajectory,
    dlambda0: &Vec12,
    exec: Exec,
) -> Result<Vec12> {
    let tm = propagate_psi(
        &problem.model,
        &traj.states,
        &traj.multipliers,
        &problem.w_force,
        &problem.w_moment,
        exec,
    )?;
    Ok(tm.psi12() * dlambda0)
}
