//! Self-convergence study of the uncontrolled integrators.

use crate::dynamics::{
    BodyParams, GravityParams, Model, Order, RigidBodyState, StepSize, Trajectory,
};
use crate::error::Result;
use crate::exec::Exec;
use crate::linearize::{difference, retract};

use super::config::ConvergencePlan;
use super::report::{ConvergenceRow, ConvergenceTable};

/// Differences below this (relative to the state size) count as round-off.
const EXACT_TOL: f64 = 1e-12;

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn fit_order(h: &[f64], err: &[f64]) -> f64 {
    let n = h.len() as f64;
    let lx: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn scale(s: &RigidBodyState) -> f64 {
    1.0 + s.position.norm() + s.lin_momentum.norm() + s.ang_momentum.norm()
}

/// Terminal-state errors of one integrator over the plan's step sizes.
///
/// The reference is the Richardson extrapolation of the two finest runs,
/// with the order estimated from the last three. Errors are norms of the
/// Lie-algebra difference to that reference.
pub fn study_order(
    body: &BodyParams,
    gravity: &GravityParams,
    initial: &RigidBodyState,
    plan: &ConvergencePlan,
    order: Order,
    exec: Exec,
) -> Result<(ConvergenceTable, Trajectory)> {
    let hs = plan.step_sizes();
    let mut runs = exec.try_map(hs.len(), |i| {
        let model = Model::new(body.clone(), *gravity, StepSize::new(hs[i])?);
        model.coast(initial, plan.divisions[i], order)
    })?;
    let ends: Vec<RigidBodyState> = runs.iter().map(|t| *t.last()).collect();
    let n = ends.len();
    let diffs: Vec<f64> = ends
        .windows(2)
        .map(|w| difference(&w[1], &w[0]).norm())
        .collect();
    let tol = EXACT_TOL * scale(&ends[n - 1]);
    let exact = diffs.iter().all(|d| *d <= tol);

    let (errors, fitted_order) = if exact {
        let errors = ends
            .iter()
            .map(|e| difference(&ends[n - 1], e).norm())
            .collect::<Vec<_>>();
        (errors, None)
    } else {
        let ratio = hs[n - 2] / hs[n - 1];
        let p = (diffs[n - 3] / diffs[n - 2]).ln() / ratio.ln();
        let correction = difference(&ends[n - 2], &ends[n - 1]) / (ratio.powf(p) - 1.0);
        let reference = retract(&ends[n - 1], &correction);
        let errors: Vec<f64> = ends
            .iter()
            .map(|e| difference(&reference, e).norm())
            .collect();
        let fitted = fit_order(&hs, &errors);
        (errors, Some(fitted))
    };
    let rows = hs
        .iter()
        .zip(&plan.divisions)
        .zip(&errors)
        .map(|((&h, &divisions), &error)| ConvergenceRow {
            divisions,
            h,
            error,
        })
        .collect();
    let finest = runs.pop().expect("at least three runs");
    Ok((
        ConvergenceTable {
            order: order.as_u8(),
            rows,
            fitted_order,
            exact,
        },
        finest,
    ))
}
