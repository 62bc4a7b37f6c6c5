//! Trajectory CSV and the JSON run report.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlSample, Model, RigidBodyState};
use crate::error::{Error, Result};
use crate::liegroup::{Mat3, Rotation, Vec3};

pub const SCHEMA: u32 = 1;

pub const CSV_HEADER: &str = "k,t,x1,x2,x3,gamma1,gamma2,gamma3,\
R11,R12,R13,R21,R22,R23,R31,R32,R33,Pi1,Pi2,Pi3,\
uf1,uf2,uf3,um1,um2,um3,energy,angmom1,angmom2,angmom3";

/// One CSV row: the state at step `k`, the control sample applied to reach
/// it (zero on row 0) and the conserved quantities evaluated there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Row {
    pub k: usize,
    pub t: f64,
    pub state: RigidBodyState,
    pub control: ControlSample,
    pub energy: f64,
    pub ang_momentum: Vec3,
}

/// Rows for `states[k]` with `controls[k - 1]` on row `k`.
pub fn rows(
    model: &Model,
    states: &[RigidBodyState],
    controls: &[ControlSample],
) -> Result<Vec<Row>> {
    let h = model.h.get();
    states
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let inv = model.invariants(s)?;
            let control = match k {
                0 => ControlSample::zero(),
                _ => controls
                    .get(k - 1)
                    .copied()
                    .unwrap_or_else(ControlSample::zero),
            };
            Ok(Row {
                k,
                t: k as f64 * h,
                state: *s,
                control,
                energy: inv.energy,
                ang_momentum: inv.total_ang_momentum,
            })
        })
        .collect()
}

fn push(line: &mut String, v: f64) {
    // 17 significant digits round-trip every f64.
    write!(line, ",{v:.16e}").expect("writing to a String");
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut out = String::with_capacity(rows.len() * 700 + CSV_HEADER.len() + 1);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let s = &r.state;
        let mut line = r.k.to_string();
        push(&mut line, r.t);
        for v in s.position.iter().chain(s.lin_momentum.iter()) {
            push(&mut line, *v);
        }
        for row in s.attitude.to_rows() {
            for v in row {
                push(&mut line, v);
            }
        }
        let rest = s
            .ang_momentum
            .iter()
            .chain(r.control.force.iter())
            .chain(r.control.moment.iter());
        for v in rest {
            push(&mut line, *v);
        }
        push(&mut line, r.energy);
        for v in r.ang_momentum.iter() {
            push(&mut line, *v);
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Parses a CSV written by [`to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<Row>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        _ => return Err(Error::invalid("csv", "missing or unexpected header")),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let mut fields = line.split(',');
            let k = fields
                .next()
                .and_then(|f| f.parse::<usize>().ok())
                .ok_or_else(|| Error::invalid("csv", format!("line {}: bad step index", i + 2)))?;
            let v = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid("csv", format!("line {}: {e}", i + 2)))?;
            if v.len() != 29 {
                return Err(Error::invalid(
                    "csv",
                    format!("line {}: expected 30 columns", i + 2),
                ));
            }
            let v3 = |o: usize| Vec3::new(v[o], v[o + 1], v[o + 2]);
            let r = Rotation::new(Mat3::from_fn(|a, b| v[7 + 3 * a + b]))
                .map_err(|e| Error::invalid("csv", format!("line {}: {e}", i + 2)))?;
            Ok(Row {
                k,
                t: v[0],
                state: RigidBodyState::new(r, v3(1), v3(16), v3(4)),
                control: ControlSample::new(v3(19), v3(22)),
                energy: v[25],
                ang_momentum: v3(26),
            })
        })
        .collect()
}

/// Drift diagnostics computed from the emitted rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvariantDiagnostics {
    /// `max_k |E_k - E_0|`.
    pub energy_drift: f64,
    /// `max_k |R_k^T R_k - I|_F`.
    pub orthogonality_error: f64,
    /// `max_k |L_k - L_0|` for the total angular momentum `L`.
    pub ang_momentum_drift: f64,
}

impl InvariantDiagnostics {
    pub fn from_rows(rows: &[Row]) -> Self {
        let Some(first) = rows.first() else {
            return Self {
                energy_drift: 0.0,
                orthogonality_error: 0.0,
                ang_momentum_drift: 0.0,
            };
        };
        let mut out = Self {
            energy_drift: 0.0,
            orthogonality_error: 0.0,
            ang_momentum_drift: 0.0,
        };
        for r in rows {
            out.energy_drift = out.energy_drift.max((r.energy - first.energy).abs());
            out.orthogonality_error = out
                .orthogonality_error
                .max(r.state.attitude.orthogonality_error());
            out.ang_momentum_drift = out
                .ang_momentum_drift
                .max((r.ang_momentum - first.ang_momentum).norm());
        }
        out
    }
}

/// `sum_k h/2 (uf_k^T W_f uf_k + um_k^T W_m um_k)` over the rows.
pub fn performance_index_from_rows(rows: &[Row], h: f64, w_force: &Mat3, w_moment: &Mat3) -> f64 {
    rows.iter()
        .map(|r| {
            let (f, m) = (&r.control.force, &r.control.moment);
            0.5 * h * (f.dot(&(w_force * f)) + m.dot(&(w_moment * m)))
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseReport {
    pub initial_linear: [f64; 3],
    pub initial_angular: [f64; 3],
    pub terminal_linear: [f64; 3],
    pub terminal_angular: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub divisions: usize,
    pub h: f64,
    /// Terminal-state error against the extrapolated reference.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub order: u8,
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log error` against `log h`; absent when the
    /// flow is reproduced exactly.
    pub fitted_order: Option<f64>,
    /// All runs agree to round-off.
    pub exact: bool,
}

/// Scenario-specific extras.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportDetails {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub impulses: Option<ImpulseReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_endpoint_cost: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stationarity: Option<f64>,
    /// Condition number of the last Newton matrix.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub condition: Option<f64>,
    /// Largest scaled residual of the discrete necessary conditions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extremal_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadratic_constant: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub convergence: Vec<ConvergenceTable>,
}

/// Everything written to `report.json`. Wall time is printed on stderr
/// instead, so reruns produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub scenario: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub seed: u64,
    pub converged: bool,
    pub steps: usize,
    pub h: f64,
    pub order: u8,
    pub performance_index: f64,
    /// Infinity norm of the terminal constraints.
    pub constraint_violation: f64,
    pub outer_iterations: usize,
    pub total_iterations: usize,
    pub invariants: InvariantDiagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub details: ReportDetails,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::invalid("report", e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn v3(v: &Vec3) -> [f64; 3] {
    [v[0], v[1], v[2]]
}
