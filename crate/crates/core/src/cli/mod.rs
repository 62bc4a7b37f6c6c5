//! Command-line scenario runner.
//!
//! Each subcommand reads one TOML scenario, runs it and writes three files
//! into the output directory: `trajectory.csv`, `report.json` and
//! `iteration_log.json`.

pub mod config;
pub mod convergence;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::dynamics::{Order, RigidBodyState};
use crate::error::{Error, Result};
use crate::impulsive::{
    orbit_constraints, solve_impulsive, solve_tpbvp, ImpulsiveProblem, ImpulsiveSolution,
    TerminalSpec,
};
use crate::linearize::boundary_error;
use crate::shooting::{
    default_multiplier_guess, extremal_residuals, solve_shooting, IterationLog, SmoothProblem,
};

pub use config::{Scenario, ScenarioConfig, ScenarioKind};
pub use report::{InvariantDiagnostics, Row, RunReport};

/// Overrides the output directory of every subcommand.
pub const OUT_DIR_ENV: &str = "SE3OC_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NO_CONVERGENCE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "se3oc",
    version,
    about = "Rigid body orbit/attitude simulation and optimal control on SE(3)"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Uncontrolled flow with the chosen integrator.
    Simulate(RunArgs),
    /// Two-impulse transfer to a full target state.
    Tpbvp(RunArgs),
    /// Two-impulse transfer to a relaxed orbit target.
    Impulsive(RunArgs),
    /// Smooth minimum-effort control by shooting.
    Smooth(RunArgs),
    /// Step-size study of the integrators.
    Convergence(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Command {
    pub fn kind(&self) -> ScenarioKind {
        match self {
            Command::Simulate(_) => ScenarioKind::Simulate,
            Command::Tpbvp(_) => ScenarioKind::Tpbvp,
            Command::Impulsive(_) => ScenarioKind::ImpulsiveRelaxed,
            Command::Smooth(_) => ScenarioKind::Smooth,
            Command::Convergence(_) => ScenarioKind::Convergence,
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Simulate(a)
            | Command::Tpbvp(a)
            | Command::Impulsive(a)
            | Command::Smooth(a)
            | Command::Convergence(a) => a,
        }
    }
}

/// A finished run: the report plus what was written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub rows: Vec<Row>,
    pub log: IterationLog,
    pub out_dir: PathBuf,
}

impl RunOutput {
    pub fn exit_code(&self) -> i32 {
        if self.report.converged {
            EXIT_OK
        } else {
            EXIT_NO_CONVERGENCE
        }
    }
}

/// Precedence: `--out`, then the environment variable, then the config.
pub fn output_dir(cli_out: Option<&Path>, env: Option<PathBuf>, config: Option<&Path>) -> PathBuf {
    cli_out
        .map(Path::to_path_buf)
        .or(env.filter(|p| !p.as_os_str().is_empty()))
        .or_else(|| config.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Parses, runs and writes one scenario.
pub fn run(kind: ScenarioKind, args: &RunArgs) -> Result<RunOutput> {
    let cfg = ScenarioConfig::load(&args.config)?;
    let mut scenario = cfg.resolve(kind)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let env = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    let out_dir = output_dir(args.out.as_deref(), env, cfg.output.dir.as_deref());
    run_scenario(&scenario, &out_dir)
}

/// Runs an already validated scenario and writes its artifacts to `out_dir`.
pub fn run_scenario(scenario: &Scenario, out_dir: &Path) -> Result<RunOutput> {
    let started = Instant::now();
    let outcome = match scenario.kind {
        ScenarioKind::Simulate => run_simulate(scenario),
        ScenarioKind::Tpbvp => run_tpbvp(scenario),
        ScenarioKind::ImpulsiveRelaxed => run_relaxed(scenario),
        ScenarioKind::Smooth => run_smooth(scenario),
        ScenarioKind::Convergence => run_convergence(scenario),
    };
    let (report, rows, log) = match outcome {
        Ok(v) => v,
        // A solver that gives up without a trajectory still leaves a report.
        Err(e) if e.is_convergence_failure() => {
            let report = failed_report(scenario, &e);
            (report, Vec::new(), IterationLog::default())
        }
        Err(e) => return Err(e),
    };
    std::fs::create_dir_all(out_dir)?;
    if !rows.is_empty() {
        std::fs::write(out_dir.join("trajectory.csv"), report::to_csv(&rows))?;
    }
    report::write_json(&out_dir.join("report.json"), &report)?;
    report::write_json(&out_dir.join("iteration_log.json"), &log)?;
    eprintln!("wall time: {:.3} s", started.elapsed().as_secs_f64());
    Ok(RunOutput {
        report,
        rows,
        log,
        out_dir: out_dir.to_path_buf(),
    })
}

type Outcome = (RunReport, Vec<Row>, IterationLog);

fn base_report(s: &Scenario, order: Order, rows: &[Row]) -> RunReport {
    RunReport {
        schema: report::SCHEMA,
        scenario: s.kind.name().to_string(),
        description: s.description.clone(),
        seed: s.seed,
        converged: true,
        steps: rows.len().saturating_sub(1),
        h: s.model.h.get(),
        order: order.as_u8(),
        performance_index: 0.0,
        constraint_violation: 0.0,
        outer_iterations: 0,
        total_iterations: 0,
        invariants: InvariantDiagnostics::from_rows(rows),
        error: None,
        details: Default::default(),
    }
}

fn failed_report(s: &Scenario, e: &Error) -> RunReport {
    let order = match s.kind {
        ScenarioKind::Smooth => Order::First,
        ScenarioKind::Simulate => s.order,
        _ => Order::Second,
    };
    let mut r = base_report(s, order, &[]);
    r.converged = false;
    r.steps = s.steps;
    r.constraint_violation = f64::MAX;
    r.error = Some(e.to_string());
    r
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn inf_norm<'a>(v: impl IntoIterator<Item = &'a f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn run_simulate(s: &Scenario) -> Result<Outcome> {
    let traj = s.model.coast(&s.initial, s.steps, s.order)?;
    let rows = report::rows(&s.model, &traj.states, &[])?;
    Ok((
        base_report(s, s.order, &rows),
        rows,
        IterationLog::default(),
    ))
}

/// Post-impulse terminal state rebuilt from the last coast row and the
/// solver's terminal momenta.
fn terminal_after_impulse(rows: &[Row], sol: &ImpulsiveSolution) -> RigidBodyState {
    let last = rows.last().expect("coast has at least one row").state;
    RigidBodyState {
        lin_momentum: sol.arc.terminal.lin_momentum,
        ang_momentum: sol.arc.terminal.ang_momentum,
        ..last
    }
}

/// Report for an impulsive transfer. Impulses and the cost are recomputed
/// from the coast rows; the rows carry no smooth control.
fn impulsive_report(
    s: &Scenario,
    prob: &ImpulsiveProblem,
    sol: &ImpulsiveSolution,
) -> Result<(RunReport, Vec<Row>)> {
    let rows = report::rows(&s.model, &sol.arc.trajectory.states, &[])?;
    let first = rows[0].state;
    let last = rows.last().expect("non-empty").state;
    let end = terminal_after_impulse(&rows, sol);
    let impulses = report::ImpulseReport {
        initial_linear: report::v3(&(first.lin_momentum - prob.initial.lin_momentum)),
        initial_angular: report::v3(&(first.ang_momentum - prob.initial.ang_momentum)),
        terminal_linear: report::v3(&(end.lin_momentum - last.lin_momentum)),
        terminal_angular: report::v3(&(end.ang_momentum - last.ang_momentum)),
    };
    let cost = [
        impulses.initial_linear,
        impulses.initial_angular,
        impulses.terminal_linear,
        impulses.terminal_angular,
    ]
    .iter()
    .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
    .sum();
    let violation = match &prob.terminal {
        TerminalSpec::FullState(d) => inf_norm(boundary_error(&end, d).iter()),
        TerminalSpec::RelaxedOrbit(o) => inf_norm(orbit_constraints(o, &end).iter()),
    };
    let mut r = base_report(s, Order::Second, &rows);
    r.converged = sol.converged;
    r.performance_index = cost;
    r.constraint_violation = violation;
    r.outer_iterations = sol.iterations;
    r.total_iterations = sol.log.entries.len().saturating_sub(1);
    r.details.impulses = Some(impulses);
    r.details.stationarity = sol.stationarity.and_then(finite);
    Ok((r, rows))
}

fn run_tpbvp(s: &Scenario) -> Result<Outcome> {
    let target = s.target.expect("validated");
    let prob = ImpulsiveProblem {
        model: s.model.clone(),
        initial: s.initial,
        steps: s.steps,
        terminal: TerminalSpec::FullState(target),
    };
    let sol = solve_tpbvp(&prob, None, &s.impulsive, s.exec)?;
    let (r, rows) = impulsive_report(s, &prob, &sol)?;
    Ok((r, rows, sol.log))
}

/// The relaxed solve starts from the fixed-endpoint solution when a matched
/// target is given, and reports its cost for comparison.
fn run_relaxed(s: &Scenario) -> Result<Outcome> {
    let orbit = s.orbit.expect("validated");
    let mut fixed = None;
    if let Some(target) = s.target {
        let prob = ImpulsiveProblem {
            model: s.model.clone(),
            initial: s.initial,
            steps: s.steps,
            terminal: TerminalSpec::FullState(target),
        };
        let sol = solve_tpbvp(&prob, None, &s.impulsive, s.exec)?;
        if sol.converged {
            fixed = Some(sol);
        }
    }
    let prob = ImpulsiveProblem {
        model: s.model.clone(),
        initial: s.initial,
        steps: s.steps,
        terminal: TerminalSpec::RelaxedOrbit(orbit),
    };
    let sol = solve_impulsive(
        &prob,
        fixed.as_ref().map(|f| f.decision),
        &s.impulsive,
        s.exec,
    )?;
    let (mut r, rows) = impulsive_report(s, &prob, &sol)?;
    r.details.fixed_endpoint_cost = fixed.map(|f| f.cost);
    Ok((r, rows, sol.log))
}

fn run_smooth(s: &Scenario) -> Result<Outcome> {
    let problem = SmoothProblem {
        model: s.model.clone(),
        initial: s.initial,
        desired: s.target.expect("validated"),
        steps: s.steps,
        w_force: s.w_force,
        w_moment: s.w_moment,
    };
    let mut solver = s.solver;
    solver.seed = s.seed;
    let guess = default_multiplier_guess(solver.seed);
    let sol = solve_shooting(&problem, &guess, &solver, s.exec)?;
    let traj = &sol.trajectory;
    let rows = report::rows(&s.model, &traj.states, &traj.controls)?;
    let last = rows.last().expect("non-empty").state;

    let mut r = base_report(s, Order::First, &rows);
    r.converged = sol.converged;
    r.performance_index =
        report::performance_index_from_rows(&rows, s.model.h.get(), &s.w_force, &s.w_moment);
    r.constraint_violation = inf_norm(boundary_error(&last, &problem.desired).iter());
    r.outer_iterations = sol.outer_iterations;
    r.total_iterations = sol.log.entries.len().saturating_sub(1);
    r.details.condition = finite(sol.condition);
    r.details.quadratic_constant = sol.log.quadratic_constant(1e-3).and_then(finite);
    r.details.extremal_residual = finite(extremal_residuals(&problem, traj)?.max());
    Ok((r, rows, sol.log))
}

fn run_convergence(s: &Scenario) -> Result<Outcome> {
    let plan = s.convergence.as_ref().expect("validated");
    let mut tables = Vec::with_capacity(plan.orders.len());
    let mut finest = None;
    for &order in &plan.orders {
        let (table, traj) = convergence::study_order(
            &s.model.body,
            &s.model.gravity,
            &s.initial,
            plan,
            order,
            s.exec,
        )?;
        match table.fitted_order {
            Some(p) => println!("order {}: fitted {p:.4}", order.as_u8()),
            None => println!("order {}: exact", order.as_u8()),
        }
        tables.push(table);
        finest = Some((order, traj));
    }
    let (order, traj) = finest.expect("at least one order");
    let rows = report::rows(&s.model, &traj.states, &[])?;
    let mut r = base_report(s, order, &rows);
    r.details.convergence = tables;
    Ok((r, rows, IterationLog::default()))
}

/// Maps an outcome to the process exit code, printing a diagnostic.
pub fn exit_code(result: &Result<RunOutput>) -> i32 {
    match result {
        Ok(out) => {
            let r = &out.report;
            println!(
                "{}: converged={} J={:.10e} violation={:.3e} iterations={} -> {}",
                r.scenario,
                r.converged,
                r.performance_index,
                r.constraint_violation,
                r.outer_iterations,
                out.out_dir.display()
            );
            if let Some(e) = &r.error {
                eprintln!("error: {e}");
            }
            out.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_convergence_failure() {
                EXIT_NO_CONVERGENCE
            } else {
                EXIT_CONFIG
            }
        }
    }
}

/// Entry point shared by the binary and the integration tests.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = run(cli.command.kind(), cli.command.args());
    exit_code(&result)
}
