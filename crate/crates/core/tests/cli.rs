use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use se3oc::cli::report::{parse_csv, performance_index_from_rows, InvariantDiagnostics, RunReport};
use se3oc::dynamics::RigidBodyState;
use se3oc::impulsive::{orbit_constraints, RelaxedOrbit};
use se3oc::liegroup::{exp_so3, Mat3, Vec3};
use se3oc::linearize::boundary_error;

const BIN: &str = env!("CARGO_BIN_EXE_se3oc");

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../presets")
        .join(format!("{name}.toml"))
}

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("se3oc-cli-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str], env: Option<&Path>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove(se3oc::cli::OUT_DIR_ENV);
    if let Some(dir) = env {
        cmd.env(se3oc::cli::OUT_DIR_ENV, dir);
    }
    cmd.output().unwrap()
}

fn report(dir: &Path) -> RunReport {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

const SIMULATE: &str = r#"
h = 0.001
steps = 0
[body]
kind = "dumbbell"
mass = 1.0
length = 0.02
sphere_radius = 0.005
[initial]
position = [1.0, 0.0, 0.0]
lin_momentum = [0.0, 6.283185307179586, 0.0]
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("scenario.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn zero_step_simulation_writes_one_row() {
    let dir = tmp("zero");
    let cfg = write_config(&dir, SIMULATE);
    let out = dir.join("out");
    let o = run(
        &[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let rows = parse_csv(&csv).unwrap();
    assert_eq!(rows[0].k, 0);
    assert_eq!(rows[0].state.position, Vec3::new(1.0, 0.0, 0.0));
    let r = report(&out);
    assert_eq!(r.schema, 1);
    assert_eq!(r.steps, 0);
}

#[test]
fn config_errors_exit_one_and_name_the_field() {
    let dir = tmp("bad");
    let cases = [
        (SIMULATE.replace("h = 0.001", "h = -0.001"), "`h`"),
        (SIMULATE.replace("steps = 0", "stpes = 0"), "`stpes`"),
        (
            SIMULATE.replace("length = 0.02", "length = 0.0"),
            "`body.length`",
        ),
        (format!("{SIMULATE}[gravity]\nmu = -1.0\n"), "`gravity.mu`"),
        (format!("scenario = \"tpbvp\"\n{SIMULATE}"), "`scenario`"),
    ];
    for (text, field) in cases {
        let cfg = write_config(&dir, &text);
        let o = run(
            &[
                "simulate",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                dir.join("o").to_str().unwrap(),
            ],
            None,
        );
        let stderr = String::from_utf8_lossy(&o.stderr);
        assert_eq!(o.status.code(), Some(1), "{field}: {stderr}");
        assert!(stderr.contains(field), "expected {field} in: {stderr}");
    }
    let o = run(
        &[
            "simulate",
            "--config",
            dir.join("missing.toml").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["simulate"], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn non_convergence_exits_two_and_still_reports() {
    let dir = tmp("noconv");
    let text = std::fs::read_to_string(preset("smooth_capture"))
        .unwrap()
        .replace("[weights]", "[solver]\nmax_outer = 2\n\n[weights]");
    let cfg = write_config(&dir, &text);
    let out = dir.join("out");
    let o = run(
        &[
            "smooth",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = report(&out);
    assert!(!r.converged);
    assert_eq!(r.outer_iterations, 2);
    assert!(out.join("trajectory.csv").exists());
    assert!(out.join("iteration_log.json").exists());
}

#[test]
fn output_directory_precedence() {
    let dir = tmp("env");
    let env_dir = dir.join("from-env");
    let flag_dir = dir.join("from-flag");
    let cfg_dir = dir.join("from-config");
    let text = format!(
        "{SIMULATE}[output]\ndir = {:?}\n",
        cfg_dir.to_str().unwrap()
    );
    let cfg = write_config(&dir, &text);
    let c = cfg.to_str().unwrap();

    assert_eq!(
        run(&["simulate", "--config", c], None).status.code(),
        Some(0)
    );
    assert!(cfg_dir.join("report.json").exists());

    assert_eq!(
        run(&["simulate", "--config", c], Some(&env_dir))
            .status
            .code(),
        Some(0)
    );
    assert!(env_dir.join("report.json").exists());

    let o = run(
        &[
            "simulate",
            "--config",
            c,
            "--out",
            flag_dir.to_str().unwrap(),
        ],
        Some(&env_dir),
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(flag_dir.join("report.json").exists());
}

#[test]
fn seed_flag_is_recorded() {
    let dir = tmp("seed");
    let cfg = write_config(&dir, SIMULATE);
    let out = dir.join("out");
    let o = run(
        &[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "99",
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(report(&out).seed, 99);
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

fn check_invariants(r: &RunReport, rows: &[se3oc::cli::Row]) {
    let inv = InvariantDiagnostics::from_rows(rows);
    assert!(close(inv.energy_drift, r.invariants.energy_drift));
    assert!(close(
        inv.orthogonality_error,
        r.invariants.orthogonality_error
    ));
    assert!(close(
        inv.ang_momentum_drift,
        r.invariants.ang_momentum_drift
    ));
}

#[test]
fn smooth_report_round_trips_through_csv() {
    let dir = tmp("rt-smooth");
    let o = run(
        &[
            "smooth",
            "--config",
            preset("smooth_inclination").to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = report(&dir);
    let rows = parse_csv(&std::fs::read_to_string(dir.join("trajectory.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), r.steps + 1);
    check_invariants(&r, &rows);
    let j = performance_index_from_rows(&rows, r.h, &Mat3::identity(), &(Mat3::identity() * 1e4));
    assert!(
        close(j, r.performance_index),
        "{j} vs {}",
        r.performance_index
    );

    // The inclined target: unit circle advanced by 2 pi t, tilted 60 degrees
    // about the initial radius.
    let t = r.steps as f64 * r.h;
    let tilt = exp_so3(&Vec3::new(60f64.to_radians(), 0.0, 0.0));
    let ph = 2.0 * std::f64::consts::PI * t;
    let desired = RigidBodyState::new(
        tilt,
        tilt * Vec3::new(ph.cos(), ph.sin(), 0.0),
        Vec3::zeros(),
        tilt * Vec3::new(-ph.sin(), ph.cos(), 0.0) * (2.0 * std::f64::consts::PI),
    );
    let last = rows.last().unwrap().state;
    let violation = boundary_error(&last, &desired).amax();
    assert!((violation - r.constraint_violation).abs() <= 1e-12);
    assert!(r.constraint_violation <= 1e-10);
}

#[test]
fn tpbvp_preset_meets_the_target() {
    let dir = tmp("rt-tpbvp");
    let o = run(
        &[
            "tpbvp",
            "--config",
            preset("tpbvp").to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = report(&dir);
    assert!(r.converged);
    assert!(r.constraint_violation <= 1e-10);
    let rows = parse_csv(&std::fs::read_to_string(dir.join("trajectory.csv")).unwrap()).unwrap();
    check_invariants(&r, &rows);
    let imp = r.details.impulses.as_ref().unwrap();
    let initial_gamma = Vec3::new(0.0, 2.0 * std::f64::consts::PI, 0.0);
    let dv0 = rows[0].state.lin_momentum - initial_gamma;
    for i in 0..3 {
        assert!(close(dv0[i], imp.initial_linear[i]));
    }
    let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let cost = norm(&imp.initial_linear)
        + norm(&imp.initial_angular)
        + norm(&imp.terminal_linear)
        + norm(&imp.terminal_angular);
    assert!(close(cost, r.performance_index));
}

#[test]
fn relaxed_report_round_trips_through_csv() {
    let dir = tmp("rt-relaxed");
    let o = run(
        &[
            "impulsive",
            "--config",
            preset("impulsive_relaxed").to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = report(&dir);
    let rows = parse_csv(&std::fs::read_to_string(dir.join("trajectory.csv")).unwrap()).unwrap();
    check_invariants(&r, &rows);
    let orbit = RelaxedOrbit {
        r_d: 2.0,
        e_n: Vec3::z(),
        body_axis: Vec3::x(),
        spin_rate: 0.0,
    };
    // The orbit and alignment constraints only involve the configuration.
    let c = orbit_constraints(&orbit, &rows.last().unwrap().state);
    assert!((c.amax() - r.constraint_violation).abs() <= 1e-12);
    assert!(r.performance_index <= r.details.fixed_endpoint_cost.unwrap());
}

#[test]
fn convergence_command_prints_fitted_orders() {
    let dir = tmp("conv");
    let o = run(
        &[
            "convergence",
            "--config",
            preset("convergence").to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("order 1: fitted"), "{stdout}");
    assert!(stdout.contains("order 2: fitted"), "{stdout}");
    let r = report(&dir);
    assert_eq!(r.details.convergence.len(), 2);
}

#[test]
fn free_particle_convergence_is_flagged_exact() {
    let dir = tmp("exact");
    let text = std::fs::read_to_string(preset("convergence"))
        .unwrap()
        .replace("[initial]", "[gravity]\nmu = 0.0\n\n[initial]")
        .replace("orders = [1, 2]", "orders = [1, 2]\nspan = 1.0");
    let cfg = write_config(&dir, &text);
    let o = run(
        &[
            "convergence",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.join("o").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = report(&dir.join("o"));
    for t in &r.details.convergence {
        assert!(t.exact);
        assert!(t.fitted_order.is_none());
    }
}
