//! Scenario files.
//!
//! One TOML file describes one scenario: the body, the gravity field, the
//! step size and count, the initial state and whatever target the scenario
//! needs. Unknown keys are rejected so that typos surface as config errors.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{BodyParams, GravityParams, Model, Order, RigidBodyState, StepSize};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::impulsive::{ImpulsiveOptions, RelaxedOrbit};
use crate::liegroup::{exp_so3, Mat3, Rotation, Vec3};
use crate::shooting::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Simulate,
    Tpbvp,
    ImpulsiveRelaxed,
    Smooth,
    Convergence,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Simulate => "simulate",
            ScenarioKind::Tpbvp => "tpbvp",
            ScenarioKind::ImpulsiveRelaxed => "impulsive_relaxed",
            ScenarioKind::Smooth => "smooth",
            ScenarioKind::Convergence => "convergence",
        }
    }
}

type Matrix = [[f64; 3]; 3];

fn mat(rows: &Matrix) -> Mat3 {
    Mat3::from_fn(|i, j| rows[i][j])
}

fn vec3(v: &[f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BodyConfig {
    /// Two equal spheres on the body x axis.
    Dumbbell {
        mass: f64,
        length: f64,
        sphere_radius: f64,
    },
    /// All mass at the centre; attitude is a free rigid body.
    PointMass {
        mass: f64,
        #[serde(default = "identity")]
        inertia: Matrix,
    },
    Custom {
        mass: f64,
        inertia: Matrix,
        rho: Vec<[f64; 3]>,
    },
}

fn identity() -> Matrix {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

impl BodyConfig {
    pub fn build(&self) -> Result<BodyParams> {
        let body = match self {
            BodyConfig::Dumbbell {
                mass,
                length,
                sphere_radius,
            } => {
                if !(*length > 0.0) {
                    return Err(Error::invalid("body.length", "must be positive"));
                }
                if !(*sphere_radius > 0.0) {
                    return Err(Error::invalid("body.sphere_radius", "must be positive"));
                }
                BodyParams::dumbbell(*mass, *length, *sphere_radius)
            }
            BodyConfig::PointMass { mass, inertia } => BodyParams::point_mass(*mass, mat(inertia)),
            BodyConfig::Custom { mass, inertia, rho } => {
                BodyParams::new(*mass, mat(inertia), rho.iter().map(vec3).collect())
            }
        };
        body.map_err(|e| prefix("body", e))
    }
}

/// Re-roots a field name under `section`.
fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Invalid { field, message } => Error::invalid(format!("{section}.{field}"), message),
        other => Error::invalid(section, other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GravityConfig {
    #[serde(default = "default_mu")]
    pub mu: f64,
}

fn default_mu() -> f64 {
    4.0 * PI * PI
}

impl Default for GravityConfig {
    fn default() -> Self {
        Self { mu: default_mu() }
    }
}

/// A state; the attitude is either a rotation matrix or a rotation vector
/// (identity when neither is given).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConfig {
    pub position: [f64; 3],
    #[serde(default)]
    pub lin_momentum: [f64; 3],
    #[serde(default)]
    pub ang_momentum: [f64; 3],
    pub attitude: Option<Matrix>,
    pub rotation_vector: Option<[f64; 3]>,
}

impl StateConfig {
    pub fn build(&self, section: &str) -> Result<RigidBodyState> {
        let attitude = match (&self.attitude, &self.rotation_vector) {
            (Some(_), Some(_)) => {
                return Err(Error::invalid(
                    format!("{section}.attitude"),
                    "give either attitude or rotation_vector, not both",
                ))
            }
            (Some(m), None) => Rotation::new(mat(m))
                .map_err(|e| Error::invalid(format!("{section}.attitude"), e.to_string()))?,
            (None, Some(v)) => exp_so3(&vec3(v)),
            (None, None) => Rotation::identity(),
        };
        let state = RigidBodyState::new(
            attitude,
            vec3(&self.position),
            vec3(&self.ang_momentum),
            vec3(&self.lin_momentum),
        );
        for (name, v) in [
            ("position", &state.position),
            ("lin_momentum", &state.lin_momentum),
            ("ang_momentum", &state.ang_momentum),
        ] {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::invalid(
                    format!("{section}.{name}"),
                    "must be finite",
                ));
            }
        }
        Ok(state)
    }
}

/// Target on the initial (circular) orbit after `steps * h`, rotated about
/// the line through the initial position by `angle_deg`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclinationConfig {
    pub angle_deg: f64,
}

/// A weight matrix given as a scalar multiple of the identity or in full.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Scalar(f64),
    Matrix(Matrix),
}

impl Weight {
    pub fn matrix(&self) -> Mat3 {
        match self {
            Weight::Scalar(s) => Mat3::identity() * *s,
            Weight::Matrix(m) => mat(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    #[serde(default = "unit_weight")]
    pub force: Weight,
    #[serde(default = "unit_weight")]
    pub moment: Weight,
}

fn unit_weight() -> Weight {
    Weight::Scalar(1.0)
}

impl Default for WeightsConfig {
    fn default() -> Self {
        Self {
            force: unit_weight(),
            moment: unit_weight(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Step sizes are `span / divisions[i]`.
    #[serde(default = "default_divisions")]
    pub divisions: Vec<usize>,
    /// Integration span; defaults to a quarter of the circular-orbit period
    /// at the initial radius. Whole periods hide the first-order error of the
    /// first-order scheme, which is conjugate to a second-order method.
    pub span: Option<f64>,
    #[serde(default = "default_orders")]
    pub orders: Vec<u8>,
}

fn default_divisions() -> Vec<usize> {
    vec![200, 400, 800]
}

fn default_orders() -> Vec<u8> {
    vec![1, 2]
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Must match the subcommand when given.
    pub scenario: Option<ScenarioKind>,
    pub description: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub h: Option<f64>,
    #[serde(default)]
    pub steps: usize,
    /// Integrator used by `simulate`.
    #[serde(default = "default_order")]
    pub order: u8,
    pub body: BodyConfig,
    #[serde(default)]
    pub gravity: GravityConfig,
    pub initial: StateConfig,
    pub target: Option<StateConfig>,
    pub inclination: Option<InclinationConfig>,
    pub orbit: Option<RelaxedOrbit>,
    #[serde(default)]
    pub weights: WeightsConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub impulsive: ImpulsiveOptions,
    pub convergence: Option<ConvergenceConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub exec: Exec,
}

fn default_order() -> u8 {
    2
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().trim().to_string();
            Error::invalid(field_of(&e, text), message)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::invalid("config", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    /// Validates the file for the given subcommand and builds the solver
    /// inputs.
    pub fn resolve(&self, kind: ScenarioKind) -> Result<Scenario> {
        if let Some(declared) = self.scenario {
            if declared != kind {
                return Err(Error::invalid(
                    "scenario",
                    format!(
                        "file declares `{}` but `{}` was requested",
                        declared.name(),
                        kind.name()
                    ),
                ));
            }
        }
        let body = self.body.build()?;
        let gravity = GravityParams::new(self.gravity.mu).map_err(|e| prefix("gravity", e))?;
        let initial = self.initial.build("initial")?;
        let order = Order::try_from(self.order)?;
        self.solver.validate()?;
        self.impulsive.validate()?;
        let w_force = self.weights.force.matrix();
        let w_moment = self.weights.moment.matrix();

        let h = match (kind, self.h) {
            (ScenarioKind::Convergence, _) => None,
            (_, None) => return Err(Error::invalid("h", "step size is required")),
            (_, Some(h)) => Some(StepSize::new(h)?),
        };
        let min_steps = match kind {
            ScenarioKind::Simulate | ScenarioKind::Convergence => 0,
            ScenarioKind::Tpbvp | ScenarioKind::ImpulsiveRelaxed => 1,
            ScenarioKind::Smooth => 2,
        };
        if self.steps < min_steps {
            return Err(Error::invalid(
                "steps",
                format!("{} needs at least {min_steps} steps", kind.name()),
            ));
        }

        let mut target = match &self.target {
            Some(t) => Some(t.build("target")?),
            None => None,
        };
        if let Some(inc) = &self.inclination {
            if target.is_some() {
                return Err(Error::invalid(
                    "inclination",
                    "give either [target] or [inclination], not both",
                ));
            }
            let h = h.ok_or_else(|| Error::invalid("inclination", "needs a step size"))?;
            target = Some(inclined_target(
                &initial,
                inc,
                &gravity,
                body.mass(),
                self.steps as f64 * h.get(),
            )?);
        }
        if let Some(orbit) = &self.orbit {
            orbit.validate().map_err(|e| prefix("orbit", e))?;
        }
        match kind {
            ScenarioKind::Tpbvp | ScenarioKind::Smooth if target.is_none() => {
                return Err(Error::invalid("target", "a target state is required"))
            }
            ScenarioKind::ImpulsiveRelaxed if self.orbit.is_none() => {
                return Err(Error::invalid(
                    "orbit",
                    "a relaxed orbit target is required",
                ))
            }
            _ => {}
        }

        let convergence = if kind == ScenarioKind::Convergence {
            Some(self.convergence_plan(&initial, &gravity)?)
        } else {
            None
        };
        let h = h.unwrap_or_else(|| convergence.as_ref().expect("convergence plan").finest());

        Ok(Scenario {
            kind,
            description: self.description.clone(),
            seed: self.seed,
            model: Model::new(body, gravity, h),
            initial,
            steps: self.steps,
            order,
            target,
            orbit: self.orbit,
            w_force,
            w_moment,
            solver: self.solver,
            impulsive: self.impulsive,
            convergence,
            exec: self.exec,
        })
    }

    fn convergence_plan(
        &self,
        initial: &RigidBodyState,
        gravity: &GravityParams,
    ) -> Result<ConvergencePlan> {
        let cfg = self.convergence.clone().unwrap_or(ConvergenceConfig {
            divisions: default_divisions(),
            span: None,
            orders: default_orders(),
        });
        let span = match cfg.span {
            Some(s) if s > 0.0 && s.is_finite() => s,
            Some(_) => return Err(Error::invalid("convergence.span", "must be positive")),
            None => {
                let r = initial.position.norm();
                if !(gravity.mu > 0.0 && r > 0.0) {
                    return Err(Error::invalid(
                        "convergence.span",
                        "required when there is no orbit to take the period from",
                    ));
                }
                0.5 * PI * (r * r * r / gravity.mu).sqrt()
            }
        };
        if cfg.divisions.len() < 3 {
            return Err(Error::invalid(
                "convergence.divisions",
                "needs at least 3 step sizes",
            ));
        }
        if cfg.divisions.contains(&0) {
            return Err(Error::invalid("convergence.divisions", "must be positive"));
        }
        let ratio = cfg.divisions[1] as f64 / cfg.divisions[0] as f64;
        let geometric = ratio > 1.0
            && cfg
                .divisions
                .windows(2)
                .all(|w| (w[1] as f64 / w[0] as f64 - ratio).abs() <= 1e-12 * ratio);
        if !geometric {
            return Err(Error::invalid(
                "convergence.divisions",
                "must be increasing in geometric progression",
            ));
        }
        if cfg.orders.is_empty() {
            return Err(Error::invalid("convergence.orders", "must not be empty"));
        }
        let orders = cfg
            .orders
            .iter()
            .map(|&o| {
                Order::try_from(o)
                    .map_err(|_| Error::invalid("convergence.orders", "entries must be 1 or 2"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ConvergencePlan {
            span,
            divisions: cfg.divisions,
            orders,
        })
    }
}

/// Best-effort dotted path of the key a TOML error points at.
fn field_of(e: &toml::de::Error, text: &str) -> String {
    let Some(span) = e.span() else {
        return "config".into();
    };
    let mut section = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if offset > span.start {
            break;
        }
        if trimmed.starts_with('[') {
            section = trimmed
                .trim_matches(|c| c == '[' || c == ']')
                .trim()
                .to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        offset += line.len();
    }
    // Unknown-field errors name the key in the message itself.
    let message = e.message();
    if let Some(rest) = message.strip_prefix("unknown field `") {
        if let Some(name) = rest.split('`').next() {
            key = name.to_string();
        }
    }
    match (section.is_empty(), key.is_empty()) {
        (true, true) => "config".into(),
        (true, false) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    }
}

fn inclined_target(
    initial: &RigidBodyState,
    inc: &InclinationConfig,
    gravity: &GravityParams,
    mass: f64,
    span: f64,
) -> Result<RigidBodyState> {
    if !(inc.angle_deg > 0.0 && inc.angle_deg < 180.0) {
        return Err(Error::invalid(
            "inclination.angle_deg",
            "must lie in (0, 180)",
        ));
    }
    let x = initial.position;
    let r = x.norm();
    let normal = x.cross(&initial.lin_momentum);
    if !(r > 0.0 && normal.norm() > 0.0 && gravity.mu > 0.0) {
        return Err(Error::invalid(
            "inclination",
            "needs an initial state on an orbit (nonzero position and transverse momentum)",
        ));
    }
    let rate = (gravity.mu / (r * r * r)).sqrt();
    let advance = exp_so3(&(normal.normalize() * (rate * span)));
    let tilt = exp_so3(&(x / r * inc.angle_deg.to_radians()));
    let speed = mass * (gravity.mu / r).sqrt();
    let along = normal.normalize().cross(&(x / r)) * speed;
    Ok(RigidBodyState::new(
        tilt * initial.attitude,
        tilt * (advance * x),
        initial.ang_momentum,
        tilt * (advance * along),
    ))
}

/// Step sizes for a self-convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergencePlan {
    pub span: f64,
    pub divisions: Vec<usize>,
    pub orders: Vec<Order>,
}

impl ConvergencePlan {
    pub fn step_sizes(&self) -> Vec<f64> {
        self.divisions
            .iter()
            .map(|&d| self.span / d as f64)
            .collect()
    }

    fn finest(&self) -> StepSize {
        let d = *self.divisions.last().expect("validated non-empty");
        StepSize::new(self.span / d as f64).expect("positive span")
    }
}

/// A validated scenario, ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub description: Option<String>,
    pub seed: u64,
    pub model: Model,
    pub initial: RigidBodyState,
    pub steps: usize,
    pub order: Order,
    pub target: Option<RigidBodyState>,
    pub orbit: Option<RelaxedOrbit>,
    pub w_force: Mat3,
    pub w_moment: Mat3,
    pub solver: SolverConfig,
    pub impulsive: ImpulsiveOptions,
    pub convergence: Option<ConvergencePlan>,
    pub exec: Exec,
}
