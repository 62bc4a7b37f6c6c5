use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{hat, Mat3, Rotation, Vec3};

/// Sphere distances below this make the potential singular.
const MIN_DISTANCE: f64 = 1e-9;

/// Mass properties and sphere layout of the rigid body.
///
/// The mass is split evenly over the sphere offsets in `rho`; a point mass is
/// two coincident spheres at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BodyParamsRaw", into = "BodyParamsRaw")]
pub struct BodyParams {
    mass: f64,
    inertia: Mat3,
    inertia_inv: Mat3,
    nonstandard_inertia: Mat3,
    rho: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
struct BodyParamsRaw {
    mass: f64,
    inertia: [[f64; 3]; 3],
    rho: Vec<[f64; 3]>,
}

impl TryFrom<BodyParamsRaw> for BodyParams {
    type Error = Error;
    fn try_from(raw: BodyParamsRaw) -> Result<Self> {
        BodyParams::new(
            raw.mass,
            Mat3::from_fn(|i, j| raw.inertia[i][j]),
            raw.rho.iter().map(|r| Vec3::from(*r)).collect(),
        )
    }
}

impl From<BodyParams> for BodyParamsRaw {
    fn from(b: BodyParams) -> Self {
        let j = &b.inertia;
        BodyParamsRaw {
            mass: b.mass,
            inertia: [
                [j[(0, 0)], j[(0, 1)], j[(0, 2)]],
                [j[(1, 0)], j[(1, 1)], j[(1, 2)]],
                [j[(2, 0)], j[(2, 1)], j[(2, 2)]],
            ],
            rho: b.rho.iter().map(|r| [r.x, r.y, r.z]).collect(),
        }
    }
}

impl BodyParams {
    pub fn new(mass: f64, inertia: Mat3, rho: Vec<Vec3>) -> Result<Self> {
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::invalid("mass", "must be positive and finite"));
        }
        if rho.is_empty() {
            return Err(Error::invalid(
                "rho",
                "at least one sphere offset is required",
            ));
        }
        if rho.iter().any(|r| !r.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("rho", "offsets must be finite"));
        }
        let asym = (inertia - inertia.transpose()).amax();
        if asym > 1e-12 * inertia.amax() {
            return Err(Error::invalid("inertia", "must be symmetric"));
        }
        if inertia.cholesky().is_none() {
            return Err(Error::invalid("inertia", "must be positive definite"));
        }
        let inertia_inv = inertia
            .try_inverse()
            .ok_or_else(|| Error::invalid("inertia", "must be invertible"))?;
        let nonstandard_inertia = Mat3::identity() * (0.5 * inertia.trace()) - inertia;
        Ok(Self {
            mass,
            inertia,
            inertia_inv,
            nonstandard_inertia,
            rho,
        })
    }

    /// Two spheres of mass `m/2` and radius `sphere_radius` at `±(length/2) e1`.
    pub fn dumbbell(mass: f64, length: f64, sphere_radius: f64) -> Result<Self> {
        let axial = 0.4 * mass * sphere_radius * sphere_radius;
        let transverse = axial + 0.25 * mass * length * length;
        let half = Vec3::new(0.5 * length, 0.0, 0.0);
        Self::new(
            mass,
            Mat3::from_diagonal(&Vec3::new(axial, transverse, transverse)),
            vec![half, -half],
        )
    }

    /// Reference dumbbell used by the shipped scenarios: unit mass, length
    /// 0.02, sphere radius 0.005.
    pub fn default_dumbbell() -> Self {
        Self::dumbbell(1.0, 0.02, 0.005).expect("default dumbbell is valid")
    }

    /// Point mass carrying the given inertia (attitude decoupled from orbit).
    pub fn point_mass(mass: f64, inertia: Mat3) -> Result<Self> {
        Self::new(mass, inertia, vec![Vec3::zeros(), Vec3::zeros()])
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn inertia(&self) -> &Mat3 {
        &self.inertia
    }

    pub fn inertia_inv(&self) -> &Mat3 {
        &self.inertia_inv
    }

    /// `tr(J)/2 I - J`.
    pub fn nonstandard_inertia(&self) -> &Mat3 {
        &self.nonstandard_inertia
    }

    pub fn rho(&self) -> &[Vec3] {
        &self.rho
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GravityParams {
    /// Gravitational parameter `G M` of the central body.
    pub mu: f64,
}

impl Default for GravityParams {
    /// Unit reference orbit radius with unit period.
    fn default() -> Self {
        Self { mu: 4.0 * PI * PI }
    }
}

/// Derivatives of the gravity force (inertial) and moment (body) with
/// respect to position and a right attitude perturbation `R exp(hat(zeta))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceJacobians {
    pub force_pos: Mat3,
    pub force_att: Mat3,
    pub moment_pos: Mat3,
    pub moment_att: Mat3,
}

impl GravityParams {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::invalid("mu", "must be non-negative and finite"));
        }
        Ok(Self { mu })
    }

    fn sphere_coefficient(&self, body: &BodyParams) -> f64 {
        self.mu * body.mass / body.rho.len() as f64
    }

    fn sphere_positions<'a>(
        &self,
        body: &'a BodyParams,
        attitude: &'a Rotation,
        position: &'a Vec3,
    ) -> impl Iterator<Item = Result<(Vec3, f64, &'a Vec3)>> + 'a {
        let check = self.mu != 0.0;
        body.rho.iter().map(move |rho| {
            let p = position + attitude * rho;
            let d = p.norm();
            if check && !(d >= MIN_DISTANCE) {
                return Err(Error::SingularPotential { distance: d });
            }
            Ok((p, d, rho))
        })
    }

    /// `U = -(mu m / n) sum_q 1/|x + R rho_q|` over the `n` spheres.
    pub fn potential_energy(
        &self,
        body: &BodyParams,
        attitude: &Rotation,
        position: &Vec3,
    ) -> Result<f64> {
        if self.mu == 0.0 {
            return Ok(0.0);
        }
        let c = self.sphere_coefficient(body);
        let mut u = 0.0;
        for s in self.sphere_positions(body, attitude, position) {
            let (_, d, _) = s?;
            u -= c / d;
        }
        Ok(u)
    }

    /// Gravity force `-dU/dx` (inertial) and moment `sum_i r_i x u_i` (body),
    /// where `r_i` and `u_i` are the rows of `R` and `dU/dR`.
    pub fn force_moment(
        &self,
        body: &BodyParams,
        attitude: &Rotation,
        position: &Vec3,
    ) -> Result<(Vec3, Vec3)> {
        if self.mu == 0.0 {
            return Ok((Vec3::zeros(), Vec3::zeros()));
        }
        let c = self.sphere_coefficient(body);
        let mut force = Vec3::zeros();
        let mut du_dr = Mat3::zeros();
        for s in self.sphere_positions(body, attitude, position) {
            let (p, d, rho) = s?;
            let w = c / (d * d * d);
            force -= p * w;
            du_dr += p * rho.transpose() * w;
        }
        let r = attitude.matrix();
        let mut moment = Vec3::zeros();
        for i in 0..3 {
            let ri = r.row(i).transpose();
            let ui = du_dr.row(i).transpose();
            moment += ri.cross(&ui);
        }
        Ok((force, moment))
    }

    /// Force, moment and their first derivatives.
    pub fn force_moment_jacobians(
        &self,
        body: &BodyParams,
        attitude: &Rotation,
        position: &Vec3,
    ) -> Result<(Vec3, Vec3, ForceJacobians)> {
        let mut jac = ForceJacobians {
            force_pos: Mat3::zeros(),
            force_att: Mat3::zeros(),
            moment_pos: Mat3::zeros(),
            moment_att: Mat3::zeros(),
        };
        if self.mu == 0.0 {
            return Ok((Vec3::zeros(), Vec3::zeros(), jac));
        }
        let c = self.sphere_coefficient(body);
        let r = attitude.matrix();
        let rt = r.transpose();
        let mut force = Vec3::zeros();
        let mut moment = Vec3::zeros();
        for s in self.sphere_positions(body, attitude, position) {
            let (p, d, rho) = s?;
            let d3 = d * d * d;
            let fq = -p * (c / d3);
            // d(fq)/dp
            let g = -(Mat3::identity() / d3 - p * p.transpose() * (3.0 / (d3 * d * d))) * c;
            let s_rho = hat(rho);
            let dp_datt = -r * s_rho;
            let body_force = rt * fq;
            force += fq;
            moment += rho.cross(&body_force);
            jac.force_pos += g;
            jac.force_att += g * dp_datt;
            jac.moment_pos += s_rho * rt * g;
            jac.moment_att += s_rho * (hat(&body_force) + rt * g * dp_datt);
        }
        Ok((force, moment, jac))
    }
}
