//! SO(3) primitives: the hat/vee isomorphism between R^3 and so(3), and the
//! closed-form exponential and logarithm.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on the symmetric part accepted by [`vee`].
pub const SKEW_TOL: f64 = 1e-10;
/// Tolerance on `||R^T R - I||_F` accepted by [`Rotation::new`].
pub const ORTHO_TOL: f64 = 1e-10;

const SMALL_ANGLE: f64 = 1e-4;

/// `hat(v) * w == v.cross(w)`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]. Rejects matrices whose symmetric part exceeds
/// [`SKEW_TOL`] (Frobenius norm).
pub fn vee(m: &Mat3) -> Result<Vec3> {
    let sym = (m + m.transpose()) * 0.5;
    let sym_norm = sym.norm();
    if !(sym_norm <= SKEW_TOL) {
        return Err(Error::NotSkew { sym_norm });
    }
    Ok(vee_unchecked(m))
}

/// Vee of the skew part of `m`, without validation.
pub fn vee_unchecked(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// An element of SO(3) stored as a full rotation matrix.
///
/// Construction through [`Rotation::new`] validates orthonormality and
/// orientation. Group products are never re-orthonormalised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn new(m: Mat3) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::NotRotation {
                ortho_err: f64::NAN,
                det: f64::NAN,
            });
        }
        let ortho_err = (m.transpose() * m - Mat3::identity()).norm();
        let det = m.determinant();
        if ortho_err > ORTHO_TOL || det <= 0.0 {
            return Err(Error::NotRotation { ortho_err, det });
        }
        Ok(Rotation(m))
    }

    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// `||R^T R - I||_F`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Mat3::identity()).norm()
    }

    /// Right perturbation `R exp(hat(zeta))`.
    pub fn retract(&self, zeta: &Vec3) -> Self {
        *self * exp_so3(zeta)
    }

    /// Body-frame difference `log(R^T other)`.
    pub fn local(&self, other: &Rotation) -> Vec3 {
        log_so3(&(self.transpose() * *other))
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<&Vec3> for &Rotation {
    type Output = Vec3;
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl TryFrom<[[f64; 3]; 3]> for Rotation {
    type Error = Error;
    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Rotation::new(Mat3::from_fn(|i, j| rows[i][j]))
    }
}

impl From<Rotation> for [[f64; 3]; 3] {
    fn from(r: Rotation) -> Self {
        r.to_rows()
    }
}

/// Rodrigues formula. Below 1e-4 rad the coefficients use their Taylor series.
pub fn exp_so3(v: &Vec3) -> Rotation {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = hat(v);
    Rotation(Mat3::identity() + k * a + k * k * b)
}

/// Principal logarithm, `|result| <= pi`.
pub fn log_so3(r: &Rotation) -> Vec3 {
    let m = &r.0;
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let w = vee_unchecked(m);
    let sin = w.norm();
    let theta = sin.atan2(cos);

    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        return w * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0);
    }
    if cos > -0.9 {
        return w * (theta / sin);
    }

    // Near pi the skew part vanishes; recover the axis from the symmetric part,
    // (R + R^T)/2 = cos I + (1 - cos) n n^T, and take the sign from the skew part.
    let sym = (m + m.transpose()) * 0.5;
    let nn = (sym - Mat3::identity() * cos) / (1.0 - cos);
    let i = (0..3)
        .max_by(|&a, &b| nn[(a, a)].total_cmp(&nn[(b, b)]))
        .unwrap_or(0);
    let mut axis = nn.column(i).into_owned() / nn[(i, i)].max(f64::MIN_POSITIVE).sqrt();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta.min(PI)
}

/// Inverse of the left Jacobian of SO(3): for small `zeta`,
/// `log(exp(zeta) exp(phi)) = phi + left_jacobian_inv(phi) zeta`.
pub fn left_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Mat3::identity() - k * 0.5 + k * k * c
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(a, b, c)| Vec3::new(a, b, c))
    }

    fn ball(radius: f64) -> impl Strategy<Value = Vec3> {
        (vec3(), 0.0..1.0f64).prop_map(move |(v, s)| {
            let n = v.norm();
            if n < 1e-12 {
                Vec3::zeros()
            } else {
                v / n * (s * radius)
            }
        })
    }

    #[test]
    fn hat_examples() {
        assert_eq!(
            hat(&Vec3::new(1.0, 0.0, 0.0)),
            Mat3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
        );
        assert_eq!(hat(&Vec3::zeros()), Mat3::zeros());
        assert_eq!(
            hat(&Vec3::new(1.0, 2.0, 3.0)),
            Mat3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0)
        );
    }

    #[test]
    fn vee_examples() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(vee(&hat(&v)).unwrap(), v);
        assert_eq!(vee(&Mat3::zeros()).unwrap(), Vec3::zeros());
        let mut m = hat(&v);
        m[(0, 1)] += 1e-3;
        m[(1, 0)] += 1e-3;
        assert!(matches!(vee(&m), Err(Error::NotSkew { .. })));
    }

    #[test]
    fn exp_examples() {
        assert_eq!(*exp_so3(&Vec3::zeros()).matrix(), Mat3::identity());
        let r = exp_so3(&Vec3::new(PI / 2.0, 0.0, 0.0));
        let expected = Mat3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert!((r.matrix() - expected).amax() < 1e-15);
    }

    #[test]
    fn exp_small_angle_matches_first_order_series() {
        // Second-order term is theta^2/2 = 5e-19, below the 1e-17 tolerance.
        let v = Vec3::new(1e-9, 0.0, 0.0);
        let r = exp_so3(&v);
        let first = Mat3::identity() + hat(&v);
        assert!((r.matrix() - first).amax() <= 1e-17);
    }

    #[test]
    fn log_examples() {
        assert_eq!(log_so3(&Rotation::identity()), Vec3::zeros());
        let v = Vec3::new(0.3, -0.2, 0.1);
        assert!((log_so3(&exp_so3(&v)) - v).amax() < 1e-13);
    }

    #[test]
    fn log_at_pi() {
        let r = Rotation::new(Mat3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
        let w = log_so3(&r);
        assert!((w.norm() - PI).abs() < 1e-15);
        assert!(w.x.abs() < 1e-15 && w.y.abs() < 1e-15);
        assert!((exp_so3(&w).matrix() - r.matrix()).amax() < 1e-15);
    }

    #[test]
    fn log_near_pi_keeps_sign() {
        for axis in [Vec3::x(), Vec3::y(), Vec3::new(1.0, -2.0, 0.5).normalize()] {
            for delta in [1e-3, 1e-6, 1e-9] {
                let v = axis * (PI - delta);
                let w = log_so3(&exp_so3(&v));
                assert!((w - v).amax() < 1e-9, "delta {delta}: {w:?} vs {v:?}");
            }
        }
    }

    #[test]
    fn rotation_validation() {
        assert!(Rotation::new(Mat3::identity() * 1.001).is_err());
        assert!(Rotation::new(-Mat3::identity()).is_err());
        assert!(Rotation::new(*exp_so3(&Vec3::new(0.1, 0.2, 0.3)).matrix()).is_ok());
    }

    #[test]
    fn rotation_serde_roundtrip() {
        let r = exp_so3(&Vec3::new(0.4, -1.0, 2.0));
        let s = serde_json::to_string(&r).unwrap();
        let back: Rotation = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
        assert!(serde_json::from_str::<Rotation>("[[1,0,0],[0,1,0],[0,0,2]]").is_err());
    }

    #[test]
    fn left_jacobian_inverse_matches_difference() {
        for phi in [
            Vec3::new(0.3, -1.2, 0.7),
            Vec3::new(1e-6, 2e-6, 0.0),
            Vec3::new(0.0, 0.0, 3.0),
        ] {
            let jinv = left_jacobian_inv(&phi);
            for i in 0..3 {
                let e = Vec3::ith(i, 1e-6);
                let plus = log_so3(&(exp_so3(&e) * exp_so3(&phi)));
                let minus = log_so3(&(exp_so3(&(-e)) * exp_so3(&phi)));
                let fd = (plus - minus) / 2e-6;
                assert!((fd - jinv.column(i)).amax() < 1e-8, "{phi:?} col {i}");
            }
        }
    }

    proptest! {
        #[test]
        fn hat_is_cross(v in vec3(), w in vec3()) {
            let lhs = hat(&v) * w;
            let rhs = v.cross(&w);
            prop_assert!((lhs - rhs).amax() <= 1e-15 * (1.0 + v.norm() * w.norm()));
        }

        #[test]
        fn vee_inverts_hat(v in vec3()) {
            prop_assert_eq!(vee(&hat(&v)).unwrap(), v);
        }

        #[test]
        fn log_inverts_exp(v in ball(PI * (1.0 - 1e-9))) {
            let w = log_so3(&exp_so3(&v));
            prop_assert!((w - v).amax() <= 1e-10, "{:?} vs {:?}", w, v);
        }

        #[test]
        fn exp_inverts_log(v in vec3()) {
            let r = exp_so3(&v);
            let w = log_so3(&r);
            prop_assert!(w.norm() <= PI + 1e-15);
            prop_assert!((exp_so3(&w).matrix() - r.matrix()).amax() <= 1e-12);
        }

        #[test]
        fn exp_is_orthonormal(v in vec3()) {
            let r = exp_so3(&v);
            prop_assert!(r.orthogonality_error() < 1e-14);
            prop_assert!(r.matrix().determinant() > 0.0);
        }

        #[test]
        fn hat_conjugation(v in vec3(), x in vec3()) {
            let r = exp_so3(&v);
            let m = r.matrix();
            let lhs = hat(&(m.transpose() * x));
            let rhs = m.transpose() * hat(&x) * m;
            prop_assert!((lhs - rhs).amax() <= 1e-13 * (1.0 + x.norm()));
        }
    }
}
