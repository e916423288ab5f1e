//! Quaternion and SO(3)/SE(3) primitives.
//!
//! Quaternions are Hamilton, scalar-first. A body-to-world rotation `q`
//! maps body vectors as `p_w = R(q) p_b`. Every exported operation returns
//! a unit quaternion with the canonical sign `w >= 0`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Below this rotation angle the exponential and logarithm switch to
/// series expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Tolerance on `|‖q‖ - 1|` accepted by operations that require unit input.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quat {
    pub const fn identity() -> Self {
        Quat {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Normalizes and canonicalizes the given components.
    ///
    /// Panics if all components are zero.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }.normalized()
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        so3_exp(&(axis / n * angle))
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn vec(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        assert!(n > 0.0, "cannot normalize a zero quaternion");
        let s = if self.w < 0.0 { -1.0 / n } else { 1.0 / n };
        Quat {
            w: self.w * s,
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
        }
    }

    pub fn conj(&self) -> Self {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn neg(&self) -> Self {
        Quat {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn dot(&self, other: &Quat) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Raw Hamilton product without renormalization.
    fn product(&self, b: &Quat) -> Quat {
        let a = self;
        Quat {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
    }

    pub fn mul(&self, other: &Quat) -> Quat {
        quat_mul(self, other)
    }

    /// Rotates a vector: `R(q) v`.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        // v' = v + 2w (u x v) + 2 u x (u x v)
        let u = self.vec();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    /// Rotates by the inverse: `R(q)^T v`.
    pub fn inverse_rotate(&self, v: &Vec3) -> Vec3 {
        self.conj().rotate(v)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Converts a rotation matrix (Shepperd's method).
    pub fn from_matrix(m: &Matrix3<f64>) -> Quat {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quat {
                w: 0.25 * s,
                x: (m[(2, 1)] - m[(1, 2)]) / s,
                y: (m[(0, 2)] - m[(2, 0)]) / s,
                z: (m[(1, 0)] - m[(0, 1)]) / s,
            }
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quat {
                w: (m[(2, 1)] - m[(1, 2)]) / s,
                x: 0.25 * s,
                y: (m[(0, 1)] + m[(1, 0)]) / s,
                z: (m[(0, 2)] + m[(2, 0)]) / s,
            }
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quat {
                w: (m[(0, 2)] - m[(2, 0)]) / s,
                x: (m[(0, 1)] + m[(1, 0)]) / s,
                y: 0.25 * s,
                z: (m[(1, 2)] + m[(2, 1)]) / s,
            }
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quat {
                w: (m[(1, 0)] - m[(0, 1)]) / s,
                x: (m[(0, 2)] + m[(2, 0)]) / s,
                y: (m[(1, 2)] + m[(2, 1)]) / s,
                z: 0.25 * s,
            }
        };
        q.normalized()
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let q = self.normalized();
        2.0 * q.vec().norm().atan2(q.w)
    }

    /// Angle of the relative rotation between `self` and `other`.
    pub fn angle_to(&self, other: &Quat) -> f64 {
        other.conj().product(self).angle()
    }

    fn check_unit(&self) -> Result<()> {
        let n = self.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidRotation { norm: n });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Exponential map from so(3).
pub fn so3_exp(phi: &Vec3) -> Quat {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (w, s) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    Quat {
        w,
        x: s * phi.x,
        y: s * phi.y,
        z: s * phi.z,
    }
    .normalized()
}

/// Logarithm map to so(3); the result has `|phi| <= π`.
pub fn so3_log(q: &Quat) -> Result<Vec3> {
    q.check_unit()?;
    Ok(log_unchecked(&q.normalized()))
}

fn log_unchecked(q: &Quat) -> Vec3 {
    let v = q.vec();
    let n = v.norm();
    let scale = if n < SMALL_ANGLE {
        // 2 atan(n/w)/n expanded around n = 0
        2.0 / q.w * (1.0 - n * n / (3.0 * q.w * q.w))
    } else {
        2.0 * n.atan2(q.w) / n
    };
    v * scale
}

pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    a.product(b).normalized()
}

/// Quaternion error `Log(conj(b) ⊗ a)`; zero iff `a ≡ ±b`.
pub fn quat_err(a: &Quat, b: &Quat) -> Vec3 {
    log_unchecked(&b.conj().product(a).normalized())
}

/// Spherical linear interpolation along the shortest arc.
pub fn slerp(q0: &Quat, q1: &Quat, w: f64) -> Result<Quat> {
    if !(0.0..=1.0).contains(&w) || w.is_nan() {
        return Err(Error::Domain(format!("slerp weight {w} outside [0, 1]")));
    }
    if w == 0.0 {
        return Ok(q0.normalized());
    }
    let q1 = if q0.dot(q1) < 0.0 { q1.neg() } else { *q1 };
    if w == 1.0 {
        return Ok(q1.normalized());
    }
    let rel = log_unchecked(&q0.conj().product(&q1).normalized());
    Ok(quat_mul(q0, &so3_exp(&(rel * w))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Pose {
            rotation: rotation.normalized(),
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::default()
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: quat_mul(&self.rotation, &other.rotation),
            translation: self.transform_point(&other.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.conj().normalized();
        Pose {
            rotation: r,
            translation: -r.rotate(&self.translation),
        }
    }
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
        loop {
            let q = Quat {
                w: rng.random_range(-1.0..1.0),
                x: rng.random_range(-1.0..1.0),
                y: rng.random_range(-1.0..1.0),
                z: rng.random_range(-1.0..1.0),
            };
            if q.norm() > 0.1 {
                return q.normalized();
            }
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, max_norm: f64) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v * max_norm;
            }
        }
    }

    /// Matrix exponential of a skew matrix by truncated power series.
    fn expm_series(phi: &Vec3) -> Matrix3<f64> {
        let k = skew(phi);
        let mut term = Matrix3::identity();
        let mut sum = Matrix3::identity();
        for n in 1..60 {
            term = term * k / n as f64;
            sum += term;
        }
        sum
    }

    fn rodrigues(phi: &Vec3) -> Matrix3<f64> {
        let theta = phi.norm();
        let k = skew(phi);
        Matrix3::identity() + k * (theta.sin() / theta)
            + k * k * ((1.0 - theta.cos()) / (theta * theta))
    }

    #[test]
    fn exp_zero_is_identity() {
        assert_eq!(so3_exp(&Vec3::zeros()), Quat::identity());
    }

    #[test]
    fn exp_half_turn_about_x() {
        let q = so3_exp(&Vec3::new(PI, 0.0, 0.0));
        assert!(q.w.abs() < 1e-15);
        assert!((q.x - 1.0).abs() < 1e-15);
        assert_eq!((q.y, q.z), (0.0, 0.0));
    }

    #[test]
    fn exp_matches_series_and_rodrigues() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let phi = random_vec(&mut rng, PI * 0.999);
            let m = so3_exp(&phi).to_matrix();
            assert!((m - expm_series(&phi)).abs().max() < 1e-10);
            assert!((m - rodrigues(&phi)).abs().max() < 1e-10);
        }
        // Small-angle branch.
        let phi = Vec3::new(3e-9, -2e-9, 1e-9);
        let m = so3_exp(&phi).to_matrix();
        assert!((m - expm_series(&phi)).abs().max() < 1e-15);
    }

    #[test]
    fn log_of_identity_and_half_turn() {
        assert_eq!(so3_log(&Quat::identity()).unwrap(), Vec3::zeros());
        let phi = so3_log(&Quat {
            w: 0.0,
            x: 1.0,
            y: 0.0,
            z: 0.0,
        })
        .unwrap();
        assert!((phi - Vec3::new(PI, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn log_rejects_non_unit() {
        let q = Quat {
            w: 1.1,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        };
        assert!(matches!(so3_log(&q), Err(Error::InvalidRotation { .. })));
    }

    #[test]
    fn exp_log_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let q = random_quat(&mut rng);
            let phi = so3_log(&q).unwrap();
            assert!(phi.norm() <= PI + 1e-12);
            worst = worst.max(so3_exp(&phi).angle_to(&q));
        }
        assert!(worst < 1e-9, "worst {worst}");
    }

    #[test]
    fn mul_identity_and_conjugate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_quat(&mut rng);
        assert!(quat_mul(&Quat::identity(), &q).angle_to(&q) < 1e-15);
        let e = quat_mul(&q, &q.conj());
        assert!((e.w - 1.0).abs() < 1e-15 && e.vec().norm() < 1e-15);
    }

    #[test]
    fn mul_matches_matrix_product() {
        let a = Quat::from_axis_angle(&Vec3::x(), 0.7);
        let b = Quat::from_axis_angle(&Vec3::z(), -1.3);
        let m = a.to_matrix() * b.to_matrix();
        assert!((quat_mul(&a, &b).to_matrix() - m).abs().max() < 1e-14);
    }

    #[test]
    fn mul_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (a, b, c) = (
                random_quat(&mut rng),
                random_quat(&mut rng),
                random_quat(&mut rng),
            );
            let l = quat_mul(&quat_mul(&a, &b), &c);
            let r = quat_mul(&a, &quat_mul(&b, &c));
            assert!((l.w - r.w).abs() < 1e-12 && (l.vec() - r.vec()).norm() < 1e-12);
        }
    }

    #[test]
    fn rotate_matches_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_quat(&mut rng);
        let v = Vec3::new(0.3, -1.2, 2.0);
        assert!((q.rotate(&v) - q.to_matrix() * v).norm() < 1e-14);
        assert!((q.inverse_rotate(&q.rotate(&v)) - v).norm() < 1e-14);
    }

    #[test]
    fn matrix_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let q = random_quat(&mut rng);
            assert!(Quat::from_matrix(&q.to_matrix()).angle_to(&q) < 1e-12);
        }
    }

    #[test]
    fn err_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random_quat(&mut rng);
        assert!(quat_err(&q, &q).norm() < 1e-15);
        assert!(quat_err(&q, &q.neg()).norm() < 1e-15);
        for _ in 0..100 {
            let d = random_vec(&mut rng, 1e-3);
            // left perturbation expressed in b's frame: conj(q) exp(d) q
            let a = quat_mul(&q, &so3_exp(&d));
            assert!((quat_err(&a, &q) - d).norm() < 1e-6);
        }
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let q0 = Quat::identity();
        let q1 = Quat::from_axis_angle(&Vec3::z(), PI / 2.0);
        assert_eq!(slerp(&q0, &q1, 0.0).unwrap(), q0);
        assert!(slerp(&q0, &q1, 1.0).unwrap().angle_to(&q1) < 1e-15);
        let mid = slerp(&q0, &q1, 0.5).unwrap();
        assert!(mid.angle_to(&Quat::from_axis_angle(&Vec3::z(), PI / 4.0)) < 1e-15);
        assert!(slerp(&q0, &q1, 1.5).is_err());
        assert!(slerp(&q0, &q1, -0.1).is_err());
    }

    #[test]
    fn slerp_angle_is_linear_in_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let q0 = random_quat(&mut rng);
            let q1 = random_quat(&mut rng);
            let total = q0.angle_to(&q1);
            for i in 0..=20 {
                let w = i as f64 / 20.0;
                let q = slerp(&q0, &q1, w).unwrap();
                assert!((q.norm() - 1.0).abs() < 1e-9);
                assert!((q0.angle_to(&q) - w * total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn slerp_takes_shortest_path() {
        let q0 = Quat::identity();
        let q1 = Quat::from_axis_angle(&Vec3::y(), 0.4);
        let q = slerp(&q0, &q1.neg(), 0.5).unwrap();
        assert!(q.angle_to(&Quat::from_axis_angle(&Vec3::y(), 0.2)) < 1e-14);
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let p = Pose::new(
            Quat::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.9),
            Vec3::new(1.0, -2.0, 0.5),
        );
        let e = p.compose(&p.inverse());
        assert!(e.translation.norm() < 1e-14);
        assert!(e.rotation.angle() < 1e-7);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn quat() -> impl Strategy<Value = Quat> {
            (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
                .prop_filter("nonzero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-2)
                .prop_map(|(w, x, y, z)| Quat::new(w, x, y, z))
        }

        proptest! {
            #[test]
            fn exported_results_are_unit_and_canonical(a in quat(), b in quat(), w in 0.0f64..=1.0) {
                for q in [quat_mul(&a, &b), slerp(&a, &b, w).unwrap(), so3_exp(&quat_err(&a, &b))] {
                    prop_assert!((q.norm() - 1.0).abs() < 1e-9);
                    prop_assert!(q.w >= 0.0);
                }
            }

            #[test]
            fn exp_inverts_log(phi in prop::array::uniform3(-1.8f64..1.8)) {
                let phi = Vec3::from(phi);
                prop_assume!(phi.norm() < PI - 1e-6);
                let back = so3_log(&so3_exp(&phi)).unwrap();
                prop_assert!((back - phi).norm() < 1e-9);
            }
        }
    }
}
