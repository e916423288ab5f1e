//! Metric scale and keyframe velocity recovery from pre-integrated IMU
//! deltas and up-to-scale VO translations.
//!
//! Extrinsics convention: `r_bc` rotates camera axes into body axes
//! (`R_c = R_b r_bc^T`) and `t_bc` is the body origin expressed in the camera
//! frame, so that `p_b = p_c + R_c t_bc`.

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_mul, Pose, Quat, Vec3};
use crate::imu::{default_gravity, Preintegrated};

pub const MIN_PAIRS: usize = 4;
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedRig {
    pub r_bc: Quat,
    pub t_bc: Vec3,
    pub g_w: Vec3,
}

impl Default for CalibratedRig {
    fn default() -> Self {
        CalibratedRig {
            r_bc: Quat::identity(),
            t_bc: Vec3::zeros(),
            g_w: default_gravity(),
        }
    }
}

impl CalibratedRig {
    pub fn validate(&self) -> Result<()> {
        if (self.r_bc.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidRotation {
                norm: self.r_bc.norm(),
            });
        }
        let g = self.g_w.norm();
        if !(9.0..=10.5).contains(&g) {
            return Err(Error::Domain(format!("|g_w| = {g} outside [9.0, 10.5]")));
        }
        Ok(())
    }

    pub fn camera_rotation(&self, q_b: &Quat) -> Quat {
        quat_mul(q_b, &self.r_bc.conj())
    }

    pub fn body_rotation(&self, q_c: &Quat) -> Quat {
        quat_mul(q_c, &self.r_bc)
    }

    /// Body pose from a metric camera pose.
    pub fn body_from_camera(&self, cam: &Pose) -> Pose {
        Pose::new(
            self.body_rotation(&cam.rotation),
            cam.translation + cam.rotation.rotate(&self.t_bc),
        )
    }

    /// Camera pose from a body pose.
    pub fn camera_from_body(&self, body: &Pose) -> Pose {
        let q_c = self.camera_rotation(&body.rotation);
        Pose::new(q_c, body.translation - q_c.rotate(&self.t_bc))
    }
}

/// One keyframe pair `(k, k+1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitPair {
    pub pre: Preintegrated,
    /// Up-to-scale camera translation from `k` to `k+1`, in camera frame `k`.
    pub p_vo: Vec3,
    /// Body orientation at keyframe `k`.
    pub q_b: Quat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitWindow {
    pub pairs: Vec<InitPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSolution {
    pub s: f64,
    pub velocities: Vec<Vec3>,
    pub residual_norm: f64,
}

fn put_block(h: &mut DMatrix<f64>, row: usize, col: usize, m: &Matrix3<f64>) {
    h.view_mut((row, col), (3, 3)).copy_from(m);
}

/// Stacks the per-pair position and velocity constraints into `H x = b`
/// with `x = [v_0, .., v_n, s]`.
pub fn build_linear_system(
    w: &InitWindow,
    rig: &CalibratedRig,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = w.pairs.len();
    if n < MIN_PAIRS {
        return Err(Error::InsufficientData(format!(
            "initialization needs at least {MIN_PAIRS} keyframe pairs, got {n}"
        )));
    }
    let cols = 3 * (n + 1) + 1;
    let mut h = DMatrix::zeros(6 * n, cols);
    let mut b = DVector::zeros(6 * n);
    let eye = Matrix3::identity();
    let g = rig.g_w;
    for (k, pair) in w.pairs.iter().enumerate() {
        let dt = pair.pre.dt;
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("pair {k} has non-positive dt")));
        }
        let r_b = pair.q_b.to_matrix();
        let r_c0 = rig.camera_rotation(&pair.q_b).to_matrix();
        let r_c1 = rig
            .camera_rotation(&quat_mul(&pair.q_b, &pair.pre.dq))
            .to_matrix();
        let row = 6 * k;

        let scaled = r_c0 * pair.p_vo;
        for i in 0..3 {
            h[(row + i, cols - 1)] = scaled[i];
        }
        put_block(&mut h, row, 3 * k, &(-dt * eye));
        let rhs_p = r_b * pair.pre.dp - 0.5 * g * dt * dt - (r_c1 - r_c0) * rig.t_bc;

        put_block(&mut h, row + 3, 3 * k, &(-eye));
        put_block(&mut h, row + 3, 3 * (k + 1), &eye);
        let rhs_v = r_b * pair.pre.dv - g * dt;

        b.rows_mut(row, 3).copy_from(&rhs_p);
        b.rows_mut(row + 3, 3).copy_from(&rhs_v);
    }
    Ok((h, b))
}

/// Least-squares solution through an SVD; refuses to guess when the system
/// is rank-deficient.
pub fn solve_scale(h: &DMatrix<f64>, b: &DVector<f64>) -> Result<ScaleSolution> {
    let (rows, cols) = h.shape();
    if rows < cols {
        return Err(Error::InsufficientData(format!(
            "{rows} equations for {cols} unknowns"
        )));
    }
    if b.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: b.len(),
        });
    }
    if !h.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(Error::NumericalAbort("non-finite init system".into()));
    }
    let svd = h.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = RANK_TOLERANCE * smax;
    let rank = svd.singular_values.iter().filter(|&&v| v > cutoff).count();
    if smax == 0.0 || rank < cols {
        return Err(Error::UnobservableScale { rank, cols });
    }
    let x = svd
        .solve(b, cutoff)
        .map_err(|e| Error::NumericalAbort(e.to_string()))?;
    let s = x[cols - 1];
    if !(s > 0.0) {
        return Err(Error::InitializationFailed(format!("recovered scale {s} is not positive")));
    }
    let residual_norm = (h * &x - b).norm();
    let velocities = (0..(cols - 1) / 3)
        .map(|k| Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]))
        .collect();
    Ok(ScaleSolution {
        s,
        velocities,
        residual_norm,
    })
}

pub fn apply_scale(poses: &[Pose], s: f64) -> Result<Vec<Pose>> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Domain(format!("scale must be positive, got {s}")));
    }
    Ok(poses
        .iter()
        .map(|p| Pose {
            rotation: p.rotation,
            translation: p.translation * s,
        })
        .collect())
}
