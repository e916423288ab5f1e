//! Loosely coupled error-state EKF over (p, v, θ) with constant noise, used
//! as the covariance-based fusion baseline.

use nalgebra::{Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use rlvio::geometry::{quat_mul, skew, so3_exp, so3_log, Vec3};
use rlvio::imu::{strapdown_propagate, NavState, NoiseProfile};
use rlvio::pipeline::ReplayStream;
use rlvio::sim::VoConfig;
use rlvio::{Error, Result};

type M9 = SMatrix<f64, 9, 9>;
type M6 = SMatrix<f64, 6, 6>;
type M69 = SMatrix<f64, 6, 9>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkfParams {
    /// VO position noise std (m), per axis.
    pub pos_std: f64,
    /// VO orientation noise std (rad), per axis.
    pub rot_std: f64,
    pub noise: NoiseProfile,
    /// Initial per-axis std of position, velocity and attitude.
    pub init_std: [f64; 3],
}

impl EkfParams {
    /// Total VO error treated as white noise at the mid-confidence
    /// operating point.
    pub fn nominal(vo: &VoConfig, noise: &NoiseProfile) -> Self {
        let mult = 1.0 + vo.low_conf_gain * 0.5;
        EkfParams {
            pos_std: mult * vo.pos_noise.hypot(vo.drift_std),
            rot_std: vo.rot_noise * mult,
            noise: *noise,
            init_std: [1e-3, 1e-3, 1e-4],
        }
    }
}

/// Fuses every available VO pose; returns one state per frame.
pub fn ekf_run(stream: &ReplayStream, params: &EkfParams) -> Result<Vec<NavState>> {
    let g = stream.rig.g_w;
    let n = &params.noise;
    let mut x = stream.x0;
    let mut p = M9::zeros();
    for i in 0..3 {
        for (b, s) in params.init_std.iter().enumerate() {
            p[(3 * b + i, 3 * b + i)] = s * s;
        }
    }
    let mut r = M6::zeros();
    for i in 0..3 {
        r[(i, i)] = params.pos_std.powi(2);
        r[(3 + i, 3 + i)] = params.rot_std.powi(2);
    }
    let mut h = M69::zeros();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    h.fixed_view_mut::<3, 3>(3, 6).copy_from(&Matrix3::identity());

    let mut out = Vec::with_capacity(stream.steps.len());
    out.push(x);
    for step in &stream.steps[1..] {
        let pre = &step.pre;
        let dt = pre.dt;
        let rdp = x.q.rotate(&pre.dp);
        let rdv = x.q.rotate(&pre.dv);
        let mut f = M9::identity();
        f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * dt));
        f.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-skew(&rdp)));
        f.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-skew(&rdv)));
        let qa = n.accel_noise_density.powi(2);
        let qg = n.gyro_noise_density.powi(2);
        let qp = qa * dt.powi(3) / 3.0 + 0.25 * n.accel_bias_stability.powi(2) * dt.powi(4);
        let qv = qa * dt + n.accel_bias_stability.powi(2) * dt * dt;
        let qt = qg * dt + n.gyro_bias_stability.powi(2) * dt * dt;
        let mut q = M9::zeros();
        for i in 0..3 {
            q[(i, i)] = qp;
            q[(3 + i, 3 + i)] = qv;
            q[(6 + i, 6 + i)] = qt;
        }
        x = strapdown_propagate(&x, pre, &g);
        p = f * p * f.transpose() + q;

        if let Some(obs) = &step.vo {
            let pose = stream.vo_body_pose(obs);
            let dth = so3_log(&quat_mul(&pose.rotation, &x.q.conj()))?;
            let dp = pose.translation - x.p;
            let z = SVector::<f64, 6>::new(dp.x, dp.y, dp.z, dth.x, dth.y, dth.z);
            let s = h * p * h.transpose() + r;
            let s_inv = s
                .try_inverse()
                .ok_or_else(|| Error::NumericalAbort("singular innovation covariance".into()))?;
            let k = p * h.transpose() * s_inv;
            let d = k * z;
            x.p += Vec3::new(d[0], d[1], d[2]);
            x.v += Vec3::new(d[3], d[4], d[5]);
            x.q = quat_mul(&so3_exp(&Vec3::new(d[6], d[7], d[8])), &x.q);
            let ikh = M9::identity() - k * h;
            p = ikh * p * ikh.transpose() + k * r * k.transpose();
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalAbort("EKF covariance is not finite".into()));
        }
        out.push(x);
    }
    Ok(out)
}
