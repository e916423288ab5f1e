//! Synthetic trajectories with analytic derivatives and sensor synthesis.
//!
//! Positions are zero-phase sums of sines and attitude is a ZYX Euler
//! profile of sines, so at `t = 0` the body sits at the origin, level, with
//! zero acceleration. The world frame is therefore gravity aligned with the
//! initial body frame, and the simulated VO frame is the same frame with
//! translations divided by the true scale.
//!
//! The IMU is modelled as an integrating sensor: sample `i` reports the mean
//! rate and mean specific force over `[t_i, t_i + h]`, which is what the
//! zero-order-hold recursion consumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{quat_mul, so3_exp, so3_log, Pose, Quat, Vec3};
use crate::fusion::{FusionEnv, FusionRewardConfig};
use crate::imu::{default_gravity, BiasEstimate, ImuSample, NavState, NoiseProfile};
use crate::init::CalibratedRig;
use crate::mlp::Mlp;
use crate::pipeline::{FusionPolicy, ReplayStream, VoFrameMap};
use crate::ppo::Env;
use crate::select::{SelectEnv, SelectRewardConfig};

/// `amp * sin(2π freq t)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub amp: f64,
    pub freq: f64,
}

impl Harmonic {
    pub const fn new(amp: f64, freq: f64) -> Self {
        Harmonic { amp, freq }
    }

    /// Value and first two derivatives.
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let w = TAU * self.freq;
        let (s, c) = (w * t).sin_cos();
        (self.amp * s, self.amp * w * c, -self.amp * w * w * s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    /// Three harmonics per world axis.
    pub position: [[Harmonic; 3]; 3],
    pub yaw: Harmonic,
    pub pitch: Harmonic,
    pub roll: Harmonic,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        let h = Harmonic::new;
        TrajectorySpec {
            position: [
                [h(1.2, 0.10), h(0.20, 0.37), h(0.05, 0.83)],
                [h(1.0, 0.13), h(0.15, 0.41), h(0.04, 0.90)],
                [h(0.3, 0.17), h(0.08, 0.50), h(0.03, 1.10)],
            ],
            yaw: h(0.8, 0.07),
            pitch: h(0.15, 0.23),
            roll: h(0.15, 0.31),
        }
    }
}

impl TrajectorySpec {
    pub fn stationary() -> Self {
        let z = Harmonic::new(0.0, 0.0);
        TrajectorySpec {
            position: [[z; 3]; 3],
            yaw: z,
            pitch: z,
            roll: z,
        }
    }

    /// Random EuRoC-like trajectory: per-axis speeds stay below about
    /// 1.5 m/s and body rates below about 1 rad/s.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut position = [[Harmonic::new(0.0, 0.0); 3]; 3];
        for (axis, row) in position.iter_mut().enumerate() {
            let vmax = if axis == 2 { 0.15 } else { 0.45 };
            for (j, hmc) in row.iter_mut().enumerate() {
                let freq = rng.random_range(0.05..0.3) * (1.0 + 1.5 * j as f64);
                let speed = rng.random_range(0.3..1.0) * vmax / (1.0 + j as f64);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                *hmc = Harmonic::new(sign * speed / (TAU * freq), freq);
            }
        }
        let ang = |rng: &mut R, amax: f64, rate: f64| {
            let freq = rng.random_range(0.05..0.35);
            let amp = rng.random_range(0.3..1.0) * amax.min(rate / (TAU * freq));
            Harmonic::new(if rng.random_bool(0.5) { amp } else { -amp }, freq)
        };
        TrajectorySpec {
            position,
            yaw: ang(rng, 1.5, 0.6),
            pitch: ang(rng, 0.3, 0.3),
            roll: ang(rng, 0.3, 0.3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub p: Vec3,
    pub v: Vec3,
    pub a_world: Vec3,
    pub q: Quat,
    pub omega_body: Vec3,
}

/// Parallax-driven confidence emulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceModel {
    pub gain: f64,
    pub offset: f64,
    pub floor: f64,
    /// Half-width of the uniform perturbation.
    pub noise: f64,
    /// Scene depth (m) used to turn a baseline into a parallax angle.
    pub scene_depth: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel {
            gain: 400.0,
            offset: 0.005,
            floor: 0.05,
            noise: 0.05,
            scene_depth: 3.0,
        }
    }
}

impl ConfidenceModel {
    /// Noise-free confidence for a parallax proxy.
    pub fn nominal(&self, parallax: f64) -> f64 {
        let c = 1.0 / (1.0 + (-self.gain * (parallax - self.offset)).exp());
        c.max(self.floor)
    }
}

/// Confidence in `[0, 1]`; `noise_draw` is a uniform draw in `[-1, 1]`.
pub fn vo_confidence_model(parallax: f64, noise_draw: f64, model: &ConfidenceModel) -> f64 {
    (model.nominal(parallax.max(0.0)) + model.noise * noise_draw.clamp(-1.0, 1.0)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoConfig {
    /// VO translations are metric translations divided by this.
    pub scale: f64,
    /// Per-axis white position jitter std (m) at full confidence.
    pub pos_noise: f64,
    /// Stationary per-axis std (m) of the slowly varying position error at
    /// full confidence; its innovations scale with the tracking multiplier.
    pub drift_std: f64,
    /// Correlation time (s) of the position error.
    pub drift_tau: f64,
    /// Per-axis rotation noise std (rad) at full confidence.
    pub rot_noise: f64,
    /// Noise std multiplier is `1 + low_conf_gain * (1 - c)`.
    pub low_conf_gain: f64,
    pub confidence: ConfidenceModel,
    pub dropout: f64,
    pub degraded_prob: f64,
    pub degraded_mult: f64,
}

impl Default for VoConfig {
    fn default() -> Self {
        VoConfig {
            scale: 2.5,
            pos_noise: 0.005,
            drift_std: 0.03,
            drift_tau: 2.0,
            rot_noise: 0.002,
            low_conf_gain: 3.0,
            confidence: ConfidenceModel::default(),
            dropout: 0.0,
            degraded_prob: 0.05,
            degraded_mult: 5.0,
        }
    }
}

impl VoConfig {
    pub fn noiseless(scale: f64) -> Self {
        VoConfig {
            scale,
            pos_noise: 0.0,
            drift_std: 0.0,
            rot_noise: 0.0,
            degraded_prob: 0.0,
            confidence: ConfidenceModel {
                noise: 0.0,
                ..ConfidenceModel::default()
            },
            ..VoConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub duration: f64,
    pub imu_rate: f64,
    pub frame_rate: f64,
    pub trajectory: TrajectorySpec,
    pub noise: NoiseProfile,
    pub gyro_bias: Vec3,
    pub accel_bias: Vec3,
    pub vo: VoConfig,
    pub rig: CalibratedRig,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration: 30.0,
            imu_rate: 200.0,
            frame_rate: 20.0,
            trajectory: TrajectorySpec::default(),
            noise: NoiseProfile::euroc(),
            gyro_bias: Vec3::zeros(),
            accel_bias: Vec3::zeros(),
            vo: VoConfig::default(),
            rig: CalibratedRig {
                r_bc: Quat::identity(),
                t_bc: Vec3::new(0.05, -0.02, 0.01),
                g_w: default_gravity(),
            },
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Noise-free, bias-free configuration with the given VO scale.
    pub fn noiseless(scale: f64) -> Self {
        SimConfig {
            noise: NoiseProfile::zero(),
            vo: VoConfig::noiseless(scale),
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Domain(m.to_string()));
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad("duration must be >= 0");
        }
        if !(self.imu_rate > 0.0 && self.frame_rate > 0.0) {
            return bad("rates must be positive");
        }
        if self.frame_rate > self.imu_rate {
            return bad("frame_rate must not exceed imu_rate");
        }
        let stride = self.imu_rate / self.frame_rate;
        if (stride - stride.round()).abs() > 1e-9 {
            return bad("imu_rate must be an integer multiple of frame_rate");
        }
        self.noise.validate()?;
        let vo = &self.vo;
        if !(vo.scale > 0.0) {
            return bad("vo.scale must be positive");
        }
        if !(vo.pos_noise >= 0.0 && vo.rot_noise >= 0.0 && vo.low_conf_gain >= 0.0 && vo.drift_std >= 0.0) {
            return bad("vo noise parameters must be >= 0");
        }
        for p in [vo.dropout, vo.degraded_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(vo.drift_tau > 0.0) {
            return bad("vo.drift_tau must be positive");
        }
        if !(vo.degraded_mult >= 1.0) {
            return bad("vo.degraded_mult must be >= 1");
        }
        if !(vo.confidence.scene_depth > 0.0) {
            return bad("confidence.scene_depth must be positive");
        }
        self.rig.validate()
    }

    pub fn frame_stride(&self) -> usize {
        (self.imu_rate / self.frame_rate).round() as usize
    }

    pub fn num_samples(&self) -> usize {
        (self.duration * self.imu_rate + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoObservation {
    pub t: f64,
    /// Camera pose in the VO frame (translation up to scale).
    pub pose: Pose,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    /// `None` when the VO backend produced nothing for this frame.
    pub vo: Option<VoObservation>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SensorLog {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<Frame>,
    pub gt: Vec<NavState>,
}

impl SensorLog {
    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.imu.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(Error::NonMonotoneTimestamps { index: i + 1 });
            }
        }
        for (i, w) in self.frames.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(Error::NonMonotoneTimestamps { index: i + 1 });
            }
        }
        for f in &self.frames {
            self.imu_index(f.t)?;
        }
        Ok(())
    }

    /// Index of the IMU sample coinciding with `t` (within 1e-9 s).
    pub fn imu_index(&self, t: f64) -> Result<usize> {
        let i = self.imu.partition_point(|s| s.t < t - 1e-9);
        match self.imu.get(i) {
            Some(s) if (s.t - t).abs() <= 1e-9 => Ok(i),
            _ => Err(Error::TimestampMismatch { a: t, b: self.imu.get(i).map_or(f64::NAN, |s| s.t) }),
        }
    }

    pub fn duration(&self) -> f64 {
        match (self.imu.first(), self.imu.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

fn euler_quat(yaw: f64, pitch: f64, roll: f64) -> Quat {
    let qz = Quat::from_axis_angle(&Vec3::z(), yaw);
    let qy = Quat::from_axis_angle(&Vec3::y(), pitch);
    let qx = Quat::from_axis_angle(&Vec3::x(), roll);
    quat_mul(&quat_mul(&qz, &qy), &qx)
}

fn eval_unchecked(spec: &TrajectorySpec, t: f64) -> TrajectorySample {
    let mut p = Vec3::zeros();
    let mut v = Vec3::zeros();
    let mut a = Vec3::zeros();
    for axis in 0..3 {
        for hmc in &spec.position[axis] {
            let (x, dx, ddx) = hmc.eval(t);
            p[axis] += x;
            v[axis] += dx;
            a[axis] += ddx;
        }
    }
    let (psi, dpsi, _) = spec.yaw.eval(t);
    let (theta, dtheta, _) = spec.pitch.eval(t);
    let (phi, dphi, _) = spec.roll.eval(t);
    let (sphi, cphi) = phi.sin_cos();
    let (stheta, ctheta) = theta.sin_cos();
    let omega_body = Vec3::new(
        dphi - dpsi * stheta,
        dtheta * cphi + dpsi * sphi * ctheta,
        -dtheta * sphi + dpsi * cphi * ctheta,
    );
    TrajectorySample {
        p,
        v,
        a_world: a,
        q: euler_quat(psi, theta, phi),
        omega_body,
    }
}

/// Analytic state of the configured trajectory at `t ∈ [0, duration]`.
pub fn gen_trajectory(cfg: &SimConfig, t: f64) -> Result<TrajectorySample> {
    if !(t >= 0.0 && t <= cfg.duration + 1e-12) {
        return Err(Error::Domain(format!(
            "t = {t} outside [0, {}]",
            cfg.duration
        )));
    }
    Ok(eval_unchecked(&cfg.trajectory, t))
}

fn gauss(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

/// Ideal (noise- and bias-free) increment samples at `t_i = i / rate`.
fn ideal_imu(spec: &TrajectorySpec, n: usize, rate: f64, g_w: &Vec3) -> Vec<ImuSample> {
    let h = 1.0 / rate;
    let mut cur = eval_unchecked(spec, 0.0);
    (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let next = eval_unchecked(spec, (i + 1) as f64 / rate);
            let dq = quat_mul(&cur.q.conj(), &next.q);
            let omega = so3_log(&dq).expect("unit quaternion") / h;
            let accel = cur.q.inverse_rotate(&(next.v - cur.v + g_w * h)) / h;
            cur = next;
            ImuSample { t, omega, accel }
        })
        .collect()
}

/// Generates IMU samples, VO frames and ground truth for `cfg`.
pub fn synthesize_log(cfg: &SimConfig) -> Result<SensorLog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.num_samples();
    let rate = cfg.imu_rate;
    let g_w = cfg.rig.g_w;

    let gt: Vec<NavState> = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let s = eval_unchecked(&cfg.trajectory, t);
            NavState { t, p: s.p, v: s.v, q: s.q }
        })
        .collect();

    let sg = cfg.noise.gyro_noise_density * rate.sqrt();
    let sa = cfg.noise.accel_noise_density * rate.sqrt();
    let imu: Vec<ImuSample> = ideal_imu(&cfg.trajectory, n, rate, &g_w)
        .into_iter()
        .map(|s| ImuSample {
            t: s.t,
            omega: s.omega + cfg.gyro_bias + gauss(&mut rng) * sg,
            accel: s.accel + cfg.accel_bias + gauss(&mut rng) * sa,
        })
        .collect();

    let vo = &cfg.vo;
    let stride = cfg.frame_stride();
    let frame_dt = 1.0 / cfg.frame_rate;
    let camera = |t: f64| {
        let s = eval_unchecked(&cfg.trajectory, t);
        cfg.rig.camera_from_body(&Pose::new(s.q, s.p))
    };
    let mut frames = Vec::new();
    // First-order Gauss-Markov position error sampled at the frame rate.
    let phi = (-frame_dt / vo.drift_tau).exp();
    let mut drift = gauss(&mut rng) * vo.drift_std;
    for i in (0..n).step_by(stride) {
        let st = &gt[i];
        let cam = camera(st.t);
        let baseline = (cam.translation - camera(st.t - frame_dt).translation).norm();
        let parallax = baseline / vo.confidence.scene_depth;
        let nominal = vo.confidence.nominal(parallax);
        let draw: f64 = rng.random_range(-1.0..=1.0);
        let mut conf = vo_confidence_model(parallax, draw, &vo.confidence);
        let track = 1.0 + vo.low_conf_gain * (1.0 - nominal);
        let mut mult = track;
        if rng.random_bool(vo.degraded_prob) {
            mult *= vo.degraded_mult;
            conf /= vo.degraded_mult;
        }
        if i > 0 {
            drift = drift * phi + gauss(&mut rng) * (vo.drift_std * track * (1.0 - phi * phi).sqrt());
        }
        let dp = drift + gauss(&mut rng) * (vo.pos_noise * mult);
        let dr = gauss(&mut rng) * (vo.rot_noise * mult);
        let dropped = rng.random_bool(vo.dropout);
        let obs = VoObservation {
            t: st.t,
            pose: Pose::new(
                quat_mul(&cam.rotation, &so3_exp(&dr)),
                (cam.translation + dp) / vo.scale,
            ),
            confidence: conf,
        };
        frames.push(Frame {
            t: st.t,
            vo: (!dropped).then_some(obs),
        });
    }
    Ok(SensorLog { imu, frames, gt })
}

/// What a replay environment trains.
#[derive(Debug, Clone)]
pub enum ReplayMode {
    Select {
        fusion: Arc<FusionPolicy>,
        reward: SelectRewardConfig,
    },
    Fusion {
        reward: FusionRewardConfig,
    },
}

#[derive(Debug, Clone)]
pub struct ReplaySetup {
    pub bias: BiasEstimate,
    pub noise: NoiseProfile,
    pub rig: CalibratedRig,
    /// Metric scale applied to VO translations.
    pub scale: f64,
    pub refiner: Option<Arc<Mlp>>,
    /// Frames per episode; `None` replays each log as one episode.
    pub episode_len: Option<usize>,
    pub seed: u64,
}

/// Closed-loop replay environment over recorded logs: the fused state, not
/// ground truth, seeds each propagation after the episode start.
pub fn make_replay_env(logs: &[SensorLog], mode: ReplayMode, setup: &ReplaySetup) -> Result<Box<dyn Env>> {
    if logs.is_empty() || logs.iter().any(|l| l.frames.len() < 2) {
        return Err(Error::EmptyWindow);
    }
    let mut episodes = Vec::new();
    for log in logs {
        let stream = ReplayStream::from_log(
            log,
            &setup.bias,
            &setup.noise,
            &setup.rig,
            VoFrameMap::scaled(setup.scale),
        )?;
        match setup.episode_len {
            Some(n) => episodes.extend(stream.split(n)?.into_iter().map(Arc::new)),
            None => episodes.push(Arc::new(stream)),
        }
    }
    Ok(match mode {
        ReplayMode::Select { fusion, reward } => Box::new(SelectEnv::new(
            episodes,
            fusion,
            setup.refiner.clone(),
            reward,
            setup.seed,
        )?),
        ReplayMode::Fusion { reward } => Box::new(FusionEnv::new(
            episodes,
            setup.refiner.clone(),
            reward,
            setup.seed,
        )?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::{preintegrate, strapdown_propagate, BiasEstimate};

    #[test]
    fn stationary_trajectory() {
        let cfg = SimConfig {
            trajectory: TrajectorySpec::stationary(),
            ..SimConfig::default()
        };
        for i in 0..50 {
            let s = gen_trajectory(&cfg, i as f64 * 0.3).unwrap();
            assert_eq!(s.p, Vec3::zeros());
            assert_eq!(s.v, Vec3::zeros());
            assert_eq!(s.a_world, Vec3::zeros());
            assert_eq!(s.omega_body, Vec3::zeros());
            assert_eq!(s.q, Quat::identity());
        }
        assert!(gen_trajectory(&cfg, -0.1).is_err());
        assert!(gen_trajectory(&cfg, cfg.duration + 1.0).is_err());
    }

    #[test]
    fn single_axis_sine() {
        let mut spec = TrajectorySpec::stationary();
        spec.position[0][0] = Harmonic::new(1.0, 1.0 / TAU);
        let cfg = SimConfig {
            trajectory: spec,
            ..SimConfig::default()
        };
        let s = gen_trajectory(&cfg, 0.0).unwrap();
        assert!((s.v - Vec3::x()).norm() < 1e-15);
        assert_eq!(s.a_world, Vec3::zeros());
        for t in [0.3, 1.0, 2.5] {
            let s = gen_trajectory(&cfg, t).unwrap();
            assert!((s.v.x - t.cos()).abs() < 1e-12);
            assert!((s.a_world.x + t.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        for _ in 0..20 {
            let cfg = SimConfig {
                trajectory: TrajectorySpec::random(&mut rng),
                ..SimConfig::default()
            };
            let t = rng.random_range(1.0..20.0);
            let a = gen_trajectory(&cfg, t - h).unwrap();
            let b = gen_trajectory(&cfg, t + h).unwrap();
            let m = gen_trajectory(&cfg, t).unwrap();
            assert!(((b.p - a.p) / (2.0 * h) - m.v).norm() < 1e-6);
            assert!(((b.v - a.v) / (2.0 * h) - m.a_world).norm() < 1e-4);
            // body rate: q(t+h) ≈ q(t) Exp(ω h)
            let w = so3_log(&quat_mul(&a.q.conj(), &b.q)).unwrap() / (2.0 * h);
            assert!((w - m.omega_body).norm() < 1e-6);
        }
    }

    #[test]
    fn random_specs_are_euroc_like() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let cfg = SimConfig {
                trajectory: TrajectorySpec::random(&mut rng),
                ..SimConfig::default()
            };
            for i in 0..300 {
                let s = gen_trajectory(&cfg, i as f64 * 0.1).unwrap();
                assert!(s.v.norm() < 2.0 + 1e-9);
                assert!(s.omega_body.norm() < 2.0);
            }
        }
    }

    #[test]
    fn noiseless_vo_matches_ground_truth() {
        let mut cfg = SimConfig::noiseless(1.0);
        cfg.duration = 5.0;
        let log = synthesize_log(&cfg).unwrap();
        assert_eq!(log.imu.len(), 1000);
        assert_eq!(log.frames.len(), 100);
        for f in &log.frames {
            let vo = f.vo.unwrap();
            let gt = &log.gt[log.imu_index(f.t).unwrap()];
            let cam = cfg.rig.camera_from_body(&Pose::new(gt.q, gt.p));
            assert_eq!(vo.pose.translation, cam.translation);
            assert!(vo.pose.rotation.angle_to(&cam.rotation) < 1e-15);
        }
        let mut half = cfg.clone();
        half.vo.scale = 2.0;
        let log2 = synthesize_log(&half).unwrap();
        for (a, b) in log.frames.iter().zip(&log2.frames) {
            let (a, b) = (a.vo.unwrap(), b.vo.unwrap());
            assert!((a.pose.translation.norm() - 2.0 * b.pose.translation.norm()).abs() < 1e-15);
        }
    }

    #[test]
    fn vo_noise_statistics() {
        let mut cfg = SimConfig::default();
        cfg.duration = 500.0;
        cfg.vo.scale = 1.0;
        cfg.vo.low_conf_gain = 0.0;
        cfg.vo.degraded_prob = 0.0;
        cfg.vo.pos_noise = 0.02;
        cfg.vo.drift_std = 0.0;
        let log = synthesize_log(&cfg).unwrap();
        assert_eq!(log.frames.len(), 10_000);
        let mut sum2 = 0.0;
        let mut n = 0.0;
        for f in &log.frames {
            let vo = f.vo.unwrap();
            let gt = &log.gt[log.imu_index(f.t).unwrap()];
            let cam = cfg.rig.camera_from_body(&Pose::new(gt.q, gt.p));
            sum2 += (vo.pose.translation - cam.translation).norm_squared();
            n += 3.0;
        }
        let std = (sum2 / n).sqrt();
        assert!((std / 0.02 - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn vo_drift_statistics() {
        let mut cfg = SimConfig::default();
        cfg.duration = 1000.0;
        cfg.vo.scale = 1.0;
        cfg.vo.pos_noise = 0.0;
        cfg.vo.degraded_prob = 0.0;
        cfg.vo.drift_std = 0.03;
        cfg.vo.drift_tau = 0.2;
        cfg.vo.low_conf_gain = 0.0;
        let log = synthesize_log(&cfg).unwrap();
        let err: Vec<Vec3> = log
            .frames
            .iter()
            .map(|f| {
                let gt = &log.gt[log.imu_index(f.t).unwrap()];
                let cam = cfg.rig.camera_from_body(&Pose::new(gt.q, gt.p));
                f.vo.unwrap().pose.translation - cam.translation
            })
            .collect();
        let n = 3.0 * err.len() as f64;
        let var = err.iter().map(|e| e.norm_squared()).sum::<f64>() / n;
        assert!((var.sqrt() / 0.03 - 1.0).abs() < 0.05, "std {}", var.sqrt());
        let lag1 = err.windows(2).map(|w| w[0].dot(&w[1])).sum::<f64>() / (n - 3.0) / var;
        let phi = (-0.05f64 / 0.2).exp();
        assert!((lag1 - phi).abs() < 0.03, "lag-1 correlation {lag1} vs {phi}");
    }

    #[test]
    fn confidence_model_range() {
        let m = ConfidenceModel::default();
        assert!(vo_confidence_model(0.0, 1.0, &m) <= 0.3);
        assert!(vo_confidence_model(0.05, -1.0, &m) >= 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let c = vo_confidence_model(
                rng.random_range(0.0..0.1),
                rng.random_range(-1.0..=1.0),
                &m,
            );
            assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn same_seed_same_log() {
        let mut cfg = SimConfig::default();
        cfg.duration = 3.0;
        cfg.vo.dropout = 0.2;
        assert_eq!(synthesize_log(&cfg).unwrap(), synthesize_log(&cfg).unwrap());
        cfg.seed = 1;
        let other = synthesize_log(&cfg).unwrap();
        cfg.seed = 0;
        assert_ne!(synthesize_log(&cfg).unwrap(), other);
    }

    #[test]
    fn noiseless_log_dead_reckons() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let mut cfg = SimConfig::noiseless(1.0);
            cfg.duration = 5.0;
            cfg.trajectory = TrajectorySpec::random(&mut rng);
            let log = synthesize_log(&cfg).unwrap();
            let pre = preintegrate(&log.imu, &BiasEstimate::zero(), &NoiseProfile::zero()).unwrap();
            let y = strapdown_propagate(&log.gt[0], &pre, &cfg.rig.g_w);
            let end = log.gt.last().unwrap();
            assert!((y.p - end.p).norm() < 2e-3);
            assert!(y.q.angle_to(&end.q) < 1e-9);
        }
    }

    #[test]
    fn frames_sit_on_imu_samples() {
        let log = synthesize_log(&SimConfig {
            duration: 2.0,
            ..SimConfig::default()
        })
        .unwrap();
        log.validate().unwrap();
        assert_eq!(log.frames.len(), 40);
    }

    #[test]
    fn zero_duration_is_empty() {
        let log = synthesize_log(&SimConfig {
            duration: 0.0,
            ..SimConfig::default()
        })
        .unwrap();
        assert!(log.imu.is_empty() && log.frames.is_empty() && log.gt.is_empty());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = SimConfig::default();
        cfg.frame_rate = 300.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::default();
        cfg.frame_rate = 30.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::default();
        cfg.vo.scale = 0.0;
        assert!(cfg.validate().is_err());
    }
}
