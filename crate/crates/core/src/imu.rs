//! IMU samples, bias correction, discrete pre-integration and strapdown
//! propagation, plus the staged supervised training of the bias networks.
//!
//! Gravity convention: `g_w` is the gravity *reaction* vector, pointing up
//! (`(0, 0, 9.81)` by default). An accelerometer at rest reads
//! `R(q)^T g_w`, and a moving one reads `R(q)^T (a_world + g_w)`, so world
//! acceleration is recovered as `R(q) a_m - g_w`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_err, quat_mul, so3_exp, Quat, Vec3};
use crate::mlp::{adam_step, Activation, AdamState, Mlp};

pub const GRAVITY: f64 = 9.81;

pub fn default_gravity() -> Vec3 {
    Vec3::new(0.0, 0.0, GRAVITY)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    pub omega: Vec3,
    pub accel: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BiasEstimate {
    pub bg: Vec3,
    pub ba: Vec3,
}

impl BiasEstimate {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_sane(&self) -> bool {
        self.bg.iter().chain(self.ba.iter()).all(|v| v.is_finite())
            && self.bg.norm() < 1.0
            && self.ba.norm() < 5.0
    }
}

/// Sensor noise characteristics (continuous-time densities).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s
    pub gyro_bias_stability: f64,
    /// m/s²
    pub accel_bias_stability: f64,
}

impl NoiseProfile {
    /// Densities in the range of the ADIS16448 used on the EuRoC MAV.
    pub fn euroc() -> Self {
        NoiseProfile {
            gyro_noise_density: 1.6968e-4,
            accel_noise_density: 2.0e-3,
            gyro_bias_stability: 1.9393e-5,
            accel_bias_stability: 3.0e-3,
        }
    }

    pub fn zero() -> Self {
        NoiseProfile {
            gyro_noise_density: 0.0,
            accel_noise_density: 0.0,
            gyro_bias_stability: 0.0,
            accel_bias_stability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = [
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_stability,
            self.accel_bias_stability,
        ];
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Domain("noise profile entries must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self::euroc()
    }
}

/// Relative motion over `[t_k, t_k + dt]` expressed in the body frame at `t_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preintegrated {
    pub dq: Quat,
    pub dv: Vec3,
    pub dp: Vec3,
    pub dt: f64,
    pub sigma_imu: Vec3,
}

impl Default for Preintegrated {
    fn default() -> Self {
        Self::identity()
    }
}

impl Preintegrated {
    /// Empty accumulator (`dt = 0`).
    pub fn identity() -> Self {
        Preintegrated {
            dq: Quat::identity(),
            dv: Vec3::zeros(),
            dp: Vec3::zeros(),
            dt: 0.0,
            sigma_imu: Vec3::zeros(),
        }
    }

    /// Chains `self` over `[t0, t1]` with `next` over `[t1, t2]`.
    pub fn compose(&self, next: &Preintegrated, noise: &NoiseProfile) -> Preintegrated {
        let dt = self.dt + next.dt;
        Preintegrated {
            dq: quat_mul(&self.dq, &next.dq),
            dv: self.dv + self.dq.rotate(&next.dv),
            dp: self.dp + self.dv * next.dt + self.dq.rotate(&next.dp),
            dt,
            sigma_imu: position_sigma(dt, noise),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    pub q: Quat,
}

impl NavState {
    pub fn new(t: f64, p: Vec3, v: Vec3, q: Quat) -> Self {
        NavState {
            t,
            p,
            v,
            q: q.normalized(),
        }
    }
}

pub fn correct(s: &ImuSample, b: &BiasEstimate) -> ImuSample {
    ImuSample {
        t: s.t,
        omega: s.omega - b.bg,
        accel: s.accel - b.ba,
    }
}

/// Per-axis position standard deviation after integrating for `dt` seconds:
/// velocity random walk plus an unknown constant accelerometer bias at the
/// bias-stability level.
pub fn position_sigma(dt: f64, noise: &NoiseProfile) -> Vec3 {
    let dt = dt.max(0.0);
    let var = noise.accel_noise_density.powi(2) * dt.powi(3) / 3.0
        + 0.25 * noise.accel_bias_stability.powi(2) * dt.powi(4);
    Vec3::repeat(var.sqrt())
}

fn check_window(samples: &[ImuSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyWindow);
    }
    if samples.len() < 2 {
        return Err(Error::InsufficientData(
            "pre-integration needs at least two samples".into(),
        ));
    }
    for (i, w) in samples.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(Error::NonMonotoneTimestamps { index: i + 1 });
        }
    }
    Ok(())
}

/// Zero-order-hold pre-integration over the sample span `[t_0, t_last]`.
///
/// Sample `i` is held over `[t_i, t_{i+1}]`; the last sample only closes the
/// interval.
pub fn preintegrate(
    samples: &[ImuSample],
    bias: &BiasEstimate,
    noise: &NoiseProfile,
) -> Result<Preintegrated> {
    check_window(samples)?;
    let mut dq = Quat::identity();
    let mut dv = Vec3::zeros();
    let mut dp = Vec3::zeros();
    for w in samples.windows(2) {
        let h = w[1].t - w[0].t;
        let s = correct(&w[0], bias);
        let acc = dq.rotate(&s.accel);
        dp += dv * h + 0.5 * acc * h * h;
        dv += acc * h;
        dq = quat_mul(&dq, &so3_exp(&(s.omega * h)));
    }
    let dt = samples.last().unwrap().t - samples[0].t;
    Ok(Preintegrated {
        dq,
        dv,
        dp,
        dt,
        sigma_imu: position_sigma(dt, noise),
    })
}

/// Applies body-frame deltas to a world-frame navigation state.
pub fn strapdown_propagate(x: &NavState, pre: &Preintegrated, g_w: &Vec3) -> NavState {
    let dt = pre.dt;
    NavState {
        t: x.t + dt,
        p: x.p + x.v * dt - 0.5 * g_w * dt * dt + x.q.rotate(&pre.dp),
        v: x.v - g_w * dt + x.q.rotate(&pre.dv),
        q: quat_mul(&x.q, &pre.dq),
    }
}

/// Orientation with zero yaw whose z-axis is aligned with the measured
/// specific force of a (near-)static accelerometer reading.
pub fn gravity_align(accel: &Vec3) -> Quat {
    let u = accel.normalize();
    let z = Vec3::z();
    let axis = u.cross(&z);
    let s = axis.norm();
    let c = u.dot(&z);
    if s < 1e-12 {
        if c > 0.0 {
            return Quat::identity();
        }
        return Quat::from_axis_angle(&Vec3::x(), std::f64::consts::PI);
    }
    Quat::from_axis_angle(&(axis / s), s.atan2(c))
}

// ---------------------------------------------------------------------------
// Bias networks

/// Samples consumed by one bias estimate (1 s at 200 Hz).
pub const BIAS_WINDOW: usize = 200;
pub const BIAS_FEATURES: usize = 28;
/// Network outputs are multiplied by these to get rad/s and m/s².
pub const GYRO_OUTPUT_SCALE: f64 = 0.1;
pub const ACCEL_OUTPUT_SCALE: f64 = 0.5;

const ACCEL_FEATURE_SCALE: f64 = 0.1;

fn noise_feature(x: f64) -> f64 {
    (x.max(1e-12).log10() + 4.0) / 4.0
}

/// Summary features of a raw (uncorrected) window: per-axis mean, std, min
/// and max of gyro and accelerometer readings, then the four noise-profile
/// scalars.
pub fn bias_features(window: &[ImuSample], noise: &NoiseProfile) -> Result<[f64; BIAS_FEATURES]> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let n = window.len() as f64;
    let mut f = [0.0; BIAS_FEATURES];
    for (block, scale) in [(0usize, 1.0), (1, ACCEL_FEATURE_SCALE)] {
        for axis in 0..3 {
            let val = |s: &ImuSample| {
                scale
                    * if block == 0 {
                        s.omega[axis]
                    } else {
                        s.accel[axis]
                    }
            };
            let mean = window.iter().map(val).sum::<f64>() / n;
            let var = window.iter().map(|s| (val(s) - mean).powi(2)).sum::<f64>() / n;
            let min = window.iter().map(val).fold(f64::INFINITY, f64::min);
            let max = window.iter().map(val).fold(f64::NEG_INFINITY, f64::max);
            let base = block * 12 + axis * 4;
            f[base] = mean;
            f[base + 1] = var.sqrt();
            f[base + 2] = min;
            f[base + 3] = max;
        }
    }
    f[24] = noise_feature(noise.gyro_noise_density);
    f[25] = noise_feature(noise.accel_noise_density);
    f[26] = noise_feature(noise.gyro_bias_stability);
    f[27] = noise_feature(noise.accel_bias_stability);
    Ok(f)
}

fn net_bias(net: &Mlp, window: &[ImuSample], noise: &NoiseProfile, scale: f64) -> Result<Vec3> {
    let f = bias_features(window, noise)?;
    let out = net.forward(&f)?;
    Ok(Vec3::new(out[0], out[1], out[2]) * scale)
}

/// One fixed bias for the window from the most recent [`BIAS_WINDOW`]
/// samples. A missing network contributes zero for its sensor.
pub fn estimate_bias(
    gyro_net: Option<&Mlp>,
    accel_net: Option<&Mlp>,
    window: &[ImuSample],
    noise: &NoiseProfile,
) -> Result<BiasEstimate> {
    if window.len() < BIAS_WINDOW {
        return Err(Error::InsufficientData(format!(
            "bias window has {} samples, need {BIAS_WINDOW}",
            window.len()
        )));
    }
    let recent = &window[window.len() - BIAS_WINDOW..];
    let bg = match gyro_net {
        Some(n) => net_bias(n, recent, noise, GYRO_OUTPUT_SCALE)?,
        None => Vec3::zeros(),
    };
    let ba = match accel_net {
        Some(n) => net_bias(n, recent, noise, ACCEL_OUTPUT_SCALE)?,
        None => Vec3::zeros(),
    };
    Ok(BiasEstimate { bg, ba })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for BiasTrainConfig {
    fn default() -> Self {
        BiasTrainConfig {
            epochs: 150,
            learning_rate: 1e-3,
            batch_size: 16,
            hidden: 64,
            seed: 7,
        }
    }
}

/// Training window for the gyro stage: raw samples `s_0..s_N` with the
/// ground-truth orientations at `t_0` and `t_N`.
#[derive(Debug, Clone)]
pub struct GyroWindow {
    pub samples: Vec<ImuSample>,
    pub q0: Quat,
    pub q_end: Quat,
}

/// Training window for the accelerometer stage.
#[derive(Debug, Clone)]
pub struct AccelWindow {
    pub samples: Vec<ImuSample>,
    pub q0: Quat,
    pub v0: Vec3,
    pub v_end: Vec3,
}

fn integrate_rotation(samples: &[ImuSample], q0: &Quat, bg: &Vec3) -> Quat {
    let mut q = *q0;
    for w in samples.windows(2) {
        let h = w[1].t - w[0].t;
        q = quat_mul(&q, &so3_exp(&((w[0].omega - bg) * h)));
    }
    q
}

fn gyro_window_loss(w: &GyroWindow, bg: &Vec3) -> f64 {
    quat_err(&integrate_rotation(&w.samples, &w.q0, bg), &w.q_end).norm_squared()
}

/// Predicted end velocity and its (constant) Jacobian `∂v/∂b_a = -Σ R_i h_i`.
fn integrate_velocity(
    w: &AccelWindow,
    bg: &Vec3,
    ba: &Vec3,
    g_w: &Vec3,
) -> (Vec3, nalgebra::Matrix3<f64>) {
    let mut q = w.q0;
    let mut v = w.v0;
    let mut jac = nalgebra::Matrix3::zeros();
    for s in w.samples.windows(2) {
        let h = s[1].t - s[0].t;
        v += (q.rotate(&(s[0].accel - ba)) - g_w) * h;
        jac -= q.to_matrix() * h;
        q = quat_mul(&q, &so3_exp(&((s[0].omega - bg) * h)));
    }
    (v, jac)
}

fn features_of(samples: &[ImuSample], noise: &NoiseProfile) -> Result<[f64; BIAS_FEATURES]> {
    let n = samples.len().saturating_sub(1).max(1);
    bias_features(&samples[..n], noise)
}

/// Mean orientation loss of a gyro bias source over windows.
pub fn gyro_loss(windows: &[GyroWindow], net: Option<&Mlp>, noise: &NoiseProfile) -> Result<f64> {
    let mut total = 0.0;
    for w in windows {
        let bg = match net {
            Some(n) => {
                let f = features_of(&w.samples, noise)?;
                let o = n.forward(&f)?;
                Vec3::new(o[0], o[1], o[2]) * GYRO_OUTPUT_SCALE
            }
            None => Vec3::zeros(),
        };
        total += gyro_window_loss(w, &bg);
    }
    Ok(total / windows.len().max(1) as f64)
}

/// Mean end-velocity loss with a frozen gyro network and optional accel network.
pub fn accel_loss(
    windows: &[AccelWindow],
    gyro_net: Option<&Mlp>,
    accel_net: Option<&Mlp>,
    noise: &NoiseProfile,
    g_w: &Vec3,
) -> Result<f64> {
    let mut total = 0.0;
    for w in windows {
        let f = features_of(&w.samples, noise)?;
        let out = |n: Option<&Mlp>, scale: f64| -> Result<Vec3> {
            Ok(match n {
                Some(n) => {
                    let o = n.forward(&f)?;
                    Vec3::new(o[0], o[1], o[2]) * scale
                }
                None => Vec3::zeros(),
            })
        };
        let bg = out(gyro_net, GYRO_OUTPUT_SCALE)?;
        let ba = out(accel_net, ACCEL_OUTPUT_SCALE)?;
        let (v, _) = integrate_velocity(w, &bg, &ba, g_w);
        total += (v - w.v_end).norm_squared();
    }
    Ok(total / windows.len().max(1) as f64)
}

fn new_bias_net(cfg: &BiasTrainConfig, rng: &mut ChaCha8Rng) -> Mlp {
    let mut net = Mlp::new(
        &[BIAS_FEATURES, cfg.hidden, cfg.hidden, 3],
        Activation::Tanh,
        Activation::Identity,
        rng,
    );
    // Start from "no correction".
    let last = net.shapes().len() - 1;
    let s = net.shapes()[last];
    let off = net.num_params() - s.outputs - s.inputs * s.outputs;
    for w in &mut net.params_mut()[off..] {
        *w *= 0.01;
    }
    net
}

/// A trained bias network with its mean training loss per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasFit {
    pub net: Mlp,
    pub epoch_loss: Vec<f64>,
}

/// Mini-batch Adam over windows; `window_grad` returns the loss and its
/// gradient with respect to the (scaled) 3-vector bias output.
fn train_bias_net<W>(
    windows: &[W],
    features: &[[f64; BIAS_FEATURES]],
    cfg: &BiasTrainConfig,
    scale: f64,
    window_grad: impl Fn(&W, &Vec3) -> (f64, Vec3),
) -> Result<BiasFit> {
    if windows.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = new_bias_net(cfg, &mut rng);
    let mut adam = AdamState::for_mlp(&net);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let batch = cfg.batch_size.max(1);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads = net.zero_grad();
            for &i in chunk {
                let tape = net.forward_cached(&features[i])?;
                let o = tape.output();
                let b = Vec3::new(o[0], o[1], o[2]) * scale;
                let (loss, g) = window_grad(&windows[i], &b);
                if !loss.is_finite() {
                    return Err(Error::NumericalAbort("bias training loss is not finite".into()));
                }
                total += loss;
                let up = [
                    g.x * scale / chunk.len() as f64,
                    g.y * scale / chunk.len() as f64,
                    g.z * scale / chunk.len() as f64,
                ];
                net.backward_into(&tape, &up, &mut grads)?;
            }
            adam_step(net.params_mut(), &grads, &mut adam, cfg.learning_rate);
        }
        epoch_loss.push(total / windows.len() as f64);
    }
    if !net.is_finite() {
        return Err(Error::NumericalAbort("bias network diverged".into()));
    }
    Ok(BiasFit { net, epoch_loss })
}

/// Stage 1: fits the gyro bias network to minimise the squared orientation
/// error of the integrated, corrected rates at the window end.
pub fn train_gyro_bias(
    windows: &[GyroWindow],
    noise: &NoiseProfile,
    cfg: &BiasTrainConfig,
) -> Result<BiasFit> {
    let features = windows
        .iter()
        .map(|w| features_of(&w.samples, noise))
        .collect::<Result<Vec<_>>>()?;
    // Loss gradient with respect to the 3-vector bias by central differences.
    let h = 1e-7;
    train_bias_net(windows, &features, cfg, GYRO_OUTPUT_SCALE, |w, bg| {
        let loss = gyro_window_loss(w, bg);
        let mut g = Vec3::zeros();
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            g[k] = (gyro_window_loss(w, &(bg + e)) - gyro_window_loss(w, &(bg - e))) / (2.0 * h);
        }
        (loss, g)
    })
}

/// Stage 2: with the gyro network frozen, fits the accelerometer bias
/// network to the end-velocity error of world-frame integration.
pub fn train_accel_bias(
    windows: &[AccelWindow],
    gyro_net: &Mlp,
    noise: &NoiseProfile,
    g_w: &Vec3,
    cfg: &BiasTrainConfig,
) -> Result<BiasFit> {
    let features = windows
        .iter()
        .map(|w| features_of(&w.samples, noise))
        .collect::<Result<Vec<_>>>()?;
    let gyro_biases = features
        .iter()
        .map(|f| {
            let o = gyro_net.forward(f)?;
            Ok(Vec3::new(o[0], o[1], o[2]) * GYRO_OUTPUT_SCALE)
        })
        .collect::<Result<Vec<_>>>()?;
    let indexed: Vec<(usize, &AccelWindow)> = windows.iter().enumerate().collect();
    train_bias_net(&indexed, &features, cfg, ACCEL_OUTPUT_SCALE, |(i, w), ba| {
        let (v, jac) = integrate_velocity(w, &gyro_biases[*i], ba, g_w);
        let e = v - w.v_end;
        (e.norm_squared(), 2.0 * jac.transpose() * e)
    })
}
