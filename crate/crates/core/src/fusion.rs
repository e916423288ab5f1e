//! Fusion of the IMU-propagated state with scaled VO observations: VO
//! velocity estimation, per-axis convex blending, the uncertainty proxy,
//! the step reward, and the replay environment the fusion policy trains in.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_err, slerp, so3_log, Pose, Vec3};
use crate::imu::{NavState, Preintegrated};
use crate::mlp::{adam_step, Activation, AdamState, Mlp};
use crate::pipeline::{ReplayStream, Tracker};
use crate::ppo::{sigmoid, Env, EnvStep, HeadKind, PolicyHead};

pub const TIME_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w_p: Vec3,
    pub w_v: Vec3,
    pub w_q: f64,
}

impl FusionWeights {
    pub fn uniform(w: f64) -> Self {
        let w = w.clamp(0.0, 1.0);
        FusionWeights {
            w_p: Vec3::repeat(w),
            w_v: Vec3::repeat(w),
            w_q: w,
        }
    }

    /// `[w_px, w_py, w_pz, w_vx, w_vy, w_vz, w_q]`, clamped to `[0, 1]`.
    pub fn from_slice(a: &[f64]) -> Result<Self> {
        if a.len() != 7 {
            return Err(Error::DimensionMismatch {
                expected: 7,
                got: a.len(),
            });
        }
        let c = |x: f64| if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
        Ok(FusionWeights {
            w_p: Vec3::new(c(a[0]), c(a[1]), c(a[2])),
            w_v: Vec3::new(c(a[3]), c(a[4]), c(a[5])),
            w_q: c(a[6]),
        })
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.w_p.x, self.w_p.y, self.w_p.z, self.w_v.x, self.w_v.y, self.w_v.z, self.w_q,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionRewardConfig {
    pub lambda: f64,
    pub alpha_mix: f64,
}

impl Default for FusionRewardConfig {
    fn default() -> Self {
        FusionRewardConfig {
            lambda: 0.1,
            alpha_mix: 1.0,
        }
    }
}

impl FusionRewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.alpha_mix >= 0.0) {
            return Err(Error::Domain("lambda and alpha_mix must be >= 0".into()));
        }
        Ok(())
    }
}

/// What the fusion policy sees at a VO frame. VO quantities are relative to
/// the IMU prediction; all zero (and `c_vo = 0`) when no VO is available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionObservation {
    pub pred: NavState,
    pub vo_dp: Vec3,
    pub vo_dv: Vec3,
    pub vo_dq: Vec3,
    pub c_vo: f64,
    pub sigma_imu: Vec3,
    pub dt_since_vo: f64,
}

impl FusionObservation {
    pub const DIM: usize = 24;

    /// Fixed-scale 24-dim encoding.
    pub fn encode(&self) -> Vec<f64> {
        let mut o = Vec::with_capacity(Self::DIM);
        o.extend(self.pred.p.iter().map(|x| 0.1 * x));
        o.extend(self.pred.v.iter().map(|x| 0.5 * x));
        o.extend([self.pred.q.w, self.pred.q.x, self.pred.q.y, self.pred.q.z]);
        o.extend(self.vo_dp.iter().map(|x| 10.0 * x));
        o.extend(self.vo_dv.iter().copied());
        o.extend(self.vo_dq.iter().map(|x| 20.0 * x));
        o.push(self.c_vo);
        o.extend(self.sigma_imu.iter().map(|s| ((s + 1e-9).log10() + 5.0) / 3.0));
        o.push(2.0 * self.dt_since_vo);
        o
    }
}

// ---------------------------------------------------------------------------
// VO velocity

pub const REFINER_INPUTS: usize = 10;
pub const REFINER_OUTPUT_SCALE: f64 = 0.5;

/// Refiner input: baseline velocity, gravity-compensated world-frame IMU
/// velocity change and mean-velocity terms since the previous VO pose, dt.
pub fn refiner_features(
    baseline: &Vec3,
    prev: &Pose,
    pre: &Preintegrated,
    dt: f64,
    g_w: &Vec3,
) -> [f64; REFINER_INPUTS] {
    let dv = prev.rotation.rotate(&pre.dv) - g_w * pre.dt;
    let dpdt = if pre.dt > 0.0 {
        (prev.rotation.rotate(&pre.dp) - 0.5 * g_w * pre.dt * pre.dt) / pre.dt
    } else {
        Vec3::zeros()
    };
    [
        0.5 * baseline.x,
        0.5 * baseline.y,
        0.5 * baseline.z,
        dv.x,
        dv.y,
        dv.z,
        dpdt.x,
        dpdt.y,
        dpdt.z,
        2.0 * dt,
    ]
}

/// Finite-difference velocity between two scaled VO body poses, optionally
/// corrected additively by the refiner. `pre` spans the same interval.
pub fn estimate_vo_velocity(
    prev: &Pose,
    cur: &Pose,
    dt: f64,
    pre: &Preintegrated,
    g_w: &Vec3,
    refiner: Option<&Mlp>,
) -> Result<Vec3> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let baseline = (cur.translation - prev.translation) / dt;
    match refiner {
        None => Ok(baseline),
        Some(net) => {
            let f = refiner_features(&baseline, prev, pre, dt, g_w);
            let o = net.forward(&f)?;
            Ok(baseline + Vec3::new(o[0], o[1], o[2]) * REFINER_OUTPUT_SCALE)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinerSample {
    pub features: [f64; REFINER_INPUTS],
    pub baseline: Vec3,
    pub target: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinerTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for RefinerTrainConfig {
    fn default() -> Self {
        RefinerTrainConfig {
            epochs: 60,
            learning_rate: 1e-3,
            batch_size: 64,
            hidden: 32,
            seed: 11,
        }
    }
}

pub fn refiner_mse(samples: &[RefinerSample], refiner: Option<&Mlp>) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let v = match refiner {
            None => s.baseline,
            Some(net) => {
                let o = net.forward(&s.features)?;
                s.baseline + Vec3::new(o[0], o[1], o[2]) * REFINER_OUTPUT_SCALE
            }
        };
        total += (v - s.target).norm_squared();
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Supervised MSE training of the additive velocity correction.
pub fn train_velocity_refiner(samples: &[RefinerSample], cfg: &RefinerTrainConfig) -> Result<Mlp> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("empty refiner training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::new(
        &[REFINER_INPUTS, cfg.hidden, cfg.hidden, 3],
        Activation::Tanh,
        Activation::Identity,
        &mut rng,
    );
    let mut adam = AdamState::for_mlp(&net);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = net.zero_grad();
            let m = chunk.len() as f64;
            for &i in chunk {
                let s = &samples[i];
                let tape = net.forward_cached(&s.features)?;
                let o = tape.output();
                let v = s.baseline + Vec3::new(o[0], o[1], o[2]) * REFINER_OUTPUT_SCALE;
                let e = (v - s.target) * (2.0 * REFINER_OUTPUT_SCALE / m);
                net.backward_into(&tape, &[e.x, e.y, e.z], &mut grads)?;
            }
            adam_step(net.params_mut(), &grads, &mut adam, cfg.learning_rate);
        }
    }
    if !net.is_finite() {
        return Err(Error::NumericalAbort("velocity refiner diverged".into()));
    }
    Ok(net)
}

// ---------------------------------------------------------------------------
// Blending and reward

/// Per-axis convex blend of position and velocity, slerp of orientation.
pub fn fuse(pred: &NavState, vo: &NavState, w: &FusionWeights) -> Result<NavState> {
    if (pred.t - vo.t).abs() > TIME_TOLERANCE {
        return Err(Error::TimestampMismatch { a: pred.t, b: vo.t });
    }
    let blend = |a: &Vec3, b: &Vec3, w: &Vec3| {
        Vec3::from_fn(|i, _| w[i] * b[i] + (1.0 - w[i]) * a[i])
    };
    let q = if w.w_q == 0.0 {
        pred.q
    } else if w.w_q == 1.0 {
        vo.q
    } else {
        slerp(&pred.q, &vo.q, w.w_q)?
    };
    Ok(NavState {
        t: pred.t,
        p: blend(&pred.p, &vo.p, &w.w_p),
        v: blend(&pred.v, &vo.v, &w.w_v),
        q,
    })
}

/// Diagonal of `α diag(σ²) + diag((1 - c)²)`.
pub fn uncertainty_proxy(sigma_imu: &Vec3, c_vo: f64, cfg: &FusionRewardConfig) -> Vec3 {
    let c = c_vo.clamp(0.0, 1.0);
    sigma_imu.map(|s| cfg.alpha_mix * s * s + (1.0 - c) * (1.0 - c))
}

pub fn fusion_reward(p_fused: &Vec3, p_gt: &Vec3, sigma_diag: &Vec3, lambda: f64) -> f64 {
    -(p_fused - p_gt).norm_squared() - lambda * sigma_diag.sum()
}

// ---------------------------------------------------------------------------
// Supervised warm start of the fusion policy

/// One fusion opportunity recorded from a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmSample {
    pub obs: FusionObservation,
    pub vo: NavState,
    pub gt: NavState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStartConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seconds; converts velocity error into a position-like error.
    pub velocity_horizon: f64,
    /// Metres per radian for the orientation term.
    pub orientation_lever: f64,
    pub seed: u64,
    /// Full-batch steps on the unrolled episode loss after the regression.
    pub unroll_iterations: usize,
    pub unroll_learning_rate: f64,
    /// Iterations between scoring checkpoints of the unrolled stage.
    pub unroll_eval_every: usize,
    /// L2 penalty on the policy parameters during the unrolled stage.
    pub unroll_weight_decay: f64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        WarmStartConfig {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 64,
            velocity_horizon: 0.1,
            orientation_lever: 0.1,
            seed: 13,
            unroll_iterations: 300,
            unroll_learning_rate: 1e-3,
            unroll_eval_every: 10,
            unroll_weight_decay: 0.0,
        }
    }
}

/// One-step fused-state loss and its gradient with respect to the weights.
pub fn one_step_loss(s: &WarmSample, w: &FusionWeights, cfg: &WarmStartConfig) -> Result<(f64, [f64; 7])> {
    let pred = &s.obs.pred;
    let f = fuse(pred, &s.vo, w)?;
    let tau2 = cfg.velocity_horizon * cfg.velocity_horizon;
    let lev2 = cfg.orientation_lever * cfg.orientation_lever;
    let ep = f.p - s.gt.p;
    let ev = f.v - s.gt.v;
    let q_loss = |wq: f64| -> Result<f64> {
        let q = slerp(&pred.q, &s.vo.q, wq.clamp(0.0, 1.0))?;
        Ok(lev2 * quat_err(&q, &s.gt.q).norm_squared())
    };
    let loss = ep.norm_squared() + tau2 * ev.norm_squared() + q_loss(w.w_q)?;
    let mut g = [0.0; 7];
    for i in 0..3 {
        g[i] = 2.0 * ep[i] * (s.vo.p[i] - pred.p[i]);
        g[3 + i] = 2.0 * tau2 * ev[i] * (s.vo.v[i] - pred.v[i]);
    }
    let h = 1e-6;
    let (lo, hi) = ((w.w_q - h).max(0.0), (w.w_q + h).min(1.0));
    g[6] = (q_loss(hi)? - q_loss(lo)?) / (hi - lo);
    Ok((loss, g))
}

/// Regresses the policy mean (through the sigmoid squash) onto weights that
/// minimise the one-step fused-state error.
pub fn warm_start_fusion(head: &mut PolicyHead, data: &[WarmSample], cfg: &WarmStartConfig) -> Result<f64> {
    if !matches!(head.kind, HeadKind::SquashedGaussian { dim: 7 }) {
        return Err(Error::Domain("fusion warm start needs a 7-dim squashed Gaussian head".into()));
    }
    if data.is_empty() {
        return Err(Error::InsufficientData("empty warm-start set".into()));
    }
    let encoded: Vec<Vec<f64>> = data.iter().map(|s| s.obs.encode()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::for_mlp(&head.policy);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let m = chunk.len() as f64;
            let mut grads = head.policy.zero_grad();
            for &i in chunk {
                let tape = head.policy.forward_cached(&encoded[i])?;
                let w: Vec<f64> = tape.output().iter().map(|&u| sigmoid(u)).collect();
                let (loss, g) = one_step_loss(&data[i], &FusionWeights::from_slice(&w)?, cfg)?;
                epoch_loss += loss;
                let up: Vec<f64> = (0..7).map(|k| g[k] * w[k] * (1.0 - w[k]) / m).collect();
                head.policy.backward_into(&tape, &up, &mut grads)?;
            }
            adam_step(head.policy.params_mut(), &grads, &mut adam, cfg.learning_rate);
        }
        last = epoch_loss / data.len() as f64;
        if !last.is_finite() {
            return Err(Error::NumericalAbort("fusion warm start diverged".into()));
        }
    }
    Ok(last)
}

struct UnrollStep {
    enc: Option<Vec<f64>>,
    sample: Option<WarmSample>,
    w: [f64; 7],
    pred: NavState,
    fused: NavState,
    gt: NavState,
    dt: f64,
}

/// Rolls the deterministic policy through one episode, then runs the adjoint
/// of the linear position/velocity recursion backwards. Returns the episode
/// loss and, for every fused step, the encoded observation with dL/dw.
fn unrolled_gradients(
    head: &PolicyHead,
    ep: &ReplayStream,
    refiner: Option<&Mlp>,
    cfg: &WarmStartConfig,
) -> Result<(f64, Vec<(Vec<f64>, [f64; 7])>)> {
    let mut tr = Tracker::start(ep)?;
    let mut rec = Vec::with_capacity(ep.steps.len());
    for step in &ep.steps[1..] {
        tr.predict(&step.pre);
        let pred = tr.x;
        let gt = step.gt.ok_or_else(|| Error::InsufficientData("episode without ground truth".into()))?;
        let mut r = UnrollStep {
            enc: None,
            sample: None,
            w: [0.0; 7],
            pred,
            fused: pred,
            gt,
            dt: step.pre.dt,
        };
        if let Some(c) = tr.observe(step, ep, refiner) {
            let enc = c.obs.encode();
            let out = head.policy.forward(&enc)?;
            let w = FusionWeights::from_slice(&out.iter().map(|&u| sigmoid(u)).collect::<Vec<_>>())?;
            tr.fuse(&c, &w)?;
            r.w = w.to_array();
            r.enc = Some(enc);
            r.sample = Some(WarmSample { obs: c.obs, vo: c.vo, gt });
        }
        r.fused = tr.x;
        if !r.fused.p.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalAbort("unrolled rollout diverged".into()));
        }
        rec.push(r);
    }
    let tau2 = cfg.velocity_horizon * cfg.velocity_horizon;
    let mut loss = 0.0;
    let mut out = Vec::new();
    let mut next_p = Vec3::zeros();
    let mut next_v = Vec3::zeros();
    let mut next_dt = 0.0;
    for r in rec.into_iter().rev() {
        let ep_ = r.fused.p - r.gt.p;
        let ev = r.fused.v - r.gt.v;
        loss += ep_.norm_squared() + tau2 * ev.norm_squared();
        let a = 2.0 * ep_ + next_p;
        let b = 2.0 * tau2 * ev + next_p * next_dt + next_v;
        match (r.enc, r.sample) {
            (Some(enc), Some(s)) => {
                let w = FusionWeights::from_slice(&r.w)?;
                let mut g = [0.0; 7];
                for i in 0..3 {
                    g[i] = a[i] * (s.vo.p[i] - r.pred.p[i]);
                    g[3 + i] = b[i] * (s.vo.v[i] - r.pred.v[i]);
                }
                g[6] = one_step_loss(&s, &w, cfg)?.1[6];
                next_p = a.component_mul(&w.w_p.map(|x| 1.0 - x));
                next_v = b.component_mul(&w.w_v.map(|x| 1.0 - x));
                out.push((enc, g));
            }
            _ => {
                next_p = a;
                next_v = b;
            }
        }
        next_dt = r.dt;
    }
    Ok((loss, out))
}

/// Gradient descent on the summed squared fused error over whole episodes,
/// with observations held fixed within each rollout. `score` (lower is
/// better) is checked every `unroll_eval_every` iterations and the best
/// checkpoint, including the starting point, is kept. Returns its score.
pub fn unrolled_warm_start(
    head: &mut PolicyHead,
    episodes: &[Arc<ReplayStream>],
    refiner: Option<&Mlp>,
    cfg: &WarmStartConfig,
    mut score: impl FnMut(&PolicyHead) -> Result<f64>,
) -> Result<f64> {
    if !matches!(head.kind, HeadKind::SquashedGaussian { dim: 7 }) {
        return Err(Error::Domain("fusion warm start needs a 7-dim squashed Gaussian head".into()));
    }
    let n_steps: usize = episodes.iter().map(|e| e.steps.len().saturating_sub(1)).sum();
    if n_steps == 0 {
        return Err(Error::InsufficientData("empty warm-start set".into()));
    }
    let mut adam = AdamState::for_mlp(&head.policy);
    let mut best = (score(head)?, head.clone());
    for it in 1..=cfg.unroll_iterations {
        let per: Result<Vec<_>> = episodes
            .par_iter()
            .map(|ep| unrolled_gradients(head, ep, refiner, cfg))
            .collect();
        let per = per?;
        let m = n_steps as f64;
        let loss = per.iter().map(|(l, _)| l).sum::<f64>() / m;
        if !loss.is_finite() {
            return Err(Error::NumericalAbort("unrolled warm start diverged".into()));
        }
        // Per-episode gradients are summed in a fixed order for determinism.
        let parts: Result<Vec<Vec<f64>>> = per
            .par_iter()
            .map(|(_, items)| {
                let mut g = head.policy.zero_grad();
                for (enc, dw) in items {
                    let tape = head.policy.forward_cached(enc)?;
                    let up: Vec<f64> = tape
                        .output()
                        .iter()
                        .zip(dw)
                        .map(|(&u, d)| {
                            let w = sigmoid(u);
                            d * w * (1.0 - w) / m
                        })
                        .collect();
                    head.policy.backward_into(&tape, &up, &mut g)?;
                }
                Ok(g)
            })
            .collect();
        let mut grads = head.policy.zero_grad();
        for part in parts? {
            grads.iter_mut().zip(&part).for_each(|(x, y)| *x += y);
        }
        if cfg.unroll_weight_decay > 0.0 {
            for (g, p) in grads.iter_mut().zip(head.policy.params()) {
                *g += cfg.unroll_weight_decay * p;
            }
        }
        adam_step(head.policy.params_mut(), &grads, &mut adam, cfg.unroll_learning_rate);
        if it % cfg.unroll_eval_every.max(1) == 0 || it == cfg.unroll_iterations {
            let s = score(head)?;
            if s < best.0 {
                best = (s, head.clone());
            }
        }
    }
    *head = best.1;
    Ok(best.0)
}

// ---------------------------------------------------------------------------
// Replay environment

/// Frame-by-frame replay of recorded streams. Each step consumes the IMU
/// interval up to the next frame, fuses the VO observation there (if any)
/// with the action's weights, and pays the position/uncertainty reward.
pub struct FusionEnv {
    episodes: Vec<Arc<ReplayStream>>,
    refiner: Option<Arc<Mlp>>,
    reward: FusionRewardConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    current: Option<Arc<ReplayStream>>,
    tracker: Option<Tracker>,
    k: usize,
}

impl FusionEnv {
    pub fn new(
        episodes: Vec<Arc<ReplayStream>>,
        refiner: Option<Arc<Mlp>>,
        reward: FusionRewardConfig,
        seed: u64,
    ) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::InsufficientData("fusion env needs at least one stream".into()));
        }
        for e in &episodes {
            e.require_gt()?;
            if e.steps.len() < 2 {
                return Err(Error::InsufficientData("episode shorter than two frames".into()));
            }
        }
        Ok(FusionEnv {
            episodes,
            refiner,
            reward,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
            current: None,
            tracker: None,
            k: 0,
        })
    }

    fn observation(&self) -> FusionObservation {
        let stream = self.current.as_ref().expect("reset before step");
        let tr = self.tracker.as_ref().expect("reset before step");
        tr.observe(&stream.steps[self.k], stream, self.refiner.as_deref())
            .map(|c| c.obs)
            .unwrap_or_else(|| tr.blind_observation())
    }

    /// Fused trajectory of the current episode so far.
    pub fn trajectory(&self) -> &[NavState] {
        self.tracker.as_ref().map_or(&[], |t| t.trajectory())
    }
}

impl Env for FusionEnv {
    fn obs_dim(&self) -> usize {
        FusionObservation::DIM
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        if self.cursor >= self.order.len() {
            self.order = (0..self.episodes.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let ep = self.episodes[self.order[self.cursor]].clone();
        self.cursor += 1;
        let mut tr = Tracker::start(&ep)?;
        tr.predict(&ep.steps[1].pre);
        self.current = Some(ep);
        self.tracker = Some(tr);
        self.k = 1;
        Ok(self.observation().encode())
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvStep> {
        let stream = self.current.clone().ok_or(Error::StreamExhausted)?;
        let w = FusionWeights::from_slice(action)?;
        let step = &stream.steps[self.k];
        let tr = self.tracker.as_mut().ok_or(Error::StreamExhausted)?;
        let cand = tr.observe(step, &stream, self.refiner.as_deref());
        let c_vo = cand.as_ref().map_or(0.0, |c| c.obs.c_vo);
        let sigma = tr.vo_sigma();
        if let Some(c) = &cand {
            tr.fuse(c, &w)?;
        }
        tr.record();
        let gt = step.gt.ok_or(Error::StreamExhausted)?;
        let reward = fusion_reward(
            &tr.x.p,
            &gt.p,
            &uncertainty_proxy(&sigma, c_vo, &self.reward),
            self.reward.lambda,
        );
        self.k += 1;
        if self.k >= stream.steps.len() {
            return Ok(EnvStep {
                obs: vec![0.0; FusionObservation::DIM],
                reward,
                done: true,
            });
        }
        let tr = self.tracker.as_mut().unwrap();
        tr.predict(&stream.steps[self.k].pre);
        Ok(EnvStep {
            obs: self.observation().encode(),
            reward,
            done: false,
        })
    }
}

/// Relative VO orientation in the observation.
pub(crate) fn relative_rotation(pred: &NavState, vo: &NavState) -> Vec3 {
    so3_log(&pred.q.conj().mul(&vo.q)).unwrap_or_else(|_| Vec3::zeros())
}
