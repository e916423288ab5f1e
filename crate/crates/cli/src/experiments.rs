//! Corpus generation, staged training and evaluation shared by the commands
//! and the acceptance suite.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rlvio::fusion::{
    refiner_features, refiner_mse, train_velocity_refiner, unrolled_warm_start, warm_start_fusion, FusionEnv,
    FusionObservation, FusionRewardConfig, RefinerSample, RefinerTrainConfig, WarmSample,
    WarmStartConfig,
};
use rlvio::geometry::Vec3;
use rlvio::init::CalibratedRig;
use rlvio::imu::{
    estimate_bias, train_accel_bias, train_gyro_bias, AccelWindow, BiasEstimate,
    BiasTrainConfig, GyroWindow, NoiseProfile, Preintegrated, BIAS_WINDOW,
};
use rlvio::mlp::Mlp;
use rlvio::pipeline::{
    run_closed_loop, stream_ate, FusionPolicy, ReplayStream, SelectPolicy, Tracker, VoFrameMap,
};
use rlvio::ppo::{train, CurvePoint, PolicyHead, PpoConfig};
use rlvio::select::{SelectEnv, SelectRewardConfig, SelectState};
use rlvio::sim::{synthesize_log, SensorLog, SimConfig, TrajectorySpec};
use rlvio::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Synthetic logs generated when no logs are supplied.
    pub logs: usize,
    pub log_duration: f64,
    /// Frames per training episode.
    pub episode_frames: usize,
    pub bias: BiasTrainConfig,
    /// Bias windows drawn per log.
    pub bias_windows: usize,
    pub refiner: RefinerTrainConfig,
    pub use_refiner: bool,
    pub warm: WarmStartConfig,
    pub warm_rounds: usize,
    /// Skip ratios cycled over the fusion training and validation streams,
    /// so the fusion policy sees the VO gaps a scheduler produces.
    pub schedule_mix: Vec<f64>,
    /// Held-out logs used to pick between the warm-started and PPO policies.
    pub validation_logs: usize,
    /// Synthetic held-out sequences for the ablations.
    pub test_logs: usize,
    /// Train the scheduler against the fixed 0.9 blend instead of the
    /// learned fusion policy.
    pub heuristic_fusion: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            logs: 96,
            log_duration: 30.0,
            episode_frames: 200,
            bias: BiasTrainConfig::default(),
            bias_windows: 24,
            refiner: RefinerTrainConfig::default(),
            use_refiner: true,
            warm: WarmStartConfig::default(),
            warm_rounds: 1,
            schedule_mix: vec![0.0, 0.5, 0.75, 0.875],
            validation_logs: 8,
            test_logs: 5,
            heuristic_fusion: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Corpus

/// Per-log configurations: random trajectories sharing the IMU unit, rig
/// and VO model of `base`.
pub fn corpus_configs(base: &SimConfig, n: usize, duration: f64, seed: u64) -> Vec<SimConfig> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64));
            SimConfig {
                duration,
                trajectory: TrajectorySpec::random(&mut rng),
                seed: rng.random(),
                ..base.clone()
            }
        })
        .collect()
}

pub fn synthesize_corpus(cfgs: &[SimConfig]) -> Result<Vec<SensorLog>> {
    cfgs.par_iter().map(synthesize_log).collect()
}

// ---------------------------------------------------------------------------
// Bias

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BiasNets {
    pub gyro: Option<Mlp>,
    pub accel: Option<Mlp>,
}

impl BiasNets {
    /// Bias estimate from the first window of a log.
    pub fn estimate(&self, log: &SensorLog, noise: &NoiseProfile) -> Result<BiasEstimate> {
        if self.gyro.is_none() && self.accel.is_none() {
            return Ok(BiasEstimate::zero());
        }
        if log.imu.len() < BIAS_WINDOW {
            return Err(Error::InsufficientData("log shorter than the bias window".into()));
        }
        estimate_bias(self.gyro.as_ref(), self.accel.as_ref(), &log.imu[..BIAS_WINDOW], noise)
    }

    pub fn gyro_only(&self) -> BiasNets {
        BiasNets {
            gyro: self.gyro.clone(),
            accel: None,
        }
    }
}

pub fn bias_windows(logs: &[SensorLog], per_log: usize, seed: u64) -> (Vec<GyroWindow>, Vec<AccelWindow>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gw = Vec::new();
    let mut aw = Vec::new();
    for log in logs {
        if log.imu.len() <= BIAS_WINDOW || log.gt.len() != log.imu.len() {
            continue;
        }
        let last = log.imu.len() - BIAS_WINDOW - 1;
        for _ in 0..per_log {
            let i = rng.random_range(0..=last);
            let j = i + BIAS_WINDOW;
            let samples = log.imu[i..=j].to_vec();
            gw.push(GyroWindow {
                samples: samples.clone(),
                q0: log.gt[i].q,
                q_end: log.gt[j].q,
            });
            aw.push(AccelWindow {
                samples,
                q0: log.gt[i].q,
                v0: log.gt[i].v,
                v_end: log.gt[j].v,
            });
        }
    }
    (gw, aw)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasTraining {
    pub nets: BiasNets,
    pub gyro_loss: Vec<f64>,
    pub accel_loss: Vec<f64>,
}

/// Stage 1 (gyro) then stage 2 (accel, gyro frozen).
pub fn train_bias_nets(
    logs: &[SensorLog],
    noise: &NoiseProfile,
    g_w: &Vec3,
    cfg: &TrainConfig,
) -> Result<BiasTraining> {
    let (gw, aw) = bias_windows(logs, cfg.bias_windows, cfg.bias.seed);
    if gw.is_empty() {
        return Err(Error::InsufficientData("no bias windows with ground truth".into()));
    }
    let gyro = train_gyro_bias(&gw, noise, &cfg.bias)?;
    let accel = train_accel_bias(&aw, &gyro.net, noise, g_w, &cfg.bias)?;
    Ok(BiasTraining {
        nets: BiasNets {
            gyro: Some(gyro.net),
            accel: Some(accel.net),
        },
        gyro_loss: gyro.epoch_loss,
        accel_loss: accel.epoch_loss,
    })
}

// ---------------------------------------------------------------------------
// Streams

/// Sensor model shared by a set of logs: IMU noise, rig, and the metric
/// scale of the VO translations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSetup {
    pub noise: NoiseProfile,
    pub rig: CalibratedRig,
    pub scale: f64,
}

impl SensorSetup {
    pub fn of(sim: &SimConfig) -> Self {
        SensorSetup {
            noise: sim.noise,
            rig: sim.rig,
            scale: sim.vo.scale,
        }
    }
}

/// Replay streams with bias-corrected pre-integration and VO scaled by the
/// known metric scale.
pub fn streams_for(logs: &[SensorLog], setup: &SensorSetup, bias: &BiasNets) -> Result<Vec<ReplayStream>> {
    logs.par_iter()
        .map(|log| {
            let b = bias.estimate(log, &setup.noise)?;
            ReplayStream::from_log(log, &b, &setup.noise, &setup.rig, VoFrameMap::scaled(setup.scale))
        })
        .collect()
}

pub fn episodes(streams: &[ReplayStream], frames: usize) -> Result<Vec<Arc<ReplayStream>>> {
    let mut out = Vec::new();
    for s in streams {
        out.extend(s.split(frames)?.into_iter().map(Arc::new));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// VO velocity refiner

/// Supervised pairs over VO gaps of one to four frames.
pub fn refiner_samples(streams: &[ReplayStream], seed: u64) -> Vec<RefinerSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in streams {
        let mut k = 0;
        while k < s.steps.len() {
            let gap = rng.random_range(1..=4usize);
            let j = k + gap;
            if j >= s.steps.len() {
                break;
            }
            if let (Some(a), Some(b), Some(gt)) = (s.steps[k].vo, s.steps[j].vo, s.steps[j].gt) {
                let mut pre = Preintegrated::identity();
                for st in &s.steps[k + 1..=j] {
                    pre = pre.compose(&st.pre, &s.noise);
                }
                let prev = s.vo_body_pose(&a);
                let cur = s.vo_body_pose(&b);
                let dt = b.t - a.t;
                let baseline = (cur.translation - prev.translation) / dt;
                out.push(RefinerSample {
                    features: refiner_features(&baseline, &prev, &pre, dt, &s.rig.g_w),
                    baseline,
                    target: gt.v,
                });
            }
            k = j;
        }
    }
    out
}

pub fn train_refiner(streams: &[ReplayStream], cfg: &RefinerTrainConfig) -> Result<Mlp> {
    train_velocity_refiner(&refiner_samples(streams, cfg.seed), cfg)
}

/// Held-out velocity MSE of the baseline and of the refined estimate.
pub fn refiner_report(streams: &[ReplayStream], refiner: &Mlp, seed: u64) -> Result<(f64, f64)> {
    let s = refiner_samples(streams, seed);
    Ok((refiner_mse(&s, None)?, refiner_mse(&s, Some(refiner))?))
}

// ---------------------------------------------------------------------------
// Fusion

/// Fusion opportunities visited by the current policy.
pub fn collect_warm_samples(
    episodes: &[Arc<ReplayStream>],
    policy: &FusionPolicy,
    refiner: Option<&Mlp>,
) -> Result<Vec<WarmSample>> {
    let per: Result<Vec<Vec<WarmSample>>> = episodes
        .par_iter()
        .map(|ep| {
            let mut out = Vec::new();
            let mut tr = Tracker::start(ep)?;
            for step in &ep.steps[1..] {
                tr.predict(&step.pre);
                if let Some(c) = tr.observe(step, ep, refiner) {
                    if let Some(gt) = step.gt {
                        out.push(WarmSample {
                            obs: c.obs,
                            vo: c.vo,
                            gt,
                        });
                    }
                    let w = policy.weights(&c.obs)?;
                    tr.fuse(&c, &w)?;
                }
            }
            Ok(out)
        })
        .collect();
    Ok(per?.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionTraining {
    pub head: PolicyHead,
    pub curve: Vec<CurvePoint>,
    pub warm_val_ate: f64,
    pub ppo_val_ate: f64,
    /// Whether the PPO-refined policy was kept.
    pub kept_ppo: bool,
}

/// Mean SE(3) ATE with every VO frame fused.
pub fn fusion_ate(streams: &[ReplayStream], policy: &FusionPolicy, refiner: Option<&Mlp>) -> Result<f64> {
    let ates: Result<Vec<f64>> = streams
        .par_iter()
        .map(|s| {
            let out = run_closed_loop(s, &SelectPolicy::AlwaysRun, policy, refiner)?;
            stream_ate(s, &out.trajectory)
        })
        .collect();
    let ates = ates?;
    Ok(ates.iter().sum::<f64>() / ates.len().max(1) as f64)
}

/// Training streams thinned by cycling through `mix`, and validation
/// streams thinned at every ratio of `mix`.
pub fn schedule_mixed(train: &[ReplayStream], val: &[ReplayStream], mix: &[f64]) -> (Vec<ReplayStream>, Vec<ReplayStream>) {
    if mix.is_empty() {
        return (train.to_vec(), val.to_vec());
    }
    let t = train.iter().enumerate().map(|(i, s)| s.thinned(mix[i % mix.len()])).collect();
    let v = val.iter().flat_map(|s| mix.iter().map(|&r| s.thinned(r))).collect();
    (t, v)
}

/// Warm start (one-step regression on episodes, then the unrolled loss on
/// whole streams), PPO fine-tuning, and a held-out comparison that keeps
/// the better of the two. Training and validation run under the mixed VO
/// schedules of `cfg.schedule_mix`.
pub fn train_fusion(
    train_streams: &[ReplayStream],
    val: &[ReplayStream],
    refiner: Option<Arc<Mlp>>,
    reward: &FusionRewardConfig,
    ppo: &PpoConfig,
    cfg: &TrainConfig,
) -> Result<FusionTraining> {
    let (train_streams, val) = schedule_mixed(train_streams, val, &cfg.schedule_mix);
    let val = &val[..];
    let train_eps = &episodes(&train_streams, cfg.episode_frames)?[..];
    let mut rng = ChaCha8Rng::seed_from_u64(ppo.seed);
    let mut head = PolicyHead::squashed_gaussian(
        FusionObservation::DIM,
        7,
        ppo.hidden,
        ppo.init_log_std,
        &mut rng,
    );
    for round in 0..cfg.warm_rounds {
        let samples = collect_warm_samples(train_eps, &FusionPolicy::Learned(head.clone()), refiner.as_deref())?;
        let warm = WarmStartConfig {
            seed: cfg.warm.seed.wrapping_add(round as u64),
            ..cfg.warm
        };
        warm_start_fusion(&mut head, &samples, &warm)?;
    }
    let full: Vec<Arc<ReplayStream>> = train_streams.iter().cloned().map(Arc::new).collect();
    let warm_val_ate = unrolled_warm_start(&mut head, &full, refiner.as_deref(), &cfg.warm, |h| {
        fusion_ate(val, &FusionPolicy::Learned(h.clone()), refiner.as_deref())
    })?;
    let mut env = FusionEnv::new(train_eps.to_vec(), refiner.clone(), *reward, ppo.seed)?;
    let out = train(&mut env, head.clone(), ppo)?;
    let ppo_val_ate = fusion_ate(val, &FusionPolicy::Learned(out.head.clone()), refiner.as_deref())?;
    let kept_ppo = ppo_val_ate <= warm_val_ate;
    Ok(FusionTraining {
        head: if kept_ppo { out.head } else { head },
        curve: out.curve,
        warm_val_ate,
        ppo_val_ate,
        kept_ppo,
    })
}

// ---------------------------------------------------------------------------
// Scheduling

#[derive(Debug, Clone, PartialEq)]
pub struct SelectTraining {
    pub head: PolicyHead,
    pub curve: Vec<CurvePoint>,
}

pub fn train_select(
    train_eps: &[Arc<ReplayStream>],
    fusion: Arc<FusionPolicy>,
    refiner: Option<Arc<Mlp>>,
    reward: &SelectRewardConfig,
    ppo: &PpoConfig,
) -> Result<SelectTraining> {
    let mut rng = ChaCha8Rng::seed_from_u64(ppo.seed);
    let head = PolicyHead::bernoulli(SelectState::DIM, ppo.hidden, &mut rng);
    let mut env = SelectEnv::new(train_eps.to_vec(), fusion, refiner, *reward, ppo.seed)?;
    let out = train(&mut env, head, ppo)?;
    Ok(SelectTraining {
        head: out.head,
        curve: out.curve,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleResult {
    pub ate: f64,
    pub skip_ratio: f64,
    pub n_f: usize,
}

/// Mean ATE, mean skip ratio and total VO calls of a scheduling policy.
pub fn schedule_eval(
    streams: &[ReplayStream],
    select: &SelectPolicy,
    fusion: &FusionPolicy,
    refiner: Option<&Mlp>,
) -> Result<ScheduleResult> {
    let rows: Result<Vec<(f64, f64, usize)>> = streams
        .par_iter()
        .map(|s| {
            let out = run_closed_loop(s, select, fusion, refiner)?;
            Ok((stream_ate(s, &out.trajectory)?, out.skip_ratio(), out.n_f))
        })
        .collect();
    let rows = rows?;
    let n = rows.len().max(1) as f64;
    Ok(ScheduleResult {
        ate: rows.iter().map(|r| r.0).sum::<f64>() / n,
        skip_ratio: rows.iter().map(|r| r.1).sum::<f64>() / n,
        n_f: rows.iter().map(|r| r.2).sum(),
    })
}

/// Run-probability threshold at which the learned scheduler skips a
/// `target` fraction of frames on `streams` (bisection; the skip ratio is
/// non-decreasing in the threshold up to history effects).
pub fn calibrate_threshold(
    streams: &[ReplayStream],
    head: &PolicyHead,
    fusion: &FusionPolicy,
    refiner: Option<&Mlp>,
    target: f64,
) -> Result<f64> {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        let p = SelectPolicy::Thresholded {
            head: head.clone(),
            p_run: mid,
        };
        if schedule_eval(streams, &p, fusion, refiner)?.skip_ratio < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
