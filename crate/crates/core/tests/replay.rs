use std::sync::Arc;

use rlvio::fusion::{uncertainty_proxy, FusionEnv, FusionRewardConfig, FusionWeights};
use rlvio::imu::{preintegrate, strapdown_propagate, BiasEstimate};
use rlvio::pipeline::{FusionPolicy, ReplayStream, VoFrameMap};
use rlvio::ppo::Env;
use rlvio::select::{SelectEnv, SelectRewardConfig};
use rlvio::sim::{make_replay_env, synthesize_log, ReplayMode, ReplaySetup, SensorLog, SimConfig, VoConfig};

fn log_and_stream(cfg: &SimConfig) -> (SensorLog, Arc<ReplayStream>) {
    let log = synthesize_log(cfg).unwrap();
    let bias = BiasEstimate {
        bg: cfg.gyro_bias,
        ba: cfg.accel_bias,
    };
    let s = ReplayStream::from_log(&log, &bias, &cfg.noise, &cfg.rig, VoFrameMap::scaled(cfg.vo.scale)).unwrap();
    (log, Arc::new(s))
}

fn five_seconds() -> SimConfig {
    SimConfig {
        duration: 5.0,
        seed: 3,
        ..SimConfig::default()
    }
}

/// Strapdown straight from the raw IMU samples between frame times.
fn dead_reckoning_oracle(log: &SensorLog, cfg: &SimConfig) -> Vec<[f64; 3]> {
    let bias = BiasEstimate {
        bg: cfg.gyro_bias,
        ba: cfg.accel_bias,
    };
    let mut x = log.gt[0];
    let mut out = vec![[x.p.x, x.p.y, x.p.z]];
    for w in log.frames.windows(2) {
        let a = log.imu_index(w[0].t).unwrap();
        let b = log.imu_index(w[1].t).unwrap();
        let pre = preintegrate(&log.imu[a..=b], &bias, &cfg.noise).unwrap();
        x = strapdown_propagate(&x, &pre, &cfg.rig.g_w);
        out.push([x.p.x, x.p.y, x.p.z]);
    }
    out
}

fn positions(traj: &[rlvio::imu::NavState]) -> Vec<[f64; 3]> {
    traj.iter().map(|s| [s.p.x, s.p.y, s.p.z]).collect()
}

#[test]
fn fusion_env_with_zero_weights_is_dead_reckoning() {
    let cfg = five_seconds();
    let (log, s) = log_and_stream(&cfg);
    let mut env = FusionEnv::new(vec![s], None, FusionRewardConfig::default(), 0).unwrap();
    env.reset().unwrap();
    loop {
        if env.step(&[0.0; 7]).unwrap().done {
            break;
        }
    }
    assert_eq!(positions(env.trajectory()), dead_reckoning_oracle(&log, &cfg));
}

#[test]
fn fusion_env_oracle_vo_pays_only_uncertainty() {
    let mut cfg = five_seconds();
    cfg.vo = VoConfig::noiseless(cfg.vo.scale);
    let (_, s) = log_and_stream(&cfg);
    let rc = FusionRewardConfig::default();
    let mut env = FusionEnv::new(vec![s.clone()], None, rc, 0).unwrap();
    env.reset().unwrap();
    let mut k = 1;
    loop {
        let step = env.step(&[1.0; 7]).unwrap();
        let c = s.steps[k].vo.unwrap().confidence;
        // Every frame is fused, so the IMU term covers one frame interval.
        let sigma = s.steps[k].pre.sigma_imu;
        let expected = -rc.lambda * uncertainty_proxy(&sigma, c, &rc).sum();
        assert!((step.reward - expected).abs() < 1e-9, "{} vs {expected}", step.reward);
        k += 1;
        if step.done {
            break;
        }
    }
    assert_eq!(k, s.steps.len());
}

#[test]
fn select_env_always_skip_is_dead_reckoning() {
    let cfg = five_seconds();
    let (log, s) = log_and_stream(&cfg);
    let mut env = SelectEnv::new(
        vec![s],
        Arc::new(FusionPolicy::heuristic()),
        None,
        SelectRewardConfig::default(),
        0,
    )
    .unwrap();
    env.reset().unwrap();
    while !env.step(&[0.0]).unwrap().done {}
    assert_eq!(env.n_f(), 0);
    assert_eq!(positions(env.trajectory()), dead_reckoning_oracle(&log, &cfg));
}

#[test]
fn select_env_always_run_counts_frames_and_zero_shaping() {
    let cfg = five_seconds();
    let (_, s) = log_and_stream(&cfg);
    let rc = SelectRewardConfig {
        shaping: 0.0,
        ..Default::default()
    };
    let mut env = SelectEnv::new(vec![s.clone()], Arc::new(FusionPolicy::heuristic()), None, rc, 0).unwrap();
    env.reset().unwrap();
    loop {
        let st = env.step(&[1.0]).unwrap();
        if st.done {
            break;
        }
        assert_eq!(st.reward, 0.0);
    }
    assert_eq!(env.n_f(), s.steps.len() - 1);

    let out = rlvio::pipeline::run_closed_loop(
        &s,
        &rlvio::pipeline::SelectPolicy::AlwaysRun,
        &FusionPolicy::heuristic(),
        None,
    )
    .unwrap();
    assert_eq!(out.trajectory, env.trajectory());
}

#[test]
fn replay_env_is_deterministic() {
    let cfg = five_seconds();
    let log = synthesize_log(&cfg).unwrap();
    let setup = ReplaySetup {
        bias: BiasEstimate {
            bg: cfg.gyro_bias,
            ba: cfg.accel_bias,
        },
        noise: cfg.noise,
        rig: cfg.rig,
        scale: cfg.vo.scale,
        refiner: None,
        episode_len: Some(25),
        seed: 9,
    };
    let run = || {
        let mut env = make_replay_env(
            std::slice::from_ref(&log),
            ReplayMode::Select {
                fusion: Arc::new(FusionPolicy::Fixed(FusionWeights::uniform(0.5))),
                reward: SelectRewardConfig::default(),
            },
            &setup,
        )
        .unwrap();
        let mut rewards = Vec::new();
        for ep in 0..6 {
            env.reset().unwrap();
            let mut i = 0usize;
            loop {
                let st = env.step(&[((i + ep) % 3 == 0) as u8 as f64]).unwrap();
                rewards.push(st.reward.to_bits());
                i += 1;
                if st.done {
                    break;
                }
            }
        }
        rewards
    };
    assert_eq!(run(), run());
}

#[test]
fn empty_log_is_rejected() {
    let setup = ReplaySetup {
        bias: BiasEstimate::zero(),
        noise: rlvio::imu::NoiseProfile::euroc(),
        rig: Default::default(),
        scale: 1.0,
        refiner: None,
        episode_len: None,
        seed: 0,
    };
    let r = make_replay_env(
        &[SensorLog::default()],
        ReplayMode::Fusion {
            reward: FusionRewardConfig::default(),
        },
        &setup,
    );
    assert!(r.is_err());
}
