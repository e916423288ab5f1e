//! VO scheduling MDP: IMU-only state, skip/run semantics, shaped and
//! terminal rewards, and the reward trade-off map.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{so3_log, Vec3};
use crate::imu::Preintegrated;
use crate::mlp::Mlp;
use crate::pipeline::{stream_ate, FusionPolicy, ReplayStream, Tracker};
use crate::ppo::{Env, EnvStep};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectState {
    pub dp: Vec3,
    pub dq: Vec3,
    pub dv: Vec3,
    pub dt_vo: f64,
}

impl SelectState {
    pub const DIM: usize = 10;

    /// Built from inertial deltas only.
    pub fn from_accumulator(acc: &Preintegrated) -> Self {
        select_observation(acc, acc.dt)
    }

    pub fn encode(&self) -> Vec<f64> {
        let mut o = Vec::with_capacity(Self::DIM);
        o.extend(self.dp.iter().map(|x| 2.0 * x));
        o.extend(self.dq.iter().map(|x| 5.0 * x));
        o.extend(self.dv.iter().map(|x| 0.5 * x));
        o.push(5.0 * self.dt_vo);
        o
    }
}

pub fn select_observation(acc: &Preintegrated, dt_vo: f64) -> SelectState {
    SelectState {
        dp: acc.dp,
        dq: so3_log(&acc.dq).unwrap_or_else(|_| Vec3::zeros()),
        dv: acc.dv,
        dt_vo: dt_vo.max(0.0),
    }
}

/// Runs VO when the accumulated motion or the time since the last run
/// crosses a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicGate {
    pub max_dp: f64,
    pub max_dq: f64,
    pub max_dt: f64,
}

impl Default for HeuristicGate {
    fn default() -> Self {
        HeuristicGate {
            max_dp: 0.5,
            max_dq: 0.1,
            max_dt: 0.25,
        }
    }
}

impl HeuristicGate {
    pub fn should_run(&self, s: &SelectState) -> bool {
        s.dp.norm() > self.max_dp || s.dq.norm() > self.max_dq || s.dt_vo >= self.max_dt - 1e-9
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectRewardConfig {
    pub a: f64,
    pub b: f64,
    pub eps: f64,
    pub shaping: f64,
    pub clip: (f64, f64),
}

impl Default for SelectRewardConfig {
    fn default() -> Self {
        SelectRewardConfig {
            a: 1.0,
            b: 1e-3,
            eps: 0.05,
            shaping: 1.0,
            clip: (-50.0, 50.0),
        }
    }
}

impl SelectRewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b >= 0.0 && self.eps > 0.0 && self.shaping >= 0.0) {
            return Err(Error::Domain("need A > 0, B >= 0, eps > 0, s >= 0".into()));
        }
        if !(self.clip.0 < self.clip.1) {
            return Err(Error::Domain("clip bounds must satisfy lo < hi".into()));
        }
        Ok(())
    }
}

pub fn episode_reward_unclipped(ate: f64, n_f: usize, cfg: &SelectRewardConfig) -> f64 {
    cfg.a / (ate + cfg.eps) - cfg.b * n_f as f64
}

pub fn episode_reward(ate: f64, n_f: usize, cfg: &SelectRewardConfig) -> f64 {
    episode_reward_unclipped(ate, n_f, cfg).clamp(cfg.clip.0, cfg.clip.1)
}

/// Representative outcome of one scheduling policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub name: String,
    pub ate: f64,
    pub n_f: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub a: f64,
    pub b: f64,
    pub policy: String,
    /// Reward of the policy minus that of the baseline (unclipped).
    pub delta_r: f64,
}

/// ΔR of every policy against `baseline` over the `(A, B)` grid. `eps` is
/// shared by all grid points.
pub fn reward_tradeoff_map(
    a_grid: &[f64],
    b_grid: &[f64],
    eps: f64,
    baseline: &PolicyOutcome,
    policies: &[PolicyOutcome],
) -> Result<Vec<TradeoffRow>> {
    if a_grid.is_empty() || b_grid.is_empty() || policies.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let mut rows = Vec::with_capacity(a_grid.len() * b_grid.len() * policies.len());
    for &a in a_grid {
        for &b in b_grid {
            let r = |o: &PolicyOutcome| a / (o.ate + eps) - b * o.n_f as f64;
            let base = r(baseline);
            for p in policies {
                rows.push(TradeoffRow {
                    a,
                    b,
                    policy: p.name.clone(),
                    delta_r: r(p) - base,
                });
            }
        }
    }
    Ok(rows)
}

/// `A/B` ratio at which `policy` and `baseline` earn the same reward, if
/// their call counts differ.
pub fn crossing_ratio(baseline: &PolicyOutcome, policy: &PolicyOutcome, eps: f64) -> Option<f64> {
    let dn = policy.n_f as f64 - baseline.n_f as f64;
    let dinv = 1.0 / (policy.ate + eps) - 1.0 / (baseline.ate + eps);
    if dn == 0.0 || dinv == 0.0 {
        return None;
    }
    Some(dn / dinv)
}

pub fn write_tradeoff_csv(path: &Path, rows: &[TradeoffRow]) -> Result<()> {
    let mut out = String::from("A,B,policy,delta_r\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.a, r.b, r.policy, r.delta_r));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Frame-by-frame scheduling environment. Action `1` runs VO at the current
/// frame and fuses it with the frozen fusion policy.
pub struct SelectEnv {
    episodes: Vec<Arc<ReplayStream>>,
    fusion: Arc<FusionPolicy>,
    refiner: Option<Arc<Mlp>>,
    reward: SelectRewardConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    current: Option<Arc<ReplayStream>>,
    tracker: Option<Tracker>,
    k: usize,
}

impl SelectEnv {
    pub fn new(
        episodes: Vec<Arc<ReplayStream>>,
        fusion: Arc<FusionPolicy>,
        refiner: Option<Arc<Mlp>>,
        reward: SelectRewardConfig,
        seed: u64,
    ) -> Result<Self> {
        reward.validate()?;
        if episodes.is_empty() {
            return Err(Error::InsufficientData("select env needs at least one stream".into()));
        }
        for e in &episodes {
            e.require_gt()?;
            if e.steps.len() < 2 {
                return Err(Error::InsufficientData("episode shorter than two frames".into()));
            }
        }
        Ok(SelectEnv {
            episodes,
            fusion,
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

    pub fn trajectory(&self) -> &[crate::imu::NavState] {
        self.tracker.as_ref().map_or(&[], |t| t.trajectory())
    }

    pub fn n_f(&self) -> usize {
        self.tracker.as_ref().map_or(0, |t| t.n_f())
    }
}

impl Env for SelectEnv {
    fn obs_dim(&self) -> usize {
        SelectState::DIM
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
        let obs = tr.select_state().encode();
        self.current = Some(ep);
        self.tracker = Some(tr);
        self.k = 1;
        Ok(obs)
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvStep> {
        let stream = self.current.clone().ok_or(Error::StreamExhausted)?;
        if self.k >= stream.steps.len() {
            return Err(Error::StreamExhausted);
        }
        let step = &stream.steps[self.k];
        let tr = self.tracker.as_mut().ok_or(Error::StreamExhausted)?;
        if action.first().is_some_and(|&a| a >= 0.5) {
            if let Some(c) = tr.observe(step, &stream, self.refiner.as_deref()) {
                let w = self.fusion.weights(&c.obs)?;
                tr.fuse(&c, &w)?;
            }
            tr.mark_run();
        }
        tr.record();
        let gt = step.gt.ok_or(Error::StreamExhausted)?;
        let mut reward = if self.reward.shaping == 0.0 {
            0.0
        } else {
            -self.reward.shaping * (tr.x.p - gt.p).norm()
        };
        self.k += 1;
        if self.k >= stream.steps.len() {
            let ate = stream_ate(&stream, tr.trajectory())?;
            reward += episode_reward(ate, tr.n_f(), &self.reward);
            return Ok(EnvStep {
                obs: vec![0.0; SelectState::DIM],
                reward,
                done: true,
            });
        }
        tr.predict(&stream.steps[self.k].pre);
        Ok(EnvStep {
            obs: tr.select_state().encode(),
            reward,
            done: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::NoiseProfile;
    use crate::geometry::Quat;

    #[test]
    fn observation_after_reset_is_zero() {
        let s = SelectState::from_accumulator(&Preintegrated::identity());
        assert_eq!(s.encode(), vec![0.0; 10]);
    }

    #[test]
    fn hover_deltas() {
        let hover = Preintegrated {
            dt: 0.05,
            ..Preintegrated::identity()
        };
        let n = NoiseProfile::zero();
        let acc = Preintegrated::identity().compose(&hover, &n).compose(&hover, &n);
        let s = SelectState::from_accumulator(&acc);
        assert_eq!(s.dp, Vec3::zeros());
        assert_eq!(s.dv, Vec3::zeros());
        assert_eq!(s.dq, Vec3::zeros());
        assert!((s.dt_vo - 0.1).abs() < 1e-15);
        let _ = Quat::identity();
    }

    #[test]
    fn episode_reward_examples() {
        let cfg = SelectRewardConfig {
            b: 0.0,
            ..Default::default()
        };
        assert!((episode_reward(0.05, 0, &cfg) - 10.0).abs() < 1e-12);
        let cfg = SelectRewardConfig::default();
        assert!((episode_reward_unclipped(0.05, 2000, &cfg) - 8.0).abs() < 1e-12);
        assert_eq!(episode_reward(0.0, 0, &cfg), 20.0);
        let tight = SelectRewardConfig {
            clip: (-1.0, 1.0),
            ..cfg
        };
        assert_eq!(episode_reward(0.0, 0, &tight), 1.0);
    }

    #[test]
    fn episode_reward_is_monotone() {
        let cfg = SelectRewardConfig::default();
        for i in 0..50 {
            let ate = 0.01 * i as f64;
            for n in (0..4000).step_by(250) {
                let r = episode_reward_unclipped(ate, n, &cfg);
                assert!(episode_reward_unclipped(ate + 1e-3, n, &cfg) < r);
                assert!(episode_reward_unclipped(ate, n + 1, &cfg) < r);
            }
        }
    }

    fn outcomes() -> (PolicyOutcome, Vec<PolicyOutcome>) {
        let base = PolicyOutcome {
            name: "full".into(),
            ate: 0.10,
            n_f: 4000,
        };
        let others = vec![
            PolicyOutcome { name: "skip50".into(), ate: 0.11, n_f: 2000 },
            PolicyOutcome { name: "skip75".into(), ate: 0.13, n_f: 1000 },
            PolicyOutcome { name: "skip87".into(), ate: 0.17, n_f: 500 },
        ];
        (base, others)
    }

    #[test]
    fn tradeoff_limits() {
        let (base, others) = outcomes();
        let rows = reward_tradeoff_map(&[1.0], &[0.0], 0.05, &base, &others).unwrap();
        assert!(rows.iter().all(|r| r.delta_r < 0.0));
        let rows = reward_tradeoff_map(&[0.0], &[1e-3], 0.05, &base, &others).unwrap();
        let best = rows
            .iter()
            .max_by(|a, b| a.delta_r.partial_cmp(&b.delta_r).unwrap())
            .unwrap();
        assert_eq!(best.policy, "skip87");
        assert!(reward_tradeoff_map(&[], &[1.0], 0.05, &base, &others).is_err());
    }

    #[test]
    fn tradeoff_sign_flips_at_crossing() {
        let (base, others) = outcomes();
        for p in &others {
            let ratio = crossing_ratio(&base, p, 0.05).unwrap();
            let b = 1e-3;
            let a = ratio * b;
            let rows = reward_tradeoff_map(&[a], &[b], 0.05, &base, std::slice::from_ref(p)).unwrap();
            assert!(rows[0].delta_r.abs() < 1e-9 * a.max(1.0), "{}", rows[0].delta_r);
            let lo = reward_tradeoff_map(&[a * 0.9], &[b], 0.05, &base, std::slice::from_ref(p)).unwrap();
            let hi = reward_tradeoff_map(&[a * 1.1], &[b], 0.05, &base, std::slice::from_ref(p)).unwrap();
            assert!(lo[0].delta_r > 0.0 && hi[0].delta_r < 0.0);
        }
    }
}
