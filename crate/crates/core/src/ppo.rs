//! Proximal policy optimisation with generalised advantage estimation.
//!
//! Two action heads are supported: a Bernoulli logit for binary decisions
//! and a diagonal Gaussian in pre-squash space followed by a sigmoid, which
//! keeps continuous actions inside the unit box. Rollouts store the
//! pre-squash sample so the squash Jacobian cancels in the likelihood ratio.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{adam_step, grad_norm, Activation, AdamState, Mlp};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;
const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;

pub trait Env {
    fn obs_dim(&self) -> usize;
    fn reset(&mut self) -> Result<Vec<f64>>;
    fn step(&mut self, action: &[f64]) -> Result<EnvStep>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub env_steps: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub batch_size: usize,
    pub epochs_per_update: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub rollout_horizon: usize,
    pub max_grad_norm: f64,
    pub hidden: usize,
    pub init_log_std: f64,
    /// Divide rewards by the running std of the discounted return.
    pub scale_rewards: bool,
    pub seed: u64,
}

impl PpoConfig {
    pub fn select() -> Self {
        PpoConfig {
            env_steps: 1_000_000,
            learning_rate: 3e-4,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            batch_size: 64,
            epochs_per_update: 10,
            entropy_coef: 0.05,
            value_coef: 0.5,
            rollout_horizon: 2048,
            max_grad_norm: 0.5,
            hidden: 64,
            init_log_std: -1.0,
            scale_rewards: true,
            seed: 0,
        }
    }

    pub fn fusion() -> Self {
        PpoConfig {
            learning_rate: 5e-4,
            entropy_coef: 0.02,
            ..PpoConfig::select()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x <= 1.0;
        if !in_unit(self.gamma) || !in_unit(self.gae_lambda) {
            return Err(Error::Domain("gamma and gae_lambda must lie in (0, 1]".into()));
        }
        if !(self.clip_ratio > 0.0) {
            return Err(Error::Domain("clip_ratio must be positive".into()));
        }
        if self.batch_size == 0 || self.rollout_horizon == 0 || self.hidden == 0 {
            return Err(Error::Domain("batch_size, rollout_horizon and hidden must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.max_grad_norm > 0.0) {
            return Err(Error::Domain("learning_rate and max_grad_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Advantages and returns for one trajectory segment; `values` carries the
/// bootstrap value as its last entry (zero after a terminal state).
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::DimensionMismatch {
            expected: rewards.len() + 1,
            got: values.len(),
        });
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lam * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Clipped surrogate loss for one sample (to be minimised).
pub fn ppo_surrogate(logp_new: f64, logp_old: f64, advantage: f64, clip: f64) -> f64 {
    let ratio = (logp_new - logp_old).exp();
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    -(ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Bernoulli,
    SquashedGaussian { dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyHead {
    pub kind: HeadKind,
    pub policy: Mlp,
    pub value: Mlp,
    pub log_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    /// Action passed to the environment (`{0, 1}` or a point of the unit box).
    pub action: Vec<f64>,
    /// Pre-squash sample (equal to `action` for the Bernoulli head).
    pub raw: Vec<f64>,
    /// Log-density of `action`, including the squash correction.
    pub logp: f64,
    pub value: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn shrink_last_layer(net: &mut Mlp, factor: f64) {
    let last = net.shapes().len() - 1;
    let s = net.shapes()[last];
    let off = net.num_params() - s.outputs - s.inputs * s.outputs;
    for w in &mut net.params_mut()[off..] {
        *w *= factor;
    }
}

impl PolicyHead {
    fn nets<R: Rng + ?Sized>(obs_dim: usize, out: usize, hidden: usize, rng: &mut R) -> (Mlp, Mlp) {
        let mut policy = Mlp::new(
            &[obs_dim, hidden, hidden, out],
            Activation::Tanh,
            Activation::Identity,
            rng,
        );
        shrink_last_layer(&mut policy, 0.01);
        let value = Mlp::new(
            &[obs_dim, hidden, hidden, 1],
            Activation::Tanh,
            Activation::Identity,
            rng,
        );
        (policy, value)
    }

    pub fn bernoulli<R: Rng + ?Sized>(obs_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let (policy, value) = Self::nets(obs_dim, 1, hidden, rng);
        PolicyHead {
            kind: HeadKind::Bernoulli,
            policy,
            value,
            log_std: Vec::new(),
        }
    }

    pub fn squashed_gaussian<R: Rng + ?Sized>(
        obs_dim: usize,
        dim: usize,
        hidden: usize,
        init_log_std: f64,
        rng: &mut R,
    ) -> Self {
        let (policy, value) = Self::nets(obs_dim, dim, hidden, rng);
        PolicyHead {
            kind: HeadKind::SquashedGaussian { dim },
            policy,
            value,
            log_std: vec![init_log_std; dim],
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.policy.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        match self.kind {
            HeadKind::Bernoulli => 1,
            HeadKind::SquashedGaussian { dim } => dim,
        }
    }

    pub fn value_of(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.value.forward(obs)?[0])
    }

    /// Log-likelihood used in the ratio: Bernoulli log-mass, or the Gaussian
    /// density of the pre-squash sample.
    fn raw_logp(&self, out: &[f64], raw: &[f64]) -> f64 {
        match self.kind {
            HeadKind::Bernoulli => {
                let l = out[0];
                if raw[0] > 0.5 {
                    log_sigmoid(l)
                } else {
                    log_sigmoid(-l)
                }
            }
            HeadKind::SquashedGaussian { .. } => out
                .iter()
                .zip(raw)
                .zip(&self.log_std)
                .map(|((m, u), ls)| {
                    let z = (u - m) / ls.exp();
                    -0.5 * z * z - ls - 0.5 * LOG_2PI
                })
                .sum(),
        }
    }

    fn entropy(&self, out: &[f64]) -> f64 {
        match self.kind {
            HeadKind::Bernoulli => {
                let p = sigmoid(out[0]);
                -(p * log_sigmoid(out[0]) + (1.0 - p) * log_sigmoid(-out[0]))
            }
            HeadKind::SquashedGaussian { .. } => self
                .log_std
                .iter()
                .map(|ls| ls + 0.5 * (1.0 + LOG_2PI))
                .sum(),
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], deterministic: bool, rng: &mut R) -> Result<Act> {
        let out = self.policy.forward(obs)?;
        let value = self.value.forward(obs)?[0];
        match self.kind {
            HeadKind::Bernoulli => {
                let p = sigmoid(out[0]);
                let a = if deterministic {
                    (out[0] > 0.0) as u8 as f64
                } else {
                    (rng.random::<f64>() < p) as u8 as f64
                };
                let raw = vec![a];
                let logp = self.raw_logp(&out, &raw);
                Ok(Act {
                    action: raw.clone(),
                    raw,
                    logp,
                    value,
                })
            }
            HeadKind::SquashedGaussian { .. } => {
                let raw: Vec<f64> = if deterministic {
                    out.clone()
                } else {
                    out.iter()
                        .zip(&self.log_std)
                        .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                };
                let action: Vec<f64> = raw.iter().map(|&u| sigmoid(u)).collect();
                let correction: f64 = raw.iter().map(|&u| softplus(u) + softplus(-u)).sum();
                let logp = self.raw_logp(&out, &raw) + correction;
                Ok(Act {
                    action,
                    raw,
                    logp,
                    value,
                })
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.policy.is_finite() && self.value.is_finite() && self.log_std.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({ "kind": self.kind, "log_std": self.log_std });
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = b"PPH1".to_vec();
        for chunk in [header, self.policy.to_bytes(), self.value.to_bytes()] {
            out.extend_from_slice(&(chunk.len() as u64).to_le_bytes());
            out.extend_from_slice(&chunk);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Serialization(format!("policy head: {m}"));
        if bytes.len() < 4 || &bytes[..4] != b"PPH1" {
            return Err(bad("bad magic"));
        }
        let mut rest = &bytes[4..];
        let mut chunks = Vec::new();
        for _ in 0..3 {
            if rest.len() < 8 {
                return Err(bad("truncated"));
            }
            let n = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
            rest = &rest[8..];
            if rest.len() < n {
                return Err(bad("truncated"));
            }
            chunks.push(&rest[..n]);
            rest = &rest[n..];
        }
        #[derive(Deserialize)]
        struct Header {
            kind: HeadKind,
            log_std: Vec<f64>,
        }
        let h: Header = serde_json::from_slice(chunks[0]).map_err(|e| bad(&e.to_string()))?;
        let head = PolicyHead {
            kind: h.kind,
            policy: Mlp::from_bytes(chunks[1])?,
            value: Mlp::from_bytes(chunks[2])?,
            log_std: h.log_std,
        };
        if head.policy.output_dim() != head.action_dim()
            || head.value.output_dim() != 1
            || head.policy.input_dim() != head.value.input_dim()
        {
            return Err(bad("inconsistent network shapes"));
        }
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn policy_act<R: Rng + ?Sized>(
    head: &PolicyHead,
    obs: &[f64],
    deterministic: bool,
    rng: &mut R,
) -> Result<Act> {
    head.act(obs, deterministic, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub update_idx: usize,
    pub env_steps: usize,
    pub mean_episode_reward: f64,
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut s = String::from("update_idx,env_steps,mean_episode_reward\n");
    for c in curve {
        s.push_str(&format!(
            "{},{},{}\n",
            c.update_idx, c.env_steps, c.mean_episode_reward
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

struct Transition {
    obs: Vec<f64>,
    raw: Vec<f64>,
    logp: f64,
    adv: f64,
    ret: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: PolicyHead,
    pub curve: Vec<CurvePoint>,
    /// Undiscounted return of every completed episode, in order.
    pub episode_rewards: Vec<f64>,
}

/// Gradients of the per-sample PPO loss with respect to the policy output
/// and the log-std parameters, plus the loss itself.
fn policy_loss_grad(
    head: &PolicyHead,
    out: &[f64],
    tr: &Transition,
    adv: f64,
    cfg: &PpoConfig,
) -> (f64, Vec<f64>, Vec<f64>) {
    let logp = head.raw_logp(out, &tr.raw);
    let ratio = (logp - tr.logp).exp();
    let clipped = ratio.clamp(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
    let unclipped_active = ratio * adv <= clipped * adv;
    let loss = -(ratio * adv).min(clipped * adv) - cfg.entropy_coef * head.entropy(out);
    let dlogp = if unclipped_active { -ratio * adv } else { 0.0 };
    match head.kind {
        HeadKind::Bernoulli => {
            let l = out[0];
            let p = sigmoid(l);
            let a = tr.raw[0];
            let dh = -l * p * (1.0 - p);
            (loss, vec![dlogp * (a - p) - cfg.entropy_coef * dh], Vec::new())
        }
        HeadKind::SquashedGaussian { .. } => {
            let mut d_out = Vec::with_capacity(out.len());
            let mut d_ls = Vec::with_capacity(out.len());
            for ((m, u), ls) in out.iter().zip(&tr.raw).zip(&head.log_std) {
                let var = (2.0 * ls).exp();
                let z2 = (u - m) * (u - m) / var;
                d_out.push(dlogp * (u - m) / var);
                d_ls.push(dlogp * (z2 - 1.0) - cfg.entropy_coef);
            }
            (loss, d_out, d_ls)
        }
    }
}

/// Welford running mean/variance.
#[derive(Debug, Clone, Copy, Default)]
struct RunningStat {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStat {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// 1 until two samples have been seen.
    fn std(&self) -> f64 {
        if self.n < 2 {
            1.0
        } else {
            (self.m2 / (self.n - 1) as f64).sqrt()
        }
    }
}

/// Runs PPO on `env` starting from `head`.
pub fn train(env: &mut dyn Env, mut head: PolicyHead, cfg: &PpoConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if env.obs_dim() != head.obs_dim() {
        return Err(Error::DimensionMismatch {
            expected: head.obs_dim(),
            got: env.obs_dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam_pi = AdamState::for_mlp(&head.policy);
    let mut adam_v = AdamState::for_mlp(&head.value);
    let mut adam_ls = AdamState::new(head.log_std.len());

    let mut curve = Vec::new();
    let mut episode_rewards = Vec::new();
    let mut obs = env.reset()?;
    let mut ep_ret = 0.0;
    let mut disc_ret = 0.0;
    let mut ret_stat = RunningStat::default();
    let mut steps = 0usize;
    let mut update = 0usize;
    let mut last_mean = f64::NAN;

    while steps < cfg.env_steps {
        let horizon = cfg.rollout_horizon.min(cfg.env_steps - steps);
        let mut batch: Vec<Transition> = Vec::with_capacity(horizon);
        let mut seg_rewards = Vec::new();
        let mut seg_values = Vec::new();
        let mut seg_start = 0usize;
        let mut finished = Vec::new();

        for i in 0..horizon {
            let act = head.act(&obs, false, &mut rng)?;
            let st = env.step(&act.action)?;
            if !st.reward.is_finite() {
                return Err(Error::NumericalAbort("environment returned a non-finite reward".into()));
            }
            ep_ret += st.reward;
            let r = if cfg.scale_rewards {
                disc_ret = cfg.gamma * disc_ret + st.reward;
                ret_stat.push(disc_ret);
                st.reward / ret_stat.std().max(1e-8)
            } else {
                st.reward
            };
            seg_rewards.push(r);
            seg_values.push(act.value);
            let logp_ratio = match head.kind {
                HeadKind::Bernoulli => act.logp,
                HeadKind::SquashedGaussian { .. } => {
                    act.logp - act.raw.iter().map(|&u| softplus(u) + softplus(-u)).sum::<f64>()
                }
            };
            batch.push(Transition {
                obs: std::mem::take(&mut obs),
                raw: act.raw,
                logp: logp_ratio,
                adv: 0.0,
                ret: 0.0,
            });
            let last = i + 1 == horizon;
            if st.done {
                finished.push(ep_ret);
                ep_ret = 0.0;
                disc_ret = 0.0;
                obs = env.reset()?;
            } else {
                obs = st.obs;
            }
            if st.done || last {
                let bootstrap = if st.done { 0.0 } else { head.value_of(&obs)? };
                seg_values.push(bootstrap);
                let (adv, ret) = gae(&seg_rewards, &seg_values, cfg.gamma, cfg.gae_lambda)?;
                for (k, (a, r)) in adv.into_iter().zip(ret).enumerate() {
                    batch[seg_start + k].adv = a;
                    batch[seg_start + k].ret = r;
                }
                seg_start = i + 1;
                seg_rewards.clear();
                seg_values.clear();
            }
        }
        steps += horizon;

        let mut idx: Vec<usize> = (0..batch.len()).collect();
        for _ in 0..cfg.epochs_per_update {
            idx.shuffle(&mut rng);
            for mb in idx.chunks(cfg.batch_size) {
                let m = mb.len() as f64;
                let mean = mb.iter().map(|&i| batch[i].adv).sum::<f64>() / m;
                let var = mb.iter().map(|&i| (batch[i].adv - mean).powi(2)).sum::<f64>() / m;
                let std = var.sqrt() + 1e-8;

                let mut g_pi = head.policy.zero_grad();
                let mut g_v = head.value.zero_grad();
                let mut g_ls = vec![0.0; head.log_std.len()];
                let mut total = 0.0;
                for &i in mb {
                    let tr = &batch[i];
                    let adv = (tr.adv - mean) / std;
                    let tape = head.policy.forward_cached(&tr.obs)?;
                    let (loss, d_out, d_ls) = policy_loss_grad(&head, tape.output(), tr, adv, cfg);
                    let up: Vec<f64> = d_out.iter().map(|g| g / m).collect();
                    head.policy.backward_into(&tape, &up, &mut g_pi)?;
                    for (g, d) in g_ls.iter_mut().zip(&d_ls) {
                        *g += d / m;
                    }
                    let vt = head.value.forward_cached(&tr.obs)?;
                    let err = vt.output()[0] - tr.ret;
                    head.value
                        .backward_into(&vt, &[2.0 * cfg.value_coef * err / m], &mut g_v)?;
                    total += loss + cfg.value_coef * err * err;
                }
                if !total.is_finite() {
                    return Err(Error::NumericalAbort(format!(
                        "non-finite PPO loss at update {update}"
                    )));
                }
                let norm = (grad_norm(&g_pi).powi(2) + grad_norm(&g_v).powi(2) + grad_norm(&g_ls).powi(2)).sqrt();
                if norm > cfg.max_grad_norm {
                    let k = cfg.max_grad_norm / norm;
                    for g in g_pi.iter_mut().chain(g_v.iter_mut()).chain(g_ls.iter_mut()) {
                        *g *= k;
                    }
                }
                adam_step(head.policy.params_mut(), &g_pi, &mut adam_pi, cfg.learning_rate);
                adam_step(head.value.params_mut(), &g_v, &mut adam_v, cfg.learning_rate);
                if !head.log_std.is_empty() {
                    adam_step(&mut head.log_std, &g_ls, &mut adam_ls, cfg.learning_rate);
                    for ls in &mut head.log_std {
                        *ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
                    }
                }
            }
        }
        if !head.is_finite() {
            return Err(Error::NumericalAbort(format!("parameters diverged at update {update}")));
        }
        if !finished.is_empty() {
            last_mean = finished.iter().sum::<f64>() / finished.len() as f64;
        }
        episode_rewards.extend(finished);
        curve.push(CurvePoint {
            update_idx: update,
            env_steps: steps,
            mean_episode_reward: last_mean,
        });
        update += 1;
    }
    Ok(TrainOutcome {
        head,
        curve,
        episode_rewards,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force advantage: Σ_l (γλ)^l δ_{t+l}.
    fn gae_oracle(r: &[f64], v: &[f64], g: f64, lam: f64) -> Vec<f64> {
        (0..r.len())
            .map(|t| {
                (t..r.len())
                    .map(|k| {
                        let delta = r[k] + g * v[k + 1] - v[k];
                        (g * lam).powi((k - t) as i32) * delta
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn gae_limits() {
        let r = [1.0, -0.5, 2.0, 0.3];
        let v = [0.2, 0.1, -0.4, 0.7, 0.5];
        let (a, ret) = gae(&r, &v, 0.9, 0.0).unwrap();
        for t in 0..4 {
            assert_eq!(a[t], r[t] + 0.9 * v[t + 1] - v[t]);
            assert_eq!(ret[t], a[t] + v[t]);
        }
        let (a, _) = gae(&r, &[0.0; 5], 0.9, 1.0).unwrap();
        for t in 0..4 {
            let mc: f64 = (t..4).map(|k| 0.9f64.powi((k - t) as i32) * r[k]).sum();
            assert!((a[t] - mc).abs() < 1e-15);
        }
        assert!(gae(&r, &v[..4], 0.9, 0.9).is_err());
    }

    #[test]
    fn gae_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in 0..=10 {
            for _ in 0..50 {
                let r: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
                let v: Vec<f64> = (0..=len).map(|_| rng.random_range(-5.0..5.0)).collect();
                let g = rng.random_range(0.5..1.0);
                let l = rng.random_range(0.0..1.0);
                let (a, _) = gae(&r, &v, g, l).unwrap();
                for (x, y) in a.iter().zip(gae_oracle(&r, &v, g, l)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn surrogate_cases() {
        assert_eq!(ppo_surrogate(0.3, 0.3, 1.7, 0.2), -1.7);
        let lp2 = 2f64.ln();
        assert!((ppo_surrogate(lp2, 0.0, 1.5, 0.2) + 1.2 * 1.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let new = rng.random_range(-2.0..2.0);
            let old = rng.random_range(-2.0..2.0);
            let a = rng.random_range(-3.0..3.0);
            let unclipped = (new - old as f64).exp() * a;
            assert!(-ppo_surrogate(new, old, a, 0.2) <= unclipped + 1e-12);
        }
    }

    #[test]
    fn bernoulli_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = PolicyHead::bernoulli(2, 8, &mut rng);
        for p in head.policy.params_mut() {
            *p = 0.0;
        }
        let ones = (0..10_000)
            .filter(|_| head.act(&[0.3, -0.2], false, &mut rng).unwrap().action[0] == 1.0)
            .count();
        assert!((ones as f64 / 1e4 - 0.5).abs() < 0.02);
        let last = head.policy.shapes().len() - 1;
        head.policy.bias_mut(last)[0] = 5.0;
        assert_eq!(head.act(&[0.3, -0.2], true, &mut rng).unwrap().action, vec![1.0]);
        assert!(head.act(&[0.3], true, &mut rng).is_err());
    }

    #[test]
    fn squashed_samples_stay_in_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = PolicyHead::squashed_gaussian(3, 7, 16, 1.5, &mut rng);
        for _ in 0..100_000 {
            let a = head.act(&[0.1, 2.0, -1.0], false, &mut rng).unwrap();
            assert!(a.action.iter().all(|x| (0.0..=1.0).contains(x)));
            assert!(a.logp.is_finite());
        }
    }

    #[test]
    fn squashed_density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut head = PolicyHead::squashed_gaussian(1, 1, 4, -0.5, &mut rng);
        let last = head.policy.shapes().len() - 1;
        head.policy.bias_mut(last)[0] = 0.4;
        // Riemann sum of exp(logp(a)) over (0, 1).
        let n = 20_000;
        let out = head.policy.forward(&[0.0]).unwrap();
        let mut total = 0.0;
        for i in 0..n {
            let a: f64 = (i as f64 + 0.5) / n as f64;
            let u = (a / (1.0 - a)).ln();
            let lp = head.raw_logp(&out, &[u]) + softplus(u) + softplus(-u);
            total += lp.exp() / n as f64;
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = PpoConfig::fusion();
        for kind in 0..2 {
            let head = if kind == 0 {
                PolicyHead::bernoulli(3, 8, &mut rng)
            } else {
                PolicyHead::squashed_gaussian(3, 4, 8, -0.3, &mut rng)
            };
            let obs = vec![0.2, -0.7, 1.1];
            let a = head.act(&obs, false, &mut rng).unwrap();
            let out0 = head.policy.forward(&obs).unwrap();
            let tr = Transition {
                obs: obs.clone(),
                raw: a.raw.clone(),
                logp: head.raw_logp(&out0, &a.raw) - 0.05,
                adv: 0.0,
                ret: 0.0,
            };
            let adv = 0.8;
            let (_, d_out, d_ls) = policy_loss_grad(&head, &out0, &tr, adv, &cfg);
            let h = 1e-6;
            for k in 0..out0.len() {
                let mut o = out0.clone();
                o[k] += h;
                let lp = policy_loss_grad(&head, &o, &tr, adv, &cfg).0;
                o[k] -= 2.0 * h;
                let lm = policy_loss_grad(&head, &o, &tr, adv, &cfg).0;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - d_out[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} {}", d_out[k]);
            }
            for k in 0..d_ls.len() {
                let mut hp = head.clone();
                hp.log_std[k] += h;
                let lp = policy_loss_grad(&hp, &out0, &tr, adv, &cfg).0;
                hp.log_std[k] -= 2.0 * h;
                let lm = policy_loss_grad(&hp, &out0, &tr, adv, &cfg).0;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - d_ls[k]).abs() <= 1e-4 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn serialization_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for head in [
            PolicyHead::bernoulli(10, 16, &mut rng),
            PolicyHead::squashed_gaussian(24, 7, 16, -1.0, &mut rng),
        ] {
            assert_eq!(PolicyHead::from_bytes(&head.to_bytes()).unwrap(), head);
        }
        assert!(PolicyHead::from_bytes(b"nope").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::select().validate().is_ok());
        let mut c = PpoConfig::select();
        c.gamma = 0.0;
        assert!(c.validate().is_err());
        let mut c = PpoConfig::select();
        c.clip_ratio = 0.0;
        assert!(c.validate().is_err());
    }
}
