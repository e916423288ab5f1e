use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlvio::ppo::{train, Env, EnvStep, PolicyHead, PpoConfig};
use rlvio::Result;

/// One-step bandit: action 1 pays 1, action 0 pays 0.
struct Bandit;

impl Env for Bandit {
    fn obs_dim(&self) -> usize {
        1
    }
    fn reset(&mut self) -> Result<Vec<f64>> {
        Ok(vec![1.0])
    }
    fn step(&mut self, a: &[f64]) -> Result<EnvStep> {
        Ok(EnvStep {
            obs: vec![1.0],
            reward: a[0],
            done: true,
        })
    }
}

/// One-step continuous target: reward `1 - 10 (a - target)^2`, optimum 1.
struct Target {
    rng: ChaCha8Rng,
    target: f64,
}

impl Env for Target {
    fn obs_dim(&self) -> usize {
        1
    }
    fn reset(&mut self) -> Result<Vec<f64>> {
        self.target = self.rng.random_range(0.2..0.8);
        Ok(vec![self.target])
    }
    fn step(&mut self, a: &[f64]) -> Result<EnvStep> {
        let r = 1.0 - 10.0 * (a[0] - self.target).powi(2);
        Ok(EnvStep {
            obs: vec![self.target],
            reward: r,
            done: true,
        })
    }
}

#[test]
fn bandit_learns_best_arm() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = PolicyHead::bernoulli(1, 16, &mut rng);
    let cfg = PpoConfig {
        env_steps: 50_000,
        ..PpoConfig::select()
    };
    let out = train(&mut Bandit, head, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hits = (0..10_000)
        .filter(|_| out.head.act(&[1.0], false, &mut rng).unwrap().action[0] == 1.0)
        .count();
    assert!(hits as f64 / 1e4 > 0.95, "P(best) = {}", hits as f64 / 1e4);
}

#[test]
fn continuous_target_reaches_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let head = PolicyHead::squashed_gaussian(1, 1, 32, -1.0, &mut rng);
    let cfg = PpoConfig {
        env_steps: 60_000,
        ..PpoConfig::fusion()
    };
    let mut env = Target {
        rng: ChaCha8Rng::seed_from_u64(3),
        target: 0.5,
    };
    let out = train(&mut env, head, &cfg).unwrap();
    let mut total = 0.0;
    for i in 0..200 {
        let target = 0.2 + 0.6 * (i as f64 + 0.5) / 200.0;
        let a = out.head.act(&[target], true, &mut rng).unwrap().action[0];
        total += 1.0 - 10.0 * (a - target).powi(2);
    }
    let mean = total / 200.0;
    assert!(mean >= 0.9, "mean reward {mean}");
}

#[test]
fn fixed_seed_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = PolicyHead::squashed_gaussian(1, 1, 8, -1.0, &mut rng);
        let cfg = PpoConfig {
            env_steps: 5_000,
            rollout_horizon: 512,
            ..PpoConfig::fusion()
        };
        let mut env = Target {
            rng: ChaCha8Rng::seed_from_u64(5),
            target: 0.5,
        };
        train(&mut env, head, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.head, b.head);
    assert_eq!(
        a.curve.iter().map(|c| c.mean_episode_reward.to_bits()).collect::<Vec<_>>(),
        b.curve.iter().map(|c| c.mean_episode_reward.to_bits()).collect::<Vec<_>>()
    );
}
