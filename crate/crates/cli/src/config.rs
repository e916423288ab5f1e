//! Run configuration: built-in defaults, then a TOML file, then `--set`
//! overrides, merged as TOML trees before deserialising.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rlvio::fusion::FusionRewardConfig;
use rlvio::init::CalibratedRig;
use rlvio::pipeline::InitConfig;
use rlvio::ppo::PpoConfig;
use rlvio::select::SelectRewardConfig;
use rlvio::sim::SimConfig;

use crate::experiments::TrainConfig;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory of EuRoC-layout log directories. When absent, commands
    /// synthesise a corpus from `sim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logs: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            logs: None,
            checkpoints: PathBuf::from("checkpoints"),
            outputs: PathBuf::from("outputs"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeFlags {
    /// Run VO on every frame instead of consulting the select checkpoint.
    pub always_run: bool,
    /// Use the fixed 0.9 blend instead of the fusion checkpoint.
    pub heuristic_fusion: bool,
    /// `run`: correct biases with the bias checkpoints. When off, biases
    /// are taken as zero and no bias checkpoint is needed.
    pub bias_correction: bool,
}

impl Default for ModeFlags {
    fn default() -> Self {
        ModeFlags {
            always_run: false,
            heuristic_fusion: false,
            bias_correction: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. Copied into `sim.seed`; corpora use `seed + 1` (train),
    /// `seed + 2` (validation) and `seed + 3` (test).
    pub seed: u64,
    pub paths: Paths,
    /// Simulator settings; also the sensor model assumed for logs on disk.
    /// `sim.rig` is replaced by `rig` on load.
    pub sim: SimConfig,
    pub rig: CalibratedRig,
    pub train: TrainConfig,
    pub select_reward: SelectRewardConfig,
    pub fusion_reward: FusionRewardConfig,
    pub ppo_select: PpoConfig,
    pub ppo_fusion: PpoConfig,
    pub init: InitConfig,
    pub flags: ModeFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            rig: sim.rig,
            sim,
            train: TrainConfig::default(),
            select_reward: SelectRewardConfig::default(),
            fusion_reward: FusionRewardConfig::default(),
            ppo_select: PpoConfig {
                env_steps: 200_000,
                ..PpoConfig::select()
            },
            ppo_fusion: PpoConfig {
                env_steps: 200_000,
                ..PpoConfig::fusion()
            },
            init: InitConfig::default(),
            flags: ModeFlags::default(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Recursively merges `over` into `base`; tables merge key by key, any
/// other value replaces.
pub fn deep_merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `a.b.c=value`. The value is read as a TOML literal, falling back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override `{s}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(|p| p.trim().to_string()).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(cfg_err(format!("bad override key `{key}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn nest(path: &[String], value: toml::Value) -> toml::Value {
    path.iter().rev().fold(value, |acc, k| {
        let mut t = toml::Table::new();
        t.insert(k.clone(), acc);
        toml::Value::Table(t)
    })
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides`; validated.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree = toml::Value::try_from(RunConfig::default())
            .map_err(|e| cfg_err(format!("serialising defaults: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
            let v: toml::Table = toml::from_str(&text).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
            deep_merge(&mut tree, toml::Value::Table(v));
        }
        for o in overrides {
            let (path, value) = parse_override(o)?;
            deep_merge(&mut tree, nest(&path, value));
        }
        let mut cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        cfg.sim.rig = cfg.rig;
        cfg.sim.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.sim.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.rig.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.select_reward.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.fusion_reward.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.ppo_select.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.ppo_fusion.validate().map_err(|e| cfg_err(e.to_string()))?;
        if self.init.pairs < 2 || self.init.stride == 0 {
            return Err(cfg_err("init needs at least 2 pairs and a positive stride"));
        }
        if self.train.episode_frames < 2 {
            return Err(cfg_err("train.episode_frames must be at least 2"));
        }
        if self.train.schedule_mix.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(cfg_err("train.schedule_mix ratios must lie in [0, 1)"));
        }
        if let Some(logs) = &self.paths.logs {
            if !logs.is_dir() {
                return Err(cfg_err(format!("paths.logs {} is not a directory", logs.display())));
            }
        }
        Ok(())
    }

    /// Canonical TOML rendering.
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| cfg_err(e.to_string()))
    }

    /// SHA-256 of the canonical rendering.
    pub fn hash(&self) -> Result<String, CliError> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let d = RunConfig::default();
        let back: RunConfig = toml::from_str(&d.to_toml().unwrap()).unwrap();
        assert_eq!(back, d);
        assert_eq!(RunConfig::load(None, &[]).unwrap(), d);
    }

    #[test]
    fn precedence_cli_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "seed = 5\n[sim]\nduration = 3.0\n[select_reward]\nb = 0.5\n").unwrap();
        let cfg = RunConfig::load(Some(&f), &["select_reward.b=0.25".into()]).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.sim.duration, 3.0);
        assert_eq!(cfg.select_reward.b, 0.25);
        assert_eq!(cfg.select_reward.a, SelectRewardConfig::default().a);
    }

    #[test]
    fn overrides_parse_literals_and_strings() {
        let (p, v) = parse_override("paths.outputs=out/x").unwrap();
        assert_eq!(p, vec!["paths", "outputs"]);
        assert_eq!(v, toml::Value::String("out/x".into()));
        assert_eq!(parse_override("seed=3").unwrap().1, toml::Value::Integer(3));
        assert!(parse_override("seed").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            RunConfig::load(None, &["sim.duration=-1.0".into()]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(RunConfig::load(None, &["nosuch=1".into()]), Err(CliError::Config(_))));
        assert!(matches!(
            RunConfig::load(Some(Path::new("/nonexistent/c.toml")), &[]),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
