//! Bodies of the `rlvio` subcommands. Each returns the manifest it wrote.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use rlvio::eval::{ate_trajectories, AlignMode};
use rlvio::ingest::{parse_euroc_gt, read_euroc_log, read_tum, write_euroc_log, write_tum, DEFAULT_ASSOC_TOL, IMU_CSV};
use rlvio::imu::NavState;
use rlvio::mlp::Mlp;
use rlvio::pipeline::{initialize, run_closed_loop, stream_ate, FusionPolicy, ReplayStream, SelectPolicy};
use rlvio::ppo::{write_curve_csv, PolicyHead};
use rlvio::select::{crossing_ratio, reward_tradeoff_map, write_tradeoff_csv, PolicyOutcome};
use rlvio::sim::{synthesize_log, SensorLog};
use rlvio::Error;

use crate::config::RunConfig;
use crate::ekf::{ekf_run, EkfParams};
use crate::experiments::{
    corpus_configs, episodes, refiner_report, schedule_eval, streams_for, synthesize_corpus, train_bias_nets,
    train_fusion, train_refiner, train_select, BiasNets, ScheduleResult, SensorSetup,
};
use crate::manifest::Manifest;
use crate::{CliError, CliResult};

pub const BIAS_GYRO: &str = "bias_gyro.bin";
pub const BIAS_ACCEL: &str = "bias_accel.bin";
pub const REFINER: &str = "refiner.bin";
pub const FUSION: &str = "fusion.bin";
pub const SELECT: &str = "select.bin";

/// Fixed skip ratios of the scheduling study.
pub const SKIP_RATIOS: [f64; 4] = [0.0, 0.5, 0.75, 0.875];

// ---------------------------------------------------------------------------
// Helpers

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_text(path: &Path, s: &str) -> CliResult<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e).into())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> CliResult<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Serialization(e.to_string()))?;
    write_text(path, &(s + "\n"))
}

fn finite_or_abort(ok: bool, what: &str) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::NumericalAbort(format!("{what} has non-finite parameters")).into())
    }
}

/// Checkpoint directory with the file names used by every command.
pub struct Checkpoints<'a> {
    pub dir: &'a Path,
}

impl Checkpoints<'_> {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str, reason: &str) -> CliResult<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::MissingCheckpoint {
                path: p,
                reason: reason.to_string(),
            })
        }
    }

    pub fn bias(&self, m: &mut Manifest) -> CliResult<BiasNets> {
        let g = self.require(BIAS_GYRO, "run `train bias` first")?;
        let a = self.require(BIAS_ACCEL, "run `train bias` first")?;
        m.input(&g)?;
        m.input(&a)?;
        Ok(BiasNets {
            gyro: Some(Mlp::load(&g)?),
            accel: Some(Mlp::load(&a)?),
        })
    }

    /// Fusion policy and its velocity refiner; the fixed blend when
    /// `heuristic` is set.
    pub fn fusion(&self, heuristic: bool, m: &mut Manifest) -> CliResult<(FusionPolicy, Option<Mlp>)> {
        if heuristic {
            return Ok((FusionPolicy::heuristic(), None));
        }
        let f = self.require(FUSION, "run `train fusion` first or set flags.heuristic_fusion")?;
        m.input(&f)?;
        let head = PolicyHead::load(&f)?;
        let r = self.path(REFINER);
        let refiner = if r.is_file() {
            m.input(&r)?;
            Some(Mlp::load(&r)?)
        } else {
            None
        };
        Ok((FusionPolicy::Learned(head), refiner))
    }

    pub fn select(&self, m: &mut Manifest) -> CliResult<PolicyHead> {
        let s = self.require(SELECT, "run `train select` first or set flags.always_run")?;
        m.input(&s)?;
        Ok(PolicyHead::load(&s)?)
    }
}

/// Log directories (those holding an IMU file) directly under `dir`, sorted.
pub fn log_dirs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.join(IMU_CSV).is_file() {
            out.push(p);
        }
    }
    if dir.join(IMU_CSV).is_file() {
        out.push(dir.to_path_buf());
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::InsufficientData(format!("no log directories under {}", dir.display())).into());
    }
    Ok(out)
}

fn read_logs(dirs: &[PathBuf], m: &mut Manifest) -> CliResult<Vec<SensorLog>> {
    let mut logs = Vec::with_capacity(dirs.len());
    for d in dirs {
        m.input_dir(d)?;
        logs.push(read_euroc_log(d)?);
    }
    Ok(logs)
}

/// Training and validation logs: the last `validation_logs` directories of
/// `paths.logs`, or synthetic corpora seeded from the run seed.
pub fn training_data(cfg: &RunConfig, m: &mut Manifest) -> CliResult<(Vec<SensorLog>, Vec<SensorLog>)> {
    let tc = &cfg.train;
    match &cfg.paths.logs {
        Some(dir) => {
            let mut logs = read_logs(&log_dirs(dir)?, m)?;
            if logs.len() <= tc.validation_logs {
                return Err(Error::InsufficientData(format!(
                    "{} logs leave none for training after {} validation logs",
                    logs.len(),
                    tc.validation_logs
                ))
                .into());
            }
            let val = logs.split_off(logs.len() - tc.validation_logs);
            Ok((logs, val))
        }
        None => {
            let train = synthesize_corpus(&corpus_configs(&cfg.sim, tc.logs, tc.log_duration, cfg.seed + 1))?;
            let val = synthesize_corpus(&corpus_configs(&cfg.sim, tc.validation_logs, tc.log_duration, cfg.seed + 2))?;
            Ok((train, val))
        }
    }
}

/// Held-out logs from `dir`, or a synthetic test corpus.
pub fn test_data(cfg: &RunConfig, dir: Option<&Path>, m: &mut Manifest) -> CliResult<Vec<SensorLog>> {
    match dir {
        Some(d) => read_logs(&log_dirs(d)?, m),
        None => Ok(synthesize_corpus(&corpus_configs(
            &cfg.sim,
            cfg.train.test_logs,
            cfg.train.log_duration,
            cfg.seed + 3,
        ))?),
    }
}

// ---------------------------------------------------------------------------
// simulate

/// One log from `sim` into `out`, or `count` corpus logs into
/// `out/seq_000`, `out/seq_001`, ...
pub fn simulate(cfg: &RunConfig, out: &Path, count: Option<usize>) -> CliResult<Manifest> {
    create_dir(out)?;
    let mut m = Manifest::new("simulate", cfg)?;
    let written: Vec<PathBuf> = match count {
        None => {
            write_euroc_log(out, &synthesize_log(&cfg.sim)?)?;
            vec![out.to_path_buf()]
        }
        Some(n) => {
            let logs = synthesize_corpus(&corpus_configs(&cfg.sim, n, cfg.sim.duration, cfg.seed))?;
            let mut dirs = Vec::with_capacity(n);
            for (i, log) in logs.iter().enumerate() {
                let d = out.join(format!("seq_{i:03}"));
                write_euroc_log(&d, log)?;
                dirs.push(d);
            }
            dirs
        }
    };
    for d in &written {
        for p in rlvio::ingest::log_paths(d) {
            m.output(out, &p)?;
        }
    }
    m.write(&out.join("manifest.json"))?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainTarget {
    Bias,
    Fusion,
    Select,
}

pub fn train(cfg: &RunConfig, target: TrainTarget) -> CliResult<Manifest> {
    let dir = &cfg.paths.checkpoints;
    create_dir(dir)?;
    match target {
        TrainTarget::Bias => train_bias_cmd(cfg, dir),
        TrainTarget::Fusion => train_fusion_cmd(cfg, dir),
        TrainTarget::Select => train_select_cmd(cfg, dir),
    }
}

fn train_bias_cmd(cfg: &RunConfig, dir: &Path) -> CliResult<Manifest> {
    let mut m = Manifest::new("train bias", cfg)?;
    let (train, _) = training_data(cfg, &mut m)?;
    let fit = train_bias_nets(&train, &cfg.sim.noise, &cfg.rig.g_w, &cfg.train)?;
    let (g, a) = (fit.nets.gyro.as_ref().unwrap(), fit.nets.accel.as_ref().unwrap());
    finite_or_abort(g.is_finite() && a.is_finite(), "bias network")?;
    let mut curve = String::from("epoch,gyro_loss,accel_loss\n");
    for i in 0..fit.gyro_loss.len().max(fit.accel_loss.len()) {
        let cell = |v: &[f64]| v.get(i).map(|x| x.to_string()).unwrap_or_default();
        curve.push_str(&format!("{i},{},{}\n", cell(&fit.gyro_loss), cell(&fit.accel_loss)));
    }
    let paths = [dir.join(BIAS_GYRO), dir.join(BIAS_ACCEL), dir.join("bias_curve.csv")];
    g.save(&paths[0])?;
    a.save(&paths[1])?;
    write_text(&paths[2], &curve)?;
    for p in &paths {
        m.output(dir, p)?;
    }
    m.write(&dir.join("train_bias_manifest.json"))?;
    Ok(m)
}

#[derive(Debug, Clone, Serialize)]
struct FusionSummary {
    warm_val_ate: f64,
    ppo_val_ate: f64,
    kept_ppo: bool,
    /// Held-out velocity MSE before and after the refiner.
    refiner_mse: Option<(f64, f64)>,
}

fn train_fusion_cmd(cfg: &RunConfig, dir: &Path) -> CliResult<Manifest> {
    let ck = Checkpoints { dir };
    let mut m = Manifest::new("train fusion", cfg)?;
    let bias = ck.bias(&mut m)?;
    let (train, val) = training_data(cfg, &mut m)?;
    let setup = SensorSetup::of(&cfg.sim);
    let train = streams_for(&train, &setup, &bias)?;
    let val = streams_for(&val, &setup, &bias)?;
    let refiner_path = dir.join(REFINER);
    let refiner = if cfg.train.use_refiner {
        let r = train_refiner(&train, &cfg.train.refiner)?;
        finite_or_abort(r.is_finite(), "velocity refiner")?;
        Some(r)
    } else {
        if refiner_path.exists() {
            std::fs::remove_file(&refiner_path).map_err(|e| Error::io(&refiner_path, e))?;
        }
        None
    };
    let refiner_mse = match &refiner {
        Some(r) => Some(refiner_report(&val, r, cfg.train.refiner.seed + 1)?),
        None => None,
    };
    let out = train_fusion(
        &train,
        &val,
        refiner.clone().map(Arc::new),
        &cfg.fusion_reward,
        &cfg.ppo_fusion,
        &cfg.train,
    )?;
    finite_or_abort(out.head.is_finite(), "fusion policy")?;

    let mut written = vec![dir.join(FUSION), dir.join("fusion_curve.csv"), dir.join("fusion_summary.json")];
    out.head.save(&written[0])?;
    write_curve_csv(&written[1], &out.curve)?;
    write_json(
        &written[2],
        &FusionSummary {
            warm_val_ate: out.warm_val_ate,
            ppo_val_ate: out.ppo_val_ate,
            kept_ppo: out.kept_ppo,
            refiner_mse,
        },
    )?;
    if let Some(r) = &refiner {
        r.save(&refiner_path)?;
        written.push(refiner_path);
    }
    for p in &written {
        m.output(dir, p)?;
    }
    m.write(&dir.join("train_fusion_manifest.json"))?;
    Ok(m)
}

fn train_select_cmd(cfg: &RunConfig, dir: &Path) -> CliResult<Manifest> {
    let ck = Checkpoints { dir };
    let mut m = Manifest::new("train select", cfg)?;
    let bias = ck.bias(&mut m)?;
    let (fusion, refiner) = ck.fusion(cfg.train.heuristic_fusion, &mut m)?;
    let (train, val) = training_data(cfg, &mut m)?;
    let setup = SensorSetup::of(&cfg.sim);
    let train = streams_for(&train, &setup, &bias)?;
    let val = streams_for(&val, &setup, &bias)?;
    let eps = episodes(&train, cfg.train.episode_frames)?;
    let out = train_select(
        &eps,
        Arc::new(fusion.clone()),
        refiner.clone().map(Arc::new),
        &cfg.select_reward,
        &cfg.ppo_select,
    )?;
    finite_or_abort(out.head.is_finite(), "select policy")?;
    let summary = schedule_eval(&val, &SelectPolicy::Learned(out.head.clone()), &fusion, refiner.as_ref())?;

    let written = [dir.join(SELECT), dir.join("select_curve.csv"), dir.join("select_summary.json")];
    out.head.save(&written[0])?;
    write_curve_csv(&written[1], &out.curve)?;
    write_json(&written[2], &summary)?;
    for p in &written {
        m.output(dir, p)?;
    }
    m.write(&dir.join("train_select_manifest.json"))?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// run

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub frames: usize,
    pub n_f: usize,
    pub skip_ratio: f64,
    /// Metric scale recovered at initialization.
    pub scale: f64,
    pub init_frame: usize,
    /// SE(3) ATE against the log's ground truth, when present.
    pub ate_se3: Option<f64>,
}

/// Initialization, then the closed loop over the rest of the log.
pub fn run(cfg: &RunConfig, log_dir: &Path, out: &Path, timing: bool) -> CliResult<(Manifest, RunSummary)> {
    let started = Instant::now();
    let ck = Checkpoints {
        dir: &cfg.paths.checkpoints,
    };
    let mut m = Manifest::new("run", cfg)?;
    let bias_nets = if cfg.flags.bias_correction {
        ck.bias(&mut m)?
    } else {
        BiasNets::default()
    };
    let (fusion, refiner) = ck.fusion(cfg.flags.heuristic_fusion, &mut m)?;
    let select = if cfg.flags.always_run {
        SelectPolicy::AlwaysRun
    } else {
        SelectPolicy::Learned(ck.select(&mut m)?)
    };
    m.input_dir(log_dir)?;
    let log = read_euroc_log(log_dir)?;

    let noise = cfg.sim.noise;
    let bias = bias_nets.estimate(&log, &noise)?;
    let init = initialize(&log, &bias, &noise, &cfg.rig, &cfg.init)?;
    let stream = ReplayStream::from_log(&log, &bias, &noise, &cfg.rig, init.vo_map)?.tail(init.start, init.x0)?;
    let res = run_closed_loop(&stream, &select, &fusion, refiner.as_ref())?;
    let ate_se3 = if stream.steps.iter().all(|s| s.gt.is_some()) {
        Some(stream_ate(&stream, &res.trajectory)?)
    } else {
        None
    };
    let summary = RunSummary {
        frames: stream.steps.len(),
        n_f: res.n_f,
        skip_ratio: res.skip_ratio(),
        scale: init.solution.s,
        init_frame: init.start,
        ate_se3,
    };

    create_dir(out)?;
    let mut actions = String::from("frame,t,run,fused,w_px,w_py,w_pz,w_vx,w_vy,w_vz,w_q\n");
    for (k, (run, w)) in res.decisions.iter().zip(&res.weights).enumerate() {
        let i = k + 1;
        actions.push_str(&format!("{},{},{},{}", init.start + i, stream.steps[i].t, *run as u8, w.is_some() as u8));
        match w {
            Some(w) => {
                for x in w.w_p.iter().chain(w.w_v.iter()).chain([&w.w_q]) {
                    actions.push_str(&format!(",{x}"));
                }
            }
            None => actions.push_str(",,,,,,,"),
        }
        actions.push('\n');
    }
    let written = [out.join("trajectory.tum"), out.join("actions.csv"), out.join("summary.json")];
    write_tum(&written[0], &res.trajectory)?;
    write_text(&written[1], &actions)?;
    write_json(&written[2], &summary)?;
    for p in &written {
        m.output(out, p)?;
    }
    m.write(&out.join("manifest.json"))?;

    let wall = started.elapsed().as_secs_f64();
    eprintln!("run: {} frames, n_f {}, wall {:.3} s", summary.frames, summary.n_f, wall);
    if timing {
        write_json(&out.join("timing.json"), &serde_json::json!({ "wall_time_s": wall }))?;
    }
    Ok((m, summary))
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: AlignMode,
    pub ate_rmse: f64,
    /// Alignment scale (1 in SE(3) mode).
    pub scale: f64,
    pub matched: usize,
    pub unmatched: usize,
}

/// TUM file, or EuRoC ground-truth CSV when the extension is `.csv`.
fn read_trajectory(path: &Path) -> CliResult<Vec<NavState>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        Ok(parse_euroc_gt(path)?)
    } else {
        Ok(read_tum(path)?)
    }
}

pub fn eval(cfg: &RunConfig, est: &Path, gt: &Path, mode: AlignMode, tol: Option<f64>, out: &Path) -> CliResult<(Manifest, EvalReport)> {
    let mut m = Manifest::new("eval", cfg)?;
    m.input(est)?;
    m.input(gt)?;
    let e = read_trajectory(est)?;
    let g = read_trajectory(gt)?;
    let (res, unmatched) = ate_trajectories(&e, &g, tol.unwrap_or(DEFAULT_ASSOC_TOL), mode)?;
    let report = EvalReport {
        mode,
        ate_rmse: res.ate_rmse,
        scale: res.scale,
        matched: res.errors.len(),
        unmatched,
    };
    create_dir(out)?;
    let csv = format!(
        "mode,ate_rmse,scale,matched,unmatched\n{},{},{},{},{}\n",
        report.mode, report.ate_rmse, report.scale, report.matched, report.unmatched
    );
    let written = [out.join("metrics.csv"), out.join("metrics.json")];
    write_text(&written[0], &csv)?;
    write_json(&written[1], &report)?;
    for p in &written {
        m.output(out, p)?;
    }
    m.write(&out.join("manifest.json"))?;
    Ok((m, report))
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Study {
    SkipRatio,
    FusionStrategy,
    BiasComponents,
    RewardMap,
}

impl Study {
    fn name(self) -> &'static str {
        match self {
            Study::SkipRatio => "skip_ratio",
            Study::FusionStrategy => "fusion_strategy",
            Study::BiasComponents => "bias_components",
            Study::RewardMap => "reward_map",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub ate: f64,
    pub skip_ratio: f64,
    pub n_f: usize,
}

impl AblationRow {
    fn of(variant: &str, r: ScheduleResult) -> Self {
        AblationRow {
            variant: variant.to_string(),
            ate: r.ate,
            skip_ratio: r.skip_ratio,
            n_f: r.n_f,
        }
    }
}

fn rows_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,ate,skip_ratio,n_f\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.variant, r.ate, r.skip_ratio, r.n_f));
    }
    s
}

/// Reward-map grids.
pub const REWARD_A: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
pub const REWARD_B: [f64; 6] = [0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2];

fn schedule_rows(
    streams: &[ReplayStream],
    learned: PolicyHead,
    fusion: &FusionPolicy,
    refiner: Option<&Mlp>,
) -> CliResult<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for r in SKIP_RATIOS {
        let res = schedule_eval(streams, &SelectPolicy::FixedRatio(r), fusion, refiner)?;
        rows.push(AblationRow::of(&format!("fixed-{}", r * 100.0), res));
    }
    let res = schedule_eval(streams, &SelectPolicy::Learned(learned), fusion, refiner)?;
    rows.push(AblationRow::of("learned", res));
    Ok(rows)
}

/// Runs one study on held-out logs (`logs`, or the synthetic test corpus)
/// and writes `<study>.csv` under `out`.
pub fn ablate(cfg: &RunConfig, study: Study, logs: Option<&Path>, out: &Path) -> CliResult<(Manifest, Vec<AblationRow>)> {
    let ck = Checkpoints {
        dir: &cfg.paths.checkpoints,
    };
    let mut m = Manifest::new(&format!("ablate {}", study.name()), cfg)?;
    let bias = ck.bias(&mut m)?;
    let test = test_data(cfg, logs, &mut m)?;
    let setup = SensorSetup::of(&cfg.sim);
    create_dir(out)?;
    let mut written = Vec::new();

    let rows = match study {
        Study::SkipRatio | Study::RewardMap => {
            let (fusion, refiner) = ck.fusion(cfg.flags.heuristic_fusion, &mut m)?;
            let learned = ck.select(&mut m)?;
            let streams = streams_for(&test, &setup, &bias)?;
            let rows = schedule_rows(&streams, learned, &fusion, refiner.as_ref())?;
            if study == Study::RewardMap {
                let outcome = |r: &AblationRow| PolicyOutcome {
                    name: r.variant.clone(),
                    ate: r.ate,
                    n_f: r.n_f,
                };
                let baseline = outcome(&rows[0]);
                let policies: Vec<PolicyOutcome> = rows[1..].iter().map(outcome).collect();
                let eps = cfg.select_reward.eps;
                let map = reward_tradeoff_map(&REWARD_A, &REWARD_B, eps, &baseline, &policies)?;
                let p = out.join("reward_map.csv");
                write_tradeoff_csv(&p, &map)?;
                written.push(p);
                let mut cross = String::from("policy,crossing_a_over_b\n");
                for pol in &policies {
                    let c = crossing_ratio(&baseline, pol, eps).map(|c| c.to_string()).unwrap_or_default();
                    cross.push_str(&format!("{},{}\n", pol.name, c));
                }
                let p = out.join("reward_crossings.csv");
                write_text(&p, &cross)?;
                written.push(p);
            }
            rows
        }
        Study::FusionStrategy => {
            let streams = streams_for(&test, &setup, &bias)?;
            let heur = schedule_eval(&streams, &SelectPolicy::AlwaysRun, &FusionPolicy::heuristic(), None)?;
            let params = EkfParams::nominal(&cfg.sim.vo, &cfg.sim.noise);
            let ekf_ates: Vec<f64> = streams
                .iter()
                .map(|s| stream_ate(s, &ekf_run(s, &params)?))
                .collect::<rlvio::Result<_>>()?;
            let ekf = ScheduleResult {
                ate: ekf_ates.iter().sum::<f64>() / ekf_ates.len().max(1) as f64,
                skip_ratio: 0.0,
                n_f: heur.n_f,
            };
            let (fusion, refiner) = ck.fusion(false, &mut m)?;
            let rl = schedule_eval(&streams, &SelectPolicy::AlwaysRun, &fusion, refiner.as_ref())?;
            vec![
                AblationRow::of("heuristic-0.9", heur),
                AblationRow::of("ekf-baseline", ekf),
                AblationRow::of("rl", rl),
            ]
        }
        Study::BiasComponents => {
            let (fusion, refiner) = ck.fusion(cfg.flags.heuristic_fusion, &mut m)?;
            let select = if cfg.flags.always_run {
                SelectPolicy::AlwaysRun
            } else {
                SelectPolicy::Learned(ck.select(&mut m)?)
            };
            let mut rows = Vec::new();
            for (name, nets) in [
                ("none", BiasNets::default()),
                ("gyro-only", bias.gyro_only()),
                ("gyro+accel", bias.clone()),
            ] {
                let streams = streams_for(&test, &setup, &nets)?;
                rows.push(AblationRow::of(name, schedule_eval(&streams, &select, &fusion, refiner.as_ref())?));
            }
            rows
        }
    };

    let p = out.join(format!("{}.csv", study.name()));
    write_text(&p, &rows_csv(&rows))?;
    written.push(p);
    for p in &written {
        m.output(out, p)?;
    }
    m.write(&out.join(format!("{}_manifest.json", study.name())))?;
    Ok((m, rows))
}
