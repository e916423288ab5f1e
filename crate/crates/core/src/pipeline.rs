//! Frame-synchronous replay of a sensor log and the closed-loop tracker that
//! both agents act on: IMU propagation between frames, optional VO runs,
//! fusion, and the visual-inertial initialization that seeds a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ate_rmse, AlignMode};
use crate::fusion::{
    estimate_vo_velocity, fuse, relative_rotation, FusionObservation, FusionWeights,
};
use crate::geometry::{quat_mul, Pose, Quat, Vec3};
use crate::imu::{
    preintegrate, strapdown_propagate, BiasEstimate, NavState,
    NoiseProfile, Preintegrated,
};
use crate::ingest::interpolate_gt;
use crate::init::{build_linear_system, solve_scale, CalibratedRig, InitPair, InitWindow, ScaleSolution};
use crate::mlp::Mlp;
use crate::ppo::PolicyHead;
use crate::select::{HeuristicGate, SelectState};
use crate::sim::{SensorLog, VoObservation};

/// Maps raw VO poses into the metric navigation frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoFrameMap {
    pub rotation: Quat,
    pub scale: f64,
}

impl VoFrameMap {
    pub fn scaled(scale: f64) -> Self {
        VoFrameMap {
            rotation: Quat::identity(),
            scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamStep {
    pub t: f64,
    /// IMU deltas from the previous frame to this one (identity at step 0).
    pub pre: Preintegrated,
    pub vo: Option<VoObservation>,
    pub gt: Option<NavState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStream {
    pub steps: Vec<StreamStep>,
    pub x0: NavState,
    pub vo_map: VoFrameMap,
    pub rig: CalibratedRig,
    pub noise: NoiseProfile,
}

impl ReplayStream {
    /// One step per frame. The initial state is the ground truth at the
    /// first frame when available.
    pub fn from_log(
        log: &SensorLog,
        bias: &BiasEstimate,
        noise: &NoiseProfile,
        rig: &CalibratedRig,
        vo_map: VoFrameMap,
    ) -> Result<Self> {
        if log.frames.is_empty() || log.imu.len() < 2 {
            return Err(Error::EmptyWindow);
        }
        log.validate()?;
        let mut steps = Vec::with_capacity(log.frames.len());
        let mut prev_idx = None;
        for f in &log.frames {
            let idx = log.imu_index(f.t)?;
            let pre = match prev_idx {
                None => Preintegrated::identity(),
                Some(p) => preintegrate(&log.imu[p..=idx], bias, noise)?,
            };
            let gt = if log.gt.is_empty() {
                None
            } else {
                interpolate_gt(&log.gt, f.t).ok()
            };
            steps.push(StreamStep {
                t: f.t,
                pre,
                vo: f.vo,
                gt,
            });
            prev_idx = Some(idx);
        }
        let x0 = steps[0].gt.unwrap_or(NavState {
            t: steps[0].t,
            p: Vec3::zeros(),
            v: Vec3::zeros(),
            q: Quat::identity(),
        });
        Ok(ReplayStream {
            steps,
            x0,
            vo_map,
            rig: *rig,
            noise: *noise,
        })
    }

    /// Consecutive chunks of `len` frames, each restarted from its own
    /// ground truth. Chunks shorter than two frames are dropped.
    pub fn split(&self, len: usize) -> Result<Vec<ReplayStream>> {
        if len < 2 {
            return Err(Error::Domain("episode length must be at least 2".into()));
        }
        self.require_gt()?;
        Ok(self
            .steps
            .chunks(len)
            .filter(|c| c.len() >= 2)
            .map(|c| self.sub(c))
            .collect())
    }

    /// Copy with VO withheld on the frames a fixed-ratio schedule skips.
    /// Fusing every frame of the result matches running that schedule on
    /// the original stream.
    pub fn thinned(&self, skip: f64) -> ReplayStream {
        let mut s = self.clone();
        for (i, st) in s.steps.iter_mut().enumerate().skip(1) {
            if !fixed_ratio_runs(skip, i - 1) {
                st.vo = None;
            }
        }
        s
    }

    /// Stream starting at frame `start`, seeded with `x0`.
    pub fn tail(&self, start: usize, x0: NavState) -> Result<ReplayStream> {
        if start >= self.steps.len() {
            return Err(Error::StreamExhausted);
        }
        let mut s = self.sub(&self.steps[start..]);
        s.x0 = x0;
        Ok(s)
    }

    fn sub(&self, steps: &[StreamStep]) -> ReplayStream {
        let mut steps = steps.to_vec();
        steps[0].pre = Preintegrated::identity();
        let x0 = steps[0].gt.unwrap_or(self.x0);
        ReplayStream {
            steps,
            x0,
            vo_map: self.vo_map,
            rig: self.rig,
            noise: self.noise,
        }
    }

    pub fn require_gt(&self) -> Result<()> {
        if self.steps.iter().any(|s| s.gt.is_none()) {
            return Err(Error::InsufficientData("stream lacks ground truth".into()));
        }
        Ok(())
    }

    /// Metric body pose of a VO observation.
    pub fn vo_body_pose(&self, obs: &VoObservation) -> Pose {
        let m = &self.vo_map;
        let cam = Pose {
            rotation: quat_mul(&m.rotation, &obs.pose.rotation),
            translation: m.rotation.rotate(&(obs.pose.translation * m.scale)),
        };
        self.rig.body_from_camera(&cam)
    }

    pub fn gt_positions(&self) -> Option<Vec<Vec3>> {
        self.steps.iter().map(|s| s.gt.map(|g| g.p)).collect()
    }

    /// Pure strapdown through every step.
    pub fn dead_reckoning(&self) -> Vec<NavState> {
        let mut x = self.x0;
        let mut out = vec![x];
        for s in &self.steps[1..] {
            x = strapdown_propagate(&x, &s.pre, &self.rig.g_w);
            out.push(x);
        }
        out
    }
}

/// A VO observation ready to be fused.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub obs: FusionObservation,
    pub vo: NavState,
    pub pose: Pose,
}

/// Closed-loop navigation state over a replay stream.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub x: NavState,
    g_w: Vec3,
    noise: NoiseProfile,
    since_run: Preintegrated,
    since_vo: Preintegrated,
    last_vo: Option<(f64, Pose)>,
    n_f: usize,
    traj: Vec<NavState>,
}

impl Tracker {
    /// Starts at `stream.x0`; a VO pose at step 0 becomes the velocity
    /// reference without being fused.
    pub fn start(stream: &ReplayStream) -> Result<Self> {
        if stream.steps.is_empty() {
            return Err(Error::EmptyWindow);
        }
        let last_vo = stream.steps[0].vo.map(|o| (o.t, stream.vo_body_pose(&o)));
        Ok(Tracker {
            x: stream.x0,
            g_w: stream.rig.g_w,
            noise: stream.noise,
            since_run: Preintegrated::identity(),
            since_vo: Preintegrated::identity(),
            last_vo,
            n_f: 0,
            traj: vec![stream.x0],
        })
    }

    pub fn predict(&mut self, pre: &Preintegrated) {
        self.x = strapdown_propagate(&self.x, pre, &self.g_w);
        self.since_run = self.since_run.compose(pre, &self.noise);
        self.since_vo = self.since_vo.compose(pre, &self.noise);
    }

    /// IMU-only scheduling state.
    pub fn select_state(&self) -> SelectState {
        SelectState::from_accumulator(&self.since_run)
    }

    /// Counts a VO call and clears the scheduling accumulator.
    pub fn mark_run(&mut self) {
        self.n_f += 1;
        self.since_run = Preintegrated::identity();
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    pub fn vo_sigma(&self) -> Vec3 {
        self.since_vo.sigma_imu
    }

    pub fn observe(
        &self,
        step: &StreamStep,
        stream: &ReplayStream,
        refiner: Option<&Mlp>,
    ) -> Option<Candidate> {
        let obs = step.vo?;
        let pose = stream.vo_body_pose(&obs);
        let v = match self.last_vo {
            Some((t_prev, prev)) if obs.t > t_prev => {
                estimate_vo_velocity(&prev, &pose, obs.t - t_prev, &self.since_vo, &self.g_w, refiner)
                    .unwrap_or(self.x.v)
            }
            _ => self.x.v,
        };
        let vo = NavState {
            t: obs.t,
            p: pose.translation,
            v,
            q: pose.rotation,
        };
        Some(Candidate {
            obs: FusionObservation {
                pred: self.x,
                vo_dp: vo.p - self.x.p,
                vo_dv: vo.v - self.x.v,
                vo_dq: relative_rotation(&self.x, &vo),
                c_vo: obs.confidence.clamp(0.0, 1.0),
                sigma_imu: self.since_vo.sigma_imu,
                dt_since_vo: self.since_vo.dt,
            },
            vo,
            pose,
        })
    }

    /// Observation when no VO is available at this frame.
    pub fn blind_observation(&self) -> FusionObservation {
        FusionObservation {
            pred: self.x,
            vo_dp: Vec3::zeros(),
            vo_dv: Vec3::zeros(),
            vo_dq: Vec3::zeros(),
            c_vo: 0.0,
            sigma_imu: self.since_vo.sigma_imu,
            dt_since_vo: self.since_vo.dt,
        }
    }

    pub fn fuse(&mut self, cand: &Candidate, w: &FusionWeights) -> Result<()> {
        self.x = fuse(&self.x, &cand.vo, w)?;
        self.since_vo = Preintegrated::identity();
        self.last_vo = Some((cand.vo.t, cand.pose));
        Ok(())
    }

    /// Appends the current state to the trajectory.
    pub fn record(&mut self) {
        self.traj.push(self.x);
    }

    pub fn trajectory(&self) -> &[NavState] {
        &self.traj
    }

    pub fn into_trajectory(self) -> Vec<NavState> {
        self.traj
    }
}

// ---------------------------------------------------------------------------
// Policies

#[derive(Debug, Clone, PartialEq)]
pub enum SelectPolicy {
    AlwaysRun,
    AlwaysSkip,
    /// Evenly spaced runs at the given skip ratio.
    FixedRatio(f64),
    Heuristic(HeuristicGate),
    Learned(PolicyHead),
    /// Learned scheduler run at a different operating point: VO runs when
    /// the policy's run probability exceeds `p_run` (0.5 reproduces
    /// `Learned`).
    Thresholded { head: PolicyHead, p_run: f64 },
}

impl SelectPolicy {
    /// `decision` counts frames from the first decision (0-based).
    pub fn decide(&self, state: &SelectState, decision: usize) -> Result<bool> {
        Ok(match self {
            SelectPolicy::AlwaysRun => true,
            SelectPolicy::AlwaysSkip => false,
            SelectPolicy::FixedRatio(skip) => fixed_ratio_runs(*skip, decision),
            SelectPolicy::Heuristic(g) => g.should_run(state),
            SelectPolicy::Learned(head) => {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                head.act(&state.encode(), true, &mut rng)?.action[0] == 1.0
            }
            SelectPolicy::Thresholded { head, p_run } => {
                crate::ppo::sigmoid(head.policy.forward(&state.encode())?[0]) > *p_run
            }
        })
    }
}

/// Run pattern with `floor((i+1) r) > floor(i r)`, `r = 1 - skip`.
pub fn fixed_ratio_runs(skip: f64, i: usize) -> bool {
    let r = (1.0 - skip).clamp(0.0, 1.0);
    ((i + 1) as f64 * r + 1e-9).floor() > (i as f64 * r + 1e-9).floor()
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionPolicy {
    Fixed(FusionWeights),
    Learned(PolicyHead),
}

impl FusionPolicy {
    pub fn heuristic() -> Self {
        FusionPolicy::Fixed(FusionWeights::uniform(0.9))
    }

    pub fn weights(&self, obs: &FusionObservation) -> Result<FusionWeights> {
        match self {
            FusionPolicy::Fixed(w) => Ok(*w),
            FusionPolicy::Learned(head) => {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                FusionWeights::from_slice(&head.act(&obs.encode(), true, &mut rng)?.action)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// One state per frame, starting at `x0`.
    pub trajectory: Vec<NavState>,
    /// Run decisions for frames `1..`.
    pub decisions: Vec<bool>,
    pub weights: Vec<Option<FusionWeights>>,
    pub n_f: usize,
}

impl RunOutput {
    pub fn skip_ratio(&self) -> f64 {
        crate::eval::schedule_stats(&self.decisions).1
    }
}

/// Select → (VO) → fusion over every frame of the stream.
pub fn run_closed_loop(
    stream: &ReplayStream,
    select: &SelectPolicy,
    fusion: &FusionPolicy,
    refiner: Option<&Mlp>,
) -> Result<RunOutput> {
    let mut tr = Tracker::start(stream)?;
    let mut decisions = Vec::with_capacity(stream.steps.len());
    let mut weights = Vec::with_capacity(stream.steps.len());
    for (i, step) in stream.steps.iter().enumerate().skip(1) {
        tr.predict(&step.pre);
        let run = select.decide(&tr.select_state(), i - 1)?;
        let mut used = None;
        if run {
            if let Some(c) = tr.observe(step, stream, refiner) {
                let w = fusion.weights(&c.obs)?;
                tr.fuse(&c, &w)?;
                used = Some(w);
            }
            tr.mark_run();
        }
        if !(tr.x.p.iter().chain(tr.x.v.iter()).all(|v| v.is_finite()) && tr.x.q.is_finite()) {
            return Err(Error::NumericalAbort(format!("non-finite state at frame {i}")));
        }
        tr.record();
        decisions.push(run);
        weights.push(used);
    }
    Ok(RunOutput {
        n_f: tr.n_f(),
        trajectory: tr.into_trajectory(),
        decisions,
        weights,
    })
}

/// SE(3)-aligned ATE of a run against the stream's ground truth.
pub fn stream_ate(stream: &ReplayStream, traj: &[NavState]) -> Result<f64> {
    let gt = stream
        .gt_positions()
        .ok_or_else(|| Error::InsufficientData("stream lacks ground truth".into()))?;
    let est: Vec<Vec3> = traj.iter().map(|s| s.p).collect();
    Ok(ate_rmse(&est, &gt, AlignMode::Se3)?.ate_rmse)
}

// ---------------------------------------------------------------------------
// Initialization

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Keyframe pairs in the window.
    pub pairs: usize,
    /// Frames between consecutive keyframes.
    pub stride: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { pairs: 10, stride: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitResult {
    pub solution: ScaleSolution,
    /// Frame index of the first keyframe.
    pub start: usize,
    pub x0: NavState,
    pub vo_map: VoFrameMap,
}

/// Scale and velocity from the first keyframes with VO. The first body
/// orientation comes from the (gravity-aligned) VO frame, later ones from
/// gyro integration.
pub fn initialize(
    log: &SensorLog,
    bias: &BiasEstimate,
    noise: &NoiseProfile,
    rig: &CalibratedRig,
    cfg: &InitConfig,
) -> Result<InitResult> {
    log.validate()?;
    let stride = cfg.stride.max(1);
    let mut keys: Vec<usize> = Vec::with_capacity(cfg.pairs + 1);
    for (i, f) in log.frames.iter().enumerate() {
        if f.vo.is_none() {
            continue;
        }
        if keys.last().is_none_or(|&k| i >= k + stride) {
            keys.push(i);
            if keys.len() == cfg.pairs + 1 {
                break;
            }
        }
    }
    if keys.len() < cfg.pairs + 1 {
        return Err(Error::InsufficientData(format!(
            "only {} keyframes with VO, need {}",
            keys.len(),
            cfg.pairs + 1
        )));
    }
    let frame = |k: usize| &log.frames[keys[k]];
    let vo = |k: usize| frame(k).vo.unwrap();
    let q_b0 = rig.body_rotation(&vo(0).pose.rotation);
    let mut q_b = q_b0;
    let mut pairs = Vec::with_capacity(cfg.pairs);
    for k in 0..cfg.pairs {
        let a = log.imu_index(frame(k).t)?;
        let b = log.imu_index(frame(k + 1).t)?;
        let pre = preintegrate(&log.imu[a..=b], bias, noise)?;
        let (c0, c1) = (vo(k).pose, vo(k + 1).pose);
        let p_vo = c0.rotation.inverse_rotate(&(c1.translation - c0.translation));
        pairs.push(InitPair { pre, p_vo, q_b });
        q_b = quat_mul(&q_b, &pre.dq);
    }
    let (h, b) = build_linear_system(&InitWindow { pairs }, rig)?;
    let solution = solve_scale(&h, &b)?;

    let vo_map = VoFrameMap::scaled(solution.s);
    let c0 = vo(0).pose;
    let body = rig.body_from_camera(&Pose {
        rotation: c0.rotation,
        translation: c0.translation * solution.s,
    });
    let x0 = NavState {
        t: frame(0).t,
        p: body.translation,
        v: solution.velocities[0],
        q: q_b0,
    };
    Ok(InitResult {
        solution,
        start: keys[0],
        x0,
        vo_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{synthesize_log, SimConfig};

    fn short_cfg(duration: f64) -> SimConfig {
        SimConfig {
            duration,
            ..SimConfig::default()
        }
    }

    fn stream_of(cfg: &SimConfig) -> ReplayStream {
        let log = synthesize_log(cfg).unwrap();
        ReplayStream::from_log(
            &log,
            &BiasEstimate {
                bg: cfg.gyro_bias,
                ba: cfg.accel_bias,
            },
            &cfg.noise,
            &cfg.rig,
            VoFrameMap::scaled(cfg.vo.scale),
        )
        .unwrap()
    }

    #[test]
    fn always_skip_is_dead_reckoning() {
        let s = stream_of(&short_cfg(5.0));
        let out = run_closed_loop(&s, &SelectPolicy::AlwaysSkip, &FusionPolicy::heuristic(), None).unwrap();
        assert_eq!(out.n_f, 0);
        assert_eq!(out.trajectory, s.dead_reckoning());
    }

    #[test]
    fn zero_weights_are_dead_reckoning() {
        let s = stream_of(&short_cfg(5.0));
        let out = run_closed_loop(
            &s,
            &SelectPolicy::AlwaysRun,
            &FusionPolicy::Fixed(FusionWeights::uniform(0.0)),
            None,
        )
        .unwrap();
        assert_eq!(out.trajectory, s.dead_reckoning());
    }

    #[test]
    fn always_run_counts_every_frame() {
        let s = stream_of(&short_cfg(3.0));
        let out = run_closed_loop(&s, &SelectPolicy::AlwaysRun, &FusionPolicy::heuristic(), None).unwrap();
        assert_eq!(out.n_f, s.steps.len() - 1);
        assert_eq!(out.skip_ratio(), 0.0);
    }

    #[test]
    fn thresholded_policy_brackets_learned() {
        let s = stream_of(&short_cfg(3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = PolicyHead::bernoulli(SelectState::DIM, 8, &mut rng);
        let run = |p: &SelectPolicy| {
            run_closed_loop(&s, p, &FusionPolicy::heuristic(), None)
                .unwrap()
                .decisions
        };
        let learned = run(&SelectPolicy::Learned(head.clone()));
        let at = |p_run| SelectPolicy::Thresholded { head: head.clone(), p_run };
        assert_eq!(run(&at(0.5)), learned);
        assert!(run(&at(0.0)).iter().all(|&r| r));
        assert!(run(&at(1.0)).iter().all(|&r| !r));
    }

    #[test]
    fn oracle_vo_with_full_trust_beats_vo_noise() {
        let mut cfg = short_cfg(10.0);
        cfg.vo = crate::sim::VoConfig::noiseless(cfg.vo.scale);
        let s = stream_of(&cfg);
        let out = run_closed_loop(
            &s,
            &SelectPolicy::AlwaysRun,
            &FusionPolicy::Fixed(FusionWeights::uniform(1.0)),
            None,
        )
        .unwrap();
        let ate = stream_ate(&s, &out.trajectory).unwrap();
        assert!(ate < 1e-9, "ate {ate}");
    }

    #[test]
    fn fixed_ratio_pattern() {
        let runs = |skip: f64| (0..8).filter(|&i| fixed_ratio_runs(skip, i)).count();
        assert_eq!(runs(0.0), 8);
        assert_eq!(runs(0.5), 4);
        assert_eq!(runs(0.75), 2);
        assert_eq!(runs(0.875), 1);
        assert_eq!(runs(1.0), 0);
    }

    #[test]
    fn thinned_stream_matches_fixed_schedule() {
        let s = stream_of(&short_cfg(4.0));
        for skip in [0.5, 0.75] {
            let a = run_closed_loop(&s, &SelectPolicy::FixedRatio(skip), &FusionPolicy::heuristic(), None).unwrap();
            let b = run_closed_loop(&s.thinned(skip), &SelectPolicy::AlwaysRun, &FusionPolicy::heuristic(), None)
                .unwrap();
            assert_eq!(a.trajectory, b.trajectory);
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let s = stream_of(&short_cfg(4.0));
        let a = run_closed_loop(&s, &SelectPolicy::FixedRatio(0.5), &FusionPolicy::heuristic(), None).unwrap();
        let b = run_closed_loop(&s, &SelectPolicy::FixedRatio(0.5), &FusionPolicy::heuristic(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_restarts_from_ground_truth() {
        let s = stream_of(&short_cfg(5.0));
        let eps = s.split(20).unwrap();
        assert_eq!(eps.len(), 5);
        for e in &eps {
            assert_eq!(e.x0, e.steps[0].gt.unwrap());
            assert_eq!(e.steps[0].pre.dt, 0.0);
        }
    }

    #[test]
    fn noiseless_initialization_recovers_scale() {
        // The residual error is the position discretization of the IMU
        // samples; it shrinks with h^2.
        for (rate, tol) in [(200.0, 1e-4), (2000.0, 1e-6)] {
            let mut cfg = SimConfig::noiseless(2.5);
            cfg.duration = 3.0;
            cfg.imu_rate = rate;
            let log = synthesize_log(&cfg).unwrap();
            let r = initialize(&log, &BiasEstimate::zero(), &cfg.noise, &cfg.rig, &InitConfig::default()).unwrap();
            assert!((r.solution.s - 2.5).abs() < tol * 2.5, "rate {rate}: s = {}", r.solution.s);
        }
        let mut cfg = SimConfig::noiseless(2.5);
        cfg.duration = 6.0;
        let log = synthesize_log(&cfg).unwrap();
        let r = initialize(&log, &BiasEstimate::zero(), &cfg.noise, &cfg.rig, &InitConfig::default()).unwrap();
        let gt = log.gt[0];
        assert!((r.x0.p - gt.p).norm() < 1e-4);
        assert!((r.x0.v - gt.v).norm() < 1e-3);
    }

    #[test]
    fn hovering_scale_is_unobservable() {
        let mut cfg = SimConfig::noiseless(2.5);
        cfg.duration = 6.0;
        cfg.trajectory = crate::sim::TrajectorySpec::stationary();
        let log = synthesize_log(&cfg).unwrap();
        let r = initialize(&log, &BiasEstimate::zero(), &cfg.noise, &cfg.rig, &InitConfig::default());
        assert!(matches!(r, Err(Error::UnobservableScale { .. })), "{r:?}");
    }
}
