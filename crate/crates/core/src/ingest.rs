//! EuRoC-style CSV logs, TUM trajectory files, timestamp association and
//! ground-truth interpolation.
//!
//! On-disk layout of a log directory:
//!
//! ```text
//! imu0/data.csv                      t_ns, wx, wy, wz, ax, ay, az
//! cam0/data.csv                      t_ns, filename
//! vo/data.csv                        t_ns, tx, ty, tz, qw, qx, qy, qz, confidence
//! state_groundtruth_estimate0/data.csv  t_ns, px, py, pz, qw, qx, qy, qz, vx, vy, vz
//! ```
//!
//! Timestamps are integer nanoseconds on disk and seconds in memory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{slerp, Pose, Quat, Vec3};
use crate::imu::{ImuSample, NavState};
use crate::sim::{Frame, SensorLog, VoObservation};

pub const DEFAULT_ASSOC_TOL: f64 = 2.5e-3;

pub const IMU_CSV: &str = "imu0/data.csv";
pub const CAM_CSV: &str = "cam0/data.csv";
pub const VO_CSV: &str = "vo/data.csv";
pub const GT_CSV: &str = "state_groundtruth_estimate0/data.csv";

const IMU_HEADER: &str = "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]";
const CAM_HEADER: &str = "#timestamp [ns],filename";
const VO_HEADER: &str = "#timestamp [ns],tx,ty,tz,qw,qx,qy,qz,confidence";
const GT_HEADER: &str = "#timestamp [ns],p_RS_R_x [m],p_RS_R_y [m],p_RS_R_z [m],q_RS_w [],q_RS_x [],q_RS_y [],q_RS_z [],v_RS_R_x [m s^-1],v_RS_R_y [m s^-1],v_RS_R_z [m s^-1]";

pub fn ns_to_s(ns: i64) -> f64 {
    ns as f64 / 1e9
}

pub fn s_to_ns(t: f64) -> i64 {
    (t * 1e9).round() as i64
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

struct Rows<'a> {
    path: &'a Path,
    text: &'a str,
}

impl<'a> Rows<'a> {
    /// Non-empty, non-comment rows with their 1-based line numbers.
    fn iter(&self) -> impl Iterator<Item = (usize, Vec<&'a str>)> + 'a {
        let sep = |c: char| c == ',';
        self.text.lines().enumerate().filter_map(move |(i, l)| {
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                None
            } else {
                Some((i + 1, l.split(sep).map(str::trim).collect()))
            }
        })
    }

    fn err(&self, line: usize, reason: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            reason: reason.into(),
        }
    }

    fn f64(&self, line: usize, s: &str) -> Result<f64> {
        let v: f64 = s
            .parse()
            .map_err(|_| self.err(line, format!("invalid number '{s}'")))?;
        if !v.is_finite() {
            return Err(self.err(line, format!("non-finite value '{s}'")));
        }
        Ok(v)
    }

    fn ns(&self, line: usize, s: &str) -> Result<i64> {
        s.parse()
            .map_err(|_| self.err(line, format!("invalid integer timestamp '{s}'")))
    }

    fn vec3(&self, line: usize, f: &[&str]) -> Result<Vec3> {
        Ok(Vec3::new(
            self.f64(line, f[0])?,
            self.f64(line, f[1])?,
            self.f64(line, f[2])?,
        ))
    }

    fn quat_wxyz(&self, line: usize, f: &[&str]) -> Result<Quat> {
        let q = [
            self.f64(line, f[0])?,
            self.f64(line, f[1])?,
            self.f64(line, f[2])?,
            self.f64(line, f[3])?,
        ];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return Err(self.err(line, format!("quaternion norm {n} is not 1")));
        }
        Ok(Quat::new(q[0], q[1], q[2], q[3]))
    }

    fn check_order(&self, line: usize, prev: Option<i64>, cur: i64) -> Result<()> {
        match prev {
            Some(p) if cur <= p => Err(self.err(line, "timestamps not strictly increasing")),
            _ => Ok(()),
        }
    }

    fn expect_cols(&self, line: usize, f: &[&str], allowed: &[usize]) -> Result<()> {
        if allowed.contains(&f.len()) {
            Ok(())
        } else {
            Err(self.err(
                line,
                format!("expected {allowed:?} columns, found {}", f.len()),
            ))
        }
    }
}

pub fn parse_euroc_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let text = read(path)?;
    let rows = Rows { path, text: &text };
    let mut out = Vec::new();
    let mut prev = None;
    for (line, f) in rows.iter() {
        rows.expect_cols(line, &f, &[7])?;
        let ns = rows.ns(line, f[0])?;
        rows.check_order(line, prev, ns)?;
        prev = Some(ns);
        out.push(ImuSample {
            t: ns_to_s(ns),
            omega: rows.vec3(line, &f[1..4])?,
            accel: rows.vec3(line, &f[4..7])?,
        });
    }
    Ok(out)
}

/// Ground-truth states; velocity columns are optional (zero when absent)
/// and any trailing bias columns are ignored.
pub fn parse_euroc_gt(path: &Path) -> Result<Vec<NavState>> {
    let text = read(path)?;
    let rows = Rows { path, text: &text };
    let mut out = Vec::new();
    let mut prev = None;
    for (line, f) in rows.iter() {
        rows.expect_cols(line, &f, &[8, 11, 17])?;
        let ns = rows.ns(line, f[0])?;
        rows.check_order(line, prev, ns)?;
        prev = Some(ns);
        let v = if f.len() >= 11 {
            rows.vec3(line, &f[8..11])?
        } else {
            Vec3::zeros()
        };
        out.push(NavState {
            t: ns_to_s(ns),
            p: rows.vec3(line, &f[1..4])?,
            v,
            q: rows.quat_wxyz(line, &f[4..8])?,
        });
    }
    Ok(out)
}

pub fn parse_frame_times(path: &Path) -> Result<Vec<f64>> {
    let text = read(path)?;
    let rows = Rows { path, text: &text };
    let mut out = Vec::new();
    let mut prev = None;
    for (line, f) in rows.iter() {
        rows.expect_cols(line, &f, &[1, 2])?;
        let ns = rows.ns(line, f[0])?;
        rows.check_order(line, prev, ns)?;
        prev = Some(ns);
        out.push(ns_to_s(ns));
    }
    Ok(out)
}

pub fn parse_vo(path: &Path) -> Result<Vec<VoObservation>> {
    let text = read(path)?;
    let rows = Rows { path, text: &text };
    let mut out = Vec::new();
    let mut prev = None;
    for (line, f) in rows.iter() {
        rows.expect_cols(line, &f, &[9])?;
        let ns = rows.ns(line, f[0])?;
        rows.check_order(line, prev, ns)?;
        prev = Some(ns);
        let confidence = rows.f64(line, f[8])?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(rows.err(line, "confidence outside [0, 1]"));
        }
        out.push(VoObservation {
            t: ns_to_s(ns),
            pose: Pose {
                rotation: rows.quat_wxyz(line, &f[4..8])?,
                translation: rows.vec3(line, &f[1..4])?,
            },
            confidence,
        });
    }
    Ok(out)
}

fn push_vec(s: &mut String, v: &Vec3) {
    let _ = write!(s, ",{},{},{}", v.x, v.y, v.z);
}

fn push_quat(s: &mut String, q: &Quat) {
    let _ = write!(s, ",{},{},{},{}", q.w, q.x, q.y, q.z);
}

/// Writes the log in the directory layout described in the module docs.
pub fn write_euroc_log(dir: &Path, log: &SensorLog) -> Result<()> {
    let mut imu = format!("{IMU_HEADER}\n");
    for s in &log.imu {
        let _ = write!(imu, "{}", s_to_ns(s.t));
        push_vec(&mut imu, &s.omega);
        push_vec(&mut imu, &s.accel);
        imu.push('\n');
    }
    let mut cam = format!("{CAM_HEADER}\n");
    let mut vo = format!("{VO_HEADER}\n");
    for f in &log.frames {
        let ns = s_to_ns(f.t);
        let _ = writeln!(cam, "{ns},{ns}.png");
        if let Some(o) = &f.vo {
            let _ = write!(vo, "{}", s_to_ns(o.t));
            push_vec(&mut vo, &o.pose.translation);
            push_quat(&mut vo, &o.pose.rotation);
            let _ = writeln!(vo, ",{}", o.confidence);
        }
    }
    let mut gt = format!("{GT_HEADER}\n");
    for s in &log.gt {
        let _ = write!(gt, "{}", s_to_ns(s.t));
        push_vec(&mut gt, &s.p);
        push_quat(&mut gt, &s.q);
        push_vec(&mut gt, &s.v);
        gt.push('\n');
    }
    write(&dir.join(IMU_CSV), &imu)?;
    write(&dir.join(CAM_CSV), &cam)?;
    write(&dir.join(VO_CSV), &vo)?;
    write(&dir.join(GT_CSV), &gt)
}

/// Reads a log directory. VO rows are attached to frames by nearest
/// timestamp within [`DEFAULT_ASSOC_TOL`]; frames without a VO row carry
/// `None`. A missing VO or ground-truth file yields an empty list.
pub fn read_euroc_log(dir: &Path) -> Result<SensorLog> {
    let imu = parse_euroc_imu(&dir.join(IMU_CSV))?;
    let frame_times = parse_frame_times(&dir.join(CAM_CSV))?;
    let vo_path = dir.join(VO_CSV);
    let vo = if vo_path.exists() {
        parse_vo(&vo_path)?
    } else {
        Vec::new()
    };
    let gt_path = dir.join(GT_CSV);
    let gt = if gt_path.exists() {
        parse_euroc_gt(&gt_path)?
    } else {
        Vec::new()
    };
    let vo_times: Vec<f64> = vo.iter().map(|o| o.t).collect();
    let assoc = associate(&frame_times, &vo_times, DEFAULT_ASSOC_TOL);
    let mut frames: Vec<Frame> = frame_times.iter().map(|&t| Frame { t, vo: None }).collect();
    for (fi, vi) in assoc.pairs {
        frames[fi].vo = Some(vo[vi]);
    }
    Ok(SensorLog { imu, frames, gt })
}

pub fn log_paths(dir: &Path) -> [PathBuf; 4] {
    [
        dir.join(IMU_CSV),
        dir.join(CAM_CSV),
        dir.join(VO_CSV),
        dir.join(GT_CSV),
    ]
}

/// Ground truth at `t`: linear in position and velocity, slerp in
/// orientation, exact at knots.
pub fn interpolate_gt(gt: &[NavState], t: f64) -> Result<NavState> {
    let (first, last) = match (gt.first(), gt.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::EmptyWindow),
    };
    if !(t >= first.t && t <= last.t) {
        return Err(Error::Domain(format!(
            "t = {t} outside ground-truth range [{}, {}]",
            first.t, last.t
        )));
    }
    let i = gt.partition_point(|s| s.t < t);
    let b = &gt[i];
    if b.t == t {
        return Ok(*b);
    }
    let a = &gt[i - 1];
    let w = (t - a.t) / (b.t - a.t);
    Ok(NavState {
        t,
        p: a.p + (b.p - a.p) * w,
        v: a.v + (b.v - a.v) * w,
        q: slerp(&a.q, &b.q, w)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Association {
    /// `(frame index, sample index)`
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Nearest-neighbour pairing of sorted timestamp lists; ties go to the
/// earlier sample.
pub fn associate(frame_times: &[f64], sample_times: &[f64], tol: f64) -> Association {
    let mut out = Association::default();
    for (fi, &t) in frame_times.iter().enumerate() {
        let j = sample_times.partition_point(|&s| s < t);
        let mut best: Option<(usize, f64)> = None;
        for k in [j.checked_sub(1), Some(j)].into_iter().flatten() {
            if let Some(&s) = sample_times.get(k) {
                let d = (s - t).abs();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((k, d));
                }
            }
        }
        match best {
            Some((k, d)) if d <= tol => out.pairs.push((fi, k)),
            _ => out.unmatched.push(fi),
        }
    }
    out
}

/// `timestamp tx ty tz qx qy qz qw`, one state per line.
pub fn write_tum(path: &Path, traj: &[NavState]) -> Result<()> {
    let mut s = String::new();
    for x in traj {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            x.t, x.p.x, x.p.y, x.p.z, x.q.x, x.q.y, x.q.z, x.q.w
        );
    }
    write(path, &s)
}

/// Reads a TUM file; velocities are zero.
pub fn read_tum(path: &Path) -> Result<Vec<NavState>> {
    let text = read(path)?;
    let rows = Rows { path, text: &text };
    let mut out = Vec::new();
    for (line, l) in text.lines().enumerate() {
        let line = line + 1;
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 8 {
            return Err(rows.err(line, format!("expected 8 fields, found {}", f.len())));
        }
        let t = rows.f64(line, f[0])?;
        let q = rows.quat_wxyz(line, &[f[7], f[4], f[5], f[6]])?;
        out.push(NavState {
            t,
            p: rows.vec3(line, &f[1..4])?,
            v: Vec3::zeros(),
            q,
        });
    }
    Ok(out)
}
