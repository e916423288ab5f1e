//! Trajectory alignment, ATE and scheduling statistics.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Quat, Vec3};
use crate::imu::NavState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    Se3,
    Sim3,
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignMode::Se3 => "se3",
            AlignMode::Sim3 => "sim3",
        })
    }
}

impl std::str::FromStr for AlignMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "se3" => Ok(AlignMode::Se3),
            "sim3" => Ok(AlignMode::Sim3),
            other => Err(Error::Domain(format!("unknown alignment mode '{other}'"))),
        }
    }
}

/// `gt ≈ scale * R est + t`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub rotation: Quat,
    pub translation: Vec3,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            rotation: Quat::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * self.rotation.rotate(p) + self.translation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedResult {
    pub mode: AlignMode,
    pub rotation: Quat,
    pub translation: Vec3,
    pub scale: f64,
    pub ate_rmse: f64,
    pub errors: Vec<f64>,
}

fn mean(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len() as f64
}

/// Closed-form least-squares rigid or similarity transform mapping `est`
/// onto `gt`, with a reflection guard.
pub fn umeyama_align(est: &[Vec3], gt: &[Vec3], with_scale: bool) -> Result<Similarity> {
    if est.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            expected: gt.len(),
            got: est.len(),
        });
    }
    if est.len() < 3 {
        return Err(Error::Alignment(format!(
            "need at least 3 point pairs, got {}",
            est.len()
        )));
    }
    let n = est.len() as f64;
    let (me, mg) = (mean(est), mean(gt));
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = e - me;
        cov += (g - mg) * de.transpose();
        var_e += de.norm_squared();
    }
    cov /= n;
    var_e /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    if !(d[order[1]] > 1e-12 * d[order[0]].max(1e-300)) || var_e <= 0.0 {
        return Err(Error::Alignment("degenerate (collinear or coincident) points".into()));
    }
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(order[2], order[2])] = -1.0;
    }
    let r = u * s * vt;
    let scale = if with_scale {
        (0..3).map(|i| d[i] * s[(i, i)]).sum::<f64>() / var_e
    } else {
        1.0
    };
    let rotation = Quat::from_matrix(&r);
    let translation = mg - scale * rotation.rotate(&me);
    Ok(Similarity {
        rotation,
        translation,
        scale,
    })
}

/// Position RMSE after alignment of already associated point pairs.
pub fn ate_rmse(est: &[Vec3], gt: &[Vec3], mode: AlignMode) -> Result<AlignedResult> {
    if est.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "ATE needs at least 3 common timestamps, got {}",
            est.len()
        )));
    }
    let sim = umeyama_align(est, gt, mode == AlignMode::Sim3)?;
    Ok(residuals(est, gt, mode, &sim))
}

/// Residuals of a given transform (used with `Similarity::identity()` for
/// unaligned error).
pub fn residuals(est: &[Vec3], gt: &[Vec3], mode: AlignMode, sim: &Similarity) -> AlignedResult {
    let errors: Vec<f64> = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (sim.apply(e) - g).norm())
        .collect();
    let ate = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len().max(1) as f64).sqrt();
    AlignedResult {
        mode,
        rotation: sim.rotation,
        translation: sim.translation,
        scale: sim.scale,
        ate_rmse: ate,
        errors,
    }
}

/// Associates by timestamp (nearest neighbour within `tol`) and computes
/// ATE. Also returns the number of unmatched estimate states.
pub fn ate_trajectories(
    est: &[NavState],
    gt: &[NavState],
    tol: f64,
    mode: AlignMode,
) -> Result<(AlignedResult, usize)> {
    let et: Vec<f64> = est.iter().map(|s| s.t).collect();
    let gtt: Vec<f64> = gt.iter().map(|s| s.t).collect();
    let assoc = crate::ingest::associate(&et, &gtt, tol);
    let e: Vec<Vec3> = assoc.pairs.iter().map(|&(i, _)| est[i].p).collect();
    let g: Vec<Vec3> = assoc.pairs.iter().map(|&(_, j)| gt[j].p).collect();
    Ok((ate_rmse(&e, &g, mode)?, assoc.unmatched.len()))
}

/// Mean geodesic angle (rad) between associated orientations after
/// applying the alignment rotation. Not part of the ATE definition.
pub fn mean_orientation_error(est: &[Quat], gt: &[Quat], align: &Quat) -> f64 {
    if est.is_empty() {
        return 0.0;
    }
    est.iter()
        .zip(gt)
        .map(|(e, g)| align.mul(e).angle_to(g))
        .sum::<f64>()
        / est.len() as f64
}

pub fn scale_error(s_est: f64, s_true: f64) -> Result<f64> {
    if !(s_true > 0.0) {
        return Err(Error::Domain(format!("true scale must be positive, got {s_true}")));
    }
    Ok(100.0 * (s_est - s_true).abs() / s_true)
}

/// `(n_f, skip_ratio)` for a run/skip decision list.
pub fn schedule_stats(runs: &[bool]) -> (usize, f64) {
    let n_f = runs.iter().filter(|&&r| r).count();
    if runs.is_empty() {
        return (0, 0.0);
    }
    (n_f, (runs.len() - n_f) as f64 / runs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub sequence: String,
    pub mode: AlignMode,
    pub ate_rmse: f64,
    pub scale_error: Option<f64>,
    pub n_f: usize,
    pub skip_ratio: f64,
    /// Left empty in deterministic outputs; timings go to a sidecar.
    pub wall_time: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from("sequence,mode,ate_rmse,scale_error,n_f,skip_ratio,wall_time\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sequence,
            r.mode,
            r.ate_rmse,
            opt(r.scale_error),
            r.n_f,
            r.skip_ratio,
            opt(r.wall_time)
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_metrics_json(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let s = serde_json::to_string_pretty(rows).map_err(|e| Error::Serialization(e.to_string()))?;
    writeln!(f, "{s}").map_err(|e| Error::io(path, e))
}
