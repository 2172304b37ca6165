//! Trajectory error metrics: per-frame map-absolute pose errors split into
//! body-frame components, order statistics, and cumulative distributions,
//! plus the CSV tables a plotting tool can consume directly.

use crate::geom::Pose;
use std::io::Write;
use std::path::Path;

/// Map-absolute pose discrepancy for one frame. The translational split uses
/// a body frame with x forward, y left, z up; since camera poses look along
/// +z with x right and y down, forward error is the camera-frame z
/// component, lateral is -x, vertical is -y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameError {
    pub frame_id: usize,
    pub lateral: f64,
    pub longitudinal: f64,
    pub vertical: f64,
    /// Euclidean translation error; always sqrt(lat^2 + lon^2 + vert^2).
    pub translational: f64,
    /// Geodesic rotation angle in degrees, in [0, 180].
    pub rotational_deg: f64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("invalid grid resolution; must be > 0")]
    BadResolution,
    #[error("trajectories share no frame ids")]
    NoOverlap,
}

/// Error of `est` relative to `gt`: the relative pose gt^-1 * est, with the
/// translation expressed in the ground-truth body frame and the rotation
/// reduced to its geodesic angle.
pub fn pose_error(gt: &Pose, est: &Pose, frame_id: usize) -> FrameError {
    let rel = gt.inverse().compose(est);
    let d = rel.translation;
    let (lateral, longitudinal, vertical) = (-d.x, d.z, -d.y);
    let cos = ((rel.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    FrameError {
        frame_id,
        lateral,
        longitudinal,
        vertical,
        translational: d.norm(),
        rotational_deg: cos.acos().to_degrees(),
    }
}

/// Per-frame errors for every frame id present in both trajectories, in
/// ascending id order. Association is exact by id — no interpolation.
pub fn trajectory_errors(
    gt: &[(usize, Pose)],
    est: &[(usize, Pose)],
) -> Result<Vec<FrameError>, EvalError> {
    let mut gt_sorted: Vec<&(usize, Pose)> = gt.iter().collect();
    gt_sorted.sort_by_key(|(id, _)| *id);
    let mut est_by_id: std::collections::HashMap<usize, &Pose> =
        std::collections::HashMap::with_capacity(est.len());
    for (id, pose) in est {
        est_by_id.insert(*id, pose);
    }
    let errors: Vec<FrameError> = gt_sorted
        .iter()
        .filter_map(|(id, gt_pose)| est_by_id.get(id).map(|e| pose_error(gt_pose, e, *id)))
        .collect();
    if errors.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    Ok(errors)
}

/// Fractions of values at or below each threshold, thresholds spaced
/// `resolution` apart from 0 up to the first grid point covering the
/// maximum (so the last fraction is always 1).
pub fn cumulative_distribution(
    errors: &[f64],
    resolution: f64,
) -> Result<Vec<(f64, f64)>, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if !(resolution > 0.0) {
        return Err(EvalError::BadResolution);
    }
    let max = errors.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let steps = (max / resolution).ceil().max(0.0) as usize;
    let n = errors.len() as f64;
    Ok((0..=steps)
        .map(|k| {
            let t = k as f64 * resolution;
            let frac = errors.iter().filter(|&&e| e <= t).count() as f64 / n;
            (t, frac)
        })
        .collect())
}

/// Order statistics of an error list. For even counts the median is the
/// lower-middle element; p90 uses the nearest-rank convention
/// (ceil(0.9 n)-th smallest).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    pub p90: f64,
    pub max: f64,
}

pub fn summarize(errors: &[f64]) -> Result<Summary, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(Summary {
        median: sorted[(n - 1) / 2],
        mean: sorted.iter().sum::<f64>() / n as f64,
        p90: sorted[((0.9 * n as f64).ceil() as usize).clamp(1, n) - 1],
        max: sorted[n - 1],
    })
}

/// Writes `frame_id,lat,lon,vert,trans,rot_deg` rows (9 significant digits).
pub fn save_frame_errors(path: &Path, errors: &[FrameError]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "frame_id,lat,lon,vert,trans,rot_deg")?;
    for e in errors {
        writeln!(
            out,
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            e.frame_id, e.lateral, e.longitudinal, e.vertical, e.translational, e.rotational_deg
        )?;
    }
    Ok(())
}

/// Writes `threshold,fraction` rows for a cumulative distribution table.
pub fn save_cdf(path: &Path, cdf: &[(f64, f64)]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "threshold,fraction")?;
    for (t, f) in cdf {
        writeln!(out, "{t:.8e},{f:.8e}")?;
    }
    Ok(())
}
