//! Fusing several single-reference pose estimates into one pose.
//!
//! Averaging happens on the camera-to-world form of each pose, so the
//! translation average is an average of camera centers.

use nalgebra::{Matrix4, SymmetricEigen, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::PoseEstimate;
use crate::geometry::{PoseSE3, UnitQuaternion};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("nothing to fuse")]
    Empty,
    #[error("all weights are zero")]
    AllZeroWeights,
    #[error("weights must be finite and non-negative")]
    InvalidWeight,
    #[error("no successful estimates to fuse")]
    NoSuccessfulEstimates,
    #[error("{counts} match counts for {estimates} estimates")]
    LengthMismatch { counts: usize, estimates: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Maxf,
    Avg,
    Wavg,
    Rwavg,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] =
        [FusionStrategy::Maxf, FusionStrategy::Avg, FusionStrategy::Wavg, FusionStrategy::Rwavg];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Maxf => "maxf",
            FusionStrategy::Avg => "avg",
            FusionStrategy::Wavg => "wavg",
            FusionStrategy::Rwavg => "rwavg",
        }
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "maxf" => Ok(FusionStrategy::Maxf),
            "avg" => Ok(FusionStrategy::Avg),
            "wavg" => Ok(FusionStrategy::Wavg),
            "rwavg" => Ok(FusionStrategy::Rwavg),
            other => Err(format!("unknown fusion strategy '{other}' (expected maxf, avg, wavg or rwavg)")),
        }
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An estimate with its fusion weight and the id of the reference it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPose {
    pub estimate: PoseEstimate,
    pub weight: f64,
    pub source: usize,
}

fn normalized_weights(weights: &[f64]) -> Result<Vec<f64>, FusionError> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(FusionError::InvalidWeight);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(FusionError::AllZeroWeights);
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

fn accumulate(quaternions: &[UnitQuaternion], weights: &[f64]) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    for (q, w) in quaternions.iter().zip(weights) {
        let v = Vector4::from(q.to_array());
        m += *w * v * v.transpose();
    }
    m
}

/// Weighted chordal mean: the dominant eigenvector of `Σ wᵢ qᵢ qᵢᵀ`,
/// returned with a non-negative scalar part.
pub fn average_rotations(quaternions: &[UnitQuaternion], weights: &[f64]) -> Result<UnitQuaternion, FusionError> {
    if quaternions.is_empty() {
        return Err(FusionError::Empty);
    }
    if quaternions.len() != weights.len() {
        return Err(FusionError::LengthMismatch { counts: weights.len(), estimates: quaternions.len() });
    }
    let w = normalized_weights(weights)?;
    let eig = SymmetricEigen::new(accumulate(quaternions, &w));
    let mut best = 0;
    for i in 1..4 {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let v = eig.eigenvectors.column(best);
    let sign = if v[0] < 0.0 { -1.0 } else { 1.0 };
    Ok(UnitQuaternion::new_normalize(sign * v[0], sign * v[1], sign * v[2], sign * v[3])
        .expect("eigenvectors have unit norm"))
}

/// Weighted average of poses taken literally: chordal-mean rotation and
/// weighted mean of the translation vectors.
pub fn average_poses(poses: &[PoseSE3], weights: &[f64]) -> Result<PoseSE3, FusionError> {
    let quats: Vec<UnitQuaternion> = poses.iter().map(|p| UnitQuaternion::from_rotation_matrix(p.rotation())).collect();
    let q = average_rotations(&quats, weights)?;
    let w = normalized_weights(weights)?;
    let t = poses.iter().zip(&w).fold(Vector3::zeros(), |acc, (p, w)| acc + *w * p.translation());
    Ok(PoseSE3::with_tolerance(q.to_rotation_matrix(), t, 1e-6).expect("unit quaternion gives a rotation"))
}

/// Averages world-to-camera poses through their camera-to-world form.
fn average_world_poses(poses: &[PoseSE3], weights: &[f64]) -> Result<PoseSE3, FusionError> {
    let inverted: Vec<PoseSE3> = poses.iter().map(PoseSE3::inverse).collect();
    Ok(average_poses(&inverted, weights)?.inverse())
}

/// All-zero weights (for example, direct estimates with no feature matches)
/// fall back to uniform weights.
fn weights_or_uniform(weights: Vec<f64>) -> Vec<f64> {
    if weights.iter().all(|w| *w == 0.0) {
        vec![1.0; weights.len()]
    } else {
        weights
    }
}

/// Unweighted average of the successful estimates.
pub fn fuse_avg(estimates: &[PoseEstimate]) -> Result<PoseSE3, FusionError> {
    let weighted: Vec<WeightedPose> = estimates
        .iter()
        .enumerate()
        .map(|(i, e)| WeightedPose { estimate: e.clone(), weight: 1.0, source: i })
        .collect();
    fuse_wavg(&weighted)
}

/// Weighted average of the successful estimates. Identical poses are returned as is.
pub fn fuse_wavg(estimates: &[WeightedPose]) -> Result<PoseSE3, FusionError> {
    let ok: Vec<&WeightedPose> = estimates.iter().filter(|e| e.estimate.is_success()).collect();
    if ok.is_empty() {
        return Err(FusionError::NoSuccessfulEstimates);
    }
    let weights = weights_or_uniform(ok.iter().map(|e| e.weight).collect());
    let (poses, weights): (Vec<PoseSE3>, Vec<f64>) =
        ok.iter().zip(weights).filter(|(_, w)| *w != 0.0).map(|(e, w)| (e.estimate.pose, w)).unzip();
    if poses.iter().all(|p| *p == poses[0]) {
        return Ok(poses[0]);
    }
    average_world_poses(&poses, &weights)
}

fn check_lengths(counts: &[usize], estimates: &[PoseEstimate]) -> Result<(), FusionError> {
    if counts.is_empty() {
        return Err(FusionError::Empty);
    }
    if counts.len() != estimates.len() {
        return Err(FusionError::LengthMismatch { counts: counts.len(), estimates: estimates.len() });
    }
    Ok(())
}

/// Index of the reference with the most matches; ties go to the lowest index.
pub fn maxf_index(counts: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &c) in counts.iter().enumerate() {
        if best.is_none_or(|b| c > counts[b]) {
            best = Some(i);
        }
    }
    best
}

/// The estimate of the reference with the most matches, whatever its status.
pub fn fuse_maxf(counts: &[usize], estimates: &[PoseEstimate]) -> Result<PoseEstimate, FusionError> {
    check_lengths(counts, estimates)?;
    Ok(estimates[maxf_index(counts).expect("non-empty")].clone())
}

/// Indices kept by the half-of-maximum rule among successful estimates.
pub fn rwavg_selection(counts: &[usize], estimates: &[PoseEstimate]) -> Vec<usize> {
    let ok: Vec<usize> = (0..counts.len()).filter(|&i| estimates[i].is_success()).collect();
    let kmax = ok.iter().map(|&i| counts[i]).max().unwrap_or(0) as f64;
    ok.into_iter().filter(|&i| counts[i] as f64 >= kmax / 2.0).collect()
}

/// Match-count weighted average over references with at least half the
/// maximum match count.
pub fn fuse_rwavg(counts: &[usize], estimates: &[PoseEstimate]) -> Result<PoseSE3, FusionError> {
    check_lengths(counts, estimates)?;
    let selected = rwavg_selection(counts, estimates);
    let weighted: Vec<WeightedPose> = selected
        .into_iter()
        .map(|i| WeightedPose { estimate: estimates[i].clone(), weight: counts[i] as f64, source: i })
        .collect();
    fuse_wavg(&weighted)
}
