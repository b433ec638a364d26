use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::PoseSE3;

/// Which estimator produced a pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Feature matching + PnP.
    Fb,
    /// Photometric grid search.
    Pm,
    /// Mutual-information grid search.
    Mi,
    /// Feature-based with mutual-information fallback.
    Hy,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fb, Method::Pm, Method::Mi, Method::Hy];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fb => "fb",
            Method::Pm => "pm",
            Method::Mi => "mi",
            Method::Hy => "hy",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fb" => Ok(Method::Fb),
            "pm" => Ok(Method::Pm),
            "mi" => Ok(Method::Mi),
            "hy" => Ok(Method::Hy),
            other => Err(format!("unknown method '{other}' (expected fb, pm, mi or hy)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    /// Fewer than four usable 2D-3D correspondences.
    InsufficientCorrespondences,
    /// No hypothesis gathered four inliers.
    NoConsensus,
    /// Grid search found no finite cost, or the best cost exceeded the acceptance ceiling.
    SearchDiverged,
    /// Every single-reference estimate feeding a fusion failed.
    NoSuccessfulEstimates,
}

impl FailureReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureReason::InsufficientCorrespondences => "insufficient_correspondences",
            FailureReason::NoConsensus => "no_consensus",
            FailureReason::SearchDiverged => "search_diverged",
            FailureReason::NoSuccessfulEstimates => "no_successful_estimates",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Success,
    Failure(FailureReason),
}

impl Status {
    pub fn is_success(&self) -> bool {
        matches!(self, Status::Success)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Success => "success",
            Status::Failure(r) => r.as_str(),
        }
    }
}

/// A pose estimate with its self-reported diagnostics.
///
/// `pose` is world-to-camera. On failure it holds the best available guess
/// (typically the reference pose) and must not be trusted.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: PoseSE3,
    pub method: Method,
    pub inlier_count: usize,
    pub final_cost: f64,
    pub status: Status,
    /// Set by the hybrid estimator when it fell back from the feature-based branch.
    pub fallback: Option<FailureReason>,
}

impl PoseEstimate {
    pub fn success(pose: PoseSE3, method: Method, inlier_count: usize, final_cost: f64) -> Self {
        Self { pose, method, inlier_count, final_cost, status: Status::Success, fallback: None }
    }

    pub fn failure(pose: PoseSE3, method: Method, reason: FailureReason) -> Self {
        Self {
            pose,
            method,
            inlier_count: 0,
            final_cost: f64::INFINITY,
            status: Status::Failure(reason),
            fallback: None,
        }
    }

    pub fn is_success(&self) -> bool {
        self.status.is_success()
    }
}
