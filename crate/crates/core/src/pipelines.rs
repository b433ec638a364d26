//! End-to-end estimators and the single-, multi- and large-uncertainty
//! reference runs.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::direct::{estimate_direct, CostKind, GridSearchConfig};
use crate::estimate::{FailureReason, Method, PoseEstimate, Status};
use crate::features::{
    build_2d3d, match_features, CornerDetector, DetectorConfig, FeatureDetector, Features, DEFAULT_RATIO,
};
use crate::fusion::{fuse_avg, fuse_maxf, fuse_rwavg, fuse_wavg, FusionStrategy, WeightedPose};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::harness::dataset::Dataset;
use crate::harness::metrics::{max_orientation_error, translation_error};
use crate::imaging::GrayImage;
use crate::pnp::{mlesac_pnp, RansacConfig};
use crate::retrieval::{InvertedIndex, RetrievalError};
use crate::scene::{ReferenceTuple, DEFAULT_LIFT_GATE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("no reference within {radius} m of the query")]
    NoReferenceInRadius { radius: f64 },
    #[error("retrieval index is empty")]
    EmptyIndex,
    #[error("no retrieval candidates")]
    NoCandidates,
}

impl From<RetrievalError> for PipelineError {
    fn from(_: RetrievalError) -> Self {
        PipelineError::EmptyIndex
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub detector: DetectorConfig,
    /// Lowe ratio for descriptor matching.
    pub ratio: f64,
    /// Pixel gate for lifting reference keypoints onto the cloud.
    pub lift_gate: f64,
    pub ransac: RansacConfig,
    pub grid: GridSearchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            ratio: DEFAULT_RATIO,
            lift_gate: DEFAULT_LIFT_GATE,
            ransac: RansacConfig::default(),
            grid: GridSearchConfig::default(),
        }
    }
}

/// Feature-based estimate plus the number of 2D-2D matches behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct FbOutcome {
    pub estimate: PoseEstimate,
    pub match_count: usize,
}

/// Matches precomputed features, lifts the reference side, solves PnP and
/// composes the relative pose with the reference pose.
pub fn estimate_fb_features(
    query: &Features,
    reference_features: &Features,
    reference: &ReferenceTuple,
    k: &Intrinsics,
    cfg: &PipelineConfig,
) -> FbOutcome {
    let matches = match_features(query, reference_features, cfg.ratio);
    let match_count = matches.len();
    let corrs = match build_2d3d(&matches, reference, k, cfg.lift_gate) {
        Ok(c) => c,
        Err(_) => {
            let estimate =
                PoseEstimate::failure(reference.pose, Method::Fb, FailureReason::InsufficientCorrespondences);
            return FbOutcome { estimate, match_count };
        }
    };
    let mut estimate = mlesac_pnp(&corrs, k, &cfg.ransac);
    estimate.pose = if estimate.is_success() { estimate.pose.compose(&reference.pose) } else { reference.pose };
    FbOutcome { estimate, match_count }
}

pub fn estimate_fb(query: &GrayImage, reference: &ReferenceTuple, k: &Intrinsics, cfg: &PipelineConfig) -> PoseEstimate {
    let detector = CornerDetector::new(cfg.detector);
    let qf = detector.detect_and_describe(query);
    let rf = detector.detect_and_describe(&reference.image);
    estimate_fb_features(&qf, &rf, reference, k, cfg).estimate
}

pub fn estimate_pm(query: &GrayImage, reference: &ReferenceTuple, k: &Intrinsics, cfg: &PipelineConfig) -> PoseEstimate {
    estimate_direct(CostKind::Photometric, query, reference, k, &cfg.grid)
}

pub fn estimate_mi(query: &GrayImage, reference: &ReferenceTuple, k: &Intrinsics, cfg: &PipelineConfig) -> PoseEstimate {
    estimate_direct(CostKind::MutualInformation, query, reference, k, &cfg.grid)
}

/// The hybrid branch rule: keep a successful FB estimate, otherwise take the
/// MI estimate and record why FB was abandoned.
pub fn hybrid_from(fb: PoseEstimate, mi: impl FnOnce() -> PoseEstimate) -> PoseEstimate {
    match fb.status {
        Status::Success => PoseEstimate { method: Method::Hy, ..fb },
        Status::Failure(reason) => {
            PoseEstimate { method: Method::Hy, fallback: Some(reason), ..mi() }
        }
    }
}

pub fn estimate_hybrid(
    query: &GrayImage,
    reference: &ReferenceTuple,
    k: &Intrinsics,
    cfg: &PipelineConfig,
) -> PoseEstimate {
    hybrid_from(estimate_fb(query, reference, k, cfg), || estimate_mi(query, reference, k, cfg))
}

/// A query image with its features and, for evaluation, its ground truth.
#[derive(Debug, Clone)]
pub struct Query {
    /// Cache key; two queries with the same key must have the same image.
    pub key: String,
    pub image: GrayImage,
    pub features: Features,
    pub truth: PoseSE3,
    /// Ground position used for radius filtering.
    pub position: Vector2<f64>,
}

/// Outcome of one run for one query and method.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub fusion: Option<FusionStrategy>,
    pub references: Vec<usize>,
    pub estimate: PoseEstimate,
    pub translation_error: f64,
    pub orientation_error: f64,
    /// Fewer references than requested were available.
    pub degraded: bool,
}

impl RunRecord {
    fn new(
        query: &Query,
        method: Method,
        fusion: Option<FusionStrategy>,
        references: Vec<usize>,
        estimate: PoseEstimate,
        degraded: bool,
    ) -> Self {
        Self {
            method,
            fusion,
            references,
            translation_error: translation_error(&query.truth, &estimate.pose),
            orientation_error: max_orientation_error(&query.truth, &estimate.pose),
            estimate,
            degraded,
        }
    }

    pub fn is_success(&self, threshold: f64) -> bool {
        self.estimate.is_success() && self.translation_error <= threshold
    }
}

type CacheKey = (String, usize, Method);

/// Runs estimators against the frames of a dataset, caching reference
/// features and per-(query, reference, method) estimates.
pub struct Localizer<'d> {
    dataset: &'d Dataset,
    cfg: PipelineConfig,
    detector: CornerDetector,
    features: Vec<OnceLock<Features>>,
    cache: Mutex<HashMap<CacheKey, (PoseEstimate, usize)>>,
}

impl<'d> Localizer<'d> {
    pub fn new(dataset: &'d Dataset, cfg: PipelineConfig) -> Self {
        Self {
            dataset,
            cfg,
            detector: CornerDetector::new(cfg.detector),
            features: (0..dataset.len()).map(|_| OnceLock::new()).collect(),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn detector(&self) -> &CornerDetector {
        &self.detector
    }

    pub fn reference_features(&self, frame: usize) -> &Features {
        self.features[frame].get_or_init(|| self.detector.detect_and_describe(&self.dataset.frames[frame].image))
    }

    /// Builds a query from an arbitrary image.
    pub fn query(&self, key: String, image: GrayImage, truth: PoseSE3, position: Vector2<f64>) -> Query {
        let features = self.detector.detect_and_describe(&image);
        Query { key, image, features, truth, position }
    }

    /// Builds a query from a dataset frame, optionally transforming its image.
    pub fn query_from_frame(&self, frame: usize, transform: Option<(&str, &dyn Fn(&GrayImage) -> GrayImage)>) -> Query {
        let f = &self.dataset.frames[frame];
        match transform {
            None => Query {
                key: format!("frame{frame}"),
                image: f.image.clone(),
                features: self.reference_features(frame).clone(),
                truth: f.pose,
                position: self.dataset.position(frame),
            },
            Some((tag, apply)) => {
                self.query(format!("frame{frame}/{tag}"), apply(&f.image), f.pose, self.dataset.position(frame))
            }
        }
    }

    fn cached(&self, key: CacheKey, compute: impl FnOnce() -> (PoseEstimate, usize)) -> (PoseEstimate, usize) {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return hit.clone();
        }
        let value = compute();
        self.cache.lock().expect("cache lock").insert(key, value.clone());
        value
    }

    fn fb(&self, q: &Query, frame: usize) -> (PoseEstimate, usize) {
        self.cached((q.key.clone(), frame, Method::Fb), || {
            let r = &self.dataset.frames[frame];
            let out =
                estimate_fb_features(&q.features, self.reference_features(frame), r, &self.dataset.intrinsics, &self.cfg);
            (out.estimate, out.match_count)
        })
    }

    /// Estimate of `method` against one reference frame, with the feature
    /// match count used for fusion weights.
    pub fn estimate(&self, q: &Query, frame: usize, method: Method) -> (PoseEstimate, usize) {
        let (fb, matches) = self.fb(q, frame);
        let r = &self.dataset.frames[frame];
        let k = &self.dataset.intrinsics;
        let direct = |kind: CostKind| {
            self.cached((q.key.clone(), frame, kind.method()), || {
                (estimate_direct(kind, &q.image, r, k, &self.cfg.grid), matches)
            })
            .0
        };
        let est = match method {
            Method::Fb => fb,
            Method::Pm => direct(CostKind::Photometric),
            Method::Mi => direct(CostKind::MutualInformation),
            Method::Hy => hybrid_from(fb, || direct(CostKind::MutualInformation)),
        };
        (est, matches)
    }

    /// Reference frames from `pool` whose ground position lies within `radius` of the query.
    pub fn candidates(&self, q: &Query, pool: &[usize], radius: f64) -> Vec<usize> {
        pool.iter().copied().filter(|&f| (self.dataset.position(f) - q.position).norm() <= radius).collect()
    }

    /// One reference drawn uniformly from those within `radius`.
    pub fn run_single_reference(
        &self,
        q: &Query,
        pool: &[usize],
        radius: f64,
        method: Method,
        seed: u64,
    ) -> Result<RunRecord, PipelineError> {
        let cands = self.candidates(q, pool, radius);
        if cands.is_empty() {
            return Err(PipelineError::NoReferenceInRadius { radius });
        }
        let frame = draw(cands, 1, seed)[0];
        let (est, _) = self.estimate(q, frame, method);
        Ok(RunRecord::new(q, method, None, vec![frame], est, false))
    }

    /// `k` references drawn without replacement from those within `radius`, then fused.
    #[allow(clippy::too_many_arguments)]
    pub fn run_multi_reference(
        &self,
        q: &Query,
        pool: &[usize],
        radius: f64,
        method: Method,
        k: usize,
        fusion: FusionStrategy,
        seed: u64,
    ) -> Result<RunRecord, PipelineError> {
        let cands = self.candidates(q, pool, radius);
        if cands.is_empty() {
            return Err(PipelineError::NoReferenceInRadius { radius });
        }
        let take = k.max(1).min(cands.len());
        let frames = draw(cands, take, seed);
        let est = self.fuse(q, &frames, method, fusion);
        Ok(RunRecord::new(q, method, Some(fusion), frames, est, take < k))
    }

    /// Radius filter (when `radius` is given), retrieval of the top `k`
    /// candidates, per-reference estimates and fusion.
    #[allow(clippy::too_many_arguments)]
    pub fn run_large_uncertainty(
        &self,
        q: &Query,
        pool: &[usize],
        index: &InvertedIndex,
        radius: Option<f64>,
        method: Method,
        k: usize,
        fusion: FusionStrategy,
    ) -> Result<RunRecord, PipelineError> {
        if index.is_empty() {
            return Err(PipelineError::EmptyIndex);
        }
        let allowed = match radius {
            Some(r) => self.candidates(q, pool, r),
            None => pool.to_vec(),
        };
        let words = index.vocabulary().words(&q.features.descriptors);
        let frames: Vec<usize> = index
            .rank_words(&words)?
            .into_iter()
            .map(|(id, _)| id)
            .filter(|id| allowed.contains(id))
            .take(k.max(1))
            .collect();
        if frames.is_empty() {
            return Err(PipelineError::NoCandidates);
        }
        let est = self.fuse(q, &frames, method, fusion);
        let degraded = frames.len() < k;
        Ok(RunRecord::new(q, method, Some(fusion), frames, est, degraded))
    }

    fn fuse(&self, q: &Query, frames: &[usize], method: Method, fusion: FusionStrategy) -> PoseEstimate {
        let results: Vec<(PoseEstimate, usize)> = frames.iter().map(|&f| self.estimate(q, f, method)).collect();
        fuse_estimates(&results, method, fusion)
    }
}

/// The first `k` frames of a seeded shuffle, so smaller draws are prefixes of larger ones.
fn draw(mut frames: Vec<usize>, k: usize, seed: u64) -> Vec<usize> {
    frames.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    frames.truncate(k);
    frames
}

/// Fuses `(estimate, match count)` pairs. A single estimate is returned
/// unchanged, so one-reference runs agree with single-reference runs.
pub fn fuse_estimates(results: &[(PoseEstimate, usize)], method: Method, fusion: FusionStrategy) -> PoseEstimate {
    let estimates: Vec<PoseEstimate> = results.iter().map(|(e, _)| e.clone()).collect();
    let counts: Vec<usize> = results.iter().map(|(_, c)| *c).collect();
    if estimates.len() == 1 {
        return estimates[0].clone();
    }
    let fallback_pose = estimates.first().map_or(PoseSE3::identity(), |e| e.pose);
    let pose = match fusion {
        FusionStrategy::Maxf => return fuse_maxf(&counts, &estimates).expect("lengths match"),
        FusionStrategy::Avg => fuse_avg(&estimates),
        FusionStrategy::Wavg => {
            let weighted: Vec<WeightedPose> = estimates
                .iter()
                .zip(&counts)
                .enumerate()
                .map(|(i, (e, c))| WeightedPose { estimate: e.clone(), weight: *c as f64, source: i })
                .collect();
            fuse_wavg(&weighted)
        }
        FusionStrategy::Rwavg => fuse_rwavg(&counts, &estimates),
    };
    match pose {
        Ok(pose) => {
            let ok: Vec<&PoseEstimate> = estimates.iter().filter(|e| e.is_success()).collect();
            let inliers = ok.iter().map(|e| e.inlier_count).sum();
            let cost = ok.iter().map(|e| e.final_cost).sum::<f64>() / ok.len() as f64;
            let mut fused = PoseEstimate::success(pose, method, inliers, cost);
            fused.fallback = ok.iter().find_map(|e| e.fallback);
            fused
        }
        Err(_) => PoseEstimate::failure(fallback_pose, method, FailureReason::NoSuccessfulEstimates),
    }
}
