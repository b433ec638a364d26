//! Direct pose search: coarse-to-fine grids over camera-plane translation and
//! then yaw, scoring rendered views against the query with a photometric or
//! mutual-information cost.

use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::{FailureReason, Method, PoseEstimate};
use crate::geometry::{axis_rotation, Axis, Intrinsics, PoseSE3};
use crate::imaging::{gaussian_smooth, nmi, robust_rse, GrayImage, DEFAULT_BINS};
use crate::scene::{colorize, render, ColoredPointCloud, ReferenceTuple, DEFAULT_SPLAT_RADIUS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DirectError {
    #[error("every grid cell had infinite cost")]
    AllInfinite,
    #[error("invalid grid configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// Median-trimmed squared intensity error.
    Photometric,
    /// `1 − NMI`.
    MutualInformation,
}

impl CostKind {
    pub fn method(self) -> Method {
        match self {
            CostKind::Photometric => Method::Pm,
            CostKind::MutualInformation => Method::Mi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSearchConfig {
    /// Half-width of the translation grid, meters.
    pub extent: f64,
    pub step1: f64,
    pub step2: f64,
    /// Coarse yaw half-range, degrees.
    pub alpha1: f64,
    /// Fine yaw half-range, degrees.
    pub alpha2: f64,
    /// Yaw samples per side; each yaw pass evaluates `2N − 1` angles.
    pub steps_per_side: usize,
    /// Camera-frame axes spanned by the translation grid.
    pub translation_axes: [Axis; 2],
    /// Camera-frame axis for yaw.
    pub yaw_axis: Axis,
    /// Gaussian sigma applied to query and rendered view before scoring.
    pub smoothing_sigma: f64,
    pub bins: usize,
    pub splat_radius: usize,
    /// Minimum jointly valid fraction of image pixels; below it the cost is infinite.
    pub min_overlap: f64,
    /// Acceptance ceilings on the final cost.
    pub mi_ceiling: f64,
    pub rse_ceiling: f64,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        Self {
            extent: 15.0,
            step1: 1.0,
            step2: 0.2,
            alpha1: 10.0,
            alpha2: 2.0,
            steps_per_side: 5,
            translation_axes: [Axis::X, Axis::Z],
            yaw_axis: Axis::Y,
            smoothing_sigma: 2.0,
            bins: DEFAULT_BINS,
            splat_radius: DEFAULT_SPLAT_RADIUS,
            min_overlap: 0.25,
            mi_ceiling: 0.9,
            rse_ceiling: 0.01,
        }
    }
}

impl GridSearchConfig {
    pub fn validate(&self) -> Result<(), DirectError> {
        if !(self.step2 > 0.0 && self.step2 < self.step1 && self.step1 <= self.extent) {
            return Err(DirectError::InvalidConfig("need 0 < step2 < step1 <= extent"));
        }
        if !(self.alpha2 > 0.0 && self.alpha2 < self.alpha1) {
            return Err(DirectError::InvalidConfig("need 0 < alpha2 < alpha1"));
        }
        if self.steps_per_side < 2 {
            return Err(DirectError::InvalidConfig("need at least 2 yaw steps per side"));
        }
        if self.translation_axes[0] == self.translation_axes[1] {
            return Err(DirectError::InvalidConfig("translation axes must differ"));
        }
        if self.bins < 2 {
            return Err(DirectError::InvalidConfig("need at least 2 bins"));
        }
        Ok(())
    }

    pub fn ceiling(&self, kind: CostKind) -> f64 {
        match kind {
            CostKind::Photometric => self.rse_ceiling,
            CostKind::MutualInformation => self.mi_ceiling,
        }
    }

    /// Angular resolution of the fine yaw pass, degrees.
    pub fn fine_yaw_step(&self) -> f64 {
        self.alpha2 / (self.steps_per_side - 1) as f64
    }
}

/// Moves the camera by `offset` expressed in its own frame.
pub fn offset_pose(m: &PoseSE3, offset: &Vector3<f64>) -> PoseSE3 {
    PoseSE3::new(*m.rotation(), m.translation() - offset).expect("rotation unchanged")
}

/// Rotates the camera about one of its own axes, keeping its center fixed.
pub fn yaw_pose(m: &PoseSE3, axis: Axis, degrees: f64) -> PoseSE3 {
    let r = axis_rotation(axis, degrees);
    PoseSE3::with_tolerance(r * m.rotation(), r * m.translation(), 1e-6).expect("product of rotations")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    CoarseTranslation,
    FineTranslation,
    CoarseYaw,
    FineYaw,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::CoarseTranslation => "coarse_translation",
            Stage::FineTranslation => "fine_translation",
            Stage::CoarseYaw => "coarse_yaw",
            Stage::FineYaw => "fine_yaw",
        }
    }
}

/// One cost evaluation. Translation stages fill `a`/`b` (meters along the
/// two grid axes); yaw stages fill `yaw` (degrees).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub stage: Stage,
    pub a: f64,
    pub b: f64,
    pub yaw: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchTrace {
    pub entries: Vec<TraceEntry>,
}

impl SearchTrace {
    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(move |e| e.stage == stage)
    }

    /// CSV with header `stage,offset_a,offset_b,yaw_deg,cost`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["stage", "offset_a", "offset_b", "yaw_deg", "cost"])?;
        for e in &self.entries {
            w.write_record([
                e.stage.as_str().to_string(),
                format!("{}", e.a),
                format!("{}", e.b),
                format!("{}", e.yaw),
                format!("{}", e.cost),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores poses against a fixed query, caching the smoothed query.
pub struct CostEvaluator<'a> {
    kind: CostKind,
    query: GrayImage,
    cloud: &'a ColoredPointCloud,
    k: Intrinsics,
    cfg: GridSearchConfig,
}

impl<'a> CostEvaluator<'a> {
    pub fn new(
        kind: CostKind,
        query: &GrayImage,
        cloud: &'a ColoredPointCloud,
        k: &Intrinsics,
        cfg: &GridSearchConfig,
    ) -> Self {
        Self { kind, query: gaussian_smooth(query, cfg.smoothing_sigma), cloud, k: *k, cfg: *cfg }
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    /// Cost of the view rendered at `m`; `+∞` when the overlap is too small
    /// or the comparison is undefined.
    pub fn cost(&self, m: &PoseSE3) -> f64 {
        let (w, h) = (self.query.width(), self.query.height());
        let view = render(self.cloud, &self.k, m, w, h, self.cfg.splat_radius);
        let overlap = view.image.mask().iter().zip(self.query.mask()).filter(|(a, b)| **a && **b).count();
        if overlap == 0 || (overlap as f64) < self.cfg.min_overlap * (w * h) as f64 {
            return f64::INFINITY;
        }
        let view = gaussian_smooth(&view.image, self.cfg.smoothing_sigma);
        let cost = match self.kind {
            CostKind::Photometric => robust_rse(&self.query, &view),
            CostKind::MutualInformation => nmi(&self.query, &view, self.cfg.bins).map(|v| 1.0 - v),
        };
        match cost {
            Ok(c) if c.is_finite() => c.max(0.0),
            _ => f64::INFINITY,
        }
    }
}

/// Cost of the view rendered at `m` against `query`.
pub fn evaluate_cost(
    kind: CostKind,
    query: &GrayImage,
    cloud: &ColoredPointCloud,
    k: &Intrinsics,
    m: &PoseSE3,
    cfg: &GridSearchConfig,
) -> f64 {
    CostEvaluator::new(kind, query, cloud, k, cfg).cost(m)
}

fn lattice(center: f64, step: f64, n: i64) -> Vec<f64> {
    (-n..=n).map(|i| center + i as f64 * step).collect()
}

fn grid_offset(cfg: &GridSearchConfig, a: f64, b: f64) -> Vector3<f64> {
    let mut d = Vector3::zeros();
    d[cfg.translation_axes[0].index()] = a;
    d[cfg.translation_axes[1].index()] = b;
    d
}

/// Evaluates a 2D translation lattice and returns `(a, b, cost)` of the
/// first minimum in lexicographic order.
fn translation_pass(
    eval: &CostEvaluator,
    m0: &PoseSE3,
    axis_a: &[f64],
    axis_b: &[f64],
    stage: Stage,
    trace: &mut SearchTrace,
) -> (f64, f64, f64) {
    let mut best = (0.0, 0.0, f64::INFINITY);
    for &a in axis_a {
        for &b in axis_b {
            let cost = eval.cost(&offset_pose(m0, &grid_offset(&eval.cfg, a, b)));
            trace.entries.push(TraceEntry { stage, a, b, yaw: 0.0, cost });
            if cost < best.2 {
                best = (a, b, cost);
            }
        }
    }
    best
}

/// Coarse-to-fine search over the two configured camera axes around `m0`.
/// Returns the best pose and its cost.
pub fn coarse_to_fine_translation(
    eval: &CostEvaluator,
    m0: &PoseSE3,
    trace: &mut SearchTrace,
) -> Result<(PoseSE3, f64), DirectError> {
    let cfg = eval.cfg;
    cfg.validate()?;
    let n1 = (cfg.extent / cfg.step1).round() as i64;
    let coarse = lattice(0.0, cfg.step1, n1);
    let (ca, cb, cc) = translation_pass(eval, m0, &coarse, &coarse, Stage::CoarseTranslation, trace);
    if !cc.is_finite() {
        return Err(DirectError::AllInfinite);
    }
    let n2 = (cfg.step1 / cfg.step2).round() as i64;
    let (fa, fb, fc) = translation_pass(
        eval,
        m0,
        &lattice(ca, cfg.step2, n2),
        &lattice(cb, cfg.step2, n2),
        Stage::FineTranslation,
        trace,
    );
    Ok((offset_pose(m0, &grid_offset(&cfg, fa, fb)), fc))
}

fn yaw_pass(
    eval: &CostEvaluator,
    m1: &PoseSE3,
    angles: &[f64],
    stage: Stage,
    trace: &mut SearchTrace,
) -> (f64, f64) {
    let mut best = (0.0, f64::INFINITY);
    for &yaw in angles {
        let cost = eval.cost(&yaw_pose(m1, eval.cfg.yaw_axis, yaw));
        trace.entries.push(TraceEntry { stage, a: 0.0, b: 0.0, yaw, cost });
        if cost < best.1 {
            best = (yaw, cost);
        }
    }
    best
}

/// Coarse-to-fine yaw search about the configured axis through the camera center of `m1`.
pub fn coarse_to_fine_yaw(
    eval: &CostEvaluator,
    m1: &PoseSE3,
    trace: &mut SearchTrace,
) -> Result<(PoseSE3, f64), DirectError> {
    let cfg = eval.cfg;
    cfg.validate()?;
    let n = cfg.steps_per_side as i64 - 1;
    let coarse = lattice(0.0, cfg.alpha1 / n as f64, n);
    let (cy, cc) = yaw_pass(eval, m1, &coarse, Stage::CoarseYaw, trace);
    if !cc.is_finite() {
        return Err(DirectError::AllInfinite);
    }
    let (fy, fc) = yaw_pass(eval, m1, &lattice(cy, cfg.fine_yaw_step(), n), Stage::FineYaw, trace);
    Ok((yaw_pose(m1, cfg.yaw_axis, fy), fc))
}

/// Full direct estimate with its search trace.
pub fn estimate_direct_traced(
    kind: CostKind,
    query: &GrayImage,
    reference: &ReferenceTuple,
    k: &Intrinsics,
    cfg: &GridSearchConfig,
) -> (PoseEstimate, SearchTrace) {
    let method = kind.method();
    let mut trace = SearchTrace::default();
    let fail = |pose| PoseEstimate::failure(pose, method, FailureReason::SearchDiverged);
    let Ok(cloud) = colorize(reference, k) else {
        return (fail(reference.pose), trace);
    };
    let eval = CostEvaluator::new(kind, query, &cloud, k, cfg);
    let Ok((m1, _)) = coarse_to_fine_translation(&eval, &reference.pose, &mut trace) else {
        return (fail(reference.pose), trace);
    };
    let Ok((m2, cost)) = coarse_to_fine_yaw(&eval, &m1, &mut trace) else {
        return (fail(m1), trace);
    };
    if cost > cfg.ceiling(kind) {
        let mut est = fail(m2);
        est.final_cost = cost;
        return (est, trace);
    }
    (PoseEstimate::success(m2, method, 0, cost), trace)
}

/// Colorizes the reference cloud, searches translation then yaw starting at
/// the reference pose, and applies the acceptance ceiling.
pub fn estimate_direct(
    kind: CostKind,
    query: &GrayImage,
    reference: &ReferenceTuple,
    k: &Intrinsics,
    cfg: &GridSearchConfig,
) -> PoseEstimate {
    estimate_direct_traced(kind, query, reference, k, cfg).0
}
