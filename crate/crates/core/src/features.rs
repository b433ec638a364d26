//! Interest points, descriptors, ratio-test matching and 2D-3D assembly.
//!
//! The default detector finds scale-normalized minimum-eigenvalue corners
//! over a small Gaussian scale stack and describes them with an upright
//! 4×4×8 histogram of signed gradient orientations. Signed orientations mean
//! an intensity-inverted image does not match its original, which is the
//! behaviour the hybrid estimator relies on to detect feature failure.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Intrinsics;
use crate::imaging::{gaussian_blur_raw, GrayImage};
use crate::pnp::CorrespondenceSet2D3D;
use crate::scene::{lift_features, project_cloud, ReferenceTuple, SceneError};

/// Default Lowe ratio.
pub const DEFAULT_RATIO: f64 = 0.8;

const GRID: usize = 4;
const ORIENTATIONS: usize = 8;
pub const DESCRIPTOR_LEN: usize = GRID * GRID * ORIENTATIONS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("no 2D-2D matches to lift")]
    NoMatches,
    #[error("every match was dropped by the depth gate")]
    NoCorrespondences,
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub location: Vector2<f64>,
    pub scale: f64,
    pub response: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(pub Vec<f32>);

impl Descriptor {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn distance_squared(&self, other: &Descriptor) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| {
                let d = f64::from(*a) - f64::from(*b);
                d * d
            })
            .sum()
    }
}

/// Keypoints with one descriptor each, strongest response first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Features {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// Plug-in point for detector/descriptor pairs. Implementations must be deterministic.
pub trait FeatureDetector {
    fn detect_and_describe(&self, img: &GrayImage) -> Features;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Smoothing scale of the finest level, pixels.
    pub base_sigma: f64,
    /// Number of scale levels.
    pub levels: usize,
    /// Ratio between consecutive level scales.
    pub scale_ratio: f64,
    /// Structure-tensor window relative to the level scale.
    pub integration_factor: f64,
    /// Minimum scale-normalized minimum eigenvalue.
    pub threshold: f64,
    pub max_keypoints: usize,
    /// Descriptor half-width in units of the level scale.
    pub patch_factor: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            base_sigma: 1.0,
            levels: 3,
            scale_ratio: 1.6,
            integration_factor: 1.5,
            threshold: 2e-4,
            max_keypoints: 400,
            patch_factor: 5.0,
        }
    }
}

/// Multi-scale minimum-eigenvalue corners with upright gradient-histogram descriptors.
#[derive(Debug, Clone, Default)]
pub struct CornerDetector {
    pub config: DetectorConfig,
}

impl CornerDetector {
    pub fn new(config: DetectorConfig) -> Self {
        Self { config }
    }
}

struct Level {
    sigma: f64,
    gx: Vec<f64>,
    gy: Vec<f64>,
    response: Vec<f64>,
}

fn gradients(l: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let yu = y.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            gx[y * w + x] = (l[y * w + xr] - l[y * w + xl]) * 0.5;
            gy[y * w + x] = (l[yd * w + x] - l[yu * w + x]) * 0.5;
        }
    }
    (gx, gy)
}

impl CornerDetector {
    fn build_level(&self, img: &GrayImage, sigma: f64) -> Level {
        let (w, h) = (img.width(), img.height());
        let l = gaussian_blur_raw(img.data(), w, h, sigma);
        let (gx, gy) = gradients(&l, w, h);
        let xx: Vec<f64> = gx.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = gy.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a * b).collect();
        let s = sigma * self.config.integration_factor;
        let xx = gaussian_blur_raw(&xx, w, h, s);
        let yy = gaussian_blur_raw(&yy, w, h, s);
        let xy = gaussian_blur_raw(&xy, w, h, s);
        let norm = sigma * sigma;
        let response = (0..w * h)
            .map(|i| {
                let (a, b, c) = (xx[i], xy[i], yy[i]);
                let half_tr = 0.5 * (a + c);
                let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                (half_tr - disc) * norm
            })
            .collect();
        Level { sigma, gx, gy, response }
    }

    fn describe(&self, level: &Level, w: usize, h: usize, loc: &Vector2<f64>) -> Descriptor {
        let half = self.config.patch_factor * level.sigma;
        let r = half.ceil() as isize;
        let (cx, cy) = (loc.x.round() as isize, loc.y.round() as isize);
        let mut hist = [0.0f64; DESCRIPTOR_LEN];
        let two_var = 2.0 * half * half;
        let bin_width = std::f64::consts::TAU / ORIENTATIONS as f64;
        for y in (cy - r)..=(cy + r) {
            for x in (cx - r)..=(cx + r) {
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let (dx, dy) = (x as f64 - loc.x, y as f64 - loc.y);
                if dx.abs() >= half || dy.abs() >= half {
                    continue;
                }
                let i = y as usize * w + x as usize;
                let (gx, gy) = (level.gx[i], level.gy[i]);
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let weight = mag * (-(dx * dx + dy * dy) / two_var).exp();
                let col = (((dx + half) / (2.0 * half)) * GRID as f64) as usize;
                let row = (((dy + half) / (2.0 * half)) * GRID as f64) as usize;
                let cell = (row.min(GRID - 1) * GRID + col.min(GRID - 1)) * ORIENTATIONS;
                let angle = gy.atan2(gx).rem_euclid(std::f64::consts::TAU) / bin_width;
                let lo = angle.floor();
                let frac = angle - lo;
                let lo = lo as usize % ORIENTATIONS;
                let hi = (lo + 1) % ORIENTATIONS;
                hist[cell + lo] += weight * (1.0 - frac);
                hist[cell + hi] += weight * frac;
            }
        }
        normalize_clipped(&mut hist);
        Descriptor(hist.iter().map(|&v| v as f32).collect())
    }
}

fn normalize_clipped(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    v.iter_mut().for_each(|x| *x = (*x / norm).min(0.2));
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

impl FeatureDetector for CornerDetector {
    fn detect_and_describe(&self, img: &GrayImage) -> Features {
        let cfg = &self.config;
        let (w, h) = (img.width(), img.height());
        if w < 3 || h < 3 || cfg.levels == 0 {
            return Features::default();
        }
        let levels: Vec<Level> = (0..cfg.levels)
            .map(|i| self.build_level(img, cfg.base_sigma * cfg.scale_ratio.powi(i as i32)))
            .collect();

        // (response, level, y, x, refined location)
        let mut candidates: Vec<(f64, usize, usize, usize, Vector2<f64>)> = Vec::new();
        for (li, level) in levels.iter().enumerate() {
            let margin = (cfg.patch_factor * level.sigma).ceil() as usize + 1;
            if 2 * margin >= w || 2 * margin >= h {
                continue;
            }
            let resp = &level.response;
            for y in margin..h - margin {
                for x in margin..w - margin {
                    let i = y * w + x;
                    let r = resp[i];
                    if r <= cfg.threshold || !img.is_valid(x, y) {
                        continue;
                    }
                    if !is_spatial_max(resp, w, x, y) {
                        continue;
                    }
                    let dominated = [li.checked_sub(1), (li + 1 < levels.len()).then_some(li + 1)]
                        .into_iter()
                        .flatten()
                        .any(|other| {
                            let o = &levels[other].response;
                            (y - 1..=y + 1).any(|yy| (x - 1..=x + 1).any(|xx| o[yy * w + xx] > r))
                        });
                    if dominated {
                        continue;
                    }
                    let ox = parabola_offset(resp[i - 1], r, resp[i + 1]);
                    let oy = parabola_offset(resp[i - w], r, resp[i + w]);
                    candidates.push((r, li, y, x, Vector2::new(x as f64 + ox, y as f64 + oy)));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
        candidates.truncate(cfg.max_keypoints);

        let mut features = Features::default();
        for (response, li, _, _, location) in candidates {
            let level = &levels[li];
            features.descriptors.push(self.describe(level, w, h, &location));
            features.keypoints.push(Keypoint { location, scale: level.sigma, response });
        }
        features
    }
}

/// Strict maximum over earlier raster neighbours, non-strict over later ones,
/// so plateaus yield exactly one winner.
fn is_spatial_max(resp: &[f64], w: usize, x: usize, y: usize) -> bool {
    let r = resp[y * w + x];
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let n = resp[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
            let earlier = dy < 0 || (dy == 0 && dx < 0);
            if (earlier && n >= r) || (!earlier && n > r) {
                return false;
            }
        }
    }
    true
}

fn parabola_offset(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

/// One accepted query→reference match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match2D2D {
    pub query_index: usize,
    pub reference_index: usize,
    pub query_pixel: Vector2<f64>,
    pub reference_pixel: Vector2<f64>,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet2D2D {
    pub matches: Vec<Match2D2D>,
}

impl MatchSet2D2D {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// Index pairs `(query, reference, distance)` accepted by the ratio test.
///
/// Exhaustive Euclidean search; the nearest reference is accepted iff
/// `d1 < ratio · d2`. Equal distances resolve to the lower reference index.
/// With a single reference descriptor there is no second neighbour and the
/// nearest is accepted.
pub fn match_ratio(qd: &[Descriptor], rd: &[Descriptor], ratio: f64) -> Vec<(usize, usize, f64)> {
    let ratio_sq = ratio * ratio;
    let mut out = Vec::new();
    for (qi, q) in qd.iter().enumerate() {
        let mut best = (f64::INFINITY, usize::MAX);
        let mut second = f64::INFINITY;
        for (ri, r) in rd.iter().enumerate() {
            let d = q.distance_squared(r);
            if d < best.0 {
                second = best.0;
                best = (d, ri);
            } else if d < second {
                second = d;
            }
        }
        if best.1 == usize::MAX {
            continue;
        }
        if best.0 < ratio_sq * second || (second.is_infinite() && best.0.is_finite()) {
            out.push((qi, best.1, best.0.sqrt()));
        }
    }
    out
}

/// Ratio-test matching of two feature sets, producing pixel pairs.
pub fn match_features(query: &Features, reference: &Features, ratio: f64) -> MatchSet2D2D {
    let matches = match_ratio(&query.descriptors, &reference.descriptors, ratio)
        .into_iter()
        .map(|(qi, ri, distance)| Match2D2D {
            query_index: qi,
            reference_index: ri,
            query_pixel: query.keypoints[qi].location,
            reference_pixel: reference.keypoints[ri].location,
            distance,
        })
        .collect();
    MatchSet2D2D { matches }
}

/// Lifts the reference side of each match to a point in the reference camera
/// frame, pairing it with the query pixel.
pub fn build_2d3d(
    matches: &MatchSet2D2D,
    reference: &ReferenceTuple,
    k: &Intrinsics,
    gate: f64,
) -> Result<CorrespondenceSet2D3D, FeatureError> {
    if matches.is_empty() {
        return Err(FeatureError::NoMatches);
    }
    let projections = project_cloud(
        &reference.cloud,
        k,
        &reference.pose,
        reference.image.width(),
        reference.image.height(),
    );
    let pixels: Vec<Vector2<f64>> = matches.matches.iter().map(|m| m.reference_pixel).collect();
    let lifted = match lift_features(&pixels, &projections, k, gate) {
        Ok(l) => l,
        Err(SceneError::NoProjections) => return Err(FeatureError::NoCorrespondences),
        Err(e) => return Err(e.into()),
    };
    if lifted.is_empty() {
        return Err(FeatureError::NoCorrespondences);
    }
    let mut set = CorrespondenceSet2D3D::default();
    for (i, point) in lifted {
        set.push(matches.matches[i].query_pixel, point);
    }
    Ok(set)
}
