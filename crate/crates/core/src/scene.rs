//! Point clouds, colorization from a reference image, z-buffered splat
//! rendering of synthetic views, and 2D→3D lifting of reference features.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{backproject, Intrinsics, PoseSE3};
use crate::imaging::{sample_bicubic, GrayImage};

/// Default splat disc radius in pixels.
pub const DEFAULT_SPLAT_RADIUS: usize = 1;
/// Default pixel gate for feature-to-projection association.
pub const DEFAULT_LIFT_GATE: f64 = 3.0;
/// Sentinel for pixels no point landed on.
pub const NO_POINT: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("no cloud point projects into the reference image")]
    EmptyResult,
    #[error("no projections to associate features with")]
    NoProjections,
    #[error("{points} points but {intensities} intensities")]
    LengthMismatch { points: usize, intensities: usize },
    #[error("non-finite point coordinate at index {0}")]
    NonFinite(usize),
}

/// World-frame points in meters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, SceneError> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(SceneError::NonFinite(i));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// World-frame points with one intensity each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ColoredPointCloud {
    points: Vec<Vector3<f64>>,
    intensities: Vec<f64>,
}

impl ColoredPointCloud {
    pub fn new(points: Vec<Vector3<f64>>, intensities: Vec<f64>) -> Result<Self, SceneError> {
        if points.len() != intensities.len() {
            return Err(SceneError::LengthMismatch { points: points.len(), intensities: intensities.len() });
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(SceneError::NonFinite(i));
        }
        let intensities = intensities.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self { points, intensities })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A reference image, its registered world-frame cloud, and its
/// world-to-camera pose.
#[derive(Debug, Clone)]
pub struct ReferenceTuple {
    pub id: usize,
    pub image: GrayImage,
    pub cloud: PointCloud,
    pub pose: PoseSE3,
}

/// A rendered view: intensities with a validity mask plus a depth buffer.
#[derive(Debug, Clone)]
pub struct SyntheticView {
    pub image: GrayImage,
    /// Per-pixel depth in meters, `f64::INFINITY` where nothing was drawn.
    pub depth: Vec<f64>,
    /// Index of the point that won each pixel, [`NO_POINT`] where nothing was drawn.
    pub source: Vec<u32>,
}

/// A cloud point that lands inside an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub index: usize,
}

#[inline]
fn pixel_in_bounds(p: &Vector2<f64>, width: usize, height: usize) -> bool {
    p.x >= -0.5 && p.y >= -0.5 && p.x < width as f64 - 0.5 && p.y < height as f64 - 0.5
}

/// Projects every point with positive depth that lands inside a `width × height` image.
pub fn project_cloud(
    cloud: &PointCloud,
    k: &Intrinsics,
    m: &PoseSE3,
    width: usize,
    height: usize,
) -> Vec<Projection> {
    cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(index, p)| {
            let c = m.transform(p);
            let pixel = k.project_camera(&c).ok()?;
            pixel_in_bounds(&pixel, width, height).then_some(Projection { pixel, depth: c.z, index })
        })
        .collect()
}

/// Assigns each cloud point the bicubic intensity of the reference image at
/// its projection. Points outside the interpolation domain or behind the
/// camera are dropped; occlusion is not tested.
pub fn colorize(reference: &ReferenceTuple, k: &Intrinsics) -> Result<ColoredPointCloud, SceneError> {
    if reference.cloud.is_empty() {
        return Err(SceneError::EmptyCloud);
    }
    let img = &reference.image;
    let mut points = Vec::new();
    let mut intensities = Vec::new();
    for p in &reference.cloud.points {
        let Ok(pixel) = k.project_camera(&reference.pose.transform(p)) else {
            continue;
        };
        if let Ok(v) = sample_bicubic(img, &pixel) {
            points.push(*p);
            intensities.push(v);
        }
    }
    if points.is_empty() {
        return Err(SceneError::EmptyResult);
    }
    Ok(ColoredPointCloud { points, intensities })
}

/// Relative depth band treated as one surface when resolving splat overlaps.
pub const SURFACE_DEPTH_BAND: f64 = 0.1;

/// Renders a colored cloud at pose `m`.
///
/// Each point covers the disc of integer offsets `dx² + dy² ≤ r²` around its
/// rounded pixel. A first pass finds the nearest depth per pixel. Among the
/// points within [`SURFACE_DEPTH_BAND`] of it, the one projecting closest to
/// the pixel center wins; remaining ties go to the smaller depth, then the
/// lower point index.
pub fn render(
    cloud: &ColoredPointCloud,
    k: &Intrinsics,
    m: &PoseSE3,
    width: usize,
    height: usize,
    splat_radius: usize,
) -> SyntheticView {
    let n = width * height;
    let r = splat_radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let (w, h) = (width as isize, height as isize);
    let rot = m.rotation();
    let t = m.translation();
    let splats: Vec<(u32, Vector2<f64>, f64)> = cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let c = rot * p + t;
            if c.z <= 0.0 {
                return None;
            }
            let pixel = k.project_camera(&c).ok()?;
            let (u, v) = (pixel.x.round(), pixel.y.round());
            let inside = u >= -(r as f64) && v >= -(r as f64) && u <= (w + r) as f64 && v <= (h + r) as f64;
            inside.then_some((i as u32, pixel, c.z))
        })
        .collect();
    let covered = |pixel: &Vector2<f64>| {
        let (u, v) = (pixel.x.round() as isize, pixel.y.round() as isize);
        offsets.iter().map(move |&(dx, dy)| (u + dx, v + dy)).filter(|&(x, y)| x >= 0 && y >= 0 && x < w && y < h)
    };
    let mut nearest = vec![f64::INFINITY; n];
    for (_, pixel, z) in &splats {
        for (x, y) in covered(pixel) {
            let idx = (y * w + x) as usize;
            nearest[idx] = nearest[idx].min(*z);
        }
    }
    let mut depth = vec![f64::INFINITY; n];
    let mut source = vec![NO_POINT; n];
    let mut offset = vec![f64::INFINITY; n];
    for &(i, pixel, z) in &splats {
        for (x, y) in covered(&pixel) {
            let idx = (y * w + x) as usize;
            if z > nearest[idx] * (1.0 + SURFACE_DEPTH_BAND) {
                continue;
            }
            let d = (pixel - Vector2::new(x as f64, y as f64)).norm_squared();
            if (d, z, i) < (offset[idx], depth[idx], source[idx]) {
                offset[idx] = d;
                depth[idx] = z;
                source[idx] = i;
            }
        }
    }
    let mut data = vec![0.0; n];
    let mut mask = vec![false; n];
    for idx in 0..n {
        if source[idx] != NO_POINT {
            data[idx] = cloud.intensities[source[idx] as usize];
            mask[idx] = true;
        }
    }
    let image = GrayImage::from_parts(width, height, data, mask).expect("render buffer sizes are consistent");
    SyntheticView { image, depth, source }
}

/// Exact nearest-neighbour lookup over projected pixels using square buckets.
struct ProjectionGrid<'a> {
    projections: &'a [Projection],
    cell: f64,
    cols: isize,
    rows: isize,
    min: Vector2<f64>,
    buckets: Vec<Vec<usize>>,
}

impl<'a> ProjectionGrid<'a> {
    fn new(projections: &'a [Projection], cell: f64) -> Self {
        let mut min = Vector2::new(f64::INFINITY, f64::INFINITY);
        let mut max = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in projections {
            min = min.inf(&p.pixel);
            max = max.sup(&p.pixel);
        }
        let cols = (((max.x - min.x) / cell).floor() as isize + 1).max(1);
        let rows = (((max.y - min.y) / cell).floor() as isize + 1).max(1);
        let mut buckets = vec![Vec::new(); (cols * rows) as usize];
        for (i, p) in projections.iter().enumerate() {
            let cx = ((p.pixel.x - min.x) / cell).floor() as isize;
            let cy = ((p.pixel.y - min.y) / cell).floor() as isize;
            buckets[(cy * cols + cx) as usize].push(i);
        }
        Self { projections, cell, cols, rows, min, buckets }
    }

    /// Nearest projection within `gate` pixels; ties resolve to the lower position in the input list.
    fn nearest_within(&self, q: &Vector2<f64>, gate: f64) -> Option<usize> {
        let reach = (gate / self.cell).ceil() as isize;
        let cx = ((q.x - self.min.x) / self.cell).floor() as isize;
        let cy = ((q.y - self.min.y) / self.cell).floor() as isize;
        let mut best: Option<(f64, usize)> = None;
        for y in (cy - reach).max(0)..=(cy + reach).min(self.rows - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(self.cols - 1) {
                for &i in &self.buckets[(y * self.cols + x) as usize] {
                    let d = (self.projections[i].pixel - q).norm_squared();
                    let better = match best {
                        None => true,
                        Some((bd, bi)) => d < bd || (d == bd && i < bi),
                    };
                    if better {
                        best = Some((d, i));
                    }
                }
            }
        }
        best.filter(|&(d, _)| d <= gate * gate).map(|(_, i)| i)
    }
}

/// Lifts reference-image feature pixels to camera-frame 3D points.
///
/// Each feature adopts the depth of its nearest projected cloud point and is
/// back-projected along its own ray. Features with no projection within
/// `gate` pixels are dropped. Returns `(feature index, point)` pairs.
pub fn lift_features(
    features: &[Vector2<f64>],
    projections: &[Projection],
    k: &Intrinsics,
    gate: f64,
) -> Result<Vec<(usize, Vector3<f64>)>, SceneError> {
    if projections.is_empty() {
        return Err(SceneError::NoProjections);
    }
    let grid = ProjectionGrid::new(projections, gate.max(1.0));
    Ok(features
        .iter()
        .enumerate()
        .filter_map(|(i, f)| {
            let j = grid.nearest_within(f, gate)?;
            backproject(k, f, projections[j].depth).ok().map(|p| (i, p))
        })
        .collect())
}
