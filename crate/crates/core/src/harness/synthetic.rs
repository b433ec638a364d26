//! Procedural street scene used as a ground-truth oracle.
//!
//! The world is Z-up: a textured ground plane at z = 0 with boxes ("buildings"
//! and "cars") on both sides of a road running along +X. The camera drives
//! along the road at a fixed height with small lateral and yaw wiggles. Each
//! frame gets a ray-cast image (supersampled, 8-bit quantized) and a cloud of
//! first-hit surface points cast through the frame's pixel centers.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::geometry::{axis_rotation, Axis, Intrinsics, PoseSE3};
use crate::imaging::GrayImage;
use crate::scene::{PointCloud, ReferenceTuple};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Trajectory length in meters; frames are placed every `spacing` meters.
    pub length: f64,
    pub spacing: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub camera_height: f64,
    /// Amplitude of the lateral camera offset, meters.
    pub lateral_wiggle: f64,
    /// Amplitude of the yaw wiggle, degrees.
    pub yaw_wiggle: f64,
    /// Maximum range of cloud points, meters.
    pub cloud_range: f64,
    /// Supersampling factor per image axis.
    pub supersample: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            length: 39.0,
            spacing: 1.0,
            width: 128,
            height: 96,
            focal: 100.0,
            camera_height: 1.6,
            lateral_wiggle: 0.5,
            yaw_wiggle: 3.0,
            cloud_range: 40.0,
            supersample: 2,
        }
    }
}

impl SceneSpec {
    pub fn frame_count(&self) -> usize {
        if self.length <= 0.0 || self.spacing <= 0.0 {
            1
        } else {
            (self.length / self.spacing + 1e-9).floor() as usize + 1
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
        .expect("positive focal length")
    }
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vector3<f64>,
    max: Vector3<f64>,
    seed: u64,
    /// Panel size along the horizontal and vertical face axes.
    panel: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct World {
    boxes: Vec<Aabb>,
    seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    distance: f64,
    point: Vector3<f64>,
    intensity: f64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice_value(seed: u64, i: i64, j: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(i as u64 ^ splitmix(j as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth_noise(seed: u64, u: f64, v: f64) -> f64 {
    let (iu, iv) = (u.floor(), v.floor());
    let (fu, fv) = (u - iu, v - iv);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (su, sv) = (s(fu), s(fv));
    let (i, j) = (iu as i64, iv as i64);
    let a = lattice_value(seed, i, j);
    let b = lattice_value(seed, i + 1, j);
    let c = lattice_value(seed, i, j + 1);
    let d = lattice_value(seed, i + 1, j + 1);
    (a + (b - a) * su) + ((c + (d - c) * su) - (a + (b - a) * su)) * sv
}

/// Piecewise-constant panels plus two octaves of value noise.
fn texture(seed: u64, u: f64, v: f64, panel: (f64, f64)) -> f64 {
    let cell = lattice_value(seed, (u / panel.0).floor() as i64, (v / panel.1).floor() as i64);
    let base = 0.15 + 0.7 * cell;
    let n1 = smooth_noise(seed ^ 0x1111, u / 0.4, v / 0.4) - 0.5;
    let n2 = smooth_noise(seed ^ 0x2222, u / 0.13, v / 0.13) - 0.5;
    (base + 0.18 * n1 + 0.08 * n2).clamp(0.0, 1.0)
}

fn sky(dir: &Vector3<f64>) -> f64 {
    (0.82 - 0.25 * dir.z.max(0.0)).clamp(0.0, 1.0)
}

impl World {
    /// Random buildings on both sides of the road plus a row of low boxes
    /// near the curbs, covering x in `[x0, x1]`.
    pub fn generate(x0: f64, x1: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut boxes = Vec::new();
        for side in [-1.0f64, 1.0] {
            let mut x = x0;
            while x < x1 {
                let len = rng.gen_range(3.0..7.0);
                let near = rng.gen_range(4.5..6.5);
                let depth = rng.gen_range(2.0..5.0);
                let height = rng.gen_range(3.0..9.0);
                let (ya, yb) = (side * near, side * (near + depth));
                boxes.push(Aabb {
                    min: Vector3::new(x, ya.min(yb), 0.0),
                    max: Vector3::new(x + len, ya.max(yb), height),
                    seed: rng.gen(),
                    panel: (rng.gen_range(0.5..0.9), rng.gen_range(0.6..1.1)),
                });
                x += len + rng.gen_range(0.3..2.5);
            }
            let mut x = x0 + rng.gen_range(0.0..4.0);
            while x < x1 {
                let len = rng.gen_range(1.5..4.0);
                let near = rng.gen_range(2.4..3.0);
                let width = rng.gen_range(0.8..1.6);
                let height = rng.gen_range(0.8..1.6);
                let (ya, yb) = (side * near, side * (near + width));
                boxes.push(Aabb {
                    min: Vector3::new(x, ya.min(yb), 0.0),
                    max: Vector3::new(x + len, ya.max(yb), height),
                    seed: rng.gen(),
                    panel: (rng.gen_range(0.3..0.6), rng.gen_range(0.25..0.5)),
                });
                x += len + rng.gen_range(3.0..9.0);
            }
        }
        Self { boxes, seed: rng.gen() }
    }

    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<(f64, usize, usize)> = None;
        if dir.z < 0.0 {
            let t = -origin.z / dir.z;
            if t > 0.0 {
                best = Some((t, usize::MAX, 2));
            }
        }
        for (bi, b) in self.boxes.iter().enumerate() {
            if b.max.x < origin.x - 1.0 && dir.x >= 0.0 {
                continue;
            }
            let (mut t0, mut t1, mut axis) = (0.0f64, f64::INFINITY, usize::MAX);
            let mut hit = true;
            for a in 0..3 {
                if dir[a].abs() < 1e-15 {
                    if origin[a] < b.min[a] || origin[a] > b.max[a] {
                        hit = false;
                        break;
                    }
                    continue;
                }
                let inv = 1.0 / dir[a];
                let (mut ta, mut tb) = ((b.min[a] - origin[a]) * inv, (b.max[a] - origin[a]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                if ta > t0 {
                    t0 = ta;
                    axis = a;
                }
                t1 = t1.min(tb);
                if t0 > t1 {
                    hit = false;
                    break;
                }
            }
            if hit && axis != usize::MAX && best.is_none_or(|(t, _, _)| t0 < t) {
                best = Some((t0, bi, axis));
            }
        }
        let (t, bi, axis) = best?;
        let point = origin + dir * t;
        let intensity = if bi == usize::MAX {
            texture(self.seed, point.x, point.y, (0.5, 0.5))
        } else {
            let b = &self.boxes[bi];
            let (u, v) = match axis {
                0 => (point.y, point.z),
                1 => (point.x, point.z),
                _ => (point.x, point.y),
            };
            texture(b.seed ^ (axis as u64 * 0x5151), u, v, b.panel)
        };
        Some(Hit { distance: t, point, intensity })
    }

    /// Euclidean distance from `p` to the nearest surface (ground plane or box face).
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let mut best = p.z.abs();
        for b in &self.boxes {
            let outside = (b.min - p).sup(&(p - b.max)).sup(&Vector3::zeros());
            let d = if outside == Vector3::zeros() {
                (0..3).map(|a| (p[a] - b.min[a]).min(b.max[a] - p[a])).fold(f64::INFINITY, f64::min)
            } else {
                outside.norm()
            };
            best = best.min(d);
        }
        best
    }

    /// Supersampled image seen from `camera_to_world`.
    pub fn render_image(&self, k: &Intrinsics, camera_to_world: &PoseSE3, w: usize, h: usize, ss: usize) -> GrayImage {
        let ss = ss.max(1);
        let origin = *camera_to_world.translation();
        let rot = camera_to_world.rotation();
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let px = x as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5;
                        let py = y as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5;
                        let dir = (rot * k.ray(&Vector2::new(px, py))).normalize();
                        acc += self.cast(&origin, &dir).map_or_else(|| sky(&dir), |h| h.intensity);
                    }
                }
                let v = acc / (ss * ss) as f64;
                data.push((v * 255.0).round() / 255.0);
            }
        }
        GrayImage::from_vec(w, h, data).expect("sizes match")
    }

    /// First-hit points through each pixel center within `range`, rounded to f32.
    pub fn scan(&self, k: &Intrinsics, camera_to_world: &PoseSE3, w: usize, h: usize, range: f64) -> PointCloud {
        let origin = *camera_to_world.translation();
        let rot = camera_to_world.rotation();
        let mut points = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let dir = (rot * k.ray(&Vector2::new(x as f64, y as f64))).normalize();
                if let Some(hit) = self.cast(&origin, &dir) {
                    if hit.distance <= range {
                        points.push(hit.point.map(|v| v as f32 as f64));
                    }
                }
            }
        }
        PointCloud { points }
    }
}

/// Camera looking along world +X (x right, y down, z forward), rotated by `yaw_deg` about world Z.
pub fn camera_to_world(center: Vector3<f64>, yaw_deg: f64) -> PoseSE3 {
    let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    PoseSE3::new(axis_rotation(Axis::Z, yaw_deg) * base, center).expect("rotation")
}

/// Ground truth alongside the generated dataset.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub world: World,
    pub dataset: Dataset,
}

impl SyntheticScene {
    /// Image of the world seen from an arbitrary world-to-camera pose.
    pub fn render_at(&self, pose: &PoseSE3) -> GrayImage {
        let k = self.dataset.intrinsics;
        self.world.render_image(&k, &pose.inverse(), self.spec.width, self.spec.height, self.spec.supersample)
    }

    /// Distance from a world point to the nearest scene surface.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        self.world.surface_distance(p)
    }

    /// First surface point hit by the ray from `from` through `p` (world frame).
    pub fn surface_along(&self, from: &Vector3<f64>, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let dir = (p - from).normalize();
        self.world.cast(from, &dir).map(|h| h.point)
    }
}

/// Builds the world, trajectory, images and clouds for `spec`.
pub fn generate_synthetic_scene(spec: &SceneSpec, seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.frame_count();
    let end = (n - 1) as f64 * spec.spacing;
    let world = World::generate(-15.0, end + 60.0, rng.gen());
    let (p1, p2): (f64, f64) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
    let k = spec.intrinsics();
    let mut frames = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    for i in 0..n {
        let x = i as f64 * spec.spacing;
        let y = spec.lateral_wiggle * (x * std::f64::consts::TAU / 13.0 + p1).sin();
        let yaw = spec.yaw_wiggle * (x * std::f64::consts::TAU / 9.0 + p2).sin();
        let c2w = camera_to_world(Vector3::new(x, y, spec.camera_height), yaw);
        let image = world.render_image(&k, &c2w, spec.width, spec.height, spec.supersample);
        let cloud = world.scan(&k, &c2w, spec.width, spec.height, spec.cloud_range);
        let pose = PoseSE3::from_row_major(&c2w.to_row_major(), 1e-6).expect("valid").inverse();
        frames.push(ReferenceTuple { id: i, image, cloud, pose });
        positions.push(Vector2::new(x, y));
    }
    SyntheticScene { spec: *spec, world, dataset: Dataset { intrinsics: k, frames, positions: Some(positions) } }
}

/// Intensity corruptions standing in for cross-condition appearance change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    Gamma { gamma: f64 },
    BrightnessContrast { brightness: f64, contrast: f64 },
    Noise { sigma: f64, seed: u64 },
    Invert,
}

impl Corruption {
    pub fn apply(&self, img: &GrayImage) -> GrayImage {
        match *self {
            Corruption::Gamma { gamma } => img.map(|v| v.powf(gamma)),
            Corruption::BrightnessContrast { brightness, contrast } => {
                img.map(|v| (v - 0.5) * contrast + 0.5 + brightness)
            }
            Corruption::Invert => img.map(|v| 1.0 - v),
            Corruption::Noise { sigma, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
                let data: Vec<f64> = img.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
                GrayImage::from_parts(img.width(), img.height(), data, img.mask().to_vec()).expect("same size")
            }
        }
    }
}
