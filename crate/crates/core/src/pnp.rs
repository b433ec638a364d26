//! Minimal P3P, fourth-point disambiguation and an MLESAC loop with
//! Levenberg-Marquardt refinement on the consensus set.
//!
//! The 3D points are expressed in whatever frame the caller chooses (for the
//! feature pipeline: the reference camera frame); the recovered pose maps that
//! frame into the query camera frame.

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Matrix6, Rotation3, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::{FailureReason, Method, PoseEstimate};
use crate::geometry::{Intrinsics, PoseSE3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
}

/// Query pixels paired with 3D points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet2D3D {
    pub pixels: Vec<Vector2<f64>>,
    pub points: Vec<Vector3<f64>>,
}

impl CorrespondenceSet2D3D {
    pub fn new(pixels: Vec<Vector2<f64>>, points: Vec<Vector3<f64>>) -> Self {
        assert_eq!(pixels.len(), points.len(), "pixels and points must pair up");
        Self { pixels, points }
    }

    pub fn push(&mut self, pixel: Vector2<f64>, point: Vector3<f64>) {
        self.pixels.push(pixel);
        self.points.push(point);
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Reprojection threshold in pixels.
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub seed: u64,
    /// Levenberg-Marquardt iterations on the consensus set.
    pub refine_iterations: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { max_iterations: 1000, inlier_threshold: 2.0, confidence: 0.99, seed: 0, refine_iterations: 10 }
    }
}

/// Squared reprojection error; infinite for points at or behind the camera.
pub fn reprojection_error_sq(k: &Intrinsics, pose: &PoseSE3, pixel: &Vector2<f64>, point: &Vector3<f64>) -> f64 {
    match k.project_camera(&pose.transform(point)) {
        Ok(p) => (p - pixel).norm_squared(),
        Err(_) => f64::INFINITY,
    }
}

/// Coefficients low to high.
fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n).map(|i| a.get(i).copied().unwrap_or(0.0) + b.get(i).copied().unwrap_or(0.0)).collect()
}

fn poly_scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|v| v * s).collect()
}

fn poly_eval(a: &[f64], x: f64) -> f64 {
    a.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn poly_derivative(a: &[f64]) -> Vec<f64> {
    a.iter().enumerate().skip(1).map(|(i, c)| c * i as f64).collect()
}

/// Real roots of a polynomial (degree ≤ 4) via companion-matrix eigenvalues,
/// polished with Newton steps.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut c: Vec<f64> = coeffs.iter().map(|v| v / scale).collect();
    while c.len() > 1 && c.last().unwrap().abs() < 1e-14 {
        c.pop();
    }
    let degree = c.len() - 1;
    let raw: Vec<f64> = match degree {
        0 => Vec::new(),
        1 => vec![-c[0] / c[1]],
        _ => {
            let lead = c[degree];
            let mut companion = nalgebra::DMatrix::<f64>::zeros(degree, degree);
            for i in 0..degree {
                companion[(0, i)] = -c[degree - 1 - i] / lead;
                if i + 1 < degree {
                    companion[(i + 1, i)] = 1.0;
                }
            }
            companion
                .complex_eigenvalues()
                .iter()
                .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
                .map(|z| z.re)
                .collect()
        }
    };
    let d = poly_derivative(&c);
    raw.into_iter()
        .map(|mut x| {
            for _ in 0..8 {
                let f = poly_eval(&c, x);
                let df = poly_eval(&d, x);
                if df == 0.0 {
                    break;
                }
                let step = f / df;
                x -= step;
                if step.abs() <= 1e-15 * (1.0 + x.abs()) {
                    break;
                }
            }
            x
        })
        .collect()
}

/// Newton refinement of the three law-of-cosines equations in the depths.
fn refine_depths(mut l: Vector3<f64>, a: [f64; 3], c: [f64; 3]) -> Vector3<f64> {
    // a = [a12, a13, a23], c = [c12, c13, c23]
    let residual = |l: &Vector3<f64>| {
        Vector3::new(
            l.x * l.x + l.y * l.y - 2.0 * c[0] * l.x * l.y - a[0],
            l.x * l.x + l.z * l.z - 2.0 * c[1] * l.x * l.z - a[1],
            l.y * l.y + l.z * l.z - 2.0 * c[2] * l.y * l.z - a[2],
        )
    };
    let mut r = residual(&l);
    for _ in 0..5 {
        let j = Matrix3::new(
            2.0 * l.x - 2.0 * c[0] * l.y,
            2.0 * l.y - 2.0 * c[0] * l.x,
            0.0,
            2.0 * l.x - 2.0 * c[1] * l.z,
            0.0,
            2.0 * l.z - 2.0 * c[1] * l.x,
            0.0,
            2.0 * l.y - 2.0 * c[2] * l.z,
            2.0 * l.z - 2.0 * c[2] * l.y,
        );
        let Some(step) = j.lu().solve(&r) else { break };
        let next = l - step;
        let rn = residual(&next);
        if rn.norm() >= r.norm() {
            break;
        }
        l = next;
        r = rn;
    }
    l
}

/// Orthonormal frame attached to a triangle: first axis along edge 1→2.
fn triangle_frame(p: &[Vector3<f64>; 3]) -> Option<Matrix3<f64>> {
    let e1 = (p[1] - p[0]).try_normalize(1e-15)?;
    let e3 = e1.cross(&(p[2] - p[0])).try_normalize(1e-15)?;
    let e2 = e3.cross(&e1);
    Some(Matrix3::from_columns(&[e1, e2, e3]))
}

/// Up to four poses mapping the three points onto the three pixels.
pub fn p3p_solve(
    pixels: &[Vector2<f64>; 3],
    points: &[Vector3<f64>; 3],
    k: &Intrinsics,
) -> Result<Vec<PoseSE3>, PnpError> {
    let d12 = points[1] - points[0];
    let d13 = points[2] - points[0];
    let area = d12.cross(&d13).norm();
    if area <= 1e-9 * d12.norm() * d13.norm() || area == 0.0 {
        return Err(PnpError::DegenerateConfiguration("collinear points"));
    }
    let y: Vec<Vector3<f64>> = pixels.iter().map(|p| k.ray(p).normalize()).collect();
    let (c12, c13, c23) = (y[0].dot(&y[1]), y[0].dot(&y[2]), y[1].dot(&y[2]));
    let a12 = d12.norm_squared();
    let a13 = d13.norm_squared();
    let a23 = (points[2] - points[1]).norm_squared();

    // Depths λ1, λ2 = u λ1, λ3 = v λ1. Eliminating λ1 and u leaves a quartic in v.
    let dv = [1.0, -2.0 * c13, 1.0];
    let numer = poly_add(&poly_scale(&[1.0, 0.0, -1.0], a13), &poly_scale(&dv, a23 - a12));
    let denom = [2.0 * a13 * c12, -2.0 * a13 * c23];
    let cv = poly_add(&[a13], &poly_scale(&dv, -a12));
    let quartic = poly_add(
        &poly_add(&poly_scale(&poly_mul(&numer, &numer), a13), &poly_scale(&poly_mul(&numer, &denom), -2.0 * a13 * c12)),
        &poly_mul(&cv, &poly_mul(&denom, &denom)),
    );

    let mut poses = Vec::new();
    for v in real_roots(&quartic) {
        if v <= 0.0 {
            continue;
        }
        let dn = poly_eval(&denom, v);
        let d = poly_eval(&dv, v);
        if dn.abs() < 1e-12 * a13 || d <= 0.0 {
            continue;
        }
        let u = poly_eval(&numer, v) / dn;
        if u <= 0.0 {
            continue;
        }
        let l1 = (a13 / d).sqrt();
        let l = refine_depths(Vector3::new(l1, u * l1, v * l1), [a12, a13, a23], [c12, c13, c23]);
        if l.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            continue;
        }
        let cam = [y[0] * l.x, y[1] * l.y, y[2] * l.z];
        let (Some(fw), Some(fc)) = (triangle_frame(points), triangle_frame(&cam)) else {
            continue;
        };
        let r = fc * fw.transpose();
        let t = cam[0] - r * points[0];
        let Ok(pose) = PoseSE3::new(r, t) else { continue };
        let worst = (0..3)
            .map(|i| reprojection_error_sq(k, &pose, &pixels[i], &points[i]))
            .fold(0.0, f64::max);
        if worst.sqrt() > 1e-3 {
            continue;
        }
        let duplicate = poses.iter().any(|p: &PoseSE3| {
            (p.rotation() - pose.rotation()).norm() < 1e-9 && (p.translation() - pose.translation()).norm() < 1e-9
        });
        if !duplicate {
            poses.push(pose);
        }
    }
    if poses.is_empty() {
        return Err(PnpError::DegenerateConfiguration("no real solution"));
    }
    Ok(poses)
}

/// Candidate with the smallest squared reprojection error of the extra point;
/// ties go to the lower index.
pub fn disambiguate(candidates: &[PoseSE3], pixel: &Vector2<f64>, point: &Vector3<f64>, k: &Intrinsics) -> PoseSE3 {
    let mut best = (f64::INFINITY, 0usize);
    for (i, c) in candidates.iter().enumerate() {
        let e = reprojection_error_sq(k, c, pixel, point);
        if e < best.0 {
            best = (e, i);
        }
    }
    candidates[best.1]
}

/// Truncated quadratic cost `Σ min(r², T²)`.
pub fn truncated_score(corrs: &CorrespondenceSet2D3D, k: &Intrinsics, pose: &PoseSE3, threshold: f64) -> f64 {
    let cap = threshold * threshold;
    corrs
        .pixels
        .iter()
        .zip(&corrs.points)
        .map(|(p, x)| reprojection_error_sq(k, pose, p, x).min(cap))
        .sum()
}

/// Indices with reprojection error within `threshold`.
pub fn inliers(corrs: &CorrespondenceSet2D3D, k: &Intrinsics, pose: &PoseSE3, threshold: f64) -> Vec<usize> {
    let cap = threshold * threshold;
    (0..corrs.len())
        .filter(|&i| reprojection_error_sq(k, pose, &corrs.pixels[i], &corrs.points[i]) <= cap)
        .collect()
}

/// Levenberg-Marquardt on the summed squared reprojection error of `subset`.
/// Returns `None` if no step improved the cost.
pub fn refine_pose(
    corrs: &CorrespondenceSet2D3D,
    subset: &[usize],
    k: &Intrinsics,
    initial: &PoseSE3,
    iterations: usize,
) -> Option<PoseSE3> {
    let cost = |pose: &PoseSE3| -> f64 {
        subset
            .iter()
            .map(|&i| reprojection_error_sq(k, pose, &corrs.pixels[i], &corrs.points[i]))
            .sum()
    };
    let mut pose = *initial;
    let mut current = cost(&pose);
    if !current.is_finite() {
        return None;
    }
    let mut improved = false;
    let mut damping = 1e-3;
    for _ in 0..iterations {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for &i in subset {
            let rp = pose.rotation() * corrs.points[i];
            let x = rp + pose.translation();
            let (iz, iz2) = (1.0 / x.z, 1.0 / (x.z * x.z));
            let dproj = Matrix2x3::new(
                k.fx * iz,
                k.skew * iz,
                -(k.fx * x.x + k.skew * x.y) * iz2,
                0.0,
                k.fy * iz,
                -k.fy * x.y * iz2,
            );
            let proj = Vector2::new((k.fx * x.x + k.skew * x.y) * iz + k.cx, k.fy * x.y * iz + k.cy);
            let r = proj - corrs.pixels[i];
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * -rp.cross_matrix()));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        if jtr.norm() < 1e-14 {
            break;
        }
        let mut accepted = false;
        for _ in 0..8 {
            let mut a = jtj;
            for d in 0..6 {
                a[(d, d)] += damping * (1.0 + jtj[(d, d)]);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                damping *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let delta = Vector3::new(step[3], step[4], step[5]);
            let rot = Rotation3::new(omega).matrix() * pose.rotation();
            let candidate = PoseSE3::with_tolerance(rot, pose.translation() + delta, 1e-6);
            let Ok(candidate) = candidate else {
                damping *= 10.0;
                continue;
            };
            let c = cost(&candidate);
            if c < current {
                pose = candidate;
                current = c;
                damping = (damping * 0.1).max(1e-12);
                accepted = true;
                improved = true;
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    improved.then_some(pose)
}

fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    if inlier_ratio >= 1.0 {
        return 1;
    }
    let p_good = inlier_ratio.powi(4);
    if p_good <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if !n.is_finite() {
        return cap;
    }
    (n.ceil() as usize).clamp(1, cap)
}

/// Robust PnP: minimal samples of four (three for P3P, one to disambiguate),
/// truncated-quadratic scoring, then refinement on the consensus set.
///
/// `final_cost` is the truncated score of the returned pose divided by the
/// number of correspondences.
pub fn mlesac_pnp(corrs: &CorrespondenceSet2D3D, k: &Intrinsics, cfg: &RansacConfig) -> PoseEstimate {
    let m = corrs.len();
    if m < 4 {
        return PoseEstimate::failure(PoseSE3::identity(), Method::Fb, FailureReason::InsufficientCorrespondences);
    }
    let t = cfg.inlier_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, PoseSE3)> = None;
    let mut required = cfg.max_iterations;
    let mut iteration = 0;
    while iteration < required.min(cfg.max_iterations) {
        iteration += 1;
        let idx = sample(&mut rng, m, 4).into_vec();
        let px = [corrs.pixels[idx[0]], corrs.pixels[idx[1]], corrs.pixels[idx[2]]];
        let pt = [corrs.points[idx[0]], corrs.points[idx[1]], corrs.points[idx[2]]];
        let Ok(candidates) = p3p_solve(&px, &pt, k) else { continue };
        let pose = disambiguate(&candidates, &corrs.pixels[idx[3]], &corrs.points[idx[3]], k);
        let score = truncated_score(corrs, k, &pose, t);
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            let ratio = inliers(corrs, k, &pose, t).len() as f64 / m as f64;
            required = required_iterations(ratio, cfg.confidence, cfg.max_iterations);
            best = Some((score, pose));
        }
    }
    let Some((mut score, mut pose)) = best else {
        return PoseEstimate::failure(PoseSE3::identity(), Method::Fb, FailureReason::NoConsensus);
    };

    for _ in 0..2 {
        let support = inliers(corrs, k, &pose, t);
        if support.len() < 4 {
            break;
        }
        let Some(refined) = refine_pose(corrs, &support, k, &pose, cfg.refine_iterations) else { break };
        let refined_score = truncated_score(corrs, k, &refined, t);
        if refined_score <= score {
            pose = refined;
            score = refined_score;
        } else {
            break;
        }
    }

    let support = inliers(corrs, k, &pose, t).len();
    if support < 4 {
        return PoseEstimate::failure(pose, Method::Fb, FailureReason::NoConsensus);
    }
    PoseEstimate::success(pose, Method::Fb, support, score / m as f64)
}

/// 4×4 homogeneous form of a candidate, handy for comparisons in tests.
pub fn pose_matrix(p: &PoseSE3) -> Matrix4<f64> {
    p.to_homogeneous()
}
