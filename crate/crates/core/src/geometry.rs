//! Rigid transforms, pinhole intrinsics and rotation parameterizations.
//!
//! Poses are stored as world-to-camera transforms `M = [R | t]` so that a
//! world point `P` lands on pixel `p ~ K (R P + t)`. Camera frames follow the
//! usual computer-vision convention: `x` right, `y` down, `z` forward.
//!
//! Euler angles use the intrinsic Z-Y-X (yaw, pitch, roll) order in degrees:
//! `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frobenius tolerance on `RᵀR - I` accepted by [`PoseSE3::new`].
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

/// Pitch within this many degrees of ±90° is reported as gimbal lock.
const GIMBAL_LOCK_TOLERANCE_DEG: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {0} in the camera frame")]
    NonPositiveDepth(f64),
    #[error("rotation is not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("rotation has determinant {0}, expected +1")]
    Reflection(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Pinhole calibration `K = [fx γ cx; 0 fy cy; 0 0 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    #[serde(default)]
    pub skew: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        Self::with_skew(fx, fy, 0.0, cx, cy)
    }

    pub fn with_skew(fx: f64, fy: f64, skew: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if ![fx, fy, skew, cx, cy].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("intrinsics"));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        Ok(Self { fx, fy, skew, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, self.skew, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Pixel of a camera-frame point.
    pub fn project_camera(&self, x: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if x.z <= 0.0 {
            return Err(GeometryError::NonPositiveDepth(x.z));
        }
        let (a, b) = (x.x / x.z, x.y / x.z);
        Ok(Vector2::new(
            self.fx * a + self.skew * b + self.cx,
            self.fy * b + self.cy,
        ))
    }

    /// Unit-depth ray `K⁻¹ [u v 1]ᵀ` through a pixel.
    pub fn ray(&self, p: &Vector2<f64>) -> Vector3<f64> {
        let b = (p.y - self.cy) / self.fy;
        let a = (p.x - self.cx - self.skew * b) / self.fx;
        Vector3::new(a, b, 1.0)
    }
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl PoseSE3 {
    /// Builds a pose, rejecting rotations that are not proper and orthonormal.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if deviation > ORTHONORMAL_TOLERANCE {
            return Err(GeometryError::NotOrthonormal(deviation));
        }
        let det = rotation.determinant();
        if det <= 0.0 {
            return Err(GeometryError::Reflection(det));
        }
        Ok(Self { rotation, translation })
    }

    /// Same as [`PoseSE3::new`] with a caller-chosen orthonormality tolerance.
    pub fn with_tolerance(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        tolerance: f64,
    ) -> Result<Self, GeometryError> {
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if deviation > tolerance {
            return Err(GeometryError::NotOrthonormal(deviation));
        }
        let det = rotation.determinant();
        if det <= 0.0 {
            return Err(GeometryError::Reflection(det));
        }
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_rotation(rotation: &Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// For a world-to-camera pose, the camera center in world coordinates.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(values: &[f64; 12], tolerance: f64) -> Result<Self, GeometryError> {
        let rotation = Matrix3::new(
            values[0], values[1], values[2], //
            values[4], values[5], values[6], //
            values[8], values[9], values[10],
        );
        let translation = Vector3::new(values[3], values[7], values[11]);
        Self::with_tolerance(rotation, translation, tolerance)
    }

    /// Frobenius distance of `RᵀR` from identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }
}

/// Projects a world point through `K M`.
pub fn project(k: &Intrinsics, m: &PoseSE3, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    k.project_camera(&m.transform(p))
}

/// Camera-frame point at depth `z` along the ray through pixel `p`.
pub fn backproject(k: &Intrinsics, p: &Vector2<f64>, z: f64) -> Result<Vector3<f64>, GeometryError> {
    if z <= 0.0 || !z.is_finite() {
        return Err(GeometryError::NonPositiveDepth(z));
    }
    Ok(k.ray(p) * z)
}

/// Unit quaternion `w + xi + yj + zk`; `q` and `-q` are the same rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    /// Normalizes the given components; `None` for a zero or non-finite input.
    pub fn new_normalize(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n == 0.0 {
            return None;
        }
        Some(Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle_rad: f64) -> Option<Self> {
        let n = axis.norm();
        if n == 0.0 {
            return None;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle_rad).sin_cos();
        Some(Self { w: c, x: a.x * s, y: a.y * s, z: a.z * s })
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*r);
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
        Self { w: q.w, x: q.i, y: q.j, z: q.k }
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let Self { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, other: &UnitQuaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn neg(&self) -> Self {
        Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Rotation angle (radians, in `[0, π]`) between two quaternions.
    pub fn angle_to(&self, other: &UnitQuaternion) -> f64 {
        2.0 * self.dot(other).abs().min(1.0).acos()
    }
}

/// Intrinsic Z-Y-X Euler angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerTriple {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerTriple {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    /// True when pitch sits at ±90°, where yaw and roll are not separable.
    pub fn near_gimbal_lock(&self) -> bool {
        (self.pitch.abs() - 90.0).abs() <= GIMBAL_LOCK_TOLERANCE_DEG
    }

    pub fn max_abs(&self) -> f64 {
        self.yaw.abs().max(self.pitch.abs()).max(self.roll.abs())
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw.to_radians());
        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), self.pitch.to_radians());
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), self.roll.to_radians());
        *(rz * ry * rx).matrix()
    }
}

/// Decomposes `R = Rz(yaw) Ry(pitch) Rx(roll)`.
///
/// At gimbal lock roll is set to zero and the whole in-plane rotation is
/// reported as yaw; [`EulerTriple::near_gimbal_lock`] flags that case.
pub fn rotation_to_euler(r: &Matrix3<f64>) -> EulerTriple {
    let sp = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    let cp = pitch.cos();
    let (yaw, roll) = if (pitch.to_degrees().abs() - 90.0).abs() <= GIMBAL_LOCK_TOLERANCE_DEG || cp < 1e-12 {
        // Only yaw ∓ roll is observable; fold it into yaw.
        ((-r[(0, 1)]).atan2(r[(1, 1)]), 0.0)
    } else {
        (r[(1, 0)].atan2(r[(0, 0)]), r[(2, 1)].atan2(r[(2, 2)]))
    };
    EulerTriple {
        yaw: yaw.to_degrees(),
        pitch: pitch.to_degrees(),
        roll: roll.to_degrees(),
    }
}

/// Rotation about a camera-frame axis.
pub fn axis_rotation(axis: Axis, angle_deg: f64) -> Matrix3<f64> {
    let unit = match axis {
        Axis::X => Vector3::x_axis(),
        Axis::Y => Vector3::y_axis(),
        Axis::Z => Vector3::z_axis(),
    };
    *Rotation3::from_axis_angle(&unit, angle_deg.to_radians()).matrix()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}
