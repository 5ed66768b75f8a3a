//! Pinhole cameras, rigid world-to-camera transforms, and the projection
//! math shared by matching, fusion, floater removal and rendering.
//!
//! Pixel convention: integer coordinates `(x, y)` address pixel centres, so a
//! `W x H` image spans `[-0.5, W - 0.5] x [-0.5, H - 0.5]`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Low-pass floor added to the diagonal of every projected 2D covariance (px²).
pub const COVARIANCE_FLOOR_PX2: f64 = 0.3;

/// Smallest camera-frame depth treated as "in front of" the camera.
pub const MIN_DEPTH: f64 = 1e-9;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cy > 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64
            && self.fx.is_finite()
            && self.fy.is_finite();
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(*self))
        }
    }

    /// Intrinsics of the same camera sampled on a grid `factor` times coarser.
    ///
    /// A coarse pixel covers a `factor x factor` block of fine pixels and its
    /// centre sits at the block centre.
    pub fn downscaled(&self, factor: usize) -> Self {
        let s = factor as f64;
        let shift = (s - 1.0) / 2.0;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx - shift) / s,
            cy: (self.cy - shift) / s,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Rigid world-to-camera transform: `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if !err.is_finite() || err > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::NotARotation { orthonormal_error: err, determinant: det });
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFiniteTranslation);
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    /// Builds a world-to-camera pose for a camera at `eye` looking at
    /// `target`, with camera +y pointing roughly along `-up` (image rows grow
    /// downward).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or(GeometryError::DegenerateLookAt)?;
        let right = forward.cross(&up).try_normalize(1e-12).ok_or(GeometryError::DegenerateLookAt)?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation)
    }

    /// Orthonormalises a nearly-rotation matrix (polar decomposition via SVD).
    pub fn from_approximate(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let svd = rotation.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(GeometryError::DegenerateLookAt),
        };
        let r = u * v_t;
        if r.determinant() < 0.0 {
            return Err(GeometryError::NotARotation {
                orthonormal_error: 0.0,
                determinant: r.determinant(),
            });
        }
        Self::new(r, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Pose) -> Self {
        Self {
            rotation: next.rotation * self.rotation,
            translation: next.rotation * self.translation + next.translation,
        }
    }

    /// Camera centre in world coordinates.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Geodesic angle (radians) between the two rotations.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation * other.rotation.transpose();
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// Transform carrying points from `src`'s camera frame into `dst`'s camera frame.
pub fn compose_transform(src: &Pose, dst: &Pose) -> Pose {
    src.inverse().then(dst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn downscaled(&self, factor: usize) -> Self {
        Self { intrinsics: self.intrinsics.downscaled(factor), pose: self.pose }
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<Projection, GeometryError> {
        project_point(&self.intrinsics, &self.pose, x)
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        unproject_pixel(&self.intrinsics, &self.pose, u, v, depth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame z (meters).
    pub depth: f64,
}

impl Projection {
    /// Pixel bin under round-half-up on both axes, if inside a `width x height` grid.
    pub fn pixel_bin(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        let x = (self.u + 0.5).floor();
        let y = (self.v + 0.5).floor();
        if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
            Some((x as usize, y as usize))
        } else {
            None
        }
    }
}

pub fn project_camera_point(k: &Intrinsics, x_cam: &Vector3<f64>) -> Result<Projection, GeometryError> {
    let z = x_cam.z;
    if !(z > MIN_DEPTH) {
        return Err(GeometryError::BehindCamera { depth: z });
    }
    Ok(Projection { u: k.fx * x_cam.x / z + k.cx, v: k.fy * x_cam.y / z + k.cy, depth: z })
}

/// Projects a world point; fails with [`GeometryError::BehindCamera`] when the
/// camera-frame depth is `<= 1e-9`.
pub fn project_point(k: &Intrinsics, pose: &Pose, x: &Vector3<f64>) -> Result<Projection, GeometryError> {
    project_camera_point(k, &pose.transform_point(x))
}

pub fn unproject_pixel(
    k: &Intrinsics,
    pose: &Pose,
    u: f64,
    v: f64,
    depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let x_cam = Vector3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
    let rt = pose.rotation.transpose();
    Ok(rt * (x_cam - pose.translation))
}

/// Local affine approximation `∂(u, v) / ∂(x, y, z)` of the pinhole projection.
pub fn perspective_jacobian(k: &Intrinsics, x_cam: &Vector3<f64>) -> Result<Matrix2x3<f64>, GeometryError> {
    let z = x_cam.z;
    if !(z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(z));
    }
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    Ok(Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * x_cam.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * x_cam.y * iz2,
    ))
}

/// `J R Σ Rᵀ Jᵀ + 0.3 I`, with `R` the rotation of `pose`.
pub fn project_covariance(sigma: &Matrix3<f64>, pose: &Pose, jacobian: &Matrix2x3<f64>) -> Matrix2<f64> {
    let m = jacobian * pose.rotation;
    let mut out = m * sigma * m.transpose();
    // exact symmetry
    let off = 0.5 * (out[(0, 1)] + out[(1, 0)]);
    out[(0, 1)] = off;
    out[(1, 0)] = off;
    out[(0, 0)] += COVARIANCE_FLOOR_PX2;
    out[(1, 1)] += COVARIANCE_FLOOR_PX2;
    out
}

/// 3D covariance stored as rotation and per-axis scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3 {
    rotation: UnitQuaternion<f64>,
    scales: Vector3<f64>,
}

impl Covariance3 {
    pub fn new(rotation: Quaternion<f64>, scales: Vector3<f64>) -> Result<Self, GeometryError> {
        if scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(GeometryError::NegativeScale(scales));
        }
        if !(rotation.norm() > 0.0) {
            return Err(GeometryError::ZeroQuaternion);
        }
        Ok(Self { rotation: UnitQuaternion::from_quaternion(rotation), scales })
    }

    pub fn isotropic(scale: f64) -> Result<Self, GeometryError> {
        Self::new(Quaternion::identity(), Vector3::repeat(scale))
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn scales(&self) -> &Vector3<f64> {
        &self.scales
    }

    /// `R S Sᵀ Rᵀ`.
    pub fn matrix(&self) -> Matrix3<f64> {
        covariance_from(&self.rotation.to_rotation_matrix().into_inner(), &self.scales)
    }
}

pub fn covariance_from(rotation: &Matrix3<f64>, scales: &Vector3<f64>) -> Matrix3<f64> {
    let s2 = scales.component_mul(scales);
    let rs = rotation * Matrix3::from_diagonal(&s2);
    let mut out = rs * rotation.transpose();
    for i in 0..3 {
        for j in (i + 1)..3 {
            let m = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = m;
            out[(j, i)] = m;
        }
    }
    out
}
