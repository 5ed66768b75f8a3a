//! Gaussian triplets (center, weight, latent feature), view lifting and
//! decoding into renderable primitives.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::LiftError;
use crate::frame::{CameraFrame, ConfidenceMap, DepthMap};
use crate::geometry::{covariance_from, Camera};

/// Length of the per-triplet latent feature.
pub const FEATURE_DIM: usize = 11;
pub type TripletFeature = [f64; FEATURE_DIM];

/// Slot layout of [`TripletFeature`].
pub mod slot {
    pub const LOG_SCALE: usize = 0;
    pub const COLOR: usize = 1;
    pub const OPACITY_LOGIT: usize = 4;
    pub const CONFIDENCE_LOGIT: usize = 5;
    pub const RESERVED: usize = 6;
}

/// Opacity given to every freshly lifted triplet.
pub const INITIAL_OPACITY: f64 = 0.9;
/// Triplet weights are matching confidences clamped to this range.
pub const WEIGHT_RANGE: (f64, f64) = (0.01, 0.99);
pub const OPACITY_LOGIT_CAP: f64 = 10.0;
pub const SCALE_RANGE: (f64, f64) = (1e-4, 1.0);
/// Degree-0 spherical harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Triplets lifted from one view, one per valid strided pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTriplets {
    pub view: usize,
    /// Camera at lift resolution.
    pub camera: Camera,
    pub stride: usize,
    pub centers: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
    pub features: Vec<TripletFeature>,
    /// Pixel coordinates on the lift grid.
    pub pixels: Vec<(usize, usize)>,
    pub depths: Vec<f64>,
}

impl LocalTriplets {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Lift grid `(width, height)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.camera.intrinsics.width, self.camera.intrinsics.height)
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Lifts every valid pixel of `depth` (already at `1/stride` resolution) to a
/// world-space triplet.
pub fn lift_view(
    view: usize,
    frame: &CameraFrame,
    depth: &DepthMap,
    confidence: &ConfidenceMap,
    stride: usize,
) -> Result<LocalTriplets, LiftError> {
    if ![1, 2, 4].contains(&stride) {
        return Err(LiftError::InvalidStride(stride));
    }
    let camera = frame.camera().downscaled(stride);
    let grid = (camera.intrinsics.width, camera.intrinsics.height);
    if depth.shape() != grid {
        return Err(LiftError::ShapeMismatch { expected: grid, actual: depth.shape() });
    }
    if confidence.shape() != grid {
        return Err(LiftError::ShapeMismatch { expected: grid, actual: confidence.shape() });
    }
    let colors = frame.image.block_mean(stride);
    let opacity_logit = logit(INITIAL_OPACITY);

    let mut out = LocalTriplets {
        view,
        camera,
        stride,
        centers: Vec::new(),
        weights: Vec::new(),
        features: Vec::new(),
        pixels: Vec::new(),
        depths: Vec::new(),
    };
    for y in 0..grid.1 {
        for x in 0..grid.0 {
            let d = depth.get(x, y);
            if !(d > 0.0) || !d.is_finite() {
                continue;
            }
            let Ok(center) = camera.unproject(x as f64, y as f64, d) else { continue };
            let w = confidence.get(x, y).clamp(WEIGHT_RANGE.0, WEIGHT_RANGE.1);
            let c = colors.get(x, y);
            let mut f = [0.0; FEATURE_DIM];
            f[slot::LOG_SCALE] = 0.0;
            f[slot::COLOR..slot::COLOR + 3].copy_from_slice(&c);
            f[slot::OPACITY_LOGIT] = opacity_logit;
            f[slot::CONFIDENCE_LOGIT] = logit(w);
            out.centers.push(center);
            out.weights.push(w);
            out.features.push(f);
            out.pixels.push((x, y));
            out.depths.push(d);
        }
    }
    if out.is_empty() {
        return Err(LiftError::NoValidDepth { view });
    }
    Ok(out)
}

/// The fused scene before decoding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlobalTriplets {
    pub centers: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
    pub features: Vec<TripletFeature>,
    /// Multiplicative opacity factor in `(0, 1]`, lowered by floater removal.
    pub opacity_scale: Vec<f64>,
    /// Depth at which each entry was lifted (weight-averaged under fusion).
    pub lift_depths: Vec<f64>,
}

impl GlobalTriplets {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    fn push_local(&mut self, local: &LocalTriplets, i: usize) {
        self.centers.push(local.centers[i]);
        self.weights.push(local.weights[i]);
        self.features.push(local.features[i]);
        self.opacity_scale.push(1.0);
        self.lift_depths.push(local.depths[i]);
    }

    /// Keeps entries whose `keep` flag is set, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.centers.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.weights.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.features.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.opacity_scale.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.lift_depths.retain(|_| *it.next().unwrap());
    }
}

/// Appends every local triplet whose `fused` flag is unset; new entries start
/// with opacity scale 1. Returns the number appended.
pub fn merge_unfused(global: &mut GlobalTriplets, local: &LocalTriplets, fused: &[bool]) -> usize {
    debug_assert_eq!(fused.len(), local.len());
    let mut appended = 0;
    for (i, &f) in fused.iter().enumerate() {
        if !f {
            global.push_local(local, i);
            appended += 1;
        }
    }
    appended
}

/// Renderable Gaussian stored in its optimisation parameterisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    /// `(w, x, y, z)`; normalised when materialised.
    pub rotation: [f64; 4],
    pub log_scales: Vector3<f64>,
    pub opacity_logit: f64,
    /// Degree-0 spherical harmonic coefficient per color channel.
    pub sh_dc: Vector3<f64>,
}

impl GaussianPrimitive {
    pub fn new(mean: Vector3<f64>, scale: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scales: Vector3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            sh_dc: Vector3::from(color).map(|c| (c - 0.5) / SH_C0),
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scales.map(f64::exp)
    }

    /// Color in `[0, 1]`.
    pub fn color(&self) -> Vector3<f64> {
        self.sh_dc.map(|s| (0.5 + SH_C0 * s).clamp(0.0, 1.0))
    }

    pub fn set_color(&mut self, color: Vector3<f64>) {
        self.sh_dc = color.map(|c| (c - 0.5) / SH_C0);
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.unit_rotation().to_rotation_matrix().into_inner()
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_from(&self.rotation_matrix(), &self.scales())
    }
}

/// Decoder settings: isotropic world size is `base_scale_px` lift-grid pixels
/// at the lifting depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeParams {
    pub base_scale_px: f64,
    /// Mean focal length of the lift grid (pixels).
    pub focal_px: f64,
}

/// Fixed decoder from fused triplets to primitives.
pub fn decode_gaussians(global: &GlobalTriplets, params: &DecodeParams) -> Vec<GaussianPrimitive> {
    (0..global.len())
        .map(|j| {
            let f = &global.features[j];
            let scale = (params.base_scale_px * global.lift_depths[j] / params.focal_px * f[slot::LOG_SCALE].exp())
                .clamp(SCALE_RANGE.0, SCALE_RANGE.1);
            let raw_logit = f[slot::OPACITY_LOGIT].min(OPACITY_LOGIT_CAP);
            let beta = global.opacity_scale[j];
            let opacity_logit = if beta == 1.0 { raw_logit } else { logit(sigmoid(raw_logit) * beta) };
            let color = Vector3::new(f[slot::COLOR], f[slot::COLOR + 1], f[slot::COLOR + 2]).map(|c| c.clamp(0.0, 1.0));
            GaussianPrimitive {
                mean: global.centers[j],
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scales: Vector3::repeat(scale.ln()),
                opacity_logit,
                sh_dc: color.map(|c| (c - 0.5) / SH_C0),
            }
        })
        .collect()
}
