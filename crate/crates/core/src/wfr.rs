//! Weighted floater removal: a second pass over the views that lowers the
//! opacity of global Gaussians sitting in front of the predicted surface.

use serde::{Deserialize, Serialize};

use crate::error::FusionError;
use crate::frame::{DepthMap, ScalarMap};
use crate::gaussians::GlobalTriplets;
use crate::geometry::Camera;
use crate::ptf::ProjectionBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WfrStrategy {
    /// Accumulate global weights within `delta` of each reference depth.
    #[default]
    NeighborAccumulate,
    /// Use the floater's own weight and the local triplet's weight.
    NoAccumulate,
    /// Equal weights: every indication halves the opacity.
    Uniform,
    /// Delete indicated Gaussians.
    DirectRemoval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloaterIndication {
    /// Pixel on the lift grid.
    pub pixel: (usize, usize),
    pub global: usize,
    pub global_depth: f64,
    pub local_depth: f64,
}

/// Pixels whose predicted depth lies more than `delta` behind the nearest
/// projected global, in row-major order.
pub fn indicate_floaters(buffer: &ProjectionBuffer, local_depth: &DepthMap, delta: f64) -> Vec<FloaterIndication> {
    let mut out = Vec::new();
    for y in 0..buffer.height {
        for x in 0..buffer.width {
            let dl = local_depth.get(x, y);
            if !(dl > 0.0) {
                continue;
            }
            if let Some((j, dg)) = buffer.nearest(x, y) {
                if dl - dg > delta {
                    out.push(FloaterIndication { pixel: (x, y), global: j, global_depth: dg, local_depth: dl });
                }
            }
        }
    }
    out
}

/// Sum of `weights[j]` over bin entries with `|reference_depth - d_j| < delta`.
pub fn neighbor_weights(bin: &[(usize, f64)], reference_depth: f64, weights: &[f64], delta: f64) -> f64 {
    bin.iter().filter(|(_, d)| (reference_depth - d).abs() < delta).map(|(j, _)| weights[*j]).sum()
}

/// `scale <- scale * w_global / (w_global + w_local)`. Zero support for the
/// floater multiplies by `epsilon_floor`; zero support for the predicted
/// surface leaves the scale untouched.
pub fn apply_opacity_reduction(scale: &mut f64, w_global: f64, w_local: f64, epsilon_floor: f64) {
    if w_local <= 0.0 {
        return;
    }
    if w_global <= 0.0 {
        *scale *= epsilon_floor;
    } else {
        *scale *= w_global / (w_global + w_local);
    }
}

/// One view of the removal pass, on the lift grid.
#[derive(Debug, Clone, Copy)]
pub struct WfrView<'a> {
    pub camera: Camera,
    /// Predicted depth (0 = invalid).
    pub depth: &'a DepthMap,
    /// Weight of the local triplet lifted at each pixel.
    pub local_weights: &'a ScalarMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WfrParams {
    pub delta: f64,
    pub strategy: WfrStrategy,
    pub epsilon_floor: f64,
}

impl Default for WfrParams {
    fn default() -> Self {
        Self { delta: 0.1, strategy: WfrStrategy::NeighborAccumulate, epsilon_floor: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WfrStats {
    pub view: usize,
    pub indications: usize,
    pub removed: usize,
}

/// Traverses `views` in order, reducing (or deleting) indicated floaters.
pub fn run_wfr(global: &mut GlobalTriplets, views: &[WfrView<'_>], params: &WfrParams) -> Result<Vec<WfrStats>, FusionError> {
    if !(params.delta > 0.0) {
        return Err(FusionError::InvalidThreshold(params.delta));
    }
    let mut stats = Vec::with_capacity(views.len());
    for (v, view) in views.iter().enumerate() {
        let grid = (view.camera.intrinsics.width, view.camera.intrinsics.height);
        if view.depth.shape() != grid || view.local_weights.shape() != grid {
            return Err(FusionError::ShapeMismatch { view: v, expected: grid, actual: view.depth.shape() });
        }
        let buffer = ProjectionBuffer::build(&global.centers, &view.camera);
        let found = indicate_floaters(&buffer, view.depth, params.delta);
        let mut removed = 0;
        match params.strategy {
            WfrStrategy::DirectRemoval => {
                let mut keep = vec![true; global.len()];
                for ind in &found {
                    if std::mem::replace(&mut keep[ind.global], false) {
                        removed += 1;
                    }
                }
                global.retain_mask(&keep);
            }
            strategy => {
                for ind in &found {
                    let (wg, wl) = match strategy {
                        WfrStrategy::NeighborAccumulate => {
                            let bin = buffer.bin(ind.pixel.0, ind.pixel.1);
                            (
                                neighbor_weights(bin, ind.global_depth, &global.weights, params.delta),
                                neighbor_weights(bin, ind.local_depth, &global.weights, params.delta),
                            )
                        }
                        WfrStrategy::NoAccumulate => {
                            (global.weights[ind.global], view.local_weights.get(ind.pixel.0, ind.pixel.1))
                        }
                        _ => (1.0, 1.0),
                    };
                    apply_opacity_reduction(&mut global.opacity_scale[ind.global], wg, wl, params.epsilon_floor);
                }
            }
        }
        stats.push(WfrStats { view: v, indications: found.len(), removed });
    }
    Ok(stats)
}
