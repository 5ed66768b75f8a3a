//! Feed-forward reconstruction: depth prediction, lifting, fusion, floater
//! removal and decoding.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{FusionError, LiftError, MatchingError, Result};
use crate::frame::{CameraFrame, ConfidenceMap, DepthMap, ScalarMap};
use crate::gaussians::{
    decode_gaussians, lift_view, DecodeParams, GaussianPrimitive, GlobalTriplets, LocalTriplets, WEIGHT_RANGE,
};
use crate::geometry::compose_transform;
use crate::matching::{
    build_cost_volume, compute_matching_features, plane_depths, select_nearby_views, smooth_cost_volume,
    softargmax_depth, FeatureMap, Neighbor, FEATURE_DOWNSAMPLE,
};
use crate::ptf::{run_ptf, FusionStats};
use crate::wfr::{run_wfr, WfrStats, WfrView};

/// Quarter-resolution depth and confidence predicted for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPrediction {
    pub depth: DepthMap,
    pub confidence: ConfidenceMap,
}

/// Plane-sweep depth for every frame at `1/4` resolution.
pub fn predict_depths(frames: &[CameraFrame], config: &PipelineConfig) -> Result<Vec<DepthPrediction>> {
    if frames.len() < 2 {
        return Err(MatchingError::NoNeighbors.into());
    }
    let features: Vec<FeatureMap> =
        frames.iter().map(|f| compute_matching_features(&f.image)).collect::<std::result::Result<_, _>>()?;
    let poses: Vec<_> = frames.iter().map(|f| f.pose).collect();
    let planes = plane_depths(config.d_near, config.d_far, config.num_planes, config.plane_spacing)?;
    let count = config.num_neighbors.min(frames.len() - 1);
    let mut out = Vec::with_capacity(frames.len());
    for (v, frame) in frames.iter().enumerate() {
        let k_ref = frame.intrinsics.downscaled(FEATURE_DOWNSAMPLE);
        let nearby = select_nearby_views(&poses, v, count)?;
        let neighbors: Vec<Neighbor<'_>> = nearby
            .iter()
            .map(|&j| Neighbor {
                features: &features[j],
                intrinsics: frames[j].intrinsics.downscaled(FEATURE_DOWNSAMPLE),
                src_to_ref: compose_transform(&frames[j].pose, &frame.pose),
            })
            .collect();
        let mut cv = build_cost_volume(&features[v], &k_ref, &neighbors, &planes)?;
        if config.smooth_cost_volume {
            cv = smooth_cost_volume(&cv);
        }
        let (depth, confidence) = softargmax_depth(&cv, config.temperature)?;
        debug!("view {v}: cost volume over neighbours {nearby:?}");
        out.push(DepthPrediction { depth, confidence });
    }
    Ok(out)
}

/// Depth and weight maps on one view's lift grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftInput {
    pub depth: DepthMap,
    pub confidence: ConfidenceMap,
}

fn lift_grid(frame: &CameraFrame, stride: usize) -> (usize, usize) {
    (frame.intrinsics.width / stride, frame.intrinsics.height / stride)
}

/// Lift-grid depth from the frames' own depth maps, with constant weight.
fn gt_lift_inputs(frames: &[CameraFrame], config: &PipelineConfig) -> Result<Vec<LiftInput>> {
    frames
        .iter()
        .enumerate()
        .map(|(v, f)| {
            let depth = f.depth.as_ref().ok_or(LiftError::MissingDepth { view: v })?;
            let depth = depth.block_reduce_depth(config.stride);
            let (w, h) = depth.shape();
            Ok(LiftInput { depth, confidence: ScalarMap::filled(w, h, config.gt_confidence) })
        })
        .collect()
}

fn predicted_lift_inputs(frames: &[CameraFrame], config: &PipelineConfig) -> Result<Vec<LiftInput>> {
    let predictions = predict_depths(frames, config)?;
    Ok(frames
        .iter()
        .zip(predictions)
        .map(|(f, p)| {
            let (w, h) = lift_grid(f, config.stride);
            LiftInput { depth: p.depth.resize_bilinear(w, h), confidence: p.confidence.resize_bilinear(w, h) }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionStats {
    pub views: usize,
    pub lifted: Vec<usize>,
    pub fusion: Vec<FusionStats>,
    pub wfr: Vec<WfrStats>,
    pub global_triplets: usize,
    pub primitives: usize,
    pub total_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub primitives: Vec<GaussianPrimitive>,
    pub global: GlobalTriplets,
    /// Lift-grid inputs per view (predicted or ground truth).
    pub inputs: Vec<LiftInput>,
    pub stats: ReconstructionStats,
}

/// Lifts, fuses and cleans the views, then decodes primitives.
pub fn reconstruct(frames: &[CameraFrame], config: &PipelineConfig) -> Result<Reconstruction> {
    config.validate()?;
    if frames.is_empty() {
        return Err(FusionError::NoViews.into());
    }
    let inputs = if config.use_gt_depth { gt_lift_inputs(frames, config)? } else { predicted_lift_inputs(frames, config)? };
    let locals: Vec<LocalTriplets> = frames
        .iter()
        .zip(&inputs)
        .enumerate()
        .map(|(v, (f, inp))| lift_view(v, f, &inp.depth, &inp.confidence, config.stride))
        .collect::<std::result::Result<_, _>>()?;
    let (mut global, fusion) = run_ptf(&locals, &config.ptf_params())?;
    info!("fused {} views into {} triplets", frames.len(), global.len());

    let wfr = if config.enable_wfr {
        let weight_maps: Vec<ScalarMap> = inputs
            .iter()
            .map(|inp| {
                let mut w = inp.confidence.clone();
                for v in &mut w.data {
                    *v = v.clamp(WEIGHT_RANGE.0, WEIGHT_RANGE.1);
                }
                w
            })
            .collect();
        let views: Vec<WfrView<'_>> = locals
            .iter()
            .zip(&inputs)
            .zip(&weight_maps)
            .map(|((l, inp), w)| WfrView { camera: l.camera, depth: &inp.depth, local_weights: w })
            .collect();
        run_wfr(&mut global, &views, &config.wfr_params())?
    } else {
        Vec::new()
    };

    let decode = DecodeParams { base_scale_px: config.base_scale_px, focal_px: locals[0].camera.intrinsics.mean_focal() };
    let primitives = decode_gaussians(&global, &decode);
    let stats = ReconstructionStats {
        views: frames.len(),
        lifted: locals.iter().map(LocalTriplets::len).collect(),
        fusion,
        wfr,
        global_triplets: global.len(),
        primitives: primitives.len(),
        total_weight: global.total_weight(),
    };
    Ok(Reconstruction { primitives, global, inputs, stats })
}
