//! Per-scene refinement of decoded primitives against the training views,
//! anchored to the depth the feed-forward scene renders.

mod backward;

use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FinetuneError, RenderError};
use crate::frame::{CameraFrame, ColorImage, DepthMap};
use crate::gaussians::{GaussianPrimitive, SCALE_RANGE};
use crate::render::metrics::ssim_with_gradient;
use crate::render::{render, RenderedImage};

pub use backward::{render_backward, GaussianGradients, PixelGradients};

/// Depth renders of the scene before any update, one per training view.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorDepths {
    maps: Vec<DepthMap>,
}

impl AnchorDepths {
    pub fn render(scene: &[GaussianPrimitive], views: &[CameraFrame], tile_size: usize) -> Result<Self, RenderError> {
        let maps = views
            .iter()
            .map(|v| render(scene, &v.camera(), tile_size).map(|r| r.depth))
            .collect::<Result<_, _>>()?;
        Ok(Self { maps })
    }

    pub fn from_maps(maps: Vec<DepthMap>) -> Self {
        Self { maps }
    }

    pub fn get(&self, view: usize) -> &DepthMap {
        &self.maps[view]
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub color: f64,
    /// `1 - ssim`, or 0 when the structural term is off.
    pub ssim: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub use_ssim_loss: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.2, lambda2: 0.1, use_ssim_loss: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        if !(0.0..1.0).contains(&self.lambda1) || !(self.lambda2 >= 0.0) {
            return Err(FinetuneError::InvalidWeights { lambda1: self.lambda1, lambda2: self.lambda2 });
        }
        Ok(())
    }
}

fn l1_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(1 - λ1)·L1(color) + λ1·(1 - ssim) + λ2·L1(depth, anchor)`, the SSIM term
/// only when enabled, with its per-pixel gradients.
pub fn loss_rft(
    rendered: &RenderedImage,
    target: &ColorImage,
    anchor: &DepthMap,
    weights: &LossWeights,
) -> Result<(LossBreakdown, PixelGradients), FinetuneError> {
    weights.validate()?;
    let shape = rendered.shape();
    if target.shape() != shape {
        return Err(RenderError::ShapeMismatch(shape, target.shape()).into());
    }
    if anchor.shape() != shape {
        return Err(RenderError::ShapeMismatch(shape, anchor.shape()).into());
    }
    let n = rendered.color.data.len() as f64;
    let color_w = 1.0 - weights.lambda1;
    let mut grads = PixelGradients::zeros(shape.0, shape.1);
    let mut color = 0.0;
    let mut depth = 0.0;
    for i in 0..rendered.color.data.len() {
        for c in 0..3 {
            let diff = rendered.color.data[i][c] - target.data[i][c];
            color += diff.abs();
            grads.color[i][c] = color_w * l1_sign(diff) / (3.0 * n);
        }
        let diff = rendered.depth.data[i] - anchor.data[i];
        depth += diff.abs();
        grads.depth[i] = weights.lambda2 * l1_sign(diff) / n;
    }
    color /= 3.0 * n;
    depth /= n;
    let mut ssim_term = 0.0;
    if weights.use_ssim_loss {
        let (s, g) = ssim_with_gradient(&rendered.color, target)?;
        ssim_term = 1.0 - s;
        for (acc, gs) in grads.color.iter_mut().zip(&g) {
            for c in 0..3 {
                acc[c] -= weights.lambda1 * gs[c];
            }
        }
    }
    let total = color_w * color + weights.lambda1 * ssim_term + weights.lambda2 * depth;
    Ok((LossBreakdown { total, color, ssim: ssim_term, depth }, grads))
}

/// Step sizes per parameter group. The mean step is multiplied by the
/// scene extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub mean: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { mean: 1.6e-4, log_scale: 5e-3, opacity: 5e-2, color: 2.5e-3 }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;
/// Parameters per primitive: mean 3, log-scales 3, opacity logit 1, color 3.
const PARAMS_PER_PRIM: usize = 10;

/// Adaptive-moment optimizer state over all primitive parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub rates: LearningRates,
    /// Learning rate applied to means after extent scaling.
    pub mean_rate: f64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimState {
    pub fn new(count: usize, rates: LearningRates, scene_extent: f64) -> Self {
        Self {
            step: 0,
            rates,
            mean_rate: rates.mean * scene_extent,
            first: vec![0.0; count * PARAMS_PER_PRIM],
            second: vec![0.0; count * PARAMS_PER_PRIM],
        }
    }

    /// Applies one update; log-scales are kept inside the decoder's scale range.
    pub fn apply(&mut self, prims: &mut [GaussianPrimitive], grads: &GaussianGradients) {
        self.step += 1;
        let bias1 = 1.0 - BETA1.powi(self.step as i32);
        let bias2 = 1.0 - BETA2.powi(self.step as i32);
        let (lo, hi) = (SCALE_RANGE.0.ln(), SCALE_RANGE.1.ln());
        for (i, p) in prims.iter_mut().enumerate() {
            let base = i * PARAMS_PER_PRIM;
            let mut update = |slot: usize, value: &mut f64, grad: f64, rate: f64| {
                let m = &mut self.first[base + slot];
                let v = &mut self.second[base + slot];
                *m = BETA1 * *m + (1.0 - BETA1) * grad;
                *v = BETA2 * *v + (1.0 - BETA2) * grad * grad;
                *value -= rate * (*m / bias1) / ((*v / bias2).sqrt() + ADAM_EPS);
            };
            for a in 0..3 {
                update(a, &mut p.mean[a], grads.mean[i][a], self.mean_rate);
                update(3 + a, &mut p.log_scales[a], grads.log_scales[i][a], self.rates.log_scale);
                update(7 + a, &mut p.sh_dc[a], grads.sh_dc[i][a], self.rates.color);
            }
            update(6, &mut p.opacity_logit, grads.opacity_logit[i], self.rates.opacity);
            p.log_scales = p.log_scales.map(|s| s.clamp(lo, hi));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSampling {
    #[default]
    RoundRobin,
    /// Uniform choice seeded by `FinetuneConfig::seed`.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub weights: LossWeights,
    pub rates: LearningRates,
    pub sampling: ViewSampling,
    pub seed: u64,
    pub tile_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            rates: LearningRates::default(),
            sampling: ViewSampling::RoundRobin,
            seed: 0,
            tile_size: 16,
        }
    }
}

/// 1.1 x the largest camera-centre distance from the mean centre, or 1 for
/// a single viewpoint.
pub fn scene_extent(views: &[CameraFrame]) -> f64 {
    if views.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vector3<f64>> = views.iter().map(|v| v.pose.camera_center()).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if radius > 1e-9 {
        1.1 * radius
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub view: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    /// CSV with `# key = value` comment lines for `header`, then
    /// `iteration,view,total,color,ssim,depth`.
    pub fn to_csv(&self, header: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in header {
            let _ = writeln!(out, "# {k} = {v}");
        }
        out.push_str("iteration,view,total,color,ssim,depth\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.9e},{:.9e},{:.9e},{:.9e}",
                r.iteration, r.view, r.loss.total, r.loss.color, r.loss.ssim, r.loss.depth
            );
        }
        out
    }

    /// Moving average of the total loss over `window` rows.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let totals: Vec<f64> = self.rows.iter().map(|r| r.loss.total).collect();
        totals.windows(window.max(1)).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub scene: Vec<GaussianPrimitive>,
    pub trace: LossTrace,
}

/// Runs `iters` optimisation steps over the training views. Quaternions stay
/// fixed and the primitive count never changes.
pub fn run_finetune(
    scene: &[GaussianPrimitive],
    views: &[CameraFrame],
    anchors: &AnchorDepths,
    iters: usize,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome, FinetuneError> {
    config.weights.validate()?;
    if views.is_empty() {
        return Err(FinetuneError::NoViews);
    }
    if anchors.len() != views.len() {
        return Err(FinetuneError::AnchorCount { views: views.len(), anchors: anchors.len() });
    }
    let mut prims = scene.to_vec();
    let mut state = OptimState::new(prims.len(), config.rates, scene_extent(views));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = LossTrace::default();
    let mut initial = None;
    for iteration in 0..iters {
        let view = match config.sampling {
            ViewSampling::RoundRobin => iteration % views.len(),
            ViewSampling::Random => rng.gen_range(0..views.len()),
        };
        let frame = &views[view];
        let camera = frame.camera();
        let rendered = render(&prims, &camera, config.tile_size)?;
        let (loss, pixel_grads) = loss_rft(&rendered, &frame.image, anchors.get(view), &config.weights)?;
        let first = *initial.get_or_insert(loss.total);
        if !loss.total.is_finite() || (first > 0.0 && loss.total > 10.0 * first) {
            return Err(FinetuneError::Diverged { iteration, loss: loss.total, initial: first });
        }
        trace.rows.push(TraceRow { iteration, view, loss });
        let grads = render_backward(&prims, &camera, config.tile_size, &pixel_grads)?;
        state.apply(&mut prims, &grads);
    }
    Ok(FinetuneOutcome { scene: prims, trace })
}
