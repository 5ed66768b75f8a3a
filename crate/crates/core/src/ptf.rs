//! Pixel-wise triplet fusion: project the running global set into each new
//! view, pair each local triplet with the nearest global in its pixel bin,
//! and merge the pairs by weight.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::FusionError;
use crate::gaussians::{merge_unfused, GlobalTriplets, LocalTriplets, TripletFeature, FEATURE_DIM};
use crate::geometry::Camera;

/// Global projections grouped by rounded pixel, stored as compressed rows.
/// Entries inside a bin are in ascending global index.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBuffer {
    pub width: usize,
    pub height: usize,
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl ProjectionBuffer {
    /// Projects every center into `camera` and bins those in front of it
    /// whose round-half-up pixel lies inside the image.
    pub fn build(centers: &[Vector3<f64>], camera: &Camera) -> Self {
        let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
        let binned: Vec<Option<(usize, f64)>> = centers
            .par_iter()
            .map(|c| {
                let p = camera.project(c).ok()?;
                let (x, y) = p.pixel_bin(w, h)?;
                Some((y * w + x, p.depth))
            })
            .collect();
        let mut offsets = vec![0usize; w * h + 1];
        for (bin, _) in binned.iter().flatten() {
            offsets[bin + 1] += 1;
        }
        for i in 0..w * h {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut entries = vec![(0usize, 0.0f64); offsets[w * h]];
        for (j, b) in binned.iter().enumerate() {
            if let Some((bin, depth)) = b {
                entries[cursor[*bin]] = (j, *depth);
                cursor[*bin] += 1;
            }
        }
        Self { width: w, height: h, offsets, entries }
    }

    pub fn bin(&self, x: usize, y: usize) -> &[(usize, f64)] {
        let i = y * self.width + x;
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Total number of binned projections.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Nearest entry of a bin (smallest depth, then smallest index).
    pub fn nearest(&self, x: usize, y: usize) -> Option<(usize, f64)> {
        nearest_entry(self.bin(x, y))
    }
}

pub(crate) fn nearest_entry(bin: &[(usize, f64)]) -> Option<(usize, f64)> {
    bin.iter().copied().reduce(|best, e| if e.1 < best.1 || (e.1 == best.1 && e.0 < best.0) { e } else { best })
}

pub fn bin_projections(global: &GlobalTriplets, camera: &Camera) -> ProjectionBuffer {
    ProjectionBuffer::build(&global.centers, camera)
}

/// Depth test deciding whether a local triplet merges with the nearest global.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    /// `d_local - d_global > -delta`: also absorbs globals floating in front.
    #[default]
    Broad,
    /// `|d_local - d_global| < delta`.
    Symmetric,
}

impl FusionRule {
    #[inline]
    pub fn accepts(self, local_depth: f64, global_depth: f64, delta: f64) -> bool {
        match self {
            FusionRule::Broad => local_depth - global_depth > -delta,
            FusionRule::Symmetric => (local_depth - global_depth).abs() < delta,
        }
    }
}

/// Validated `(local index, global index)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
    pub delta: f64,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Pairs each local triplet with the nearest global projection in its bin
/// when `rule` accepts the depth gap. Locals are scanned in storage
/// (row-major) order and a global already claimed is not offered again.
pub fn pixel_align(
    buffer: &ProjectionBuffer,
    local: &LocalTriplets,
    delta: f64,
    rule: FusionRule,
) -> Result<CorrespondenceSet, FusionError> {
    if !(delta > 0.0) {
        return Err(FusionError::InvalidThreshold(delta));
    }
    let grid = local.grid();
    if grid != (buffer.width, buffer.height) {
        return Err(FusionError::ShapeMismatch { view: local.view, expected: (buffer.width, buffer.height), actual: grid });
    }
    let mut claimed = std::collections::HashSet::new();
    let mut pairs = Vec::new();
    for (i, &(x, y)) in local.pixels.iter().enumerate() {
        let Some((j, dg)) = buffer.nearest(x, y) else { continue };
        if rule.accepts(local.depths[i], dg, delta) && claimed.insert(j) {
            pairs.push((i, j));
        }
    }
    Ok(CorrespondenceSet { pairs, delta })
}

/// Weight-proportional blend of two latent features.
pub fn fuse_features(f_local: &TripletFeature, f_global: &TripletFeature, w_local: f64, w_global: f64) -> TripletFeature {
    let t = w_local / (w_local + w_global);
    let mut out = [0.0; FEATURE_DIM];
    for k in 0..FEATURE_DIM {
        out[k] = f_global[k] + t * (f_local[k] - f_global[k]);
    }
    out
}

/// Merges every pair into its global entry, then appends the unpaired locals.
/// Returns the number of appended triplets.
pub fn fuse_pairs(
    global: &mut GlobalTriplets,
    local: &LocalTriplets,
    pairs: &CorrespondenceSet,
) -> Result<usize, FusionError> {
    let mut fused_local = vec![false; local.len()];
    let mut fused_global = vec![false; global.len()];
    for &(i, m) in &pairs.pairs {
        if i >= local.len() || m >= global.len() {
            return Err(FusionError::PairOutOfRange { local: i, global: m });
        }
        if std::mem::replace(&mut fused_global[m], true) {
            return Err(FusionError::DuplicateGlobal(m));
        }
        if std::mem::replace(&mut fused_local[i], true) {
            return Err(FusionError::DuplicateLocal(i));
        }
    }
    for &(i, m) in &pairs.pairs {
        let (wl, wg) = (local.weights[i], global.weights[m]);
        let t = wl / (wl + wg);
        let step = (local.centers[i] - global.centers[m]) * t;
        global.centers[m] += step;
        global.lift_depths[m] += (local.depths[i] - global.lift_depths[m]) * t;
        global.features[m] = fuse_features(&local.features[i], &global.features[m], wl, wg);
        global.weights[m] = wl + wg;
    }
    Ok(merge_unfused(global, local, &fused_local))
}

/// Per-view bookkeeping emitted by [`run_ptf`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionStats {
    pub view: usize,
    /// Triplets lifted from this view.
    pub lifted: usize,
    pub pairs: usize,
    pub appended: usize,
    /// Global count after this view.
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PtfParams {
    pub delta: f64,
    pub rule: FusionRule,
    /// With fusion off every local triplet is appended unchanged.
    pub enabled: bool,
}

impl Default for PtfParams {
    fn default() -> Self {
        Self { delta: 0.1, rule: FusionRule::Broad, enabled: true }
    }
}

/// Sequential fusion of all views in order.
pub fn run_ptf(views: &[LocalTriplets], params: &PtfParams) -> Result<(GlobalTriplets, Vec<FusionStats>), FusionError> {
    if views.is_empty() {
        return Err(FusionError::NoViews);
    }
    let mut global = GlobalTriplets::default();
    let mut stats = Vec::with_capacity(views.len());
    for local in views {
        let wrap = |e: FusionError| FusionError::View { view: local.view, source: Box::new(e) };
        let pairs = if params.enabled && !global.is_empty() {
            let buffer = bin_projections(&global, &local.camera);
            pixel_align(&buffer, local, params.delta, params.rule).map_err(wrap)?
        } else {
            CorrespondenceSet { pairs: Vec::new(), delta: params.delta }
        };
        let appended = fuse_pairs(&mut global, local, &pairs).map_err(wrap)?;
        stats.push(FusionStats {
            view: local.view,
            lifted: local.len(),
            pairs: pairs.len(),
            appended,
            total: global.len(),
        });
    }
    Ok((global, stats))
}
