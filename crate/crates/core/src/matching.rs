//! Hand-crafted matching features, nearby-view selection, plane-sweep cost
//! volumes and soft-argmax depth.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::MatchingError;
use crate::frame::{ColorImage, ConfidenceMap, DepthMap, ScalarMap};
use crate::geometry::{Intrinsics, Pose};

pub const FEATURE_CHANNELS: usize = 9;
/// Matching features and cost volumes live at 1/4 of the input resolution.
pub const FEATURE_DOWNSAMPLE: usize = 4;
/// Meters of translation equivalent to one radian of rotation in view distance.
pub const ROTATION_WEIGHT: f64 = 0.5;
const EPSILON_CHANNEL: f64 = 0.01;
/// Round-off slack when testing sample positions against the lattice.
const LATTICE_TOL: f64 = 1e-9;

/// Per-pixel feature vectors stored pixel-major (`channels` values per pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    /// Local luma variance before normalisation; used as a texture mask.
    pub luma_variance: Vec<f64>,
}

impl FeatureMap {
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Pixels whose local luma variance exceeds `threshold`.
    pub fn textured_mask(&self, threshold: f64) -> Vec<bool> {
        self.luma_variance.iter().map(|&v| v > threshold).collect()
    }
}

fn replicate(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

fn box3(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    acc += src[replicate(y as isize + dy, h) * w + replicate(x as isize + dx, w)];
                }
            }
            out[y * w + x] = acc / 9.0;
        }
    }
    out
}

fn sobel(src: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |x: isize, y: isize| src[replicate(y, h) * w + replicate(x, w)];
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = ((at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1)))
                / 8.0;
            gy[i] = ((at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1)))
                / 8.0;
        }
    }
    (gx, gy)
}

/// Nine-channel descriptor at quarter resolution: three mean-subtracted
/// colors, luma gradients at two smoothing scales, local luma variance and a
/// constant channel, L2-normalised per pixel.
pub fn compute_matching_features(image: &ColorImage) -> Result<FeatureMap, MatchingError> {
    if image.width < FEATURE_DOWNSAMPLE || image.height < FEATURE_DOWNSAMPLE {
        return Err(MatchingError::EmptyImage);
    }
    let small = image.block_mean(FEATURE_DOWNSAMPLE);
    let (w, h) = small.shape();
    let n = w * h;

    let channel = |c: usize| small.data.iter().map(|p| p[c]).collect::<Vec<_>>();
    let colors: Vec<Vec<f64>> = (0..3).map(channel).collect();
    let color_means: Vec<Vec<f64>> = colors.iter().map(|c| box3(c, w, h)).collect();
    let luma: Vec<f64> = small.data.iter().map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect();
    let (gx1, gy1) = sobel(&luma, w, h);
    let smooth = box3(&luma, w, h);
    let (gx2, gy2) = sobel(&smooth, w, h);
    let luma_sq: Vec<f64> = luma.iter().map(|v| v * v).collect();
    let mean_sq = box3(&luma_sq, w, h);
    let variance: Vec<f64> = mean_sq.iter().zip(&smooth).map(|(m2, m)| (m2 - m * m).max(0.0)).collect();

    let mut data = Vec::with_capacity(n * FEATURE_CHANNELS);
    for i in 0..n {
        let v = [
            colors[0][i] - color_means[0][i],
            colors[1][i] - color_means[1][i],
            colors[2][i] - color_means[2][i],
            gx1[i],
            gy1[i],
            gx2[i],
            gy2[i],
            variance[i],
            EPSILON_CHANNEL,
        ];
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        data.extend(v.iter().map(|a| a / norm));
    }
    Ok(FeatureMap { channels: FEATURE_CHANNELS, width: w, height: h, data, luma_variance: variance })
}

/// Pose distance: camera-centre distance plus `ROTATION_WEIGHT` times the
/// rotation angle.
pub fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    (a.camera_center() - b.camera_center()).norm() + ROTATION_WEIGHT * a.rotation_angle_to(b)
}

/// The `count` views closest to view `target`, nearest first, ties broken
/// by lower index.
pub fn select_nearby_views(poses: &[Pose], target: usize, count: usize) -> Result<Vec<usize>, MatchingError> {
    if target >= poses.len() {
        return Err(MatchingError::ViewOutOfRange { index: target, count: poses.len() });
    }
    if count >= poses.len() {
        return Err(MatchingError::TooManyNeighbors { requested: count, available: poses.len() - 1 });
    }
    let mut candidates: Vec<(f64, usize)> = poses
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(i, p)| (pose_distance(&poses[target], p), i))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(candidates.into_iter().take(count).map(|(_, i)| i).collect())
}

/// Geometry needed to sample a source view on a reference-view depth plane.
#[derive(Debug, Clone, Copy)]
struct PlaneWarp {
    ref_to_src: Pose,
    k_ref: Intrinsics,
    k_src: Intrinsics,
}

impl PlaneWarp {
    /// Source-image position of reference pixel `(x, y)` lifted to depth `d`.
    #[inline]
    fn source_position(&self, x: usize, y: usize, d: f64) -> Option<(f64, f64)> {
        let p_ref = Vector3::new(
            (x as f64 - self.k_ref.cx) / self.k_ref.fx * d,
            (y as f64 - self.k_ref.cy) / self.k_ref.fy * d,
            d,
        );
        let p = self.ref_to_src.transform_point(&p_ref);
        if !(p.z > 1e-9) {
            return None;
        }
        Some((self.k_src.fx * p.x / p.z + self.k_src.cx, self.k_src.fy * p.y / p.z + self.k_src.cy))
    }
}

/// Bilinear sample of `map` at `(sx, sy)`; `false` (and `out` zeroed) when the
/// position falls outside the pixel-centre lattice.
#[inline]
fn sample_bilinear(map: &FeatureMap, sx: f64, sy: f64, out: &mut [f64]) -> bool {
    out.iter_mut().for_each(|v| *v = 0.0);
    let (w, h) = (map.width, map.height);
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    if !(sx >= -LATTICE_TOL && sy >= -LATTICE_TOL && sx <= xmax + LATTICE_TOL && sy <= ymax + LATTICE_TOL) {
        return false;
    }
    let (sx, sy) = (sx.clamp(0.0, xmax), sy.clamp(0.0, ymax));
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let taps = [
        (x0, y0, (1.0 - ax) * (1.0 - ay)),
        (x1, y0, ax * (1.0 - ay)),
        (x0, y1, (1.0 - ax) * ay),
        (x1, y1, ax * ay),
    ];
    for (tx, ty, wt) in taps {
        if wt == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(map.pixel(tx, ty)) {
            *o += wt * v;
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpedFeatures {
    pub features: FeatureMap,
    pub valid: Vec<bool>,
}

/// Resamples `src` onto the reference view's fronto-parallel plane at depth
/// `depth`. `src_to_ref` carries source-camera points into the reference
/// camera frame.
pub fn warp_features(
    src: &FeatureMap,
    src_to_ref: &Pose,
    k_src: &Intrinsics,
    k_ref: &Intrinsics,
    depth: f64,
) -> WarpedFeatures {
    let warp = PlaneWarp { ref_to_src: src_to_ref.inverse(), k_ref: *k_ref, k_src: *k_src };
    let (w, h, c) = (k_ref.width, k_ref.height, src.channels);
    let mut data = vec![0.0; w * h * c];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let out = &mut data[i * c..(i + 1) * c];
            if let Some((sx, sy)) = warp.source_position(x, y, depth) {
                valid[i] = sample_bilinear(src, sx, sy, out);
            }
        }
    }
    WarpedFeatures {
        features: FeatureMap { channels: c, width: w, height: h, data, luma_variance: vec![0.0; w * h] },
        valid,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlaneSpacing {
    #[default]
    Uniform,
    Inverse,
}

/// `count` plane depths from `near` to `far` inclusive.
pub fn plane_depths(near: f64, far: f64, count: usize, spacing: PlaneSpacing) -> Result<Vec<f64>, MatchingError> {
    if !(near > 0.0 && far > near && count >= 2 && far.is_finite()) {
        return Err(MatchingError::InvalidDepthRange { near, far, planes: count });
    }
    let last = (count - 1) as f64;
    let mut planes: Vec<f64> = (0..count)
        .map(|i| {
            let t = i as f64 / last;
            match spacing {
                PlaneSpacing::Uniform => near + (far - near) * t,
                PlaneSpacing::Inverse => 1.0 / (1.0 / near + (1.0 / far - 1.0 / near) * t),
            }
        })
        .collect();
    planes[0] = near;
    planes[count - 1] = far;
    Ok(planes)
}

/// Matching scores stored plane-major: `scores[k * width * height + pixel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub planes: Vec<f64>,
    pub scores: Vec<f64>,
}

impl CostVolume {
    #[inline]
    pub fn score(&self, plane: usize, pixel: usize) -> f64 {
        self.scores[plane * self.width * self.height + pixel]
    }

    pub fn plane_slice(&self, plane: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.scores[plane * n..(plane + 1) * n]
    }

    /// Depth of the highest-scoring plane per pixel (lowest plane on ties).
    pub fn argmax_depth(&self) -> DepthMap {
        let n = self.width * self.height;
        let data = (0..n)
            .map(|p| {
                let mut best = 0;
                for k in 1..self.planes.len() {
                    if self.score(k, p) > self.score(best, p) {
                        best = k;
                    }
                }
                self.planes[best]
            })
            .collect();
        ScalarMap { width: self.width, height: self.height, data }
    }
}

/// One source view feeding a cost volume.
#[derive(Debug, Clone, Copy)]
pub struct Neighbor<'a> {
    pub features: &'a FeatureMap,
    pub intrinsics: Intrinsics,
    /// Carries source-camera points into the reference camera frame.
    pub src_to_ref: Pose,
}

#[inline]
fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na > 0.0 && nb > 0.0 {
        Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
    } else {
        None
    }
}

/// Mean cosine similarity between the reference features and each valid
/// warped neighbor, per plane and pixel. Pixels with no valid neighbor score 0.
pub fn build_cost_volume(
    reference: &FeatureMap,
    k_ref: &Intrinsics,
    neighbors: &[Neighbor<'_>],
    planes: &[f64],
) -> Result<CostVolume, MatchingError> {
    if neighbors.is_empty() {
        return Err(MatchingError::NoNeighbors);
    }
    let (w, h, c) = (reference.width, reference.height, reference.channels);
    if (k_ref.width, k_ref.height) != (w, h) {
        return Err(MatchingError::ShapeMismatch { expected: (w, h, c), actual: (k_ref.width, k_ref.height, c) });
    }
    for nb in neighbors {
        if nb.features.channels != c {
            return Err(MatchingError::ShapeMismatch {
                expected: (w, h, c),
                actual: (nb.features.width, nb.features.height, nb.features.channels),
            });
        }
    }
    let warps: Vec<PlaneWarp> = neighbors
        .iter()
        .map(|nb| PlaneWarp { ref_to_src: nb.src_to_ref.inverse(), k_ref: *k_ref, k_src: nb.intrinsics })
        .collect();
    let n = w * h;
    let mut scores = vec![0.0; n * planes.len()];
    scores.par_chunks_mut(n).zip(planes.par_iter()).for_each(|(slice, &d)| {
        let mut buf = vec![0.0; c];
        for y in 0..h {
            for x in 0..w {
                let (mut sum, mut count) = (0.0, 0usize);
                for (warp, nb) in warps.iter().zip(neighbors) {
                    let Some((sx, sy)) = warp.source_position(x, y, d) else { continue };
                    if !sample_bilinear(nb.features, sx, sy, &mut buf) {
                        continue;
                    }
                    if let Some(cs) = cosine(reference.pixel(x, y), &buf) {
                        sum += cs;
                        count += 1;
                    }
                }
                slice[y * w + x] = if count > 0 { sum / count as f64 } else { 0.0 };
            }
        }
    });
    Ok(CostVolume { width: w, height: h, planes: planes.to_vec(), scores })
}

/// 3x3 spatial box filter applied independently to every plane; border
/// windows average only in-bounds pixels.
pub fn smooth_cost_volume(cv: &CostVolume) -> CostVolume {
    let (w, h) = (cv.width, cv.height);
    let n = w * h;
    let mut scores = vec![0.0; cv.scores.len()];
    scores.par_chunks_mut(n).enumerate().for_each(|(k, out)| {
        let src = cv.plane_slice(k);
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut cnt) = (0.0, 0.0);
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        acc += src[yy * w + xx];
                        cnt += 1.0;
                    }
                }
                out[y * w + x] = acc / cnt;
            }
        }
    });
    CostVolume { width: w, height: h, planes: cv.planes.clone(), scores }
}

/// Expected plane depth under `softmax(scores / temperature)` and the peak
/// probability as confidence.
pub fn softargmax_depth(cv: &CostVolume, temperature: f64) -> Result<(DepthMap, ConfidenceMap), MatchingError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(MatchingError::InvalidTemperature(temperature));
    }
    let n = cv.width * cv.height;
    let (lo, hi) = (cv.planes[0], cv.planes[cv.planes.len() - 1]);
    let mut depth = vec![0.0; n];
    let mut conf = vec![0.0; n];
    depth.par_iter_mut().zip(conf.par_iter_mut()).enumerate().for_each(|(p, (d, c))| {
        let max = (0..cv.planes.len()).map(|k| cv.score(k, p)).fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut acc) = (0.0, 0.0);
        for (k, dk) in cv.planes.iter().enumerate() {
            let wk = ((cv.score(k, p) - max) / temperature).exp();
            z += wk;
            acc += wk * dk;
        }
        *d = (acc / z).clamp(lo, hi);
        *c = 1.0 / z;
    });
    Ok((
        ScalarMap { width: cv.width, height: cv.height, data: depth },
        ScalarMap { width: cv.width, height: cv.height, data: conf },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compose_transform;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn volume(planes: Vec<f64>, scores_per_pixel: &[Vec<f64>]) -> CostVolume {
        let n = scores_per_pixel.len();
        let k = planes.len();
        let mut scores = vec![0.0; n * k];
        for (p, s) in scores_per_pixel.iter().enumerate() {
            for kk in 0..k {
                scores[kk * n + p] = s[kk];
            }
        }
        CostVolume { width: n, height: 1, planes, scores }
    }

    #[test]
    fn constant_image_gives_identical_features() {
        let img = ColorImage::filled(16, 12, [0.5, 0.5, 0.5]);
        let f = compute_matching_features(&img).unwrap();
        assert_eq!(f.shape(), (4, 3));
        let first = f.pixel(0, 0).to_vec();
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(f.pixel(x, y), &first[..]);
                assert_eq!(&f.pixel(x, y)[3..7], &[0.0; 4]);
            }
        }
        assert_eq!(first[8], 1.0);
    }

    #[test]
    fn vertical_edge_peaks_x_gradient_on_edge() {
        let img = ColorImage::from_fn(64, 16, |x, _| if x < 32 { [0.1; 3] } else { [0.9; 3] });
        let f = compute_matching_features(&img).unwrap();
        // quarter-res edge between columns 7 and 8
        let y = 2;
        let gx: Vec<f64> = (0..16).map(|x| f.pixel(x, y)[3].abs()).collect();
        let peak = gx.iter().cloned().fold(0.0, f64::max);
        assert!(peak > 0.0);
        assert!(gx[7] == peak || gx[8] == peak);
        assert_eq!(gx[0], 0.0);
        assert_eq!(gx[15], 0.0);
        for x in 0..16 {
            assert_eq!(f.pixel(x, y)[4], 0.0);
        }
    }

    #[test]
    fn features_are_deterministic_and_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = ColorImage::from_fn(32, 24, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let a = compute_matching_features(&img).unwrap();
        let b = compute_matching_features(&img).unwrap();
        assert_eq!(a, b);
        for i in 0..a.width * a.height {
            let n: f64 = a.data[i * 9..(i + 1) * 9].iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    fn poses_on_x_line(xs: &[f64]) -> Vec<Pose> {
        xs.iter().map(|&x| Pose::from_translation(Vector3::new(-x, 0.0, 0.0))).collect()
    }

    #[test]
    fn nearby_views_on_a_line() {
        let poses = poses_on_x_line(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(select_nearby_views(&poses, 0, 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn nearby_views_tie_breaks_on_index() {
        let poses = poses_on_x_line(&[0.0, -1.0, 1.0]);
        assert_eq!(select_nearby_views(&poses, 0, 1).unwrap(), vec![1]);
        assert!(select_nearby_views(&poses, 0, 3).is_err());
    }

    #[test]
    fn nearby_views_match_exhaustive_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let poses: Vec<Pose> = (0..8)
                .map(|_| {
                    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0);
                    let r = nalgebra::Rotation3::from_scaled_axis(axis.normalize() * rng.gen_range(0.0..1.0));
                    let t = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                    Pose::new(r.into_inner(), t).unwrap()
                })
                .collect();
            let t = rng.gen_range(0..8);
            let got = select_nearby_views(&poses, t, 3).unwrap();
            // oracle: all orderings scored independently
            let mut all: Vec<usize> = (0..8).filter(|&i| i != t).collect();
            let dist = |i: usize| {
                let ci = poses[i].inverse().transform_point(&Vector3::zeros());
                let ct = poses[t].inverse().transform_point(&Vector3::zeros());
                let rel: Matrix3<f64> = poses[i].rotation().transpose() * poses[t].rotation();
                let ang = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
                (ci - ct).norm() + 0.5 * ang
            };
            all.sort_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap().then(a.cmp(&b)));
            assert_eq!(got, all[..3].to_vec());
        }
    }

    fn textured(w: usize, h: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ColorImage::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        compute_matching_features(&img).unwrap()
    }

    #[test]
    fn identity_warp_reproduces_features() {
        let f = textured(64, 48, 3);
        let k = Intrinsics { fx: 20.0, fy: 20.0, cx: 7.5, cy: 5.5, width: 16, height: 12 };
        let wf = warp_features(&f, &Pose::identity(), &k, &k, 2.0);
        assert!(wf.valid.iter().all(|&v| v));
        let max = wf.features.data.iter().zip(&f.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max < 1e-6, "{max}");
    }

    #[test]
    fn out_of_bounds_warp_is_zero_and_invalid() {
        let f = textured(64, 48, 4);
        let k = Intrinsics { fx: 20.0, fy: 20.0, cx: 7.5, cy: 5.5, width: 16, height: 12 };
        let shift = Pose::from_translation(Vector3::new(100.0, 0.0, 0.0));
        let wf = warp_features(&f, &shift, &k, &k, 2.0);
        assert!(wf.valid.iter().all(|&v| !v));
        assert!(wf.features.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warp_round_trip_on_smooth_features() {
        // smooth synthetic feature map (no normalisation needed for this check)
        let (w, h, c) = (40, 30, 3);
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
                data.extend([(fx * 3.0).sin(), (fy * 2.0).cos(), fx * fy]);
            }
        }
        let f = FeatureMap { channels: c, width: w, height: h, data, luma_variance: vec![0.0; w * h] };
        let k = Intrinsics { fx: 30.0, fy: 30.0, cx: 19.5, cy: 14.5, width: w, height: h };
        // reference camera translated along x by 0.1 m and z by 0.2 m
        let t = Vector3::new(0.1, 0.0, 0.2);
        let src_to_ref = Pose::from_translation(-t);
        let d = 3.0;
        let forward = warp_features(&f, &src_to_ref, &k, &k, d);
        // the reference plane z = d sits at z = d + 0.2 in the source frame
        let back = warp_features(&forward.features, &src_to_ref.inverse(), &k, &k, d + 0.2);
        let (mut sum, mut cnt) = (0.0, 0);
        for i in 0..w * h {
            if back.valid[i] {
                let (x, y) = (i % w, i / w);
                let (sx, sy) = {
                    let p = Pose::from_translation(-t).transform_point(&Vector3::new(
                        (x as f64 - k.cx) / k.fx * (d + 0.2),
                        (y as f64 - k.cy) / k.fy * (d + 0.2),
                        d + 0.2,
                    ));
                    (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
                };
                // only pixels whose forward sample was valid carry real data
                let (rx, ry) = (sx.round() as isize, sy.round() as isize);
                if rx < 1 || ry < 1 || rx >= w as isize - 1 || ry >= h as isize - 1 {
                    continue;
                }
                if !forward.valid[ry as usize * w + rx as usize] {
                    continue;
                }
                for ch in 0..c {
                    sum += (back.features.data[i * c + ch] - f.data[i * c + ch]).abs();
                    cnt += 1;
                }
            }
        }
        assert!(cnt > 1000);
        assert!(sum / (cnt as f64) < 0.05, "{}", sum / cnt as f64);
    }

    #[test]
    fn self_matching_scores_one_everywhere() {
        let f = textured(64, 48, 5);
        let k = Intrinsics { fx: 20.0, fy: 20.0, cx: 7.5, cy: 5.5, width: 16, height: 12 };
        let planes = plane_depths(0.5, 4.0, 8, PlaneSpacing::Inverse).unwrap();
        let nb = Neighbor { features: &f, intrinsics: k, src_to_ref: Pose::identity() };
        let cv = build_cost_volume(&f, &k, &[nb], &planes).unwrap();
        assert!(cv.scores.iter().all(|&s| (s - 1.0).abs() < 1e-9));
        // every plane ties, so soft-argmax returns the plane mean
        let (d, _) = softargmax_depth(&cv, 0.05).unwrap();
        let mean = planes.iter().sum::<f64>() / planes.len() as f64;
        assert!(d.data.iter().all(|v| (v - mean).abs() < 1e-9));
        assert!(build_cost_volume(&f, &k, &[], &planes).is_err());
    }

    #[test]
    fn cost_volume_scores_are_bounded() {
        let a = textured(64, 48, 6);
        let b = textured(64, 48, 7);
        let k = Intrinsics { fx: 20.0, fy: 20.0, cx: 7.5, cy: 5.5, width: 16, height: 12 };
        let planes = plane_depths(0.5, 4.0, 8, PlaneSpacing::Uniform).unwrap();
        let t = compose_transform(&Pose::from_translation(Vector3::new(0.2, 0.0, 0.0)), &Pose::identity());
        let nb = Neighbor { features: &b, intrinsics: k, src_to_ref: t };
        let cv = build_cost_volume(&a, &k, &[nb], &planes).unwrap();
        assert!(cv.scores.iter().all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn plane_depths_endpoints_and_monotone() {
        for spacing in [PlaneSpacing::Uniform, PlaneSpacing::Inverse] {
            let p = plane_depths(0.25, 8.0, 64, spacing).unwrap();
            assert_eq!(p[0], 0.25);
            assert_eq!(p[63], 8.0);
            assert!(p.windows(2).all(|w| w[1] > w[0]));
        }
        let u = plane_depths(1.0, 3.0, 3, PlaneSpacing::Uniform).unwrap();
        assert_eq!(u, vec![1.0, 2.0, 3.0]);
        assert!(plane_depths(2.0, 1.0, 4, PlaneSpacing::Uniform).is_err());
    }

    #[test]
    fn softargmax_peaked_uniform_and_symmetric() {
        let planes = vec![1.0, 2.0, 3.0, 4.0];
        let cv = volume(
            planes.clone(),
            &[vec![-1.0, -1.0, 1.0, -1.0], vec![0.3; 4], vec![1.0, -1.0, 1.0, -1.0]],
        );
        let (d, c) = softargmax_depth(&cv, 0.01).unwrap();
        assert!((d.data[0] - 3.0).abs() < 1e-4);
        assert!((d.data[1] - 2.5).abs() < 1e-12);
        assert!((d.data[2] - 2.0).abs() < 1e-12);
        assert!((c.data[1] - 0.25).abs() < 1e-12);
        assert!(c.data[0] > 0.99);
        assert!(softargmax_depth(&cv, 0.0).is_err());
    }

    #[test]
    fn low_temperature_converges_to_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let planes = plane_depths(0.25, 8.0, 32, PlaneSpacing::Inverse).unwrap();
        let pixels: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let mut s: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..0.9)).collect();
                s[rng.gen_range(0..32)] = 1.0;
                s
            })
            .collect();
        let cv = volume(planes, &pixels);
        let (d, _) = softargmax_depth(&cv, 1e-3).unwrap();
        let am = cv.argmax_depth();
        for (a, b) in d.data.iter().zip(&am.data) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn smoothing_preserves_constant_planes() {
        let cv = volume(vec![1.0, 2.0], &[vec![0.2, 0.4], vec![0.2, 0.4], vec![0.2, 0.4]]);
        let s = smooth_cost_volume(&cv);
        for (a, b) in s.scores.iter().zip(&cv.scores) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
