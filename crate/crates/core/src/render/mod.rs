//! Tile-based CPU splatting of Gaussian primitives to color, depth and alpha.

pub mod metrics;

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::RenderError;
use crate::frame::{ColorImage, DepthMap, ScalarMap};
use crate::gaussians::GaussianPrimitive;
use crate::geometry::{perspective_jacobian, project_covariance, Camera};

pub use metrics::{depth_metrics, psnr, ssim, DepthMetrics};

/// Camera-frame depth below which a Gaussian is culled.
pub const NEAR_PLANE: f64 = 0.05;
pub const MAX_ALPHA: f64 = 0.99;
/// Blending stops once transmittance drops below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const TILE_SIZES: [usize; 3] = [8, 16, 32];

/// A Gaussian projected into one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatRecord {
    /// Index into the primitive slice.
    pub index: usize,
    pub mean: Vector2<f64>,
    pub covariance: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub conic: Matrix2<f64>,
    /// Three standard deviations along the major axis (px).
    pub radius: f64,
}

impl SplatRecord {
    /// Pixel-centre bounding box `(x0, y0, x1, y1)` clipped to the image, or
    /// `None` when it holds no pixel centre.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let x0 = (self.mean.x - self.radius).ceil().max(0.0);
        let y0 = (self.mean.y - self.radius).ceil().max(0.0);
        let x1 = (self.mean.x + self.radius).floor().min(width as f64 - 1.0);
        let y1 = (self.mean.y + self.radius).floor().min(height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            return None;
        }
        Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }

    /// Effective alpha at pixel `(x, y)` before clamping, or `None` when the
    /// pixel lies outside the splat's bounding box.
    #[inline]
    pub fn footprint(&self, x: f64, y: f64) -> Option<f64> {
        let dx = x - self.mean.x;
        let dy = y - self.mean.y;
        if dx.abs() > self.radius || dy.abs() > self.radius {
            return None;
        }
        let c = &self.conic;
        let power = -0.5 * (c[(0, 0)] * dx * dx + 2.0 * c[(0, 1)] * dx * dy + c[(1, 1)] * dy * dy);
        Some(self.opacity * power.exp())
    }
}

fn splat_for(index: usize, prim: &GaussianPrimitive, camera: &Camera) -> Option<SplatRecord> {
    let k = &camera.intrinsics;
    let x_cam = camera.pose.transform_point(&prim.mean);
    if !(x_cam.z >= NEAR_PLANE) {
        return None;
    }
    let jac = perspective_jacobian(k, &x_cam).ok()?;
    let covariance = project_covariance(&prim.covariance(), &camera.pose, &jac);
    let conic = covariance.try_inverse()?;
    let (a, b, d) = (covariance[(0, 0)], covariance[(0, 1)], covariance[(1, 1)]);
    let mid = 0.5 * (a + d);
    let lambda_max = mid + (mid * mid - (a * d - b * b)).max(0.0).sqrt();
    let splat = SplatRecord {
        index,
        mean: Vector2::new(k.fx * x_cam.x / x_cam.z + k.cx, k.fy * x_cam.y / x_cam.z + k.cy),
        covariance,
        depth: x_cam.z,
        opacity: prim.opacity(),
        color: prim.color(),
        conic,
        radius: 3.0 * lambda_max.sqrt(),
    };
    splat.pixel_bounds(k.width, k.height)?;
    Some(splat)
}

/// Projects every primitive, dropping those behind the near plane or whose
/// footprint misses the image. Output keeps primitive order.
pub fn prepare_splats(prims: &[GaussianPrimitive], camera: &Camera) -> Vec<SplatRecord> {
    prims
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| splat_for(i, p, camera))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub color: ColorImage,
    /// Alpha-weighted depth without normalisation; 0 where alpha < 1e-4.
    pub depth: DepthMap,
    pub alpha: ScalarMap,
}

impl RenderedImage {
    pub fn shape(&self) -> (usize, usize) {
        self.color.shape()
    }
}

/// Depth-sorted splats binned into screen tiles.
#[derive(Debug, Clone)]
pub(crate) struct Raster {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub tiles_x: usize,
    /// Sorted by depth, then primitive index.
    pub splats: Vec<SplatRecord>,
    /// Per tile, positions into `splats` in blending order.
    pub tiles: Vec<Vec<u32>>,
}

impl Raster {
    pub fn build(prims: &[GaussianPrimitive], camera: &Camera, tile_size: usize) -> Result<Self, RenderError> {
        if !TILE_SIZES.contains(&tile_size) {
            return Err(RenderError::InvalidTileSize(tile_size));
        }
        let (width, height) = (camera.intrinsics.width, camera.intrinsics.height);
        let mut splats = prepare_splats(prims, camera);
        splats.par_sort_unstable_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
        let tiles_x = width.div_ceil(tile_size);
        let tiles_y = height.div_ceil(tile_size);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (pos, s) in splats.iter().enumerate() {
            let Some((x0, y0, x1, y1)) = s.pixel_bounds(width, height) else { continue };
            for ty in y0 / tile_size..=y1 / tile_size {
                for tx in x0 / tile_size..=x1 / tile_size {
                    tiles[ty * tiles_x + tx].push(pos as u32);
                }
            }
        }
        Ok(Self { width, height, tile_size, tiles_x, splats, tiles })
    }

    /// Pixel ranges `(x0..x1, y0..y1)` covered by tile `t`.
    pub fn tile_pixels(&self, t: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0..(x0 + self.tile_size).min(self.width), y0..(y0 + self.tile_size).min(self.height))
    }

    /// Calls `visit(k, splat position, unclamped alpha, transmittance before
    /// it)` for every splat blended at `(x, y)`, front to back, where `k`
    /// indexes the tile list. Returns the final transmittance.
    #[inline]
    pub fn blend_pixel(&self, tile: &[u32], x: usize, y: usize, mut visit: impl FnMut(usize, usize, f64, f64)) -> f64 {
        let (px, py) = (x as f64, y as f64);
        let mut t = 1.0;
        for (k, &pos) in tile.iter().enumerate() {
            let s = &self.splats[pos as usize];
            let Some(raw) = s.footprint(px, py) else { continue };
            let a = raw.min(MAX_ALPHA);
            visit(k, pos as usize, raw, t);
            t *= 1.0 - a;
            if t < MIN_TRANSMITTANCE {
                break;
            }
        }
        t
    }
}

/// Front-to-back alpha blending of `prims` seen from `camera` on a black,
/// zero-depth background.
pub fn render(prims: &[GaussianPrimitive], camera: &Camera, tile_size: usize) -> Result<RenderedImage, RenderError> {
    let raster = Raster::build(prims, camera, tile_size)?;
    Ok(raster.render())
}

impl Raster {
    pub fn render(&self) -> RenderedImage {
        let (w, h) = (self.width, self.height);
        let tiles: Vec<Vec<(usize, [f64; 3], f64, f64)>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|t| {
                let (xs, ys) = self.tile_pixels(t);
                let mut out = Vec::with_capacity(xs.len() * ys.len());
                for y in ys {
                    for x in xs.clone() {
                        let mut color = [0.0; 3];
                        let mut depth = 0.0;
                        let transmittance = self.blend_pixel(&self.tiles[t], x, y, |_, pos, raw, tr| {
                            let s = &self.splats[pos];
                            let a = raw.min(MAX_ALPHA);
                            let wgt = a * tr;
                            for c in 0..3 {
                                color[c] += s.color[c] * wgt;
                            }
                            depth += s.depth * wgt;
                        });
                        out.push((y * w + x, color, depth, 1.0 - transmittance));
                    }
                }
                out
            })
            .collect();
        let mut color = ColorImage::new(w, h);
        let mut depth = ScalarMap::new(w, h);
        let mut alpha = ScalarMap::new(w, h);
        for (i, c, d, a) in tiles.into_iter().flatten() {
            color.data[i] = c;
            depth.data[i] = if a < MIN_TRANSMITTANCE { 0.0 } else { d };
            alpha.data[i] = a;
        }
        RenderedImage { color, depth, alpha }
    }
}
