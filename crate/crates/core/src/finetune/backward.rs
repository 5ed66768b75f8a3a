//! Analytic gradients of the tile renderer.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::RenderError;
use crate::gaussians::{GaussianPrimitive, SH_C0};
use crate::geometry::{perspective_jacobian, Camera};
use crate::render::{Raster, MAX_ALPHA};

/// Upstream gradients of a scalar loss with respect to each rendered pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGradients {
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl PixelGradients {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { color: vec![[0.0; 3]; width * height], depth: vec![0.0; width * height] }
    }
}

/// Loss gradient per primitive in the optimisation parameterisation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGradients {
    pub mean: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    pub sh_dc: Vec<Vector3<f64>>,
}

impl GaussianGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![Vector3::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            opacity_logit: vec![0.0; n],
            sh_dc: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Image-space gradient of one splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: Vector2<f64>,
    /// With respect to the full (symmetric) conic matrix.
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
    }
}

/// One blended term at a pixel, kept for the reverse sweep.
struct Term {
    k: usize,
    pos: usize,
    raw: f64,
    transmittance: f64,
}

fn tile_gradients(raster: &Raster, t: usize, upstream: &PixelGradients) -> Vec<SplatGrad> {
    let list = &raster.tiles[t];
    let mut grads = vec![SplatGrad::default(); list.len()];
    let mut terms = Vec::new();
    let (xs, ys) = raster.tile_pixels(t);
    for y in ys {
        for x in xs.clone() {
            let i = y * raster.width + x;
            let g_color = Vector3::from(upstream.color[i]);
            let g_depth = upstream.depth[i];
            if g_color == Vector3::zeros() && g_depth == 0.0 {
                continue;
            }
            terms.clear();
            raster.blend_pixel(list, x, y, |k, pos, raw, transmittance| terms.push(Term { k, pos, raw, transmittance }));
            let mut behind_color = Vector3::zeros();
            let mut behind_depth = 0.0;
            for term in terms.iter().rev() {
                let s = &raster.splats[term.pos];
                let a = term.raw.min(MAX_ALPHA);
                let weight = a * term.transmittance;
                let g = &mut grads[term.k];
                g.color += g_color * weight;
                g.depth += g_depth * weight;
                let d_a = term.transmittance * (g_color.dot(&s.color) + g_depth * s.depth)
                    - (g_color.dot(&behind_color) + g_depth * behind_depth) / (1.0 - a);
                behind_color += s.color * weight;
                behind_depth += s.depth * weight;
                if term.raw > MAX_ALPHA {
                    continue;
                }
                let delta = Vector2::new(x as f64, y as f64) - s.mean;
                let footprint = (-0.5 * delta.dot(&(s.conic * delta))).exp();
                g.opacity += d_a * footprint;
                let d_power = d_a * term.raw;
                g.mean += s.conic * delta * d_power;
                g.conic -= delta * delta.transpose() * (0.5 * d_power);
            }
        }
    }
    grads
}

/// `∂J/∂x_cam` contracted with `dl_dj`.
fn jacobian_pullback(fx: f64, fy: f64, x: &Vector3<f64>, dl_dj: &Matrix2x3<f64>) -> Vector3<f64> {
    let iz = 1.0 / x.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    Vector3::new(
        dl_dj[(0, 2)] * (-fx * iz2),
        dl_dj[(1, 2)] * (-fy * iz2),
        dl_dj[(0, 0)] * (-fx * iz2)
            + dl_dj[(0, 2)] * (2.0 * fx * x.x * iz3)
            + dl_dj[(1, 1)] * (-fy * iz2)
            + dl_dj[(1, 2)] * (2.0 * fy * x.y * iz3),
    )
}

/// Gradients of a loss with respect to every primitive given its gradient
/// with respect to the rendered color and depth. Blending is recomputed
/// from the same tiles the forward pass uses.
pub fn render_backward(
    prims: &[GaussianPrimitive],
    camera: &Camera,
    tile_size: usize,
    upstream: &PixelGradients,
) -> Result<GaussianGradients, RenderError> {
    let raster = Raster::build(prims, camera, tile_size)?;
    let n_pix = raster.width * raster.height;
    if upstream.color.len() != n_pix || upstream.depth.len() != n_pix {
        let got = (upstream.color.len(), upstream.depth.len());
        return Err(RenderError::ShapeMismatch((raster.width, raster.height), got));
    }
    let per_tile: Vec<Vec<SplatGrad>> =
        (0..raster.tiles.len()).into_par_iter().map(|t| tile_gradients(&raster, t, upstream)).collect();
    let mut splat_grads = vec![SplatGrad::default(); raster.splats.len()];
    for (t, grads) in per_tile.iter().enumerate() {
        for (k, g) in grads.iter().enumerate() {
            splat_grads[raster.tiles[t][k] as usize].add(g);
        }
    }

    let k = &camera.intrinsics;
    let rot_w = camera.pose.rotation();
    let chained: Vec<(usize, Vector3<f64>, Vector3<f64>, f64, Vector3<f64>)> = raster
        .splats
        .par_iter()
        .zip(splat_grads.par_iter())
        .map(|(s, g)| {
            let prim = &prims[s.index];
            let x_cam = camera.pose.transform_point(&prim.mean);
            let jac = perspective_jacobian(k, &x_cam).expect("splat passed the near-plane cull");
            let m = jac * rot_w;
            let rot = prim.rotation_matrix();
            let scales = prim.scales();
            let sigma3 = rot * Matrix3::from_diagonal(&scales.map(|v| v * v)) * rot.transpose();

            // conic = cov2d^-1
            let g_cov2 = -(s.conic * g.conic * s.conic);
            let g_cov2 = 0.5 * (g_cov2 + g_cov2.transpose());
            let g_sigma3 = m.transpose() * g_cov2 * m;
            let g_m = 2.0 * g_cov2 * m * sigma3;
            let g_jac = g_m * rot_w.transpose();

            let iz = 1.0 / x_cam.z;
            let mut g_cam = jacobian_pullback(k.fx, k.fy, &x_cam, &g_jac);
            g_cam.x += g.mean.x * k.fx * iz;
            g_cam.y += g.mean.y * k.fy * iz;
            g_cam.z += -g.mean.x * k.fx * x_cam.x * iz * iz - g.mean.y * k.fy * x_cam.y * iz * iz + g.depth;
            let g_mean = rot_w.transpose() * g_cam;

            let local = rot.transpose() * g_sigma3 * rot;
            let g_log_scales = Vector3::from_fn(|i, _| 2.0 * scales[i] * scales[i] * local[(i, i)]);

            let g_logit = g.opacity * s.opacity * (1.0 - s.opacity);
            let g_sh = Vector3::from_fn(|i, _| {
                let c = 0.5 + SH_C0 * prim.sh_dc[i];
                if c > 0.0 && c < 1.0 {
                    g.color[i] * SH_C0
                } else {
                    0.0
                }
            });
            (s.index, g_mean, g_log_scales, g_logit, g_sh)
        })
        .collect();

    let mut out = GaussianGradients::zeros(prims.len());
    for (i, gm, gs, go, gc) in chained {
        out.mean[i] = gm;
        out.log_scales[i] = gs;
        out.opacity_logit[i] = go;
        out.sh_dc[i] = gc;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use crate::render::render;

    fn camera() -> Camera {
        Camera::new(Intrinsics::new(20.0, 20.0, 7.0, 7.0, 15, 15).unwrap(), Pose::identity())
    }

    #[test]
    fn single_splat_red_channel_gradient_is_effective_alpha() {
        let cam = camera();
        let g = GaussianPrimitive::new(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.6, [0.3, 0.4, 0.5]);
        let mut up = PixelGradients::zeros(15, 15);
        up.color[7 * 15 + 7] = [1.0, 0.0, 0.0];
        let grads = render_backward(&[g], &cam, 16, &up).unwrap();
        assert!((grads.sh_dc[0].x - 0.6 * SH_C0).abs() < 1e-12);
        assert_eq!(grads.sh_dc[0].y, 0.0);
        assert_eq!(grads.sh_dc[0].z, 0.0);
        let img = render(&[g], &cam, 16).unwrap();
        assert!((img.color.get(7, 7)[0] - 0.3 * 0.6).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cam = camera();
        let g = GaussianPrimitive::new(Vector3::new(0.05, -0.02, 1.5), 0.1, 0.6, [0.3, 0.4, 0.5]);
        let grads = render_backward(&[g, g], &cam, 8, &PixelGradients::zeros(15, 15)).unwrap();
        assert_eq!(grads, GaussianGradients::zeros(2));
    }

    fn linear_loss(prims: &[GaussianPrimitive], cam: &Camera, up: &PixelGradients) -> f64 {
        let img = render(prims, cam, 8).unwrap();
        let mut l = 0.0;
        for i in 0..up.depth.len() {
            for c in 0..3 {
                l += up.color[i][c] * img.color.data[i][c];
            }
            l += up.depth[i] * img.depth.data[i];
        }
        l
    }

    #[test]
    fn gradients_match_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pose = Pose::look_at(Vector3::new(0.3, -0.2, -0.5), Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.1, -1.0, 0.0)).unwrap();
        let cam = Camera::new(Intrinsics::new(18.0, 19.0, 7.5, 7.2, 16, 16).unwrap(), pose);
        // distinct depths keep the blending order fixed under perturbation
        let mut prims: Vec<GaussianPrimitive> = (0..5)
            .map(|k| {
                let local = Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 1.5 + 0.25 * k as f64);
                let mut g = GaussianPrimitive::new(
                    pose.inverse().transform_point(&local),
                    1.0,
                    rng.gen_range(0.1..0.8),
                    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
                );
                g.log_scales = Vector3::new(rng.gen_range(-0.7..-0.4), rng.gen_range(-0.7..-0.4), rng.gen_range(-0.7..-0.4));
                g.rotation = [rng.gen_range(0.5..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
                g
            })
            .collect();
        let mut up = PixelGradients::zeros(16, 16);
        for i in 0..256 {
            up.color[i] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            up.depth[i] = rng.gen_range(-1.0..1.0);
        }
        let grads = render_backward(&prims, &cam, 8, &up).unwrap();
        let h = 1e-4;
        let mut check = |get: &dyn Fn(&mut GaussianPrimitive) -> &mut f64, analytic: f64, what: &str, i: usize| {
            let orig = *get(&mut prims[i]);
            *get(&mut prims[i]) = orig + h;
            let lp = linear_loss(&prims, &cam, &up);
            *get(&mut prims[i]) = orig - h;
            let lm = linear_loss(&prims, &cam, &up);
            *get(&mut prims[i]) = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-3, "{what}[{i}]: fd {fd} analytic {analytic}");
        };
        for i in 0..5 {
            for a in 0..3 {
                check(&|p| &mut p.mean[a], grads.mean[i][a], "mean", i);
                check(&|p| &mut p.log_scales[a], grads.log_scales[i][a], "log_scale", i);
                check(&|p| &mut p.sh_dc[a], grads.sh_dc[i][a], "sh", i);
            }
            check(&|p| &mut p.opacity_logit, grads.opacity_logit[i], "opacity", i);
        }
    }
}
