//! Image and depth quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::RenderError;
use crate::frame::{ColorImage, DepthMap};

/// PSNR reported for identical images.
pub const PSNR_IDENTICAL: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_shape(a: (usize, usize), b: (usize, usize)) -> Result<(), RenderError> {
    if a != b {
        return Err(RenderError::ShapeMismatch(a, b));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit-range images, in dB.
pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64, RenderError> {
    check_shape(a.shape(), b.shape())?;
    let n = (a.data.len() * 3) as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_IDENTICAL))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Valid-mode separable filtering of a `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-size plane back to `w x h`.
fn filter_valid_adjoint(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for i in 0..SSIM_WINDOW {
                rows[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for i in 0..SSIM_WINDOW {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn channel(img: &ColorImage, c: usize) -> Vec<f64> {
    img.data.iter().map(|p| p[c]).collect()
}

/// Mean SSIM over all valid 11x11 Gaussian windows and the three channels,
/// with the gradient of that mean with respect to `a` when requested.
fn ssim_impl(a: &ColorImage, b: &ColorImage, want_grad: bool) -> Result<(f64, Vec<[f64; 3]>), RenderError> {
    check_shape(a.shape(), b.shape())?;
    let (w, h) = a.shape();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(RenderError::ImageTooSmall((w, h), SSIM_WINDOW));
    }
    let k = gaussian_kernel();
    let valid = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW)) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![[0.0; 3]; w * h] } else { Vec::new() };
    for c in 0..3 {
        let (x, y) = (channel(a, c), channel(b, c));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = filter_valid(&x, w, h, &k);
        let mu_y = filter_valid(&y, w, h, &k);
        let e_xx = filter_valid(&xx, w, h, &k);
        let e_yy = filter_valid(&yy, w, h, &k);
        let e_xy = filter_valid(&xy, w, h, &k);
        let n = mu_x.len();
        let (mut d_mu, mut d_var, mut d_cov) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for p in 0..n {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let var_x = e_xx[p] - mx * mx;
            let var_y = e_yy[p] - my * my;
            let cov = e_xy[p] - mx * my;
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * cov + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = var_x + var_y + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let ds_dmu = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
                let ds_dvar = -s / b2;
                let ds_dcov = 2.0 * a1 / (b1 * b2);
                d_var[p] = ds_dvar;
                d_cov[p] = ds_dcov;
                d_mu[p] = ds_dmu - 2.0 * ds_dvar * mx - ds_dcov * my;
            }
        }
        if want_grad {
            let g_mu = filter_valid_adjoint(&d_mu, w, h, &k);
            let g_var = filter_valid_adjoint(&d_var, w, h, &k);
            let g_cov = filter_valid_adjoint(&d_cov, w, h, &k);
            let norm = 1.0 / (3.0 * valid);
            for q in 0..w * h {
                grad[q][c] = norm * (g_mu[q] + 2.0 * x[q] * g_var[q] + y[q] * g_cov[q]);
            }
        }
    }
    Ok((total / (3.0 * valid), grad))
}

/// Mean structural similarity (11 px Gaussian window, sigma 1.5).
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64, RenderError> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// [`ssim`] together with its gradient with respect to `a`.
pub fn ssim_with_gradient(a: &ColorImage, b: &ColorImage) -> Result<(f64, Vec<[f64; 3]>), RenderError> {
    ssim_impl(a, b, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_diff: f64,
    pub abs_rel: f64,
    pub delta_1_25: f64,
    pub delta_1_1: f64,
    /// Pixels valid in both maps.
    pub valid_pixels: usize,
}

/// Depth accuracy over pixels where both maps are positive.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics, RenderError> {
    check_shape(pred.shape(), gt.shape())?;
    let (mut diff, mut rel, mut d125, mut d11, mut n) = (0.0, 0.0, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if !(p > 0.0 && g > 0.0) {
            continue;
        }
        n += 1;
        diff += (p - g).abs();
        rel += (p - g).abs() / g;
        let ratio = (p / g).max(g / p);
        d125 += (ratio < 1.25) as usize;
        d11 += (ratio < 1.1) as usize;
    }
    if n == 0 {
        return Err(RenderError::NoValidPixels);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_diff: diff / nf,
        abs_rel: rel / nf,
        delta_1_25: d125 as f64 / nf,
        delta_1_1: d11 as f64 / nf,
        valid_pixels: n,
    })
}
