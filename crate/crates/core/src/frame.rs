//! Image containers and the per-timestamp camera frame.

use crate::geometry::{Camera, Intrinsics, Pose};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width * height] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self { width, height, data: vec![rgb; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Averages `factor x factor` blocks; trailing rows/columns that do not
    /// fill a whole block are dropped.
    pub fn block_mean(&self, factor: usize) -> ColorImage {
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        ColorImage::from_fn(w, h, |x, y| {
            let mut acc = [0.0; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = self.get(x * factor + dx, y * factor + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            acc.map(|v| v * norm)
        })
    }
}

/// Row-major scalar map. Depth maps use `0.0` as the invalid sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

pub type DepthMap = ScalarMap;
pub type ConfidenceMap = ScalarMap;

impl ScalarMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Bilinear resampling onto a `width x height` grid covering the same
    /// image extent (pixel centres aligned), clamping at the borders.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> ScalarMap {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        ScalarMap::from_fn(width, height, |x, y| {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            let top = self.get(x0, y0) * (1.0 - ax) + self.get(x1, y0) * ax;
            let bottom = self.get(x0, y1) * (1.0 - ax) + self.get(x1, y1) * ax;
            top * (1.0 - ay) + bottom * ay
        })
    }

    /// Reduces a depth map by `factor`: each block's mean when its valid
    /// depths agree within 5%, otherwise its nearest valid depth. Blocks with
    /// no valid depth stay invalid.
    pub fn block_reduce_depth(&self, factor: usize) -> DepthMap {
        let (w, h) = (self.width / factor, self.height / factor);
        ScalarMap::from_fn(w, h, |x, y| {
            let (mut lo, mut hi, mut sum, mut n) = (f64::INFINITY, 0.0f64, 0.0, 0usize);
            for dy in 0..factor {
                for dx in 0..factor {
                    let d = self.get(x * factor + dx, y * factor + dy);
                    if d > 0.0 && d.is_finite() {
                        lo = lo.min(d);
                        hi = hi.max(d);
                        sum += d;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                0.0
            } else if hi <= lo * 1.05 {
                sum / n as f64
            } else {
                lo
            }
        })
    }
}

/// Intrinsics, world-to-camera pose, image and optional depth for one timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub image: ColorImage,
    pub depth: Option<DepthMap>,
}

impl CameraFrame {
    pub fn camera(&self) -> Camera {
        Camera::new(self.intrinsics, self.pose)
    }
}
