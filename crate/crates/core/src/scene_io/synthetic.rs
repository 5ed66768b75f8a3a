//! Ray-traced textured box rooms with exact depth, used as test scenes.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::SceneIoError;
use crate::frame::{CameraFrame, ColorImage, DepthMap, ScalarMap};
use crate::geometry::{Intrinsics, Pose};

/// Axis-aligned room seen from the inside; `y` points up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl RoomBox {
    pub fn contains_strictly(&self, p: &Vector3<f64>, margin: f64) -> bool {
        (0..3).all(|i| p[i] > self.min[i] + margin && p[i] < self.max[i] - margin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloaterSphere {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub color: [f64; 3],
    /// Frames where the sphere exists; empty means every frame.
    #[serde(default)]
    pub visible_in: Vec<usize>,
    /// Only the depth map sees the sphere (a depth outlier); the color image
    /// shows what lies behind it.
    #[serde(default)]
    pub depth_only: bool,
}

impl FloaterSphere {
    fn present_in(&self, frame: usize) -> bool {
        self.visible_in.is_empty() || self.visible_in.contains(&frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    /// Eyes evenly spaced on a horizontal arc around `center`, all looking
    /// at `target`. Angles in radians, measured from +x towards +z.
    Orbit { center: Vector3<f64>, radius: f64, start_angle: f64, sweep: f64, target: Vector3<f64> },
    /// Eye and look-at point both move linearly from start to end.
    Linear { eye_start: Vector3<f64>, eye_end: Vector3<f64>, target_start: Vector3<f64>, target_end: Vector3<f64> },
    /// Explicit `(eye, target)` pairs.
    Explicit(Vec<(Vector3<f64>, Vector3<f64>)>),
}

impl Trajectory {
    fn lerp(a: &Vector3<f64>, b: &Vector3<f64>, t: f64) -> Vector3<f64> {
        a + (b - a) * t
    }

    /// `(eye, target)` for each of `count` frames (ignored for explicit lists).
    pub fn viewpoints(&self, count: usize) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        let param = |i: usize| if count > 1 { i as f64 / (count - 1) as f64 } else { 0.5 };
        match self {
            Trajectory::Orbit { center, radius, start_angle, sweep, target } => (0..count)
                .map(|i| {
                    let a = start_angle + sweep * param(i);
                    (center + Vector3::new(a.cos(), 0.0, a.sin()) * *radius, *target)
                })
                .collect(),
            Trajectory::Linear { eye_start, eye_end, target_start, target_end } => (0..count)
                .map(|i| (Self::lerp(eye_start, eye_end, param(i)), Self::lerp(target_start, target_end, param(i))))
                .collect(),
            Trajectory::Explicit(list) => list.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub room: RoomBox,
    #[serde(default)]
    pub floaters: Vec<FloaterSphere>,
    pub trajectory: Trajectory,
    pub frames: usize,
    pub intrinsics: Intrinsics,
    pub seed: u64,
}

impl SyntheticScene {
    /// A 5 x 3 x 4 m room filmed by `frames` cameras sliding sideways while
    /// panning slightly across the far wall.
    pub fn standard_room(frames: usize, width: usize, height: usize, seed: u64) -> Self {
        let f = 0.9 * width as f64;
        let intrinsics = Intrinsics {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        };
        Self {
            room: RoomBox { min: Vector3::new(-2.5, -1.5, -1.5), max: Vector3::new(2.5, 1.5, 2.5) },
            floaters: Vec::new(),
            trajectory: Trajectory::Linear {
                eye_start: Vector3::new(-0.5, 0.1, -0.4),
                eye_end: Vector3::new(0.5, -0.1, -0.2),
                target_start: Vector3::new(-0.2, 0.0, 2.5),
                target_end: Vector3::new(0.2, 0.1, 2.5),
            },
            frames,
            intrinsics,
            seed,
        }
    }
}

/// A planted outlier and the frames it was rendered into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFloater {
    pub index: usize,
    pub center: Vector3<f64>,
    pub radius: f64,
    pub frames: Vec<usize>,
    pub depth_only: bool,
}

impl PlantedFloater {
    /// Whether `p` lies within the sphere grown by `margin`.
    pub fn contains(&self, p: &Vector3<f64>, margin: f64) -> bool {
        (p - self.center).norm() <= self.radius + margin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOutput {
    /// Each frame's depth includes depth-only floaters planted in it.
    pub frames: Vec<CameraFrame>,
    /// Depth of the surfaces the color image shows (no depth-only floaters).
    pub clean_depth: Vec<DepthMap>,
    pub floaters: Vec<PlantedFloater>,
}

/// Procedural wall texture: random-intensity cells over value noise, per-wall tint.
struct Texture {
    seed: u64,
    tints: [[f64; 3]; 6],
    offsets: [[f64; 2]; 6],
}

fn hash(seed: u64, a: i64, b: i64, c: u64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [a as u64, b as u64, c] {
        h ^= v.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = h.rotate_left(27).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn cell_noise(seed: u64, layer: u64, s: f64, t: f64) -> f64 {
    hash(seed, s.floor() as i64, t.floor() as i64, layer)
}

fn value_noise(seed: u64, layer: u64, s: f64, t: f64) -> f64 {
    let (i, j) = (s.floor(), t.floor());
    let (fs, ft) = (s - i, t - j);
    let smooth = |x: f64| x * x * (3.0 - 2.0 * x);
    let (u, v) = (smooth(fs), smooth(ft));
    let (i, j) = (i as i64, j as i64);
    let n00 = hash(seed, i, j, layer);
    let n10 = hash(seed, i + 1, j, layer);
    let n01 = hash(seed, i, j + 1, layer);
    let n11 = hash(seed, i + 1, j + 1, layer);
    let top = n00 + (n10 - n00) * u;
    let bottom = n01 + (n11 - n01) * u;
    top + (bottom - top) * v
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tints = [[0.0; 3]; 6];
        let mut offsets = [[0.0; 2]; 6];
        for w in 0..6 {
            tints[w] = [rng.gen_range(0.45..1.0), rng.gen_range(0.45..1.0), rng.gen_range(0.45..1.0)];
            offsets[w] = [rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)];
        }
        Self { seed, tints, offsets }
    }

    fn sample(&self, wall: usize, s: f64, t: f64) -> [f64; 3] {
        let (s, t) = (s + self.offsets[wall][0], t + self.offsets[wall][1]);
        let w = wall as u64 * 8;
        let coarse = value_noise(self.seed, w, s * 2.0, t * 2.0);
        let cells = cell_noise(self.seed, w + 1, s * 8.0, t * 8.0);
        let fine = cell_noise(self.seed, w + 2, s * 17.0, t * 17.0);
        let hue = value_noise(self.seed, w + 3, s * 2.0, t * 2.0);
        let lum = 0.1 + 0.85 * (0.25 * coarse + 0.5 * cells + 0.25 * fine);
        let tint = self.tints[wall];
        [
            (lum * (tint[0] * (0.7 + 0.3 * hue))).clamp(0.02, 0.98),
            (lum * tint[1]).clamp(0.02, 0.98),
            (lum * (tint[2] * (1.0 - 0.3 * hue))).clamp(0.02, 0.98),
        ]
    }
}

/// Nearest wall hit from inside the box as `(t, wall id)`.
fn wall_hit(room: &RoomBox, eye: &Vector3<f64>, dir: &Vector3<f64>) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for axis in 0..3 {
        let d = dir[axis];
        let (plane, wall) = if d > 0.0 {
            (room.max[axis], 2 * axis + 1)
        } else if d < 0.0 {
            (room.min[axis], 2 * axis)
        } else {
            continue;
        };
        let t = (plane - eye[axis]) / d;
        if t < best.0 {
            best = (t, wall);
        }
    }
    best
}

fn sphere_hit(center: &Vector3<f64>, radius: f64, eye: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    let oc = eye - center;
    let a = dir.dot(dir);
    let b = 2.0 * dir.dot(&oc);
    let c = oc.dot(&oc) - radius * radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    (t > 0.0).then_some(t)
}

fn wall_coords(wall: usize, p: &Vector3<f64>) -> (f64, f64) {
    match wall / 2 {
        0 => (p.z, p.y),
        1 => (p.x, p.z),
        _ => (p.x, p.y),
    }
}

/// Ray-traces every frame of `desc`. Depth is camera z (meters).
pub fn generate_synthetic(desc: &SyntheticScene) -> Result<SyntheticOutput, SceneIoError> {
    let bad = |m: String| SceneIoError::Synthetic(m);
    let room = &desc.room;
    if !(0..3).all(|i| room.max[i] > room.min[i]) {
        return Err(bad("room box has non-positive extent".into()));
    }
    desc.intrinsics.validate().map_err(|e| bad(e.to_string()))?;
    let views = desc.trajectory.viewpoints(desc.frames);
    if views.is_empty() {
        return Err(bad("trajectory has no frames".into()));
    }
    let texture = Texture::new(desc.seed);
    let k = desc.intrinsics;
    let mut frames = Vec::with_capacity(views.len());
    let mut clean_depth = Vec::with_capacity(views.len());
    for (fi, (eye, target)) in views.iter().enumerate() {
        if !room.contains_strictly(eye, 1e-6) {
            return Err(bad(format!("camera {fi} at {:?} is inside or outside a wall", eye.as_slice())));
        }
        let pose = Pose::look_at(*eye, *target, Vector3::y()).map_err(|e| bad(format!("camera {fi}: {e}")))?;
        let rt = pose.rotation().transpose();
        let pixels: Vec<([f64; 3], f64, f64)> = (0..k.width * k.height)
            .into_par_iter()
            .map(|i| {
                let (x, y) = ((i % k.width) as f64, (i / k.width) as f64);
                let dir = rt * Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
                let (t_wall, wall) = wall_hit(room, eye, &dir);
                let p = eye + dir * t_wall;
                let (s, tt) = wall_coords(wall, &p);
                let mut color = texture.sample(wall, s, tt);
                let mut clean = t_wall;
                let mut depth = t_wall;
                for fl in desc.floaters.iter().filter(|f| f.present_in(fi)) {
                    let Some(t) = sphere_hit(&fl.center, fl.radius, eye, &dir) else { continue };
                    if t < depth {
                        depth = t;
                    }
                    if !fl.depth_only && t < clean {
                        clean = t;
                        let q = eye + dir * t;
                        let n = value_noise(desc.seed, 99, (q.x + q.z) * 6.0, q.y * 6.0);
                        color = fl.color.map(|c| (c * (0.6 + 0.4 * n)).clamp(0.0, 1.0));
                    }
                }
                (color, depth, clean)
            })
            .collect();
        let image = ColorImage { width: k.width, height: k.height, data: pixels.iter().map(|p| p.0).collect() };
        let depth = ScalarMap { width: k.width, height: k.height, data: pixels.iter().map(|p| p.1).collect() };
        clean_depth.push(ScalarMap { width: k.width, height: k.height, data: pixels.iter().map(|p| p.2).collect() });
        frames.push(CameraFrame { intrinsics: k, pose, image, depth: Some(depth) });
    }
    let floaters = desc
        .floaters
        .iter()
        .enumerate()
        .map(|(index, f)| PlantedFloater {
            index,
            center: f.center,
            radius: f.radius,
            frames: (0..frames.len()).filter(|&i| f.present_in(i)).collect(),
            depth_only: f.depth_only,
        })
        .collect();
    Ok(SyntheticOutput { frames, clean_depth, floaters })
}
