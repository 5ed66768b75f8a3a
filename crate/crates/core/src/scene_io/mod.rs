//! Scene manifests, image and depth files, PLY export and synthetic rooms.

mod images;
pub mod ply;
pub mod synthetic;

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::SceneIoError;
use crate::frame::CameraFrame;
use crate::geometry::{Intrinsics, Pose};

pub use images::{read_color, read_depth, write_color_png, write_depth};
pub use ply::{export_ply, import_ply, read_ply, write_ply};
pub use synthetic::{generate_synthetic, FloaterSphere, PlantedFloater, RoomBox, SyntheticOutput, SyntheticScene, Trajectory};

pub const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DepthUnit {
    #[serde(rename = "mm")]
    #[default]
    Millimeters,
    #[serde(rename = "m")]
    Meters,
}

impl DepthUnit {
    pub fn parse(s: &str) -> Result<Self, SceneIoError> {
        match s {
            "mm" => Ok(Self::Millimeters),
            "m" => Ok(Self::Meters),
            other => Err(SceneIoError::UnknownDepthUnit(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Millimeters => "mm",
            Self::Meters => "m",
        }
    }

    /// Meters per stored integer step.
    pub fn meters_per_unit(self) -> f64 {
        match self {
            Self::Millimeters => 1e-3,
            Self::Meters => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    /// Relative to the manifest directory.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    /// Row-major 4x4 camera-to-world matrix.
    pub camera_to_world: [f64; 16],
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub version: String,
    /// Kept as text so an unknown unit is reported as such.
    pub depth_unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    pub frames: Vec<FrameEntry>,
}

impl SceneManifest {
    pub fn read(path: &Path) -> Result<Self, SceneIoError> {
        let text = std::fs::read_to_string(path).map_err(|source| SceneIoError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|source| SceneIoError::Json { path: path.to_path_buf(), source })
    }

    pub fn depth_unit(&self) -> Result<DepthUnit, SceneIoError> {
        DepthUnit::parse(&self.depth_unit)
    }
}

/// A loaded manifest with its frames in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScene {
    pub manifest: SceneManifest,
    pub root: PathBuf,
    pub frames: Vec<CameraFrame>,
}

/// Row-major camera-to-world matrix of a world-to-camera pose.
pub fn camera_to_world(pose: &Pose) -> [f64; 16] {
    let inv = pose.inverse();
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(inv.rotation());
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(inv.translation());
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[r * 4 + c] = m[(r, c)];
        }
    }
    out
}

/// World-to-camera pose of a row-major camera-to-world matrix.
pub fn pose_from_camera_to_world(m: &[f64; 16], frame: usize) -> Result<Pose, SceneIoError> {
    let malformed = |reason: String| SceneIoError::MalformedPose { frame, reason };
    if !m.iter().all(|v| v.is_finite()) {
        return Err(malformed("non-finite entry".into()));
    }
    let bottom = [m[12], m[13], m[14], m[15]];
    if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs()) > 1e-9 || (bottom[3] - 1.0).abs() > 1e-9 {
        return Err(malformed(format!("last row is {bottom:?}, expected [0, 0, 0, 1]")));
    }
    let rot = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    let det = rot.determinant();
    if !(det > 1e-6) {
        return Err(malformed(format!("rotation block is not invertible with positive determinant ({det})")));
    }
    let err = (rot.transpose() * rot - Matrix3::identity()).amax();
    if err > 1e-3 {
        return Err(malformed(format!("rotation block is not orthonormal (error {err:.3e})")));
    }
    let c2w = Pose::from_approximate(rot, Vector3::new(m[3], m[7], m[11])).map_err(|e| malformed(e.to_string()))?;
    Ok(c2w.inverse())
}

fn resolve(root: &Path, rel: &Path, frame: usize) -> Result<PathBuf, SceneIoError> {
    let p = root.join(rel);
    if !p.is_file() {
        return Err(SceneIoError::MissingFile { frame, path: p });
    }
    Ok(p)
}

fn load_frame(root: &Path, entry: &FrameEntry, unit: DepthUnit, frame: usize) -> Result<CameraFrame, SceneIoError> {
    let image_path = resolve(root, &entry.image, frame)?;
    let depth_path = entry.depth.as_ref().map(|d| resolve(root, d, frame)).transpose()?;
    let pose = pose_from_camera_to_world(&entry.camera_to_world, frame)?;
    let k = entry.intrinsics;
    k.validate().map_err(|source| SceneIoError::Intrinsics { frame, source })?;
    let image = read_color(&image_path)?;
    if image.shape() != (k.width, k.height) {
        return Err(SceneIoError::SizeMismatch { frame, what: "image", expected: (k.width, k.height), actual: image.shape() });
    }
    let depth = depth_path.map(|p| read_depth(&p, unit)).transpose()?;
    if let Some(d) = &depth {
        if d.shape() != (k.width, k.height) {
            return Err(SceneIoError::SizeMismatch { frame, what: "depth", expected: (k.width, k.height), actual: d.shape() });
        }
    }
    Ok(CameraFrame { intrinsics: k, pose, image, depth })
}

/// Loads every frame of a manifest. Depths come back in meters and poses as
/// world-to-camera.
pub fn load_scene(manifest_path: &Path) -> Result<LoadedScene, SceneIoError> {
    let manifest = SceneManifest::read(manifest_path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(SceneIoError::UnsupportedVersion(manifest.version.clone()));
    }
    let unit = manifest.depth_unit()?;
    if manifest.frames.is_empty() {
        return Err(SceneIoError::NoFrames);
    }
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let results: Vec<Result<CameraFrame, SceneIoError>> =
        manifest.frames.par_iter().enumerate().map(|(i, e)| load_frame(&root, e, unit, i)).collect();
    let frames = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(LoadedScene { manifest, root, frames })
}

/// Options for [`write_scene`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WriteOptions {
    pub depth_unit: DepthUnit,
    /// Depth written as PFM meters instead of 16-bit PNG.
    pub depth_as_pfm: bool,
    pub near: Option<f64>,
    pub far: Option<f64>,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self { depth_unit: DepthUnit::Millimeters, depth_as_pfm: false, near: None, far: None }
    }
}

/// Writes `frames` under `dir` (`rgb/NNNN.png`, `depth/NNNN.{png,pfm}`) and a
/// `scene.json` manifest. Returns the manifest path.
pub fn write_scene(dir: &Path, frames: &[CameraFrame], opts: &WriteOptions) -> Result<PathBuf, SceneIoError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SceneIoError::Io { path, source }
    };
    for sub in ["rgb", "depth"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(io(&dir.join(sub)))?;
    }
    let mut entries = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let image = PathBuf::from(format!("rgb/{i:04}.png"));
        write_color_png(&dir.join(&image), &f.image)?;
        let depth = match &f.depth {
            Some(d) => {
                let ext = if opts.depth_as_pfm { "pfm" } else { "png" };
                let rel = PathBuf::from(format!("depth/{i:04}.{ext}"));
                write_depth(&dir.join(&rel), d, opts.depth_unit)?;
                Some(rel)
            }
            None => None,
        };
        entries.push(FrameEntry { image, depth, camera_to_world: camera_to_world(&f.pose), intrinsics: f.intrinsics });
    }
    let manifest = SceneManifest {
        version: MANIFEST_VERSION.to_string(),
        depth_unit: opts.depth_unit.as_str().to_string(),
        near: opts.near,
        far: opts.far,
        frames: entries,
    };
    let path = dir.join("scene.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| SceneIoError::Json { path: path.clone(), source })?;
    std::fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}
