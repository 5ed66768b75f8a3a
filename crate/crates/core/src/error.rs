use std::path::PathBuf;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::Intrinsics;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics {0:?}")]
    InvalidIntrinsics(Intrinsics),
    #[error("rotation is not orthonormal (error {orthonormal_error:e}, det {determinant})")]
    NotARotation { orthonormal_error: f64, determinant: f64 },
    #[error("translation has non-finite components")]
    NonFiniteTranslation,
    #[error("point lies behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("scales must be finite and non-negative, got {0:?}")]
    NegativeScale(Vector3<f64>),
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("look-at direction is degenerate")]
    DegenerateLookAt,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("image is empty")]
    EmptyImage,
    #[error("cost volume needs at least one neighbor view")]
    NoNeighbors,
    #[error("requested {requested} nearby views but only {available} other views exist")]
    TooManyNeighbors { requested: usize, available: usize },
    #[error("view index {index} out of range for {count} views")]
    ViewOutOfRange { index: usize, count: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("invalid depth range: near {near}, far {far}, {planes} planes")]
    InvalidDepthRange { near: f64, far: f64, planes: usize },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: (usize, usize, usize), actual: (usize, usize, usize) },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LiftError {
    #[error("stride must be 1, 2 or 4, got {0}")]
    InvalidStride(usize),
    #[error("map is {actual:?} but the lift grid is {expected:?}")]
    ShapeMismatch { expected: (usize, usize), actual: (usize, usize) },
    #[error("view {view} has no pixel with valid depth")]
    NoValidDepth { view: usize },
    #[error("view {view} has no depth map to lift from")]
    MissingDepth { view: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("global triplet {0} appears in more than one pair")]
    DuplicateGlobal(usize),
    #[error("local triplet {0} appears in more than one pair")]
    DuplicateLocal(usize),
    #[error("pair ({local}, {global}) is out of range")]
    PairOutOfRange { local: usize, global: usize },
    #[error("no views to fuse")]
    NoViews,
    #[error("view {view}: {source}")]
    View { view: usize, source: Box<FusionError> },
    #[error("view {view} grid is {actual:?}, expected {expected:?}")]
    ShapeMismatch { view: usize, expected: (usize, usize), actual: (usize, usize) },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("tile size must be 8, 16 or 32, got {0}")]
    InvalidTileSize(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("no pixel is valid in both depth maps")]
    NoValidPixels,
    #[error("image {0:?} is smaller than the {1}x{1} SSIM window")]
    ImageTooSmall((usize, usize), usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FinetuneError {
    #[error("loss diverged at iteration {iteration}: {loss} > 10 x initial {initial}")]
    Diverged { iteration: usize, loss: f64, initial: f64 },
    #[error("need one anchor depth per training view ({views} views, {anchors} anchors)")]
    AnchorCount { views: usize, anchors: usize },
    #[error("no training views")]
    NoViews,
    #[error("lambda1 must lie in [0, 1) and lambda2 must be >= 0 (got {lambda1}, {lambda2})")]
    InvalidWeights { lambda1: f64, lambda2: f64 },
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("frame {frame}: missing file {path}")]
    MissingFile { frame: usize, path: PathBuf },
    #[error("frame {frame}: malformed pose ({reason})")]
    MalformedPose { frame: usize, reason: String },
    #[error("unknown depth unit {0:?} (expected \"mm\" or \"m\")")]
    UnknownDepthUnit(String),
    #[error("frame {frame}: invalid intrinsics ({source})")]
    Intrinsics { frame: usize, source: GeometryError },
    #[error("frame {frame}: {what} is {actual:?}, intrinsics say {expected:?}")]
    SizeMismatch { frame: usize, what: &'static str, expected: (usize, usize), actual: (usize, usize) },
    #[error("manifest has no frames")]
    NoFrames,
    #[error("unsupported manifest version {0:?}")]
    UnsupportedVersion(String),
    #[error("unsupported depth file extension: {0}")]
    UnsupportedDepthFormat(PathBuf),
    #[error("malformed PLY: {0}")]
    Ply(String),
    #[error("malformed PFM: {0}")]
    Pfm(String),
    #[error("synthetic scene: {0}")]
    Synthetic(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("manifest {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid value for {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error("bad override {0:?} (expected key=value)")]
    BadOverride(String),
}

/// Top-level error of the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("matching: {0}")]
    Matching(#[from] MatchingError),
    #[error("lifting: {0}")]
    Lift(#[from] LiftError),
    #[error("fusion: {0}")]
    Fusion(#[from] FusionError),
    #[error("render: {0}")]
    Render(#[from] RenderError),
    #[error("finetune: {0}")]
    Finetune(#[from] FinetuneError),
    #[error("scene io: {0}")]
    SceneIo(#[from] SceneIoError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    /// Inputs that are well-formed but inconsistent with each other.
    #[error("{0}")]
    Data(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
