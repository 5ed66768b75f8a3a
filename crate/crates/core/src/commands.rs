//! Implementations behind the `splatfuse` subcommands.

use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{Error, FinetuneError, Result, SceneIoError};
use crate::finetune::{run_finetune, AnchorDepths, FinetuneOutcome};
use crate::frame::CameraFrame;
use crate::pipeline::{reconstruct, Reconstruction, ReconstructionStats};
use crate::render::{depth_metrics, psnr, render, ssim, DepthMetrics};
use crate::scene_io::{
    export_ply, generate_synthetic, import_ply, load_scene, read_color, read_depth, write_color_png, write_depth,
    write_scene, DepthUnit, SyntheticScene, WriteOptions,
};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const DIVERGED: i32 = 4;
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) => exit::CONFIG,
        Error::Finetune(FinetuneError::Diverged { .. }) => exit::DIVERGED,
        _ => exit::DATA,
    }
}

/// Reads a TOML config (defaults when `path` is `None`) and applies overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| SceneIoError::Io { path: p.to_path_buf(), source })?;
            PipelineConfig::from_toml(&text)?
        }
        None => PipelineConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| SceneIoError::Io { path: path.to_path_buf(), source }.into()
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

/// Runs the feed-forward pipeline and writes `scene.ply`, per-view lift-grid
/// depths (`depth/NNNN.pfm`) and `stats.json` under `out`.
pub fn cmd_reconstruct(manifest: &Path, config: &PipelineConfig, out: &Path) -> Result<Reconstruction> {
    let scene = load_scene(manifest)?;
    let rec = reconstruct(&scene.frames, config)?;
    create_dir(&out.join("depth"))?;
    export_ply(&out.join("scene.ply"), &rec.primitives)?;
    for (v, inp) in rec.inputs.iter().enumerate() {
        write_depth(&out.join(format!("depth/{v:04}.pfm")), &inp.depth, DepthUnit::Meters)?;
    }
    write_json(&out.join("stats.json"), &rec.stats)?;
    info!("wrote {} primitives to {}", rec.primitives.len(), out.join("scene.ply").display());
    Ok(rec)
}

/// Fusion statistics without writing any artifact.
pub fn cmd_stats(manifest: &Path, config: &PipelineConfig) -> Result<ReconstructionStats> {
    let scene = load_scene(manifest)?;
    Ok(reconstruct(&scene.frames, config)?.stats)
}

#[derive(Debug, Clone, Serialize)]
pub struct ViewReport {
    pub view: usize,
    pub psnr: f64,
}

fn select_views(frames: &[CameraFrame], requested: Option<&[usize]>) -> Result<Vec<usize>> {
    match requested {
        None => Ok((0..frames.len()).collect()),
        Some(ids) => {
            for &id in ids {
                if id >= frames.len() {
                    return Err(Error::Usage(format!("unknown view {id}; valid ids are 0..={}", frames.len() - 1)));
                }
            }
            Ok(ids.to_vec())
        }
    }
}

/// Renders `ply` at the manifest views into `out/color/NNNN.png` and
/// `out/depth/NNNN.<depth_ext>` and reports PSNR against each input image.
pub fn cmd_render(
    ply: &Path,
    manifest: &Path,
    out: &Path,
    views: Option<&[usize]>,
    tile_size: usize,
    depth_ext: &str,
) -> Result<Vec<ViewReport>> {
    let prims = import_ply(ply)?;
    if prims.is_empty() {
        warn!("{} holds no primitives; frames will be black", ply.display());
    }
    let scene = load_scene(manifest)?;
    let ids = select_views(&scene.frames, views)?;
    create_dir(&out.join("color"))?;
    create_dir(&out.join("depth"))?;
    let mut reports = Vec::with_capacity(ids.len());
    for v in ids {
        let frame = &scene.frames[v];
        let img = render(&prims, &frame.camera(), tile_size)?;
        write_color_png(&out.join(format!("color/{v:04}.png")), &img.color)?;
        write_depth(&out.join(format!("depth/{v:04}.{depth_ext}")), &img.depth, DepthUnit::Millimeters)?;
        reports.push(ViewReport { view: v, psnr: psnr(&img.color, &frame.image)? });
    }
    Ok(reports)
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneSummary {
    pub iterations: usize,
    pub initial_psnr: f64,
    pub final_psnr: f64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

fn mean_psnr(prims: &[crate::gaussians::GaussianPrimitive], frames: &[CameraFrame], tile: usize) -> Result<f64> {
    let mut sum = 0.0;
    for f in frames {
        sum += psnr(&render(prims, &f.camera(), tile)?.color, &f.image)?;
    }
    Ok(sum / frames.len() as f64)
}

/// Renders anchors from the input scene, refines it and writes
/// `out/refined.ply` and `out/loss.csv`.
pub fn cmd_finetune(
    ply: &Path,
    manifest: &Path,
    iters: usize,
    config: &PipelineConfig,
    out: &Path,
) -> Result<(FinetuneOutcome, FinetuneSummary)> {
    let prims = import_ply(ply)?;
    let scene = load_scene(manifest)?;
    let ft = config.finetune_config();
    let anchors = AnchorDepths::render(&prims, &scene.frames, ft.tile_size)?;
    let outcome = run_finetune(&prims, &scene.frames, &anchors, iters, &ft)?;
    create_dir(out)?;
    if iters == 0 {
        // byte-for-byte copy keeps the output identical to the input
        std::fs::copy(ply, out.join("refined.ply")).map_err(io_err(ply))?;
    } else {
        export_ply(&out.join("refined.ply"), &outcome.scene)?;
    }
    let mut header = config.entries();
    header.insert(0, ("iterations".into(), iters.to_string()));
    std::fs::write(out.join("loss.csv"), outcome.trace.to_csv(&header)).map_err(io_err(out))?;
    let summary = FinetuneSummary {
        iterations: iters,
        initial_psnr: mean_psnr(&prims, &scene.frames, ft.tile_size)?,
        final_psnr: mean_psnr(&outcome.scene, &scene.frames, ft.tile_size)?,
        initial_loss: outcome.trace.rows.first().map(|r| r.loss.total),
        final_loss: outcome.trace.rows.last().map(|r| r.loss.total),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok((outcome, summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<DepthMetrics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_depth: Option<DepthMetrics>,
}

fn find_depth(dir: &Path, v: usize) -> Option<PathBuf> {
    ["pfm", "png"].iter().map(|e| dir.join(format!("depth/{v:04}.{e}"))).find(|p| p.is_file())
}

/// Compares renders laid out as by [`cmd_render`] against the manifest frames.
pub fn cmd_eval(pred_dir: &Path, manifest: &Path) -> Result<EvalReport> {
    let scene = load_scene(manifest)?;
    let mut views = Vec::with_capacity(scene.frames.len());
    for (v, frame) in scene.frames.iter().enumerate() {
        let color_path = pred_dir.join(format!("color/{v:04}.png"));
        if !color_path.is_file() {
            return Err(Error::Data(format!("prediction for view {v} is missing ({})", color_path.display())));
        }
        let color = read_color(&color_path)?;
        let depth = match (find_depth(pred_dir, v), &frame.depth) {
            (Some(p), Some(gt)) => Some(depth_metrics(&read_depth(&p, DepthUnit::Millimeters)?, gt)?),
            _ => None,
        };
        views.push(ViewMetrics { view: v, psnr: psnr(&color, &frame.image)?, ssim: ssim(&color, &frame.image)?, depth });
    }
    let n = views.len() as f64;
    let depths: Vec<DepthMetrics> = views.iter().filter_map(|v| v.depth).collect();
    let mean_depth = (!depths.is_empty()).then(|| {
        let k = depths.len() as f64;
        DepthMetrics {
            abs_diff: depths.iter().map(|d| d.abs_diff).sum::<f64>() / k,
            abs_rel: depths.iter().map(|d| d.abs_rel).sum::<f64>() / k,
            delta_1_25: depths.iter().map(|d| d.delta_1_25).sum::<f64>() / k,
            delta_1_1: depths.iter().map(|d| d.delta_1_1).sum::<f64>() / k,
            valid_pixels: depths.iter().map(|d| d.valid_pixels).sum(),
        }
    });
    Ok(EvalReport {
        mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        mean_depth,
        views,
    })
}

/// Ray-traces a synthetic room and writes it as a manifest scene under `out`.
pub fn cmd_synth(desc: &SyntheticScene, out: &Path) -> Result<PathBuf> {
    let synth = generate_synthetic(desc)?;
    let opts = WriteOptions { depth_unit: DepthUnit::Meters, depth_as_pfm: true, near: None, far: None };
    let manifest = write_scene(out, &synth.frames, &opts)?;
    write_json(&out.join("floaters.json"), &synth.floaters)?;
    Ok(manifest)
}
