//! Color PNG and depth (16-bit PNG or PFM) files.

use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use super::DepthUnit;
use crate::error::SceneIoError;
use crate::frame::{ColorImage, DepthMap, ScalarMap};

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> SceneIoError + '_ {
    move |source| SceneIoError::Image { path: path.to_path_buf(), source }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneIoError + '_ {
    move |source| SceneIoError::Io { path: path.to_path_buf(), source }
}

pub fn read_color(path: &Path) -> Result<ColorImage, SceneIoError> {
    let img = image::open(path).map_err(image_err(path))?.into_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| [p.0[0] as f64, p.0[1] as f64, p.0[2] as f64]).collect();
    Ok(ColorImage { width: w, height: h, data })
}

/// 8-bit PNG, channels clamped to `[0, 1]` and rounded.
pub fn write_color_png(path: &Path, image: &ColorImage) -> Result<(), SceneIoError> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(image.width as u32, image.height as u32, |x, y| {
        let p = image.get(x as usize, y as usize);
        Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path).map_err(image_err(path))
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Reads a depth map in meters: 16-bit PNG scaled by `unit`, or PFM (always
/// meters). Zero, negative and non-finite values become 0 (invalid).
pub fn read_depth(path: &Path, unit: DepthUnit) -> Result<DepthMap, SceneIoError> {
    match extension(path).as_str() {
        "png" => {
            let img = image::open(path).map_err(image_err(path))?.into_luma16();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let scale = unit.meters_per_unit();
            let data = img.pixels().map(|p| p.0[0] as f64 * scale).collect();
            Ok(ScalarMap { width: w, height: h, data })
        }
        "pfm" => read_pfm(path),
        _ => Err(SceneIoError::UnsupportedDepthFormat(path.to_path_buf())),
    }
}

/// Writes depth as 16-bit PNG in `unit` steps or PFM meters, by extension.
pub fn write_depth(path: &Path, depth: &DepthMap, unit: DepthUnit) -> Result<(), SceneIoError> {
    match extension(path).as_str() {
        "png" => {
            let scale = 1.0 / unit.meters_per_unit();
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(depth.width as u32, depth.height as u32, |x, y| {
                let d = depth.get(x as usize, y as usize);
                let v = if d > 0.0 && d.is_finite() { (d * scale).round().clamp(0.0, u16::MAX as f64) } else { 0.0 };
                Luma([v as u16])
            });
            buf.save(path).map_err(image_err(path))
        }
        "pfm" => write_pfm(path, depth),
        _ => Err(SceneIoError::UnsupportedDepthFormat(path.to_path_buf())),
    }
}

fn write_pfm(path: &Path, depth: &DepthMap) -> Result<(), SceneIoError> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    // rows are stored bottom to top
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            out.extend_from_slice(&(depth.get(x, y) as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

fn read_pfm(path: &Path) -> Result<DepthMap, SceneIoError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let bad = |why: &str| SceneIoError::Pfm(format!("{}: {why}", path.display()));
    // three whitespace-terminated header tokens after the magic
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1;
    if tokens[0] != "Pf" {
        return Err(bad("only single-channel 'Pf' files are supported"));
    }
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let payload = bytes.get(i..).ok_or_else(|| bad("missing data"))?;
    if payload.len() < w * h * 4 {
        return Err(bad("truncated data"));
    }
    let mut map = ScalarMap::new(w, h);
    for (k, chunk) in payload.chunks_exact(4).take(w * h).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) } as f64;
        let (x, row) = (k % w, k / w);
        map.data[(h - 1 - row) * w + x] = if v > 0.0 && v.is_finite() { v } else { 0.0 };
    }
    Ok(map)
}
