#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatfuse::config::PipelineConfig;
use splatfuse::frame::{CameraFrame, DepthMap};
use splatfuse::gaussians::{GaussianPrimitive, SH_C0};
use splatfuse::render::{depth_metrics, psnr, render};
use splatfuse::scene_io::{generate_synthetic, FloaterSphere, SyntheticOutput, SyntheticScene};

/// Ten views of the standard room, with a depth-only sphere 0.5 m in front of
/// the far wall planted in the last frame's depth map.
pub fn floater_scene(width: usize, height: usize) -> SyntheticOutput {
    let mut desc = SyntheticScene::standard_room(10, width, height, 11);
    desc.floaters.push(FloaterSphere {
        center: Vector3::new(0.0, 0.0, desc.room.max.z - 0.5),
        radius: 0.45,
        color: [0.9, 0.2, 0.2],
        visible_in: vec![9],
        depth_only: true,
    });
    generate_synthetic(&desc).unwrap()
}

pub fn gt_config() -> PipelineConfig {
    PipelineConfig { use_gt_depth: true, ..PipelineConfig::default() }
}

/// Mean over views of rendered-depth δ<1.1 against `truth`.
pub fn rendered_delta_1_1(prims: &[GaussianPrimitive], frames: &[CameraFrame], truth: &[DepthMap]) -> f64 {
    let sum: f64 = frames
        .iter()
        .zip(truth)
        .map(|(f, d)| depth_metrics(&render(prims, &f.camera(), 16).unwrap().depth, d).unwrap().delta_1_1)
        .sum();
    sum / frames.len() as f64
}

pub fn mean_psnr(prims: &[GaussianPrimitive], frames: &[CameraFrame]) -> f64 {
    let sum: f64 = frames.iter().map(|f| psnr(&render(prims, &f.camera(), 16).unwrap().color, &f.image).unwrap()).sum();
    sum / frames.len() as f64
}

/// Shifts every primitive's color by up to `amount` per channel.
pub fn perturb_colors(prims: &mut [GaussianPrimitive], amount: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in prims {
        let shift = Vector3::new(rng.gen_range(-amount..amount), rng.gen_range(-amount..amount), rng.gen_range(-amount..amount));
        p.sh_dc += shift / SH_C0;
    }
}
