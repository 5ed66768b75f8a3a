use nalgebra::Vector3;
use proptest::prelude::*;

use splatfuse::frame::{CameraFrame, ColorImage, DepthMap, ScalarMap};
use splatfuse::gaussians::{lift_view, GaussianPrimitive, LocalTriplets};
use splatfuse::geometry::{Camera, Intrinsics, Pose};
use splatfuse::matching::{plane_depths, softargmax_depth, CostVolume, PlaneSpacing};
use splatfuse::ptf::{run_ptf, FusionRule, PtfParams};
use splatfuse::render::{render, RenderedImage};
use splatfuse::scene_io::{generate_synthetic, load_scene, read_ply, write_ply, write_scene, SyntheticScene, WriteOptions};

fn camera() -> Camera {
    Camera::new(Intrinsics::new(30.0, 32.0, 14.5, 10.0, 29, 21).unwrap(), Pose::identity())
}

prop_compose! {
    fn primitive()(
        mean in (-1.0..1.0f64, -0.8..0.8f64, -0.5..4.0f64),
        log_scales in (-4.0..-1.0f64, -4.0..-1.0f64, -4.0..-1.0f64),
        rotation in prop::array::uniform4(-1.0..1.0f64),
        opacity in 0.02..0.98f64,
        color in prop::array::uniform3(0.0..1.0f64),
    ) -> GaussianPrimitive {
        let mut g = GaussianPrimitive::new(Vector3::new(mean.0, mean.1, mean.2), 1.0, opacity, color);
        g.log_scales = Vector3::new(log_scales.0, log_scales.1, log_scales.2);
        g.rotation = if rotation.iter().map(|r| r * r).sum::<f64>() < 1e-3 { [1.0, 0.0, 0.0, 0.0] } else { rotation };
        g
    }
}

fn max_diff(a: &RenderedImage, b: &RenderedImage) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..a.alpha.data.len() {
        for ch in 0..3 {
            m = m.max((a.color.data[i][ch] - b.color.data[i][ch]).abs());
        }
        m = m.max((a.depth.data[i] - b.depth.data[i]).abs()).max((a.alpha.data[i] - b.alpha.data[i]).abs());
    }
    m
}

/// Four views of a random depth field, each nudged sideways.
fn lifted_views(depths: &[f64], stride: usize) -> Vec<LocalTriplets> {
    let k = Intrinsics::new(20.0, 20.0, 7.5, 5.5, 16, 12).unwrap();
    (0..4)
        .map(|v| {
            let pose = Pose::from_translation(Vector3::new(-0.04 * v as f64, 0.0, 0.0));
            let frame = CameraFrame { intrinsics: k, pose, image: ColorImage::filled(16, 12, [0.4, 0.5, 0.6]), depth: None };
            let (w, h) = (16 / stride, 12 / stride);
            let depth = ScalarMap::from_fn(w, h, |x, y| depths[((y * 16 + x) * 7 + v * 31) % depths.len()]);
            let conf = ScalarMap::from_fn(w, h, |x, y| 0.1 + 0.8 * ((x + y + v) % 5) as f64 / 4.0);
            lift_view(v, &frame, &depth, &conf, stride).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn render_is_order_and_tile_invariant(prims in prop::collection::vec(primitive(), 1..40), tile in prop::sample::select(vec![8usize, 32])) {
        let cam = camera();
        let base = render(&prims, &cam, 16).unwrap();
        let mut reversed = prims.clone();
        reversed.reverse();
        prop_assert!(max_diff(&base, &render(&reversed, &cam, 16).unwrap()) < 1e-9);
        prop_assert!(max_diff(&base, &render(&prims, &cam, tile).unwrap()) < 1e-12);
        for i in 0..base.alpha.data.len() {
            let a = base.alpha.data[i];
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(base.color.data[i].iter().all(|c| (-1e-12..=a + 1e-12).contains(c)));
            prop_assert!(base.depth.data[i] >= 0.0);
        }
    }

    #[test]
    fn primitives_behind_the_camera_are_invisible(prims in prop::collection::vec(primitive(), 1..20), hidden in prop::collection::vec(primitive(), 1..10)) {
        let cam = camera();
        let behind: Vec<GaussianPrimitive> = hidden.into_iter().map(|mut g| { g.mean.z = -1.0 - g.mean.z.abs(); g }).collect();
        let mut all = prims.clone();
        all.extend(behind);
        prop_assert_eq!(render(&prims, &cam, 16).unwrap(), render(&all, &cam, 16).unwrap());
    }

    #[test]
    fn fusion_conserves_count_and_weight(
        depths in prop::collection::vec(prop_oneof![Just(0.0), 0.5..4.0f64], 64),
        stride in prop::sample::select(vec![1usize, 2]),
        symmetric in any::<bool>(),
        delta in 0.01..0.5f64,
    ) {
        let views = lifted_views(&depths, stride);
        let rule = if symmetric { FusionRule::Symmetric } else { FusionRule::Broad };
        let (global, stats) = run_ptf(&views, &PtfParams { delta, rule, enabled: true }).unwrap();
        let mut prev = 0;
        for st in &stats {
            prop_assert_eq!(st.total, prev + st.lifted - st.pairs);
            prop_assert!(st.pairs <= prev.min(st.lifted));
            prev = st.total;
        }
        prop_assert_eq!(global.len(), prev);
        let lifted: f64 = views.iter().map(|l| l.total_weight()).sum();
        prop_assert!((global.total_weight() - lifted).abs() <= 1e-9 * lifted.max(1.0));

        let (off, _) = run_ptf(&views, &PtfParams { delta, rule, enabled: false }).unwrap();
        prop_assert_eq!(off.len(), views.iter().map(|l| l.len()).sum::<usize>());
    }

    #[test]
    fn ply_round_trip_is_f32_exact(prims in prop::collection::vec(primitive(), 0..30)) {
        let mut bytes = Vec::new();
        write_ply(&mut bytes, &prims).unwrap();
        let back = read_ply(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.len(), prims.len());
        let q = |x: f64| x as f32 as f64;
        for (a, b) in prims.iter().zip(&back) {
            for i in 0..3 {
                prop_assert_eq!(q(a.mean[i]), b.mean[i]);
                prop_assert_eq!(q(a.log_scales[i]), b.log_scales[i]);
                prop_assert_eq!(q(a.sh_dc[i]), b.sh_dc[i]);
            }
            prop_assert_eq!(q(a.opacity_logit), b.opacity_logit);
            for i in 0..4 {
                prop_assert_eq!(q(a.rotation[i]), b.rotation[i]);
            }
        }
        let mut again = Vec::new();
        write_ply(&mut again, &back).unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn softargmax_stays_within_the_plane_range(
        scores in prop::collection::vec(-50.0..50.0f64, 8 * 6),
        temperature in 0.01..10.0f64,
        uniform in any::<bool>(),
    ) {
        let spacing = if uniform { PlaneSpacing::Uniform } else { PlaneSpacing::Inverse };
        let planes = plane_depths(0.5, 5.0, 8, spacing).unwrap();
        let cv = CostVolume { width: 3, height: 2, planes, scores };
        let (depth, conf) = softargmax_depth(&cv, temperature).unwrap();
        for (d, c) in depth.data.iter().zip(&conf.data) {
            prop_assert!((0.5..=5.0).contains(d));
            prop_assert!((1.0 / 8.0 - 1e-12..=1.0 + 1e-12).contains(c));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn written_scenes_load_back(seed in any::<u64>(), pfm in any::<bool>()) {
        let synth = generate_synthetic(&SyntheticScene::standard_room(2, 20, 14, seed)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = WriteOptions { depth_as_pfm: pfm, ..WriteOptions::default() };
        let manifest = write_scene(dir.path(), &synth.frames, &opts).unwrap();
        let loaded = load_scene(&manifest).unwrap();
        prop_assert_eq!(loaded.frames.len(), 2);
        for (a, b) in synth.frames.iter().zip(&loaded.frames) {
            prop_assert_eq!(a.intrinsics, b.intrinsics);
            prop_assert!((a.pose.rotation() - b.pose.rotation()).abs().max() < 1e-12);
            prop_assert!((a.pose.translation() - b.pose.translation()).abs().max() < 1e-12);
            for (ca, cb) in a.image.data.iter().zip(&b.image.data) {
                for ch in 0..3 {
                    prop_assert!((ca[ch] - cb[ch]).abs() <= 0.5 / 255.0 + 1e-12);
                }
            }
            let tol = if pfm { 1e-6 } else { 0.5e-3 + 1e-9 };
            let (da, db): (&DepthMap, &DepthMap) = (a.depth.as_ref().unwrap(), b.depth.as_ref().unwrap());
            for (x, y) in da.data.iter().zip(&db.data) {
                prop_assert!((x - y).abs() <= tol * x.max(1.0));
            }
        }
    }

    #[test]
    fn synthetic_depth_lands_on_the_room_walls(seed in any::<u64>(), views in 1usize..4) {
        let desc = SyntheticScene::standard_room(views, 24, 18, seed);
        let synth = generate_synthetic(&desc).unwrap();
        let (lo, hi) = (desc.room.min, desc.room.max);
        for f in &synth.frames {
            let cam = f.camera();
            let depth = f.depth.as_ref().unwrap();
            for y in 0..depth.height {
                for x in 0..depth.width {
                    let d = depth.get(x, y);
                    prop_assert!(d > 0.0);
                    let p = cam.unproject(x as f64, y as f64, d).unwrap();
                    let inside = (0..3).all(|i| p[i] > lo[i] - 1e-9 && p[i] < hi[i] + 1e-9);
                    let wall = (0..3).map(|i| (p[i] - lo[i]).abs().min((p[i] - hi[i]).abs())).fold(f64::INFINITY, f64::min);
                    prop_assert!(inside && wall < 1e-9, "pixel ({}, {}) at {:?}", x, y, p);
                }
            }
        }
    }
}
