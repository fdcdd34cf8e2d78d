//! Randomised checks of the library's invariants through the public API.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spi_core::eval::{mse, ms_ssim_dissimilarity};
use spi_core::field::{render, FieldShape, LatentCode, PriorDecoder, RenderSettings};
use spi_core::geometry::{look_at_pose, mirror_pose, mirror_weight, yaw_of, Intrinsics, MirrorWeightParams};
use spi_core::image::Image;
use spi_core::losses::{l2, msgp, noise_reg};
use spi_core::synthhead::{generate_scene, render_gt};
use spi_core::warp::{mirror_image, warp_image};

fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(w, h, c, |_, _, _| rng.random::<f64>())
}

fn small_shape() -> FieldShape {
    FieldShape {
        levels: vec![(5, 2), (7, 2)],
        channels: 4,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mirror_negates_yaw(yaw in -3.0f64..3.0, pitch in -1.2f64..1.2, radius in 1.0f64..6.0) {
        let p = look_at_pose(yaw, pitch, radius).unwrap();
        let m = mirror_pose(&p);
        prop_assert!((yaw_of(&m).unwrap() + yaw_of(&p).unwrap()).abs() < 1e-9);
        prop_assert!((m.position().y - p.position().y).abs() < 1e-12);
    }

    #[test]
    fn mirror_weight_is_a_weight(yaw in -3.2f64..3.2, sigma in 0.05f64..1.0, k in 0.05f64..0.95) {
        let params = MirrorWeightParams { sigma, mu: 0.0, clamp_k: k };
        let w = mirror_weight(yaw, &params);
        prop_assert!((0.0..=1.0).contains(&w));
        prop_assert_eq!(mirror_weight(0.0, &params), 0.0);
    }

    #[test]
    fn pixel_losses_are_symmetric_and_zero_on_equal(seed in 0u64..1000) {
        let a = random_image(8, 8, 3, seed);
        let b = random_image(8, 8, 3, seed + 1);
        for f in [l2, msgp] {
            let ab = f(&a, &b, None, false).unwrap().value;
            let ba = f(&b, &a, None, false).unwrap().value;
            prop_assert!(ab > 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            prop_assert_eq!(f(&a, &a, None, false).unwrap().value, 0.0);
        }
        prop_assert!(noise_reg(&random_image(8, 8, 1, seed), false).unwrap().value >= 0.0);
    }

    #[test]
    fn metrics_vanish_only_on_identical(seed in 0u64..1000) {
        let a = random_image(32, 32, 3, seed);
        let b = random_image(32, 32, 3, seed + 7);
        prop_assert_eq!(mse(&a, &a, None).unwrap(), 0.0);
        prop_assert!(ms_ssim_dissimilarity(&a, &a, None).unwrap().abs() < 1e-12);
        prop_assert!(mse(&a, &b, None).unwrap() > 0.0);
        prop_assert!(ms_ssim_dissimilarity(&a, &b, None).unwrap() > 0.0);
    }

    #[test]
    fn renders_are_bounded(seed in 0u64..1000, yaw in -1.2f64..1.2, pitch in -0.4f64..0.4) {
        let shape = small_shape();
        let model = PriorDecoder::random(&shape, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = LatentCode::random(&shape, 1.0, &mut rng);
        let k = Intrinsics::for_resolution(8);
        let s = RenderSettings::default().with_seed(seed);
        let out = render(&model, &w, &look_at_pose(yaw, pitch, 3.0).unwrap(), &k, None, &s).unwrap();
        for &o in &out.opacity.data {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&o));
        }
        for &d in &out.depth.data {
            prop_assert!(d >= s.near - 1e-9 && d <= s.far + 1e-9);
        }
        for &c in &out.rgb.data {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
        }
    }

    #[test]
    fn warp_commutes_with_mirroring(seed in 0u64..1000, ys in -0.6f64..0.6, dy in -0.25f64..0.25) {
        let k = Intrinsics::for_resolution(12);
        let ps = look_at_pose(ys, 0.05, 3.0).unwrap();
        let pt = look_at_pose(ys + dy, 0.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth_s = Image::from_fn(12, 12, 1, |_, _, _| rng.random_range(2.5..3.2));
        let depth_t = Image::from_fn(12, 12, 1, |_, _, _| rng.random_range(2.5..3.2));
        let img = random_image(12, 12, 3, seed + 3);
        let (a, ma) = warp_image(&img, &depth_s, &ps, &pt, &depth_t, &k).unwrap();
        let (b, mb) = warp_image(
            &mirror_image(&img),
            &depth_s.flip_horizontal(),
            &mirror_pose(&ps),
            &mirror_pose(&pt),
            &depth_t.flip_horizontal(),
            &k,
        )
        .unwrap();
        prop_assert_eq!(&mb, &ma.flip_horizontal());
        let fa = a.flip_horizontal();
        for y in 0..12 {
            for x in 0..12 {
                if mb.get(x, y) {
                    for c in 0..3 {
                        prop_assert!((b.get(x, y, c) - fa.get(x, y, c)).abs() < 1e-9);
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn symmetric_scenes_render_mirrored(seed in 0u64..500, yaw in -1.0f64..1.0, rs in 0u64..100) {
        let spec = generate_scene(seed, 0.0).unwrap();
        let k = Intrinsics::for_resolution(16);
        let s = RenderSettings::default().with_seed(rs);
        let p = look_at_pose(yaw, 0.1, 3.0).unwrap();
        let a = render_gt(&spec, &p, &k, &s).unwrap();
        let b = render_gt(&spec, &mirror_pose(&p), &k, &s).unwrap();
        prop_assert!(b.rgb.max_abs_diff(&a.rgb.flip_horizontal()) <= 1e-6);
        prop_assert_eq!(b.mask, a.mask.flip_horizontal());
    }

    #[test]
    fn roi_boxes_stay_in_frame(seed in 0u64..500, level in 0.0f64..1.0, yaw in -1.05f64..1.05) {
        let spec = generate_scene(seed, level).unwrap();
        let k = Intrinsics::for_resolution(32);
        let boxes = spec.roi_boxes(&look_at_pose(yaw, 0.0, 3.0).unwrap(), &k).unwrap();
        for b in [boxes.eyes, boxes.nose, boxes.mouth] {
            prop_assert!(b.x0 < b.x1 && b.y0 < b.y1);
            prop_assert!(b.x1 <= 32.0 && b.y1 <= 32.0 && b.x0 >= 0.0 && b.y0 >= 0.0);
        }
    }
}
