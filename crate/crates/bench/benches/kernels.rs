use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use spi_core::field::{FieldShape, LatentCode, PriorDecoder, RenderGrad, RenderSettings};
use spi_core::geometry::{look_at_pose, mirror_pose, Intrinsics};
use spi_core::image::Image;
use spi_core::losses::{contextual_loss, msgp, stage1_loss, Stage1Problem};
use spi_core::synthhead::{generate_scene, render_gt};
use spi_core::warp::{mirror_image, WarpField};
use spi_core::NoiseMap;

const SIDE: usize = 32;

fn model() -> (PriorDecoder, LatentCode) {
    let shape = FieldShape::default();
    let m = PriorDecoder::random(&shape, 1).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
    let w = LatentCode::random(&shape, 0.3, &mut rng);
    (m, w)
}

fn rendering(c: &mut Criterion) {
    let (m, w) = model();
    let k = Intrinsics::for_resolution(SIDE);
    let pose = look_at_pose(0.5, 0.0, 3.0).unwrap();
    let s = RenderSettings::default();
    let field = m.modulate(&w).unwrap();
    c.bench_function("render_32", |b| b.iter(|| black_box(field.render(&pose, &k, None, &s))));
    let g = Image::filled(SIDE, SIDE, 3, 0.01);
    c.bench_function("render_backward_32", |b| {
        b.iter(|| {
            let mut acc = field.grad_accumulator();
            field.backward(&pose, &k, None, &s, &RenderGrad::rgb(g.clone()), &mut acc);
            black_box(field.finish(&acc, &w))
        })
    });
    let spec = generate_scene(3, 0.0).unwrap();
    c.bench_function("render_gt_32", |b| b.iter(|| black_box(render_gt(&spec, &pose, &k, &s).unwrap())));
}

fn losses(c: &mut Criterion) {
    let a = Image::from_fn(SIDE, SIDE, 3, |x, y, ch| ((x * 7 + y * 3 + ch) % 11) as f64 / 11.0);
    let b = a.flip_horizontal();
    c.bench_function("msgp_32", |bch| bch.iter(|| black_box(msgp(&a, &b, None, true).unwrap())));
    let crop_a = Image::from_fn(16, 16, 3, |x, y, ch| ((x + 2 * y + ch) % 5) as f64 / 5.0);
    let crop_b = crop_a.flip_horizontal();
    c.bench_function("contextual_16", |bch| {
        bch.iter(|| black_box(contextual_loss(&crop_a, &crop_b, true).unwrap()))
    });
}

fn stage1_step(c: &mut Criterion) {
    let (m, w) = model();
    let k = Intrinsics::for_resolution(SIDE);
    let pose_s = look_at_pose(1.0, 0.0, 3.0).unwrap();
    let src = m.modulate(&w).unwrap().render(&pose_s, &k, None, &RenderSettings::default()).rgb;
    let mir = mirror_image(&src);
    let n = NoiseMap::zeros(SIDE, SIDE);
    let p = Stage1Problem {
        source: &src,
        mirror: &mir,
        pose_s,
        pose_m: mirror_pose(&pose_s),
        k,
        settings: RenderSettings::default(),
        lambda_m: 0.9,
        lambda_n: 1e4,
    };
    c.bench_function("stage1_loss_grad_32", |b| {
        b.iter(|| black_box(stage1_loss(&m, &w, &n, &p, true).unwrap()))
    });
}

fn warping(c: &mut Criterion) {
    let k = Intrinsics::for_resolution(SIDE);
    let src = look_at_pose(0.0, 0.0, 3.0).unwrap();
    let dst = look_at_pose(0.2, 0.0, 3.0).unwrap();
    let depth = Image::filled(SIDE, SIDE, 1, 2.5);
    c.bench_function("warp_field_32", |b| {
        b.iter(|| black_box(WarpField::new(&k, &src, &dst, &depth).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = rendering, losses, stage1_step, warping
}
criterion_main!(benches);
