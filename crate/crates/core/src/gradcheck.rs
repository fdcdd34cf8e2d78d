//! Finite-difference checks of every loss term composed with the renderer,
//! on a single 4x4x4 grid model rendering 8x8 images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::{FieldShape, LatentCode, ModelGrad, NoiseMap, PriorDecoder, RenderGrad, RenderSettings};
use crate::geometry::{look_at_pose, mirror_pose, Intrinsics, Pose};
use crate::grad::{grad_check, GradReport, ParamSet, Tensor, NOISE_NAME};
use crate::image::{Image, Mask};
use crate::losses::{
    adjacent_loss, contextual_loss, depth_reg, l2, msgp, noise_reg, select_grad, DepthAnchor, RoiBox, RoiBoxes,
    Stage1Objective, Stage1Problem, Stage2Objective, Stage2Problem, Stage2Weights, StageGrad, Term, ModelState,
};
use crate::warp::{Provenance, PseudoView};

pub const SIDE: usize = 8;
pub const TOLERANCE: f64 = 1e-3;
pub const EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub term: String,
    pub passed: bool,
    pub report: GradReport,
}

fn fixture(seed: u64, with_noise: bool) -> ModelState {
    let shape = FieldShape {
        levels: vec![(4, 3)],
        channels: 4,
    };
    let mut model = PriorDecoder::random(&shape, seed).expect("valid shape");
    // Larger grid values give a field with visible structure at 8x8.
    model.levels[0].data.iter_mut().for_each(|v| *v *= 6.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9C);
    let latent = LatentCode::random(&shape, 1.0, &mut rng);
    let noise = with_noise.then(|| NoiseMap {
        map: Image::from_fn(SIDE, SIDE, 1, |_, _, _| rng.random_range(-1.0..1.0)),
    });
    ModelState { model, latent, noise }
}

fn random_image(channels: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(SIDE, SIDE, channels, |_, _, _| rng.random::<f64>())
}

fn pose(yaw: f64) -> Pose {
    look_at_pose(yaw, 0.05, 3.0).expect("valid pose")
}

fn pseudo(seed: u64, provenance: Provenance, yaw: f64) -> PseudoView {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = Mask::from_fn(SIDE, SIDE, |_, _| rng.random::<f64>() < 0.8);
    PseudoView {
        pose: pose(yaw),
        image: random_image(3, seed + 1).masked(&mask),
        mask,
        provenance,
        roi: Some(RoiBoxes {
            eyes: RoiBox::from([1.0, 1.0, 7.0, 6.0]),
            nose: RoiBox::from([2.0, 2.0, 6.0, 7.0]),
            mouth: RoiBox::from([0.0, 3.0, 8.0, 8.0]),
        }),
    }
}

/// Checks `term(render_rgb)` through one render at `pose`.
fn rgb_term(
    state: &ModelState,
    pose: Pose,
    seed: u64,
    term: impl Fn(&Image, bool) -> Result<Term>,
) -> Result<GradReport> {
    let k = Intrinsics::for_resolution(SIDE);
    let settings = RenderSettings::default().with_seed(seed);
    let base = state.clone();
    let f = move |p: &ParamSet, with_grad: bool| -> Result<(f64, Option<ParamSet>)> {
        let s = base.with_params(p)?;
        let field = s.model.modulate(&s.latent)?;
        let out = field.render(&pose, &k, None, &settings);
        let t = term(&out.rgb, with_grad)?;
        let Some(g) = t.grad else { return Ok((t.value, None)) };
        let mut acc = field.grad_accumulator();
        field.backward(&pose, &k, None, &settings, &RenderGrad::rgb(g), &mut acc);
        let ModelGrad { theta, latent } = field.finish(&acc, &s.latent);
        let sg = StageGrad { theta, latent, noise: None };
        Ok((t.value, Some(select_grad(p, &sg)?)))
    };
    grad_check(&f, &state.params()?, EPSILON, seed)
}

/// Runs every check and reports each against [`TOLERANCE`].
pub fn standard_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let st = fixture(seed, false);
    let mut out: Vec<(String, GradReport)> = Vec::new();
    let target = random_image(3, seed + 1);

    out.push(("l2".into(), rgb_term(&st, pose(0.4), seed + 2, |r, g| l2(r, &target, None, g))?));
    out.push(("msgp".into(), rgb_term(&st, pose(0.4), seed + 3, |r, g| msgp(r, &target, None, g))?));
    out.push((
        "contextual_loss".into(),
        rgb_term(&st, pose(-0.3), seed + 4, |r, g| contextual_loss(r, &target, g))?,
    ));
    let adj = pseudo(seed + 5, Provenance::FromSource, 0.7);
    out.push((
        "adjacent_loss".into(),
        rgb_term(&st, adj.pose, seed + 6, |r, g| adjacent_loss(r, &adj, g))?,
    ));

    let noise = {
        let n = random_image(1, seed + 7);
        let params = ParamSet::new().with(NOISE_NAME, Tensor::new(vec![SIDE, SIDE], n.data.clone()))?;
        let f = |p: &ParamSet, with_grad: bool| -> Result<(f64, Option<ParamSet>)> {
            let t = p.get(NOISE_NAME).expect("noise tensor");
            let img = Image::from_vec(SIDE, SIDE, 1, t.data.clone())?;
            let r = noise_reg(&img, with_grad)?;
            let g = r
                .grad
                .map(|g| ParamSet::new().with(NOISE_NAME, Tensor::new(vec![SIDE, SIDE], g.data)))
                .transpose()?;
            Ok((r.value, g))
        };
        grad_check(&f, &params, EPSILON, seed + 8)?
    };
    out.push(("noise_reg".into(), noise));

    let depth = {
        let k = Intrinsics::for_resolution(SIDE);
        let settings = RenderSettings::default().with_seed(seed + 9);
        let poses = [pose(-0.4), pose(0.5)];
        let anchors: Vec<DepthAnchor> = poses
            .iter()
            .map(|_| DepthAnchor::new(Image::filled(SIDE, SIDE, 1, 2.6), &Image::filled(SIDE, SIDE, 1, 1.0)))
            .collect();
        let base = st.clone();
        let f = move |p: &ParamSet, with_grad: bool| -> Result<(f64, Option<ParamSet>)> {
            let s = base.with_params(p)?;
            let field = s.model.modulate(&s.latent)?;
            let depths: Vec<Image> = poses.iter().map(|q| field.render(q, &k, None, &settings).depth).collect();
            let (v, gs) = depth_reg(&depths, &anchors, with_grad)?;
            let Some(gs) = gs else { return Ok((v, None)) };
            let mut acc = field.grad_accumulator();
            for (q, g) in poses.iter().zip(gs) {
                let rg = RenderGrad {
                    rgb: None,
                    depth: Some(g),
                    opacity: None,
                };
                field.backward(q, &k, None, &settings, &rg, &mut acc);
            }
            let ModelGrad { theta, latent } = field.finish(&acc, &s.latent);
            Ok((v, Some(select_grad(p, &StageGrad { theta, latent, noise: None })?)))
        };
        grad_check(&f, &st.params()?, EPSILON, seed + 10)?
    };
    out.push(("depth_reg".into(), depth));

    let stage1 = {
        let src = random_image(3, seed + 11);
        let mir = src.flip_horizontal();
        let pose_s = pose(0.8);
        let obj = Stage1Objective {
            state: fixture(seed + 12, true),
            problem: Stage1Problem {
                source: &src,
                mirror: &mir,
                pose_s,
                pose_m: mirror_pose(&pose_s),
                k: Intrinsics::for_resolution(SIDE),
                settings: RenderSettings::default().with_seed(seed + 13),
                lambda_m: 0.7,
                lambda_n: 10.0,
            },
        };
        grad_check(&obj, &obj.state.params()?, EPSILON, seed + 14)?
    };
    out.push(("stage1".into(), stage1));

    let stage2 = {
        let src = random_image(3, seed + 15);
        let k = Intrinsics::for_resolution(SIDE);
        let settings = RenderSettings::default().with_seed(seed + 16);
        let sp = [pseudo(seed + 17, Provenance::FromSource, 0.7), pseudo(seed + 18, Provenance::FromSource, 1.0)];
        let mp = [pseudo(seed + 19, Provenance::FromMirror, -0.8)];
        let poses = [pose(-0.5), pose(0.0), pose(0.5)];
        let anchors: Vec<DepthAnchor> = poses
            .iter()
            .map(|_| DepthAnchor::new(Image::filled(SIDE, SIDE, 1, 2.7), &Image::filled(SIDE, SIDE, 1, 1.0)))
            .collect();
        let mut prob = Stage2Problem::new(&src, pose(0.9), k, settings);
        prob.source_pseudos = sp.iter().collect();
        prob.mirror_pseudos = mp.iter().collect();
        prob.depth_poses = &poses;
        prob.anchors = &anchors;
        prob.roi_size = SIDE;
        prob.weights = Stage2Weights {
            adj: 0.5,
            sym: 0.3,
            depth: 2.0,
        };
        let obj = Stage2Objective {
            state: st.clone(),
            problem: prob,
        };
        let mut theta = ParamSet::new();
        st.model.to_params(&mut theta)?;
        grad_check(&obj, &theta, EPSILON, seed + 20)?
    };
    out.push(("stage2".into(), stage2));

    Ok(out
        .into_iter()
        .map(|(term, report)| SuiteEntry {
            passed: report.tensors.iter().all(|t| t.max_rel_error < TOLERANCE),
            term,
            report,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_term_passes() {
        let suite = standard_suite(1).unwrap();
        assert_eq!(suite.len(), 8);
        for e in &suite {
            assert!(e.passed, "{}: {}", e.term, e.report.max_rel_error());
            assert!(e.report.tensors.iter().all(|t| t.checked > 0));
        }
    }
}
