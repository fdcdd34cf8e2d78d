//! The two stage objectives and their gradients through the renderer.

use serde::{Deserialize, Serialize};

use super::{adjacent_loss, depth_reg, l2, msgp, noise_reg, symmetric_loss, DepthAnchor, ROI_SIZE};
use crate::error::{Error, Result};
use crate::field::{LatentCode, ModelGrad, ModulatedField, NoiseMap, PriorDecoder, RenderGrad, RenderSettings};
use crate::geometry::{Intrinsics, Pose};
use crate::grad::{ensure_finite, Objective, ParamSet, Tensor, LATENT_PREFIX, NOISE_NAME, THETA_PREFIX};
use crate::image::Image;
use crate::warp::{Provenance, PseudoView};

/// Inputs of the latent-and-noise fitting stage.
#[derive(Clone, Debug)]
pub struct Stage1Problem<'a> {
    pub source: &'a Image,
    pub mirror: &'a Image,
    pub pose_s: Pose,
    pub pose_m: Pose,
    pub k: Intrinsics,
    pub settings: RenderSettings,
    pub lambda_m: f64,
    pub lambda_n: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Terms {
    pub source: f64,
    pub mirror: f64,
    pub noise: f64,
    pub total: f64,
}

/// Gradient of a stage objective with respect to every model input.
#[derive(Clone, Debug)]
pub struct StageGrad {
    pub theta: PriorDecoder,
    pub latent: LatentCode,
    pub noise: Option<Image>,
}

fn add_image(acc: &mut Option<Image>, g: Image) {
    match acc {
        Some(a) => a.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
    }
}

fn scaled(g: Image, s: f64) -> Image {
    g.map(|v| v * s)
}

/// `msgp(render(pose_s), I_s) + lambda_m msgp(render(pose_m), I_m) + lambda_n noise_reg(n)`.
/// The mirror view is rendered with the horizontally flipped noise map.
pub fn stage1_loss(
    model: &PriorDecoder,
    w: &LatentCode,
    n: &NoiseMap,
    p: &Stage1Problem<'_>,
    with_grad: bool,
) -> Result<(Stage1Terms, Option<StageGrad>)> {
    if !(0.0..=1.0).contains(&p.lambda_m) {
        return Err(Error::InvalidArgument(format!("lambda_m must lie in [0,1], got {}", p.lambda_m)));
    }
    let field = model.modulate(w)?;
    let mut acc = with_grad.then(|| field.grad_accumulator());
    let mut noise_grad: Option<Image> = None;
    let mut terms = Stage1Terms::default();

    let out = field.render(&p.pose_s, &p.k, Some(n), &p.settings);
    let t = msgp(&out.rgb, p.source, None, with_grad)?;
    terms.source = ensure_finite("stage1.source", t.value)?;
    if let (Some(acc), Some(g)) = (acc.as_mut(), t.grad) {
        let gn = field.backward(&p.pose_s, &p.k, Some(n), &p.settings, &RenderGrad::rgb(g), acc);
        add_image(&mut noise_grad, gn.expect("noise gradient"));
    }

    if p.lambda_m > 0.0 {
        let flipped = n.flip_horizontal();
        let out = field.render(&p.pose_m, &p.k, Some(&flipped), &p.settings);
        let t = msgp(&out.rgb, p.mirror, None, with_grad)?;
        terms.mirror = ensure_finite("stage1.mirror", t.value)?;
        if let (Some(acc), Some(g)) = (acc.as_mut(), t.grad) {
            let g = scaled(g, p.lambda_m);
            let gn = field.backward(&p.pose_m, &p.k, Some(&flipped), &p.settings, &RenderGrad::rgb(g), acc);
            add_image(&mut noise_grad, gn.expect("noise gradient").flip_horizontal());
        }
    }

    let t = noise_reg(&n.map, with_grad)?;
    terms.noise = ensure_finite("stage1.noise", t.value)?;
    if let Some(g) = t.grad {
        add_image(&mut noise_grad, scaled(g, p.lambda_n));
    }
    terms.total = terms.source + p.lambda_m * terms.mirror + p.lambda_n * terms.noise;
    let grad = acc.map(|acc| {
        let ModelGrad { theta, latent } = field.finish(&acc, w);
        StageGrad {
            theta,
            latent,
            noise: noise_grad,
        }
    });
    Ok((terms, grad))
}

/// Term weights of the generator-tuning stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Weights {
    pub adj: f64,
    pub sym: f64,
    pub depth: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Self {
            adj: 0.1,
            sym: 0.05,
            depth: 1.0,
        }
    }
}

/// Inputs of one generator-tuning evaluation. Pseudo slices are the
/// minibatch for this step; `depth_poses` pair with `anchors`.
#[derive(Clone, Debug)]
pub struct Stage2Problem<'a> {
    pub source: &'a Image,
    pub pose_s: Pose,
    pub k: Intrinsics,
    pub settings: RenderSettings,
    pub weights: Stage2Weights,
    pub source_pseudos: Vec<&'a PseudoView>,
    pub mirror_pseudos: Vec<&'a PseudoView>,
    pub depth_poses: &'a [Pose],
    pub anchors: &'a [DepthAnchor],
    pub roi_size: usize,
}

impl<'a> Stage2Problem<'a> {
    pub fn new(source: &'a Image, pose_s: Pose, k: Intrinsics, settings: RenderSettings) -> Self {
        Self {
            source,
            pose_s,
            k,
            settings,
            weights: Stage2Weights::default(),
            source_pseudos: Vec::new(),
            mirror_pseudos: Vec::new(),
            depth_poses: &[],
            anchors: &[],
            roi_size: ROI_SIZE,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Terms {
    pub ori: f64,
    pub adj: f64,
    pub sym: f64,
    pub depth: f64,
    pub total: f64,
}

fn backward_rgb(
    field: &ModulatedField<'_>,
    pose: &Pose,
    p: &Stage2Problem<'_>,
    g: Image,
    acc: &mut Option<crate::field::FieldGrad>,
) {
    if let Some(acc) = acc.as_mut() {
        field.backward(pose, &p.k, None, &p.settings, &RenderGrad::rgb(g), acc);
    }
}

/// `L_ori + adj L_adj + sym L_sym + depth L_depth`, where `L_ori` is l2 plus
/// msgp at the source pose, `L_adj` averages over the source-side pseudos
/// and `L_sym` over the mirror-side pseudos. Terms with zero weight are not
/// evaluated. Renders carry no noise.
pub fn stage2_loss(
    model: &PriorDecoder,
    w: &LatentCode,
    p: &Stage2Problem<'_>,
    with_grad: bool,
) -> Result<(Stage2Terms, Option<StageGrad>)> {
    if p.source_pseudos.iter().any(|v| v.provenance != Provenance::FromSource)
        || p.mirror_pseudos.iter().any(|v| v.provenance != Provenance::FromMirror)
    {
        return Err(Error::InvalidArgument("pseudo view provenance does not match its term".into()));
    }
    let wts = p.weights;
    let field = model.modulate(w)?;
    let mut acc = with_grad.then(|| field.grad_accumulator());
    let mut terms = Stage2Terms::default();

    let out = field.render(&p.pose_s, &p.k, None, &p.settings);
    let a = l2(&out.rgb, p.source, None, with_grad)?;
    let b = msgp(&out.rgb, p.source, None, with_grad)?;
    terms.ori = ensure_finite("stage2.ori", a.value + b.value)?;
    if let (Some(ga), Some(gb)) = (a.grad, b.grad) {
        let mut g = ga;
        g.data.iter_mut().zip(&gb.data).for_each(|(x, y)| *x += y);
        backward_rgb(&field, &p.pose_s, p, g, &mut acc);
    }

    if wts.adj > 0.0 && !p.source_pseudos.is_empty() {
        let scale = 1.0 / p.source_pseudos.len() as f64;
        for pv in &p.source_pseudos {
            let out = field.render(&pv.pose, &p.k, None, &p.settings);
            let t = adjacent_loss(&out.rgb, pv, with_grad)?;
            terms.adj += scale * t.value;
            if let Some(g) = t.grad {
                backward_rgb(&field, &pv.pose, p, scaled(g, wts.adj * scale), &mut acc);
            }
        }
        ensure_finite("stage2.adj", terms.adj)?;
    }

    if wts.sym > 0.0 && !p.mirror_pseudos.is_empty() {
        let renders: Vec<Image> = p
            .mirror_pseudos
            .iter()
            .map(|pv| field.render(&pv.pose, &p.k, None, &p.settings).rgb)
            .collect();
        let refs: Vec<&Image> = renders.iter().collect();
        let (v, grads) = symmetric_loss(&refs, &p.mirror_pseudos, p.roi_size, with_grad)?;
        terms.sym = ensure_finite("stage2.sym", v)?;
        if let Some(grads) = grads {
            for (pv, g) in p.mirror_pseudos.iter().zip(grads) {
                if g.data.iter().any(|&x| x != 0.0) {
                    backward_rgb(&field, &pv.pose, p, scaled(g, wts.sym), &mut acc);
                }
            }
        }
    }

    if wts.depth > 0.0 && !p.depth_poses.is_empty() {
        let outs: Vec<Image> = p
            .depth_poses
            .iter()
            .map(|pose| field.render(pose, &p.k, None, &p.settings).depth)
            .collect();
        let (v, grads) = depth_reg(&outs, p.anchors, with_grad)?;
        terms.depth = ensure_finite("stage2.depth", v)?;
        if let (Some(acc), Some(grads)) = (acc.as_mut(), grads) {
            for (pose, g) in p.depth_poses.iter().zip(grads) {
                if g.data.iter().any(|&x| x != 0.0) {
                    let g = RenderGrad::depth(scaled(g, wts.depth));
                    field.backward(pose, &p.k, None, &p.settings, &g, acc);
                }
            }
        }
    }

    terms.total = terms.ori + wts.adj * terms.adj + wts.sym * terms.sym + wts.depth * terms.depth;
    let grad = acc.map(|acc| {
        let ModelGrad { theta, latent } = field.finish(&acc, w);
        StageGrad {
            theta,
            latent,
            noise: None,
        }
    });
    Ok((terms, grad))
}

/// Model state that an [`Objective`] perturbs through named parameters.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub model: PriorDecoder,
    pub latent: LatentCode,
    pub noise: Option<NoiseMap>,
}

impl ModelState {
    /// Copy with every parameter named in `params` overwritten.
    pub fn with_params(&self, params: &ParamSet) -> Result<Self> {
        let mut s = self.clone();
        s.model.load_params(params)?;
        s.latent.load_params(params)?;
        if let Some(n) = s.noise.as_mut() {
            n.load_params(params)?;
        }
        Ok(s)
    }

    /// All parameters: `theta.*`, `w.*`, and `n` when noise is present.
    pub fn params(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        self.model.to_params(&mut p)?;
        self.latent.to_params(&mut p)?;
        if let Some(n) = &self.noise {
            n.to_params(&mut p)?;
        }
        Ok(p)
    }
}

/// Gradient entries for exactly the names in `like`.
pub(crate) fn select_grad(like: &ParamSet, g: &StageGrad) -> Result<ParamSet> {
    let mut all = ParamSet::new();
    g.theta.to_params(&mut all)?;
    g.latent.to_params(&mut all)?;
    if let Some(n) = &g.noise {
        all.insert(NOISE_NAME, Tensor::new(vec![n.height, n.width], n.data.clone()))?;
    }
    let mut out = ParamSet::new();
    for (name, t) in like.iter() {
        let src = all.get(name).ok_or_else(|| {
            let known = name.starts_with(THETA_PREFIX) || name.starts_with(LATENT_PREFIX) || name == NOISE_NAME;
            Error::InvalidArgument(if known {
                format!("no gradient for `{name}`")
            } else {
                format!("unknown parameter `{name}`")
            })
        })?;
        out.insert(name, Tensor::new(t.shape.clone(), src.data.clone()))?;
    }
    Ok(out)
}

/// Stage-1 objective over any subset of the model's named parameters.
pub struct Stage1Objective<'a> {
    pub state: ModelState,
    pub problem: Stage1Problem<'a>,
}

impl Objective for Stage1Objective<'_> {
    fn evaluate(&self, params: &ParamSet, with_grad: bool) -> Result<(f64, Option<ParamSet>)> {
        let s = self.state.with_params(params)?;
        let n = s
            .noise
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("stage-1 objective needs a noise map".into()))?;
        let (terms, g) = stage1_loss(&s.model, &s.latent, n, &self.problem, with_grad)?;
        let g = g.map(|g| select_grad(params, &g)).transpose()?;
        Ok((terms.total, g))
    }
}

/// Stage-2 objective over any subset of the model's named parameters.
pub struct Stage2Objective<'a> {
    pub state: ModelState,
    pub problem: Stage2Problem<'a>,
}

impl Objective for Stage2Objective<'_> {
    fn evaluate(&self, params: &ParamSet, with_grad: bool) -> Result<(f64, Option<ParamSet>)> {
        let s = self.state.with_params(params)?;
        let (terms, g) = stage2_loss(&s.model, &s.latent, &self.problem, with_grad)?;
        let g = g.map(|g| select_grad(params, &g)).transpose()?;
        Ok((terms.total, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldShape;
    use crate::geometry::{look_at_pose, mirror_pose};
    use crate::grad::{backward, grad_check};
    use crate::image::Mask;
    use crate::losses::{RoiBox, RoiBoxes};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SIDE: usize = 8;
    const TOL: f64 = 1e-3;

    fn shape() -> FieldShape {
        FieldShape {
            levels: vec![(4, 3)],
            channels: 4,
        }
    }

    fn state(seed: u64) -> ModelState {
        let mut model = PriorDecoder::random(&shape(), seed).unwrap();
        model.levels[0].data.iter_mut().for_each(|v| *v *= 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let latent = LatentCode::random(&shape(), 1.0, &mut rng);
        let noise = NoiseMap {
            map: Image::from_fn(SIDE, SIDE, 1, |_, _, _| rng.random_range(-1.0..1.0)),
        };
        ModelState {
            model,
            latent,
            noise: Some(noise),
        }
    }

    fn target(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(SIDE, SIDE, 3, |_, _, _| rng.random::<f64>())
    }

    fn assert_report(r: &crate::grad::GradReport) {
        for t in &r.tensors {
            assert!(
                t.max_rel_error < TOL,
                "{}: rel {} (analytic {}, numeric {})",
                t.name,
                t.max_rel_error,
                t.analytic,
                t.numeric
            );
        }
    }

    #[test]
    fn render_adjoint_matches_finite_differences() {
        let st = state(1);
        let k = Intrinsics::for_resolution(SIDE);
        let pose = look_at_pose(0.4, 0.1, 3.0).unwrap();
        let settings = RenderSettings::default().with_seed(3);
        let t_rgb = target(2);
        let t_depth = Image::filled(SIDE, SIDE, 1, 3.0);
        let t_op = Image::filled(SIDE, SIDE, 1, 0.3);
        let base = st.clone();
        let f = move |p: &ParamSet, with_grad: bool| -> Result<(f64, Option<ParamSet>)> {
            let s = base.with_params(p)?;
            let field = s.model.modulate(&s.latent)?;
            let out = field.render(&pose, &k, s.noise.as_ref(), &settings);
            let a = l2(&out.rgb, &t_rgb, None, with_grad)?;
            let b = l2(&out.depth, &t_depth, None, with_grad)?;
            let c = l2(&out.opacity, &t_op, None, with_grad)?;
            let v = a.value + b.value + c.value;
            if !with_grad {
                return Ok((v, None));
            }
            let mut acc = field.grad_accumulator();
            let g = RenderGrad {
                rgb: a.grad,
                depth: b.grad,
                opacity: c.grad,
            };
            let gn = field.backward(&pose, &k, s.noise.as_ref(), &settings, &g, &mut acc);
            let ModelGrad { theta, latent } = field.finish(&acc, &s.latent);
            let sg = StageGrad { theta, latent, noise: gn };
            Ok((v, Some(select_grad(p, &sg)?)))
        };
        let params = st.params().unwrap();
        assert_report(&grad_check(&f, &params, 1e-6, 4).unwrap());
    }

    fn stage1_fixture<'a>(src: &'a Image, mir: &'a Image, lambda_m: f64) -> Stage1Problem<'a> {
        let pose_s = look_at_pose(0.8, 0.05, 3.0).unwrap();
        Stage1Problem {
            source: src,
            mirror: mir,
            pose_m: mirror_pose(&pose_s),
            pose_s,
            k: Intrinsics::for_resolution(SIDE),
            settings: RenderSettings::default().with_seed(5),
            lambda_m,
            lambda_n: 10.0,
        }
    }

    #[test]
    fn stage1_gradient() {
        let src = target(6);
        let mir = src.flip_horizontal();
        let obj = Stage1Objective {
            state: state(7),
            problem: stage1_fixture(&src, &mir, 0.7),
        };
        let params = obj.state.params().unwrap();
        assert_report(&grad_check(&obj, &params, 1e-6, 8).unwrap());
    }

    #[test]
    fn stage1_mirror_weight_is_linear() {
        let src = target(9);
        let mir = target(10);
        let st = state(11);
        let n = st.noise.clone().unwrap();
        let eval = |lm: f64| {
            let p = stage1_fixture(&src, &mir, lm);
            stage1_loss(&st.model, &st.latent, &n, &p, true).unwrap()
        };
        let (t0, g0) = eval(0.0);
        let (t1, g1) = eval(0.4);
        let (t2, g2) = eval(0.8);
        assert_eq!(t0.mirror, 0.0);
        assert!((t2.total - t0.total - 2.0 * (t1.total - t0.total)).abs() < 1e-12);
        let (g0, g1, g2) = (g0.unwrap(), g1.unwrap(), g2.unwrap());
        for ((a, b), c) in g0.latent.flat().iter().zip(g1.latent.flat()).zip(g2.latent.flat()) {
            assert!(((c - a) - 2.0 * (b - a)).abs() < 1e-9 * (1.0 + c.abs()));
        }
        let p = stage1_fixture(&src, &mir, 1.5);
        assert!(stage1_loss(&st.model, &st.latent, &n, &p, false).is_err());
    }

    #[test]
    fn stage1_at_fixed_point_is_noise_only() {
        let st = state(12);
        let n = NoiseMap::zeros(SIDE, SIDE);
        let dummy = target(0);
        let f = stage1_fixture(&dummy, &dummy, 0.9);
        let field = st.model.modulate(&st.latent).unwrap();
        let src = field.render(&f.pose_s, &f.k, None, &f.settings).rgb;
        let mir = field.render(&f.pose_m, &f.k, None, &f.settings).rgb;
        let p = stage1_fixture(&src, &mir, 0.9);
        let (t, _) = stage1_loss(&st.model, &st.latent, &n, &p, false).unwrap();
        assert_eq!(t.total, 0.0);
    }

    fn pseudo(seed: u64, provenance: Provenance, yaw: f64) -> PseudoView {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = Mask::from_fn(SIDE, SIDE, |_, _| rng.random::<f64>() < 0.8);
        let b = RoiBox::from([1.0, 1.0, 7.0, 6.0]);
        PseudoView {
            pose: look_at_pose(yaw, 0.0, 3.0).unwrap(),
            image: target(seed).masked(&mask),
            mask,
            provenance,
            roi: Some(RoiBoxes {
                eyes: b,
                nose: RoiBox::from([2.0, 2.0, 6.0, 7.0]),
                mouth: RoiBox::from([0.0, 3.0, 8.0, 8.0]),
            }),
        }
    }

    #[test]
    fn stage2_gradient_and_term_flags() {
        let src = target(13);
        let st = ModelState {
            noise: None,
            ..state(14)
        };
        let k = Intrinsics::for_resolution(SIDE);
        let settings = RenderSettings::default().with_seed(2);
        let pose_s = look_at_pose(0.9, 0.0, 3.0).unwrap();
        let sp = [pseudo(15, Provenance::FromSource, 0.7), pseudo(16, Provenance::FromSource, 1.0)];
        let mp = [pseudo(17, Provenance::FromMirror, -0.8)];
        let poses: Vec<Pose> = [-0.5, 0.0, 0.5].iter().map(|&y| look_at_pose(y, 0.0, 3.0).unwrap()).collect();
        let perturbed = {
            let mut m = st.model.clone();
            m.levels[0].data.iter_mut().for_each(|v| *v *= 0.7);
            m
        };
        let anchors: Vec<DepthAnchor> = poses
            .iter()
            .map(|p| {
                let o = perturbed.modulate(&st.latent).unwrap().render(p, &k, None, &settings);
                DepthAnchor::new(o.depth, &o.opacity.map(|_| 1.0))
            })
            .collect();
        let mut prob = Stage2Problem::new(&src, pose_s, k, settings);
        prob.source_pseudos = sp.iter().collect();
        prob.mirror_pseudos = mp.iter().collect();
        prob.depth_poses = &poses;
        prob.anchors = &anchors;
        prob.roi_size = 8;
        prob.weights = Stage2Weights {
            adj: 0.5,
            sym: 0.3,
            depth: 2.0,
        };
        let (terms, _) = stage2_loss(&st.model, &st.latent, &prob, false).unwrap();
        assert!(terms.ori > 0.0 && terms.adj > 0.0 && terms.sym > 0.0 && terms.depth > 0.0);
        let expected = terms.ori + 0.5 * terms.adj + 0.3 * terms.sym + 2.0 * terms.depth;
        assert!((terms.total - expected).abs() < 1e-12);

        let mut params = ParamSet::new();
        st.model.to_params(&mut params).unwrap();
        let obj = Stage2Objective {
            state: st.clone(),
            problem: prob.clone(),
        };
        assert_report(&grad_check(&obj, &params, 1e-6, 18).unwrap());

        // Each zero weight removes exactly its own term.
        for which in 0..3 {
            let mut p = prob.clone();
            match which {
                0 => p.weights.adj = 0.0,
                1 => p.weights.sym = 0.0,
                _ => p.weights.depth = 0.0,
            }
            let (t, _) = stage2_loss(&st.model, &st.latent, &p, false).unwrap();
            let dropped = [0.5 * terms.adj, 0.3 * terms.sym, 2.0 * terms.depth][which];
            assert!((t.total - (terms.total - dropped)).abs() < 1e-12);
        }

        // Wrong provenance is rejected.
        let mut p = prob.clone();
        p.mirror_pseudos = sp.iter().collect();
        assert!(stage2_loss(&st.model, &st.latent, &p, false).is_err());
    }

    #[test]
    fn stage2_zero_at_documented_minimum() {
        let st = ModelState {
            noise: None,
            ..state(19)
        };
        let k = Intrinsics::for_resolution(SIDE);
        let settings = RenderSettings::default();
        let pose_s = look_at_pose(0.3, 0.0, 3.0).unwrap();
        let field = st.model.modulate(&st.latent).unwrap();
        let src = field.render(&pose_s, &k, None, &settings).rgb;
        let poses = vec![pose_s];
        let o = field.render(&pose_s, &k, None, &settings);
        let anchors = vec![DepthAnchor::new(o.depth, &o.opacity)];
        let mut prob = Stage2Problem::new(&src, pose_s, k, settings);
        prob.depth_poses = &poses;
        prob.anchors = &anchors;
        let (t, g) = stage2_loss(&st.model, &st.latent, &prob, true).unwrap();
        assert_eq!(t.total, 0.0);
        let (_, gp) = backward(
            &Stage2Objective {
                state: st.clone(),
                problem: prob.clone(),
            },
            &st.params().unwrap(),
        )
        .unwrap();
        assert!(gp.iter().all(|(_, t)| t.data.iter().all(|&v| v == 0.0)));
        assert!(g.unwrap().noise.is_none());
    }
}
