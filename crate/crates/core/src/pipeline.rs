//! Prior pretraining, the two inversion stages, and their composition.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::field::{splitmix, FieldShape, LatentCode, NoiseMap, PriorDecoder, RenderGrad, RenderSettings};
use crate::geometry::{look_at_pose, mirror_pose, mirror_weight, yaw_of, Intrinsics, MirrorWeightParams, Pose, RIG_RADIUS};
use crate::grad::{ensure_finite, Adam, AdamConfig, ParamSet, Tensor};
use crate::image::Image;
use crate::losses::{
    l2, msgp, stage1_loss, stage2_loss, DepthAnchor, RoiBoxes, Stage1Problem, Stage2Problem, Stage2Weights, ROI_SIZE,
};
use crate::synthhead::SceneRecord;
use crate::warp::{build_pseudo_bank, mirror_image, BankConfig, PseudoBank, DEFAULT_SIGMA_MAX, DEFAULT_TAU};

/// Switches that remove parts of the method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Force the mirror weight to 0 (no mirror term, no mirror pseudo bank).
    pub no_symmetry: bool,
    /// Drop the adjacent-view pseudo loss.
    pub no_warp: bool,
    pub no_depth_reg: bool,
    pub no_sym_loss: bool,
    /// Stop after the latent stage.
    pub no_stage2: bool,
}

impl AblationFlags {
    /// Everything off except stage 2's reconstruction loss.
    pub fn pivotal_tuning_baseline() -> Self {
        Self {
            no_symmetry: true,
            no_warp: true,
            no_depth_reg: true,
            no_sym_loss: true,
            no_stage2: false,
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.no_symmetry, "no-symmetry"),
            (self.no_warp, "no-warp"),
            (self.no_depth_reg, "no-depth-reg"),
            (self.no_sym_loss, "no-sym-loss"),
            (self.no_stage2, "no-stage2"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

/// All knobs of one inversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub mirror: MirrorWeightParams,
    pub lambda_n: f64,
    pub weights: Stage2Weights,
    pub tau: f64,
    pub sigma_max: f64,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_lr: f64,
    /// Depth-regularisation poses as `(yaw, pitch)` in radians.
    pub pose_set: Vec<(f64, f64)>,
    /// Poses of the set used per stage-2 step; 0 uses all of them.
    pub depth_batch: usize,
    pub bank_size: usize,
    pub source_batch: usize,
    pub mirror_batch: usize,
    pub resolution: usize,
    pub samples: usize,
    pub roi_size: usize,
    /// Full-bank loss evaluation period in stage 2; 0 disables it.
    pub log_every: usize,
    pub seed: u64,
    pub flags: AblationFlags,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            mirror: MirrorWeightParams::default(),
            lambda_n: 1e4,
            weights: Stage2Weights::default(),
            tau: DEFAULT_TAU,
            sigma_max: DEFAULT_SIGMA_MAX,
            stage1_steps: 500,
            stage1_lr: 1e-2,
            stage2_steps: 1000,
            stage2_lr: 3e-3,
            pose_set: [0.0, 20.0, -20.0, 40.0, -40.0, 60.0, -60.0]
                .iter()
                .map(|d: &f64| (d.to_radians(), 0.0))
                .collect(),
            depth_batch: 0,
            bank_size: 16,
            source_batch: 2,
            mirror_batch: 2,
            resolution: 64,
            samples: crate::field::DEFAULT_SAMPLES,
            roi_size: ROI_SIZE,
            log_every: 100,
            seed: 0,
            flags: AblationFlags::default(),
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        self.mirror.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.stage1_steps == 0 || self.stage2_steps == 0 {
            return bad("step counts must be > 0");
        }
        if !(self.stage1_lr > 0.0 && self.stage2_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        let w = &self.weights;
        if [self.lambda_n, w.adj, w.sym, w.depth].iter().any(|&v| !(v >= 0.0)) {
            return bad("loss weights must be >= 0");
        }
        if !(self.tau > 0.0) || !(self.sigma_max >= 0.0) {
            return bad("tau must be > 0 and sigma_max >= 0");
        }
        if self.resolution < 8 || self.samples == 0 || self.roi_size < 3 {
            return bad("resolution must be >= 8, samples > 0, roi_size >= 3");
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::for_resolution(self.resolution)
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            samples: self.samples,
            ..RenderSettings::default()
        }
    }

    pub fn poses(&self) -> Result<Vec<Pose>> {
        self.pose_set
            .iter()
            .map(|&(y, p)| look_at_pose(y, p, RIG_RADIUS))
            .collect()
    }

    /// The effective stage-2 weights after ablation flags.
    pub fn effective_weights(&self) -> Stage2Weights {
        let f = self.flags;
        Stage2Weights {
            adj: if f.no_warp { 0.0 } else { self.weights.adj },
            sym: if f.no_sym_loss || f.no_symmetry || f.no_warp { 0.0 } else { self.weights.sym },
            depth: if f.no_depth_reg { 0.0 } else { self.weights.depth },
        }
    }
}

/// Settings of auto-decoder prior training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub shape: FieldShape,
    pub steps: usize,
    pub lr: f64,
    pub latent_lr: f64,
    pub latent_weight_decay: f64,
    pub latent_init_std: f64,
    /// Views rendered per step, all from one scene.
    pub views_per_step: usize,
    /// Weight of the l2 between rendered opacity and the ground-truth mask.
    pub silhouette_weight: f64,
    /// Weight of the l2 between rendered and ground-truth depth on the mask.
    pub depth_weight: f64,
    pub resolution: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            shape: FieldShape::default(),
            steps: 3000,
            lr: 1e-2,
            latent_lr: 1e-2,
            latent_weight_decay: 1e-4,
            latent_init_std: 0.3,
            views_per_step: 1,
            silhouette_weight: 1.0,
            depth_weight: 1.0,
            resolution: 64,
            samples: crate::field::DEFAULT_SAMPLES,
            seed: 0,
        }
    }
}

/// A trained generator with its latent statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Prior {
    pub model: PriorDecoder,
    pub w_avg: LatentCode,
    pub latents: Vec<LatentCode>,
}

fn scene_latent_prefix(i: usize) -> String {
    format!("scene{i:03}.")
}

impl Prior {
    pub fn to_params(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        self.model.to_params(&mut p)?;
        self.w_avg.to_params(&mut p)?;
        for (i, w) in self.latents.iter().enumerate() {
            let mut q = ParamSet::new();
            w.to_params(&mut q)?;
            for (n, t) in q.iter() {
                p.insert(format!("{}{n}", scene_latent_prefix(i)), t.clone())?;
            }
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "prior", "shape": self.model.shape(), "scenes": self.latents.len() });
        checkpoint::save(path, &self.to_params()?, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (p, meta) = checkpoint::load(path)?;
        let shape: FieldShape = serde_json::from_value(meta["shape"].clone())
            .map_err(|e| Error::format(path, format!("prior shape: {e}")))?;
        let scenes = meta["scenes"].as_u64().unwrap_or(0) as usize;
        let mut model = PriorDecoder::zeros(&shape)?;
        model.load_params(&p)?;
        let mut w_avg = LatentCode::zeros(&shape);
        w_avg.load_params(&p)?;
        let latents = (0..scenes)
            .map(|i| {
                let prefix = scene_latent_prefix(i);
                let mut sub = ParamSet::new();
                for (n, t) in p.iter().filter(|(n, _)| n.starts_with(&prefix)) {
                    sub.insert(&n[prefix.len()..], t.clone())?;
                }
                let mut w = LatentCode::zeros(&shape);
                w.load_params(&sub)?;
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, w_avg, latents })
    }
}

/// Per-step seed for stratified sampling.
fn step_seed(base: u64, stage: u64, step: usize) -> u64 {
    splitmix(base ^ splitmix((stage << 40) ^ step as u64))
}

/// Auto-decoder training: one free latent per scene and a shared generator,
/// fitted to every view with l2 plus msgp.
pub fn pretrain_prior(records: &[SceneRecord], cfg: &PretrainConfig) -> Result<(Prior, Vec<f64>)> {
    if records.is_empty() || records.iter().any(|r| r.views.is_empty()) {
        return Err(Error::InvalidArgument("pretraining needs scenes with views".into()));
    }
    let k = Intrinsics::for_resolution(cfg.resolution);
    let targets: Vec<SceneRecord> = records
        .iter()
        .map(|r| r.resized(cfg.resolution))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = PriorDecoder::random(&cfg.shape, rng.random())?;
    let mut latents: Vec<LatentCode> = (0..records.len())
        .map(|_| LatentCode::random(&cfg.shape, cfg.latent_init_std, &mut rng))
        .collect();
    let mut theta = ParamSet::new();
    model.to_params(&mut theta)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &theta);
    let mut lat_params: Vec<ParamSet> = latents
        .iter()
        .map(|w| {
            let mut p = ParamSet::new();
            w.to_params(&mut p)?;
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let lat_cfg = AdamConfig {
        weight_decay: cfg.latent_weight_decay,
        ..AdamConfig::with_lr(cfg.latent_lr)
    };
    let mut lat_adams: Vec<Adam> = lat_params.iter().map(|p| Adam::new(lat_cfg, p)).collect();
    let mut curve = Vec::with_capacity(cfg.steps);
    let base = RenderSettings {
        samples: cfg.samples,
        ..RenderSettings::default()
    };
    for step in 0..cfg.steps {
        let si = step % records.len();
        let field = model.modulate(&latents[si])?;
        let mut acc = field.grad_accumulator();
        let mut loss = 0.0;
        let views = &targets[si].views;
        let picks = sample(&mut rng, views.len(), cfg.views_per_step.min(views.len()));
        let s = base.with_seed(step_seed(cfg.seed, 0, step));
        for vi in picks.iter() {
            let view = &views[vi];
            let out = field.render(&view.pose, &k, None, &s);
            let a = l2(&out.rgb, &view.rgb, None, true)?;
            let b = msgp(&out.rgb, &view.rgb, None, true)?;
            let sil = l2(&out.opacity, &view.mask.to_image(), None, true)?;
            let dep = l2(&out.depth, &view.depth, Some(&view.mask), true)?;
            loss += a.value + b.value + cfg.silhouette_weight * sil.value + cfg.depth_weight * dep.value;
            let mut g = a.grad.expect("gradient");
            g.data.iter_mut().zip(&b.grad.expect("gradient").data).for_each(|(x, y)| *x += y);
            let scaled = |t: crate::losses::Term, w: f64| t.grad.map(|g| g.map(|v| v * w));
            let rg = RenderGrad {
                rgb: Some(g),
                depth: scaled(dep, cfg.depth_weight),
                opacity: scaled(sil, cfg.silhouette_weight),
            };
            field.backward(&view.pose, &k, None, &s, &rg, &mut acc);
        }
        let loss = loss / picks.len() as f64;
        ensure_finite("pretrain", loss).inspect_err(|_| {
            log::error!("pretraining diverged at step {step} on scene {si}");
        })?;
        curve.push(loss);
        let mg = field.finish(&acc, &latents[si]);
        let mut gt = ParamSet::new();
        mg.theta.to_params(&mut gt)?;
        let mut gl = ParamSet::new();
        mg.latent.to_params(&mut gl)?;
        adam.step(&mut theta, &gt)?;
        lat_adams[si].step(&mut lat_params[si], &gl)?;
        model.load_params(&theta)?;
        latents[si].load_params(&lat_params[si])?;
        if step % 200 == 0 {
            log::info!("pretrain step {step}: loss {loss:.5}");
        }
    }
    model.snap_to_f32();
    latents.iter_mut().for_each(LatentCode::snap_to_f32);
    let mut w_avg = LatentCode::mean(&latents).expect("nonempty");
    w_avg.snap_to_f32();
    Ok((Prior { model, w_avg, latents }, curve))
}

/// The image being inverted and what is known about it.
#[derive(Clone, Debug)]
pub struct InversionInput {
    pub image: Image,
    pub pose: Pose,
    pub roi: Option<RoiBoxes>,
}

impl InversionInput {
    /// Takes view `v` of a dataset scene, resized to the config resolution.
    pub fn from_record(r: &SceneRecord, v: usize, resolution: usize) -> Result<Self> {
        let view = r
            .views
            .get(v)
            .ok_or_else(|| Error::InvalidArgument(format!("scene has no view {v}")))?;
        Ok(Self {
            image: view.rgb.box_resized(resolution)?,
            pose: view.pose,
            roi: Some(view.roi.scaled(resolution as f64 / view.rgb.width as f64)),
        })
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub stage: u8,
    pub step: usize,
    pub source: f64,
    pub mirror: f64,
    pub noise: f64,
    pub ori: f64,
    pub adj: f64,
    pub sym: f64,
    pub depth: f64,
    pub total: f64,
    /// Set on rows that evaluate the full pseudo banks.
    pub full_bank: bool,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("stage,step,source,mirror,noise,ori,adj,sym,depth,total,full_bank\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.stage, r.step, r.source, r.mirror, r.noise, r.ori, r.adj, r.sym, r.depth, r.total, r.full_bank as u8
        );
    }
    s
}

/// Latent-stage output.
#[derive(Clone, Debug)]
pub struct Stage1Result {
    pub latent: LatentCode,
    pub noise: NoiseMap,
    pub lambda_m: f64,
    pub curve: Vec<LossRow>,
}

fn theta_fingerprint(m: &PriorDecoder) -> Result<u64> {
    let mut p = ParamSet::new();
    m.to_params(&mut p)?;
    Ok(p.fingerprint())
}

/// Adam on the latent and noise map with the generator frozen.
pub fn invert_stage1(prior: &Prior, input: &InversionInput, cfg: &InversionConfig) -> Result<Stage1Result> {
    cfg.validate()?;
    let k = cfg.intrinsics();
    check_input(input, &k)?;
    let theta_before = theta_fingerprint(&prior.model)?;
    let yaw = yaw_of(&input.pose)?;
    let lambda_m = if cfg.flags.no_symmetry {
        0.0
    } else {
        mirror_weight(yaw, &cfg.mirror)
    };
    let mirror = mirror_image(&input.image);
    let mut w = prior.w_avg.clone();
    let mut n = NoiseMap::zeros(k.width, k.height);
    let mut params = ParamSet::new();
    w.to_params(&mut params)?;
    n.to_params(&mut params)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.stage1_lr), &params);
    let mut curve = Vec::with_capacity(cfg.stage1_steps);
    for step in 0..cfg.stage1_steps {
        let problem = Stage1Problem {
            source: &input.image,
            mirror: &mirror,
            pose_s: input.pose,
            pose_m: mirror_pose(&input.pose),
            k,
            settings: cfg.render_settings().with_seed(step_seed(cfg.seed, 1, step)),
            lambda_m,
            lambda_n: cfg.lambda_n,
        };
        let (terms, g) = stage1_loss(&prior.model, &w, &n, &problem, true)?;
        ensure_finite("stage1.total", terms.total)?;
        curve.push(LossRow {
            stage: 1,
            step,
            source: terms.source,
            mirror: terms.mirror,
            noise: terms.noise,
            total: terms.total,
            ..Default::default()
        });
        let g = g.expect("gradient");
        let mut gp = ParamSet::new();
        g.latent.to_params(&mut gp)?;
        let gn = g.noise.expect("noise gradient");
        gp.insert(crate::grad::NOISE_NAME, Tensor::new(vec![gn.height, gn.width], gn.data))?;
        adam.step(&mut params, &gp)?;
        w.load_params(&params)?;
        n.load_params(&params)?;
    }
    w.snap_to_f32();
    n.map.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    if theta_fingerprint(&prior.model)? != theta_before {
        return Err(Error::InvalidArgument("generator changed during the latent stage".into()));
    }
    Ok(Stage1Result {
        latent: w,
        noise: n,
        lambda_m,
        curve,
    })
}

fn check_input(input: &InversionInput, k: &Intrinsics) -> Result<()> {
    if input.image.width != k.width || input.image.height != k.height || input.image.channels != 3 {
        return Err(Error::ShapeMismatch(format!(
            "input is {}x{}x{}, config expects {}x{}x3",
            input.image.width, input.image.height, input.image.channels, k.width, k.height
        )));
    }
    Ok(())
}

/// Everything an inversion produces.
#[derive(Clone, Debug)]
pub struct InversionResult {
    pub latent: LatentCode,
    pub model: PriorDecoder,
    pub noise: NoiseMap,
    pub lambda_m: f64,
    /// Depth-regularisation poses and the rough-model anchors captured on them.
    pub poses: Vec<Pose>,
    pub anchors: Vec<DepthAnchor>,
    pub bank_sizes: (usize, usize),
    pub curve: Vec<LossRow>,
    pub wall_clock_s: f64,
}

impl InversionResult {
    pub fn to_params(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        self.model.to_params(&mut p)?;
        self.latent.to_params(&mut p)?;
        self.noise.to_params(&mut p)?;
        Ok(p)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "inversion",
            "shape": self.model.shape(),
            "resolution": self.noise.map.width,
            "lambda_m": self.lambda_m,
        });
        checkpoint::save(path, &self.to_params()?, &meta)
    }

    /// Loads generator, latent and noise from an inversion checkpoint.
    pub fn load_checkpoint(path: &Path) -> Result<(PriorDecoder, LatentCode, NoiseMap)> {
        let (p, meta) = checkpoint::load(path)?;
        let shape: FieldShape = serde_json::from_value(meta["shape"].clone())
            .map_err(|e| Error::format(path, format!("shape: {e}")))?;
        let res = meta["resolution"]
            .as_u64()
            .ok_or_else(|| Error::format(path, "missing resolution"))? as usize;
        let mut model = PriorDecoder::zeros(&shape)?;
        model.load_params(&p)?;
        let mut w = LatentCode::zeros(&shape);
        w.load_params(&p)?;
        let mut n = NoiseMap::zeros(res, res);
        n.load_params(&p)?;
        Ok((model, w, n))
    }
}

pub const TURNTABLE_YAWS_DEG: [f64; 9] = [-60.0, -45.0, -30.0, -15.0, 0.0, 15.0, 30.0, 45.0, 60.0];

/// Writes the checkpoint, loss log, config, a summary, and turntable colour
/// PNGs with depth PFMs into `dir`.
pub fn write_outputs(dir: &Path, r: &InversionResult, cfg: &InversionConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    r.save_checkpoint(&dir.join(crate::eval::CHECKPOINT_FILE))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("losses.csv", loss_csv(&r.curve))?;
    write("config.json", serde_json::to_string_pretty(cfg)?)?;
    let summary = serde_json::json!({
        "lambda_m": r.lambda_m,
        "source_bank": r.bank_sizes.0,
        "mirror_bank": r.bank_sizes.1,
        "wall_clock_s": r.wall_clock_s,
        "flags": cfg.flags,
    });
    write("summary.json", serde_json::to_string_pretty(&summary)?)?;
    let k = cfg.intrinsics();
    let s = cfg.render_settings().with_seed(cfg.seed);
    let field = r.model.modulate(&r.latent)?;
    for yaw in TURNTABLE_YAWS_DEG {
        let out = field.render(&look_at_pose(yaw.to_radians(), 0.0, RIG_RADIUS)?, &k, None, &s);
        let tag = format!("{:+03}", yaw as i64);
        crate::io::write_png(&dir.join(format!("turntable_{tag}.png")), &out.rgb)?;
        crate::io::write_pfm(&dir.join(format!("depth_{tag}.pfm")), &out.depth)?;
    }
    Ok(())
}

/// True when the `window`-step moving average never rises between
/// consecutive non-overlapping windows.
pub fn windowed_nonincreasing(values: &[f64], window: usize) -> bool {
    let means: Vec<f64> = values
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect();
    means.windows(2).all(|p| p[1] <= p[0])
}

/// Rough depths on the pose set and pseudo banks, both from the un-tuned
/// generator.
pub fn stage2_inputs(
    prior: &Prior,
    stage1: &Stage1Result,
    input: &InversionInput,
    cfg: &InversionConfig,
) -> Result<(Vec<Pose>, Vec<DepthAnchor>, PseudoBank)> {
    let k = cfg.intrinsics();
    let settings = cfg.render_settings().with_seed(cfg.seed);
    let poses = cfg.poses()?;
    let field = prior.model.modulate(&stage1.latent)?;
    let anchors = poses
        .iter()
        .map(|p| {
            let o = field.render(p, &k, None, &settings);
            DepthAnchor::new(o.depth, &o.opacity)
        })
        .collect();
    let w = cfg.effective_weights();
    let bank = if w.adj > 0.0 || w.sym > 0.0 {
        let bank_cfg = BankConfig {
            size: cfg.bank_size,
            tau: cfg.tau,
            sigma_max: cfg.sigma_max,
            seed: cfg.seed,
        };
        let mut b = build_pseudo_bank(
            &input.image,
            &input.pose,
            input.roi.as_ref(),
            stage1.lambda_m,
            &prior.model,
            &stage1.latent,
            &k,
            &settings,
            &bank_cfg,
            &cfg.mirror,
        )?;
        if w.adj == 0.0 {
            b.source.clear();
        }
        if w.sym == 0.0 {
            b.mirror.clear();
        }
        b
    } else {
        PseudoBank::default()
    };
    Ok((poses, anchors, bank))
}

/// Adam on the generator with the latent fixed.
pub fn tune_stage2(
    prior: &Prior,
    stage1: &Stage1Result,
    input: &InversionInput,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    cfg.validate()?;
    let start = Instant::now();
    let k = cfg.intrinsics();
    check_input(input, &k)?;
    let frozen = {
        let mut p = ParamSet::new();
        stage1.latent.to_params(&mut p)?;
        stage1.noise.to_params(&mut p)?;
        p.fingerprint()
    };
    let (poses, anchors, bank) = stage2_inputs(prior, stage1, input, cfg)?;
    let mut model = prior.model.clone();
    let mut curve = stage1.curve.clone();
    if !cfg.flags.no_stage2 {
        let weights = cfg.effective_weights();
        let mut theta = ParamSet::new();
        model.to_params(&mut theta)?;
        let mut adam = Adam::new(AdamConfig::with_lr(cfg.stage2_lr), &theta);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57A6_E002);
        let depth_batch = if cfg.depth_batch == 0 { poses.len() } else { cfg.depth_batch.min(poses.len()) };
        let depth_scale = poses.len() as f64 / depth_batch.max(1) as f64;
        for step in 0..cfg.stage2_steps {
            let pick = |rng: &mut ChaCha8Rng, n: usize, m: usize| -> Vec<usize> {
                let mut v = sample(rng, n, m.min(n)).into_vec();
                v.sort_unstable();
                v
            };
            let src_idx = pick(&mut rng, bank.source.len(), cfg.source_batch);
            let mir_idx = pick(&mut rng, bank.mirror.len(), cfg.mirror_batch);
            let dep_idx = if weights.depth > 0.0 {
                pick(&mut rng, poses.len(), depth_batch)
            } else {
                Vec::new()
            };
            let dposes: Vec<Pose> = dep_idx.iter().map(|&i| poses[i]).collect();
            let danchors: Vec<DepthAnchor> = dep_idx.iter().map(|&i| anchors[i].clone()).collect();
            let mut problem = Stage2Problem::new(
                &input.image,
                input.pose,
                k,
                cfg.render_settings().with_seed(step_seed(cfg.seed, 2, step)),
            );
            problem.weights = Stage2Weights {
                depth: weights.depth * depth_scale,
                ..weights
            };
            problem.source_pseudos = src_idx.iter().map(|&i| &bank.source[i]).collect();
            problem.mirror_pseudos = mir_idx.iter().map(|&i| &bank.mirror[i]).collect();
            problem.depth_poses = &dposes;
            problem.anchors = &danchors;
            problem.roi_size = cfg.roi_size;
            let (terms, g) = stage2_loss(&model, &stage1.latent, &problem, true)?;
            ensure_finite("stage2.total", terms.total)?;
            curve.push(LossRow {
                stage: 2,
                step,
                ori: terms.ori,
                adj: terms.adj,
                sym: terms.sym,
                depth: terms.depth * depth_scale,
                total: terms.total,
                ..Default::default()
            });
            if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
                let mut full = problem.clone();
                full.source_pseudos = bank.source.iter().collect();
                full.mirror_pseudos = bank.mirror.iter().collect();
                full.depth_poses = &poses;
                full.anchors = &anchors;
                full.weights = weights;
                let (t, _) = stage2_loss(&model, &stage1.latent, &full, false)?;
                log::info!("stage2 step {}: full-bank loss {:.5}", step + 1, t.total);
                curve.push(LossRow {
                    stage: 2,
                    step,
                    ori: t.ori,
                    adj: t.adj,
                    sym: t.sym,
                    depth: t.depth,
                    total: t.total,
                    full_bank: true,
                    ..Default::default()
                });
            }
            let mut gp = ParamSet::new();
            g.expect("gradient").theta.to_params(&mut gp)?;
            adam.step(&mut theta, &gp)?;
            model.load_params(&theta)?;
        }
        model.snap_to_f32();
        let totals: Vec<f64> = curve
            .iter()
            .filter(|r| r.stage == 2 && !r.full_bank)
            .map(|r| r.total)
            .collect();
        if !windowed_nonincreasing(&totals, 100) {
            log::warn!("stage-2 loss rose between 100-step windows");
        }
    }
    let after = {
        let mut p = ParamSet::new();
        stage1.latent.to_params(&mut p)?;
        stage1.noise.to_params(&mut p)?;
        p.fingerprint()
    };
    if after != frozen {
        return Err(Error::InvalidArgument("latent or noise changed during generator tuning".into()));
    }
    Ok(InversionResult {
        latent: stage1.latent.clone(),
        model,
        noise: stage1.noise.clone(),
        lambda_m: stage1.lambda_m,
        poses,
        anchors,
        bank_sizes: (bank.source.len(), bank.mirror.len()),
        curve,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Mirror, latent stage, rough-depth snapshot, pseudo banks, generator
/// tuning.
pub fn spi_invert(prior: &Prior, input: &InversionInput, cfg: &InversionConfig) -> Result<InversionResult> {
    let start = Instant::now();
    let s1 = invert_stage1(prior, input, cfg)?;
    let mut r = tune_stage2(prior, &s1, input, cfg)?;
    r.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(r)
}

/// Rows of the ablation table in chain order, then the pivotal-tuning
/// baseline.
pub fn ablation_chain() -> Vec<(&'static str, AblationFlags)> {
    let f = AblationFlags::default();
    vec![
        ("stage1", AblationFlags { no_symmetry: true, no_stage2: true, ..f }),
        ("symmetry", AblationFlags { no_stage2: true, ..f }),
        ("joint", AblationFlags { no_warp: true, no_depth_reg: true, no_sym_loss: true, ..f }),
        ("depth_reg", AblationFlags { no_warp: true, no_sym_loss: true, ..f }),
        ("full", f),
        ("pti", AblationFlags::pivotal_tuning_baseline()),
    ]
}

/// One row of an ablation run.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub name: String,
    pub config: InversionConfig,
    pub result: InversionResult,
}

/// Runs every row of [`ablation_chain`], sharing the two latent-stage runs.
pub fn run_ablation(prior: &Prior, input: &InversionInput, cfg: &InversionConfig) -> Result<Vec<AblationRun>> {
    let with = |flags: AblationFlags| InversionConfig { flags, ..cfg.clone() };
    let plain = invert_stage1(prior, input, &with(AblationFlags { no_symmetry: true, ..Default::default() }))?;
    let sym = invert_stage1(prior, input, &with(AblationFlags::default()))?;
    ablation_chain()
        .into_iter()
        .map(|(name, flags)| {
            let s1 = if flags.no_symmetry { &plain } else { &sym };
            let config = with(flags);
            Ok(AblationRun {
                name: name.to_string(),
                result: tune_stage2(prior, s1, input, &config)?,
                config,
            })
        })
        .collect()
}

/// Mean absolute depth deviation from the anchors over the pose set, on
/// each anchor's foreground.
pub fn depth_drift(r: &InversionResult, cfg: &InversionConfig) -> Result<f64> {
    let k = cfg.intrinsics();
    let s = cfg.render_settings().with_seed(cfg.seed);
    let field = r.model.modulate(&r.latent)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, a) in r.poses.iter().zip(&r.anchors) {
        let d = field.render(p, &k, None, &s).depth;
        for i in 0..d.data.len() {
            if a.foreground.data[i] {
                sum += (d.data[i] - a.depth.data[i]).abs();
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
