//! Depth-guided backward warping, authentic masks and pseudo-view banks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{LatentCode, ModulatedField, PriorDecoder, RenderSettings};
use crate::geometry::{backproject, look_at_pose, mirror_pose, pitch_of, project, yaw_of, Intrinsics, MirrorWeightParams, Pose};
use crate::image::{Bilinear, Image, Mask};
use crate::losses::{RoiBox, RoiBoxes};

pub const DEFAULT_TAU: f64 = 0.02;
pub const DEFAULT_SIGMA_MAX: f64 = 0.35;
pub const DEFAULT_BANK_SIZE: usize = 16;
/// Opacity above which a rough-model pixel counts as foreground.
pub const FOREGROUND_OPACITY: f64 = 0.5;

/// Which image a pseudo view was warped from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    FromSource,
    FromMirror,
}

/// A warped image at a novel pose with the pixels allowed to supervise it.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoView {
    pub pose: Pose,
    pub image: Image,
    pub mask: Mask,
    pub provenance: Provenance,
    /// Component boxes carried over from the source view, when every
    /// component could be transferred.
    pub roi: Option<RoiBoxes>,
}

pub fn mirror_image(img: &Image) -> Image {
    img.flip_horizontal()
}

/// Bilinear samples at continuous pixel positions. Positions outside
/// `[0, W-1] x [0, H-1]` yield zeros and a `false` validity flag.
pub fn bilinear_sample(img: &Image, coords: &[(f64, f64)]) -> (Vec<f64>, Vec<bool>) {
    let ch = img.channels;
    let mut values = vec![0.0; coords.len() * ch];
    let mut valid = vec![false; coords.len()];
    for (i, &(x, y)) in coords.iter().enumerate() {
        if in_bounds(img.width, img.height, x, y) {
            Bilinear::clamped(img.width, img.height, x, y).sample(img, &mut values[i * ch..(i + 1) * ch]);
            valid[i] = true;
        }
    }
    (values, valid)
}

/// Adjoint of [`bilinear_sample`] with respect to the image.
pub fn bilinear_sample_backward(grad: &[f64], coords: &[(f64, f64)], into: &mut Image) {
    let ch = into.channels;
    for (i, &(x, y)) in coords.iter().enumerate() {
        if in_bounds(into.width, into.height, x, y) {
            Bilinear::clamped(into.width, into.height, x, y).splat(&grad[i * ch..(i + 1) * ch], into);
        }
    }
}

/// Rounds reprojection round-off onto the pixel lattice, so that border
/// pixels stay in bounds and identity warps sample exact pixel values.
#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

#[inline]
fn in_bounds(w: usize, h: usize, x: f64, y: f64) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

/// Per-target-pixel correspondence into the source view.
#[derive(Clone, Debug)]
pub struct WarpField {
    pub width: usize,
    pub height: usize,
    /// Source pixel and source-frame depth, or `None` when behind the camera.
    pub samples: Vec<Option<((f64, f64), f64)>>,
}

impl WarpField {
    /// Backprojects every target pixel with `depth_t` and projects it into
    /// the source camera.
    pub fn new(k: &Intrinsics, pose_s: &Pose, pose_t: &Pose, depth_t: &Image) -> Result<Self> {
        if depth_t.width != k.width || depth_t.height != k.height || depth_t.channels != 1 {
            return Err(Error::ShapeMismatch("target depth does not match intrinsics".into()));
        }
        let mut samples = Vec::with_capacity(k.num_pixels());
        for v in 0..k.height {
            for u in 0..k.width {
                let d = depth_t.get(u, v, 0);
                let s = backproject(k, pose_t, (u as f64, v as f64), d)
                    .and_then(|x| project(k, pose_s, &x))
                    .ok()
                    .map(|((x, y), z)| ((snap(x), snap(y)), z));
                samples.push(s);
            }
        }
        Ok(Self {
            width: k.width,
            height: k.height,
            samples,
        })
    }

    pub fn coords(&self) -> Vec<(f64, f64)> {
        self.samples
            .iter()
            .map(|s| s.map_or((f64::NAN, f64::NAN), |(p, _)| p))
            .collect()
    }

    /// Target pixels whose source position lies inside the source image.
    pub fn in_bounds(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self
                .samples
                .iter()
                .map(|s| s.is_some_and(|((x, y), _)| in_bounds(self.width, self.height, x, y)))
                .collect(),
        }
    }

    /// Resamples a source image onto the target grid.
    pub fn apply(&self, src: &Image) -> Result<(Image, Mask)> {
        if src.width != self.width || src.height != self.height {
            return Err(Error::ShapeMismatch("warp source does not match intrinsics".into()));
        }
        let (values, valid) = bilinear_sample(src, &self.coords());
        Ok((
            Image::from_vec(self.width, self.height, src.channels, values)?,
            Mask {
                width: self.width,
                height: self.height,
                data: valid,
            },
        ))
    }

    /// Pixels whose source-frame depth agrees with the sampled source depth.
    pub fn visibility(&self, depth_s: &Image, tau: f64) -> Mask {
        let coords = self.coords();
        let (ds, valid) = bilinear_sample(depth_s, &coords);
        let data = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| valid[i] && s.is_some_and(|(_, z)| (z - ds[i]).abs() < tau))
            .collect();
        Mask {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Nearest-neighbour warp of a source mask; out-of-bounds is `false`.
    pub fn warp_mask_nearest(&self, m: &Mask) -> Mask {
        let data = self
            .samples
            .iter()
            .map(|s| {
                s.is_some_and(|((x, y), _)| {
                    in_bounds(self.width, self.height, x, y) && m.get(x.round() as usize, y.round() as usize)
                })
            })
            .collect();
        Mask {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Backward warp of `src` (at `pose_s`) to `pose_t` using the target depth.
/// Returns the warped image and its in-bounds mask. `depth_s` is only
/// validated here; occlusion reasoning lives in [`visibility_mask`].
pub fn warp_image(
    src: &Image,
    depth_s: &Image,
    pose_s: &Pose,
    pose_t: &Pose,
    depth_t: &Image,
    k: &Intrinsics,
) -> Result<(Image, Mask)> {
    check_depth(depth_s, k, "source depth")?;
    check_depth(depth_t, k, "target depth")?;
    WarpField::new(k, pose_s, pose_t, depth_t)?.apply(src)
}

fn check_depth(d: &Image, k: &Intrinsics, what: &str) -> Result<()> {
    if d.width != k.width || d.height != k.height || d.channels != 1 {
        return Err(Error::ShapeMismatch(format!("{what} does not match intrinsics")));
    }
    if d.data.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument(format!("{what} must be positive")));
    }
    Ok(())
}

/// Target pixels that see the same surface the source camera sees.
pub fn visibility_mask(
    depth_s: &Image,
    depth_t: &Image,
    pose_s: &Pose,
    pose_t: &Pose,
    k: &Intrinsics,
    tau: f64,
) -> Result<Mask> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    check_depth(depth_s, k, "source depth")?;
    check_depth(depth_t, k, "target depth")?;
    Ok(WarpField::new(k, pose_s, pose_t, depth_t)?.visibility(depth_s, tau))
}

/// Visible, in-bounds pixels that originate from the source foreground.
pub fn authentic_mask(vis: &Mask, fg_s: &Mask, warp: &WarpField) -> Mask {
    vis.and(&warp.warp_mask_nearest(fg_s)).and(&warp.in_bounds())
}

/// Poses scattered around `base`; the yaw spread narrows as the source yaw
/// moves away from frontal.
pub fn sample_adjacent_poses(
    base: &Pose,
    yaw_src: f64,
    count: usize,
    seed: u64,
    sigma_max: f64,
    params: &MirrorWeightParams,
) -> Result<Vec<Pose>> {
    let spread = sigma_max * params.envelope(yaw_src);
    let yaw_dist = Normal::new(0.0, spread).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let pitch_dist = Normal::new(0.0, spread / 3.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (yaw0, pitch0) = (yaw_of(base)?, pitch_of(base));
    let radius = base.position().norm();
    (0..count)
        .map(|_| {
            let dy = yaw_dist.sample(&mut rng).clamp(-sigma_max, sigma_max);
            let dp = pitch_dist.sample(&mut rng).clamp(-sigma_max, sigma_max);
            look_at_pose(yaw0 + dy, pitch0 + dp, radius)
        })
        .collect()
}

/// Transfers component boxes from the source view to a target view through
/// the source depth, using only source-foreground pixels inside each box.
pub fn transfer_roi(
    boxes: &RoiBoxes,
    depth_s: &Image,
    fg_s: &Mask,
    pose_s: &Pose,
    pose_t: &Pose,
    k: &Intrinsics,
) -> Option<RoiBoxes> {
    let one = |b: RoiBox| -> Option<RoiBox> {
        let pts: Vec<(f64, f64)> = b
            .pixels(k.width, k.height)
            .filter(|&(x, y)| fg_s.get(x, y))
            .filter_map(|(x, y)| {
                let d = depth_s.get(x, y, 0);
                let p = backproject(k, pose_s, (x as f64, y as f64), d).ok()?;
                project(k, pose_t, &p).ok().map(|(uv, _)| uv)
            })
            .collect();
        RoiBox::bounding(&pts, k.width, k.height)
    };
    Some(RoiBoxes {
        eyes: one(boxes.eyes)?,
        nose: one(boxes.nose)?,
        mouth: one(boxes.mouth)?,
    })
}

/// Parameters of pseudo-bank construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub size: usize,
    pub tau: f64,
    pub sigma_max: f64,
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            size: DEFAULT_BANK_SIZE,
            tau: DEFAULT_TAU,
            sigma_max: DEFAULT_SIGMA_MAX,
            seed: 0,
        }
    }
}

/// Source- and mirror-side pseudo views.
#[derive(Clone, Debug, Default)]
pub struct PseudoBank {
    pub source: Vec<PseudoView>,
    pub mirror: Vec<PseudoView>,
}

impl PseudoBank {
    pub fn len(&self) -> usize {
        self.source.len() + self.mirror.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[allow(clippy::too_many_arguments)]
fn pseudo_side(
    field: &ModulatedField<'_>,
    image: &Image,
    pose: &Pose,
    roi: Option<&RoiBoxes>,
    k: &Intrinsics,
    settings: &RenderSettings,
    cfg: &BankConfig,
    params: &MirrorWeightParams,
    seed: u64,
    provenance: Provenance,
) -> Result<Vec<PseudoView>> {
    let rough = field.render(pose, k, None, settings);
    let fg = Mask::threshold(&rough.opacity, FOREGROUND_OPACITY);
    let yaw = yaw_of(pose)?;
    let targets = sample_adjacent_poses(pose, yaw, cfg.size, seed, cfg.sigma_max, params)?;
    targets
        .into_iter()
        .map(|t| {
            let depth_t = field.render(&t, k, None, settings).depth;
            let warp = WarpField::new(k, pose, &t, &depth_t)?;
            let (warped, _) = warp.apply(image)?;
            let vis = warp.visibility(&rough.depth, cfg.tau);
            let mask = authentic_mask(&vis, &fg, &warp);
            let roi = roi.and_then(|b| transfer_roi(b, &rough.depth, &fg, pose, &t, k));
            Ok(PseudoView {
                pose: t,
                image: warped.masked(&mask),
                mask,
                provenance,
                roi,
            })
        })
        .collect()
}

/// Warps the input and its mirror to poses around the source and mirror
/// cameras using depths rendered from the rough model. The mirror side is
/// built only when `lambda_m > 0`.
#[allow(clippy::too_many_arguments)]
pub fn build_pseudo_bank(
    source: &Image,
    pose_s: &Pose,
    roi_s: Option<&RoiBoxes>,
    lambda_m: f64,
    model: &PriorDecoder,
    w: &LatentCode,
    k: &Intrinsics,
    settings: &RenderSettings,
    cfg: &BankConfig,
    params: &MirrorWeightParams,
) -> Result<PseudoBank> {
    let field = model.modulate(w)?;
    let src = pseudo_side(
        &field,
        source,
        pose_s,
        roi_s,
        k,
        settings,
        cfg,
        params,
        cfg.seed,
        Provenance::FromSource,
    )?;
    let mirror = if lambda_m > 0.0 {
        let roi_m = roi_s.map(|b| b.flip_horizontal(k.width));
        pseudo_side(
            &field,
            &mirror_image(source),
            &mirror_pose(pose_s),
            roi_m.as_ref(),
            k,
            settings,
            cfg,
            params,
            cfg.seed ^ 0x5EED_0F4D_1A77,
            Provenance::FromMirror,
        )?
    } else {
        Vec::new()
    };
    Ok(PseudoBank { source: src, mirror })
}
