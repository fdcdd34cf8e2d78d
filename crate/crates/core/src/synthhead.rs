//! Procedural synthetic heads with controllable asymmetry, their
//! ground-truth renders, and the on-disk dataset format.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{sample_depth, RenderSettings, BACKGROUND};
use crate::geometry::{look_at_pose, project, Intrinsics, Point3, Pose, RIG_RADIUS};
use crate::image::{Image, Mask};
use crate::io::{read_mask_png, read_pfm, read_png_rgb, write_mask_png, write_pfm, write_png};
use crate::losses::{RoiBox, RoiBoxes};

/// Ray-marching samples of the ground-truth renderer per model sample.
pub const GT_SAMPLE_FACTOR: usize = 4;
/// Edge steepness of the primitive occupancies.
const SHARPNESS: f64 = 12.0;
const HAIR_SHARPNESS: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub exponent: f64,
}

impl Head {
    /// Front surface depth (largest z) above `(x, y)`, or the centre plane
    /// outside the silhouette.
    pub fn surface_z(&self, x: f64, y: f64) -> f64 {
        let e = self.exponent;
        let r = 1.0
            - ((x - self.center[0]) / self.radii[0]).abs().powf(e)
            - ((y - self.center[1]) / self.radii[1]).abs().powf(e);
        self.center[2] + self.radii[2] * r.max(0.0).powf(1.0 / e)
    }
}

/// The `+x` eye; its partner sits at the mirrored anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eyes {
    pub anchor: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nose {
    pub anchor: [f64; 3],
    pub radii: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mouth {
    pub anchor: [f64; 3],
    pub half_size: [f64; 3],
}

/// One low-frequency colour wave, evaluated with `|x|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blotch {
    pub frequency: [f64; 3],
    pub phase: f64,
    pub amplitude: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub eye: [f64; 3],
    pub nose: [f64; 3],
    pub mouth: [f64; 3],
    pub hair_line: f64,
    pub blotch_seed: u64,
    pub blotches: Vec<Blotch>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mole {
    /// `+1` or `-1`: which side of the symmetry plane.
    pub side: f64,
    pub position: [f64; 3],
    pub radius: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Asymmetry {
    pub level: f64,
    pub mole: Option<Mole>,
    /// Tilt of the hair line across the face, radians.
    pub hair_tilt: f64,
    /// Relative brightness difference between the `+x` and `-x` halves.
    pub lr_delta: f64,
}

/// An axis-aligned box that can hide part of the head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub center: [f64; 3],
    pub half_size: [f64; 3],
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Peak density inside primitives; 0 gives an empty scene.
    pub density: f64,
    pub head: Head,
    pub eyes: Eyes,
    pub nose: Nose,
    pub mouth: Mouth,
    pub texture: Texture,
    pub asymmetry: Asymmetry,
    pub occluder: Option<Occluder>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn v3(a: [f64; 3]) -> Point3 {
    Vector3::new(a[0], a[1], a[2])
}

impl SceneSpec {
    /// A scene with no density.
    pub fn empty() -> Self {
        let mut s = generate_scene(0, 0.0).expect("valid level");
        s.density = 0.0;
        s
    }

    pub fn is_symmetric(&self) -> bool {
        self.asymmetry.mole.is_none()
            && self.asymmetry.hair_tilt == 0.0
            && self.asymmetry.lr_delta == 0.0
            && self.occluder.is_none()
    }

    /// Occupancies of the head, eyes, nose and occluder at `p`.
    fn occupancies(&self, p: &Point3) -> [f64; 4] {
        let ax = p.x.abs();
        let h = &self.head;
        let f = ((((p.x - h.center[0]) / h.radii[0]).abs()).powf(h.exponent)
            + (((p.y - h.center[1]) / h.radii[1]).abs()).powf(h.exponent)
            + (((p.z - h.center[2]) / h.radii[2]).abs()).powf(h.exponent))
        .powf(1.0 / h.exponent);
        let head = sigmoid(SHARPNESS * (1.0 - f));
        let e = &self.eyes;
        let de = Vector3::new(ax - e.anchor[0], p.y - e.anchor[1], p.z - e.anchor[2]).norm() / e.radius;
        let eye = sigmoid(SHARPNESS * (1.0 - de));
        let n = &self.nose;
        let dn = Vector3::new(
            (p.x - n.anchor[0]) / n.radii[0],
            (p.y - n.anchor[1]) / n.radii[1],
            (p.z - n.anchor[2]) / n.radii[2],
        )
        .norm();
        let nose = sigmoid(SHARPNESS * (1.0 - dn));
        let occ = self.occluder.map_or(0.0, |o| {
            let d = (0..3)
                .map(|a| ((p[a] - o.center[a]) / o.half_size[a]).abs())
                .fold(0.0, f64::max);
            sigmoid(2.0 * SHARPNESS * (1.0 - d))
        });
        [head, eye, nose, occ]
    }

    pub fn density_at(&self, p: &Point3) -> f64 {
        let o = self.occupancies(p);
        self.density * o.iter().cloned().fold(0.0, f64::max)
    }

    pub fn color_at(&self, p: &Point3) -> [f64; 3] {
        let [head, eye, nose, occ] = self.occupancies(p);
        let t = &self.texture;
        let ax = p.x.abs();
        let mut c = t.skin;
        for b in &t.blotches {
            let s = (b.frequency[0] * ax + b.frequency[1] * p.y + b.frequency[2] * p.z + b.phase).sin();
            for (ch, v) in c.iter_mut().enumerate() {
                *v += b.amplitude[ch] * s;
            }
        }
        let a = &self.asymmetry;
        // The hair line drops toward the back of the head and tilts with x.
        let hair_w =
            sigmoid(HAIR_SHARPNESS * (p.y - a.hair_tilt.tan() * p.x + 0.6 * (-p.z).max(0.0) - t.hair_line));
        c = lerp(c, t.hair, hair_w);
        c = lerp(c, t.nose, nose);
        let m = &self.mouth;
        let fm = ((((p.x - m.anchor[0]) / m.half_size[0]).abs()).powi(4)
            + (((p.y - m.anchor[1]) / m.half_size[1]).abs()).powi(4)
            + (((p.z - m.anchor[2]) / m.half_size[2]).abs()).powi(4))
        .powf(0.25);
        c = lerp(c, t.mouth, sigmoid(SHARPNESS * (1.0 - fm)));
        c = lerp(c, t.eye, eye);
        if let Some(mole) = a.mole {
            let d = (p - v3(mole.position)).norm() / mole.radius;
            c = lerp(c, mole.color, sigmoid(SHARPNESS * (1.0 - d)));
        }
        let shade = 1.0 + a.lr_delta * (p.x / 0.15).tanh();
        for v in &mut c {
            *v *= shade;
        }
        if let Some(o) = self.occluder {
            let share = occ / (occ + head + eye + nose).max(1e-12);
            c = lerp(c, o.color, share);
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }

    /// 3D anchors and half-extents of each component.
    fn component_extents(&self) -> [(Vec<Point3>, [f64; 3]); 3] {
        let e = &self.eyes;
        let r = e.radius;
        let eyes = vec![v3(e.anchor), v3([-e.anchor[0], e.anchor[1], e.anchor[2]])];
        [
            (eyes, [r, r, r]),
            (vec![v3(self.nose.anchor)], self.nose.radii),
            (vec![v3(self.mouth.anchor)], self.mouth.half_size),
        ]
    }

    /// Boxes spanning the projected component anchors plus their extents.
    pub fn roi_boxes(&self, pose: &Pose, k: &Intrinsics) -> Result<RoiBoxes> {
        let mut out = Vec::with_capacity(3);
        for (anchors, ext) in self.component_extents() {
            let mut pts = Vec::new();
            for a in anchors {
                for corner in 0..8 {
                    let sgn = |bit: usize| if corner >> bit & 1 == 1 { 1.0 } else { -1.0 };
                    let q = a + Vector3::new(sgn(0) * ext[0], sgn(1) * ext[1], sgn(2) * ext[2]);
                    pts.push(project(k, pose, &q)?.0);
                }
            }
            let b = RoiBox::bounding(&pts, k.width, k.height)
                .ok_or_else(|| Error::InvalidArgument("component projects outside the image".into()))?;
            out.push(b);
        }
        Ok(RoiBoxes {
            eyes: out[0],
            nose: out[1],
            mouth: out[2],
        })
    }
}

/// Deterministic random head. `level` in `[0, 1]` scales every asymmetry
/// magnitude linearly; level 0 is exactly mirror-symmetric about `x = 0`.
pub fn generate_scene(seed: u64, level: f64) -> Result<SceneSpec> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::InvalidArgument(format!("asymmetry level must lie in [0,1], got {level}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let head = Head {
        center: [0.0, u(-0.05, 0.05), u(-0.05, 0.05)],
        radii: [u(0.52, 0.62), u(0.66, 0.76), u(0.56, 0.66)],
        exponent: u(2.0, 2.8),
    };
    let (ex, ey, er) = (u(0.18, 0.26), head.center[1] + u(0.08, 0.18), u(0.08, 0.11));
    let eyes = Eyes {
        anchor: [ex, ey, head.surface_z(ex, ey) - 0.35 * er],
        radius: er,
    };
    let (ny, nr) = (head.center[1] + u(-0.1, 0.0), [u(0.06, 0.09), u(0.12, 0.18), u(0.1, 0.14)]);
    let nose = Nose {
        anchor: [0.0, ny, head.surface_z(0.0, ny) - 0.3 * nr[2]],
        radii: nr,
    };
    let my = head.center[1] - u(0.3, 0.4);
    let mouth = Mouth {
        anchor: [0.0, my, head.surface_z(0.0, my)],
        half_size: [u(0.14, 0.22), u(0.04, 0.07), 0.1],
    };
    let skin = [u(0.7, 0.92), u(0.5, 0.7), u(0.4, 0.58)];
    let hair = [u(0.08, 0.35), u(0.05, 0.22), u(0.03, 0.12)];
    let blotch_seed = seed.wrapping_mul(0x9E37_79B9).wrapping_add(17);
    let texture = Texture {
        skin,
        hair,
        eye: [u(0.05, 0.2), u(0.05, 0.2), u(0.1, 0.35)],
        nose: [skin[0] * 0.95, skin[1] * 0.8, skin[2] * 0.8],
        mouth: [u(0.55, 0.8), u(0.15, 0.3), u(0.15, 0.3)],
        hair_line: head.center[1] + u(0.35, 0.48),
        blotch_seed,
        blotches: Vec::new(),
    };
    let mut texture = texture;
    let mut brng = ChaCha8Rng::seed_from_u64(blotch_seed);
    texture.blotches = (0..3)
        .map(|_| Blotch {
            frequency: [brng.random_range(1.0..4.0), brng.random_range(1.0..4.0), brng.random_range(1.0..4.0)],
            phase: brng.random_range(0.0..std::f64::consts::TAU),
            amplitude: [brng.random_range(0.0..0.05), brng.random_range(0.0..0.05), brng.random_range(0.0..0.05)],
        })
        .collect();
    let mut arng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
    let side = if arng.random::<bool>() { 1.0 } else { -1.0 };
    let mole_y = head.center[1] + arng.random_range(-0.25..0.0);
    let asymmetry = Asymmetry {
        level,
        mole: (level > 0.0).then(|| Mole {
            side,
            position: [side * 0.3, mole_y, head.surface_z(0.3, mole_y)],
            radius: 0.2 * level,
            color: [0.22, 0.14, 0.1],
        }),
        hair_tilt: 0.5 * level * if arng.random::<bool>() { 1.0 } else { -1.0 },
        lr_delta: 0.25 * level * if arng.random::<bool>() { 1.0 } else { -1.0 },
    };
    Ok(SceneSpec {
        seed,
        density: 40.0,
        head,
        eyes,
        nose,
        mouth,
        texture,
        asymmetry,
        occluder: None,
    })
}

/// Ground-truth colour, expected depth and foreground mask of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct GtRender {
    pub rgb: Image,
    pub depth: Image,
    pub opacity: Image,
    pub mask: Mask,
}

/// Marches the analytic fields with the model renderer's compositing and
/// `GT_SAMPLE_FACTOR` times as many samples.
pub fn render_gt(spec: &SceneSpec, pose: &Pose, k: &Intrinsics, settings: &RenderSettings) -> Result<GtRender> {
    settings.validate()?;
    let s = RenderSettings {
        samples: settings.samples * GT_SAMPLE_FACTOR,
        ..*settings
    };
    let (w, h) = (k.width, k.height);
    let origin = pose.position();
    let rot = pose.rotation();
    let rows: Vec<Vec<(f64, [f64; 3], f64)>> = (0..h)
        .into_par_iter()
        .map(|py| {
            (0..w)
                .map(|px| {
                    let dir = rot * k.camera_ray(px as f64, py as f64);
                    let delta = (s.far - s.near) / s.samples as f64 * dir.norm();
                    let mut trans = 1.0;
                    let (mut rgb, mut depth, mut op) = ([0.0; 3], 0.0, 0.0);
                    for i in 0..s.samples {
                        let t = sample_depth(&s, px, py, w, i);
                        let x = origin + dir * t;
                        if x.iter().any(|v| v.abs() > 1.0) {
                            continue;
                        }
                        let sigma = spec.density_at(&x);
                        if sigma == 0.0 {
                            continue;
                        }
                        let alpha = 1.0 - (-sigma * delta).exp();
                        let wgt = trans * alpha;
                        let c = spec.color_at(&x);
                        for ch in 0..3 {
                            rgb[ch] += wgt * c[ch];
                        }
                        depth += wgt * t;
                        op += wgt;
                        trans *= 1.0 - alpha;
                        if trans < 1e-6 {
                            break;
                        }
                    }
                    for v in &mut rgb {
                        *v += trans * BACKGROUND;
                    }
                    depth += trans * s.far;
                    (op, rgb, depth)
                })
                .collect()
        })
        .collect();
    let mut out = GtRender {
        rgb: Image::new(w, h, 3),
        depth: Image::new(w, h, 1),
        opacity: Image::new(w, h, 1),
        mask: Mask::filled(w, h, false),
    };
    for (py, row) in rows.into_iter().enumerate() {
        for (px, (op, rgb, d)) in row.into_iter().enumerate() {
            for (c, v) in rgb.iter().enumerate() {
                out.rgb.set(px, py, c, *v);
            }
            out.depth.set(px, py, 0, d);
            out.opacity.set(px, py, 0, op);
        }
    }
    out.mask = Mask::threshold(&out.opacity, 0.5);
    Ok(out)
}

/// Transmittance from `from` (a camera centre) up to the point `to`.
pub fn transmittance(spec: &SceneSpec, from: &Point3, to: &Point3, steps: usize) -> f64 {
    let d = to - from;
    let len = d.norm();
    let dt = len / steps as f64;
    let mut tau = 0.0;
    for i in 0..steps {
        let x = from + d * ((i as f64 + 0.5) / steps as f64);
        if x.iter().all(|v| v.abs() <= 1.0) {
            tau += spec.density_at(&x) * dt;
        }
    }
    (-tau).exp()
}

/// One rendered view of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    pub pose: Pose,
    pub yaw: f64,
    pub pitch: f64,
    pub rgb: Image,
    pub depth: Image,
    pub mask: Mask,
    pub roi: RoiBoxes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub spec: SceneSpec,
    pub intrinsics: Intrinsics,
    pub views: Vec<ViewRecord>,
}

impl SceneRecord {
    /// Renders every `(yaw, pitch)` view on the default rig.
    pub fn render(spec: SceneSpec, views: &[(f64, f64)], k: &Intrinsics, settings: &RenderSettings) -> Result<Self> {
        let views = views
            .iter()
            .map(|&(yaw, pitch)| {
                let pose = look_at_pose(yaw, pitch, RIG_RADIUS)?;
                let gt = render_gt(&spec, &pose, k, settings)?;
                Ok(ViewRecord {
                    roi: spec.roi_boxes(&pose, k)?,
                    pose,
                    yaw,
                    pitch,
                    rgb: gt.rgb,
                    depth: gt.depth,
                    mask: gt.mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            intrinsics: *k,
            views,
        })
    }

    /// Index of the view closest to the given yaw.
    /// Box-downsamples every view to `side` pixels. Depth is averaged over
    /// foreground pixels only, so silhouettes do not blend with the
    /// background value.
    pub fn resized(&self, side: usize) -> Result<SceneRecord> {
        let src = self.intrinsics.width;
        if src == side {
            return Ok(self.clone());
        }
        let views = self
            .views
            .iter()
            .map(|v| {
                let fg = v.mask.to_image().box_resized(side)?;
                let masked = Image::from_fn(v.depth.width, v.depth.height, 1, |x, y, _| {
                    if v.mask.get(x, y) { v.depth.get(x, y, 0) } else { 0.0 }
                });
                let d = masked.box_resized(side)?;
                let depth = Image::from_fn(side, side, 1, |x, y, _| {
                    let f = fg.get(x, y, 0);
                    if f > 0.0 { d.get(x, y, 0) / f } else { v.depth.get(x * src / side, y * src / side, 0) }
                });
                Ok(ViewRecord {
                    pose: v.pose,
                    yaw: v.yaw,
                    pitch: v.pitch,
                    rgb: v.rgb.box_resized(side)?,
                    depth,
                    mask: v.mask.box_resized(side)?,
                    roi: v.roi.scaled(side as f64 / src as f64),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneRecord {
            spec: self.spec.clone(),
            intrinsics: Intrinsics::for_resolution(side),
            views,
        })
    }

    pub fn view_near_yaw(&self, yaw: f64) -> Option<usize> {
        (0..self.views.len()).min_by(|&a, &b| {
            let da = (self.views[a].yaw - yaw).abs();
            let db = (self.views[b].yaw - yaw).abs();
            da.total_cmp(&db)
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ViewMeta {
    pose: Pose,
    yaw: f64,
    pitch: f64,
    roi: RoiBoxes,
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    intrinsics: Intrinsics,
    asymmetry: Asymmetry,
    spec: SceneSpec,
    views: Vec<ViewMeta>,
}

pub fn scene_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("scene_{i:03}"))
}

pub fn export_dataset(records: &[SceneRecord], root: &Path) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        let dir = scene_dir(root, i);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (v, view) in r.views.iter().enumerate() {
            write_png(&dir.join(format!("view_{v:03}.png")), &view.rgb)?;
            write_pfm(&dir.join(format!("depth_{v:03}.pfm")), &view.depth)?;
            write_mask_png(&dir.join(format!("mask_{v:03}.png")), &view.mask)?;
        }
        let meta = SceneMeta {
            intrinsics: r.intrinsics,
            asymmetry: r.spec.asymmetry,
            spec: r.spec.clone(),
            views: r
                .views
                .iter()
                .map(|v| ViewMeta {
                    pose: v.pose,
                    yaw: v.yaw,
                    pitch: v.pitch,
                    roi: v.roi,
                })
                .collect(),
        };
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<SceneRecord> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: SceneMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let k = meta.intrinsics;
    let views = meta
        .views
        .into_iter()
        .enumerate()
        .map(|(v, m)| {
            let rgb_path = dir.join(format!("view_{v:03}.png"));
            let depth_path = dir.join(format!("depth_{v:03}.pfm"));
            let mask_path = dir.join(format!("mask_{v:03}.png"));
            let rgb = read_png_rgb(&rgb_path)?;
            let depth = read_pfm(&depth_path)?;
            let mask = read_mask_png(&mask_path)?;
            for (p, w, h) in [
                (&rgb_path, rgb.width, rgb.height),
                (&depth_path, depth.width, depth.height),
                (&mask_path, mask.width, mask.height),
            ] {
                if (w, h) != (k.width, k.height) {
                    return Err(Error::format(p, format!("expected {}x{}, found {w}x{h}", k.width, k.height)));
                }
            }
            Ok(ViewRecord {
                pose: m.pose,
                yaw: m.yaw,
                pitch: m.pitch,
                rgb,
                depth,
                mask,
                roi: m.roi,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneRecord {
        spec: meta.spec,
        intrinsics: k,
        views,
    })
}

/// Loads every `scene_NNN` directory under `root`, in order.
pub fn load_dataset(root: &Path) -> Result<Vec<SceneRecord>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("scene_")))
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_scene(d)).collect()
}

/// Evenly spaced yaws, in radians, from `from` to `to` degrees inclusive.
pub fn yaw_range_degrees(from: f64, to: f64, step: f64) -> Vec<f64> {
    let n = ((to - from) / step).round() as usize;
    (0..=n).map(|i| (from + step * i as f64).to_radians()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mirror_pose;

    #[test]
    fn symmetric_spec_fields_are_exactly_mirrored() {
        let spec = generate_scene(3, 0.0).unwrap();
        assert!(spec.is_symmetric());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let q = Vector3::new(-p.x, p.y, p.z);
            assert_eq!(spec.density_at(&p), spec.density_at(&q));
            assert_eq!(spec.color_at(&p), spec.color_at(&q));
        }
    }

    #[test]
    fn generation_is_deterministic_and_scaled() {
        assert_eq!(generate_scene(9, 0.4).unwrap(), generate_scene(9, 0.4).unwrap());
        assert!(generate_scene(9, 1.5).is_err());
        let s = generate_scene(9, 1.0).unwrap();
        let mole = s.asymmetry.mole.unwrap();
        assert!(mole.side.abs() == 1.0 && mole.position[0].signum() == mole.side);
        let half = generate_scene(9, 0.5).unwrap();
        assert!((half.asymmetry.hair_tilt * 2.0 - s.asymmetry.hair_tilt).abs() < 1e-15);
        assert!((half.asymmetry.lr_delta * 2.0 - s.asymmetry.lr_delta).abs() < 1e-15);
        assert!((half.asymmetry.mole.unwrap().radius * 2.0 - mole.radius).abs() < 1e-15);
        // Every primitive stays inside the scene box.
        for seed in 0..50 {
            let s = generate_scene(seed, 1.0).unwrap();
            for a in 0..3 {
                assert!(s.head.center[a].abs() + s.head.radii[a] < 1.0);
            }
        }
    }

    #[test]
    fn symmetric_scene_renders_mirror() {
        let spec = generate_scene(4, 0.0).unwrap();
        let k = Intrinsics::for_resolution(24);
        let s = RenderSettings::default().with_seed(2);
        let p = look_at_pose(0.5, 0.1, RIG_RADIUS).unwrap();
        let a = render_gt(&spec, &p, &k, &s).unwrap();
        let b = render_gt(&spec, &mirror_pose(&p), &k, &s).unwrap();
        assert!(b.rgb.max_abs_diff(&a.rgb.flip_horizontal()) <= 1e-6);
        assert!(b.depth.max_abs_diff(&a.depth.flip_horizontal()) <= 1e-6);
    }

    #[test]
    fn empty_scene_is_background() {
        let k = Intrinsics::for_resolution(8);
        let p = look_at_pose(0.0, 0.0, RIG_RADIUS).unwrap();
        let g = render_gt(&SceneSpec::empty(), &p, &k, &RenderSettings::default()).unwrap();
        assert!(g.rgb.data.iter().all(|&v| v == 1.0));
        assert_eq!(g.mask.count(), 0);
    }

    #[test]
    fn apex_depth_matches_geometry() {
        let mut spec = generate_scene(5, 0.0).unwrap();
        spec.head.center = [0.0; 3];
        spec.nose.radii = [1e-3; 3];
        let side = 33;
        let k = Intrinsics::for_resolution(side);
        let s = RenderSettings::default();
        let p = look_at_pose(0.0, 0.0, RIG_RADIUS).unwrap();
        let g = render_gt(&spec, &p, &k, &s).unwrap();
        let spacing = (s.far - s.near) / s.samples as f64;
        let expected = RIG_RADIUS - spec.head.radii[2];
        let d = g.depth.get(side / 2, side / 2, 0);
        assert!((d - expected).abs() <= 2.0 * spacing, "{d} vs {expected}");
    }

    #[test]
    fn roi_boxes_contain_anchors() {
        let spec = generate_scene(6, 0.3).unwrap();
        let k = Intrinsics::for_resolution(64);
        for yaw in yaw_range_degrees(-60.0, 60.0, 15.0) {
            let p = look_at_pose(yaw, 0.0, RIG_RADIUS).unwrap();
            let b = spec.roi_boxes(&p, &k).unwrap();
            let check = |bx: RoiBox, a: [f64; 3]| {
                let ((u, v), _) = project(&k, &p, &v3(a)).unwrap();
                assert!(u >= bx.x0 && u <= bx.x1 && v >= bx.y0 && v <= bx.y1);
            };
            check(b.eyes, spec.eyes.anchor);
            check(b.nose, spec.nose.anchor);
            check(b.mouth, spec.mouth.anchor);
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let k = Intrinsics::for_resolution(16);
        let rec = SceneRecord::render(
            generate_scene(7, 0.5).unwrap(),
            &[(0.0, 0.0), (0.5, 0.0)],
            &k,
            &RenderSettings::default(),
        )
        .unwrap();
        export_dataset(std::slice::from_ref(&rec), dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        let b = &back[0];
        assert_eq!(b.spec, rec.spec);
        for (x, y) in b.views.iter().zip(&rec.views) {
            assert_eq!(x.pose, y.pose);
            assert_eq!(x.roi, y.roi);
            assert_eq!(x.mask, y.mask);
            assert!(x.rgb.max_abs_diff(&y.rgb) <= 1.0 / 255.0);
            let exact = y.depth.map(|v| v as f32 as f64);
            assert_eq!(x.depth, exact);
        }
        fs::remove_file(scene_dir(dir.path(), 0).join("depth_001.pfm")).unwrap();
        let e = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(e.contains("depth_001.pfm"), "{e}");
    }
}
