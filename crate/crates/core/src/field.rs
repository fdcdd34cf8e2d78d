//! Latent-modulated feature-grid radiance field and its volume renderer.
//!
//! Each level `l` holds `B_l` basis feature volumes; a latent code supplies
//! one coefficient per basis, so the level's effective volume is
//! `sum_b w[l][b] * grid[l][b]`. Trilinear features from all levels are
//! concatenated and decoded by a two-layer network into density and colour.
//!
//! Rendering is stratified ray marching with exact reverse-mode adjoints.
//! Because the per-level modulation is linear, a render first collapses the
//! bases into one [`ModulatedField`]; gradients flow back to the collapsed
//! volume and are then split between the bases and the latent code.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::image::Image;

pub const HIDDEN: usize = 32;
pub const OUTPUTS: usize = 4;
/// Upper bound on the concatenated feature width.
pub const MAX_FEATURES: usize = 16;

pub const DEFAULT_NEAR: f64 = 1.5;
pub const DEFAULT_FAR: f64 = 4.5;
pub const DEFAULT_SAMPLES: usize = 48;
pub const BACKGROUND: f64 = 1.0;

const ROW_CHUNK: usize = 8;

/// One resolution level: `bases` feature volumes of `resolution^3` cells with
/// `channels` features each. Layout `[basis][z][y][x][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridLevel {
    pub resolution: usize,
    pub bases: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl GridLevel {
    pub fn zeros(resolution: usize, bases: usize, channels: usize) -> Self {
        Self {
            resolution,
            bases,
            channels,
            data: vec![0.0; bases * resolution.pow(3) * channels],
        }
    }

    /// Values per basis volume.
    pub fn basis_len(&self) -> usize {
        self.resolution.pow(3) * self.channels
    }

    pub fn basis(&self, b: usize) -> &[f64] {
        let n = self.basis_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn basis_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.basis_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Index of a lattice vertex within one basis volume.
    #[inline]
    pub fn vertex(&self, x: usize, y: usize, z: usize) -> usize {
        ((z * self.resolution + y) * self.resolution + x) * self.channels
    }
}

/// Dense `features -> HIDDEN -> OUTPUTS` network. Weights are row-major
/// `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub inputs: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Decoder {
    pub fn zeros(inputs: usize) -> Self {
        Self {
            inputs,
            w1: vec![0.0; HIDDEN * inputs],
            b1: vec![0.0; HIDDEN],
            w2: vec![0.0; OUTPUTS * HIDDEN],
            b2: vec![0.0; OUTPUTS],
        }
    }

    fn add_assign(&mut self, other: &Decoder) {
        for (a, b) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Shared generator parameters: basis grids, decoder and noise gain.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorDecoder {
    pub levels: Vec<GridLevel>,
    pub decoder: Decoder,
    pub noise_gain: f64,
}

/// Architecture of a [`PriorDecoder`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FieldShape {
    /// `(resolution, bases)` per level.
    pub levels: Vec<(usize, usize)>,
    pub channels: usize,
}

impl Default for FieldShape {
    fn default() -> Self {
        Self {
            levels: vec![(16, 8), (32, 8)],
            channels: 4,
        }
    }
}

impl FieldShape {
    pub fn features(&self) -> usize {
        self.levels.len() * self.channels
    }

    pub fn latent_dim(&self) -> usize {
        self.levels.iter().map(|l| l.1).sum()
    }
}

impl PriorDecoder {
    pub fn zeros(shape: &FieldShape) -> Result<Self> {
        if shape.features() > MAX_FEATURES || shape.features() == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature width {} outside 1..={MAX_FEATURES}",
                shape.features()
            )));
        }
        if shape.levels.iter().any(|&(r, b)| r < 2 || b == 0) {
            return Err(Error::InvalidArgument("grid levels need resolution >= 2 and >= 1 basis".into()));
        }
        Ok(Self {
            levels: shape
                .levels
                .iter()
                .map(|&(r, b)| GridLevel::zeros(r, b, shape.channels))
                .collect(),
            decoder: Decoder::zeros(shape.features()),
            noise_gain: 0.0,
        })
    }

    /// Random initialisation used before auto-decoder pretraining.
    pub fn random(shape: &FieldShape, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Normal::new(0.0, 0.1).unwrap();
        for level in &mut m.levels {
            level.data.iter_mut().for_each(|v| *v = grid.sample(&mut rng));
        }
        let d = &mut m.decoder;
        let s1 = Normal::new(0.0, (1.0 / d.inputs as f64).sqrt()).unwrap();
        d.w1.iter_mut().for_each(|v| *v = s1.sample(&mut rng));
        let s2 = Normal::new(0.0, (1.0 / HIDDEN as f64).sqrt()).unwrap();
        d.w2.iter_mut().for_each(|v| *v = s2.sample(&mut rng));
        d.b2[0] = -1.0;
        m.noise_gain = 0.05;
        Ok(m)
    }

    pub fn shape(&self) -> FieldShape {
        FieldShape {
            levels: self.levels.iter().map(|l| (l.resolution, l.bases)).collect(),
            channels: self.levels.first().map_or(0, |l| l.channels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape()).expect("shape already validated")
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(|l| l.data.iter().all(|v| v.is_finite()))
            && [&self.decoder.w1, &self.decoder.b1, &self.decoder.w2, &self.decoder.b2]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
            && self.noise_gain.is_finite()
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn snap_to_f32(&mut self) {
        let snap = |v: &mut f64| *v = *v as f32 as f64;
        for l in &mut self.levels {
            l.data.iter_mut().for_each(snap);
        }
        let d = &mut self.decoder;
        for v in [&mut d.w1, &mut d.b1, &mut d.w2, &mut d.b2] {
            v.iter_mut().for_each(snap);
        }
        snap(&mut self.noise_gain);
    }

    /// Collapses the bases with a latent code, ready for rendering.
    pub fn modulate(&self, w: &LatentCode) -> Result<ModulatedField<'_>> {
        ModulatedField::new(self, w)
    }

    pub fn query(&self, w: &LatentCode, x: &Vector3<f64>) -> Result<(f64, [f64; 3])> {
        let f = self.modulate(w)?;
        Ok(f.query(x))
    }
}

/// Per-level basis coefficients (the extended latent space).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub levels: Vec<Vec<f64>>,
}

impl LatentCode {
    pub fn zeros(shape: &FieldShape) -> Self {
        Self {
            levels: shape.levels.iter().map(|&(_, b)| vec![0.0; b]).collect(),
        }
    }

    pub fn random(shape: &FieldShape, std: f64, rng: &mut impl Rng) -> Self {
        let n = Normal::new(0.0, std).unwrap();
        Self {
            levels: shape
                .levels
                .iter()
                .map(|&(_, b)| (0..b).map(|_| n.sample(rng)).collect())
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.levels.concat()
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().flatten().all(|v| v.is_finite())
    }

    pub fn snap_to_f32(&mut self) {
        self.levels.iter_mut().flatten().for_each(|v| *v = *v as f32 as f64);
    }

    pub fn mean(codes: &[LatentCode]) -> Option<LatentCode> {
        let first = codes.first()?;
        let mut out = first.clone();
        for (l, level) in out.levels.iter_mut().enumerate() {
            for (b, v) in level.iter_mut().enumerate() {
                *v = codes.iter().map(|c| c.levels[l][b]).sum::<f64>() / codes.len() as f64;
            }
        }
        Some(out)
    }
}

/// Per-view image-space noise, added to the rendered colour scaled by the
/// model's noise gain.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMap {
    pub map: Image,
}

impl NoiseMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            map: Image::new(width, height, 1),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            map: self.map.flip_horizontal(),
        }
    }
}

/// Colour, expected depth and accumulated opacity of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    pub depth: Image,
    pub opacity: Image,
}

/// Ray-marching parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub near: f64,
    pub far: f64,
    pub samples: usize,
    /// Stratification seed; pixel columns `x` and `W-1-x` share jitter.
    pub seed: u64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
            samples: DEFAULT_SAMPLES,
            seed: 0,
        }
    }
}

impl RenderSettings {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) || self.samples == 0 {
            return Err(Error::InvalidArgument(format!(
                "need 0 < near < far and samples > 0 (near {}, far {}, samples {})",
                self.near, self.far, self.samples
            )));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn unit_from_bits(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Stratified z-depth of sample `i`; columns `x` and `W-1-x` share jitter.
#[inline]
pub(crate) fn sample_depth(s: &RenderSettings, px: usize, py: usize, width: usize, i: usize) -> f64 {
    let col = px.min(width - 1 - px) as u64;
    let key = splitmix(s.seed ^ splitmix(((py as u64) << 32) | col));
    let jitter = unit_from_bits(splitmix(key.wrapping_add(i as u64)));
    let delta = (s.far - s.near) / s.samples as f64;
    s.near + (i as f64 + jitter) * delta
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth rectifier `(z + sqrt(z^2 + 4)) / 2`.
#[inline]
fn squareplus(z: f64) -> (f64, f64) {
    let r = (z * z + 4.0).sqrt();
    (0.5 * (z + r), 0.5 * (1.0 + z / r))
}

/// One level after collapsing the bases: `[z][y][x][channel]`.
#[derive(Clone, Debug)]
pub struct CollapsedLevel {
    pub resolution: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// A [`PriorDecoder`] with its bases collapsed by a specific latent code.
pub struct ModulatedField<'a> {
    pub model: &'a PriorDecoder,
    pub levels: Vec<CollapsedLevel>,
}

/// Trilinear footprint of a point on one level.
#[derive(Clone, Copy, Default)]
struct Footprint {
    base: usize,
    fx: f64,
    fy: f64,
    fz: f64,
}

/// Everything the adjoint pass needs about one sample.
#[derive(Clone, Copy)]
struct SampleRecord {
    t: f64,
    trans: f64,
    alpha: f64,
    dens_slope: f64,
    rgb: [f64; 3],
    feat: [f64; MAX_FEATURES],
    hidden_pre: [f64; HIDDEN],
    foot: [Footprint; MAX_FEATURES],
}

impl Default for SampleRecord {
    fn default() -> Self {
        Self {
            t: 0.0,
            trans: 0.0,
            alpha: 0.0,
            dens_slope: 0.0,
            rgb: [0.0; 3],
            feat: [0.0; MAX_FEATURES],
            hidden_pre: [0.0; HIDDEN],
            foot: [Footprint::default(); MAX_FEATURES],
        }
    }
}

/// Upstream gradients of a render's outputs.
#[derive(Clone, Debug, Default)]
pub struct RenderGrad {
    pub rgb: Option<Image>,
    pub depth: Option<Image>,
    pub opacity: Option<Image>,
}

impl RenderGrad {
    pub fn rgb(g: Image) -> Self {
        Self {
            rgb: Some(g),
            ..Default::default()
        }
    }

    pub fn depth(g: Image) -> Self {
        Self {
            depth: Some(g),
            ..Default::default()
        }
    }
}

/// Gradient accumulator for the collapsed field and decoder.
#[derive(Clone, Debug)]
pub struct FieldGrad {
    pub levels: Vec<Vec<f64>>,
    pub decoder: Decoder,
    pub noise_gain: f64,
}

impl FieldGrad {
    fn zeros(field: &ModulatedField<'_>) -> Self {
        Self {
            levels: field.levels.iter().map(|l| vec![0.0; l.data.len()]).collect(),
            decoder: Decoder::zeros(field.model.decoder.inputs),
            noise_gain: 0.0,
        }
    }

    fn add_assign(&mut self, other: &FieldGrad) {
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.decoder.add_assign(&other.decoder);
        self.noise_gain += other.noise_gain;
    }
}

/// Gradients with respect to generator parameters and latent code.
#[derive(Clone, Debug)]
pub struct ModelGrad {
    pub theta: PriorDecoder,
    pub latent: LatentCode,
}

struct RayGeom {
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    dir_norm: f64,
    t_enter: f64,
    t_exit: f64,
}

impl<'a> ModulatedField<'a> {
    pub fn new(model: &'a PriorDecoder, w: &LatentCode) -> Result<Self> {
        if w.levels.len() != model.levels.len()
            || w.levels.iter().zip(&model.levels).any(|(c, l)| c.len() != l.bases)
        {
            return Err(Error::ShapeMismatch("latent code does not match model levels".into()));
        }
        let levels = model
            .levels
            .iter()
            .zip(&w.levels)
            .map(|(level, coeffs)| {
                let mut data = vec![0.0; level.basis_len()];
                for (b, &c) in coeffs.iter().enumerate() {
                    if c != 0.0 {
                        data.iter_mut().zip(level.basis(b)).for_each(|(d, g)| *d += c * g);
                    }
                }
                CollapsedLevel {
                    resolution: level.resolution,
                    channels: level.channels,
                    data,
                }
            })
            .collect();
        Ok(Self { model, levels })
    }

    #[inline]
    fn footprints(&self, x: &Vector3<f64>, out: &mut [Footprint]) {
        for (l, level) in self.levels.iter().enumerate() {
            let r = level.resolution;
            let scale = 0.5 * (r - 1) as f64;
            let axis = |p: f64| {
                let u = (p + 1.0) * scale;
                let i = (u.floor() as isize).clamp(0, r as isize - 2) as usize;
                (i, u - i as f64)
            };
            let (ix, fx) = axis(x.x);
            let (iy, fy) = axis(x.y);
            let (iz, fz) = axis(x.z);
            out[l] = Footprint {
                base: ((iz * r + iy) * r + ix) * level.channels,
                fx,
                fy,
                fz,
            };
        }
    }

    #[inline]
    fn features(&self, foot: &[Footprint], feat: &mut [f64; MAX_FEATURES]) {
        let mut k = 0;
        for (l, level) in self.levels.iter().enumerate() {
            let Footprint { base, fx, fy, fz } = foot[l];
            let ch = level.channels;
            let sx = ch;
            let sy = level.resolution * ch;
            let sz = level.resolution * sy;
            let d = &level.data;
            for c in 0..ch {
                let b = base + c;
                let c00 = d[b] * (1.0 - fx) + d[b + sx] * fx;
                let c10 = d[b + sy] * (1.0 - fx) + d[b + sy + sx] * fx;
                let c01 = d[b + sz] * (1.0 - fx) + d[b + sz + sx] * fx;
                let c11 = d[b + sz + sy] * (1.0 - fx) + d[b + sz + sy + sx] * fx;
                let c0 = c00 * (1.0 - fy) + c10 * fy;
                let c1 = c01 * (1.0 - fy) + c11 * fy;
                feat[k] = c0 * (1.0 - fz) + c1 * fz;
                k += 1;
            }
        }
    }

    /// Returns `(raw outputs, hidden pre-activations)` for a feature vector.
    #[inline]
    fn decode(&self, feat: &[f64; MAX_FEATURES], hidden_pre: &mut [f64; HIDDEN]) -> [f64; OUTPUTS] {
        let d = &self.model.decoder;
        let n = d.inputs;
        let mut hidden = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            let row = &d.w1[j * n..(j + 1) * n];
            let mut z = d.b1[j];
            for i in 0..n {
                z += row[i] * feat[i];
            }
            hidden_pre[j] = z;
            hidden[j] = squareplus(z).0;
        }
        let mut out = [0.0; OUTPUTS];
        for (o, out_o) in out.iter_mut().enumerate() {
            let row = &d.w2[o * HIDDEN..(o + 1) * HIDDEN];
            let mut z = d.b2[o];
            for j in 0..HIDDEN {
                z += row[j] * hidden[j];
            }
            *out_o = z;
        }
        out
    }

    /// Density and colour at a world point; zero density outside `[-1,1]^3`.
    pub fn query(&self, x: &Vector3<f64>) -> (f64, [f64; 3]) {
        if x.iter().any(|v| v.abs() > 1.0) {
            return (0.0, [BACKGROUND; 3]);
        }
        let mut foot = [Footprint::default(); MAX_FEATURES];
        let mut feat = [0.0; MAX_FEATURES];
        let mut pre = [0.0; HIDDEN];
        self.footprints(x, &mut foot);
        self.features(&foot, &mut feat);
        let out = self.decode(&feat, &mut pre);
        (softplus(out[0]), [sigmoid(out[1]), sigmoid(out[2]), sigmoid(out[3])])
    }

    fn ray(&self, pose: &Pose, k: &Intrinsics, px: usize, py: usize, s: &RenderSettings) -> RayGeom {
        let origin = pose.position();
        let dir = pose.rotation() * k.camera_ray(px as f64, py as f64);
        // Slab intersection with the scene box in the z-depth parameter.
        let mut t0 = s.near;
        let mut t1 = s.far;
        for a in 0..3 {
            let o = origin[a];
            let d = dir[a];
            if d.abs() < 1e-15 {
                if o.abs() > 1.0 {
                    t0 = f64::INFINITY;
                }
            } else {
                let ta = (-1.0 - o) / d;
                let tb = (1.0 - o) / d;
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        RayGeom {
            origin,
            dir,
            dir_norm: dir.norm(),
            t_enter: t0,
            t_exit: t1,
        }
    }


    /// Marches one ray. With `records`, stores what the adjoint pass needs.
    /// Returns `(rgb, depth, opacity)` before noise.
    fn march(
        &self,
        ray: &RayGeom,
        s: &RenderSettings,
        px: usize,
        py: usize,
        width: usize,
        mut records: Option<&mut Vec<SampleRecord>>,
    ) -> ([f64; 3], f64, f64) {
        let delta_world = (s.far - s.near) / s.samples as f64 * ray.dir_norm;
        let mut trans = 1.0;
        let mut rgb = [0.0; 3];
        let mut depth = 0.0;
        let mut opacity = 0.0;
        if let Some(r) = records.as_deref_mut() {
            r.clear();
        }
        if ray.t_enter < ray.t_exit {
            let nlev = self.levels.len();
            let mut foot = [Footprint::default(); MAX_FEATURES];
            let mut rec = SampleRecord::default();
            for i in 0..s.samples {
                let t = sample_depth(s, px, py, width, i);
                if t <= ray.t_enter || t >= ray.t_exit {
                    continue;
                }
                let x = ray.origin + ray.dir * t;
                if x.iter().any(|v| v.abs() > 1.0) {
                    continue;
                }
                self.footprints(&x, &mut foot[..nlev]);
                self.features(&foot, &mut rec.feat);
                let out = self.decode(&rec.feat, &mut rec.hidden_pre);
                let sigma = softplus(out[0]);
                let c = [sigmoid(out[1]), sigmoid(out[2]), sigmoid(out[3])];
                let alpha = 1.0 - (-sigma * delta_world).exp();
                let weight = trans * alpha;
                for ch in 0..3 {
                    rgb[ch] += weight * c[ch];
                }
                depth += weight * t;
                opacity += weight;
                if let Some(r) = records.as_deref_mut() {
                    rec.t = t;
                    rec.trans = trans;
                    rec.alpha = alpha;
                    rec.dens_slope = sigmoid(out[0]);
                    rec.rgb = c;
                    rec.foot = foot;
                    r.push(rec);
                }
                trans *= 1.0 - alpha;
            }
        }
        for v in &mut rgb {
            *v += trans * BACKGROUND;
        }
        depth += trans * s.far;
        (rgb, depth, opacity)
    }

    /// Renders a view. Colour has `noise_gain * noise` added when given.
    pub fn render(
        &self,
        pose: &Pose,
        k: &Intrinsics,
        noise: Option<&NoiseMap>,
        s: &RenderSettings,
    ) -> RenderOutput {
        let (w, h) = (k.width, k.height);
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..h)
            .into_par_iter()
            .map(|py| {
                let mut rgb = Vec::with_capacity(3 * w);
                let mut dep = Vec::with_capacity(w);
                let mut op = Vec::with_capacity(w);
                for px in 0..w {
                    let ray = self.ray(pose, k, px, py, s);
                    let (c, d, o) = self.march(&ray, s, px, py, w, None);
                    rgb.extend_from_slice(&c);
                    dep.push(d);
                    op.push(o);
                }
                (rgb, dep, op)
            })
            .collect();
        let mut out = RenderOutput {
            rgb: Image::new(w, h, 3),
            depth: Image::new(w, h, 1),
            opacity: Image::new(w, h, 1),
        };
        for (py, (rgb, dep, op)) in rows.into_iter().enumerate() {
            out.rgb.data[py * w * 3..(py + 1) * w * 3].copy_from_slice(&rgb);
            out.depth.data[py * w..(py + 1) * w].copy_from_slice(&dep);
            out.opacity.data[py * w..(py + 1) * w].copy_from_slice(&op);
        }
        if let Some(n) = noise {
            let g = self.model.noise_gain;
            for p in 0..w * h {
                let nv = n.map.data[p];
                for c in 0..3 {
                    out.rgb.data[3 * p + c] += g * nv;
                }
            }
        }
        out
    }

    /// Adjoint of [`render`](Self::render): accumulates parameter gradients
    /// into `acc` and returns the gradient with respect to the noise map.
    pub fn backward(
        &self,
        pose: &Pose,
        k: &Intrinsics,
        noise: Option<&NoiseMap>,
        s: &RenderSettings,
        grad: &RenderGrad,
        acc: &mut FieldGrad,
    ) -> Option<Image> {
        let (w, h) = (k.width, k.height);
        let chunks: Vec<usize> = (0..h).step_by(ROW_CHUNK).collect();
        let partials: Vec<FieldGrad> = chunks
            .par_iter()
            .map(|&y0| {
                let mut local = FieldGrad::zeros(self);
                let mut records = Vec::with_capacity(s.samples);
                for py in y0..(y0 + ROW_CHUNK).min(h) {
                    for px in 0..w {
                        let p = py * w + px;
                        let g_rgb = grad
                            .rgb
                            .as_ref()
                            .map_or([0.0; 3], |g| [g.data[3 * p], g.data[3 * p + 1], g.data[3 * p + 2]]);
                        let g_depth = grad.depth.as_ref().map_or(0.0, |g| g.data[p]);
                        let g_op = grad.opacity.as_ref().map_or(0.0, |g| g.data[p]);
                        if g_rgb == [0.0; 3] && g_depth == 0.0 && g_op == 0.0 {
                            continue;
                        }
                        let ray = self.ray(pose, k, px, py, s);
                        self.march(&ray, s, px, py, w, Some(&mut records));
                        let delta_world = (s.far - s.near) / s.samples as f64 * ray.dir_norm;
                        self.backprop_ray(&records, delta_world, s.far, g_rgb, g_depth, g_op, &mut local);
                    }
                }
                local
            })
            .collect();
        for part in &partials {
            acc.add_assign(part);
        }
        let g_rgb = grad.rgb.as_ref()?;
        let noise = noise?;
        let mut g_noise = Image::new(w, h, 1);
        let gain = self.model.noise_gain;
        for p in 0..w * h {
            let s3 = g_rgb.data[3 * p] + g_rgb.data[3 * p + 1] + g_rgb.data[3 * p + 2];
            g_noise.data[p] = gain * s3;
            acc.noise_gain += noise.map.data[p] * s3;
        }
        Some(g_noise)
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_ray(
        &self,
        records: &[SampleRecord],
        delta_world: f64,
        far: f64,
        g_rgb: [f64; 3],
        g_depth: f64,
        g_op: f64,
        acc: &mut FieldGrad,
    ) {
        let dec = &self.model.decoder;
        let n_in = dec.inputs;
        // Value of everything behind the current sample, given arrival there.
        let mut behind = (g_rgb[0] + g_rgb[1] + g_rgb[2]) * BACKGROUND + g_depth * far;
        for rec in records.iter().rev() {
            let v = g_rgb[0] * rec.rgb[0] + g_rgb[1] * rec.rgb[1] + g_rgb[2] * rec.rgb[2] + g_depth * rec.t + g_op;
            let d_alpha = rec.trans * (v - behind);
            behind = rec.alpha * v + (1.0 - rec.alpha) * behind;

            let weight = rec.trans * rec.alpha;
            let d_sigma = d_alpha * delta_world * (1.0 - rec.alpha);
            let mut d_out = [0.0; OUTPUTS];
            d_out[0] = d_sigma * rec.dens_slope;
            for c in 0..3 {
                d_out[c + 1] = weight * g_rgb[c] * rec.rgb[c] * (1.0 - rec.rgb[c]);
            }

            let mut hidden = [0.0; HIDDEN];
            let mut slope = [0.0; HIDDEN];
            for j in 0..HIDDEN {
                let (hv, sl) = squareplus(rec.hidden_pre[j]);
                hidden[j] = hv;
                slope[j] = sl;
            }
            let mut d_hidden = [0.0; HIDDEN];
            for o in 0..OUTPUTS {
                let go = d_out[o];
                acc.decoder.b2[o] += go;
                let row = &dec.w2[o * HIDDEN..(o + 1) * HIDDEN];
                let grow = &mut acc.decoder.w2[o * HIDDEN..(o + 1) * HIDDEN];
                for j in 0..HIDDEN {
                    grow[j] += go * hidden[j];
                    d_hidden[j] += go * row[j];
                }
            }
            let mut d_feat = [0.0; MAX_FEATURES];
            for j in 0..HIDDEN {
                let dz = d_hidden[j] * slope[j];
                acc.decoder.b1[j] += dz;
                let row = &dec.w1[j * n_in..(j + 1) * n_in];
                let grow = &mut acc.decoder.w1[j * n_in..(j + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += dz * rec.feat[i];
                    d_feat[i] += dz * row[i];
                }
            }

            let mut k = 0;
            for (l, level) in self.levels.iter().enumerate() {
                let Footprint { base, fx, fy, fz } = rec.foot[l];
                let ch = level.channels;
                let sx = ch;
                let sy = level.resolution * ch;
                let sz = level.resolution * sy;
                let g = &mut acc.levels[l];
                let wts = [
                    (0, (1.0 - fx) * (1.0 - fy) * (1.0 - fz)),
                    (sx, fx * (1.0 - fy) * (1.0 - fz)),
                    (sy, (1.0 - fx) * fy * (1.0 - fz)),
                    (sy + sx, fx * fy * (1.0 - fz)),
                    (sz, (1.0 - fx) * (1.0 - fy) * fz),
                    (sz + sx, fx * (1.0 - fy) * fz),
                    (sz + sy, (1.0 - fx) * fy * fz),
                    (sz + sy + sx, fx * fy * fz),
                ];
                for c in 0..ch {
                    let df = d_feat[k];
                    k += 1;
                    if df == 0.0 {
                        continue;
                    }
                    for &(off, wt) in &wts {
                        g[base + off + c] += wt * df;
                    }
                }
            }
        }
    }

    pub fn grad_accumulator(&self) -> FieldGrad {
        FieldGrad::zeros(self)
    }

    /// Splits collapsed-field gradients into basis and latent gradients.
    pub fn finish(&self, acc: &FieldGrad, w: &LatentCode) -> ModelGrad {
        let mut theta = self.model.zeros_like();
        let mut latent = LatentCode {
            levels: w.levels.iter().map(|l| vec![0.0; l.len()]).collect(),
        };
        for (l, level) in self.model.levels.iter().enumerate() {
            let g = &acc.levels[l];
            for b in 0..level.bases {
                let basis = level.basis(b);
                latent.levels[l][b] = basis.iter().zip(g).map(|(x, y)| x * y).sum();
                let coeff = w.levels[l][b];
                theta.levels[l]
                    .basis_mut(b)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, gv)| *d = coeff * gv);
            }
        }
        theta.decoder = acc.decoder.clone();
        theta.noise_gain = acc.noise_gain;
        ModelGrad { theta, latent }
    }
}

/// Renders one view from scratch.
pub fn render(
    model: &PriorDecoder,
    w: &LatentCode,
    pose: &Pose,
    k: &Intrinsics,
    noise: Option<&NoiseMap>,
    s: &RenderSettings,
) -> Result<RenderOutput> {
    s.validate()?;
    if let Some(n) = noise {
        if n.map.width != k.width || n.map.height != k.height {
            return Err(Error::ShapeMismatch("noise map does not match render resolution".into()));
        }
    }
    Ok(model.modulate(w)?.render(pose, k, noise, s))
}

/// Depth maps of a pose set; every pose shares the same stratification seed.
pub fn render_depth_set(
    model: &PriorDecoder,
    w: &LatentCode,
    poses: &[Pose],
    k: &Intrinsics,
    s: &RenderSettings,
) -> Result<Vec<Image>> {
    s.validate()?;
    let field = model.modulate(w)?;
    Ok(poses.iter().map(|p| field.render(p, k, None, s).depth).collect())
}
