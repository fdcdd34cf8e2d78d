//! Image, noise and depth losses with their adjoints.
//!
//! Every function that takes `with_grad` returns the gradient with respect to
//! its first (rendered) argument; the second argument is the target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Bilinear, Image, Mask};
use crate::warp::PseudoView;

mod stage;
pub use stage::*;

/// Number of pyramid levels in [`msgp`].
pub const MSGP_LEVELS: usize = 4;
/// Side of the resampled region-of-interest crops.
pub const ROI_SIZE: usize = 32;
pub const CX_BANDWIDTH: f64 = 0.5;
pub const CX_EPSILON: f64 = 1e-5;

/// Value plus optional gradient with respect to the first argument.
#[derive(Clone, Debug)]
pub struct Term {
    pub value: f64,
    pub grad: Option<Image>,
}

fn check_pair(a: &Image, b: &Image, mask: Option<&Mask>, what: &str) -> Result<()> {
    a.check_same_shape(b, what)?;
    if let Some(m) = mask {
        if m.width != a.width || m.height != a.height {
            return Err(Error::ShapeMismatch(format!("{what}: mask does not match image")));
        }
    }
    Ok(())
}

/// Mean squared error over (masked) pixels and channels. An empty mask gives 0.
pub fn l2(a: &Image, b: &Image, mask: Option<&Mask>, with_grad: bool) -> Result<Term> {
    check_pair(a, b, mask, "l2")?;
    let ch = a.channels;
    let active = |p: usize| mask.is_none_or(|m| m.data[p]);
    let count = (0..a.width * a.height).filter(|&p| active(p)).count() * ch;
    let mut grad = with_grad.then(|| Image::new(a.width, a.height, ch));
    if count == 0 {
        log::warn!("l2: empty mask, loss is 0");
        return Ok(Term { value: 0.0, grad });
    }
    let norm = 1.0 / count as f64;
    let mut sum = 0.0;
    for p in 0..a.width * a.height {
        if !active(p) {
            continue;
        }
        for c in 0..ch {
            let i = p * ch + c;
            let d = a.data[i] - b.data[i];
            sum += d * d;
            if let Some(g) = grad.as_mut() {
                g.data[i] = 2.0 * d * norm;
            }
        }
    }
    Ok(Term { value: sum * norm, grad })
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-pixel weights for one pyramid level.
fn downsample_weights(w: &[f64], width: usize, height: usize) -> Vec<f64> {
    let (nw, nh) = (width / 2, height / 2);
    let mut out = vec![0.0; nw * nh];
    for y in 0..nh {
        for x in 0..nw {
            let at = |xx: usize, yy: usize| w[yy * width + xx];
            out[y * nw + x] =
                0.25 * (at(2 * x, 2 * y) + at(2 * x + 1, 2 * y) + at(2 * x, 2 * y + 1) + at(2 * x + 1, 2 * y + 1));
        }
    }
    out
}

/// Adjoint of [`Image::downsample2`].
fn upsample_grad(g: &Image, width: usize, height: usize) -> Image {
    let mut out = Image::new(width, height, g.channels);
    for y in 0..g.height {
        for x in 0..g.width {
            for c in 0..g.channels {
                let v = 0.25 * g.get(x, y, c);
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let i = out.idx(2 * x + dx, 2 * y + dy, c);
                    out.data[i] += v;
                }
            }
        }
    }
    out
}

/// One pyramid level of [`msgp`]: weighted mean-abs colour difference plus
/// weighted mean-abs differences of horizontal and vertical gradients.
fn msgp_level(a: &Image, b: &Image, w: &[f64], grad: Option<&mut Image>) -> f64 {
    let (wd, ht, ch) = (a.width, a.height, a.channels);
    let mut grad = grad;
    let mut total = 0.0;

    let wsum: f64 = w.iter().sum();
    if wsum > 0.0 {
        let norm = 1.0 / (wsum * ch as f64);
        for p in 0..wd * ht {
            if w[p] == 0.0 {
                continue;
            }
            for c in 0..ch {
                let i = p * ch + c;
                let d = a.data[i] - b.data[i];
                total += w[p] * d.abs() * norm;
                if let Some(g) = grad.as_deref_mut() {
                    g.data[i] += w[p] * sign(d) * norm;
                }
            }
        }
    }

    // (dx, dy) neighbour offsets for the two gradient maps.
    for (dx, dy) in [(1usize, 0usize), (0, 1)] {
        if wd <= dx || ht <= dy {
            continue;
        }
        let mut pw = Vec::with_capacity((wd - dx) * (ht - dy));
        for y in 0..ht - dy {
            for x in 0..wd - dx {
                pw.push(w[y * wd + x] * w[(y + dy) * wd + x + dx]);
            }
        }
        let psum: f64 = pw.iter().sum();
        if psum <= 0.0 {
            continue;
        }
        let norm = 1.0 / (psum * ch as f64);
        let mut k = 0;
        for y in 0..ht - dy {
            for x in 0..wd - dx {
                let weight = pw[k];
                k += 1;
                if weight == 0.0 {
                    continue;
                }
                for c in 0..ch {
                    let i0 = a.idx(x, y, c);
                    let i1 = a.idx(x + dx, y + dy, c);
                    let d = (a.data[i1] - a.data[i0]) - (b.data[i1] - b.data[i0]);
                    total += weight * d.abs() * norm;
                    if let Some(g) = grad.as_deref_mut() {
                        let s = weight * sign(d) * norm;
                        g.data[i1] += s;
                        g.data[i0] -= s;
                    }
                }
            }
        }
    }
    total
}

/// Multi-scale gradient-photometric distance, a deterministic stand-in for a
/// learned perceptual metric. Requires both sides >= 8.
pub fn msgp(a: &Image, b: &Image, mask: Option<&Mask>, with_grad: bool) -> Result<Term> {
    check_pair(a, b, mask, "msgp")?;
    let min_side = 1 << (MSGP_LEVELS - 1);
    if a.width < min_side || a.height < min_side {
        return Err(Error::InvalidArgument(format!(
            "msgp needs images of at least {min_side}x{min_side}, got {}x{}",
            a.width, a.height
        )));
    }
    let mut weights = match mask {
        Some(m) => m.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        None => vec![1.0; a.width * a.height],
    };
    let mut pa = a.clone();
    let mut pb = b.clone();
    let mut value = 0.0;
    let mut level_grads = Vec::new();
    let scale = 1.0 / MSGP_LEVELS as f64;
    for level in 0..MSGP_LEVELS {
        let mut g = with_grad.then(|| Image::new(pa.width, pa.height, pa.channels));
        value += scale * msgp_level(&pa, &pb, &weights, g.as_mut());
        level_grads.push(g);
        if level + 1 < MSGP_LEVELS {
            weights = downsample_weights(&weights, pa.width, pa.height);
            pa = pa.downsample2();
            pb = pb.downsample2();
        }
    }
    let grad = with_grad.then(|| {
        // Fold level gradients back to full resolution, coarsest first.
        let mut acc: Option<Image> = None;
        let dims: Vec<(usize, usize)> = {
            let mut d = vec![(a.width, a.height)];
            for _ in 1..MSGP_LEVELS {
                let (w, h) = *d.last().unwrap();
                d.push((w / 2, h / 2));
            }
            d
        };
        for level in (0..MSGP_LEVELS).rev() {
            let mut g = level_grads[level].take().unwrap();
            g.data.iter_mut().for_each(|v| *v *= scale);
            if let Some(coarser) = acc.take() {
                let up = upsample_grad(&coarser, dims[level].0, dims[level].1);
                g.data.iter_mut().zip(&up.data).for_each(|(x, y)| *x += y);
            }
            acc = Some(g);
        }
        acc.unwrap()
    });
    Ok(Term { value, grad })
}

fn roll_mean_product(n: &Image, dx: usize, dy: usize) -> f64 {
    let (w, h) = (n.width, n.height);
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            s += n.data[y * w + x] * n.data[((y + dy) % h) * w + (x + dx) % w];
        }
    }
    s / (w * h) as f64
}

/// Multi-scale spatial autocorrelation penalty on a single-channel noise map:
/// at each level (halving until a side reaches 8), the squared mean products
/// of the map with its one-pixel circular shifts in x and y.
pub fn noise_reg(n: &Image, with_grad: bool) -> Result<Term> {
    if n.channels != 1 {
        return Err(Error::ShapeMismatch("noise map must have one channel".into()));
    }
    let mut levels = vec![n.clone()];
    while levels.last().unwrap().width.min(levels.last().unwrap().height) > 8 {
        let next = levels.last().unwrap().downsample2();
        levels.push(next);
    }
    let mut value = 0.0;
    let mut grads = Vec::new();
    for lv in &levels {
        let (w, h) = (lv.width, lv.height);
        let ax = roll_mean_product(lv, 1, 0);
        let ay = roll_mean_product(lv, 0, 1);
        value += ax * ax + ay * ay;
        if with_grad {
            let nn = (w * h) as f64;
            let g = Image::from_fn(w, h, 1, |x, y, _| {
                let at = |xx: usize, yy: usize| lv.data[yy * w + xx];
                let sx = at((x + 1) % w, y) + at((x + w - 1) % w, y);
                let sy = at(x, (y + 1) % h) + at(x, (y + h - 1) % h);
                2.0 * ax * sx / nn + 2.0 * ay * sy / nn
            });
            grads.push(g);
        }
    }
    let grad = with_grad.then(|| {
        let mut acc = grads.pop().unwrap();
        while let Some(mut g) = grads.pop() {
            let up = upsample_grad(&acc, g.width, g.height);
            g.data.iter_mut().zip(&up.data).for_each(|(x, y)| *x += y);
            acc = g;
        }
        acc
    });
    Ok(Term { value, grad })
}

/// A depth map captured from the un-tuned generator, with the foreground on
/// which it is trusted (rough-model opacity above 0.5).
#[derive(Clone, Debug, PartialEq)]
pub struct DepthAnchor {
    pub depth: Image,
    pub foreground: Mask,
}

impl DepthAnchor {
    pub fn new(depth: Image, opacity: &Image) -> Self {
        Self {
            foreground: Mask::threshold(opacity, 0.5),
            depth,
        }
    }
}

/// Sum over poses of the foreground root-mean-square depth deviation.
/// Returns one gradient image per depth map.
pub fn depth_reg(depths: &[Image], anchors: &[DepthAnchor], with_grad: bool) -> Result<(f64, Option<Vec<Image>>)> {
    if depths.len() != anchors.len() {
        return Err(Error::ShapeMismatch(format!(
            "depth_reg: {} depth maps vs {} anchors",
            depths.len(),
            anchors.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = with_grad.then(Vec::new);
    for (d, a) in depths.iter().zip(anchors) {
        d.check_same_shape(&a.depth, "depth_reg")?;
        let n = a.foreground.count();
        let mut g = Image::new(d.width, d.height, 1);
        if n > 0 {
            let sq: f64 = (0..d.data.len())
                .filter(|&p| a.foreground.data[p])
                .map(|p| (d.data[p] - a.depth.data[p]).powi(2))
                .sum();
            let rms = (sq / n as f64).sqrt();
            total += rms;
            if rms > 0.0 {
                for p in 0..d.data.len() {
                    if a.foreground.data[p] {
                        g.data[p] = (d.data[p] - a.depth.data[p]) / (n as f64 * rms);
                    }
                }
            }
        }
        if let Some(gs) = grads.as_mut() {
            gs.push(g);
        }
    }
    Ok((total, grads))
}

/// Masked msgp between a render at the pseudo view's pose and the pseudo
/// image, with both sides multiplied by the authentic mask.
pub fn adjacent_loss(render_rgb: &Image, pseudo: &PseudoView, with_grad: bool) -> Result<Term> {
    let a = render_rgb.masked(&pseudo.mask);
    let b = pseudo.image.masked(&pseudo.mask);
    let mut t = msgp(&a, &b, None, with_grad)?;
    if let Some(g) = t.grad.take() {
        t.grad = Some(g.masked(&pseudo.mask));
    }
    Ok(t)
}

/// Facial components supervised through region-of-interest crops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Eyes,
    Nose,
    Mouth,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Eyes, Component::Nose, Component::Mouth];
}

/// Pixel box `[x0, x1) x [y0, y1)`, serialised as `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct RoiBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for RoiBox {
    fn from(v: [f64; 4]) -> Self {
        Self {
            x0: v[0],
            y0: v[1],
            x1: v[2],
            y1: v[3],
        }
    }
}

impl From<RoiBox> for [f64; 4] {
    fn from(b: RoiBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl RoiBox {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Bounding box of points, padded, clipped to a `width x height` image.
    pub fn bounding(points: &[(f64, f64)], width: usize, height: usize) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let b = RoiBox {
            x0: (x0.floor()).clamp(0.0, width as f64 - 1.0),
            y0: (y0.floor()).clamp(0.0, height as f64 - 1.0),
            x1: (x1.floor() + 1.0).clamp(1.0, width as f64),
            y1: (y1.floor() + 1.0).clamp(1.0, height as f64),
        };
        (b.width() >= 1.0 && b.height() >= 1.0).then_some(b)
    }

    pub fn flip_horizontal(&self, width: usize) -> Self {
        let w = width as f64;
        RoiBox {
            x0: w - self.x1,
            y0: self.y0,
            x1: w - self.x0,
            y1: self.y1,
        }
    }

    /// Pixel centres covered by the box.
    pub fn pixels(&self, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
        let xs = (self.x0.max(0.0).ceil() as usize)..(self.x1.min(width as f64).ceil() as usize);
        let ys = (self.y0.max(0.0).ceil() as usize)..(self.y1.min(height as f64).ceil() as usize);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    }
}

/// Per-view boxes of the facial components; both eyes share one box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBoxes {
    pub eyes: RoiBox,
    pub nose: RoiBox,
    pub mouth: RoiBox,
}

impl RoiBoxes {
    pub fn get(&self, c: Component) -> RoiBox {
        match c {
            Component::Eyes => self.eyes,
            Component::Nose => self.nose,
            Component::Mouth => self.mouth,
        }
    }

    /// Boxes for the same view rendered at `factor` times the resolution.
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |b: RoiBox| RoiBox {
            x0: b.x0 * factor,
            y0: b.y0 * factor,
            x1: b.x1 * factor,
            y1: b.y1 * factor,
        };
        Self {
            eyes: s(self.eyes),
            nose: s(self.nose),
            mouth: s(self.mouth),
        }
    }

    pub fn flip_horizontal(&self, width: usize) -> Self {
        Self {
            eyes: self.eyes.flip_horizontal(width),
            nose: self.nose.flip_horizontal(width),
            mouth: self.mouth.flip_horizontal(width),
        }
    }
}

fn crop_footprints(b: &RoiBox, width: usize, height: usize, size: usize) -> Vec<Bilinear> {
    let sx = b.width() / size as f64;
    let sy = b.height() / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for j in 0..size {
        for i in 0..size {
            let x = b.x0 + (i as f64 + 0.5) * sx - 0.5;
            let y = b.y0 + (j as f64 + 0.5) * sy - 0.5;
            out.push(Bilinear::clamped(width, height, x, y));
        }
    }
    out
}

fn check_box(b: &RoiBox, img: &Image) -> Result<()> {
    let ok = b.width() >= 1.0
        && b.height() >= 1.0
        && b.x0 >= 0.0
        && b.y0 >= 0.0
        && b.x1 <= img.width as f64
        && b.y1 <= img.height as f64;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "degenerate or out-of-bounds ROI box {:?} for a {}x{} image",
            <[f64; 4]>::from(*b),
            img.width,
            img.height
        )))
    }
}

/// Crops a box and bilinearly resamples it to `size x size`.
pub fn roi_crop_sized(img: &Image, b: &RoiBox, size: usize) -> Result<Image> {
    check_box(b, img)?;
    let feet = crop_footprints(b, img.width, img.height, size);
    let mut out = Image::new(size, size, img.channels);
    for (k, f) in feet.iter().enumerate() {
        f.sample(img, &mut out.data[k * img.channels..(k + 1) * img.channels]);
    }
    Ok(out)
}

pub fn roi_crop(img: &Image, boxes: &RoiBoxes, c: Component) -> Result<Image> {
    roi_crop_sized(img, &boxes.get(c), ROI_SIZE)
}

/// Adjoint of [`roi_crop_sized`]: scatters a crop gradient into `into`.
pub fn roi_crop_backward(grad: &Image, b: &RoiBox, into: &mut Image) {
    let feet = crop_footprints(b, into.width, into.height, grad.width);
    let ch = grad.channels;
    for (k, f) in feet.iter().enumerate() {
        f.splat(&grad.data[k * ch..(k + 1) * ch], into);
    }
}

/// All 3x3 patches, stride 1, flattened row-major with channels innermost.
fn patches(img: &Image) -> (Vec<f64>, usize, usize) {
    let dim = 9 * img.channels;
    let (pw, ph) = (img.width - 2, img.height - 2);
    let mut out = Vec::with_capacity(pw * ph * dim);
    for y in 0..ph {
        for x in 0..pw {
            for dy in 0..3 {
                for dx in 0..3 {
                    out.extend_from_slice(img.pixel(x + dx, y + dy));
                }
            }
        }
    }
    (out, pw * ph, dim)
}

fn patches_backward(g: &[f64], into: &mut Image) {
    let ch = into.channels;
    let pw = into.width - 2;
    let dim = 9 * ch;
    for (p, gp) in g.chunks(dim).enumerate() {
        let (x, y) = (p % pw, p / pw);
        let mut k = 0;
        for dy in 0..3 {
            for dx in 0..3 {
                for c in 0..ch {
                    let i = into.idx(x + dx, y + dy, c);
                    into.data[i] += gp[k];
                    k += 1;
                }
            }
        }
    }
}

/// Contextual loss between a source crop `x` and a target crop `y`.
///
/// Features are 3x3 patches centred by the target mean and compared by
/// cosine distance `d = 1 - cos`. Distances are normalised per source patch
/// by its nearest target distance, turned into affinities with a softmax
/// over targets at bandwidth `h`, and the loss is
/// `-log(mean_j max_i A_ij)`.
pub fn contextual_loss_with(x: &Image, y: &Image, h: f64, with_grad: bool) -> Result<Term> {
    x.check_same_shape(y, "contextual_loss")?;
    if x.width < 3 || x.height < 3 {
        return Err(Error::InvalidArgument("contextual_loss needs crops of at least 3x3".into()));
    }
    let (px, n, dim) = patches(x);
    let (py, _, _) = patches(y);
    let mut mean = vec![0.0; dim];
    for p in py.chunks(dim) {
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let normalise = |raw: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut unit = Vec::with_capacity(raw.len());
        let mut norms = Vec::with_capacity(n);
        for p in raw.chunks(dim) {
            let c: Vec<f64> = p.iter().zip(&mean).map(|(a, m)| a - m).collect();
            let nr = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(nr);
            unit.extend(c.iter().map(|v| v / nr));
        }
        (unit, norms)
    };
    let (ux, nx) = normalise(&px);
    let (uy, _) = normalise(&py);

    // d[i][j], row-major over source patches.
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        let xi = &ux[i * dim..(i + 1) * dim];
        for j in 0..n {
            let yj = &uy[j * dim..(j + 1) * dim];
            let dot: f64 = xi.iter().zip(yj).map(|(a, b)| a * b).sum();
            d[i * n + j] = (1.0 - dot).max(0.0);
        }
    }
    let mut argmin = vec![0usize; n];
    let mut dmin = vec![0.0; n];
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let row = &d[i * n..(i + 1) * n];
        let (k, m) = row
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc });
        argmin[i] = k;
        dmin[i] = m;
        let denom = m + CX_EPSILON;
        let zmax = (1.0 - m / denom) / h;
        let arow = &mut a[i * n..(i + 1) * n];
        let mut s = 0.0;
        for j in 0..n {
            let e = ((1.0 - row[j] / denom) / h - zmax).exp();
            arow[j] = e;
            s += e;
        }
        arow.iter_mut().for_each(|v| *v /= s);
    }
    let mut best = vec![0usize; n];
    let mut score = 0.0;
    for j in 0..n {
        let mut bi = 0;
        let mut bv = f64::NEG_INFINITY;
        for i in 0..n {
            let v = a[i * n + j];
            if v > bv {
                bv = v;
                bi = i;
            }
        }
        best[j] = bi;
        score += bv;
    }
    score /= n as f64;
    let value = -score.ln();
    if !with_grad {
        return Ok(Term { value, grad: None });
    }

    // dL/dA is nonzero only at each target's best source.
    let g_a = -1.0 / (n as f64 * score);
    let mut gd_tilde_rows = vec![0.0; n];
    let mut g_ux = vec![0.0; n * dim];
    let mut sources: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (j, &i) in best.iter().enumerate() {
        sources[i].push(j);
    }
    for i in 0..n {
        if sources[i].is_empty() {
            continue;
        }
        let arow = &a[i * n..(i + 1) * n];
        let drow = &d[i * n..(i + 1) * n];
        // dL/dz_ik = g_ik A_ik - A_ik * sum_j g_ij A_ij
        let inner: f64 = sources[i].iter().map(|&j| g_a * arow[j]).sum();
        let denom = dmin[i] + CX_EPSILON;
        let mut g_min = 0.0;
        let g_x = &mut g_ux[i * dim..(i + 1) * dim];
        for k in 0..n {
            let gz_k = -arow[k] * inner;
            gd_tilde_rows[k] = gz_k;
        }
        for &j in &sources[i] {
            gd_tilde_rows[j] += g_a * arow[j];
        }
        for k in 0..n {
            // z = (1 - d/denom)/h
            let gdt = -gd_tilde_rows[k] / h;
            g_min -= gdt * drow[k] / (denom * denom);
            let mut gd = gdt / denom;
            if k == argmin[i] {
                // folded in below once g_min is complete
                gd += 0.0;
            }
            if drow[k] > 0.0 || 1.0 - drow[k] <= 1.0 {
                // d = 1 - <x_i, y_k>
                let yk = &uy[k * dim..(k + 1) * dim];
                g_x.iter_mut().zip(yk).for_each(|(g, v)| *g -= gd * v);
            }
        }
        let k = argmin[i];
        let yk = &uy[k * dim..(k + 1) * dim];
        g_x.iter_mut().zip(yk).for_each(|(g, v)| *g -= g_min * v);
    }
    // Through the normalisation u = c / |c|.
    let mut g_raw = vec![0.0; n * dim];
    for i in 0..n {
        let u = &ux[i * dim..(i + 1) * dim];
        let g = &g_ux[i * dim..(i + 1) * dim];
        let proj: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        for t in 0..dim {
            g_raw[i * dim + t] = (g[t] - u[t] * proj) / nx[i];
        }
    }
    let mut grad = Image::new(x.width, x.height, x.channels);
    patches_backward(&g_raw, &mut grad);
    Ok(Term { value, grad: Some(grad) })
}

pub fn contextual_loss(x: &Image, y: &Image, with_grad: bool) -> Result<Term> {
    contextual_loss_with(x, y, CX_BANDWIDTH, with_grad)
}

/// Fraction of a box's pixels that the mask rejects.
pub fn box_invalid_fraction(b: &RoiBox, mask: &Mask) -> f64 {
    let mut total = 0usize;
    let mut bad = 0usize;
    for (x, y) in b.pixels(mask.width, mask.height) {
        total += 1;
        if !mask.get(x, y) {
            bad += 1;
        }
    }
    if total == 0 {
        1.0
    } else {
        bad as f64 / total as f64
    }
}

/// Sum over components of the contextual loss between ROI crops of renders
/// and mirror-side pseudo views, averaged over the bank entries. Components
/// whose box is more than half rejected by the pseudo's mask are skipped.
/// Returns one gradient per render.
pub fn symmetric_loss(
    renders: &[&Image],
    pseudos: &[&PseudoView],
    roi_size: usize,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Image>>)> {
    if renders.len() != pseudos.len() {
        return Err(Error::ShapeMismatch("symmetric_loss: renders vs pseudos".into()));
    }
    if renders.is_empty() {
        return Ok((0.0, with_grad.then(Vec::new)));
    }
    let scale = 1.0 / renders.len() as f64;
    let mut total = 0.0;
    let mut grads = with_grad.then(Vec::new);
    for (r, p) in renders.iter().zip(pseudos) {
        let mut g = Image::new(r.width, r.height, r.channels);
        if let Some(boxes) = &p.roi {
            for c in Component::ALL {
                let b = boxes.get(c);
                if box_invalid_fraction(&b, &p.mask) > 0.5 {
                    continue;
                }
                let x = roi_crop_sized(r, &b, roi_size)?;
                let y = roi_crop_sized(&p.image, &b, roi_size)?;
                let t = contextual_loss(&x, &y, with_grad)?;
                total += scale * t.value;
                if let Some(gc) = t.grad {
                    let gc = gc.map(|v| v * scale);
                    roi_crop_backward(&gc, &b, &mut g);
                }
            }
        }
        if let Some(gs) = grads.as_mut() {
            gs.push(g);
        }
    }
    Ok((total, grads))
}
