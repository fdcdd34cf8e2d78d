//! Dense planar-interleaved float images and binary masks.

use crate::error::{Error, Result};

/// Row-major image with interleaved channels: index `(y * width + x) * channels + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.idx(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Horizontal flip: column `x` becomes column `W-1-x`.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::new(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.idx(self.width - 1 - x, y, 0);
                let dst = out.idx(x, y, 0);
                out.data[dst..dst + self.channels].copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        out
    }

    /// 2x2 box-filter downsampling; an odd trailing row/column is dropped.
    pub fn downsample2(&self) -> Image {
        let (w, h) = (self.width / 2, self.height / 2);
        Image::from_fn(w, h, self.channels, |x, y, c| {
            0.25 * (self.get(2 * x, 2 * y, c)
                + self.get(2 * x + 1, 2 * y, c)
                + self.get(2 * x, 2 * y + 1, c)
                + self.get(2 * x + 1, 2 * y + 1, c))
        })
    }

    /// Box-downsamples a square image to `side`, which must divide its width.
    pub fn box_resized(&self, side: usize) -> Result<Image> {
        if self.width == side && self.height == side {
            return Ok(self.clone());
        }
        if self.width != self.height || side == 0 || !self.width.is_multiple_of(side) {
            return Err(Error::ShapeMismatch(format!(
                "cannot box-resize {}x{} to {side}x{side}",
                self.width, self.height
            )));
        }
        Ok(self.downsample(self.width / side))
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Image {
        assert!(factor >= 1);
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        Image::from_fn(w, h, self.channels, |x, y, c| {
            let mut s = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    s += self.get(factor * x + dx, factor * y + dy, c);
                }
            }
            s * norm
        })
    }

    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    /// Multiplies every channel of each pixel by the mask value.
    pub fn masked(&self, mask: &Mask) -> Image {
        let mut out = self.clone();
        for (p, &m) in mask.data.iter().enumerate() {
            if !m {
                out.data[p * self.channels..(p + 1) * self.channels].fill(0.0);
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamped01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Bilinear footprint of a continuous pixel position, clamped to the image.
#[derive(Clone, Copy, Debug)]
pub struct Bilinear {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
}

impl Bilinear {
    /// Footprint at `(x, y)` after clamping into `[0, W-1] x [0, H-1]`.
    pub fn clamped(width: usize, height: usize, x: f64, y: f64) -> Self {
        let xc = x.clamp(0.0, (width - 1) as f64);
        let yc = y.clamp(0.0, (height - 1) as f64);
        let x0 = (xc.floor() as usize).min(width.saturating_sub(2));
        let y0 = (yc.floor() as usize).min(height.saturating_sub(2));
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        Self {
            x0,
            y0,
            x1,
            y1,
            fx: xc - x0 as f64,
            fy: yc - y0 as f64,
        }
    }

    #[inline]
    pub fn taps(&self) -> [(usize, usize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.x0, self.y0, (1.0 - fx) * (1.0 - fy)),
            (self.x1, self.y0, fx * (1.0 - fy)),
            (self.x0, self.y1, (1.0 - fx) * fy),
            (self.x1, self.y1, fx * fy),
        ]
    }

    pub fn sample(&self, img: &Image, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (x, y, w) in self.taps() {
            if w != 0.0 {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * img.get(x, y, c);
                }
            }
        }
    }

    /// Adjoint of [`sample`](Self::sample).
    pub fn splat(&self, grad: &[f64], into: &mut Image) {
        for (x, y, w) in self.taps() {
            if w != 0.0 {
                for (c, g) in grad.iter().enumerate() {
                    let i = into.idx(x, y, c);
                    into.data[i] += w * g;
                }
            }
        }
    }
}

/// Binary per-pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    /// Pixels whose single-channel value exceeds `threshold`.
    pub fn threshold(img: &Image, threshold: f64) -> Self {
        Self::from_fn(img.width, img.height, |x, y| img.get(x, y, 0) > threshold)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    /// Majority vote over each box of pixels.
    pub fn box_resized(&self, side: usize) -> Result<Mask> {
        Ok(Mask::threshold(&self.to_image().box_resized(side)?, 0.5))
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn to_image(&self) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| if self.get(x, y) { 1.0 } else { 0.0 })
    }
}
