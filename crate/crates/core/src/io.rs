//! PNG and PFM reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel image as 8-bit PNG, clamping to `[0, 1]`.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let res = match img.channels {
        1 => image::GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        3 => image::RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        c => return Err(Error::InvalidArgument(format!("cannot write a {c}-channel PNG"))),
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(Error::format(path, e.to_string())),
        None => Err(Error::format(path, "buffer size mismatch")),
    }
}

/// Reads a PNG as RGB with values in `[0, 1]`.
pub fn read_png_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| open_error(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Image::from_vec(
        w as usize,
        h as usize,
        3,
        img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
    )
}

pub fn write_mask_png(path: &Path, m: &Mask) -> Result<()> {
    write_png(path, &m.to_image())
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| open_error(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask {
        width: w as usize,
        height: h as usize,
        data: img.into_raw().into_iter().map(|b| b >= 128).collect(),
    })
}

fn open_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// Writes a single-channel little-endian float PFM (rows stored bottom-up).
pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::InvalidArgument("PFM output expects one channel".into()));
    }
    let mut buf = format!("Pf\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            buf.extend_from_slice(&(img.get(x, y, 0) as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    // Three whitespace-terminated header tokens lines: type, size, scale.
    let mut pos = 0;
    let mut line = || -> Result<String> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        let s = String::from_utf8_lossy(&bytes[pos..pos + end]).trim().to_string();
        pos += end + 1;
        Ok(s)
    };
    let kind = line()?;
    let channels = match kind.as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("missing PFM magic")),
    };
    let dims = line()?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (w, h) = match (it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h))) => (w, h),
        _ => return Err(bad("malformed dimensions")),
    };
    let scale: f64 = line()?.parse().map_err(|_| bad("malformed scale"))?;
    let little = scale < 0.0;
    let data = &bytes[pos..];
    let n = w * h * channels;
    if data.len() < 4 * n {
        return Err(bad("truncated pixel data"));
    }
    let mut img = Image::new(w, h, channels);
    for (i, chunk) in data[..4 * n].chunks_exact(4).enumerate() {
        let arr = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(arr) } else { f32::from_be_bytes(arr) };
        let (p, c) = (i / channels, i % channels);
        let (x, y) = (p % w, h - 1 - p / w);
        img.set(x, y, c, v as f64);
    }
    Ok(img)
}
