//! Image and depth metrics and the multi-view evaluation protocol.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{LatentCode, PriorDecoder, RenderSettings};
use crate::geometry::{mirror_pose, Intrinsics, Pose};
use crate::image::{Image, Mask};
use crate::losses::{l2, msgp};
use crate::pipeline::InversionResult;
use crate::synthhead::{load_dataset, SceneRecord};
use crate::warp::mirror_image;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    Ok(l2(a, b, mask, false)?.value)
}

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let t: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter of one channel; taps falling outside the image
/// are dropped and the rest renormalised.
fn blur(data: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() as isize / 2;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, &k) in taps.iter().enumerate() {
                    let o = t as isize - r;
                    let (sx, sy) = if horizontal { (x as isize + o, y as isize) } else { (x as isize, y as isize + o) };
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        continue;
                    }
                    acc += k * src[sy as usize * w + sx as usize];
                    norm += k;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(data, true), false)
}

/// Per-pixel luminance and contrast-structure SSIM maps of one channel.
pub fn ssim_maps(a: &[f64], b: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let taps = gaussian_taps();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = blur(a, w, h, &taps);
    let mu_b = blur(b, w, h, &taps);
    let aa = blur(&prod(a, a), w, h, &taps);
    let bb = blur(&prod(b, b), w, h, &taps);
    let ab = blur(&prod(a, b), w, h, &taps);
    let mut lum = vec![0.0; w * h];
    let mut cs = vec![0.0; w * h];
    for i in 0..w * h {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        lum[i] = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
        cs[i] = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
    }
    (lum, cs)
}

fn weighted_mean(v: &[f64], weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    if s == 0.0 {
        return 1.0;
    }
    v.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / s
}

/// Mean SSIM over channels and (masked) pixels.
pub fn ssim(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    let weights = mask_weights(a, mask)?;
    let mut total = 0.0;
    for c in 0..a.channels {
        let (l, cs) = ssim_maps(&a.channel(c).data, &b.channel(c).data, a.width, a.height);
        let m: Vec<f64> = l.iter().zip(&cs).map(|(x, y)| x * y).collect();
        total += weighted_mean(&m, &weights);
    }
    Ok(total / a.channels as f64)
}

fn mask_weights(a: &Image, mask: Option<&Mask>) -> Result<Vec<f64>> {
    match mask {
        Some(m) if m.width != a.width || m.height != a.height => {
            Err(Error::ShapeMismatch("mask does not match image".into()))
        }
        Some(m) => Ok(m.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()),
        None => Ok(vec![1.0; a.width * a.height]),
    }
}

/// `1 - MS-SSIM` over five scales. Negative contrast-structure terms are
/// clamped to 0 before exponentiation, so the result lies in `[0, 1]` for
/// images in `[0, 1]`.
pub fn ms_ssim_dissimilarity(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    a.check_same_shape(b, "ms_ssim")?;
    let min_side = 1 << (MS_SSIM_WEIGHTS.len());
    if a.width < min_side || a.height < min_side {
        return Err(Error::InvalidArgument(format!(
            "MS-SSIM needs images of at least {min_side}x{min_side}, got {}x{}",
            a.width, a.height
        )));
    }
    let mut weights = mask_weights(a, mask)?;
    let mut pa = a.clone();
    let mut pb = b.clone();
    let mut per_channel = vec![1.0; a.channels];
    for (s, &e) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let last = s + 1 == MS_SSIM_WEIGHTS.len();
        for (c, acc) in per_channel.iter_mut().enumerate() {
            let (l, cs) = ssim_maps(&pa.channel(c).data, &pb.channel(c).data, pa.width, pa.height);
            let v = if last {
                let m: Vec<f64> = l.iter().zip(&cs).map(|(x, y)| x * y).collect();
                weighted_mean(&m, &weights)
            } else {
                weighted_mean(&cs, &weights)
            };
            *acc *= v.max(0.0).powf(e);
        }
        if !last {
            weights = downsample_weights(&weights, pa.width, pa.height);
            pa = pa.downsample2();
            pb = pb.downsample2();
        }
    }
    Ok(1.0 - per_channel.iter().sum::<f64>() / a.channels as f64)
}

fn downsample_weights(w: &[f64], width: usize, height: usize) -> Vec<f64> {
    let (nw, nh) = (width / 2, height / 2);
    let mut out = vec![0.0; nw * nh];
    for y in 0..nh {
        for x in 0..nw {
            out[y * nw + x] = 0.25
                * (w[2 * y * width + 2 * x]
                    + w[2 * y * width + 2 * x + 1]
                    + w[(2 * y + 1) * width + 2 * x]
                    + w[(2 * y + 1) * width + 2 * x + 1]);
        }
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// RMS depth difference over the foreground after removing the median offset.
pub fn depth_error(pred: &Image, gt: &Image, foreground: &Mask) -> Result<f64> {
    pred.check_same_shape(gt, "depth_error")?;
    if foreground.width != gt.width || foreground.height != gt.height {
        return Err(Error::ShapeMismatch("depth_error: mask does not match depth".into()));
    }
    let idx: Vec<usize> = (0..gt.data.len()).filter(|&i| foreground.data[i]).collect();
    if idx.is_empty() {
        return Err(Error::InvalidArgument("depth_error: empty foreground".into()));
    }
    let offset = median(idx.iter().map(|&i| gt.data[i] - pred.data[i]).collect());
    let ss: f64 = idx
        .iter()
        .map(|&i| (pred.data[i] + offset - gt.data[i]).powi(2))
        .sum();
    Ok((ss / idx.len() as f64).sqrt())
}

/// msgp between the render at the mirror pose and the flipped input, over
/// the given foreground of the mirrored view.
pub fn flip_consistency(
    model: &PriorDecoder,
    w: &LatentCode,
    pose_s: &Pose,
    input: &Image,
    mirrored_foreground: Option<&Mask>,
    k: &Intrinsics,
    settings: &RenderSettings,
) -> Result<f64> {
    let field = model.modulate(w)?;
    let out = field.render(&mirror_pose(pose_s), k, None, settings);
    Ok(msgp(&out.rgb, &mirror_image(input), mirrored_foreground, false)?.value)
}

/// Metrics of one evaluation view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scene: usize,
    pub input_view: usize,
    pub eval_view: usize,
    pub method: String,
    pub input_yaw_deg: f64,
    pub eval_yaw_deg: f64,
    pub seen: bool,
    pub mse: f64,
    pub msgp: f64,
    pub ms_ssim: f64,
    pub depth_error: f64,
}

/// Per-inversion summary: flip consistency plus means over unseen views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub scene: usize,
    pub input_view: usize,
    pub method: String,
    pub input_yaw_deg: f64,
    pub flip_consistency: f64,
    pub source_msgp: f64,
    pub novel_msgp: f64,
    pub novel_mse: f64,
    pub novel_ms_ssim: f64,
    pub novel_depth_error: f64,
}

/// Means over every row of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub rows: usize,
    pub mse: f64,
    pub msgp: f64,
    pub ms_ssim: f64,
    pub depth_error: f64,
    pub flip_consistency: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summaries: Vec<InputSummary>,
    pub aggregates: Vec<Aggregate>,
    pub skipped: Vec<String>,
    pub notes: Vec<String>,
}

const SUBSTITUTION_NOTE: &str = "flip_consistency stands in for a face-identity score and GT depth_error for a \
    pose/shape score; msgp stands in for a learned perceptual distance";

/// Renders every dataset view of `record` with the inverted model and
/// compares it against ground truth.
pub fn evaluate_inversion(
    model: &PriorDecoder,
    w: &LatentCode,
    record: &SceneRecord,
    scene: usize,
    input_view: usize,
    method: &str,
    settings: &RenderSettings,
) -> Result<(Vec<EvalRow>, InputSummary)> {
    let k = record.intrinsics;
    let input = record
        .views
        .get(input_view)
        .ok_or_else(|| Error::InvalidArgument(format!("scene {scene} has no view {input_view}")))?;
    let field = model.modulate(w)?;
    let rows = record
        .views
        .par_iter()
        .enumerate()
        .map(|(v, view)| -> Result<EvalRow> {
            let out = field.render(&view.pose, &k, None, settings);
            Ok(EvalRow {
                scene,
                input_view,
                eval_view: v,
                method: method.to_string(),
                input_yaw_deg: input.yaw.to_degrees(),
                eval_yaw_deg: view.yaw.to_degrees(),
                seen: v == input_view,
                mse: mse(&out.rgb, &view.rgb, None)?,
                msgp: msgp(&out.rgb, &view.rgb, None, false)?.value,
                ms_ssim: ms_ssim_dissimilarity(&out.rgb, &view.rgb, None)?,
                depth_error: depth_error(&out.depth, &view.depth, &view.mask)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fc = flip_consistency(
        model,
        w,
        &input.pose,
        &input.rgb,
        Some(&input.mask.flip_horizontal()),
        &k,
        settings,
    )?;
    let novel: Vec<&EvalRow> = rows.iter().filter(|r| !r.seen).collect();
    let mean = |f: fn(&EvalRow) -> f64| -> f64 {
        if novel.is_empty() {
            0.0
        } else {
            novel.iter().map(|r| f(r)).sum::<f64>() / novel.len() as f64
        }
    };
    let summary = InputSummary {
        scene,
        input_view,
        method: method.to_string(),
        input_yaw_deg: input.yaw.to_degrees(),
        flip_consistency: fc,
        source_msgp: rows[input_view].msgp,
        novel_msgp: mean(|r| r.msgp),
        novel_mse: mean(|r| r.mse),
        novel_ms_ssim: mean(|r| r.ms_ssim),
        novel_depth_error: mean(|r| r.depth_error),
    };
    Ok((rows, summary))
}

impl EvalReport {
    pub fn push(&mut self, rows: Vec<EvalRow>, summary: InputSummary) {
        self.rows.extend(rows);
        self.summaries.push(summary);
    }

    /// Recomputes per-method means from the rows and summaries.
    pub fn finish(&mut self) {
        let mut methods: Vec<String> = self.rows.iter().map(|r| r.method.clone()).collect();
        methods.sort();
        methods.dedup();
        self.aggregates = methods
            .into_iter()
            .map(|m| {
                let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.method == m).collect();
                let sums: Vec<&InputSummary> = self.summaries.iter().filter(|s| s.method == m).collect();
                let n = rows.len() as f64;
                let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
                Aggregate {
                    method: m,
                    rows: rows.len(),
                    mse: mean(|r| r.mse),
                    msgp: mean(|r| r.msgp),
                    ms_ssim: mean(|r| r.ms_ssim),
                    depth_error: mean(|r| r.depth_error),
                    flip_consistency: if sums.is_empty() {
                        0.0
                    } else {
                        sums.iter().map(|s| s.flip_consistency).sum::<f64>() / sums.len() as f64
                    },
                }
            })
            .collect();
        if !self.notes.iter().any(|n| n == SUBSTITUTION_NOTE) {
            self.notes.push(SUBSTITUTION_NOTE.to_string());
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "scene,input_view,eval_view,method,input_yaw_deg,eval_yaw_deg,seen,mse,msgp,ms_ssim_dissimilarity,depth_error\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.scene,
                r.input_view,
                r.eval_view,
                r.method,
                r.input_yaw_deg,
                r.eval_yaw_deg,
                r.seen as u8,
                r.mse,
                r.msgp,
                r.ms_ssim,
                r.depth_error
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Side-by-side strip: ground truth on top, render below, one column per view.
pub fn contact_sheet(gt: &[Image], renders: &[Image]) -> Result<Image> {
    let first = gt
        .first()
        .ok_or_else(|| Error::InvalidArgument("contact sheet needs at least one view".into()))?;
    let (w, h) = (first.width, first.height);
    if gt.len() != renders.len() || gt.iter().chain(renders).any(|i| i.width != w || i.height != h || i.channels != 3) {
        return Err(Error::ShapeMismatch("contact sheet images must share one RGB shape".into()));
    }
    let mut sheet = Image::filled(w * gt.len(), 2 * h, 3, 1.0);
    for (col, (a, b)) in gt.iter().zip(renders).enumerate() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    sheet.set(col * w + x, y, c, a.get(x, y, c));
                    sheet.set(col * w + x, h + y, c, b.get(x, y, c));
                }
            }
        }
    }
    Ok(sheet)
}

/// Directory holding one inversion of a results tree.
pub fn result_dir(root: &Path, method: &str, scene: usize, view: usize) -> PathBuf {
    root.join(method).join(format!("scene_{scene:03}")).join(format!("view_{view:03}"))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.spi";

/// Evaluates every inversion under `results/<method>/scene_XXX/view_YYY/`
/// against the dataset. Missing results are skipped and recorded. `seed`
/// fixes the renderer's stratification.
pub fn run_eval(
    results: &Path,
    dataset: &Path,
    input_views: &[usize],
    resolution: Option<usize>,
    seed: u64,
) -> Result<EvalReport> {
    let records = load_dataset(dataset)?;
    let mut methods: Vec<String> = std::fs::read_dir(results)
        .map_err(|e| Error::io(results, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    methods.sort();
    let mut report = EvalReport::default();
    let settings = RenderSettings::default().with_seed(seed);
    for method in &methods {
        for (si, rec) in records.iter().enumerate() {
            let rec = match resolution {
                Some(r) => rec.resized(r)?,
                None => rec.clone(),
            };
            for &v in input_views {
                let dir = result_dir(results, method, si, v);
                let ckpt = dir.join(CHECKPOINT_FILE);
                if !ckpt.exists() {
                    let msg = format!("missing result {}", ckpt.display());
                    log::warn!("{msg}");
                    report.skipped.push(msg);
                    continue;
                }
                let (model, w, _) = InversionResult::load_checkpoint(&ckpt)?;
                let (rows, summary) = evaluate_inversion(&model, &w, &rec, si, v, method, &settings)?;
                let field = model.modulate(&w)?;
                let renders: Vec<Image> = rec
                    .views
                    .iter()
                    .map(|view| field.render(&view.pose, &rec.intrinsics, None, &settings).rgb)
                    .collect();
                let gts: Vec<Image> = rec.views.iter().map(|v| v.rgb.clone()).collect();
                crate::io::write_png(&dir.join("contact_sheet.png"), &contact_sheet(&gts, &renders)?)?;
                report.push(rows, summary);
            }
        }
    }
    report.finish();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, c, |_, _, _| rng.random::<f64>())
    }

    /// Direct 2D window sums with the truncated, renormalised Gaussian.
    fn ssim_oracle(a: &Image, b: &Image, x: usize, y: usize) -> (f64, f64) {
        let r = (SSIM_WINDOW / 2) as isize;
        let g = |d: isize| (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        let mut wsum = 0.0;
        let (mut ma, mut mb) = (0.0, 0.0);
        let mut taps = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let (sx, sy) = (x as isize + dx, y as isize + dy);
                if sx < 0 || sy < 0 || sx >= a.width as isize || sy >= a.height as isize {
                    continue;
                }
                let wt = g(dx) * g(dy);
                let (p, q) = (a.get(sx as usize, sy as usize, 0), b.get(sx as usize, sy as usize, 0));
                taps.push((wt, p, q));
                wsum += wt;
                ma += wt * p;
                mb += wt * q;
            }
        }
        ma /= wsum;
        mb /= wsum;
        let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
        for (wt, p, q) in taps {
            va += wt * (p - ma).powi(2);
            vb += wt * (q - mb).powi(2);
            cov += wt * (p - ma) * (q - mb);
        }
        va /= wsum;
        vb /= wsum;
        cov /= wsum;
        let l = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
        let cs = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
        (l, cs)
    }

    #[test]
    fn ssim_maps_match_direct_formula() {
        let a = random_image(32, 32, 1, 1);
        let b = random_image(32, 32, 1, 2);
        let (l, cs) = ssim_maps(&a.data, &b.data, 32, 32);
        for &(x, y) in &[(0, 0), (5, 17), (31, 31), (16, 0), (20, 9)] {
            let (lo, co) = ssim_oracle(&a, &b, x, y);
            assert!((l[y * 32 + x] - lo).abs() < 1e-9);
            assert!((cs[y * 32 + x] - co).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_images_score_zero() {
        let a = random_image(32, 32, 3, 3);
        assert_eq!(mse(&a, &a, None).unwrap(), 0.0);
        assert!(ms_ssim_dissimilarity(&a, &a, None).unwrap().abs() < 1e-12);
        assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverted_contrast_is_near_maximal() {
        let a = Image::from_fn(32, 32, 1, |x, y, _| if (x / 4 + y / 4) % 2 == 0 { 0.9 } else { 0.1 });
        let b = a.map(|v| 1.0 - v);
        let d = ms_ssim_dissimilarity(&a, &b, None).unwrap();
        assert!(d > 0.95, "{d}");
        let noise = random_image(32, 32, 1, 4);
        assert!(d >= ms_ssim_dissimilarity(&a, &noise, None).unwrap());
    }

    #[test]
    fn small_images_are_rejected() {
        let a = Image::new(16, 16, 3);
        assert!(ms_ssim_dissimilarity(&a, &a, None).is_err());
    }

    #[test]
    fn depth_error_oracles() {
        let fg = Mask::filled(8, 8, true);
        let head = Image::from_fn(8, 8, 1, |x, y, _| {
            let (u, v) = (x as f64 - 3.5, y as f64 - 3.5);
            2.0 + 0.02 * (u * u + v * v)
        });
        assert_eq!(depth_error(&head, &head, &fg).unwrap(), 0.0);
        let shifted = head.map(|d| d + 0.37);
        assert!(depth_error(&shifted, &head, &fg).unwrap() < 1e-12);
        // Plane at the median of the head: residuals are the head's deviation
        // from its own median.
        let mut vals: Vec<f64> = head.data.clone();
        vals.sort_by(f64::total_cmp);
        let med = 0.5 * (vals[31] + vals[32]);
        let oracle = (head.data.iter().map(|d| (d - med).powi(2)).sum::<f64>() / 64.0).sqrt();
        let plane = Image::filled(8, 8, 1, 5.0);
        assert!((depth_error(&plane, &head, &fg).unwrap() - oracle).abs() < 1e-12);
        assert!(depth_error(&plane, &head, &Mask::filled(8, 8, false)).is_err());
    }

    #[test]
    fn masked_metrics_ignore_background() {
        let a = random_image(32, 32, 3, 5);
        let mut b = a.clone();
        let m = Mask::from_fn(32, 32, |x, _| x < 16);
        for y in 0..32 {
            for x in 16..32 {
                b.set(x, y, 0, 0.0);
            }
        }
        assert_eq!(mse(&a, &b, Some(&m)).unwrap(), 0.0);
        assert!(mse(&a, &b, None).unwrap() > 0.0);
    }

    #[test]
    fn report_aggregates_are_means() {
        let row = |v: usize, e: f64| EvalRow {
            scene: 0,
            input_view: 0,
            eval_view: v,
            method: "m".into(),
            input_yaw_deg: 0.0,
            eval_yaw_deg: 0.0,
            seen: v == 0,
            mse: e,
            msgp: e,
            ms_ssim: e,
            depth_error: e,
        };
        let mut r = EvalReport::default();
        let s = InputSummary {
            scene: 0,
            input_view: 0,
            method: "m".into(),
            input_yaw_deg: 0.0,
            flip_consistency: 0.5,
            source_msgp: 1.0,
            novel_msgp: 3.0,
            novel_mse: 3.0,
            novel_ms_ssim: 3.0,
            novel_depth_error: 3.0,
        };
        r.push(vec![row(0, 1.0), row(1, 3.0)], s);
        r.finish();
        assert_eq!(r.aggregates.len(), 1);
        assert_eq!(r.aggregates[0].msgp, 2.0);
        assert_eq!(r.to_csv().lines().count(), 3);
    }
}
