//! PSNR/SSIM on the luminance channel, with border shaving and dataset
//! aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{list_pngs, Image};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalProtocol {
    /// Pixels removed from each border before measuring.
    pub shave: usize,
    /// Measure on BT.601 luma instead of all channels.
    pub y_only: bool,
}

impl EvalProtocol {
    pub fn for_scale(scale: usize) -> Self {
        EvalProtocol {
            shave: scale,
            y_only: true,
        }
    }
}

/// BT.601 studio-swing luma of a unit-range RGB image, in unit range
/// (`[16/255, 235/255]`).
pub fn rgb_to_y(img: &Image) -> Result<Image> {
    if img.channels() != 3 {
        return Err(Error::ChannelMismatch {
            op: "rgb_to_y",
            expected: 3,
            actual: img.channels(),
        });
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| {
            ((16.0 + 65.481 * r as f64 + 128.553 * g as f64 + 24.966 * b as f64) / 255.0) as f32
        })
        .collect();
    Image::from_vec(1, img.height(), img.width(), data)
}

fn same_dims(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims("mse", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len().max(1) as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a single plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, peak: f64) -> f64 {
    let win = gaussian_window();
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&a, h, w, &win);
    let mu_b = filter_valid(&b, h, w, &win);
    let aa = filter_valid(&prod(&a, &a), h, w, &win);
    let bb = filter_valid(&prod(&b, &b), h, w, &win);
    let ab = filter_valid(&prod(&a, &b), h, w, &win);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / mu_a.len() as f64
}

/// Mean SSIM over 11x11 Gaussian windows (sigma 1.5) fully inside the
/// image, for unit-range values. Multi-channel images average the
/// per-channel scores.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims("ssim", a, b)?;
    let (c, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let total: f64 = (0..c).map(|ch| ssim_plane(a.plane(ch), b.plane(ch), h, w, 1.0)).sum();
    Ok(total / c as f64)
}

/// PSNR and SSIM of one SR/HR pair. Both are rounded to 8-bit levels
/// first; the SR image may be smaller than the HR image by less than the
/// scale (HR is cropped to match).
pub fn evaluate_pair(sr: &Image, hr: &Image, protocol: &EvalProtocol) -> Result<(f64, f64)> {
    let (a, b) = prepare_pair(sr, hr, protocol)?;
    Ok((psnr(&a, &b, 1.0)?, ssim(&a, &b)?))
}

/// PSNR alone under the same protocol as [`evaluate_pair`]; usable on
/// images too small for the SSIM window.
pub fn evaluate_psnr(sr: &Image, hr: &Image, protocol: &EvalProtocol) -> Result<f64> {
    let (a, b) = prepare_pair(sr, hr, protocol)?;
    psnr(&a, &b, 1.0)
}

fn prepare_pair(sr: &Image, hr: &Image, protocol: &EvalProtocol) -> Result<(Image, Image)> {
    let hr = if hr.dims() != sr.dims() && sr.height() <= hr.height() && sr.width() <= hr.width() {
        hr.crop(0, 0, sr.height(), sr.width())?
    } else {
        hr.clone()
    };
    same_dims("evaluate", sr, &hr)?;
    let (mut a, mut b) = (sr.quantized(), hr.quantized());
    if protocol.y_only && a.channels() == 3 {
        a = rgb_to_y(&a)?;
        b = rgb_to_y(&b)?;
    }
    if protocol.shave > 0 {
        a = a.shave(protocol.shave)?;
        b = b.shave(protocol.shave)?;
    }
    Ok((a, b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn from_scores(protocol: EvalProtocol, images: Vec<ImageScore>) -> Self {
        let n = images.len().max(1) as f64;
        let mean_psnr = images.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|s| s.ssim).sum::<f64>() / n;
        EvalReport {
            protocol,
            images,
            mean_psnr,
            mean_ssim,
        }
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self.images.iter().map(|i| i.name.len()).max().unwrap_or(4).max(4);
        let _ = writeln!(
            s,
            "# shave={} y_only={} images={}",
            self.protocol.shave,
            self.protocol.y_only,
            self.images.len()
        );
        for img in &self.images {
            let _ = writeln!(s, "{:<width$}  {:>8.4}  {:.4}", img.name, img.psnr, img.ssim);
        }
        let _ = writeln!(s, "{:<width$}  {:>8.4}  {:.4}", "mean", self.mean_psnr, self.mean_ssim);
        s
    }

    /// One `key=value` record per image plus a final `mean` record.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for img in &self.images {
            let _ = writeln!(s, "record=image name={} psnr={} ssim={}", img.name, img.psnr, img.ssim);
        }
        let _ = writeln!(
            s,
            "record=mean name=mean psnr={} ssim={} count={} shave={} y_only={}",
            self.mean_psnr,
            self.mean_ssim,
            self.images.len(),
            self.protocol.shave,
            self.protocol.y_only
        );
        s
    }
}

fn stems(paths: &[std::path::PathBuf]) -> BTreeMap<String, std::path::PathBuf> {
    paths
        .iter()
        .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p.clone())))
        .collect()
}

/// Scores every PNG in `sr_dir` against the same-named PNG in `hr_dir`,
/// in file-name order.
pub fn evaluate_dataset(sr_dir: &Path, hr_dir: &Path, protocol: &EvalProtocol) -> Result<EvalReport> {
    let sr = stems(&list_pngs(sr_dir)?);
    let hr = stems(&list_pngs(hr_dir)?);
    let mut unpaired: Vec<String> = sr
        .keys()
        .filter(|k| !hr.contains_key(*k))
        .map(|k| format!("{k} (no HR)"))
        .collect();
    unpaired.extend(hr.keys().filter(|k| !sr.contains_key(*k)).map(|k| format!("{k} (no SR)")));
    if !unpaired.is_empty() {
        return Err(Error::Unpaired(unpaired));
    }
    let mut scores = Vec::with_capacity(sr.len());
    for (name, sr_path) in &sr {
        let sr_img = Image::load_png(sr_path)?;
        let hr_img = Image::load_png(&hr[name])?;
        let (p, s) = evaluate_pair(&sr_img, &hr_img, protocol)?;
        scores.push(ImageScore {
            name: name.clone(),
            psnr: p,
            ssim: s,
        });
    }
    Ok(EvalReport::from_scores(*protocol, scores))
}
