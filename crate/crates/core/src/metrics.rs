//! Full-reference quality metrics.

use std::fmt::Write as _;

use crate::error::{input_err, Error, Result};
use crate::synthdata::DefectMask;
use crate::volume::FrameVolume;

/// Reported for identical inputs instead of infinity.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_dims(a: &FrameVolume, b: &FrameVolume) -> Result<()> {
    if !a.same_dims(b) {
        return Err(input_err!("metric inputs differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

fn psnr_of(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Mean over frames of the per-frame PSNR (peak 1). With a mask, only
/// masked pixels count and frames without any masked pixel are skipped.
pub fn psnr(a: &FrameVolume, b: &FrameVolume, mask: Option<&DefectMask>) -> Result<f64> {
    check_dims(a, b)?;
    let (n, h, w, c) = a.dims();
    if let Some(m) = mask {
        if m.dims() != (n, h, w) {
            return Err(input_err!("mask {:?} does not match frames {:?}", m.dims(), (n, h, w)));
        }
    }
    let mut total = 0.0;
    let mut frames = 0usize;
    for f in 0..n {
        let (fa, fb) = (a.frame(f), b.frame(f));
        let mut sq = 0.0;
        let mut count = 0usize;
        for p in 0..h * w {
            if mask.is_some_and(|m| m.frame(f)[p] == 0) {
                continue;
            }
            for ch in 0..c {
                let d = f64::from(fa[p * c + ch]) - f64::from(fb[p * c + ch]);
                sq += d * d;
            }
            count += c;
        }
        if count > 0 {
            total += psnr_of(sq / count as f64);
            frames += 1;
        }
    }
    if frames == 0 {
        return Err(Error::UndefinedMetric("mask selects no pixels".into()));
    }
    Ok(total / frames as f64)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..k).map(|i| g[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..k).map(|i| g[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

fn plane(v: &FrameVolume, f: usize) -> Vec<f64> {
    let frame = v.frame(f);
    if v.channels() == 3 {
        frame.chunks_exact(3).map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])).collect()
    } else {
        frame.iter().map(|&x| f64::from(x)).collect()
    }
}

/// Mean SSIM over frames on luminance, Gaussian 11x11 window, valid region.
pub fn ssim(a: &FrameVolume, b: &FrameVolume) -> Result<f64> {
    check_dims(a, b)?;
    let (n, h, w, _) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(input_err!("frames {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"));
    }
    let g = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for f in 0..n {
        let (x, y) = (plane(a, f), plane(b, f));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &g));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub psnr_full: f64,
    /// `None` when the clip has no defect pixels.
    pub psnr_masked: Option<f64>,
    pub ssim_full: f64,
}

impl ClipMetrics {
    pub fn compute(clip_id: &str, restored: &FrameVolume, clean: &FrameVolume, mask: &DefectMask) -> Result<Self> {
        let psnr_masked = match psnr(restored, clean, Some(mask)) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            clip_id: clip_id.to_string(),
            psnr_full: psnr(restored, clean, None)?,
            psnr_masked,
            ssim_full: ssim(restored, clean)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub clips: Vec<ClipMetrics>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "clip_id,psnr_full,psnr_masked,ssim_full";

    pub fn mean_psnr_full(&self) -> f64 {
        mean(self.clips.iter().map(|c| c.psnr_full))
    }

    /// Over clips that have defect pixels.
    pub fn mean_psnr_masked(&self) -> f64 {
        mean(self.clips.iter().filter_map(|c| c.psnr_masked))
    }

    pub fn mean_ssim_full(&self) -> f64 {
        mean(self.clips.iter().map(|c| c.ssim_full))
    }

    /// Rows sorted by clip id, then a `mean` row; undefined values are empty.
    pub fn to_csv(&self) -> String {
        let mut clips = self.clips.clone();
        clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        let mut s = format!("{}\n", Self::CSV_HEADER);
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for c in &clips {
            let _ = writeln!(s, "{},{:.6},{},{:.6}", c.clip_id, c.psnr_full, opt(c.psnr_masked), c.ssim_full);
        }
        if !clips.is_empty() {
            let masked = self.mean_psnr_masked();
            let _ = writeln!(
                s,
                "mean,{:.6},{},{:.6}",
                self.mean_psnr_full(),
                opt(masked.is_finite().then_some(masked)),
                self.mean_ssim_full()
            );
        }
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}
