//! Procedural film-defect templates.
//!
//! Dust is drawn as soft disk splats, burns as large soft ellipses and
//! scratches as vertical random walks. Templates carry per-frame opacity only;
//! colour is applied when compositing.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{input_err, Result};
use crate::rng::PortableRng;

/// Largest fraction of a frame a single template may cover.
pub const MAX_SUPPORT_FRACTION: f32 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DefectKind {
    SparseDust,
    IntensiveDust,
    CigaretteBurn,
    FlickerScratch,
    ConstantScratch,
}

impl DefectKind {
    pub const ALL: [DefectKind; 5] = [
        DefectKind::SparseDust,
        DefectKind::IntensiveDust,
        DefectKind::CigaretteBurn,
        DefectKind::FlickerScratch,
        DefectKind::ConstantScratch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefectKind::SparseDust => "sparse_dust",
            DefectKind::IntensiveDust => "intensive_dust",
            DefectKind::CigaretteBurn => "cigarette_burn",
            DefectKind::FlickerScratch => "flicker_scratch",
            DefectKind::ConstantScratch => "constant_scratch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefectTemplate {
    /// Opacity in [0,1], laid out `[frames, height, width]`.
    pub alpha: Vec<f32>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub color: [f32; 3],
    pub kind: DefectKind,
}

impl DefectTemplate {
    pub fn new(
        alpha: Vec<f32>,
        frames: usize,
        height: usize,
        width: usize,
        color: [f32; 3],
        kind: DefectKind,
    ) -> Result<Self> {
        if alpha.len() != frames * height * width {
            return Err(input_err!("alpha length does not match template dims"));
        }
        if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(input_err!("template alpha outside [0,1]"));
        }
        if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(input_err!("template colour outside [0,1]"));
        }
        let t = Self { alpha, frames, height, width, color, kind };
        for f in 0..frames {
            let frac = t.support_fraction(f);
            if frac >= MAX_SUPPORT_FRACTION {
                return Err(input_err!(
                    "template frame {f} covers {:.1}% of pixels",
                    frac * 100.0
                ));
            }
        }
        Ok(t)
    }

    pub fn frame_alpha(&self, f: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.alpha[f * n..(f + 1) * n]
    }

    pub fn support_fraction(&self, f: usize) -> f32 {
        let a = self.frame_alpha(f);
        a.iter().filter(|&&v| v > 0.0).count() as f32 / a.len() as f32
    }

    /// Zeroes every opacity at or below `threshold`, so that the compositing
    /// footprint coincides with the thresholded mask.
    pub fn prune(&mut self, threshold: f32) {
        for a in self.alpha.iter_mut() {
            if *a <= threshold {
                *a = 0.0;
            }
        }
    }

    /// Bilinear spatial resize of every frame.
    pub fn resized(&self, height: usize, width: usize) -> DefectTemplate {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut alpha = Vec::with_capacity(self.frames * height * width);
        for f in 0..self.frames {
            alpha.extend(
                crate::resample::resize(self.frame_alpha(f), self.height, self.width, 1, height, width)
                    .into_iter()
                    .map(|v| v.clamp(0.0, 1.0)),
            );
        }
        DefectTemplate {
            alpha,
            frames: self.frames,
            height,
            width,
            color: self.color,
            kind: self.kind,
        }
    }

    /// Loads a user-supplied alpha pack: a directory of 8- or 16-bit grayscale
    /// PNG frames named `%06d.png`.
    pub fn from_alpha_pack(dir: &Path, kind: DefectKind, color: [f32; 3]) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(input_err!("no alpha frames in {}", dir.display()));
        }
        let mut alpha = Vec::new();
        let mut dims = None;
        for p in &paths {
            let img = super::io::read_gray_png(p)?;
            if *dims.get_or_insert((img.1, img.2)) != (img.1, img.2) {
                return Err(input_err!("alpha frames in {} differ in size", dir.display()));
            }
            alpha.extend(img.0);
        }
        let (h, w) = dims.unwrap_or((0, 0));
        Self::new(alpha, paths.len(), h, w, color, kind)
    }
}

struct Canvas {
    alpha: Vec<f32>,
    height: usize,
    width: usize,
}

impl Canvas {
    fn new(height: usize, width: usize) -> Self {
        Self { alpha: vec![0.0; height * width], height, width }
    }

    /// Soft-edged ellipse: full opacity inside, one-pixel linear falloff.
    fn ellipse(&mut self, cy: f32, cx: f32, ry: f32, rx: f32, opacity: f32) {
        let pad = 1.5;
        let y0 = (cy - ry - pad).floor().max(0.0) as usize;
        let y1 = ((cy + ry + pad).ceil() as usize).min(self.height);
        let x0 = (cx - rx - pad).floor().max(0.0) as usize;
        let x1 = ((cx + rx + pad).ceil() as usize).min(self.width);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = (y as f32 + 0.5 - cy) / ry.max(0.3);
                let dx = (x as f32 + 0.5 - cx) / rx.max(0.3);
                // Distance to the boundary in pixels, approximately.
                let d = ((dy * dy + dx * dx).sqrt() - 1.0) * ry.min(rx).max(0.3);
                let a = (0.5 - d).clamp(0.0, 1.0) * opacity;
                let i = y * self.width + x;
                self.alpha[i] = self.alpha[i].max(a);
            }
        }
    }

    /// Vertical line with per-row centre `xs[y]`.
    fn vertical_path(&mut self, xs: &[f32], half_width: f32, opacity: f32, rows: std::ops::Range<usize>) {
        for y in rows {
            let xc = xs[y];
            let x0 = (xc - half_width - 1.5).floor().max(0.0) as usize;
            let x1 = ((xc + half_width + 1.5).ceil() as usize).min(self.width);
            for x in x0..x1 {
                let d = (x as f32 + 0.5 - xc).abs();
                let a = (half_width + 0.5 - d).clamp(0.0, 1.0) * opacity;
                let i = y * self.width + x;
                self.alpha[i] = self.alpha[i].max(a);
            }
        }
    }
}

fn random_walk(rng: &mut PortableRng, len: usize, start: f32, step: f32, lo: f32, hi: f32) -> Vec<f32> {
    let mut xs = Vec::with_capacity(len);
    let mut x = start;
    for _ in 0..len {
        xs.push(x);
        let z: f64 = rng.sample(StandardNormal);
        x = (x + step * z as f32).clamp(lo, hi);
    }
    xs
}

/// Random defect colour: dark or bright with a mild tint, as seen on colour prints.
fn defect_color(rng: &mut PortableRng) -> [f32; 3] {
    let bright = rng.random_bool(0.5);
    let base: f32 = if bright { rng.random_range(0.85..1.0) } else { rng.random_range(0.0..0.15) };
    let mut c = [0f32; 3];
    for v in c.iter_mut() {
        *v = (base + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
    }
    c
}

/// Draws one procedural template of the given kind.
pub fn generate_template(
    kind: DefectKind,
    frames: usize,
    height: usize,
    width: usize,
    rng: &mut PortableRng,
) -> DefectTemplate {
    let (hf, wf) = (height as f32, width as f32);
    let mut alpha = Vec::with_capacity(frames * height * width);
    match kind {
        DefectKind::SparseDust | DefectKind::IntensiveDust => {
            let area_scale = (hf * wf / 4096.0).max(0.25);
            let (lo, hi, rmin, rmax) = if kind == DefectKind::SparseDust {
                (2.0, 6.0, 0.7, 2.2)
            } else {
                (12.0, 30.0, 0.5, 1.4)
            };
            for _ in 0..frames {
                let mut canvas = Canvas::new(height, width);
                let count = (rng.random_range(lo..hi) * area_scale).round().max(1.0) as usize;
                for _ in 0..count {
                    let cy = rng.random_range(0.0..hf);
                    let cx = rng.random_range(0.0..wf);
                    let r = rng.random_range(rmin..rmax);
                    let elong = rng.random_range(0.6..1.6);
                    let opacity = rng.random_range(0.6..1.0);
                    canvas.ellipse(cy, cx, r * elong, r / elong, opacity);
                }
                alpha.extend(canvas.alpha);
            }
        }
        DefectKind::CigaretteBurn => {
            let run = rng.random_range(2..=4).min(frames);
            let start = rng.random_range(0..=frames - run);
            let r = rng.random_range(0.08..0.15) * hf.min(wf);
            let cy = if rng.random_bool(0.5) { rng.random_range(0.1..0.3) } else { rng.random_range(0.7..0.9) } * hf;
            let cx = if rng.random_bool(0.5) { rng.random_range(0.1..0.3) } else { rng.random_range(0.7..0.9) } * wf;
            let opacity = rng.random_range(0.8..1.0);
            for f in 0..frames {
                let mut canvas = Canvas::new(height, width);
                if (start..start + run).contains(&f) {
                    canvas.ellipse(cy, cx, r, r * rng.random_range(0.85..1.15), opacity);
                }
                alpha.extend(canvas.alpha);
            }
        }
        DefectKind::FlickerScratch => {
            let x = rng.random_range(0.05..0.95) * wf;
            let base = random_walk(rng, height, x, 0.15, 0.0, wf - 1.0);
            let half_width = rng.random_range(0.3..0.9);
            for _ in 0..frames {
                let mut canvas = Canvas::new(height, width);
                if rng.random_bool(0.6) {
                    let jitter = rng.random_range(-1.5..1.5);
                    let xs: Vec<f32> = base.iter().map(|v| (v + jitter).clamp(0.0, wf - 1.0)).collect();
                    let y0 = rng.random_range(0..height / 2 + 1);
                    let y1 = rng.random_range((height / 2).max(y0 + 1)..=height);
                    canvas.vertical_path(&xs, half_width, rng.random_range(0.3..0.9), y0..y1);
                }
                alpha.extend(canvas.alpha);
            }
        }
        DefectKind::ConstantScratch => {
            let mut x = rng.random_range(0.05..0.95) * wf;
            let drift = rng.random_range(-0.3..0.3);
            let half_width = rng.random_range(0.3..1.0);
            let opacity = rng.random_range(0.5..0.9);
            for _ in 0..frames {
                let mut canvas = Canvas::new(height, width);
                let xs = random_walk(rng, height, x, 0.08, 0.0, wf - 1.0);
                canvas.vertical_path(&xs, half_width, opacity, 0..height);
                alpha.extend(canvas.alpha);
                x = (x + drift).clamp(0.0, wf - 1.0);
            }
        }
    }

    let mut t = DefectTemplate {
        alpha,
        frames,
        height,
        width,
        color: defect_color(rng),
        kind,
    };
    // Tiny frames can make a single splat cover too much; drop such frames.
    let n = height * width;
    for f in 0..frames {
        if t.support_fraction(f) >= MAX_SUPPORT_FRACTION {
            t.alpha[f * n..(f + 1) * n].iter_mut().for_each(|a| *a = 0.0);
        }
    }
    t
}
