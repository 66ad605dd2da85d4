use crate::error::{input_err, internal_err, Result};
use crate::volume::FrameVolume;

use super::templates::DefectTemplate;

pub const DEFAULT_MASK_THRESHOLD: f32 = 0.02;

/// Binary per-pixel defect map, laid out `[frames, height, width]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefectMask {
    data: Vec<u8>,
    frames: usize,
    height: usize,
    width: usize,
}

impl DefectMask {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self { data: vec![0; frames * height * width], frames, height, width }
    }

    /// Fails unless every entry is exactly 0 or 1.
    pub fn new(data: Vec<u8>, frames: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(input_err!("mask length does not match dims"));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(input_err!("mask is not binary"));
        }
        Ok(Self { data, frames, height, width })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn get(&self, f: usize, y: usize, x: usize) -> bool {
        self.data[(f * self.height + y) * self.width + x] == 1
    }
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
    pub fn frame(&self, f: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[f * n..(f + 1) * n]
    }

    pub fn crop(&self, t: (usize, usize), y: (usize, usize), x: (usize, usize)) -> Result<Self> {
        if t.1 > self.frames || y.1 > self.height || x.1 > self.width || t.0 >= t.1 || y.0 >= y.1 || x.0 >= x.1 {
            return Err(input_err!("mask crop outside dims"));
        }
        let mut data = Vec::with_capacity((t.1 - t.0) * (y.1 - y.0) * (x.1 - x.0));
        for f in t.0..t.1 {
            for yy in y.0..y.1 {
                let s = (f * self.height + yy) * self.width;
                data.extend_from_slice(&self.data[s + x.0..s + x.1]);
            }
        }
        Ok(Self { data, frames: t.1 - t.0, height: y.1 - y.0, width: x.1 - x.0 })
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| f32::from(v)).collect()
    }
}

fn fit_templates(templates: &[DefectTemplate], frames: usize, height: usize, width: usize) -> Result<Vec<DefectTemplate>> {
    templates
        .iter()
        .map(|t| {
            let r = t.resized(height, width);
            if r.frames != frames || r.height != height || r.width != width {
                return Err(internal_err!(
                    "template {}x{}x{} incompatible with clip {frames}x{height}x{width}",
                    r.frames,
                    r.height,
                    r.width
                ));
            }
            Ok(r)
        })
        .collect()
}

/// Blends coloured defects into a clip: `out = (1 - a) * clip + a * color`,
/// where `a` is the largest template opacity at the pixel and `color` belongs
/// to the template attaining it (first one on ties).
pub fn colorize_and_composite(clip: &FrameVolume, templates: &[DefectTemplate]) -> Result<FrameVolume> {
    let (n, h, w, c) = clip.dims();
    let templates = fit_templates(templates, n, h, w)?;
    if templates.is_empty() {
        return Ok(clip.clone());
    }
    let mut out = clip.clone().into_data();
    for f in 0..n {
        for p in 0..h * w {
            let i = f * h * w + p;
            let mut a = 0f32;
            let mut color = [0f32; 3];
            for t in &templates {
                if t.alpha[i] > a {
                    a = t.alpha[i];
                    color = t.color;
                }
            }
            if a <= 0.0 {
                continue;
            }
            let px = &mut out[i * c..(i + 1) * c];
            if c == 3 {
                for (v, col) in px.iter_mut().zip(color.iter()) {
                    *v = (1.0 - a) * *v + a * col;
                }
            } else {
                let lum = 0.299 * color[0] + 0.587 * color[1] + 0.114 * color[2];
                px[0] = (1.0 - a) * px[0] + a * lum;
            }
        }
    }
    Ok(FrameVolume::new_clamped(out, n, h, w, c)?.with_fps(clip.fps))
}

/// `mask(p) = 1` iff the largest template opacity at `p` exceeds `threshold`.
pub fn compute_defect_mask(
    templates: &[DefectTemplate],
    threshold: f32,
    dims: (usize, usize, usize),
) -> Result<DefectMask> {
    let (n, h, w) = dims;
    let templates = fit_templates(templates, n, h, w)?;
    let mut mask = DefectMask::zeros(n, h, w);
    for (i, m) in mask.data.iter_mut().enumerate() {
        let a = templates.iter().map(|t| t.alpha[i]).fold(0f32, f32::max);
        *m = u8::from(a > threshold);
    }
    Ok(mask)
}
