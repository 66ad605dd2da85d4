//! Quality degradation: down-up rescale, block-DCT quantization and film grain.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Result};
use crate::rng;
use crate::volume::FrameVolume;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeConfig {
    /// Down-then-up resample factor in (0, 1]; 1 disables rescaling.
    pub rescale: f32,
    /// Compression quality (1..=100); `None` skips the DCT round trip.
    pub quality: Option<u8>,
    /// Standard deviation of the additive grain; 0 disables it.
    pub grain: f32,
    pub seed: u64,
}

impl DegradeConfig {
    pub fn identity() -> Self {
        Self {
            rescale: 1.0,
            quality: None,
            grain: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rescale > 0.0 && self.rescale <= 1.0) {
            return Err(config_err!("rescale factor {} outside (0,1]", self.rescale));
        }
        if !(self.grain >= 0.0) {
            return Err(config_err!("grain strength {} is negative", self.grain));
        }
        if let Some(q) = self.quality {
            if !(1..=100).contains(&q) {
                return Err(config_err!("compression quality {q} outside 1..=100"));
            }
        }
        Ok(())
    }
}

pub fn degrade_quality(clip: &FrameVolume, cfg: &DegradeConfig) -> Result<FrameVolume> {
    cfg.validate()?;
    let (n, h, w, c) = clip.dims();
    let mut out = clip.clone();

    if cfg.rescale < 1.0 {
        let sh = ((h as f32 * cfg.rescale).round() as usize).max(1);
        let sw = ((w as f32 * cfg.rescale).round() as usize).max(1);
        out = out.resize(sh, sw)?.resize(h, w)?;
    }

    let mut data = out.into_data();
    if let Some(q) = cfg.quality {
        let frame_len = h * w * c;
        for f in 0..n {
            dct_round_trip(&mut data[f * frame_len..(f + 1) * frame_len], h, w, c, q);
        }
    }

    if cfg.grain > 0.0 {
        let mut rng = rng::stream(cfg.seed, "grain");
        for v in data.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += cfg.grain * z as f32;
        }
    }

    Ok(FrameVolume::new_clamped(data, n, h, w, c)?.with_fps(clip.fps))
}

const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113,
    92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
];

/// IJG quality scaling of a base quantization table.
fn scaled_table(base: &[u16; 64], quality: u8) -> [f32; 64] {
    let q = i32::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0f32; 64];
    for (dst, &b) in t.iter_mut().zip(base.iter()) {
        *dst = ((i32::from(b) * scale + 50) / 100).clamp(1, 255) as f32;
    }
    t
}

fn dct_basis() -> [[f32; 8]; 8] {
    let mut m = [[0f32; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = (a * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos()) as f32;
        }
    }
    m
}

/// Quantizes one 8x8 block (values on the 0..255 scale, level shifted) in place.
fn quantize_block(block: &mut [f32; 64], table: &[f32; 64], basis: &[[f32; 8]; 8]) {
    let mut tmp = [0f32; 64];
    let mut coef = [0f32; 64];
    // rows: tmp = block * B^T
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| block[y * 8 + x] * basis[u][x]).sum();
        }
    }
    // cols: coef = B * tmp
    for v in 0..8 {
        for u in 0..8 {
            coef[v * 8 + u] = (0..8).map(|y| basis[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    for (c, q) in coef.iter_mut().zip(table.iter()) {
        *c = (*c / q).round() * q;
    }
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|v| basis[v][y] * coef[v * 8 + u]).sum();
        }
    }
    for y in 0..8 {
        for x in 0..8 {
            block[y * 8 + x] = (0..8).map(|u| tmp[y * 8 + u] * basis[u][x]).sum();
        }
    }
}

/// JPEG-style DCT quantization round trip of one channel-last frame.
///
/// Each channel is quantized independently with the scaled luminance table;
/// partial border blocks are edge-extended and cropped back.
fn dct_round_trip(frame: &mut [f32], h: usize, w: usize, c: usize, quality: u8) {
    let basis = dct_basis();
    let table = scaled_table(&LUMA_QUANT, quality);
    let mut plane = vec![0f32; h * w];
    for ch in 0..c {
        for (i, p) in plane.iter_mut().enumerate() {
            *p = frame[i * c + ch] * 255.0 - 128.0;
        }
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0f32; 64];
                for y in 0..8 {
                    let sy = (by + y).min(h - 1);
                    for x in 0..8 {
                        let sx = (bx + x).min(w - 1);
                        block[y * 8 + x] = plane[sy * w + sx];
                    }
                }
                quantize_block(&mut block, &table, &basis);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        plane[(by + y) * w + bx + x] = block[y * 8 + x];
                    }
                }
            }
        }
        for (i, p) in plane.iter().enumerate() {
            frame[i * c + ch] = (p + 128.0) / 255.0;
        }
    }
}
