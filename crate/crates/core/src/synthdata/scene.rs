//! Procedural flawless clips used when no source footage is supplied.
//!
//! A scene is a two-colour gradient backdrop with a slow low-frequency
//! modulation and a few soft blobs drifting at constant velocity. Everything
//! is band-limited so the latent autoencoder can represent it.

use rand::Rng;

use crate::rng;
use crate::volume::FrameVolume;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotMeta {
    pub camera_angle: String,
    pub shot_size: String,
}

pub const CAMERA_ANGLES: [&str; 4] = ["eye-level", "high-angle", "low-angle", "overhead"];
pub const SHOT_SIZES: [&str; 4] = ["wide", "medium", "close-up", "extreme close-up"];

struct Blob {
    cy: f32,
    cx: f32,
    vy: f32,
    vx: f32,
    sy: f32,
    sx: f32,
    color: [f32; 3],
    strength: f32,
}

fn random_color<R: Rng>(r: &mut R) -> [f32; 3] {
    [r.random_range(0.15..0.85), r.random_range(0.15..0.85), r.random_range(0.15..0.85)]
}

pub fn procedural_clip(seed: u64, frames: usize, height: usize, width: usize) -> (FrameVolume, ShotMeta) {
    let mut r = rng::stream(seed, "scene");
    let (hf, wf) = (height as f32, width as f32);
    let scale = hf.min(wf);

    let c0 = random_color(&mut r);
    let c1 = random_color(&mut r);
    let angle: f32 = r.random_range(0.0..std::f32::consts::TAU);
    let (gy, gx) = (angle.sin(), angle.cos());
    let wave_k: f32 = r.random_range(0.5..1.5) * std::f32::consts::TAU / scale;
    let wave_dir: f32 = r.random_range(0.0..std::f32::consts::TAU);
    let wave_amp: f32 = r.random_range(0.02..0.08);
    let wave_speed: f32 = r.random_range(-0.15..0.15);
    let flicker: f32 = r.random_range(-0.004..0.004);

    let blob_count = r.random_range(2..=4);
    let blobs: Vec<Blob> = (0..blob_count)
        .map(|_| Blob {
            cy: r.random_range(0.1..0.9) * hf,
            cx: r.random_range(0.1..0.9) * wf,
            vy: r.random_range(-0.8..0.8),
            vx: r.random_range(-0.8..0.8),
            sy: r.random_range(0.1..0.22) * scale,
            sx: r.random_range(0.1..0.22) * scale,
            color: random_color(&mut r),
            strength: r.random_range(0.6..0.95),
        })
        .collect();

    let meta = ShotMeta {
        camera_angle: CAMERA_ANGLES[r.random_range(0..CAMERA_ANGLES.len())].to_string(),
        shot_size: SHOT_SIZES[r.random_range(0..SHOT_SIZES.len())].to_string(),
    };

    let mut data = Vec::with_capacity(frames * height * width * 3);
    for f in 0..frames {
        let ft = f as f32;
        for y in 0..height {
            for x in 0..width {
                let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
                let g = 0.5 + 0.5 * ((py / hf - 0.5) * gy + (px / wf - 0.5) * gx);
                let wave = wave_amp
                    * (wave_k * (py * wave_dir.sin() + px * wave_dir.cos()) + wave_speed * ft).sin();
                let mut rgb = [0f32; 3];
                for ch in 0..3 {
                    rgb[ch] = c0[ch] * (1.0 - g) + c1[ch] * g + wave + flicker * ft;
                }
                for b in &blobs {
                    let dy = (py - (b.cy + b.vy * ft)) / b.sy;
                    let dx = (px - (b.cx + b.vx * ft)) / b.sx;
                    let a = b.strength * (-0.5 * (dy * dy + dx * dx)).exp();
                    for ch in 0..3 {
                        rgb[ch] = (1.0 - a) * rgb[ch] + a * b.color[ch];
                    }
                }
                data.extend(rgb.iter().map(|v| v.clamp(0.02, 0.98)));
            }
        }
    }
    let clip = FrameVolume::new(data, frames, height, width, 3).expect("procedural clip dims are valid");
    (clip, meta)
}

/// Placeholder caption in the form `<shot_size> <camera_angle> shot of ...`.
pub fn stub_caption(meta: &ShotMeta) -> String {
    format!(
        "{} {} shot of a softly lit scene with drifting shapes",
        meta.shot_size, meta.camera_angle
    )
}
